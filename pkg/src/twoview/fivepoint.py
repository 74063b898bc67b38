"""Minimal five-point essential matrix solver (Nister's reduction).

The essential matrix is parameterised over the 4-D nullspace of the 5x9
epipolar design matrix, ``E = x X + y Y + z Z + W``.  The cubic constraints
``det(E) = 0`` and ``2 E E^T E - tr(E E^T) E = 0`` give ten equations in the
twenty monomials of degree <= 3 in (x, y, z).  Gauss-Jordan elimination
followed by the three ``<e> - z<f>`` style subtractions leaves a 3x3 matrix
of polynomials in z whose determinant is the degree-10 polynomial; its real
roots (companion-matrix eigenvalues) yield up to ten solutions.
"""
from __future__ import annotations

import itertools

import numpy as np

from .errors import DegenerateSampleError

MAX_SOLUTIONS = 10

# Monomial order used by Nister: the first ten are eliminated.
_MONOMIALS = [
    (3, 0, 0), (0, 3, 0), (2, 1, 0), (1, 2, 0), (2, 0, 1), (2, 0, 0), (0, 2, 1), (0, 2, 0), (1, 1, 1), (1, 1, 0),
    (1, 0, 2), (1, 0, 1), (1, 0, 0), (0, 1, 2), (0, 1, 1), (0, 1, 0), (0, 0, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0),
]


def _product_map() -> np.ndarray:
    """(64, 20) 0/1 matrix folding a product of three linear forms in (x, y, z, 1) onto monomials."""
    unit = np.eye(4, 3, dtype=int)  # rows: exponent vectors of x, y, z, 1
    index = {m: i for i, m in enumerate(_MONOMIALS)}
    P = np.zeros((64, 20))
    for n, (a, b, c) in enumerate(itertools.product(range(4), repeat=3)):
        P[n, index[tuple(unit[a] + unit[b] + unit[c])]] = 1.0
    return P


_P = _product_map()
_EPS = np.zeros((3, 3, 3))
for _i, _j, _k in itertools.permutations(range(3)):
    _EPS[_i, _j, _k] = np.linalg.det(np.eye(3)[[_i, _j, _k]])


def _constraint_matrix(basis: np.ndarray) -> np.ndarray:
    """10x20 coefficients of the cubic constraints for ``basis`` of shape (4, 3, 3) = X, Y, Z, W."""
    L = np.moveaxis(basis, 0, -1)  # L[i, j] is the linear form of E_ij over (x, y, z, 1)
    det = np.einsum("pqr,pa,qb,rc->abc", _EPS, L[0], L[1], L[2])
    trace = 2.0 * np.einsum("ika,lkb,ljc->ijabc", L, L, L) - np.einsum("kla,klb,ijc->ijabc", L, L, L)
    cubic = np.concatenate([det.reshape(1, 64), trace.reshape(9, 64)])
    return cubic @ _P


def _split_row(row: np.ndarray):
    """Reduced row over the last ten monomials -> (x-part, y-part, 1-part) as ascending z-polynomials."""
    r = row
    return (
        np.array([r[2], r[1], r[0]]),          # x * (r12 + r11 z + r10 z^2)
        np.array([r[5], r[4], r[3]]),          # y * (...)
        np.array([r[9], r[8], r[7], r[6]]),    # 1 * (r19 + r18 z + r17 z^2 + r16 z^3)
    )


def _reduce(G: np.ndarray, top: int, bottom: int):
    """``<top> - z <bottom>`` for Gauss-Jordan rows (x/y/1 parts in z)."""
    out = []
    for pa, pb in zip(_split_row(G[top]), _split_row(G[bottom])):
        r = np.zeros(pa.size + 1)
        r[:-1] += pa
        r[1:] -= pb
        out.append(r)
    return out


_EXPONENTS = np.array(_MONOMIALS, dtype=float)
_DERIV_EXPONENTS = np.stack([np.maximum(_EXPONENTS - np.eye(3)[v], 0) for v in range(3)], axis=-1)


def _monomials(xyz: np.ndarray) -> np.ndarray:
    """(m, 20) monomial values for m points (x, y, z)."""
    return np.prod(xyz[:, None, :] ** _EXPONENTS, axis=2)


def _monomial_jacobian(xyz: np.ndarray) -> np.ndarray:
    """(m, 20, 3) partial derivatives of the monomial vector."""
    lower = np.prod(xyz[:, None, None, :] ** _DERIV_EXPONENTS.transpose(0, 2, 1)[None], axis=3)
    return _EXPONENTS[None] * lower


_CONVERGED = 1e-13  # constraint rows are scaled to unit max coefficient


def _polish(C: np.ndarray, xyz: np.ndarray, iterations: int = 3) -> np.ndarray:
    """Gauss-Newton on the ten cubic constraints for all roots at once.

    A root keeps its previous value whenever a step does not reduce its residual.
    """
    best = xyz.copy()
    best_r = np.linalg.norm(_monomials(best) @ C.T, axis=1)
    for _ in range(iterations):
        if best_r.max() < _CONVERGED:
            break
        r = _monomials(best) @ C.T
        J = np.einsum("ak,mkv->mav", C, _monomial_jacobian(best))
        JtJ = np.einsum("mai,maj->mij", J, J) + 1e-14 * np.eye(3)
        with np.errstate(all="ignore"):
            rhs = -np.einsum("mai,ma->mi", J, r)[..., None]
            try:
                step = np.linalg.solve(JtJ, rhs)[..., 0]
            except np.linalg.LinAlgError:  # planar or otherwise degenerate roots
                step = (np.linalg.pinv(JtJ) @ rhs)[..., 0]
            cand = best + step
            cr = np.linalg.norm(_monomials(cand) @ C.T, axis=1)
        ok = np.isfinite(cr) & (cr < best_r)
        if not ok.any():
            break
        best[ok], best_r[ok] = cand[ok], cr[ok]
    return best


def design_matrix(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Rows ``kron(q2, q1)`` so that ``row @ E.ravel() = q2^T E q1``."""
    h1 = np.column_stack([q1, np.ones(len(q1))])
    h2 = np.column_stack([q2, np.ones(len(q2))])
    return np.einsum("ni,nj->nij", h2, h1).reshape(len(q1), 9)


def five_point(q1, q2, *, rank_tol: float = 1e-10, imag_tol: float = 1e-6) -> list[np.ndarray]:
    """Essential matrices (unit Frobenius norm) consistent with five normalized correspondences.

    ``q1`` and ``q2`` are (5, 2) points already multiplied by ``K^-1``.  Returns
    at most ten candidates.  Raises DegenerateSampleError for configurations
    without a finite solution set (repeated points, zero or rotation-only
    motion, rank-deficient systems).
    """
    q1 = np.asarray(q1, dtype=np.float64).reshape(-1, 2)
    q2 = np.asarray(q2, dtype=np.float64).reshape(-1, 2)
    if q1.shape != (5, 2) or q2.shape != (5, 2):
        raise ValueError("five_point needs exactly five correspondences")
    for q in (q1, q2):
        d = np.linalg.norm(q[:, None] - q[None], axis=2)
        if np.any(d[np.triu_indices(5, 1)] <= 1e-12):
            raise DegenerateSampleError("degenerate sample: repeated point")

    A = design_matrix(q1, q2)
    _, s, Vt = np.linalg.svd(A)
    if s[4] <= rank_tol * s[0]:
        raise DegenerateSampleError("degenerate sample: rank-deficient epipolar system")
    basis = Vt[5:].reshape(4, 3, 3)

    C = _constraint_matrix(basis)
    C /= np.abs(C).max(axis=1, keepdims=True)
    lead = C[:, :10]
    if np.linalg.cond(lead) > 1e12:
        raise DegenerateSampleError("degenerate sample: singular elimination template")
    G = np.linalg.solve(lead, C[:, 10:])

    # Rows 4..9 of the reduced system correspond to x^2 z, x^2, y^2 z, y^2, xyz, xy.
    B = [_reduce(G, 4, 5), _reduce(G, 6, 7), _reduce(G, 8, 9)]
    det = np.zeros(11)
    for (i, j, k) in itertools.permutations(range(3)):
        term = np.convolve(np.convolve(B[0][i], B[1][j]), B[2][k])
        det[:term.size] += _EPS[i, j, k] * term
    det = np.trim_zeros(det, "b")
    scale = np.abs(det).max() if det.size else 0.0
    if det.size < 2 or scale == 0.0:
        raise DegenerateSampleError("degenerate sample: vanishing resultant")

    roots = np.roots(det[::-1] / scale)
    real = roots[np.abs(roots.imag) <= imag_tol * np.maximum(1.0, np.abs(roots))].real

    if real.size == 0:
        return []
    # B(z) for every root at once; each entry is a polynomial of degree <= 4 in z.
    coeffs = np.zeros((3, 3, 5))
    for r in range(3):
        for c in range(3):
            coeffs[r, c, :B[r][c].size] = B[r][c]
    Bz = np.einsum("rcd,md->mrc", coeffs, real[:, None] ** np.arange(5))
    v = np.linalg.svd(Bz)[2][:, -1]
    keep = np.abs(v[:, 2]) >= 1e-12 * np.abs(v).max(axis=1)
    if not keep.any():
        return []
    v, real = v[keep], real[keep]
    xyz = _polish(C, np.column_stack([v[:, 0] / v[:, 2], v[:, 1] / v[:, 2], real]))

    out = []
    for x, y, z in xyz:
        E = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        n = np.linalg.norm(E)
        if not np.isfinite(n) or n == 0:
            continue
        out.append(E / n)
    return out[:MAX_SOLUTIONS]
