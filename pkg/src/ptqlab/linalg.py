"""Small dense linear algebra kernel.

Matrices are plain 2-D ``numpy.float64`` arrays. The factorizations that the
rounding algorithms depend on (Cholesky, LDL, truncated SVD) are written out
here rather than delegated to LAPACK, so the error behaviour is explicit:
non-positive pivots raise :class:`~ptqlab.errors.NotPositiveDefiniteError`
with a damping hint instead of returning NaNs.
"""

from __future__ import annotations

import numpy as np

from .errors import NotPositiveDefiniteError, NumericalError, ValidationError

_SYM_RTOL = 1e-8
_SEED_MAX = 2**64 - 1


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array (copying only if needed)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return m


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed <= _SEED_MAX:
        raise ValidationError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValidationError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _check_symmetric(h: np.ndarray) -> None:
    if h.shape[0] != h.shape[1]:
        raise ValidationError(f"expected a square matrix, got {h.shape}")
    scale = max(np.linalg.norm(h), np.finfo(float).tiny)
    if np.linalg.norm(h - h.T) > _SYM_RTOL * scale:
        raise ValidationError("matrix is not symmetric")


def _pivot_floor(h: np.ndarray, j: int) -> float:
    # pivots at round-off level mean the matrix is numerically singular
    return h.shape[0] * np.finfo(float).eps * abs(h[j, j])


def cholesky(h) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L @ L.T == h``.

    Raises:
        NotPositiveDefiniteError: a pivot is not positive beyond round-off. The message
            tells the caller to raise the Hessian damping.
    """
    h = as_matrix(h, "h")
    _check_symmetric(h)
    n = h.shape[0]
    L = np.zeros_like(h)
    for j in range(n):
        row = L[j, :j]
        d = h[j, j] - row @ row
        if not d > _pivot_floor(h, j):
            raise NotPositiveDefiniteError(j, float(d))
        ljj = np.sqrt(d)
        L[j, j] = ljj
        L[j + 1 :, j] = (h[j + 1 :, j] - L[j + 1 :, :j] @ row) / ljj
    return L


def ldl_decompose(h) -> tuple[np.ndarray, np.ndarray]:
    """Factor ``h = L @ diag(D) @ L.T`` with unit-lower-triangular ``L``."""
    h = as_matrix(h, "h")
    _check_symmetric(h)
    n = h.shape[0]
    L = np.eye(n)
    D = np.zeros(n)
    for j in range(n):
        ld = L[j, :j] * D[:j]
        d = h[j, j] - ld @ L[j, :j]
        if not d > _pivot_floor(h, j):
            raise NotPositiveDefiniteError(j, float(d))
        D[j] = d
        L[j + 1 :, j] = (h[j + 1 :, j] - L[j + 1 :, :j] @ ld) / d
    return L, D


def lower_triangular_inverse(L) -> np.ndarray:
    """Invert a nonsingular lower-triangular matrix by forward substitution."""
    L = as_matrix(L, "L")
    n = L.shape[0]
    inv = np.zeros_like(L)
    for i in range(n):
        if L[i, i] == 0.0:
            raise NumericalError(f"triangular matrix is singular at row {i}")
        # row i of L @ inv = e_i
        inv[i, : i + 1] = -(L[i, :i] @ inv[:i, : i + 1]) / L[i, i]
        inv[i, i] = 1.0 / L[i, i]
    return inv


def spd_inverse(h) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via its Cholesky factor."""
    linv = lower_triangular_inverse(cholesky(h))
    inv = linv.T @ linv
    return 0.5 * (inv + inv.T)


def _round_robin(n: int):
    """Yield rounds of disjoint index pairs covering every pair once (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            yield np.array(pairs, dtype=np.intp).T
        players = [players[0], players[-1]] + players[1:-1]


def _jacobi_svd_tall(a: np.ndarray, tol: float, max_sweeps: int):
    """One-sided (Hestenes) Jacobi SVD for ``rows >= cols``.

    Column pairs are orthogonalized in round-robin order; within a round the
    pairs are disjoint so the rotations are applied in one vectorized step.
    """
    m, n = a.shape
    U = a.copy()
    V = np.eye(n)
    rounds = list(_round_robin(n))
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            up, uq = U[:, p], U[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            up, uq = U[:, p], U[:, q]
            U[:, p], U[:, q] = c * up - s * uq, s * up + c * uq
            vp, vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma = np.sqrt(np.einsum("ij,ij->j", U, U))
    order = np.argsort(-sigma, kind="stable")
    sigma, U, V = sigma[order], U[:, order], V[:, order]
    cutoff = np.finfo(float).eps * max(m, n) * (sigma[0] if n else 0.0)
    live = sigma > cutoff
    U[:, live] /= sigma[live]
    if not live.all():
        U = _complete_basis(U[:, live], n)
    return U, sigma, V


def _complete_basis(q: np.ndarray, total: int) -> np.ndarray:
    """Extend orthonormal columns ``q`` to ``total`` orthonormal columns."""
    m, have = q.shape
    cols = [q[:, i] for i in range(have)]
    for i in range(m):
        if len(cols) == total:
            break
        v = np.zeros(m)
        v[i] = 1.0
        for _ in range(2):  # re-orthogonalize once for stability
            for c in cols:
                v -= (c @ v) * c
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            cols.append(v / norm)
    return np.column_stack(cols) if cols else np.zeros((m, 0))


def svd(m, tol: float = 1e-15, max_sweeps: int = 80):
    """Thin SVD ``m = U @ diag(S) @ V.T`` with non-increasing ``S``."""
    m = as_matrix(m, "m")
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        raise ValidationError("cannot decompose an empty matrix")
    if rows >= cols:
        return _jacobi_svd_tall(m, tol, max_sweeps)
    V, S, U = _jacobi_svd_tall(m.T, tol, max_sweeps)
    return U, S, V


def svd_topk(m, k: int):
    """Best rank-``k`` factors ``(U_k, S_k, V_k)`` of ``m`` in Frobenius norm."""
    m = as_matrix(m, "m")
    k = int(k)
    if not 1 <= k <= min(m.shape):
        raise ValidationError(f"rank k={k} out of range [1, {min(m.shape)}]")
    U, S, V = svd(m)
    return U[:, :k], S[:k], V[:, :k]


def hadamard(n: int) -> np.ndarray:
    """Orthonormal Sylvester-Hadamard matrix of order ``n`` (a power of two)."""
    n = int(n)
    if n < 1 or n & (n - 1):
        raise ValidationError(f"hadamard: power-of-two required, got n={n}")
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h / np.sqrt(n)


def random_orthogonal(n: int, seed: int) -> np.ndarray:
    """Haar-random orthogonal matrix, deterministic per ``seed``."""
    n = int(n)
    if n < 1:
        raise ValidationError(f"dimension must be >= 1, got {n}")
    rng = np.random.default_rng(check_seed(seed))
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
    return q * signs


def cayley(a) -> np.ndarray:
    """Cayley map ``(I - a)^-1 (I + a)`` of a skew-symmetric matrix."""
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ValidationError(f"cayley needs a square matrix, got {a.shape}")
    if np.linalg.norm(a + a.T) > 1e-10 * max(1.0, np.linalg.norm(a)):
        raise ValidationError("cayley needs a skew-symmetric matrix")
    eye = np.eye(a.shape[0])
    try:
        return np.linalg.solve(eye - a, eye + a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"I - a is singular: {exc}") from exc


def orthogonality_error(o) -> float:
    """``||O^T O - I||_F``."""
    o = np.asarray(o, dtype=np.float64)
    return float(np.linalg.norm(o.T @ o - np.eye(o.shape[1])))
