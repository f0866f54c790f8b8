"""Quantization-error mitigation for linear-layer weights.

Weights are ``(C_in, C_out)``. Every output channel is a row of ``W.T`` and
is rounded coordinate by coordinate along ``C_in``; the Hessian
``H = 2 X^T X`` (damped) couples those coordinates. Quantization parameters
come from the uncompensated weight and stay fixed while rounding.

Two self-compensating roundings are provided and must agree:

* :func:`gptq_quantize` walks columns in blocks, pushing each residual onto
  the remaining columns through the Cholesky factor of ``H^-1``;
* :func:`ldlq_quantize` feeds back accumulated errors through the
  unit-upper factor of ``H = U D U^T``.

:func:`brute_force_round` finds the exact optimum for small problems and
serves as the reference for both. Low-rank branches fit ``W - W_q`` with a
truncated SVD, optionally after reweighting input channels.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import NotPositiveDefiniteError, ValidationError
from .linalg import as_matrix, cholesky, ldl_decompose, spd_inverse, svd_topk
from .quantizers import (
    E2M1_VALUES,
    QuantizedTensor,
    QuantSpec,
    grid_values,
    int_codes,
    mx_codes,
    resolve_params,
)

DEFAULT_DAMPING = 0.01
DEFAULT_BLOCK = 128
BRUTE_FORCE_MAX_DIM = 16

_MX_GRID = np.unique(E2M1_VALUES)


@dataclass(frozen=True)
class Hessian:
    h: np.ndarray
    damping: float = DEFAULT_DAMPING

    @property
    def dim(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class LowRankBranch:
    """Factors of the correction ``A @ B``: ``a`` is ``(C_in, r)``, ``b`` is ``(r, C_out)``."""

    a: np.ndarray
    b: np.ndarray

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    def dense(self) -> np.ndarray:
        return self.a @ self.b


@dataclass(frozen=True)
class MitigationResult:
    """Outcome of one weight rounding.

    Attributes:
        w_q: Codes and parameters in row layout (``W.T``, one row per output
            channel).
        w_dequant: Dequantized weight in the original ``(C_in, C_out)`` layout.
        proxy_loss: ``sum over rows of d^T H d`` with ``d = W_q - W``.
        row_losses: The per-row terms of ``proxy_loss``.
        branch: Optional low-rank correction fitted afterwards.
    """

    w_q: QuantizedTensor
    w_dequant: np.ndarray
    proxy_loss: float
    row_losses: np.ndarray
    branch: LowRankBranch | None = None


def build_hessian(x, damping: float = DEFAULT_DAMPING) -> Hessian:
    """Layer Hessian ``2 X^T X + damping * mean(diag) * I`` from ``(tokens, C_in)`` inputs.

    Raises:
        NotPositiveDefiniteError: the damped matrix still cannot be factored.
    """
    x = as_matrix(x, "x")
    if x.shape[0] < 1:
        raise ValidationError("need at least one calibration token")
    if damping < 0:
        raise ValidationError(f"damping must be >= 0, got {damping}")
    h = 2.0 * (x.T @ x)
    h = 0.5 * (h + h.T)
    h[np.diag_indices_from(h)] += damping * float(np.mean(np.diag(h)))
    try:
        cholesky(h)
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(
            exc.index, exc.pivot, f"damping {damping} is too small; increase it"
        ) from exc
    return Hessian(h, damping)


def proxy_losses(w, w_q, h: Hessian) -> np.ndarray:
    """Per-output-channel ``d^T H d`` for ``d = w_q - w``."""
    delta = np.asarray(w_q, dtype=np.float64) - np.asarray(w, dtype=np.float64)
    return np.einsum("io,io->o", h.h @ delta, delta)


def _check(w, h: Hessian) -> np.ndarray:
    w = as_matrix(w, "w")
    if h.h.shape != (w.shape[0], w.shape[0]):
        raise ValidationError(f"Hessian {h.h.shape} does not match weight rows {w.shape[0]}")
    return w


def _fixed_grid(wt: np.ndarray, spec: QuantSpec):
    if not spec.enabled:
        raise ValidationError("weight rounding needs an enabled quantization spec")
    params = resolve_params(wt, spec)
    scales, zeros = params.expand(wt.shape)
    return params, np.array(scales), np.array(zeros)


def _result(w, q_rows, params, scales, zeros, spec, h) -> MitigationResult:
    if spec.format == "mxfp4":
        codes = mx_codes(q_rows / scales)
    else:
        codes = int_codes(q_rows, spec, scales, zeros).astype(np.int32)
    w_dequant = q_rows.T.copy()
    rows = proxy_losses(w, w_dequant, h)
    return MitigationResult(
        w_q=QuantizedTensor(codes, params, spec),
        w_dequant=w_dequant,
        proxy_loss=float(rows.sum()),
        row_losses=rows,
    )


def rtn_quantize(w, h: Hessian, spec: QuantSpec) -> MitigationResult:
    """Round-to-nearest with the same fixed parameters the compensating methods use."""
    w = _check(w, h)
    wt = w.T
    params, scales, zeros = _fixed_grid(wt, spec)
    q = grid_values(wt, spec, scales, zeros)
    return _result(w, q, params, scales, zeros, spec, h)


def gptq_quantize(w, h: Hessian, spec: QuantSpec, block: int = DEFAULT_BLOCK) -> MitigationResult:
    w = _check(w, h)
    if block <= 0:
        raise ValidationError(f"block size must be positive, got {block}")
    n = w.shape[0]
    block = min(block, n)
    wt = w.T.copy()
    params, scales, zeros = _fixed_grid(wt, spec)
    upper = cholesky(spd_inverse(h.h)).T
    q = np.zeros_like(wt)
    for i1 in range(0, n, block):
        i2 = min(i1 + block, n)
        w1 = wt[:, i1:i2].copy()
        err1 = np.zeros_like(w1)
        u1 = upper[i1:i2, i1:i2]
        for j in range(i2 - i1):
            col = i1 + j
            target = w1[:, j]
            qc = grid_values(target, spec, scales[:, col], zeros[:, col])
            q[:, col] = qc
            err = (target - qc) / u1[j, j]
            w1[:, j:] -= np.outer(err, u1[j, j:])
            err1[:, j] = err
        wt[:, i2:] -= err1 @ upper[i1:i2, i2:]
    return _result(w, q, params, scales, zeros, spec, h)


def feedback_factor(h: Hessian) -> tuple[np.ndarray, np.ndarray]:
    """Unit-upper ``U`` and ``D`` with ``H = U diag(D) U^T``.

    Obtained from the ordinary LDL factorization of the index-reversed
    Hessian.
    """
    L, D = ldl_decompose(h.h[::-1, ::-1])
    return L[::-1, ::-1].copy(), D[::-1].copy()


def ldlq_quantize(w, h: Hessian, spec: QuantSpec) -> MitigationResult:
    w = _check(w, h)
    wt = w.T
    params, scales, zeros = _fixed_grid(wt, spec)
    upper, _ = feedback_factor(h)
    q = np.zeros_like(wt)
    delta = np.zeros_like(wt)
    for k in range(wt.shape[1]):
        target = wt[:, k] - delta[:, :k] @ upper[:k, k]
        q[:, k] = grid_values(target, spec, scales[:, k], zeros[:, k])
        delta[:, k] = q[:, k] - wt[:, k]
    return _result(w, q, params, scales, zeros, spec, h)


def grid_neighbors(v, spec: QuantSpec, scale, zero) -> tuple[np.ndarray, np.ndarray]:
    """Largest grid value ``<= v`` and smallest ``>= v`` (clamped to the grid ends)."""
    v = np.asarray(v, dtype=np.float64)
    if spec.format == "mxfp4":
        grid = _MX_GRID
        u = v / scale
        hi_idx = np.clip(np.searchsorted(grid, u, side="left"), 0, grid.size - 1)
        lo_idx = np.clip(np.searchsorted(grid, u, side="right") - 1, 0, grid.size - 1)
        return grid[lo_idx] * scale, grid[hi_idx] * scale
    qmin, qmax = spec.code_range
    u = v / scale
    lo = np.clip(np.floor(u) + zero, qmin, qmax)
    hi = np.clip(np.ceil(u) + zero, qmin, qmax)
    return (lo - zero) * scale, (hi - zero) * scale


def _grid_axis(spec: QuantSpec, scale: float, zero: float) -> np.ndarray:
    """Every representable value of one coordinate, ascending."""
    if spec.format == "mxfp4":
        return _MX_GRID * scale
    qmin, qmax = spec.code_range
    return (np.arange(qmin, qmax + 1) - zero) * scale


def _sphere_search(w, r, grids, radius, start):
    """Depth-first branch and bound for ``min ||R (q - w)||^2`` over ``q`` in the grids.

    ``R`` is upper triangular, so coordinates are fixed from last to first and
    the partial sum of squared terms is a lower bound on the full loss.
    Candidates at each level are visited in order of increasing cost.
    """
    n = w.size
    best = [radius, start.copy()]
    delta = np.zeros(n)

    def visit(k, partial):
        if k < 0:
            if partial < best[0]:
                best[0] = partial
                best[1] = w + delta
            return
        c = r[k, k + 1 :] @ delta[k + 1 :]
        grid = grids[k]
        terms = (r[k, k] * (grid - w[k]) + c) ** 2
        for i in np.argsort(terms, kind="stable"):
            total = partial + terms[i]
            if total >= best[0]:
                break
            delta[k] = grid[i] - w[k]
            visit(k - 1, total)
        delta[k] = 0.0

    visit(n - 1, 0.0)
    return best[1]


def brute_force_round(w, h: Hessian, spec: QuantSpec, search: str = "full") -> MitigationResult:
    """Exact minimizer of ``d^T H d`` per output channel, for small ``C_in``.

    ``search="neighbors"`` enumerates all ``2**C_in`` floor/ceil choices
    around the original weights. ``search="full"`` (default) starts from
    that optimum and runs an exact branch-and-bound over the whole code grid,
    so its loss lower-bounds every rounding that uses the same parameters,
    including ones whose compensation moved a weight past its floor/ceil pair.
    """
    w = _check(w, h)
    n = w.shape[0]
    if n > BRUTE_FORCE_MAX_DIM:
        raise ValidationError(f"brute force needs C_in <= {BRUTE_FORCE_MAX_DIM}, got {n}")
    if search not in ("full", "neighbors"):
        raise ValidationError(f"search must be 'full' or 'neighbors', got {search!r}")
    wt = w.T
    params, scales, zeros = _fixed_grid(wt, spec)
    lo, hi = grid_neighbors(wt, spec, scales, zeros)
    choices = np.array(list(itertools.product((0.0, 1.0), repeat=n)))
    r_factor = cholesky(h.h).T if search == "full" else None
    q = np.empty_like(wt)
    for row in range(wt.shape[0]):
        cand = lo[row] + choices * (hi[row] - lo[row])
        delta = cand - wt[row]
        losses = np.einsum("ki,ij,kj->k", delta, h.h, delta)
        best = int(np.argmin(losses))
        q[row] = cand[best]
        if r_factor is not None:
            grids = [_grid_axis(spec, scales[row, k], zeros[row, k]) for k in range(n)]
            # a hair above the incumbent so an exact tie keeps the neighbour solution
            radius = losses[best] * (1.0 + 1e-12) + np.finfo(float).tiny
            q[row] = _sphere_search(wt[row], r_factor, grids, radius, q[row])
    return _result(w, q, params, scales, zeros, spec, h)


def lowrank_compensate(w, w_q_dequant, k: int) -> LowRankBranch:
    """Rank-``k`` SVD fit of ``W - W_q``: ``A = U_k``, ``B = S_k V_k^T``."""
    w = as_matrix(w, "w")
    w_q = as_matrix(w_q_dequant, "w_q")
    if w.shape != w_q.shape:
        raise ValidationError(f"shape mismatch {w.shape} vs {w_q.shape}")
    u, s, v = svd_topk(w - w_q, k)
    return LowRankBranch(u, s[:, None] * v.T)


def scaled_lowrank_compensate(w, w_q_dequant, k: int, s) -> LowRankBranch:
    """SVD fit of ``diag(s) (W - W_q)`` with the scale undone on ``A``."""
    w = as_matrix(w, "w")
    w_q = as_matrix(w_q_dequant, "w_q")
    if w.shape != w_q.shape:
        raise ValidationError(f"shape mismatch {w.shape} vs {w_q.shape}")
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.shape != (w.shape[0],):
        raise ValidationError(f"scale has length {s.size}, expected {w.shape[0]}")
    if not np.all(s > 0.0) or not np.all(np.isfinite(s)):
        raise ValidationError("scales must be finite and strictly positive")
    u, sv, v = svd_topk(s[:, None] * (w - w_q), k)
    return LowRankBranch(u / s[:, None], sv[:, None] * v.T)


def salience_scales(x) -> np.ndarray:
    """Per-channel activation maxima normalized to geometric mean 1.

    Dead channels borrow the smallest live maximum so every scale stays
    positive.
    """
    x = as_matrix(x, "x")
    m = np.abs(x).max(axis=0)
    live = m > 0.0
    if not live.any():
        return np.ones_like(m)
    m = np.where(live, m, m[live].min())
    return m / np.exp(np.mean(np.log(m)))


def layer_output(x, w_q_dequant, branch: LowRankBranch | None = None, bias=None) -> np.ndarray:
    """``X @ W_q + (X @ A) @ B + bias``."""
    x = as_matrix(x, "x")
    w_q = as_matrix(w_q_dequant, "w_q")
    if x.shape[1] != w_q.shape[0]:
        raise ValidationError(f"x has {x.shape[1]} channels, weight expects {w_q.shape[0]}")
    y = x @ w_q
    if branch is not None:
        if branch.a.shape[0] != w_q.shape[0] or branch.b.shape[1] != w_q.shape[1]:
            raise ValidationError("low-rank branch does not match the weight shape")
        y = y + (x @ branch.a) @ branch.b
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y
