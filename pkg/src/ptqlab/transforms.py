"""Output-preserving reparameterizations applied before quantization.

Each transform rewrites ``(X, W, bias)`` so that ``X @ W + bias`` is unchanged
in exact arithmetic:

* shift:    ``X - t`` with ``bias + t @ W``
* scale:    ``X / s`` with ``s[:, None] * W``
* rotation: ``X @ O`` with ``O.T @ W``

The learned variants minimise the layer's fake-quantized output error by
gradient descent, treating rounding as the identity when differentiating.
Rotations are parameterized through the Cayley map so every iterate is
exactly orthogonal; scales are optimized in the log domain so they stay
positive.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bundle import LayerBundle
from .errors import ValidationError
from .linalg import as_matrix, cayley, check_seed, hadamard, orthogonality_error, random_orthogonal
from .quantizers import QuantSpec, fake_quantize, fake_quantize_weight

log = logging.getLogger(__name__)

KINDS = ("shift", "scale", "rotation")
SCALE_SOURCES = ("calibrated", "optimized")
ROTATION_SOURCES = ("identity", "hadamard", "random", "optimized")

DEFAULT_ALPHA = 0.5
DEFAULT_STEPS = 200
DEFAULT_ROTATION_LR = 0.1
DEFAULT_SCALE_LR = 0.05

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class TransformStep:
    """One entry of a transform recipe.

    ``source`` selects how the parameters are obtained: ``calibrated`` or
    ``optimized`` for scales; ``identity``, ``hadamard``, ``random`` or
    ``optimized`` for rotations. Shifts are always calibrated. Left unset it
    means ``hadamard`` for rotations and ``calibrated`` otherwise.
    """

    kind: str
    source: str | None = None
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    steps: int = DEFAULT_STEPS
    lr: float | None = None
    init: str = "hadamard"

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValidationError(f"transform kind must be one of {KINDS}, got {self.kind!r}")
        if self.source is None:
            object.__setattr__(self, "source", "hadamard" if self.kind == "rotation" else "calibrated")
        if self.kind == "shift" and self.source != "calibrated":
            raise ValidationError("shift only supports source 'calibrated'")
        if self.kind == "scale" and self.source not in SCALE_SOURCES:
            raise ValidationError(f"scale source must be one of {SCALE_SOURCES}")
        if self.kind == "rotation" and self.source not in ROTATION_SOURCES:
            raise ValidationError(f"rotation source must be one of {ROTATION_SOURCES}")
        if self.init not in ("hadamard", "random"):
            raise ValidationError("rotation init must be 'hadamard' or 'random'")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")
        check_seed(self.seed)

    @property
    def label(self) -> str:
        if self.kind == "shift":
            return "shifting"
        if self.kind == "scale":
            return "optimized scaling" if self.source == "optimized" else "scaling"
        if self.source == "optimized":
            return "optimized rotation"
        return "rotation" if self.source != "identity" else "identity rotation"


@dataclass(frozen=True)
class AppliedTransform:
    """A transform step together with the parameters it produced."""

    step: TransformStep
    params: np.ndarray
    history: tuple[float, ...] = field(default=())

    @property
    def kind(self) -> str:
        return self.step.kind


# ---------------------------------------------------------------------------
# shifting
# ---------------------------------------------------------------------------


def calibrate_shift(x) -> np.ndarray:
    """Per-channel midpoint ``(min + max) / 2`` of the activations."""
    x = as_matrix(x, "x")
    if x.shape[0] == 0:
        raise ValidationError("cannot calibrate a shift on zero tokens")
    return 0.5 * (x.min(axis=0) + x.max(axis=0))


def apply_shift(layer: LayerBundle, t) -> LayerBundle:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.shape != (layer.c_in,):
        raise ValidationError(f"shift has length {t.size}, layer has {layer.c_in} channels")
    bias = layer.bias if layer.bias is not None else np.zeros(layer.c_out)
    return layer.replace(calib=layer.calib - t, bias=bias + t @ layer.w)


# ---------------------------------------------------------------------------
# scaling
# ---------------------------------------------------------------------------


def calibrate_scale(x, w, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Migration scales ``max|X_j|**alpha / max|W_j|**(1 - alpha)``.

    Channels where either maximum is zero get ``s_j = 1`` and a
    ``RuntimeWarning``.
    """
    x = as_matrix(x, "x")
    w = as_matrix(w, "w")
    if x.shape[1] != w.shape[0]:
        raise ValidationError(f"x has {x.shape[1]} channels, w has {w.shape[0]} rows")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    xmax = np.abs(x).max(axis=0)
    wmax = np.abs(w).max(axis=1)
    dead = (xmax == 0.0) | (wmax == 0.0)
    if dead.any():
        warnings.warn(
            f"{int(dead.sum())} channel(s) have zero range; using scale 1 for them",
            RuntimeWarning,
            stacklevel=2,
        )
    safe_x = np.where(dead, 1.0, xmax)
    safe_w = np.where(dead, 1.0, wmax)
    return np.where(dead, 1.0, safe_x**alpha / safe_w ** (1.0 - alpha))


def apply_scale(layer: LayerBundle, s) -> LayerBundle:
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if s.shape != (layer.c_in,):
        raise ValidationError(f"scale has length {s.size}, layer has {layer.c_in} channels")
    if not np.all(s > 0.0) or not np.all(np.isfinite(s)):
        raise ValidationError("scales must be finite and strictly positive")
    return layer.replace(calib=layer.calib / s, w=layer.w * s[:, None])


# ---------------------------------------------------------------------------
# rotation
# ---------------------------------------------------------------------------


def make_rotation(n: int, source: str = "hadamard", seed: int = 0) -> np.ndarray:
    if source == "identity":
        return np.eye(n)
    if source == "hadamard":
        return hadamard(n)
    if source == "random":
        return random_orthogonal(n, seed)
    raise ValidationError(f"cannot build a rotation from source {source!r}")


def apply_rotation(layer: LayerBundle, o) -> LayerBundle:
    o = as_matrix(o, "rotation")
    if o.shape != (layer.c_in, layer.c_in):
        raise ValidationError(f"rotation must be {layer.c_in}x{layer.c_in}, got {o.shape}")
    err = orthogonality_error(o)
    if err > _ORTHO_TOL:
        raise ValidationError(f"rotation is not orthogonal (||O^T O - I||_F = {err:.3g})")
    return layer.replace(calib=layer.calib @ o, w=o.T @ layer.w)


# ---------------------------------------------------------------------------
# learned transforms
# ---------------------------------------------------------------------------


class QuantizedOutputObjective:
    """Normalized output error of a layer with fake-quantized inputs and weights.

    ``loss = ||Q_a(X') @ Q_w(W') - X @ W||_F^2 / ||X @ W||_F^2`` where
    ``(X', W')`` is the transformed pair. Bias is left out because none of
    the learned transforms touch it.

    Gradients use the straight-through rule: the quantization noise
    ``Q(v) - v`` is a constant. Passing the ``noise`` returned by a previous
    call freezes it, which turns the loss into a smooth function whose exact
    gradient is the straight-through one (this is what finite-difference
    checks compare against).

    Weight specs that request a clip search are evaluated at their fixed
    clip ratio here; searching on every step is too slow and not
    differentiable anyway.
    """

    def __init__(self, layer: LayerBundle, w_spec: QuantSpec, a_spec: QuantSpec) -> None:
        self.x = layer.calib
        self.w = layer.w
        self.w_spec = w_spec.replace(clip_search=False)
        self.a_spec = a_spec.replace(clip_search=False)
        self.target = self.x @ self.w
        self.norm = max(float(np.sum(self.target**2)), np.finfo(float).tiny)

    def transformed(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def pullback(self, params, g_x, g_w) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad(self, params, noise=None):
        """Return ``(loss, grad, noise)`` at ``params``."""
        params = np.asarray(params, dtype=np.float64)
        xh, wh = self.transformed(params)
        if noise is None:
            noise = (fake_quantize(xh, self.a_spec) - xh, fake_quantize_weight(wh, self.w_spec) - wh)
        xq = xh + noise[0]
        wq = wh + noise[1]
        resid = xq @ wq - self.target
        loss = float(np.sum(resid**2)) / self.norm
        g_x = (2.0 / self.norm) * resid @ wq.T
        g_w = (2.0 / self.norm) * xq.T @ resid
        return loss, self.pullback(params, g_x, g_w), noise

    def __call__(self, params, noise=None):
        loss, grad, _ = self.value_and_grad(params, noise)
        return loss, grad


class RotationObjective(QuantizedOutputObjective):
    """Output error as a function of the upper-triangular entries of a skew matrix ``A``.

    The rotation is ``O = O0 @ cayley(A)``, so ``A = 0`` reproduces ``O0``.
    """

    def __init__(self, layer, w_spec, a_spec, init: np.ndarray) -> None:
        super().__init__(layer, w_spec, a_spec)
        self.init = as_matrix(init, "init")
        n = layer.c_in
        self.n = n
        self.iu = np.triu_indices(n, k=1)

    @property
    def size(self) -> int:
        return len(self.iu[0])

    def skew(self, params: np.ndarray) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.iu] = params
        return a - a.T

    def rotation(self, params) -> np.ndarray:
        return self.init @ cayley(self.skew(np.asarray(params, dtype=np.float64)))

    def transformed(self, params):
        self._a = self.skew(params)
        self._q = cayley(self._a)
        o = self.init @ self._q
        return self.x @ o, o.T @ self.w

    def pullback(self, params, g_x, g_w):
        # X' = X O and W' = O^T W, O = O0 Q, Q = (I - A)^-1 (I + A)
        g_o = self.x.T @ g_x + self.w @ g_w.T
        g_q = self.init.T @ g_o
        eye = np.eye(self.n)
        g_a = np.linalg.solve((eye - self._a).T, g_q) @ (self._q + eye).T
        return (g_a - g_a.T)[self.iu]


class ScaleObjective(QuantizedOutputObjective):
    """Output error as a function of log-scales ``theta`` (``s = exp(theta)``)."""

    def transformed(self, params):
        s = np.exp(params)
        return self.x / s, self.w * s[:, None]

    def pullback(self, params, g_x, g_w):
        s = np.exp(params)
        xh = self.x / s
        wh = self.w * s[:, None]
        return -np.einsum("tj,tj->j", g_x, xh) + np.einsum("jo,jo->j", g_w, wh)


def _descend(objective: QuantizedOutputObjective, theta: np.ndarray, steps: int, lr: float):
    """Plain gradient descent returning the best iterate and the loss history."""
    best_theta, best_loss = theta.copy(), None
    history = []
    for i in range(steps + 1):
        loss, grad, _ = objective.value_and_grad(theta)
        history.append(loss)
        if best_loss is None or loss < best_loss:
            best_theta, best_loss = theta.copy(), loss
        if i == steps:
            break
        theta = theta - lr * grad
    log.debug("descent: initial %.6g, best %.6g over %d steps", history[0], best_loss, steps)
    return best_theta, history


def optimize_rotation(
    layer: LayerBundle,
    w_spec: QuantSpec,
    a_spec: QuantSpec,
    steps: int = DEFAULT_STEPS,
    lr: float = DEFAULT_ROTATION_LR,
    seed: int = 0,
    init: str = "hadamard",
    return_history: bool = False,
):
    """Learn an orthogonal ``C_in x C_in`` rotation for ``layer``.

    Starts from a Hadamard (or seeded random) rotation and returns the
    best iterate seen, so the result is never worse than the start.
    """
    if steps < 0:
        raise ValidationError(f"steps must be >= 0, got {steps}")
    o0 = make_rotation(layer.c_in, init, seed)
    objective = RotationObjective(layer, w_spec, a_spec, o0)
    theta, history = _descend(objective, np.zeros(objective.size), steps, lr)
    o = objective.rotation(theta)
    return (o, history) if return_history else o


def optimize_scale(
    layer: LayerBundle,
    w_spec: QuantSpec,
    a_spec: QuantSpec,
    steps: int = DEFAULT_STEPS,
    lr: float = DEFAULT_SCALE_LR,
    alpha: float = DEFAULT_ALPHA,
    return_history: bool = False,
):
    """Learn positive per-channel scales, initialized from calibration with ``alpha``."""
    if steps < 0:
        raise ValidationError(f"steps must be >= 0, got {steps}")
    s0 = calibrate_scale(layer.calib, layer.w, alpha)
    objective = ScaleObjective(layer, w_spec, a_spec)
    theta, history = _descend(objective, np.log(s0), steps, lr)
    s = s0 if np.array_equal(theta, np.log(s0)) else np.exp(theta)
    return (s, history) if return_history else s


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


def validate_steps(steps) -> tuple[TransformStep, ...]:
    steps = tuple(steps)
    if sum(step.kind == "shift" for step in steps) > 1:
        raise ValidationError("a transform recipe may contain at most one shift")
    return steps


def apply_transforms(
    layer: LayerBundle,
    steps,
    w_spec: QuantSpec,
    a_spec: QuantSpec,
    fit_rows: int | None = None,
) -> tuple[LayerBundle, list[AppliedTransform]]:
    """Calibrate and apply each step in order.

    Calibration and optimization see only the first ``fit_rows`` tokens;
    the resulting parameters are applied to every token.
    """
    steps = validate_steps(steps)
    applied = []
    for step in steps:
        fit = layer if fit_rows is None else layer.replace(calib=layer.calib[:fit_rows])
        history: tuple[float, ...] = ()
        if step.kind == "shift":
            params = calibrate_shift(fit.calib)
            layer = apply_shift(layer, params)
        elif step.kind == "scale":
            if step.source == "optimized":
                lr = DEFAULT_SCALE_LR if step.lr is None else step.lr
                params, hist = optimize_scale(
                    fit, w_spec, a_spec, step.steps, lr, step.alpha, return_history=True
                )
                history = tuple(hist)
            else:
                params = calibrate_scale(fit.calib, fit.w, step.alpha)
            layer = apply_scale(layer, params)
        else:
            if step.source == "optimized":
                lr = DEFAULT_ROTATION_LR if step.lr is None else step.lr
                params, hist = optimize_rotation(
                    fit, w_spec, a_spec, step.steps, lr, step.seed, step.init, return_history=True
                )
                history = tuple(hist)
            else:
                params = make_rotation(layer.c_in, step.source, step.seed)
            layer = apply_rotation(layer, params)
        applied.append(AppliedTransform(step, params, history))
    return layer, applied


def revert_transforms(layer: LayerBundle, applied) -> LayerBundle:
    """Undo ``applied`` (in reverse order), recovering the original layer."""
    for item in reversed(list(applied)):
        p = item.params
        if item.kind == "shift":
            layer = layer.replace(calib=layer.calib + p, bias=layer.bias - p @ layer.w)
        elif item.kind == "scale":
            layer = layer.replace(calib=layer.calib * p, w=layer.w / p[:, None])
        else:
            layer = layer.replace(calib=layer.calib @ p.T, w=p @ layer.w)
    return layer
