"""Fake quantization: uniform integer grids and MXFP4.

Quantization always runs along rows. A 2-D tensor is split into groups that
share one ``(scale, zero_point)`` pair:

* ``tensor``: the whole matrix is one group;
* ``row``: each row is a group (per-token for activations, per-output-channel
  for a transposed weight);
* ``group``: each row is cut into contiguous chunks of ``group_size``
  columns. A trailing partial chunk keeps its own parameters.

Parameters are stored as ``(rows, groups)`` arrays and expanded to element
shape on demand.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .linalg import as_matrix

FORMATS = ("int", "mxfp4", "none")
GRANULARITIES = ("tensor", "row", "group")
ROUNDINGS = ("half_away", "half_even")
SIGNED_RANGES = ("balanced", "full")

DEFAULT_CLIP_GRID = tuple(round(0.5 + 0.01 * i, 2) for i in range(51))

MX_GROUP = 32
MX_EMAX = 127
E2M1_BIAS = 1
E2M1_MANTISSA_BITS = 1
# magnitude index i encodes (E, M) = (i >> 1, i & 1); see e2m1_value
E2M1_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0])
E2M1_MAX = 6.0


@dataclass(frozen=True)
class QuantSpec:
    """Everything needed to build one quantizer.

    ``format="mxfp4"`` pins ``bits=4``, ``symmetric=True`` and 32-wide
    groups regardless of what was passed. ``format="none"`` disables
    quantization (identity).
    """

    format: str = "int"
    bits: int = 4
    symmetric: bool = True
    granularity: str = "row"
    group_size: int = 128
    clip: float = 1.0
    clip_search: bool = False
    clip_grid: tuple[float, ...] = DEFAULT_CLIP_GRID
    rounding: str = "half_away"
    signed_range: str = "balanced"

    def __post_init__(self) -> None:
        if self.format not in FORMATS:
            raise ValidationError(f"format must be one of {FORMATS}, got {self.format!r}")
        if self.format == "mxfp4":
            object.__setattr__(self, "bits", 4)
            object.__setattr__(self, "symmetric", True)
            object.__setattr__(self, "granularity", "group")
            object.__setattr__(self, "group_size", MX_GROUP)
        if self.granularity not in GRANULARITIES:
            raise ValidationError(
                f"granularity must be one of {GRANULARITIES}, got {self.granularity!r}"
            )
        if self.rounding not in ROUNDINGS:
            raise ValidationError(f"rounding must be one of {ROUNDINGS}, got {self.rounding!r}")
        if self.signed_range not in SIGNED_RANGES:
            raise ValidationError(
                f"signed_range must be one of {SIGNED_RANGES}, got {self.signed_range!r}"
            )
        if self.format == "int" and not 2 <= self.bits <= 16:
            raise ValidationError(f"bits must be in [2, 16], got {self.bits}")
        if self.granularity == "group" and self.group_size < 1:
            raise ValidationError(f"group_size must be positive, got {self.group_size}")
        if not 0.0 < self.clip <= 1.0:
            raise ValidationError(f"clip ratio must be in (0, 1], got {self.clip}")
        grid = tuple(float(r) for r in self.clip_grid)
        if not grid or any(not 0.0 < r <= 1.0 for r in grid):
            raise ValidationError("clip_grid must be a non-empty list of ratios in (0, 1]")
        object.__setattr__(self, "clip_grid", grid)

    @classmethod
    def mxfp4(cls, clip: float = 1.0, clip_search: bool = False, **kw) -> QuantSpec:
        return cls(format="mxfp4", clip=clip, clip_search=clip_search, **kw)

    @classmethod
    def disabled(cls) -> QuantSpec:
        return cls(format="none")

    def replace(self, **changes) -> QuantSpec:
        return dataclasses.replace(self, **changes)

    @property
    def enabled(self) -> bool:
        return self.format != "none"

    @property
    def code_range(self) -> tuple[int, int]:
        """Inclusive integer code range of a uniform-int spec."""
        if self.symmetric:
            qmax = 2**self.bits - 1 if self.signed_range == "full" else 2 ** (self.bits - 1) - 1
            return -qmax, qmax
        return 0, 2**self.bits - 1

    @property
    def label(self) -> str:
        if self.format == "none":
            return "fp"
        if self.format == "mxfp4":
            return "mxfp4"
        gran = {"tensor": "t", "row": "c"}.get(self.granularity, f"g{self.group_size}")
        return f"int{self.bits}-{'sym' if self.symmetric else 'asym'}-{gran}"


@dataclass(frozen=True)
class QuantParams:
    """Per-group step sizes and (asymmetric only) zero points, shape ``(rows, groups)``."""

    scales: np.ndarray
    zero_points: np.ndarray | None = None
    group_size: int | None = None

    def expand(self, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Broadcast scales and zero points to element shape."""
        rows, cols = shape
        scales = self.scales
        zeros = self.zero_points if self.zero_points is not None else np.zeros_like(scales)
        if self.group_size is not None:
            ngroups = -(-cols // self.group_size)
            if scales.shape[1] != ngroups:
                raise ValidationError(
                    f"params carry {scales.shape[1]} groups, tensor needs {ngroups}"
                )
            scales = np.repeat(scales, self.group_size, axis=1)[:, :cols]
            zeros = np.repeat(zeros, self.group_size, axis=1)[:, :cols]
        elif scales.shape[1] != 1:
            raise ValidationError(f"params shape {self.scales.shape} incompatible with {shape}")
        if scales.shape[0] not in (1, rows):
            raise ValidationError(f"params shape {self.scales.shape} incompatible with {shape}")
        return np.broadcast_to(scales, shape), np.broadcast_to(zeros, shape)


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams
    spec: QuantSpec = field(default_factory=QuantSpec)

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def scale_exponents(self) -> np.ndarray:
        """E8M0 exponents of an MXFP4 tensor."""
        return np.log2(self.params.scales).astype(np.int8)


def round_half(v: np.ndarray, mode: str) -> np.ndarray:
    if mode == "half_even":
        return np.rint(v)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _group_reduce(x: np.ndarray, spec: QuantSpec, fn) -> np.ndarray:
    """Apply a row-wise reduction ``fn(a, axis)`` per quantization group."""
    rows, cols = x.shape
    if spec.granularity == "tensor":
        return np.full((1, 1), fn(x, axis=None))
    if spec.granularity == "row":
        return fn(x, axis=1)[:, None]
    g = spec.group_size
    ngroups = -(-cols // g)
    pad = ngroups * g - cols
    # edge padding repeats the trailing group's own last value, so its stats are unchanged
    padded = np.pad(x, ((0, 0), (0, pad)), mode="edge") if pad else x
    return fn(padded.reshape(rows, ngroups, g), axis=2)


def _params_group_size(x: np.ndarray, spec: QuantSpec) -> int | None:
    return spec.group_size if spec.granularity == "group" else None


def compute_params(x, spec: QuantSpec, clip: float | None = None) -> QuantParams:
    """Min-max step sizes (and zero points) for every group of ``x``.

    ``clip`` overrides ``spec.clip``. Groups that are identically zero get
    ``scale = 1`` and ``zero_point = 0``.
    """
    x = as_matrix(x, "x")
    if x.size == 0:
        raise ValidationError("cannot quantize an empty tensor")
    if spec.format == "mxfp4":
        return _mx_params(x, spec.clip if clip is None else clip)
    if spec.format != "int":
        raise ValidationError(f"compute_params is undefined for format {spec.format!r}")
    ratio = spec.clip if clip is None else float(clip)
    gsize = _params_group_size(x, spec)
    qmin, qmax = spec.code_range
    if spec.symmetric:
        amax = _group_reduce(np.abs(x), spec, np.max) * ratio
        step = amax / qmax
        scales = np.where(step > 0.0, step, 1.0)
        return QuantParams(scales=scales, group_size=gsize)
    lo = np.minimum(_group_reduce(x, spec, np.min), 0.0) * ratio
    hi = np.maximum(_group_reduce(x, spec, np.max), 0.0) * ratio
    step = (hi - lo) / (qmax - qmin)
    # a span so small its step underflows is treated like an all-zero group
    degenerate = ~(step > 0.0)
    scales = np.where(degenerate, 1.0, step)
    zeros = np.clip(round_half(-lo / scales, spec.rounding), qmin, qmax)
    zeros = np.where(degenerate, 0.0, zeros)
    return QuantParams(scales=scales, zero_points=zeros, group_size=gsize)


def int_codes(v, spec: QuantSpec, scale, zero) -> np.ndarray:
    """Integer codes of ``v`` on the grid ``(scale, zero)`` (elementwise, broadcasting)."""
    qmin, qmax = spec.code_range
    return np.clip(round_half(np.asarray(v) / scale, spec.rounding) + zero, qmin, qmax)


def quantize(x, spec: QuantSpec, params: QuantParams | None = None) -> QuantizedTensor:
    x = as_matrix(x, "x")
    if spec.format == "mxfp4":
        if params is None:
            return mxfp4_quantize(x, spec.clip)
        scales, _ = params.expand(x.shape)
        return QuantizedTensor(mx_codes(x / scales), params, spec)
    if params is None:
        params = compute_params(x, spec)
    scales, zeros = params.expand(x.shape)
    codes = int_codes(x, spec, scales, zeros).astype(np.int32)
    return QuantizedTensor(codes, params, spec)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    if q.spec.format == "mxfp4":
        return mxfp4_dequantize(q)
    scales, zeros = q.params.expand(q.shape)
    return (q.codes - zeros) * scales


def quantize_dequantize(x, spec: QuantSpec, params: QuantParams) -> np.ndarray:
    """Round-trip ``x`` through the quantizer described by ``(spec, params)``."""
    return dequantize(quantize(x, spec, params))


def grid_values(v, spec: QuantSpec, scale, zero=0.0) -> np.ndarray:
    """Nearest representable value of ``v`` given per-element parameters."""
    if spec.format == "mxfp4":
        return E2M1_VALUES[mx_codes(np.asarray(v) / scale)] * scale
    return (int_codes(v, spec, scale, zero) - zero) * scale


def clip_search(x, spec: QuantSpec, grid=None) -> float:
    """Clip ratio from ``grid`` minimizing the squared round-trip error of ``x``.

    Ties go to the larger ratio.
    """
    x = as_matrix(x, "x")
    grid = spec.clip_grid if grid is None else tuple(grid)
    if not grid:
        raise ValidationError("clip grid is empty")
    best_ratio, best_err = None, math.inf
    for ratio in sorted({float(r) for r in grid}, reverse=True):
        params = compute_params(x, spec, clip=ratio)
        err = float(np.sum((quantize_dequantize(x, spec, params) - x) ** 2))
        if err < best_err:
            best_ratio, best_err = ratio, err
    return best_ratio


def resolve_params(x, spec: QuantSpec) -> QuantParams:
    """Parameters for ``x`` under ``spec``, running the clip search if requested."""
    clip = clip_search(x, spec) if spec.clip_search else spec.clip
    return compute_params(x, spec, clip=clip)


def fake_quantize(x, spec: QuantSpec) -> np.ndarray:
    """Quantize then dequantize ``x`` with parameters derived from ``x`` itself."""
    x = as_matrix(x, "x")
    if not spec.enabled:
        return x.copy()
    return quantize_dequantize(x, spec, resolve_params(x, spec))


# ---------------------------------------------------------------------------
# MXFP4
# ---------------------------------------------------------------------------


def e2m1_value(sign: int, exponent: int, mantissa: int) -> float:
    """Decode one E2M1 element from its sign, exponent and mantissa fields."""
    frac = mantissa * 2.0**-E2M1_MANTISSA_BITS
    if exponent == 0:
        mag = 2.0 ** (1 - E2M1_BIAS) * (0.0 + frac)
    else:
        mag = 2.0 ** (exponent - E2M1_BIAS) * (1.0 + frac)
    return -mag if sign else mag


def split_e2m1(pattern: int) -> tuple[int, int, int]:
    return (pattern >> 3) & 1, (pattern >> 1) & 3, pattern & 1


E2M1_VALUES = np.array([e2m1_value(*split_e2m1(p)) for p in range(16)])


def mx_codes(v) -> np.ndarray:
    """Nearest 4-bit E2M1 pattern for already-scaled values.

    Magnitudes beyond 6 saturate. Exact midpoints go to the neighbour whose
    mantissa bit is 0. Anything rounding to zero is encoded as +0.
    """
    v = np.asarray(v, dtype=np.float64)
    a = np.minimum(np.abs(v), E2M1_MAX)
    hi = np.clip(np.searchsorted(E2M1_MAGNITUDES, a, side="left"), 1, 7)
    lo = hi - 1
    d_lo = a - E2M1_MAGNITUDES[lo]
    d_hi = E2M1_MAGNITUDES[hi] - a
    take_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    idx = np.where(take_hi, hi, lo)
    neg = (v < 0) & (idx > 0)
    return (idx + 8 * neg).astype(np.uint8)


def _mx_exponents(amax: np.ndarray) -> np.ndarray:
    """Smallest ``e`` with ``amax <= 6 * 2**e``; zero groups get 0."""
    ratio = amax / E2M1_MAX
    mant, exp = np.frexp(ratio)  # ratio = mant * 2**exp, mant in [0.5, 1)
    e = np.where(mant == 0.5, exp - 1, exp)
    e = np.where(amax > 0.0, e, 0)
    return np.clip(e, -MX_EMAX, MX_EMAX)


def _mx_params(x: np.ndarray, clip: float) -> QuantParams:
    if not 0.0 < clip <= 1.0:
        raise ValidationError(f"clip ratio must be in (0, 1], got {clip}")
    spec = QuantSpec.mxfp4()
    amax = _group_reduce(np.abs(x), spec, np.max) * clip
    scales = np.ldexp(1.0, _mx_exponents(amax))
    return QuantParams(scales=scales, group_size=MX_GROUP)


def mxfp4_quantize(x, clip: float = 1.0) -> QuantizedTensor:
    """Encode ``x`` as MXFP4: 32-wide row groups sharing a power-of-two scale."""
    x = as_matrix(x, "x")
    params = _mx_params(x, clip)
    scales, _ = params.expand(x.shape)
    return QuantizedTensor(mx_codes(x / scales), params, QuantSpec.mxfp4(clip=clip))


def mxfp4_dequantize(q: QuantizedTensor) -> np.ndarray:
    codes = np.asarray(q.codes)
    if codes.min(initial=0) < 0 or codes.max(initial=0) > 15:
        raise ValidationError("MXFP4 codes must be 4-bit patterns in [0, 15]")
    scales, _ = q.params.expand(codes.shape)
    return E2M1_VALUES[codes.astype(np.intp)] * scales


def extra_bits_overhead(
    spec: QuantSpec,
    scale_storage_bits: int | None = None,
    row_length: int | None = None,
    rows: int = 1,
) -> float:
    """Average storage bits per weight spent on quantization parameters.

    Scales cost ``scale_storage_bits`` each (16 for FP16, 8 for E8M0; the
    default picks by format). Asymmetric specs also store an ``N``-bit zero
    point per group. Per-row and per-tensor granularity need ``row_length``
    (and ``rows`` for per-tensor) to know the group size.
    """
    if not spec.enabled:
        return 0.0
    if scale_storage_bits is None:
        scale_storage_bits = 8 if spec.format == "mxfp4" else 16
    if spec.granularity == "group":
        g = spec.group_size
    elif row_length is None:
        raise ValidationError(f"{spec.granularity} granularity needs row_length")
    else:
        g = row_length * (rows if spec.granularity == "tensor" else 1)
    bits = scale_storage_bits / g
    if not spec.symmetric:
        bits += spec.bits / g
    return bits


def fake_quantize_weight(w, spec: QuantSpec) -> np.ndarray:
    """Fake-quantize a ``(C_in, C_out)`` weight with one row per output channel."""
    w = as_matrix(w, "w")
    return fake_quantize(w.T, spec).T
