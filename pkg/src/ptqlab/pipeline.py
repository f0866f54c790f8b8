"""End-to-end recipes over bundles of independent linear layers.

A recipe is: transforms -> activation/weight fake quantization -> error
mitigation. :func:`run_recipe` executes it on every layer of a
:class:`~ptqlab.bundle.ModelBundle` and measures how far the quantized layer
output drifts from the full-precision one on held-out calibration tokens.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bundle import LayerBundle, ModelBundle
from .errors import PTQError, StageError, ValidationError
from .linalg import check_seed
from .mitigation import (
    DEFAULT_BLOCK,
    DEFAULT_DAMPING,
    build_hessian,
    gptq_quantize,
    layer_output,
    lowrank_compensate,
    proxy_losses,
    rtn_quantize,
    salience_scales,
    scaled_lowrank_compensate,
)
from .quantizers import QuantSpec, extra_bits_overhead, fake_quantize
from .transforms import TransformStep, apply_transforms, validate_steps

log = logging.getLogger(__name__)

REPORT_FORMAT = "ptqlab-report"
REPORT_VERSION = 1
DEFAULT_RANK = 32
DEFAULT_HOLDOUT = 0.25
BRANCH_STORAGE_BITS = 16

MITIGATIONS = ("gptq", "lowrank", "scaled_lowrank")
SYMMETRY_COMBOS = {
    "Sym": (True, True),
    "W-Asym": (False, True),
    "A-Asym": (True, False),
    "Asym": (False, False),
}
METRICS = (
    "weight_frob_err",
    "output_mse",
    "proxy_loss",
    "flatness_max_over_mean",
    "kurtosis",
    "bits_per_weight",
    "branch_bits_per_weight",
)


def default_weight_spec() -> QuantSpec:
    return QuantSpec(bits=4, symmetric=True, granularity="row", clip_search=True)


def default_activation_spec() -> QuantSpec:
    return QuantSpec(bits=4, symmetric=False, granularity="row")


@dataclass(frozen=True)
class MitigationStep:
    kind: str
    block: int = DEFAULT_BLOCK
    rank: int = DEFAULT_RANK

    def __post_init__(self) -> None:
        if self.kind not in MITIGATIONS:
            raise ValidationError(f"mitigation must be one of {MITIGATIONS}, got {self.kind!r}")
        if self.block <= 0:
            raise ValidationError(f"GPTQ block size must be positive, got {self.block}")
        if self.rank <= 0:
            raise ValidationError(f"low-rank k must be positive, got {self.rank}")

    @property
    def label(self) -> str:
        return {"gptq": "GPTQ", "lowrank": "low-rank", "scaled_lowrank": "scaled low-rank"}[
            self.kind
        ]


@dataclass(frozen=True)
class Recipe:
    """What to do to every layer.

    Attributes:
        transforms: Pre-quantization steps, applied in order.
        w_spec: Weight quantizer (rows are output channels).
        a_spec: Activation quantizer (rows are tokens).
        mitigation: Ordered subset of gptq / lowrank / scaled_lowrank.
        damping: Hessian damping as a fraction of the mean diagonal.
        seed: Global seed, recorded in the report.
        holdout: Fraction of calibration tokens (taken from the end) used only
            for evaluation.
        name: Free-form label carried into reports.
    """

    transforms: tuple[TransformStep, ...] = ()
    w_spec: QuantSpec = field(default_factory=default_weight_spec)
    a_spec: QuantSpec = field(default_factory=default_activation_spec)
    mitigation: tuple[MitigationStep, ...] = ()
    damping: float = DEFAULT_DAMPING
    seed: int = 0
    holdout: float = DEFAULT_HOLDOUT
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "transforms", validate_steps(self.transforms))
        object.__setattr__(self, "mitigation", tuple(self.mitigation))
        kinds = [m.kind for m in self.mitigation]
        if len(set(kinds)) != len(kinds):
            raise ValidationError("each mitigation may appear at most once")
        if "lowrank" in kinds and "scaled_lowrank" in kinds:
            raise ValidationError("use at most one of lowrank / scaled_lowrank")
        if "gptq" in kinds and kinds.index("gptq") != 0:
            raise ValidationError("gptq must precede the low-rank branch")
        if self.damping < 0:
            raise ValidationError(f"damping must be >= 0, got {self.damping}")
        if not 0.0 < self.holdout < 1.0:
            raise ValidationError(f"holdout must be in (0, 1), got {self.holdout}")
        check_seed(self.seed)

    def replace(self, **changes) -> Recipe:
        return dataclasses.replace(self, **changes)

    def mitigation_step(self, kind: str) -> MitigationStep | None:
        return next((m for m in self.mitigation if m.kind == kind), None)

    @property
    def dn_label(self) -> str:
        return " + ".join(step.label for step in self.transforms) or "-"

    @property
    def ec_label(self) -> str:
        return "+".join(m.label for m in self.mitigation) or "-"

    def to_dict(self) -> dict:
        def spec_dict(spec: QuantSpec) -> dict:
            d = dataclasses.asdict(spec)
            d["clip_grid"] = list(spec.clip_grid)
            return d

        return {
            "name": self.name,
            "seed": self.seed,
            "damping": self.damping,
            "holdout": self.holdout,
            "transforms": [dataclasses.asdict(step) for step in self.transforms],
            "w_spec": spec_dict(self.w_spec),
            "a_spec": spec_dict(self.a_spec),
            "mitigation": [dataclasses.asdict(m) for m in self.mitigation],
        }


@dataclass
class LayerRecord:
    name: str
    weight_frob_err: float
    output_mse: float
    proxy_loss: float
    flatness_max_over_mean: float
    kurtosis: float
    bits_per_weight: float
    branch_bits_per_weight: float = 0.0


@dataclass
class Report:
    """Metrics of one recipe over a model, one record per layer."""

    label: str
    dn: str
    ec: str
    w_format: str
    a_format: str
    layers: list[LayerRecord]
    recipe: dict
    warnings: list[str] = field(default_factory=list)
    artifacts: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def aggregate(self) -> dict[str, float]:
        return {m: float(np.mean([getattr(r, m) for r in self.layers])) for m in METRICS}

    def metric(self, name: str) -> float:
        return self.aggregate[name]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "dn": self.dn,
            "ec": self.ec,
            "w_format": self.w_format,
            "a_format": self.a_format,
            "aggregate": self.aggregate,
            "layers": [dataclasses.asdict(r) for r in self.layers],
            "recipe": self.recipe,
            "warnings": list(self.warnings),
        }


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _layer_dims(layers: int, dims) -> list[tuple[int, int]]:
    if isinstance(dims, (int, np.integer)):
        dims = [int(dims)] * (layers + 1)
    dims = [int(d) for d in dims]
    if len(dims) == 1:
        dims = dims * (layers + 1)
    if len(dims) != layers + 1:
        raise ValidationError(f"dims must hold 1 or {layers + 1} sizes, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ValidationError(f"dims must be positive, got {dims}")
    return list(zip(dims[:-1], dims[1:]))


def gen_synthetic_model(
    layers: int = 4,
    dims=128,
    tokens: int = 512,
    outlier_channels: int = 4,
    outlier_gain: float = 100.0,
    skew: float = 1.0,
    seed: int = 0,
) -> ModelBundle:
    """Gaussian layers whose calibration activations carry planted outliers.

    ``dims`` is either one size (square layers) or ``layers + 1`` sizes,
    layer ``i`` mapping ``dims[i]`` to ``dims[i + 1]`` channels. Every input
    channel ``j`` gets a positive offset ``skew * u_j`` (``u_j`` uniform in
    [0, 1)); a seeded subset of ``outlier_channels`` channels is then
    multiplied by ``outlier_gain``. Weights are ``N(0, 1 / C_in)``.
    """
    if layers < 1 or tokens < 2:
        raise ValidationError("need at least one layer and two tokens")
    if outlier_gain <= 0:
        raise ValidationError(f"outlier_gain must be positive, got {outlier_gain}")
    shapes = _layer_dims(layers, dims)
    if any(not 0 <= outlier_channels <= c_in for c_in, _ in shapes):
        raise ValidationError(f"outlier_channels={outlier_channels} exceeds a layer width")
    children = np.random.SeedSequence(check_seed(seed)).spawn(layers)
    bundles = []
    for i, ((c_in, c_out), child) in enumerate(zip(shapes, children)):
        rng = np.random.default_rng(child)
        gain = np.ones(c_in)
        gain[rng.choice(c_in, size=outlier_channels, replace=False)] = outlier_gain
        offsets = skew * rng.uniform(0.0, 1.0, size=c_in)
        x = (rng.standard_normal((tokens, c_in)) + offsets) * gain
        w = rng.standard_normal((c_in, c_out)) / math.sqrt(c_in)
        bias = 0.1 * rng.standard_normal(c_out)
        bundles.append(LayerBundle(f"layer{i}", w, x, bias))
    meta = {
        "layers": layers,
        "dims": [s[0] for s in shapes] + [shapes[-1][1]],
        "tokens": tokens,
        "outlier_channels": outlier_channels,
        "outlier_gain": outlier_gain,
        "skew": skew,
        "seed": seed,
    }
    return ModelBundle(tuple(bundles), meta)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def flatness_metrics(x) -> dict[str, float]:
    """``max|x| / mean|x|`` and excess kurtosis over all entries of ``x``.

    An all-zero tensor has ratio 0; a constant tensor has kurtosis 0.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValidationError("flatness of an empty tensor is undefined")
    a = np.abs(x)
    mean_abs = a.mean()
    ratio = float(a.max() / mean_abs) if mean_abs > 0 else 0.0
    centered = x - x.mean()
    var = np.mean(centered**2)
    kurt = float(np.mean(centered**4) / var**2 - 3.0) if var > 0 else 0.0
    return {"max_over_mean": ratio, "kurtosis": kurt}


def finite_difference_check(objective, params, epsilon: float = 1e-5) -> float:
    """Max relative gap between an analytic gradient and central differences.

    ``objective`` is either a callable ``params -> (loss, grad)`` or an object
    with ``value_and_grad(params, noise)`` (the learned-transform objectives);
    for the latter the quantization noise is frozen at ``params`` so the
    comparison is against the straight-through gradient. The gap is
    ``max_i |fd_i - g_i|`` divided by the largest gradient magnitude.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    params = np.asarray(params, dtype=np.float64)
    if hasattr(objective, "value_and_grad"):
        _, grad, noise = objective.value_and_grad(params)

        def f(p):
            return objective.value_and_grad(p, noise)[0]

    else:
        _, grad = objective(params)

        def f(p):
            return objective(p)[0]

    grad = np.asarray(grad, dtype=np.float64)
    fd = np.empty_like(params)
    flat = params.reshape(-1)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = epsilon
        fd.reshape(-1)[i] = (f((flat + step).reshape(params.shape)) - f((flat - step).reshape(params.shape))) / (
            2.0 * epsilon
        )
    scale = max(np.abs(fd).max(), np.abs(grad).max(), np.finfo(float).tiny)
    return float(np.abs(fd - grad).max() / scale)


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def _split(tokens: int, holdout: float) -> int:
    n_eval = max(1, int(round(tokens * holdout)))
    n_fit = tokens - n_eval
    if n_fit < 1:
        raise ValidationError(f"{tokens} calibration tokens are too few to hold out {holdout:.0%}")
    return n_fit


def _stage(layer: str, stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (PTQError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise StageError(layer, stage, exc) from exc


def _run_layer(layer: LayerBundle, recipe: Recipe, keep: bool):
    name = layer.name
    n_fit = _split(layer.tokens, recipe.holdout)
    t_layer, applied = _stage(
        name, "transform", apply_transforms, layer, recipe.transforms, recipe.w_spec, recipe.a_spec, n_fit
    )
    x_fit = t_layer.calib[:n_fit]
    x_eval = t_layer.calib[n_fit:]
    h = _stage(name, "hessian", build_hessian, x_fit, recipe.damping)

    w_spec = recipe.w_spec
    if w_spec.enabled:
        gptq = recipe.mitigation_step("gptq")
        if gptq is not None:
            result = _stage(name, "gptq", gptq_quantize, t_layer.w, h, w_spec, gptq.block)
        else:
            result = _stage(name, "weight-quant", rtn_quantize, t_layer.w, h, w_spec)
        w_q = result.w_dequant
    else:
        w_q = t_layer.w.copy()

    branch = None
    low = recipe.mitigation_step("lowrank") or recipe.mitigation_step("scaled_lowrank")
    if low is not None:
        k = min(low.rank, *t_layer.w.shape)
        if low.kind == "lowrank":
            branch = _stage(name, "lowrank", lowrank_compensate, t_layer.w, w_q, k)
        else:
            s = salience_scales(x_fit)
            branch = _stage(name, "scaled_lowrank", scaled_lowrank_compensate, t_layer.w, w_q, k, s)

    w_eff = w_q if branch is None else w_q + branch.dense()
    x_q = _stage(name, "act-quant", fake_quantize, x_eval, recipe.a_spec)
    y = layer_output(x_q, w_q, branch, t_layer.bias)
    y_ref = layer.output(layer.calib[n_fit:])

    w_norm = max(float(np.linalg.norm(t_layer.w)), np.finfo(float).tiny)
    power = max(float(np.mean(y_ref**2)), np.finfo(float).tiny)
    flat = flatness_metrics(x_eval)
    c_in, c_out = t_layer.w.shape
    branch_bits = 0.0
    if branch is not None:
        branch_bits = BRANCH_STORAGE_BITS * branch.rank * (c_in + c_out) / (c_in * c_out)
    record = LayerRecord(
        name=name,
        weight_frob_err=float(np.linalg.norm(t_layer.w - w_eff)) / w_norm,
        output_mse=float(np.mean((y - y_ref) ** 2)) / power,
        proxy_loss=float(proxy_losses(t_layer.w, w_eff, h).sum()),
        flatness_max_over_mean=flat["max_over_mean"],
        kurtosis=flat["kurtosis"],
        bits_per_weight=extra_bits_overhead(w_spec, row_length=c_in, rows=c_out),
        branch_bits_per_weight=branch_bits,
    )
    artifacts = {}
    if keep:
        artifacts = {"w_q": w_q.copy()}
        if branch is not None:
            artifacts["lr_a"] = branch.a
            artifacts["lr_b"] = branch.b
        for i, item in enumerate(applied):
            artifacts[f"{item.kind}{i}"] = np.atleast_2d(item.params)
    return record, artifacts


def run_recipe(
    model: ModelBundle, recipe: Recipe, label: str | None = None, jobs: int = 1, keep_artifacts: bool = False
) -> Report:
    """Run ``recipe`` on every layer and collect a :class:`Report`.

    Layers are independent and may be processed by ``jobs`` threads; the
    report keeps model order either way.
    """
    layers = list(model)
    if not layers:
        raise ValidationError("model has no layers")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(lambda l: _run_layer(l, recipe, keep_artifacts), layers))
    else:
        outputs = [_run_layer(l, recipe, keep_artifacts) for l in layers]
    warnings = []
    if any(s.kind == "shift" for s in recipe.transforms) and recipe.a_spec.enabled and recipe.a_spec.symmetric:
        warnings.append("shift is paired with symmetric activation quantization")
    return Report(
        label=label if label is not None else (recipe.name or "-"),
        dn=recipe.dn_label,
        ec=recipe.ec_label,
        w_format=recipe.w_spec.label,
        a_format=recipe.a_spec.label,
        layers=[rec for rec, _ in outputs],
        recipe=recipe.to_dict(),
        warnings=warnings,
        artifacts={l.name: art for l, (_, art) in zip(layers, outputs)} if keep_artifacts else {},
    )


def _format_spec(base: QuantSpec, value: str, role: str) -> QuantSpec:
    value = value.lower()
    if value == "mxfp4":
        if role == "w":
            return QuantSpec.mxfp4(clip_search=True)
        return QuantSpec.mxfp4(clip=0.75)
    if value.startswith("int") and value[3:].isdigit():
        granularity = base.granularity if base.format == "int" else "row"
        return base.replace(format="int", bits=int(value[3:]), granularity=granularity)
    raise ValidationError(f"unknown format {value!r}; expected intN or mxfp4")


def sweep_recipes(base: Recipe, axis: str, values=None) -> list[tuple[str, Recipe]]:
    """Expand ``base`` along one configuration axis into labeled recipes."""
    if axis == "granularity":
        values = [32, 64, 128, 256, 512] if values is None else [int(v) for v in values]
        out = []
        for g in values:
            if g < 1:
                raise ValidationError(f"group size must be positive, got {g}")
            w = base.w_spec.replace(granularity="group", group_size=g)
            a = base.a_spec
            if a.format == "int":
                a = a.replace(granularity="group", group_size=g)
            out.append((f"g{g}", base.replace(w_spec=w, a_spec=a)))
        return out
    if axis == "symmetry":
        values = list(SYMMETRY_COMBOS) if values is None else list(values)
        out = []
        for v in values:
            if v not in SYMMETRY_COMBOS:
                raise ValidationError(f"symmetry value must be one of {list(SYMMETRY_COMBOS)}, got {v!r}")
            w_sym, a_sym = SYMMETRY_COMBOS[v]
            w = base.w_spec.replace(symmetric=w_sym) if base.w_spec.format == "int" else base.w_spec
            a = base.a_spec.replace(symmetric=a_sym) if base.a_spec.format == "int" else base.a_spec
            out.append((v, base.replace(w_spec=w, a_spec=a)))
        return out
    if axis == "format":
        values = ["int4", "mxfp4"] if values is None else list(values)
        return [
            (v, base.replace(w_spec=_format_spec(base.w_spec, v, "w"), a_spec=_format_spec(base.a_spec, v, "a")))
            for v in values
        ]
    raise ValidationError(f"axis must be granularity, symmetry or format, got {axis!r}")


def sweep(model: ModelBundle, base_recipe: Recipe, axis: str, values=None, jobs: int = 1) -> list[Report]:
    """One report per axis value, in the order given."""
    return [run_recipe(model, r, label=label, jobs=jobs) for label, r in sweep_recipes(base_recipe, axis, values)]


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------


def report_body(reports) -> dict:
    return {"format": REPORT_FORMAT, "version": REPORT_VERSION, "rows": [r.to_dict() for r in reports]}


def dumps_body(reports) -> str:
    """Canonical JSON of the report body: sorted keys, no timestamps."""
    return json.dumps(report_body(reports), sort_keys=True, indent=2, allow_nan=False)


def render_table(reports) -> str:
    """Aligned text table: one row per report with DN/EC columns and mean metrics."""
    headers = ["label", "DN", "EC", "W", "A", "W-err", "out-MSE", "proxy", "max/mean", "kurt", "bits/w"]
    rows = []
    for r in reports:
        a = r.aggregate
        rows.append(
            [
                r.label,
                r.dn,
                r.ec,
                r.w_format,
                r.a_format,
                f"{a['weight_frob_err']:.4g}",
                f"{a['output_mse']:.4g}",
                f"{a['proxy_loss']:.4g}",
                f"{a['flatness_max_over_mean']:.4g}",
                f"{a['kurtosis']:.4g}",
                f"{a['bits_per_weight']:.5g}",
            ]
        )
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines.extend(" | ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
    return "\n".join(lines)
