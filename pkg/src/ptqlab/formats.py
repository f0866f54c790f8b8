"""On-disk formats: binary tensor files, layer manifests and recipe files.

Tensor file layout (all integers little-endian)::

    magic    4 bytes  b"QTNS"
    version  u8       1
    dtype    u8       0 float32, 1 float64, 2 uint8, 3 int8
    ndim     u8
    reserved u8       0
    dims     ndim x u64
    payload  row-major little-endian values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .bundle import LayerBundle, ModelBundle
from .errors import TensorFileError, ValidationError
from .pipeline import DEFAULT_HOLDOUT, DEFAULT_RANK, MitigationStep, Recipe
from .mitigation import DEFAULT_BLOCK, DEFAULT_DAMPING
from .quantizers import (
    FORMATS,
    GRANULARITIES,
    ROUNDINGS,
    SIGNED_RANGES,
    QuantSpec,
)
from .transforms import DEFAULT_ALPHA, DEFAULT_STEPS, TransformStep

MAGIC = b"QTNS"
VERSION = 1
MAX_NDIM = 4
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("i1")}
_DTYPE_CODES = {dt: code for code, dt in DTYPES.items()}
_HEADER = struct.Struct("<4sBBBB")

MANIFEST_FORMAT = "ptqlab-manifest"
MXFP4_ACTIVATION_CLIP = 0.75


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------


def encode_tensor(array, dtype=None) -> bytes:
    """Serialize ``array`` to tensor-file bytes.

    Args:
        array: Up to 4-D array.
        dtype: Storage dtype; defaults to the array's own dtype when it is one
            of the supported four, else float64.
    """
    arr = np.asarray(array)
    if dtype is None:
        dtype = arr.dtype if arr.dtype.newbyteorder("<") in _DTYPE_CODES else np.float64
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    if dt not in _DTYPE_CODES:
        raise TensorFileError(f"unsupported tensor dtype {np.dtype(dtype)}")
    if arr.ndim > MAX_NDIM:
        raise TensorFileError(f"tensor files hold at most {MAX_NDIM} dims, got {arr.ndim}")
    if dt.kind in "iu":
        info = np.iinfo(dt)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise TensorFileError(f"values out of range for {dt}")
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[dt], arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse tensor-file bytes. Raises :class:`TensorFileError` on any defect."""
    if len(data) < _HEADER.size:
        raise TensorFileError(f"{source}: truncated header")
    magic, version, code, ndim, reserved = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFileError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"{source}: unsupported version {version}")
    if code not in DTYPES:
        raise TensorFileError(f"{source}: unknown dtype code {code}")
    if ndim > MAX_NDIM:
        raise TensorFileError(f"{source}: ndim {ndim} exceeds {MAX_NDIM}")
    if reserved != 0:
        raise TensorFileError(f"{source}: reserved byte must be 0")
    offset = _HEADER.size + 8 * ndim
    if len(data) < offset:
        raise TensorFileError(f"{source}: truncated dims")
    shape = struct.unpack_from(f"<{ndim}Q", data, _HEADER.size)
    dt = DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(data) - offset != expected:
        raise TensorFileError(
            f"{source}: payload is {len(data) - offset} bytes, expected {expected} for shape {shape}"
        )
    return np.frombuffer(data, dtype=dt, offset=offset).reshape(shape).copy()


def write_tensor(path, array, dtype=None) -> None:
    data = encode_tensor(array, dtype)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise TensorFileError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_tensor(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise TensorFileError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return decode_tensor(data, str(path))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {
        "format": {"const": MANIFEST_FORMAT},
        "meta": {"type": "object"},
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "weight": {"type": "string"},
                    "bias": {"type": "string"},
                    "calib": {"type": "string"},
                },
                "required": ["name", "weight", "calib"],
                "additionalProperties": False,
            },
        },
    },
    "required": ["layers"],
    "additionalProperties": False,
}


def _key_path(error: jsonschema.ValidationError) -> str:
    path = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)
    return path.lstrip(".") or "<root>"


def _validate(doc, schema, what: str) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        key = _key_path(err)
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            key = ".".join(filter(None, [key if key != "<root>" else "", extra[0]]))
            raise ValidationError(f"{what}: unknown key '{key}'")
        raise ValidationError(f"{what}: at '{key}': {err.message}")


def _load_text(path, what: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise TensorFileError(f"cannot read {what} {path}: {exc.strerror or exc}") from exc
    try:
        if str(path).endswith(".json"):
            return json.loads(text)
        return yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ValidationError(f"{what} {path}: parse error: {exc}") from exc


def write_model(model: ModelBundle, out_dir) -> Path:
    """Write every layer as tensor files plus ``manifest.json``; return its path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TensorFileError(f"cannot create {out}: {exc.strerror or exc}") from exc
    entries = []
    for layer in model:
        entry = {"name": layer.name, "weight": f"{layer.name}.w.qtns", "calib": f"{layer.name}.x.qtns"}
        write_tensor(out / entry["weight"], layer.w, np.float64)
        write_tensor(out / entry["calib"], layer.calib, np.float64)
        if layer.bias is not None:
            entry["bias"] = f"{layer.name}.b.qtns"
            write_tensor(out / entry["bias"], layer.bias, np.float64)
        entries.append(entry)
    manifest = {"format": MANIFEST_FORMAT, "meta": model.meta, "layers": entries}
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise TensorFileError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def load_model(manifest_path) -> ModelBundle:
    """Load a manifest; tensor paths are relative to the manifest's directory."""
    doc = _load_text(manifest_path, "manifest")
    _validate(doc, MANIFEST_SCHEMA, "manifest")
    base = Path(manifest_path).parent
    layers = []
    for entry in doc["layers"]:
        w = read_tensor(base / entry["weight"])
        x = read_tensor(base / entry["calib"])
        b = read_tensor(base / entry["bias"]) if "bias" in entry else None
        if w.ndim != 2 or x.ndim != 2:
            raise ValidationError(f"layer '{entry['name']}': weight and calib must be 2-D")
        layers.append(LayerBundle(entry["name"], w, x, b))
    return ModelBundle(tuple(layers), doc.get("meta", {}))


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------

_SPEC_SCHEMA = {
    "type": "object",
    "properties": {
        "format": {"enum": list(FORMATS)},
        "bits": {"type": "integer", "minimum": 2, "maximum": 16},
        "symmetric": {"type": "boolean"},
        "granularity": {"enum": list(GRANULARITIES)},
        "group": {"type": "integer", "minimum": 1},
        "clip": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "clip_search": {"type": "boolean"},
        "rounding": {"enum": list(ROUNDINGS)},
        "signed_range": {"enum": list(SIGNED_RANGES)},
    },
    "additionalProperties": False,
}

RECIPE_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "damping": {"type": "number", "minimum": 0},
        "holdout": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "transforms": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "kind": {"enum": ["shift", "scale", "rotation"]},
                    "source": {"enum": ["calibrated", "optimized", "identity", "hadamard", "random"]},
                    "alpha": {"type": "number", "minimum": 0, "maximum": 1},
                    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                    "steps": {"type": "integer", "minimum": 0},
                    "lr": {"type": "number", "exclusiveMinimum": 0},
                    "init": {"enum": ["hadamard", "random"]},
                },
                "required": ["kind"],
                "additionalProperties": False,
            },
        },
        "w_spec": _SPEC_SCHEMA,
        "a_spec": _SPEC_SCHEMA,
        "mitigation": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "kind": {"enum": ["gptq", "lowrank", "scaled_lowrank"]},
                    "block": {"type": "integer", "minimum": 1},
                    "k": {"type": "integer", "minimum": 1},
                },
                "required": ["kind"],
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


def _spec_from_dict(d: dict | None, role: str) -> QuantSpec:
    d = dict(d or {})
    fmt = d.get("format", "int")
    if fmt == "none":
        return QuantSpec.disabled()
    if fmt == "mxfp4":
        for key in ("bits", "symmetric", "granularity", "group"):
            if key in d:
                raise ValidationError(f"recipe: at '{role}.{key}': fixed by the mxfp4 format")
        # weights search the clip ratio, activations use a fixed 3/4 threshold
        if role == "w_spec":
            clip_search = d.get("clip_search", "clip" not in d)
            return QuantSpec.mxfp4(clip=d.get("clip", 1.0), clip_search=clip_search)
        return QuantSpec.mxfp4(
            clip=d.get("clip", MXFP4_ACTIVATION_CLIP), clip_search=d.get("clip_search", False)
        )
    defaults = {
        "w_spec": dict(symmetric=True, granularity="row", clip_search=True),
        "a_spec": dict(symmetric=False, granularity="row", clip_search=False),
    }[role]
    if "clip" in d and "clip_search" not in d:
        defaults["clip_search"] = False
    kwargs = {**defaults, **{k: v for k, v in d.items() if k not in ("group", "format")}}
    if "group" in d:
        kwargs["group_size"] = d["group"]
    try:
        return QuantSpec(format="int", **kwargs)
    except ValidationError as exc:
        raise ValidationError(f"recipe: at '{role}': {exc}") from exc


def recipe_from_dict(doc) -> Recipe:
    """Build a :class:`Recipe` from a parsed document after schema validation.

    Omitted fields take the library defaults; transform seeds default to the
    recipe's global seed.
    """
    if doc is None:
        doc = {}
    _validate(doc, RECIPE_SCHEMA, "recipe")
    seed = doc.get("seed", 0)
    steps = []
    for i, t in enumerate(doc.get("transforms", [])):
        kind = t["kind"]
        try:
            steps.append(
                TransformStep(
                    kind=kind,
                    source=t.get("source"),
                    alpha=t.get("alpha", DEFAULT_ALPHA),
                    seed=t.get("seed", seed),
                    steps=t.get("steps", DEFAULT_STEPS),
                    lr=t.get("lr"),
                    init=t.get("init", "hadamard"),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"recipe: at 'transforms[{i}]': {exc}") from exc
    mitigation = [
        MitigationStep(m["kind"], block=m.get("block", DEFAULT_BLOCK), rank=m.get("k", DEFAULT_RANK))
        for m in doc.get("mitigation", [])
    ]
    try:
        return Recipe(
            transforms=tuple(steps),
            w_spec=_spec_from_dict(doc.get("w_spec"), "w_spec"),
            a_spec=_spec_from_dict(doc.get("a_spec"), "a_spec"),
            mitigation=tuple(mitigation),
            damping=doc.get("damping", DEFAULT_DAMPING),
            seed=seed,
            holdout=doc.get("holdout", DEFAULT_HOLDOUT),
            name=doc.get("name", ""),
        )
    except ValidationError as exc:
        if str(exc).startswith("recipe:"):
            raise
        raise ValidationError(f"recipe: {exc}") from exc


def load_recipe(path) -> Recipe:
    """Read a YAML or JSON recipe file."""
    return recipe_from_dict(_load_text(path, "recipe"))
