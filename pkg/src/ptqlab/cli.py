"""``ptqlab`` command line.

Subcommands:
    gen       write a planted-outlier synthetic model (manifest + tensors)
    quantize  run one recipe over a model and write a report
    sweep     run a recipe along one configuration axis
    mxfp4     encode or decode a tensor with the MXFP4 codec

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PTQError, TensorFileError, ValidationError
from .formats import load_model, load_recipe, read_tensor, write_model, write_tensor
from .pipeline import dumps_body, gen_synthetic_model, render_table, run_recipe, sweep
from .quantizers import MX_GROUP, QuantizedTensor, QuantParams, QuantSpec, mxfp4_dequantize, mxfp4_quantize

log = logging.getLogger("ptqlab")

EXIT_OK = 0
EXIT_USAGE = 2


def _write_text(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise TensorFileError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _write_report(path, reports, args, started: float) -> None:
    """Deterministic body at ``path``; run metadata in a ``.meta.json`` sidecar."""
    _write_text(path, dumps_body(reports) + "\n")
    meta = {
        "command": args.command,
        "argv": sys.argv[1:],
        "ptqlab_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created_unix": round(time.time(), 3),
        "elapsed_s": round(time.perf_counter() - started, 3),
    }
    _write_text(Path(str(path) + ".meta.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _emit_artifacts(report, out_dir) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TensorFileError(f"cannot create {out}: {exc.strerror or exc}") from exc
    for layer_name in sorted(report.artifacts):
        for key in sorted(report.artifacts[layer_name]):
            write_tensor(out / f"{layer_name}.{key}.qtns", report.artifacts[layer_name][key], np.float64)


def cmd_gen(args) -> int:
    model = gen_synthetic_model(
        layers=args.layers,
        dims=args.dims if len(args.dims) > 1 else args.dims[0],
        tokens=args.tokens,
        outlier_channels=args.outlier_channels,
        outlier_gain=args.outlier_gain,
        skew=args.skew,
        seed=args.seed,
    )
    path = write_model(model, args.out)
    print(f"wrote {len(model)} layers to {path}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    started = time.perf_counter()
    model = load_model(args.model)
    recipe = load_recipe(args.recipe)
    report = run_recipe(model, recipe, jobs=args.jobs, keep_artifacts=args.emit_quantized is not None)
    _write_report(args.report, [report], args, started)
    if args.emit_quantized is not None:
        _emit_artifacts(report, args.emit_quantized)
    for w in report.warnings:
        log.warning(w)
    print(render_table([report]))
    return EXIT_OK


def _parse_values(axis: str, raw):
    if raw is None:
        return None
    values = [v for chunk in raw for v in chunk.split(",") if v]
    if axis == "granularity":
        try:
            return [int(v) for v in values]
        except ValueError as exc:
            raise ValidationError(f"granularity values must be integers: {exc}") from exc
    return values


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    model = load_model(args.model)
    recipe = load_recipe(args.recipe)
    reports = sweep(model, recipe, args.axis, _parse_values(args.axis, args.values), jobs=args.jobs)
    _write_report(args.report, reports, args, started)
    print(render_table(reports))
    return EXIT_OK


def _as_rows(x: np.ndarray) -> np.ndarray:
    if x.ndim == 0:
        raise ValidationError("mxfp4: scalar tensors are not supported")
    return x.reshape(1, -1) if x.ndim == 1 else x.reshape(-1, x.shape[-1])


def cmd_mxfp4(args) -> int:
    scales_path = args.scales or f"{args.out if args.encode else args.inp}.scales"
    if args.encode:
        x = read_tensor(args.inp)
        if x.dtype.kind != "f":
            raise ValidationError(f"mxfp4 --encode expects a float tensor, got {x.dtype}")
        q = mxfp4_quantize(_as_rows(x.astype(np.float64)), clip=args.clip)
        write_tensor(args.out, q.codes.reshape(x.shape), np.uint8)
        write_tensor(scales_path, q.scale_exponents, np.int8)
        print(f"encoded {x.size} values in {q.scale_exponents.size} groups")
        return EXIT_OK
    codes = read_tensor(args.inp)
    exps = read_tensor(scales_path)
    if codes.dtype != np.uint8:
        raise ValidationError(f"mxfp4 --decode expects uint8 codes, got {codes.dtype}")
    if exps.dtype != np.int8:
        raise TensorFileError(f"{scales_path}: scale exponents must be int8, got {exps.dtype}")
    rows = _as_rows(codes)
    expected = (rows.shape[0], -(-rows.shape[1] // MX_GROUP))
    if exps.shape != expected:
        raise TensorFileError(f"{scales_path}: exponent shape {exps.shape}, expected {expected}")
    if np.any(np.abs(exps.astype(np.int64)) > 127):
        raise TensorFileError(f"{scales_path}: exponent outside the E8M0 range [-127, 127]")
    params = QuantParams(np.exp2(exps.astype(np.float64)), None, MX_GROUP)
    y = mxfp4_dequantize(QuantizedTensor(rows, params, QuantSpec.mxfp4()))
    write_tensor(args.out, y.reshape(codes.shape), np.float32 if args.dtype == "f32" else np.float64)
    print(f"decoded {codes.size} values")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptqlab", description="Layer-wise post-training quantization lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic planted-outlier model")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--dims", type=int, nargs="+", default=[128], help="one width, or layers+1 widths")
    p.add_argument("--tokens", type=int, default=512)
    p.add_argument("--outlier-channels", type=int, default=4)
    p.add_argument("--outlier-gain", type=float, default=100.0)
    p.add_argument("--skew", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("quantize", help="run one recipe")
    p.add_argument("--model", required=True, help="manifest path")
    p.add_argument("--recipe", required=True, help="YAML or JSON recipe")
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--emit-quantized", metavar="DIR", help="dump quantized weights and transform params")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("sweep", help="run a recipe along one axis")
    p.add_argument("--model", required=True)
    p.add_argument("--recipe", required=True)
    p.add_argument("--axis", required=True, choices=["granularity", "symmetry", "format"])
    p.add_argument("--values", nargs="+", help="axis values (space or comma separated)")
    p.add_argument("--report", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("mxfp4", help="MXFP4 encode/decode")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--encode", action="store_true")
    mode.add_argument("--decode", action="store_true")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", help="exponent tensor path (default: <codes>.scales)")
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f64", help="decoded dtype")
    p.set_defaults(func=cmd_mxfp4)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except PTQError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
