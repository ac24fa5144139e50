"""``isonorm`` command-line front end.

Every subcommand reads and writes the binary formats in :mod:`isonorm.tensorio`.
Outputs are written atomically. Failures exit with the error class's
``exit_code`` (see :mod:`isonorm.errors`), and ``--json`` reports them as a
JSON object on stderr.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, distill, fuse, hadamard, moments, normalize, tensorio
from .errors import FormatError, IsonormError, ShapeError

IO_ERROR_EXIT = 3
USAGE_EXIT = 2


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text if text is not None else json.dumps(payload, indent=2, sort_keys=True))


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


# -- hadamard ----------------------------------------------------------------


def cmd_hadamard(args) -> int:
    recipe = hadamard.plan(args.size)
    if args.plan and not args.out:
        _emit(args, {"size": args.size, "recipe": recipe.sexpr()}, recipe.sexpr())
        return 0
    h = hadamard.construct(args.size)
    report = hadamard.validate(h)
    if args.out:
        tensorio.write_tensor(args.out, h.entries)
    _emit(
        args,
        {
            "size": h.size,
            "recipe": h.recipe.sexpr(),
            "max_orthogonality_residual": report.max_orthogonality_residual,
            "entry_magnitude_error": report.entry_magnitude_error,
        },
        h.recipe.sexpr(),
    )
    return 0


# -- statistics and normalizers ----------------------------------------------


def write_stats(path, stats: moments.Statistics) -> dict:
    manifest = {
        "kind": "statistics",
        "library_version": normalize.__version__,
        "channels": stats.channels,
        "n_samples": int(stats.n_samples),
        "global_mean": float(stats.global_mean),
        "global_sigma": float(stats.global_sigma),
    }
    return tensorio.write_manifest(
        path, manifest, {"mean": stats.mean, "cov": stats.cov, "sigma": stats.per_channel_sigma}
    )


def read_stats(path) -> moments.Statistics:
    doc, t = tensorio.read_manifest(path)
    if doc.get("kind") != "statistics":
        raise FormatError(f"{path} is not a statistics manifest")
    missing = {"mean", "cov"} - t.keys()
    if missing:
        raise FormatError(f"{path} lacks tensors {sorted(missing)}")
    est = moments.CovarianceEstimate(t["mean"], t["cov"], int(doc["n_samples"]))
    sigma = t.get("sigma", np.sqrt(np.clip(np.diag(t["cov"]), 0.0, None)))
    return moments.Statistics(est, sigma, float(doc["global_mean"]), float(doc["global_sigma"]))


def cmd_fit_stats(args) -> int:
    data = tensorio.read_tensor(args.input)
    stats = moments.estimate(data, batch_size=args.batch_size)
    write_stats(args.out, stats)
    _emit(args, {"channels": stats.channels, "n_samples": stats.n_samples, "global_sigma": stats.global_sigma})
    return 0


def cmd_fit(args) -> int:
    stats = read_stats(args.stats)
    method = normalize.Method(args.method)
    kwargs = {}
    if method is normalize.Method.STANDARDIZE or method.is_whitening:
        kwargs = {"floor": args.floor, "clamp": args.clamp}
    if method.is_whitening or method is normalize.Method.PHI_S:
        kwargs["solver"] = args.solver
    nrm = normalize.fit(stats, method, **kwargs)
    data = normalize.serialize(nrm)
    tensorio.atomic_write(args.out, data)
    _emit(args, normalize.manifest_of(data))
    return 0


def _transform(args, forward: bool) -> int:
    nrm = normalize.deserialize(_read_bytes(args.nrm))
    x = tensorio.read_tensor(args.input)
    dtype = np.float32 if args.dtype == "f32" else None
    out = normalize.apply(nrm, x, dtype) if forward else normalize.invert(nrm, x, dtype)
    tensorio.write_tensor(args.out, out, "float32" if args.dtype == "f32" else "float64")
    _emit(args, {"rows": int(out.shape[0]), "channels": int(out.shape[1]), "out": str(args.out)})
    return 0


def cmd_apply(args) -> int:
    return _transform(args, True)


def cmd_invert(args) -> int:
    return _transform(args, False)


# -- analysis ----------------------------------------------------------------


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def _eigensystem_arg(args) -> moments.Eigensystem:
    if args.eigenvalues:
        return moments.Eigensystem.from_values([float(v) for v in args.eigenvalues.split(",")])
    if args.stats:
        return moments.eigh(read_stats(args.stats).cov)
    raise ShapeError("give --eigenvalues or --stats")


def cmd_analyze(args) -> int:
    kind = args.analysis
    if kind == "radial":
        if args.nrm:
            back = analysis.error_back_map(normalize.deserialize(_read_bytes(args.nrm))).matrix()
            curve = analysis.radial_curve(back, args.points)
        else:
            curve = analysis.radial_error(_eigensystem_arg(args), args.method, args.points)
        text = _csv_text(["theta", "radius"], zip(curve.thetas, curve.radii))
        payload = {
            "argmax_theta": curve.argmax_theta(),
            "argmin_theta": curve.argmin_theta(),
            "max_radius": float(curve.radii.max()),
            "min_radius": float(curve.radii.min()),
            "mean_square": curve.mean_square(),
        }
    elif kind == "var-range":
        nrm = normalize.deserialize(_read_bytes(_need(args.nrm, "--nrm")))
        report = analysis.variance_range(nrm, tensorio.read_tensor(_need(args.input, "--in")))
        payload = report.to_dict()
        text = json.dumps(payload, indent=2, sort_keys=True)
    elif kind == "rank":
        if args.input:
            value = analysis.rankme(tensorio.read_tensor(args.input))
        else:
            value = analysis.effective_rank(_eigensystem_arg(args))
        payload = {"effective_rank": value}
        text = repr(value)
    else:  # align
        if args.nrm:
            nrm = normalize.deserialize(_read_bytes(args.nrm))
            if nrm.eigensystem is None:
                raise ShapeError(f"a {nrm.method.value} normalizer carries no eigensystem")
            eigs = nrm.eigensystem
        else:
            eigs = _eigensystem_arg(args)
        h = hadamard.construct(eigs.channels)
        payload = analysis.alignment_report(eigs, h, args.threshold).to_dict()
        text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        body = text if kind == "radial" else json.dumps(payload, indent=2, sort_keys=True) + "\n"
        tensorio.atomic_write(args.out, body.encode())
        _emit(args, payload)
    else:
        _emit(args, payload, text.rstrip("\n"))
    return 0


def _need(value, flag: str):
    if value is None:
        raise ShapeError(f"this analysis needs {flag}")
    return value


# -- fuse / simulate / csv ---------------------------------------------------


def cmd_fuse(args) -> int:
    layer = fuse.deserialize_layer(_read_bytes(args.layer))
    nrm = normalize.deserialize(_read_bytes(args.nrm))
    fused = fuse.fuse(layer, nrm)
    check = fuse.verify_fusion(layer, nrm, fused, probe_count=args.probes, seed=args.seed)
    tensorio.atomic_write(args.out, fuse.serialize_layer(fused))
    _emit(
        args,
        {
            "method": nrm.method.value,
            "theta_source": fused.theta_source,
            "max_relative_error": check.max_relative_error,
            "ok": check.ok,
        },
    )
    return 0


def load_config(path, seed: int | None) -> distill.DistillConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    if seed is not None:
        doc["seed"] = seed
    try:
        return distill.DistillConfig.from_dict(doc)
    except TypeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def report_bytes(report: dict) -> bytes:
    return (json.dumps(report, indent=2, sort_keys=True) + "\n").encode()


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.seed)
    report = distill.run_distillation(cfg)
    tensorio.atomic_write(args.out, report_bytes(report))
    summary = {
        "method": report["method"],
        "spread": report["spread"],
        "relative_mse": {t["name"]: t["final"]["relative_mse"] for t in report["teachers"]},
    }
    _emit(args, summary)
    return 0


def cmd_csv_import(args) -> int:
    arr = tensorio.csv_import(args.input, has_header=args.header)
    tensorio.write_tensor(args.out, arr)
    _emit(args, {"rows": int(arr.shape[0]), "channels": int(arr.shape[1])})
    return 0


def cmd_csv_export(args) -> int:
    tensorio.csv_export(args.out, tensorio.read_tensor(args.input))
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isonorm", description="Isotropic normalization of teacher features.")
    p.add_argument("--json", action="store_true", help="machine-readable stdout, and JSON errors on stderr")
    p.add_argument("--seed", type=int, default=None, help="seed for every random draw (default: 0)")
    p.add_argument("--version", action="version", version=f"isonorm {normalize.__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("hadamard", help="build a normalized Hadamard matrix")
    s.add_argument("--size", type=int, required=True, help="matrix order C")
    s.add_argument("--plan", action="store_true", help="print the construction recipe only (unless --out is given)")
    s.add_argument("--out", help="write the matrix as a tensor file")
    s.set_defaults(func=cmd_hadamard)

    s = sub.add_parser("fit-stats", help="estimate mean and covariance of an N x C tensor")
    s.add_argument("--in", dest="input", required=True, help="features tensor file")
    s.add_argument("--out", required=True, help="statistics manifest (JSON, matrices in sidecar files)")
    s.add_argument("--batch-size", type=int, default=8192, help="rows per accumulation batch")
    s.set_defaults(func=cmd_fit_stats)

    s = sub.add_parser("fit", help="fit a normalizer from a statistics manifest")
    s.add_argument("--method", required=True, choices=[m.value for m in normalize.Method])
    s.add_argument("--stats", required=True, help="statistics manifest from fit-stats")
    s.add_argument("--out", required=True, help="normalizer bundle")
    s.add_argument("--floor", type=float, default=normalize.DEFAULT_FLOOR, help="relative sigma/eigenvalue floor")
    s.add_argument("--clamp", action="store_true", help="lift values below the floor instead of failing")
    s.add_argument("--solver", choices=["auto", "jacobi", "lapack"], default="auto", help="eigensolver")
    s.set_defaults(func=cmd_fit)

    for name, func, what in (("apply", cmd_apply, "normalize"), ("invert", cmd_invert, "denormalize")):
        s = sub.add_parser(name, help=f"{what} a tensor with a fitted normalizer")
        s.add_argument("--nrm", required=True, help="normalizer bundle")
        s.add_argument("--in", dest="input", required=True, help="input tensor file")
        s.add_argument("--out", required=True, help="output tensor file")
        s.add_argument("--dtype", choices=["f32", "f64"], default="f64", help="arithmetic and output precision")
        s.set_defaults(func=func)

    s = sub.add_parser("analyze", help="error-profile and spectrum diagnostics")
    s.add_argument("analysis", choices=["radial", "var-range", "rank", "align"])
    s.add_argument("--nrm", help="normalizer bundle (radial, var-range, align)")
    s.add_argument("--in", dest="input", help="tensor file: errors for var-range, features for rank")
    s.add_argument("--stats", help="statistics manifest supplying the eigensystem")
    s.add_argument("--eigenvalues", help="comma-separated eigenvalues (axis-aligned eigenbasis)")
    s.add_argument("--method", default="phis", choices=[m.value for m in normalize.Method], help="radial: normalizer")
    s.add_argument("--points", type=int, default=720, help="radial: grid size")
    s.add_argument("--threshold", type=float, default=0.75, help="align: count scores above this")
    s.add_argument("--out", help="radial: CSV (theta,radius); others: JSON")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("fuse", help="fold a normalizer's inverse into a linear layer")
    s.add_argument("--layer", required=True, help="linear layer bundle")
    s.add_argument("--nrm", required=True, help="normalizer bundle")
    s.add_argument("--out", required=True, help="fused layer bundle")
    s.add_argument("--probes", type=int, default=1000, help="random probes for the equivalence check")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("simulate", help="run the synthetic multi-teacher distillation harness")
    s.add_argument("--config", required=True, help="JSON object with DistillConfig fields (missing = default)")
    s.add_argument("--out", required=True, help="JSON report")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("csv-import", help="convert a numeric CSV into a tensor file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--header", action="store_true", help="skip the first line")
    s.set_defaults(func=cmd_csv_import)

    s = sub.add_parser("csv-export", help="convert a tensor file to CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_csv_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None and args.command == "fuse":
        args.seed = 0
    try:
        return args.func(args)
    except IsonormError as exc:
        return _fail(args, exc.to_dict(), exc.exit_code)
    except OSError as exc:
        detail = {"error": type(exc).__name__, "message": str(exc), "exit_code": IO_ERROR_EXIT}
        return _fail(args, detail, IO_ERROR_EXIT)
    except ValueError as exc:
        detail = {"error": type(exc).__name__, "message": str(exc), "exit_code": USAGE_EXIT}
        return _fail(args, detail, USAGE_EXIT)


def _fail(args, detail: dict, code: int) -> int:
    if args.json:
        print(json.dumps(detail, sort_keys=True), file=sys.stderr)
    else:
        print(f"isonorm: {detail['error']}: {detail['message']}", file=sys.stderr)
    return code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
