"""Command-line front end: ``flexblock {quantize,map,train,sweep}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
(including training divergence).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from collections import Counter
from importlib import metadata
from pathlib import Path

import numpy as np

from .accel import estimate_training_step
from .bfp import ZERO_EXPONENT, Format, block_tensor
from .config import PRESETS, SCHEMA_VERSION, ConfigError, RunConfig
from .datasets import load_dataset
from .layers import LayerKind
from .tensorio import TensorFileError, read_tensor
from .trainer import TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
_STEP_ORDER = ("fw", "bw", "wu", "total")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# rendering

def git_blob_sha1(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _table(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def _render(report: dict, rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return _dumps(report)
    if fmt == "csv":
        return _csv(rows)
    return _table(rows)


def _write(out: Path | None, name: str, text: str) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)


# ---------------------------------------------------------------------------
# config helpers

def _load_config(args, preset=None) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({"schema_version": SCHEMA_VERSION})
    cfg = cfg.with_preset(preset if preset is not None else getattr(args, "preset", None))
    return cfg.with_seed(args.seed)


def _batch(cfg: RunConfig) -> int:
    return cfg.train_config().batch_size


def _map_rows(cfg: RunConfig) -> list[dict]:
    net = cfg.network()
    est = estimate_training_step(net, cfg.layer_precision(), _batch(cfg), cfg.cost_model(), cfg.geometry())
    return [r.as_row() for r in est.rows]


def _step_totals(rows: list[dict]) -> dict:
    out = {s: {"compute_cycles": 0, "stall_cycles": 0, "cycles": 0, "joules": 0.0} for s in _STEP_ORDER}
    for r in rows:
        for step in (r["step"], "total"):
            for k in ("compute_cycles", "stall_cycles", "cycles", "joules"):
                out[step][k] += r[k]
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_quantize(args) -> int:
    data = read_tensor(args.input)
    if args.shape:
        if int(np.prod(args.shape)) != data.size:
            raise UsageError(f"--shape {args.shape} needs {int(np.prod(args.shape))} values, file has {data.size}")
        data = data.reshape(args.shape)
    if not np.all(np.isfinite(data)):
        raise UsageError(f"{args.input}: tensor contains non-finite values")
    kind, fmt = LayerKind.coerce(args.layer_type), Format.coerce(args.bfp_format)
    t = block_tensor(data, kind, fmt, args.layout)
    err = np.abs(t.dequantize() - data)
    hist = Counter(int(e) for e in t.exponents)
    report = {
        "schema_version": SCHEMA_VERSION,
        "input": str(args.input),
        "shape": list(data.shape),
        "layer_type": kind.value,
        "bfp_format": fmt.name,
        "layout": args.layout,
        "block_shape": list(t.block_shape),
        "n_blocks": int(len(t.exponents)),
        "exponent_histogram": {str(e): hist[e] for e in sorted(hist)},
        "zero_blocks": hist.get(ZERO_EXPONENT, 0),
        "zse": {"count": t.zse.zse_count, "elements": t.zse.total_elements, "ratio": t.zse.ratio},
        "max_abs_error": float(err.max()) if err.size else 0.0,
        "mean_abs_error": float(err.mean()) if err.size else 0.0,
    }
    row = {k: report[k] for k in ("layer_type", "bfp_format", "layout", "n_blocks", "zero_blocks",
                                  "max_abs_error", "mean_abs_error")}
    row["block_shape"] = "x".join(map(str, t.block_shape))
    row["zse_ratio"] = t.zse.ratio
    row["exponent_histogram"] = ";".join(f"{e}:{c}" for e, c in report["exponent_histogram"].items())
    sys.stdout.write(_render(report, [row], args.format))
    _write(args.out, "quantize.json", _dumps(report))
    if args.out is not None:
        (args.out / "tensor.bfp").write_bytes(t.to_bytes())
    return EXIT_OK


def cmd_map(args) -> int:
    cfg = _load_config(args)
    rows = _map_rows(cfg)
    totals = _step_totals(rows)
    report = {
        "schema_version": SCHEMA_VERSION,
        "batch": _batch(cfg),
        "rows": rows,
        "totals": {s: totals[s] for s in _STEP_ORDER},
    }
    sys.stdout.write(_render(report, rows, args.format))
    _write(args.out, "map.json", _dumps(report))
    _write(args.out, "map.csv", _csv(rows))
    return EXIT_OK


def _run_training(cfg: RunConfig):
    try:
        dataset = load_dataset(cfg.dataset_spec())
    except (TypeError, FileNotFoundError) as exc:
        raise ConfigError(f"$.train.dataset: {exc}") from exc
    net = cfg.network()
    history, _ = train(net, dataset, cfg.train_config(), cfg.cost_model(), cfg.geometry())
    return net, history


def cmd_train(args) -> int:
    cfg = _load_config(args)
    net, history = _run_training(cfg)
    rows = [m.as_row(net) for m in history]
    metrics = _csv(rows)
    config_json = cfg.to_json()
    inputs = {"config.json": git_blob_sha1(config_json.encode())}
    spec = cfg.dataset_spec()
    if spec.get("name") == "mnist16":
        for f in sorted(Path(spec["root"]).glob("*idx*")):
            inputs[f.name] = git_blob_sha1(f.read_bytes())
    combined = "".join(f"{k}\0{v}\n" for k, v in sorted(inputs.items())).encode()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": "train",
        "package_version": _version(),
        "config": cfg.data,
        "inputs": inputs,
        "content_hash": git_blob_sha1(combined),
        "outputs": {"metrics.csv": git_blob_sha1(metrics.encode())},
        "final": {"epoch": history[-1].epoch, "loss": history[-1].loss, "accuracy": history[-1].accuracy},
    }
    sys.stdout.write(metrics if args.format == "csv" else _render(manifest, rows, args.format))
    _write(args.out, "metrics.csv", metrics)
    _write(args.out, "manifest.json", _dumps(manifest))
    return EXIT_OK


def cmd_sweep(args) -> int:
    presets = [p for item in (args.preset or []) for p in item.split(",") if p]
    if len(presets) < 2:
        raise UsageError("need ≥ 2 presets")
    for p in presets:
        if p not in PRESETS:
            raise ConfigError(f"unknown preset {p!r}; choose from {', '.join(PRESETS)}")
    per = {}
    for p in presets:
        cfg = _load_config(args, preset=p)
        if args.mode == "train":
            _, history = _run_training(cfg)
            per[p] = {"total": {"compute_cycles": None, "stall_cycles": None,
                                "cycles": sum(m.cycles for m in history),
                                "joules": sum(m.joules for m in history)}}
            per[p]["total"]["accuracy"] = history[-1].accuracy
        else:
            per[p] = _step_totals(_map_rows(cfg))
    base = per[presets[0]]
    rows = []
    for p in presets:
        for step in _STEP_ORDER:
            if step not in per[p]:
                continue
            t, b = per[p][step], base[step]
            row = {"preset": p, "step": step, "compute_cycles": t["compute_cycles"],
                   "stall_cycles": t["stall_cycles"], "cycles": t["cycles"], "joules": t["joules"]}
            row["compute_norm"] = (t["compute_cycles"] / b["compute_cycles"]
                                   if args.mode == "map" and b["compute_cycles"] else "")
            row["runtime_norm"] = t["cycles"] / b["cycles"] if b["cycles"] else 0.0
            row["energy_norm"] = t["joules"] / b["joules"] if b["joules"] else 0.0
            if args.mode == "train":
                row["accuracy"] = t["accuracy"]
                del row["compute_cycles"], row["stall_cycles"], row["compute_norm"]
            rows.append(row)
    report = {"schema_version": SCHEMA_VERSION, "mode": args.mode, "baseline": presets[0], "rows": rows}
    sys.stdout.write(_render(report, rows, args.format))
    _write(args.out, "sweep.json", _dumps(report))
    _write(args.out, "sweep.csv", _csv(rows))
    return EXIT_OK


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, metavar="N", help="override train.seed")
    common.add_argument("--out", type=Path, metavar="DIR", help="directory for output files")
    common.add_argument("--format", choices=("json", "csv", "table"), default="table",
                        help="stdout rendering (default: table)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="flexblock", description="Block floating point training toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", parents=[common], help="block a tensor file and report statistics")
    q.add_argument("input", type=Path, help="tensor file (binary FBTN or text)")
    q.add_argument("--layer-type", required=True, choices=[k.value for k in LayerKind] + ["conv1", "fc"])
    q.add_argument("--bfp-format", required=True, choices=[f.name for f in Format])
    q.add_argument("--layout", choices=("activation", "weight"), default="activation")
    q.add_argument("--shape", type=int, nargs="+", metavar="D", help="reshape the input (row-major)")
    q.set_defaults(func=cmd_quantize)

    m = sub.add_parser("map", parents=[common], help="per-layer mapping and cost report")
    m.add_argument("--preset", metavar="NAME", choices=list(PRESETS))
    m.set_defaults(func=cmd_map)

    t = sub.add_parser("train", parents=[common], help="train and write metrics.csv + manifest.json")
    t.add_argument("--preset", metavar="NAME", choices=list(PRESETS))
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", parents=[common], help="compare precision presets")
    s.add_argument("--preset", metavar="NAME", action="append",
                   help="preset to include (repeat or comma-separate; first is the baseline)")
    s.add_argument("--mode", choices=("map", "train"), default="map")
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError, TensorFileError) as exc:
        print(f"flexblock {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"flexblock {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OverflowError, OSError) as exc:
        print(f"flexblock {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
