"""Command line entry point: ``almt {train,eval,synth,attn-dump,ablate}``.

Exit codes: 0 success, 2 configuration or validation failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from . import config as C
from .checkpoint import Checkpoint
from .data import SynthConfig, ValidationError, generate_synthetic, read_mmf, split_dataset, write_mmf
from .metrics import REPORT_KEYS
from .model import AblationFlags, ConfigError
from .tensor import NonFiniteError
from .train import check_shapes, evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("almt")


def _emit(text: str) -> None:
    print(text, flush=True)


def _warn(text: str) -> None:
    print(text, file=sys.stderr, flush=True)


def _resolve(args) -> dict:
    cfg = C.load_run_config(args.config, getattr(args, "preset", None))
    cfg, echoed = C.apply_overrides(cfg, args.set or [])
    for line in echoed:
        _warn(f"override {line}")
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    if args.print_defaults:
        _emit(C.dumps(C.default_run_config(args.preset or "mosi")))
        return EXIT_OK
    cfg = _resolve(args)
    if args.print_config:
        _emit(C.dumps(cfg))
    out = _out_dir(args)
    tcfg = C.train_config(cfg, out)
    (out / "resolved_config.json").write_text(C.dumps(cfg) + "\n")
    result = train(tcfg)
    for note in result.notes:
        _warn(f"note: {note}")
    summary = {"best_epoch": result.best_epoch, "checkpoint": str(tcfg.checkpoint_path)}
    if result.test is not None:
        (out / "test_metrics.json").write_text(result.test.report.to_json(indent=2) + "\n")
        result.test.write_pairs(out / "test_pairs.csv")
        summary["test"] = result.test.report.to_dict()
    else:
        _warn("no test split configured; test_metrics.json not written")
    _emit(json.dumps(summary, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def _synth_config(args) -> SynthConfig:
    fields = {f.name for f in dataclasses.fields(SynthConfig)}
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
    base = dataclasses.asdict(SynthConfig())
    merged, echoed = C.apply_overrides(C.merge(base, raw), args.set or [])
    for line in echoed:
        _warn(f"override {line}")
    if args.seed is not None:
        merged["seed"] = args.seed
    unknown = set(merged) - fields
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    return SynthConfig(**merged).validate()


def cmd_synth(args) -> int:
    if args.print_defaults:
        _emit(json.dumps(dataclasses.asdict(SynthConfig()), indent=2))
        return EXIT_OK
    cfg = _synth_config(args)
    if args.print_config:
        _emit(json.dumps(dataclasses.asdict(cfg), indent=2))
    out = Path(args.out) if args.out else _out_dir(args) / "synth.mmf"
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.fractions:
        # one generated set keeps the signal directions shared across splits
        try:
            fractions = [float(f) for f in args.fractions.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--fractions: {exc}") from exc
        parts = split_dataset(generate_synthetic(cfg), fractions, cfg.seed)
        written = {}
        for name, part in zip(("train", "valid", "test"), parts):
            path = out.with_name(f"{out.stem}.{name}{out.suffix}")
            write_mmf(part, path)
            written[name] = {"path": str(path), "samples": len(part)}
        _emit(json.dumps({"splits": written, "shapes": _shapes(parts[0])}))
        return EXIT_OK
    ds = generate_synthetic(cfg, args.split)
    write_mmf(ds, out)
    _emit(json.dumps({"path": str(out), "samples": len(ds), "shapes": _shapes(ds)}))
    return EXIT_OK


def _shapes(ds) -> dict:
    return {m: list(s) for m, s in (ds.shapes() or {}).items()}


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    model = Checkpoint.load(args.checkpoint).build_model()
    ds = read_mmf(args.dataset)
    try:
        check_shapes(model.config, ds)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    buckets = args.profile
    if args.buckets:
        buckets = C.bucket_specs({"metrics": {"buckets": json.loads(Path(args.buckets).read_text())}})
    result = evaluate(model, ds, buckets)
    text = result.report.to_json(indent=2)
    _emit(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.pairs_csv:
        result.write_pairs(args.pairs_csv)
    return EXIT_OK


# ---------------------------------------------------------------------------
# attn-dump


def _parse_noise(spec: str) -> tuple[str, int, float, int]:
    parts = spec.split(",")
    if len(parts) != 4:
        raise ConfigError(f"--noise expects modality,frame,amplitude,seed; got {spec!r}")
    modality, frame, amp, seed = parts
    if modality not in analysis.MAP_FOR_MODALITY:
        raise ConfigError(f"--noise modality must be one of {sorted(analysis.MAP_FOR_MODALITY)}")
    return modality, int(frame), float(amp), int(seed)


def cmd_attn_dump(args) -> int:
    model = Checkpoint.load(args.checkpoint).build_model()
    ds = read_mmf(args.dataset)
    check_shapes(model.config, ds)
    if not 0 <= args.index < len(ds):
        raise ValidationError(f"sample index {args.index} outside [0, {len(ds)})")
    out = _out_dir(args)
    sample = ds[args.index]
    written = []
    if args.noise:
        modality, frame, amp, seed = _parse_noise(args.noise)
        noise = analysis.embedded_row_noise(model, frame, amp, seed)
        clean = analysis.trace_sample(model, sample)
        noised = analysis.trace_sample(model, sample, {modality: noise})
        written += analysis.write_trace_csv(clean, out / "clean")
        written += analysis.write_trace_csv(noised, out / "noised")
        analysis.write_delta_summary(clean, noised, out / "delta.csv")
        written.append(out / "delta.csv")
    else:
        written += analysis.write_trace_csv(analysis.trace_sample(model, sample), out)
    if args.average is not None:
        alphas, betas = analysis.average_attention(model, ds, args.average)
        layers = analysis.trace_sample(model, sample).ahl_layers
        for j, a, b in zip(layers, alphas, betas):
            for name, mat in (("alpha", a), ("beta", b)):
                path = out / f"{name}_avg_layer{j}.csv"
                analysis.write_matrix_csv(mat, path)
                written.append(path)
    _emit(json.dumps({"files": [str(p) for p in written]}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

ABLATION_NAMES = tuple(f.name for f in dataclasses.fields(AblationFlags))
ABLATE_METRICS = ("valid_loss",) + tuple(
    k for k in REPORT_KEYS if k not in ("n", "bucket_counts", "corr_degenerate", "posneg_degenerate")
)


def _load_grid(spec: str) -> dict[str, list]:
    path = Path(spec)
    text = path.read_text() if path.exists() else spec
    try:
        grid = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid is neither a file nor valid JSON: {exc}") from exc
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("grid must be a non-empty JSON object of name -> list of values")
    unknown = [k for k in grid if "." not in k and k not in ABLATION_NAMES]
    if unknown:
        raise ConfigError(f"unknown ablation flags {unknown}; valid names: {list(ABLATION_NAMES)}")
    for k, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid entry {k!r} must be a non-empty list")
    return grid


def _cell_config(base: dict, cell: dict) -> tuple[dict, str]:
    cfg = json.loads(json.dumps(base))
    note = ""
    dotted = [f"{k}={json.dumps(v)}" for k, v in cell.items() if "." in k]
    cfg, _ = C.apply_overrides(cfg, dotted)
    for k, v in cell.items():
        if "." not in k:
            cfg["model"]["ablation"][k] = v
    flags = cfg["model"]["ablation"]
    if "guidance_scales" in cell and not flags["guidance_scales"]:
        # no guided layer left: the hyper stream is the concatenation baseline
        flags["disable_ahl"] = True
        note = "empty guidance set runs as disable_ahl"
    C.model_config(cfg)
    return cfg, note


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma separated integers, got {text!r}") from exc


def cmd_ablate(args) -> int:
    if args.print_defaults:
        _emit(C.dumps(C.default_run_config(args.preset or "mosi")))
        return EXIT_OK
    base = _resolve(args)
    if args.print_config:
        _emit(C.dumps(base))
    grid = _load_grid(args.grid)
    seeds = _parse_seeds(args.seeds) if args.seeds else [base["seed"]]
    names = list(grid)
    cells = [dict(zip(names, combo)) for combo in itertools.product(*grid.values())]
    # validate every cell before spending time on any run
    prepared = [_cell_config(base, cell) for cell in cells]
    for cfg, _ in prepared:
        C.train_config(cfg)

    out = _out_dir(args)
    rows, runs = [], []
    for cell, (cfg, note) in zip(cells, prepared):
        per_metric: dict[str, list[float]] = {k: [] for k in ABLATE_METRICS}
        for seed in seeds:
            cfg_seed = dict(cfg, seed=seed)
            result = train(C.train_config(cfg_seed))
            entry = result.log[result.best_epoch]
            record = {"cell": cell, "seed": seed, "best_epoch": result.best_epoch,
                      "valid_loss": entry["valid_loss"]}
            if result.test is not None:
                record.update(result.test.report.to_dict())
            runs.append(record)
            for k in ABLATE_METRICS:
                v = record.get(k)
                if v is not None and np.isfinite(v):
                    per_metric[k].append(float(v))
        row = {k: json.dumps(v) if isinstance(v, list) else v for k, v in cell.items()}
        row["runs"] = len(seeds)
        for k, values in per_metric.items():
            row[f"{k}_mean"] = float(np.mean(values)) if values else None
            row[f"{k}_std"] = float(np.std(values)) if values else None
        row["note"] = note
        rows.append(row)
        _warn(f"cell {cell}: valid_loss_mean={row['valid_loss_mean']}")

    fields = list(rows[0])
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    _write_json({"grid": grid, "seeds": seeds, "rows": rows, "runs": runs}, out / "ablation.json")
    _emit(json.dumps({"cells": len(rows), "runs": len(runs), "table": str(out / "ablation.csv")}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-path override, repeatable; VALUE is parsed as JSON when possible")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out-dir", help="directory for output artifacts (default: current directory)")
    common.add_argument("--print-defaults", action="store_true", help="print default configuration and exit")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration first")

    parser = argparse.ArgumentParser(prog="almt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a run configuration")
    p.add_argument("--preset", choices=sorted(C.PRESETS))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset as MMF")
    p.add_argument("--out", help="output .mmf path (default: OUT_DIR/synth.mmf)")
    p.add_argument("--split", choices=["train", "valid", "test"], help="split tag stored in the file")
    p.add_argument("--fractions", help="e.g. 0.7,0.15,0.15: write OUT stem .train/.valid/.test files "
                                       "cut from one generated set")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an MMF dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--profile", default="mosi", choices=["mosi", "mosei", "sims"])
    p.add_argument("--buckets", help="JSON file of explicit bucket specs")
    p.add_argument("--out", help="also write the report JSON here")
    p.add_argument("--pairs-csv", help="write raw (pred, label) pairs here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-dump", help="export head-averaged AHL attention maps as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--noise", metavar="MODALITY,FRAME,AMPLITUDE,SEED",
                   help="perturb one embedded frame and write clean, noised and delta files")
    p.add_argument("--average", type=int, metavar="N", help="also write maps averaged over N samples")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid over seeds")
    p.add_argument("--preset", choices=sorted(C.PRESETS))
    p.add_argument("--grid", help="JSON file or inline JSON mapping flag -> list of values")
    p.add_argument("--seeds", help="comma separated seeds, e.g. 0,1,2")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "ablate" and not args.print_defaults and not args.grid:
        parser.error("ablate requires --grid")
    try:
        return args.func(args)
    except NonFiniteError as exc:
        _warn(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (ValueError, KeyError, IndexError, OSError) as exc:
        _warn(f"error: {exc}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
