"""Command-line entry point: train, infer, eval, sweep, probe, verify.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O error.
The thread count is read from ``NESTDIFF_THREADS`` (default 1).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt
from .config import ConfigError, ExperimentConfig, build_config, config_keys, parse_overrides
from .metrics import bin_stats, records_from_predictions, uncertainty_table, write_csv
from .numerics import NumericError, RngStream, stream_id
from .perturb import PerturbSpec
from .pipeline import Pipeline, dataset_splits, perturb_batch, run_inference, summarize
from .trainer import TrainingDivergence, train_all

log = logging.getLogger("nestdiff")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
CHECKPOINT_NAME = "checkpoint.ndck"


def _versions() -> dict:
    return {"nestdiff": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_config_arg(path: str | None) -> dict:
    """Config file contents; a run manifest is accepted too (its ``config`` entry is used)."""
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(data, dict) and "command" in data and "config" in data:
        return data["config"]
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _normalized_splits(config: ExperimentConfig, pipe: Pipeline | None = None):
    train, val, test = dataset_splits(config)
    norm = train.norm_stats() if pipe is None or pipe.norm is None else pipe.norm
    return norm, [d.normalized(norm) for d in (train, val, test)]


# -- train ---------------------------------------------------------------------

def train_run(config: ExperimentConfig, out_dir: str | Path, resume: str | None = None) -> Path:
    """Train all stages and write ``checkpoint.ndck`` plus ``train_manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    t0 = time.perf_counter()
    if resume:
        pipe = ckpt.load(resume, expected=config)
        pipe.config = config
        norm, (train, val, _) = _normalized_splits(config, pipe)
    else:
        norm, (train, val, _) = _normalized_splits(config)
        pipe = Pipeline.initialize(config, train.num_classes, train.class_names)
        pipe.norm = norm
    digests = {}

    def on_stage(stage, p):
        digests[stage] = p.digests()
        ckpt.save(p, out / CHECKPOINT_NAME)

    train_all(pipe, train, val, on_stage)
    path = ckpt.save(pipe, out / CHECKPOINT_NAME)
    _write_json(out / "train_manifest.json", {
        "command": "train",
        "config": config.to_dict(),
        "seeds": {"data": config.data.seed, "train": config.train.seed},
        "resume": resume,
        "versions": _versions(),
        "checkpoint": str(path),
        "checkpoint_sha256": _sha256(path),
        "stage_digests": digests,
        "history": pipe.history,
        "wall_seconds": time.perf_counter() - t0,
    })
    return path


def cmd_train(args) -> int:
    config = build_config(_read_config_arg(args.config), parse_overrides(args.set))
    out = args.out or config.output_dir
    path = train_run(config, out, args.resume)
    print(path)
    return 0


# -- infer / eval -----------------------------------------------------------------

def write_report(rows: list[dict], out: Path, num_classes: int) -> dict:
    """Metrics CSVs for one report directory; returns the summary row."""
    summary = summarize(rows)
    write_csv(out / "summary.csv", [summary])
    write_csv(out / "piw_pv.csv", uncertainty_table(rows, num_classes))
    stats = bin_stats(records_from_predictions(rows))
    write_csv(out / "bins.csv", [
        {"bin": i, "lower": i / 10, "upper": (i + 1) / 10, "count": int(stats.count[i]),
         "accuracy": float(stats.accuracy[i]), "confidence": float(stats.confidence[i])}
        for i in range(len(stats.count))])
    return summary


def infer_run(checkpoint: str | Path, out_dir: str | Path, perturb: str | None = None,
              overrides: dict | None = None) -> dict:
    """Run Nested-ensemble inference on the configured split and write a report bundle."""
    checkpoint = Path(checkpoint)
    pipe = ckpt.load(checkpoint)
    if overrides:
        config = build_config(pipe.config.to_dict(), overrides)
        if config.model_hash(pipe.num_classes) != pipe.config_hash():
            raise ckpt.ConfigMismatch("overrides change the model/schedule configuration of the checkpoint")
        pipe.config = config
    config = pipe.config
    spec = PerturbSpec.parse(perturb) if perturb else None
    _, splits = _normalized_splits(config, pipe)
    data = dict(zip(("train", "val", "test"), splits))[config.infer.split]
    rows = run_inference(pipe, data, spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "predictions.jsonl").open("w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    summary = write_report(rows, out, pipe.num_classes)
    _write_json(out / "manifest.json", {
        "command": "infer",
        "config": config.to_dict(),
        "checkpoint": str(checkpoint),
        "checkpoint_sha256": _sha256(checkpoint),
        "perturb": perturb,
        "overrides": overrides or {},
        "seeds": {"infer": config.infer.seed},
        "num_classes": pipe.num_classes,
        "class_names": list(pipe.class_names),
        "versions": _versions(),
    })
    return summary


def cmd_infer(args) -> int:
    overrides = parse_overrides(args.set)
    checkpoint, perturb = args.checkpoint, args.perturb
    if args.manifest:
        m = json.loads(Path(args.manifest).read_text())
        checkpoint = checkpoint or m["checkpoint"]
        perturb = perturb or m.get("perturb")
        overrides = {**m.get("overrides", {}), **overrides}
    if not checkpoint:
        raise ConfigError("infer needs --checkpoint or --manifest")
    out = args.out or str(Path(checkpoint).parent / ("report" + (f"-{perturb.replace(':', '_')}" if perturb else "")))
    summary = infer_run(checkpoint, out, perturb, overrides)
    print(json.dumps(summary))
    return 0


def load_predictions(report_dir: str | Path) -> list[dict]:
    path = Path(report_dir) / "predictions.jsonl"
    if not path.is_file():
        raise FileNotFoundError(f"no predictions.jsonl in {report_dir}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def eval_reports(report_dirs: Sequence[str | Path], out: str | Path) -> list[dict]:
    rows = []
    for d in report_dirs:
        preds = load_predictions(d)
        manifest_path = Path(d) / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.is_file() else {}
        num_classes = manifest.get("num_classes", len(preds[0]["proba"]))
        summary = write_report(preds, Path(d), num_classes)
        rows.append({"report": str(d), "perturb": manifest.get("perturb") or "clean", **summary})
    write_csv(out, rows)
    return rows


def cmd_eval(args) -> int:
    out = args.out or str(Path(args.reports[0]) / "eval_summary.csv")
    for row in eval_reports(args.reports, out):
        print(json.dumps(row))
    return 0


# -- sweep -------------------------------------------------------------------------

def _parse_grid(text: str) -> tuple[str, list[str]]:
    if "=" not in text:
        raise ConfigError(f"grid must look like key=v1,v2,..., got {text!r}")
    key, values = text.split("=", 1)
    return key.strip(), [v for v in values.split(",") if v]


def _sweep_point(job: tuple) -> list[dict]:
    base, key, value, out, perturbs = job
    overrides = {} if key is None else {key: value}
    config = build_config(base, overrides)
    path = train_run(config, out)
    rows = []
    for p in [None, *perturbs]:
        rdir = Path(out) / ("report" + (f"-{p.replace(':', '_')}" if p else ""))
        summary = infer_run(path, rdir, p)
        rows.append({"param": key or "", "value": value if key else "", "perturb": p or "clean", **summary})
    return rows


def sweep_run(base: dict, grid: str | None, perturbs: Sequence[str], out_dir: str | Path,
              jobs: int = 1, checkpoint: str | None = None) -> list[dict]:
    """Grid over one config key (retraining per value) and/or a list of perturbations."""
    out = Path(out_dir)
    for p in perturbs:
        PerturbSpec.parse(p)
    if grid is None and checkpoint is not None:
        rows = []
        for p in [None, *perturbs]:
            rdir = out / ("report" + (f"-{p.replace(':', '_')}" if p else ""))
            rows.append({"param": "", "value": "", "perturb": p or "clean", **infer_run(checkpoint, rdir, p)})
    else:
        key, values = _parse_grid(grid) if grid else (None, [""])
        for v in values:
            build_config(base, {} if key is None else {key: v})
        job_list = [(base, key, v, str(out / (f"{key}={v}" if key else "run")), list(perturbs)) for v in values]
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(jobs) as pool:
                results = list(pool.map(_sweep_point, job_list))
        else:
            results = [_sweep_point(j) for j in job_list]
        rows = [r for res in results for r in res]
    write_csv(out / "sweep.csv", rows)
    return rows


def cmd_sweep(args) -> int:
    base = _read_config_arg(args.config)
    base = build_config(base, parse_overrides(args.set)).to_dict()
    out = args.out or str(Path(build_config(base).output_dir) / "sweep")
    rows = sweep_run(base, args.grid, args.perturb or [], out, args.jobs, args.checkpoint)
    for r in rows:
        print(json.dumps(r))
    return 0


# -- probe ----------------------------------------------------------------------------

def probe_run(checkpoint: str | Path, perturb: str, out: str | Path) -> dict:
    """Per-block token-sequence drift between clean and perturbed test images."""
    from .backbone import representation_drift

    pipe = ckpt.load(checkpoint)
    spec = PerturbSpec.parse(perturb)
    _, (_, _, test) = _normalized_splits(pipe.config, pipe)
    idx = list(range(len(test)))
    noisy = perturb_batch(spec, test.images, test.labels, idx, pipe, pipe.config.infer.seed)
    drift = representation_drift(pipe.backbone, test.images, noisy).to(torch.float64).numpy()
    rows = [{"block": k + 1, "mean_distance": float(drift[:, k].mean()), "std_distance": float(drift[:, k].std())}
            for k in range(drift.shape[1])]
    write_csv(out, rows)
    return {"perturb": perturb, "deepest_exceeds_first": float(np.mean(drift[:, -1] > drift[:, 0])),
            "blocks": rows}


def cmd_probe(args) -> int:
    out = args.out or str(Path(args.checkpoint).parent / "drift.csv")
    print(json.dumps(probe_run(args.checkpoint, args.perturb, out)))
    return 0


def cmd_verify(args) -> int:
    from .verification import run_checks

    results = run_checks(full=args.full, only=args.only)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


# -- parser ---------------------------------------------------------------------------

def _keys_epilog() -> str:
    lines = ["config keys (JSON file or --set key=value):"]
    for k, v in config_keys().items():
        lines.append(f"  {k} = {json.dumps(v)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="nestdiff", description=__doc__.splitlines()[0],
                                     epilog=_keys_epilog(), formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run all three training stages", epilog=_keys_epilog(), formatter_class=fmt)
    p.add_argument("--config", help="JSON config file or a train manifest to replay")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--out", help="output directory (default: output_dir)")
    p.add_argument("--resume", help="checkpoint whose completed stages are kept")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="Nested-ensemble inference to a report bundle", epilog=_keys_epilog(),
                       formatter_class=fmt)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", help="replay an infer manifest")
    p.add_argument("--perturb", help="kind:strength, e.g. gaussian:0.5, lowres:4, contrast:0.7, fgsm:0.03")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override infer/ensemble keys")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics CSVs from report directories")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", help="combined summary CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid over a config key and/or perturbations", epilog=_keys_epilog(),
                       formatter_class=fmt)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--grid", help="key=v1,v2,... (retrains per value), e.g. model.K=1,2,3,4,5")
    p.add_argument("--perturb", action="append", help="repeatable perturbation spec")
    p.add_argument("--checkpoint", help="reuse a trained checkpoint for a perturbation-only sweep")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("probe", help="per-block representation drift under a perturbation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--perturb", default="gaussian:0.5")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify", help="run the oracle and property checks")
    p.add_argument("--full", action="store_true", help="include the end-to-end training checks")
    p.add_argument("--only", action="append", help="run only checks whose name contains this text")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(int(os.environ.get("NESTDIFF_THREADS", "1")))
    try:
        return args.func(args)
    except (ConfigError, ckpt.ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, NumericError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ckpt.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
