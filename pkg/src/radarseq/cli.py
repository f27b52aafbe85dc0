"""Command-line entry point: synth, prepare, train, eval, ablate, explain, pipeline.

Every command writes into one run directory that holds a single
``manifest.json``. The manifest records the full configuration, the root
seed and sha256 hashes of inputs and outputs; two runs whose manifest hashes
agree produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .domain import (
    DataError, dataset_end_date, fit_norm_stats, make_splits, read_events_csv, write_events_csv,
)
from .model import ModelConfig, RadarSeqModel, config_from_section, config_to_section
from .synth import CohortConfig, generate_cohort, write_ground_truth
from .trainer import (
    TrainConfig, TrainingDiverged, ablation_table, evaluate, run_ablation, train, write_ablation_csv,
    write_history_csv, write_metrics_csv, write_predictions_csv,
)
from .window import WindowPlan, build_dataset, load_dataset, save_dataset

log = logging.getLogger("radarseq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.rsck"


@dataclass(frozen=True)
class PrepareConfig:
    split_seed: int = 0
    stride: int = 5
    test_stride: int = 1
    include_censored: bool = False


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- manifests

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    return x


class RunManifest:
    """What a run was asked to do and what it produced."""

    def __init__(self, command: str, seed, config: dict, inputs: dict | None = None):
        self.command = command
        self.seed = seed
        self.config = _jsonable(config)
        self.inputs = {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in (inputs or {}).items()}
        self.outputs: dict[str, str] = {}
        self.started = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
        self.finished = None

    @property
    def hash(self) -> str:
        # timestamps and paths are excluded: the hash names the computation, not the occasion
        key = {"command": self.command, "seed": self.seed, "config": self.config,
               "inputs": {k: v["sha256"] for k, v in sorted(self.inputs.items())}}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()

    def record_outputs(self, out_dir: Path) -> None:
        for p in sorted(out_dir.rglob("*")):
            if p.is_file() and p.name != MANIFEST:
                self.outputs[p.relative_to(out_dir).as_posix()] = sha256_file(p)

    def to_dict(self) -> dict:
        return {"command": self.command, "seed": self.seed, "config": self.config, "inputs": self.inputs,
                "outputs": self.outputs, "manifest_hash": self.hash, "started": self.started,
                "finished": self.finished}

    def write(self, out_dir: Path) -> Path:
        self.record_outputs(out_dir)
        self.finished = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
        path = out_dir / MANIFEST
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- config files

def read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    try:
        if not parser.read(path, encoding="utf-8"):
            raise UsageError(f"config file not found: {path}")
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    return parser


def _section(cls, parser, name, **overrides):
    try:
        return config_from_section(cls, parser, name, **overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"[{name}] {exc}") from None


def model_and_train_config(parser, seed=None):
    over = {} if seed is None else {"seed": seed}
    return _section(ModelConfig, parser, "model", **over), _section(TrainConfig, parser, "train", **over)


def _model_config_from_dict(d: dict) -> ModelConfig:
    kw = {f.name: d[f.name] for f in fields(ModelConfig) if f.name in d}
    for k in ("filters", "pool"):
        if k in kw:
            kw[k] = tuple(kw[k])
    return ModelConfig(**kw)


def load_model(path) -> tuple[RadarSeqModel, dict]:
    try:
        params, manifest = ad.load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    model = RadarSeqModel(_model_config_from_dict(manifest["model"]))
    model.load_state_dict(params)
    return model, manifest


def _dataset_compatible(model: RadarSeqModel, ds) -> None:
    if ds.T != model.config.T or ds.image_shape != (model.config.image_size,) * 2:
        raise DataError(f"dataset windows ({ds.T} frames of {ds.image_shape}) do not fit the model "
                        f"({model.config.T} frames of {model.config.image_size}px)")


# ---------------------------------------------------------------- steps

def step_synth(cfg: CohortConfig, out: Path, workers: int = 1) -> None:
    cohort = generate_cohort(cfg, workers=workers)
    write_events_csv(out / "events.csv", cohort.timelines)
    write_ground_truth(out / "ground_truth.csv", cohort)
    n_churn = sum(c is not None for c in cohort.churn_dates.values())
    log.info("synth: %d couriers, %d churners", len(cohort.timelines), n_churn)


def step_prepare(events, cfg: PrepareConfig, out: Path, workers: int = 1):
    timelines = read_events_csv(events)
    splits = make_splits([tl.courier_id for tl in timelines], cfg.split_seed)
    stats = fit_norm_stats([tl for tl in timelines if splits[tl.courier_id] == "train"])
    ds = build_dataset(timelines, WindowPlan(cfg.stride, cfg.include_censored), stats, splits,
                       test_plan=WindowPlan(cfg.test_stride, cfg.include_censored),
                       dataset_end=dataset_end_date(timelines), workers=workers)
    if len(ds) == 0:
        raise DataError("no labelled windows; histories are too short for the label horizon")
    save_dataset(out / "dataset.bin", ds)
    stats.to_csv(out / "norm_stats.csv")
    log.info("prepare: %s", {s: ds.report[s] for s in ("train", "val", "test")})
    return ds


def _write_eval(out: Path, model, ds, threshold: float, epoch: int) -> dict:
    reports = {}
    for split in ("val", "test"):
        part = ds.subset(split)
        if len(part) == 0:
            continue
        rep = evaluate(model, part, threshold, split, epoch)
        write_metrics_csv(out / f"metrics_{split}.csv", [rep])
        write_predictions_csv(out / f"predictions_{split}.csv", part, model.predict_proba(part))
        reports[split] = rep
    return reports


def step_train(dataset_path, mcfg: ModelConfig, tcfg: TrainConfig, out: Path) -> dict:
    ds = load_dataset(dataset_path)
    model = RadarSeqModel(mcfg)
    _dataset_compatible(model, ds)
    tr, va, te = (ds.subset(s) for s in ("train", "val", "test"))
    if len(tr) == 0 or len(va) == 0:
        raise DataError("train and validation splits must both contain windows")
    ck_manifest = {"model": asdict(mcfg), "train": asdict(tcfg), "dataset_sha256": sha256_file(dataset_path)}
    try:
        res = train(model, tr, va, tcfg, test_set=te if len(te) else None)
    except TrainingDiverged as exc:
        if exc.state is not None:
            model.load_state_dict(exc.state)
            ad.save_checkpoint(out / CHECKPOINT, model.state_dict(),
                               {**ck_manifest, "diverged_at_epoch": exc.epoch})
        raise
    ad.save_checkpoint(out / CHECKPOINT, model.state_dict(),
                       {**ck_manifest, "best_epoch": res.best_epoch, "stopped_epoch": res.stopped_epoch})
    write_history_csv(out / "history.csv", res)
    write_metrics_csv(out / "metrics_val_epochs.csv", res.history)
    if res.test_history:
        write_metrics_csv(out / "metrics_test_epochs.csv", res.test_history)
    reports = _write_eval(out, model, ds, tcfg.threshold, res.best_epoch)
    log.info("train: best epoch %d (val AUC %s), stopped at %d", res.best_epoch, res.best_auc, res.stopped_epoch)
    return reports


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = CohortConfig(n_couriers=args.n, seed=args.seed, churn_fraction=args.churn_frac)
    out = _out_dir(args.out)
    man = RunManifest("synth", args.seed, {"synth": asdict(cfg)})
    step_synth(cfg, out, args.workers)
    man.write(out)
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = PrepareConfig(args.split_seed, args.stride, args.test_stride, args.include_censored)
    out = _out_dir(args.out)
    man = RunManifest("prepare", args.split_seed, {"prepare": asdict(cfg)}, {"events": args.events})
    step_prepare(args.events, cfg, out, args.workers)
    man.write(out)
    return EXIT_OK


def cmd_train(args) -> int:
    parser = read_ini(args.config) if args.config else configparser.ConfigParser()
    mcfg, tcfg = model_and_train_config(parser, args.seed)
    out = _out_dir(args.out)
    inputs = {"dataset": args.dataset}
    if args.config:
        inputs["config"] = args.config
    man = RunManifest("train", tcfg.seed, {"model": asdict(mcfg), "train": asdict(tcfg)}, inputs)
    try:
        reports = step_train(args.dataset, mcfg, tcfg, out)
    finally:
        man.write(out)
    _print_reports(reports)
    return EXIT_OK


def _print_reports(reports) -> None:
    for split, rep in reports.items():
        auc = "n/a" if rep.auc is None else f"{rep.auc:.4f}"
        print(f"{split}: n={rep.n} AUC={auc} F1={rep.f1:.4f} P={rep.precision:.4f} "
              f"R={rep.recall:.4f} MCC={rep.mcc:.4f}")


def cmd_eval(args) -> int:
    model, manifest = load_model(args.checkpoint)
    ds = load_dataset(args.dataset)
    _dataset_compatible(model, ds)
    part = ds if args.split == "all" else ds.subset(args.split)
    if len(part) == 0:
        raise DataError(f"split {args.split!r} has no windows")
    threshold = manifest.get("train", {}).get("threshold", 0.5)
    rep = evaluate(model, part, threshold, args.split, manifest.get("best_epoch", 0))
    if args.out:
        out = _out_dir(args.out)
        man = RunManifest("eval", None, {"split": args.split},
                          {"checkpoint": args.checkpoint, "dataset": args.dataset})
        write_metrics_csv(out / f"metrics_{args.split}.csv", [rep])
        write_predictions_csv(out / f"predictions_{args.split}.csv", part, model.predict_proba(part))
        man.write(out)
    _print_reports({args.split: rep})
    return EXIT_OK


def cmd_ablate(args) -> int:
    parser = read_ini(args.config) if args.config else configparser.ConfigParser()
    mcfg, tcfg = model_and_train_config(parser)
    seeds = tuple(args.seeds)
    ds = load_dataset(args.dataset)
    _dataset_compatible(RadarSeqModel(mcfg), ds)
    out = _out_dir(args.out)
    inputs = {"dataset": args.dataset, **({"config": args.config} if args.config else {})}
    man = RunManifest("ablate", list(seeds), {"model": asdict(mcfg), "train": asdict(tcfg), "seeds": list(seeds)},
                      inputs)
    runs = run_ablation(ds, mcfg, tcfg, seeds,
                        on_run=lambda r: log.info("ablate: %s seed %d test AUC %s", r.kind, r.seed, r.test.auc))
    rows = ablation_table(runs)
    write_ablation_csv(out / "ablation.csv", rows)
    write_metrics_csv(out / "ablation_runs.csv", [r.test for r in runs])
    with open(out / "ablation_runs_index.csv", "w", encoding="utf-8") as fh:
        fh.write("row,model,seed,best_epoch\n")
        for i, r in enumerate(runs):
            fh.write(f"{i},{r.kind},{r.seed},{r.result.best_epoch}\n")
    man.write(out)
    for r in rows:
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


def cmd_explain(args) -> int:
    from .explain import (
        grad_cam, permutation_importance, project_embeddings, write_cams, write_importance_csv,
        write_projection_csv,
    )
    model, _ = load_model(args.checkpoint)
    ds = load_dataset(args.dataset)
    _dataset_compatible(model, ds)
    part = ds.subset(args.split)
    if len(part) == 0:
        raise DataError(f"split {args.split!r} has no windows")
    out = _out_dir(args.out)
    man = RunManifest("explain", args.seed, {"split": args.split, "repeats": args.repeats, "cams": args.cams},
                      {"checkpoint": args.checkpoint, "dataset": args.dataset})
    imp = permutation_importance(model, part, features=None, repeats=args.repeats, seed=args.seed,
                                 workers=args.workers)
    imp += permutation_importance(model, part, features=["all"], repeats=args.repeats, seed=args.seed,
                                  workers=args.workers, baseline=imp[0].baseline_auc)
    write_importance_csv(out / "importance.csv", imp)
    if len(part) >= 3:
        write_projection_csv(out / "projection.csv", part, project_embeddings(model, part))
    if model.config.uses_frames and args.cams:
        # highest-scoring windows first: the ones a reader wants explained
        order = np.argsort(-model.predict_proba(part), kind="stable")[:args.cams]
        for i in order:
            seq = part.sequence(int(i))
            write_cams(out / "cams", seq.courier_id, seq.end_date, grad_cam(model, seq))
    man.write(out)
    return EXIT_OK


# ---------------------------------------------------------------- pipeline

def pipeline_configs(parser: configparser.ConfigParser) -> dict:
    """All module configs of an end-to-end run; one root seed drives every stage."""
    seed = parser.getint("run", "seed", fallback=1)
    cohort = _section(CohortConfig, parser, "synth", seed=seed)
    prep = _section(PrepareConfig, parser, "prepare", split_seed=seed)
    mcfg, tcfg = model_and_train_config(parser, seed)
    return {"seed": seed, "synth": cohort, "prepare": prep, "model": mcfg, "train": tcfg}


def _parser_from_manifest(man: dict) -> configparser.ConfigParser:
    if man.get("command") != "pipeline":
        raise DataError("only pipeline manifests can be replayed")
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(man["seed"])}
    for name, cls in (("synth", CohortConfig), ("prepare", PrepareConfig), ("model", ModelConfig),
                      ("train", TrainConfig)):
        d = man["config"][name]
        cfg = _model_config_from_dict(d) if cls is ModelConfig else cls(**d)
        config_to_section(cfg, parser, name)
    return parser


def run_pipeline(parser: configparser.ConfigParser, out, workers: int = 1) -> RunManifest:
    cfgs = pipeline_configs(parser)
    out = _out_dir(out)
    man = RunManifest("pipeline", cfgs["seed"], {k: asdict(v) for k, v in cfgs.items() if k != "seed"})
    man.timings = {}            # wall-clock seconds per stage; reported, never hashed
    t0 = time.perf_counter()
    step_synth(cfgs["synth"], out, workers)
    t1 = time.perf_counter()
    step_prepare(out / "events.csv", cfgs["prepare"], out, workers)
    t2 = time.perf_counter()
    man.timings.update(synth=t1 - t0, prepare=t2 - t1)
    try:
        step_train(out / "dataset.bin", cfgs["model"], cfgs["train"], out)
    finally:
        man.timings["train"] = time.perf_counter() - t2
        man.write(out)
    return man


def cmd_pipeline(args) -> int:
    if bool(args.config) == bool(args.manifest):
        raise UsageError("give exactly one of --config or --manifest")
    parser = read_ini(args.config) if args.config else _parser_from_manifest(read_manifest(args.manifest))
    man = run_pipeline(parser, args.out, args.workers)
    print(f"manifest {man.hash}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _workers_default() -> int:
    raw = os.environ.get("RADARSEQ_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radarseq", description="Churn prediction from sequences of radar-chart images.")
    p.add_argument("--workers", type=int, default=None, help="cap on worker processes (env RADARSEQ_WORKERS)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic courier cohort")
    s.add_argument("--n", type=int, default=800)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--churn-frac", type=float, default=0.16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="split, normalize, window and render an events table")
    s.add_argument("--events", required=True)
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--stride", type=int, default=5)
    s.add_argument("--test-stride", type=int, default=1)
    s.add_argument("--include-censored", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config", help="INI file with [model] and [train] sections")
    s.add_argument("--seed", type=int, default=None, help="override the model and training seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train all four model kinds on identical splits")
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--seeds", type=int, nargs="+", default=[0])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("explain", help="permutation importance, Grad-CAM and embedding projection")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cams", type=int, default=4, help="number of windows to dump heatmaps for")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("pipeline", help="synth + prepare + train from one config, or replay a manifest")
    s.add_argument("--config")
    s.add_argument("--manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:          # --help (0) or a usage error (1)
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.workers is None:
        args.workers = _workers_default()
    if args.workers < 1:
        print("radarseq: error: --workers must be positive", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"radarseq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"radarseq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ad.NumericError, FloatingPointError) as exc:
        print(f"radarseq: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:           # invalid settings that reached a config constructor
        print(f"radarseq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
