"""Command-line surface.

Subcommands: ``ingest`` (dataset summary), ``train`` (fit + metrics
artifacts), ``eval`` (score a checkpoint), ``ablate`` (the six-variant
component sweep), and ``bench`` (mixer scaling measurements). Specs are JSON
documents; command-line flags override spec-file values which override
defaults. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

stdout carries only report paths and one summary line per command; progress
and diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mixers as mx
from . import model as md
from . import numcore as nc
from . import tgraph as tg
from . import traineval as te

ABLATION_VARIANTS = {
    "full": {},
    "no_lp": {"no_lp": True},
    "no_rt": {"no_rt": True},
    "relu": {"activation": "relu"},
    "no_resnet": {"no_resnet": True},
    "no_cm": {"no_cm": True},
}

USAGE_ERRORS = (
    nc.ConfigError,
    nc.ContractError,
    tg.SpecError,
    tg.ParseError,
    tg.ValidationError,
    tg.SplitError,
    te.ProtocolError,
    FileNotFoundError,
    json.JSONDecodeError,
)


class UsageError(ValueError):
    """Bad flags or spec content."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


@dataclass
class RunSpec:
    """One resolved run: exactly one data source, plus configs and output."""

    data_path: str | None = None
    synthetic: tg.SyntheticSpec | None = None
    synthetic_seed: int = 0
    model: md.ModelConfig = field(default_factory=md.ModelConfig)
    train: te.TrainConfig = field(default_factory=te.TrainConfig)
    out_dir: Path = Path("out")
    runs: int = 1

    def validate(self):
        if (self.data_path is None) == (self.synthetic is None):
            raise UsageError("exactly one data source required: a dataset path or a synthetic spec")
        if self.runs < 1:
            raise UsageError("--runs must be at least 1")

    def load_stream(self) -> tg.EventStream:
        if self.data_path is not None:
            if not Path(self.data_path).exists():
                raise UsageError(f"dataset file not found: {self.data_path}")
            return tg.ingest_csv(self.data_path)
        return tg.generate_synthetic(self.synthetic, self.synthetic_seed)


def _load_spec_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    with open(p, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top-level JSON object expected")
    return doc


def resolve_run_spec(args) -> RunSpec:
    """Merge defaults, spec file, and flags (flags win)."""
    doc = _load_spec_file(args.config) if args.config else {}
    model_kw = dict(doc.get("model", {}))
    train_kw = dict(doc.get("train", {}))
    data = doc.get("data", {})
    spec = RunSpec()
    if "path" in data:
        spec.data_path = data["path"]
    if "synthetic" in data:
        spec.synthetic = tg.SyntheticSpec.from_dict(data["synthetic"])
        spec.synthetic_seed = int(data.get("seed", 0))
    if "out" in doc:
        spec.out_dir = Path(doc["out"])
    spec.runs = int(doc.get("runs", 1))

    if getattr(args, "dataset", None) and getattr(args, "synthetic", None):
        raise UsageError("--dataset and --synthetic are mutually exclusive")
    if getattr(args, "dataset", None):
        spec.data_path, spec.synthetic = args.dataset, None
    if getattr(args, "synthetic", None):
        spec.synthetic = tg.SyntheticSpec.from_dict(json.loads(args.synthetic))
        spec.data_path = None
    for name in ("mixer", "dim", "time_dim", "n_max"):
        flag = getattr(args, name, None)
        if flag is not None:
            model_kw[name] = flag
    if getattr(args, "spans", None):
        model_kw["spans"] = [int(x) for x in args.spans.split(",")]
    for flag in ("no_lp", "no_rt", "no_resnet", "no_cm"):
        if getattr(args, flag, False):
            model_kw[flag] = True
    if getattr(args, "relu", False):
        model_kw["activation"] = "relu"
    for name in ("epochs", "lr", "batch_size", "patience", "seed"):
        flag = getattr(args, name, None)
        if flag is not None:
            train_kw[name] = flag
    if getattr(args, "out", None):
        spec.out_dir = Path(args.out)
    if getattr(args, "runs", None):
        spec.runs = args.runs

    spec.model = md.ModelConfig.from_dict(model_kw)
    spec.train = te.TrainConfig(**train_kw)
    spec.validate()
    return spec


def _aggregate(values: list[float]) -> dict:
    return {
        "mean": float(statistics.fmean(values)),
        "std": float(np.std(values)),  # population std over the runs
    }


def _run_training(spec: RunSpec) -> tuple[list[dict], list[md.ModelParams]]:
    stream = spec.load_stream()
    reports, params_list = [], []
    for run_idx in range(spec.runs):
        cfg = te.TrainConfig(epochs=spec.train.epochs, lr=spec.train.lr,
                             batch_size=spec.train.batch_size,
                             patience=spec.train.patience,
                             seed=spec.train.seed + run_idx)
        _log(f"run {run_idx}: seed={cfg.seed}")
        params, report = te.train(stream, spec.model, cfg)
        doc = report.to_dict()
        doc["seed"] = cfg.seed
        reports.append(doc)
        params_list.append(params)
    return reports, params_list


def cmd_train(args) -> int:
    spec = resolve_run_spec(args)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    reports, params_list = _run_training(spec)
    metrics = {
        "model": spec.model.to_dict(),
        "runs": reports,
        "ap": _aggregate([r["ap"] for r in reports]),
        "auc_roc": _aggregate([r["auc_roc"] for r in reports]),
    }
    metrics_path = spec.out_dir / "metrics.json"
    _write_json(metrics_path, metrics)
    md.save_checkpoint(params_list[0], spec.out_dir / "checkpoint.json")
    with open(spec.out_dir / "loss_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "epoch", "loss", "val_ap", "val_auc_roc"])
        for run_idx, rep in enumerate(reports):
            for epoch, loss in enumerate(rep["epoch_losses"]):
                writer.writerow([run_idx, epoch, repr(loss),
                                 repr(rep["val_ap"][epoch]),
                                 repr(rep["val_auc_roc"][epoch])])
    print(f"{metrics_path} ap={metrics['ap']['mean']:.4f} "
          f"auc_roc={metrics['auc_roc']['mean']:.4f}")
    return 0


def cmd_eval(args) -> int:
    spec = resolve_run_spec(args)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    params = md.load_checkpoint(args.checkpoint)
    stream = spec.load_stream()
    _, _, test_split = tg.chronological_split(stream, te.TRAIN_RATIO, te.VAL_RATIO)
    fit_len = len(stream) - len(test_split)
    candidates = stream.slice(0, fit_len).destinations()
    store = tg.TemporalStore(stream)
    ap, auc = te.evaluate(params, test_split, store, candidates,
                          [spec.train.seed, te.TEST_SEED_TAG])
    eval_path = spec.out_dir / "eval.json"
    _write_json(eval_path, {"ap": ap, "auc_roc": auc, "seed": spec.train.seed})
    print(f"{eval_path} ap={ap:.4f} auc_roc={auc:.4f}")
    return 0


def cmd_ablate(args) -> int:
    spec = resolve_run_spec(args)
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    if spec.model.mixer != "adaptive":
        raise UsageError("the ablation sweep applies to the adaptive mixer")
    base = spec.model.to_dict()
    results = {}
    for variant, overrides in ABLATION_VARIANTS.items():
        cfg_dict = dict(base)
        cfg_dict.update(overrides)
        cfg_dict.update({k: False for k in ("no_lp", "no_rt", "no_resnet", "no_cm")
                         if k not in overrides})
        if "activation" not in overrides:
            cfg_dict["activation"] = base["activation"]
        variant_spec = RunSpec(spec.data_path, spec.synthetic, spec.synthetic_seed,
                               md.ModelConfig.from_dict(cfg_dict), spec.train,
                               spec.out_dir, spec.runs)
        _log(f"ablation variant: {variant}")
        reports, params_list = _run_training(variant_spec)
        md.save_checkpoint(params_list[0], spec.out_dir / f"checkpoint_{variant}.json")
        results[variant] = {
            "ap": [r["ap"] for r in reports],
            "auc_roc": [r["auc_roc"] for r in reports],
            "seeds": [r["seed"] for r in reports],
        }
    observations = {}
    full_ap = results["full"]["ap"]
    for variant in ABLATION_VARIANTS:
        if variant == "full":
            continue
        wins = sum(1 for a, b in zip(full_ap, results[variant]["ap"]) if a >= b)
        observations[variant] = {"full_at_least_variant_in_seeds": wins,
                                 "total_seeds": len(full_ap)}
    doc = {"variants": results, "observations": observations,
           "model": base, "runs": spec.runs}
    report_path = spec.out_dir / "ablation.json"
    _write_json(report_path, doc)
    with open(spec.out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "ap", "auc_roc"])
        for variant, res in results.items():
            writer.writerow([variant, repr(float(np.mean(res["ap"]))),
                             repr(float(np.mean(res["auc_roc"])))])
    summary = " ".join(f"{v}={float(np.mean(res['ap'])):.4f}"
                       for v, res in results.items())
    print(f"{report_path} {summary}")
    return 0


# --- mixer scaling benchmark ----------------------------------------------


def _bench_forward(mixer: str, n: int, dim: int, kernel: int,
                   rng: np.random.Generator):
    """One mixer forward on fresh constants; returns (tape_flops, wall_ns)."""
    h = rng.normal(size=(n, dim))
    times = np.arange(float(n))
    tape = nc.Tape()
    tokens = tape.constant(h)
    if mixer == "adaptive":
        order = tape.constant(np.zeros((1, kernel)))
        start = time.perf_counter_ns()
        mx.adaptive_mix(tokens, times, np.arange(kernel), order, 0.5)
    elif mixer == "pooling":
        start = time.perf_counter_ns()
        mx.pooling_mix(tokens, kernel)
    elif mixer == "mlp":
        hidden = int(np.ceil(md.MLP_TOKEN_RATIO * n))
        params = mx.MlpLayer(tape.constant(rng.normal(size=(hidden, n))),
                             tape.constant(np.zeros((hidden, 1))),
                             tape.constant(rng.normal(size=(n, hidden))),
                             tape.constant(np.zeros((n, 1))))
        start = time.perf_counter_ns()
        mx.mlp_mix(tokens, params)
    elif mixer == "attention":
        params = mx.AttentionLayer(*(tape.constant(rng.normal(size=(dim, dim)))
                                     for _ in range(4)))
        start = time.perf_counter_ns()
        mx.attention_mix(tokens, params)
    else:
        raise UsageError(f"unknown mixer {mixer!r}")
    return tape.flops, time.perf_counter_ns() - start


def _fit_slope(ns, values) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)),
                            np.log(np.asarray(values, float)), 1)[0])


def run_bench(lengths, mixer_kinds, repeats, dim=8, kernel=8, seed=0) -> dict:
    """Measure operation counts and wall time per (mixer, N); fit log-log slopes.

    Operation counts are machine-independent and drive the scaling claim;
    wall times are reported alongside.
    """
    lengths = [int(n) for n in lengths]
    if len(lengths) < 3:
        raise UsageError("need at least 3 sequence lengths to fit a slope robustly")
    if sorted(lengths) != lengths:
        raise UsageError("sequence lengths must be ascending")
    if repeats < 1:
        raise UsageError("repeats must be at least 1")
    rng = np.random.default_rng(seed)
    out = {}
    for mixer in mixer_kinds:
        points = []
        for n in lengths:
            _bench_forward(mixer, n, dim, kernel, rng)  # warmup
            ops = None
            walls = []
            for _ in range(repeats):
                ops, wall = _bench_forward(mixer, n, dim, kernel, rng)
                walls.append(wall)
            points.append({"n": n, "ops": int(ops),
                           "median_ns": int(np.median(walls))})
        out[mixer] = {
            "points": points,
            "ops_slope": _fit_slope(lengths, [p["ops"] for p in points]),
            "wall_slope": _fit_slope(lengths, [p["median_ns"] for p in points]),
        }
    return out


def cmd_bench(args) -> int:
    out_dir = Path(args.out or "out")
    out_dir.mkdir(parents=True, exist_ok=True)
    lengths = [int(x) for x in args.lengths.split(",")]
    mixer_kinds = [m.strip() for m in args.mixers.split(",")]
    results = run_bench(lengths, mixer_kinds, args.repeats, dim=args.dim,
                        kernel=args.kernel, seed=args.seed or 0)
    _write_json(out_dir / "bench.json", results)
    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mixer", "N", "median_ns", "slope"])
        for mixer, res in results.items():
            for p in res["points"]:
                writer.writerow([mixer, p["n"], p["median_ns"],
                                 repr(res["ops_slope"])])
    summary = " ".join(f"{m}:ops_slope={res['ops_slope']:.3f}"
                       for m, res in results.items())
    print(f"{csv_path} {summary}")
    return 0


def cmd_ingest(args) -> int:
    if not Path(args.path).exists():
        raise UsageError(f"dataset file not found: {args.path}")
    stream = tg.ingest_csv(args.path)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        tg.write_csv(stream, out_dir / "ingested.csv")
    print(f"nodes={stream.node_count} links={len(stream)} "
          f"edge_dim={stream.edge_dim} node_dim={stream.node_dim}")
    return 0


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run spec; flags override file values")
    p.add_argument("--dataset", help="CSV interaction file")
    p.add_argument("--synthetic", help="inline JSON synthetic stream spec")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="base training seed")
    p.add_argument("--runs", type=int, help="sequential runs with seed, seed+1, ...")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--mixer", choices=md.MIXERS)
    p.add_argument("--dim", type=int)
    p.add_argument("--time-dim", dest="time_dim", type=int)
    p.add_argument("--n-max", dest="n_max", type=int)
    p.add_argument("--spans", help="comma-separated per-layer spans, e.g. 2,4,8")
    for flag in ("no-lp", "no-rt", "relu", "no-resnet", "no-cm"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempomix",
        description="Temporal-graph link prediction with attention-free token mixing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="summarize an interaction CSV")
    p.add_argument("path")
    p.add_argument("--out", help="directory for the normalized copy")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="fit a model and write metrics artifacts")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the test partition")
    p.add_argument("checkpoint")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the six component variants")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="mixer scaling benchmark")
    p.add_argument("--lengths", default="256,1024,4096",
                   help="ascending comma-separated sequence lengths (>=3)")
    p.add_argument("--mixers", default="adaptive,attention",
                   help="comma-separated mixer kinds")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--kernel", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        _log(f"error: {exc}")
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _log(f"runtime error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
