"""Command-line interface for the datta toolkit: data preparation, training, adaptation, evaluation and benchmarks."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import load_config
from .data import (
    ActivityTemplates,
    DegenerateRange,
    PreprocessRejection,
    build_splits,
    preprocess_stream,
    read_dataset,
    synthesize_domain,
    write_dataset,
)

log = logging.getLogger("datta")


def _load_raw(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, delimiter=",", ndmin=2)


def cmd_preprocess(args) -> int:
    """Raw streams listed in ``<in>/labels.csv`` (columns: file, activity, domain[, sample_id])."""
    src = Path(args.inp)
    samples, rejected = [], {}
    with open(src / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            sid = row.get("sample_id") or Path(row["file"]).stem
            try:
                samples.append(
                    preprocess_stream(
                        _load_raw(src / row["file"]),
                        args.rate,
                        activity=int(row["activity"]),
                        domain=int(row["domain"]),
                        sample_id=sid,
                    )
                )
            except DegenerateRange:
                rejected["DegenerateRange"] = rejected.get("DegenerateRange", 0) + 1
            except PreprocessRejection as exc:
                rejected[type(exc).__name__] = rejected.get(type(exc).__name__, 0) + 1
    write_dataset(samples, args.out)
    print(json.dumps({"written": len(samples), "rejected": rejected}))
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args.spec)
    templates = ActivityTemplates(cfg.synth.n_activities, cfg.synth.template_length, seed=cfg.synth.template_seed)
    samples = []
    for dom, dcfg in sorted(cfg.domains.items()):
        n = args.n if args.n is not None else cfg.synth.samples_per_domain
        samples += synthesize_domain(dcfg.to_spec(dom), n, templates, cfg.synth.n_activities).samples
    write_dataset(samples, args.out)
    print(json.dumps({"written": len(samples), "domains": sorted(cfg.domains)}))
    return 0


def _source_splits(samples, cfg):
    train_domains = cfg.data.train_domains or tuple(sorted({s.domain for s in samples}))
    chosen = [s for s in samples if s.domain in train_domains]
    fractions = {"Train": 1 - cfg.data.val_fraction, "Val": cfg.data.val_fraction}
    return build_splits(chosen, {d: ("Train", "Val") for d in train_domains}, fractions, seed=cfg.data.split_seed)


def cmd_train(args) -> int:
    from .model import save_checkpoint
    from .plotting import plot_training_log
    from .train import train_dat

    cfg = load_config(args.config)
    splits = _source_splits(read_dataset(args.data), cfg)
    model_cfg = replace(cfg.model, n_domains=len(splits["Train"].domain_set))
    aug = cfg.augment if cfg.augment.enabled else None
    result = train_dat(splits["Train"].samples, splits["Val"].samples, model_cfg, cfg.train, aug)
    out = Path(args.out)
    save_checkpoint(result.model, out, {"run_config_hash": cfg.digest(), "domain_index": {str(k): v for k, v in result.domain_index.items()}})
    result.source_stats.save(out / "stats.safetensors")
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec | {"config_hash": cfg.digest()}) + "\n")
    plot_training_log(result.log, out / "training.png")
    print(json.dumps({"checkpoint": str(out), "best_val_f1": result.best_val_f1, "steps": len(result.log)}))
    return 0


def _load_model_and_stats(args):
    from .model import load_checkpoint
    from .train import SourceStatistics

    stats_path = args.stats or str(Path(args.ckpt) / "stats.safetensors")
    return load_checkpoint(args.ckpt), SourceStatistics.load(stats_path)


def cmd_adapt(args) -> int:
    from .metrics import accuracy, macro_f1
    from .tta import TestTimeAdaptor
    import time

    cfg = load_config(args.config)
    model, stats = _load_model_and_stats(args)
    adaptor = TestTimeAdaptor(model, stats, cfg.tta)
    y, p = [], []
    with open(args.out, "w") as fh:
        for s in read_dataset(args.stream):
            t0 = time.perf_counter()
            out = adaptor.step(torch.from_numpy(s.amplitudes))
            dt = (time.perf_counter() - t0) * 1e3
            y.append(s.activity)
            p.append(out.prediction)
            rec = {"sample_id": s.sample_id, "prediction": out.prediction, "latency_ms": dt, "L_TTA": out.loss, "drift_norm": out.drift_norm}
            fh.write(json.dumps(rec) + "\n")
    print(json.dumps({"samples": len(y), "accuracy": accuracy(y, p), "macro_f1": macro_f1(y, p), "config_hash": cfg.digest()}))
    return 0


def cmd_eval(args) -> int:
    from .harness import SequenceSpec, evaluate
    from .plotting import plot_rolling_f1
    from .tta import FrozenPredictor, TestTimeAdaptor

    cfg = load_config(args.config)
    model, stats = _load_model_and_stats(args)
    samples = read_dataset(args.data)
    order = tuple(int(d) for d in args.domains.split(",")) if args.domains else None
    spec = SequenceSpec(args.mode, order, args.repeats, args.block, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = {"frozen": evaluate(FrozenPredictor(model), samples, spec, cfg.experiment.window)}
    if not args.frozen_only:
        runs["tta"] = evaluate(TestTimeAdaptor(model, stats, replace(cfg.tta, reset_rate=0.0)), samples, spec, cfg.experiment.window)
        runs["tta_reset"] = evaluate(TestTimeAdaptor(model, stats, cfg.tta), samples, spec, cfg.experiment.window)
    summary = {}
    for name, m in runs.items():
        m.write_records(out / f"{name}.jsonl")
        m.write_series(out / f"{name}_series.csv")
        summary[name] = {"accuracy": m.accuracy, "macro_f1": m.macro_f1}
    plot_rolling_f1(runs, out / "rolling_f1.png", f"{args.mode} order")
    summary["config_hash"] = cfg.digest()
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 0


def cmd_bench(args) -> int:
    from dataclasses import asdict

    from .harness import bench_inference
    from .plotting import plot_latency

    cfg = load_config(args.config)
    torch.set_num_threads(1)
    model, stats = _load_model_and_stats(args)
    inputs = read_dataset(args.data)[: max(args.iters, 1)] if args.data else np.random.default_rng(0).random((16, 30, 220), dtype=np.float32)
    res = bench_inference(model, stats, inputs, cfg.tta, n_iters=args.iters, warmup=args.warmup)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {k: asdict(v) for k, v in res.items()} | {"config_hash": cfg.digest(), "n_iters": args.iters, "warmup": args.warmup}
    (out / "latency.json").write_text(json.dumps(report, indent=2))
    plot_latency(res, out / "latency.png")
    print(json.dumps(report))
    return 0


def cmd_exp(args) -> int:
    from .experiment import run_experiment

    cfg = load_config(args.config)
    out = run_experiment(cfg, args.out or Path("runs") / f"{cfg.experiment.name}-{cfg.digest()}")
    print(json.dumps({"out": str(out), "config_hash": cfg.digest()}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="datta", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="raw packet streams -> dataset file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=int, required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="synthetic domains -> dataset file")
    p.add_argument("--spec", required=True)
    p.add_argument("--n", type=int, default=None, help="samples per domain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="domain-adversarial training")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("adapt", cmd_adapt, "online adaptation over a stream"), ("eval", cmd_eval, "sequence evaluation"), ("bench", cmd_bench, "latency benchmark")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--stats")
        p.add_argument("--config")
        p.set_defaults(func=func)
        if name == "adapt":
            p.add_argument("--stream", required=True)
            p.add_argument("--out", required=True)
        elif name == "eval":
            p.add_argument("--data", required=True)
            p.add_argument("--out", required=True)
            p.add_argument("--mode", default="shuffled", choices=("ascending", "descending", "alternating", "shuffled"))
            p.add_argument("--domains", help="comma-separated domain order (D0, D1, ...)")
            p.add_argument("--repeats", type=int)
            p.add_argument("--block", type=int, default=1)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--frozen-only", action="store_true")
        else:
            p.add_argument("--data")
            p.add_argument("--iters", type=int, default=1000)
            p.add_argument("--warmup", type=int, default=100)
            p.add_argument("--out", required=True)

    p = sub.add_parser("exp", help="run a declarative experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_exp)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
