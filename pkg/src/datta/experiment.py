"""Declarative experiment runs: data, training, adaptation and evaluation in one directory."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, dump_config
from .data import ActivityTemplates, CsiSample, DatasetSplit, build_splits, read_dataset, synthesize_domain
from .harness import RunMetrics, SequenceSpec, evaluate
from .model import save_checkpoint
from .train import train_dat
from .tta import FrozenPredictor, TestTimeAdaptor

log = logging.getLogger(__name__)


def synthesize_from_config(cfg: RunConfig) -> list[CsiSample]:
    if not cfg.domains:
        raise ValueError("synthetic data needs at least one [domain.N] section")
    templates = ActivityTemplates(cfg.synth.n_activities, cfg.synth.template_length, seed=cfg.synth.template_seed)
    samples: list[CsiSample] = []
    for dom, dcfg in sorted(cfg.domains.items()):
        split = synthesize_domain(dcfg.to_spec(dom), cfg.synth.samples_per_domain, templates, cfg.synth.n_activities)
        samples.extend(split.samples)
    return samples


def load_splits(cfg: RunConfig) -> dict[str, DatasetSplit]:
    """Build Train/Val/Val_TTA/Test from the configured source."""
    samples = read_dataset(cfg.data.path) if cfg.data.source == "file" else synthesize_from_config(cfg)
    present = sorted({s.domain for s in samples})
    train_domains = cfg.data.train_domains or tuple(present[:-1])
    test_domains = cfg.data.test_domains or tuple(d for d in present if d not in train_domains)
    assignment = {d: ("Train", "Val") for d in train_domains}
    assignment.update({d: ("Val_TTA", "Test") for d in test_domains})
    samples = [s for s in samples if s.domain in assignment]
    fractions = {
        "Train": 1 - cfg.data.val_fraction,
        "Val": cfg.data.val_fraction,
        "Val_TTA": cfg.data.val_tta_fraction,
        "Test": 1 - cfg.data.val_tta_fraction,
    }
    return build_splits(samples, assignment, fractions, seed=cfg.data.split_seed)


def sequence_specs(cfg: RunConfig, test_domains: list[int], seed: int) -> dict[str, SequenceSpec]:
    specs = {}
    for mode in cfg.experiment.sequences:
        if mode == "alternating":
            order = cfg.experiment.alternating_domains or tuple(test_domains)
            specs[mode] = SequenceSpec(mode, tuple(order), block=cfg.experiment.alternating_block, seed=seed)
        else:
            specs[mode] = SequenceSpec(mode, tuple(test_domains), seed=seed)
    return specs


@dataclass
class ResultRow:
    augment: bool
    reset: bool | None  # None marks the unadapted baseline
    sequence: str
    accuracy: list[float]
    macro_f1: list[float]


def _write_results(rows: list[ResultRow], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "augment", "reset", "sequence", "n_seeds", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std"])
        for r in rows:
            variant = "frozen" if r.reset is None else ("tta_reset" if r.reset else "tta")
            w.writerow(
                [
                    variant,
                    "on" if r.augment else "off",
                    "-" if r.reset is None else ("on" if r.reset else "off"),
                    r.sequence,
                    len(r.accuracy),
                    f"{np.mean(r.accuracy):.6f}",
                    f"{np.std(r.accuracy):.6f}",
                    f"{np.mean(r.macro_f1):.6f}",
                    f"{np.std(r.macro_f1):.6f}",
                ]
            )


def run_experiment(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Train, adapt and evaluate every (seed, augment, reset, sequence) combination.

    Layout::

        out_dir/manifest.json, config.ini, results.csv, timing.csv
        out_dir/seed<S>/aug-<on|off>/{ckpt/, stats.safetensors, train_log.jsonl, training.png}
        out_dir/seed<S>/aug-<on|off>/<sequence>/{<variant>.jsonl, <variant>_series.csv, rolling_f1.png}

    ``results.csv`` aggregates over seeds. Everything except ``timing.csv`` is
    deterministic for a fixed config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = cfg.experiment
    splits = load_splits(cfg)
    test_domains = sorted(splits["Test"].domain_set)
    n_domains = len(splits["Train"].domain_set)
    model_cfg = replace(cfg.model, n_domains=max(n_domains, 1))
    (out / "config.ini").write_text(dump_config(cfg))

    rows: dict[tuple, ResultRow] = {}
    timing = []
    files = []
    for seed in exp.seeds:
        for aug in exp.ablation_augment:
            run_dir = out / f"seed{seed}" / f"aug-{'on' if aug else 'off'}"
            run_dir.mkdir(parents=True, exist_ok=True)
            dat_cfg = replace(cfg.train, rng_seed=seed)
            aug_cfg = replace(cfg.augment, rng_seed=seed) if aug else None
            log.info("training seed=%d augment=%s", seed, aug)
            result = train_dat(splits["Train"].samples, splits["Val"].samples, model_cfg, dat_cfg, aug_cfg)
            save_checkpoint(result.model, run_dir / "ckpt", {"run_config_hash": cfg.digest(), "seed": seed})
            result.source_stats.save(run_dir / "stats.safetensors")
            with open(run_dir / "train_log.jsonl", "w") as fh:
                for rec in result.log:
                    fh.write(json.dumps(rec) + "\n")
            if exp.figures:
                from .plotting import plot_training_log

                plot_training_log(result.log, run_dir / "training.png")

            for name, spec in sequence_specs(cfg, test_domains, seed).items():
                seq_dir = run_dir / name
                seq_dir.mkdir(exist_ok=True)
                runs: dict[str, RunMetrics] = {"frozen": evaluate(FrozenPredictor(result.model), splits["Test"].samples, spec, exp.window)}
                for reset in exp.ablation_reset:
                    tta_cfg = replace(cfg.tta, rng_seed=seed, reset_rate=cfg.tta.reset_rate if reset else 0.0)
                    adaptor = TestTimeAdaptor(result.model, result.source_stats, tta_cfg)
                    runs["tta_reset" if reset else "tta"] = evaluate(adaptor, splits["Test"].samples, spec, exp.window)
                for variant, metrics in runs.items():
                    metrics.write_records(seq_dir / f"{variant}.jsonl", with_latency=False)
                    metrics.write_series(seq_dir / f"{variant}_series.csv")
                    files += [seq_dir / f"{variant}.jsonl", seq_dir / f"{variant}_series.csv"]
                    timing.append((seed, aug, name, variant, float(np.mean([r.latency_ms for r in metrics.records]))))
                    reset = None if variant == "frozen" else variant == "tta_reset"
                    row = rows.setdefault((aug, reset, name), ResultRow(aug, reset, name, [], []))
                    row.accuracy.append(metrics.accuracy)
                    row.macro_f1.append(metrics.macro_f1)
                if exp.figures:
                    from .plotting import plot_rolling_f1

                    plot_rolling_f1(runs, seq_dir / "rolling_f1.png", f"seed {seed}, augment {'on' if aug else 'off'}, {name}")

    adapted = [r for r in rows.values() if r.reset is not None]
    _write_results(adapted, out / "results.csv")
    _write_results([r for r in rows.values() if r.reset is None], out / "baselines.csv")
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "augment", "sequence", "variant", "mean_latency_ms"])
        w.writerows(timing)
    manifest = {
        "name": exp.name,
        "version": __version__,
        "config_hash": cfg.digest(),
        "model_config_hash": model_cfg.digest(),
        "seeds": list(exp.seeds),
        "split_seed": cfg.data.split_seed,
        "split_sizes": {k: len(v) for k, v in splits.items()},
        "files": sorted(str(p.relative_to(out)) for p in files),
        "config": cfg.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out
