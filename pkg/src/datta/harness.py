"""Stream evaluation, domain-sequence protocols, probes and latency benchmarks."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .data import CsiSample, stack_amplitudes
from .metrics import accuracy, macro_f1, rolling_f1
from .model import DattaModel
from .train import SourceStatistics
from .tta import AdaptationConfig, FrozenPredictor, StepOutput, TestTimeAdaptor

SEQUENCE_MODES = ("ascending", "descending", "alternating", "shuffled")


class UnknownDomain(KeyError):
    pass


class StreamPredictor(Protocol):
    def step(self, x: torch.Tensor) -> StepOutput: ...


@dataclass(frozen=True)
class SequenceSpec:
    """Order in which a split is streamed.

    ``domain_order`` lists domain ids as D0, D1, ... (default: sorted ids).
    ``repeats`` caps the samples taken per domain; ``block`` is the run length
    of each domain visit in alternating mode.
    """

    mode: str = "shuffled"
    domain_order: tuple[int, ...] | None = None
    repeats: int | None = None
    block: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SEQUENCE_MODES:
            raise ValueError(f"mode must be one of {SEQUENCE_MODES}")
        if self.block < 1:
            raise ValueError("block must be positive")


def order_samples(samples: Sequence[CsiSample], spec: SequenceSpec) -> list[CsiSample]:
    by_domain: dict[int, list[CsiSample]] = {}
    for s in samples:
        by_domain.setdefault(s.domain, []).append(s)
    order = list(spec.domain_order) if spec.domain_order is not None else sorted(by_domain)
    unknown = [d for d in order if d not in by_domain]
    if unknown:
        raise UnknownDomain(f"domains {unknown} not present in the split")
    pools = {d: by_domain[d][: spec.repeats] if spec.repeats is not None else by_domain[d] for d in order}

    if spec.mode == "ascending":
        return [s for d in order for s in pools[d]]
    if spec.mode == "descending":
        return [s for d in reversed(order) for s in pools[d]]
    if spec.mode == "shuffled":
        flat = [s for d in order for s in pools[d]]
        perm = np.random.default_rng(spec.seed).permutation(len(flat))
        return [flat[i] for i in perm]
    out: list[CsiSample] = []
    cursor = {d: 0 for d in order}
    while any(cursor[d] < len(pools[d]) for d in order):
        for d in order:
            chunk = pools[d][cursor[d] : cursor[d] + spec.block]
            cursor[d] += len(chunk)
            out.extend(chunk)
    return out


@dataclass
class StepRecord:
    sample_id: str
    activity: int
    prediction: int
    domain: int
    latency_ms: float
    loss: float | None = None
    drift_norm: float = 0.0


@dataclass
class RunMetrics:
    records: list[StepRecord]
    window: int = 100
    accuracy: float = field(init=False)
    macro_f1: float = field(init=False)
    rolling_f1: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y, p = self.labels()
        self.accuracy = accuracy(y, p)
        self.macro_f1 = macro_f1(y, p)
        self.rolling_f1 = rolling_f1(y, p, self.window)

    def labels(self):
        return (
            np.array([r.activity for r in self.records], dtype=int),
            np.array([r.prediction for r in self.records], dtype=int),
        )

    @property
    def domains(self) -> list[int]:
        return [r.domain for r in self.records]

    @property
    def drift(self) -> np.ndarray:
        return np.array([r.drift_norm for r in self.records])

    def write_records(self, path: str | Path, with_latency: bool = True) -> None:
        """One JSON object per sample. Latency is wall-clock and varies run to run."""
        with open(path, "w") as fh:
            for r in self.records:
                row = asdict(r)
                if not with_latency:
                    row.pop("latency_ms")
                fh.write(json.dumps(row) + "\n")

    def write_series(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "domain", "rolling_f1", "drift_norm"])
            offset = self.window - 1
            for i, v in enumerate(self.rolling_f1):
                r = self.records[i + offset]
                w.writerow([i + offset, r.domain, f"{v:.6f}", f"{r.drift_norm:.6g}"])


def evaluate(
    predictor: StreamPredictor,
    samples: Sequence[CsiSample],
    sequence: SequenceSpec = SequenceSpec(),
    window: int = 100,
) -> RunMetrics:
    """Stream the split through ``predictor`` in sequence order, once per sample."""
    records = []
    for s in order_samples(samples, sequence):
        x = torch.from_numpy(s.amplitudes)
        t0 = time.perf_counter()
        out = predictor.step(x)
        dt = (time.perf_counter() - t0) * 1e3
        records.append(StepRecord(s.sample_id, s.activity, out.prediction, s.domain, dt, out.loss, out.drift_norm))
    return RunMetrics(records, window)


# -- probes -------------------------------------------------------------------------

@torch.no_grad()
def class_tokens(model: DattaModel, samples: Sequence[CsiSample], batch_size: int = 256) -> np.ndarray:
    model.eval()
    x = stack_amplitudes(samples)
    return np.concatenate([model.extractor(torch.from_numpy(x[i : i + batch_size])).numpy() for i in range(0, len(x), batch_size)])


def linear_probe_accuracy(
    model: DattaModel, fit_samples: Sequence[CsiSample], test_samples: Sequence[CsiSample], target: str = "domain"
) -> float:
    """Held-out accuracy of a logistic-regression probe fit on frozen class tokens."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
    probe.fit(class_tokens(model, fit_samples), [getattr(s, target) for s in fit_samples])
    return float(probe.score(class_tokens(model, test_samples), [getattr(s, target) for s in test_samples]))


# -- latency benchmark ----------------------------------------------------------------

@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float
    n: int

    @classmethod
    def from_samples(cls, ms: Sequence[float]) -> "LatencyStats":
        a = np.asarray(ms, dtype=np.float64)
        return cls(float(a.mean()), float(a.std()), len(a))


def bench_inference(
    model: DattaModel,
    source_stats: SourceStatistics,
    inputs: Sequence[CsiSample] | np.ndarray,
    tta_cfg: AdaptationConfig = AdaptationConfig(),
    n_iters: int = 1000,
    warmup: int = 100,
    reset_rate: float | None = None,
) -> dict[str, LatencyStats]:
    """Per-sample latency (batch 1) of the frozen model, TTA, and TTA with resetting.

    Variants are stepped round-robin on the same input sequence so that slow
    machine drift affects all of them equally; warm-up steps are not recorded.
    """
    if isinstance(inputs, np.ndarray):
        xs = [torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)) for a in inputs]
    else:
        xs = [torch.from_numpy(s.amplitudes) for s in inputs]
    if not xs:
        raise ValueError("no benchmark inputs")
    rate = reset_rate if reset_rate is not None else (tta_cfg.reset_rate or 1e-4)
    variants = {
        "frozen": FrozenPredictor(model),
        "tta": TestTimeAdaptor(model, source_stats, _with(tta_cfg, reset_rate=0.0)),
        "tta_reset": TestTimeAdaptor(model, source_stats, _with(tta_cfg, reset_rate=rate)),
    }
    times = {k: [] for k in variants}
    with torch.inference_mode(False):
        for i in range(warmup + n_iters):
            x = xs[i % len(xs)]
            for name, pred in variants.items():
                t0 = time.perf_counter()
                pred.step(x)
                dt = (time.perf_counter() - t0) * 1e3
                if i >= warmup:
                    times[name].append(dt)
    return {k: LatencyStats.from_samples(v) for k, v in times.items()}


def _with(cfg, **changes):
    from dataclasses import replace

    return replace(cfg, **changes)
