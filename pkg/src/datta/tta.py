"""Online test-time adaptation by feature-statistic alignment with random weight resetting."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .model import DattaModel
from .train import SourceStatistics

log = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AdaptationConfig:
    layer_ids: tuple[int, ...] = (1,)
    ema_alpha: float = 0.1
    tta_learning_rate: float = 1e-6
    reset_rate: float = 1e-4
    steps_per_sample: int = 1
    include_stem: bool = True
    norm: str = "l2"  # "l1" reproduces the video-TTA variant
    optimizer: str = "sgd"
    rng_seed: int = 0

    def __post_init__(self):
        if not self.layer_ids or not set(self.layer_ids) <= {1, 2, 3, 4}:
            raise ValueError("layer_ids must be a non-empty subset of {1, 2, 3, 4}")
        if not 0 < self.ema_alpha <= 1:
            raise ValueError("ema_alpha must lie in (0, 1]")
        if not 0 <= self.reset_rate <= 1:
            raise ValueError("reset_rate must lie in [0, 1]")
        if self.steps_per_sample < 1:
            raise ValueError("steps_per_sample must be positive")
        if self.norm not in ("l1", "l2"):
            raise ValueError("norm must be 'l1' or 'l2'")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


@dataclass
class AdaptationState:
    ema_mean: dict[int, torch.Tensor]
    ema_var: dict[int, torch.Tensor]
    source_params: dict[str, torch.Tensor]
    step: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)

    @classmethod
    def initial(cls, stats: SourceStatistics, source_params: dict[str, torch.Tensor], seed: int = 0):
        gen = torch.Generator()
        gen.manual_seed(seed)
        return cls(
            {l: m.clone() for l, m in stats.mean.items()},
            {l: v.clone() for l, v in stats.var.items()},
            {k: v.detach().clone() for k, v in source_params.items()},
            0,
            gen,
        )


def sample_statistics(feature_map: torch.Tensor, include_class_token: bool = True):
    """Mean and population variance over tokens of a single (tokens, channels) map."""
    rows = feature_map if include_class_token else feature_map[1:]
    mean = rows.mean(0)
    var = ((rows - mean) ** 2).mean(0)
    return mean, var


def ema_update(state: AdaptationState, sample_stats: dict[int, tuple[torch.Tensor, torch.Tensor]], ema_alpha: float):
    """Blend this sample's statistics into the running estimates; increments the step."""
    for l, (m, v) in sample_stats.items():
        state.ema_mean[l] = ema_alpha * m.detach() + (1 - ema_alpha) * state.ema_mean[l]
        state.ema_var[l] = ema_alpha * v.detach() + (1 - ema_alpha) * state.ema_var[l]
    state.step += 1
    return state


def alignment_loss(
    est_mean: dict[int, torch.Tensor],
    est_var: dict[int, torch.Tensor],
    source: SourceStatistics,
    norm: str = "l2",
) -> torch.Tensor:
    """Sum over layers of ||mean - source mean|| + ||var - source var||."""
    order = 2 if norm == "l2" else 1
    total = 0.0
    for l in est_mean:
        total = total + torch.linalg.vector_norm(est_mean[l] - source.mean[l], ord=order)
        total = total + torch.linalg.vector_norm(est_var[l] - source.var[l], ord=order)
    return torch.as_tensor(total)


@torch.no_grad()
def weight_reset(
    params: dict[str, torch.Tensor], source: dict[str, torch.Tensor], p_reset: float, generator: torch.Generator
) -> int:
    """Restore each scalar weight to its source value with probability ``p_reset``.

    Operates in place; returns how many scalars were selected.
    """
    count = 0
    for name, p in params.items():
        src = source[name]
        if src.shape != p.shape:
            raise ShapeMismatch(f"{name}: {tuple(src.shape)} vs {tuple(p.shape)}")
        if p_reset <= 0:
            continue
        mask = torch.rand(p.shape, generator=generator) < p_reset
        p.copy_(torch.where(mask, src, p))
        count += int(mask.sum())
    return count


def adapt_scope(model: DattaModel, layer_ids: Sequence[int], include_stem: bool = True) -> dict[str, torch.nn.Parameter]:
    """Parameters up to and including the highest adapted encoder layer."""
    ext = model.extractor
    scope = {}
    if include_stem:
        for prefix, module in (("stem", ext.stem), ("pos", ext.pos)):
            scope.update({f"extractor.{prefix}.{k}": p for k, p in module.named_parameters()})
        scope["extractor.cls_token"] = ext.cls_token
    for i in range(max(layer_ids)):
        scope.update({f"extractor.layers.{i}.{k}": p for k, p in ext.layers[i].named_parameters()})
    return scope


@dataclass
class StepOutput:
    prediction: int
    loss: float | None = None
    drift_norm: float = 0.0
    reset_count: int = 0
    skipped: bool = False


class FrozenPredictor:
    """Source model without adaptation; shares the ``step`` interface of the adaptor."""

    def __init__(self, model: DattaModel):
        self.model = model
        self.model.eval()

    def step(self, x: torch.Tensor) -> StepOutput:
        return StepOutput(int(self.model.predict(x.reshape(1, *x.shape[-2:]))[0]))


class TestTimeAdaptor:
    """Label-free online adaptation of one stream, one sample at a time.

    Per sample: compute the selected layers' statistics, fold them into the
    EMA estimates, take gradient steps on the alignment loss over the adapted
    scope, randomly reset weights toward the source model, then predict.
    """

    __test__ = False

    def __init__(self, model: DattaModel, source_stats: SourceStatistics, cfg: AdaptationConfig, copy_model: bool = True):
        missing = set(cfg.layer_ids) - set(source_stats.layer_ids)
        if missing:
            raise ValueError(f"source statistics lack layers {sorted(missing)}")
        self.model = copy.deepcopy(model) if copy_model else model
        self.model.eval()
        self.cfg = cfg
        self.source_stats = source_stats
        self.top = max(cfg.layer_ids)
        self.scope = adapt_scope(self.model, cfg.layer_ids, cfg.include_stem)
        scoped = {id(p) for p in self.scope.values()}
        for p in self.model.parameters():
            p.requires_grad_(id(p) in scoped)
        params = list(self.scope.values())
        if cfg.optimizer == "sgd":
            self.optimizer = torch.optim.SGD(params, lr=cfg.tta_learning_rate)
        else:
            self.optimizer = torch.optim.Adam(params, lr=cfg.tta_learning_rate)
        self.state = AdaptationState.initial(source_stats, {k: p.data for k, p in self.scope.items()}, cfg.rng_seed)

    def _stats(self, x):
        _, maps = self.model.extractor.forward_features(x, upto=self.top)
        inc = self.source_stats.include_class_token
        return {l: sample_statistics(maps[l - 1][0], inc) for l in self.cfg.layer_ids}

    def drift_norm(self) -> float:
        with torch.no_grad():
            sq = sum(float(((p - self.state.source_params[k]) ** 2).sum()) for k, p in self.scope.items())
        return sq**0.5

    def step(self, x: torch.Tensor) -> StepOutput:
        x = x.reshape(1, *x.shape[-2:])
        a = self.cfg.ema_alpha
        history_mean = dict(self.state.ema_mean)
        history_var = dict(self.state.ema_var)
        loss_value, skipped = None, False
        for k in range(self.cfg.steps_per_sample):
            stats = self._stats(x)
            if k == 0:
                ema_update(self.state, stats, a)
            est_mean = {l: a * m + (1 - a) * history_mean[l] for l, (m, _) in stats.items()}
            est_var = {l: a * v + (1 - a) * history_var[l] for l, (_, v) in stats.items()}
            loss = alignment_loss(est_mean, est_var, self.source_stats, self.cfg.norm)
            if not torch.isfinite(loss):
                log.warning("non-finite alignment loss at sample %d; update skipped", self.state.step)
                skipped = True
                break
            if k == 0:
                loss_value = float(loss.detach())
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
        resets = weight_reset(self.scope, self.state.source_params, self.cfg.reset_rate, self.state.generator)
        pred = int(self.model.predict(x)[0])
        return StepOutput(pred, loss_value, self.drift_norm(), resets, skipped)
