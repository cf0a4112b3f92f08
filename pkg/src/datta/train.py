"""Domain-adversarial training and source feature statistics."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, augment
from .data import CsiSample, stack_amplitudes
from .metrics import macro_f1
from .model import DattaModel, ModelConfig, load_tensors, save_tensors

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class DatConfig:
    alpha: float = 0.3
    beta: float = 0.2
    gamma: float = 8.0
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    discriminator_lr_scale: float = 1.0
    prob_clamp_eps: float = 1e-7
    rng_seed: int = 0
    stats_layers: tuple[int, ...] = (1, 2, 3, 4)
    include_class_token: bool = True

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta and gamma must be non-negative")
        if not 0 < self.prob_clamp_eps < 0.5:
            raise ValueError("prob_clamp_eps must lie in (0, 0.5)")


# -- losses -------------------------------------------------------------------

def activity_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Cross-entropy of one-hot ``target`` under clamped ``probs``; one value per row."""
    return -(target * probs.clamp(eps, 1 - eps).log()).sum(-1)


domain_loss = activity_loss


def ccc_loss(probs: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Confidence control: penalizes every class probability that nears 0 or 1."""
    p = probs.clamp(eps, 1 - eps)
    return -(p.log() + (1 - p).log()).sum(-1)


def lambda_schedule(p: float, gamma: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    return (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0) * gamma


def total_loss(l_a, l_d, l_c, alpha: float, beta: float):
    return l_a + alpha * l_d + beta * l_c


# -- source statistics ----------------------------------------------------------

@dataclass
class SourceStatistics:
    mean: dict[int, torch.Tensor]
    var: dict[int, torch.Tensor]
    include_class_token: bool = True

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.mean))

    def save(self, path: str | Path) -> None:
        tensors = {f"mean.{l}": m for l, m in self.mean.items()} | {f"var.{l}": v for l, v in self.var.items()}
        save_tensors(tensors, path, {"kind": "source_statistics", "include_class_token": json.dumps(self.include_class_token)})

    @classmethod
    def load(cls, path: str | Path) -> "SourceStatistics":
        tensors, meta = load_tensors(path)
        mean = {int(k.split(".")[1]): v for k, v in tensors.items() if k.startswith("mean.")}
        var = {int(k.split(".")[1]): v for k, v in tensors.items() if k.startswith("var.")}
        return cls(mean, var, json.loads(meta.get("include_class_token", "true")))


def _batches(x: np.ndarray, size: int):
    for i in range(0, len(x), size):
        yield torch.from_numpy(x[i : i + size])


@torch.no_grad()
def compute_source_statistics(
    model: DattaModel,
    samples: Sequence[CsiSample],
    layer_ids: Sequence[int] = (1, 2, 3, 4),
    include_class_token: bool = True,
    batch_size: int = 256,
) -> SourceStatistics:
    """Per-channel mean and population variance of each selected layer's feature map,
    pooled over all samples and tokens (two passes; the second uses the pooled mean)."""
    if len(samples) == 0:
        raise EmptyDataset("cannot compute statistics of an empty dataset")
    was_training = model.training
    model.eval()
    x = stack_amplitudes(samples)
    top = max(layer_ids)
    start = 0 if include_class_token else 1

    def rows(batch):
        _, maps = model.extractor.forward_features(batch, upto=top)
        return {l: maps[l - 1][:, start:].reshape(-1, maps[l - 1].shape[-1]).double() for l in layer_ids}

    sums, count = {l: 0.0 for l in layer_ids}, 0
    for batch in _batches(x, batch_size):
        r = rows(batch)
        for l in layer_ids:
            sums[l] = sums[l] + r[l].sum(0)
        count += r[layer_ids[0]].shape[0]
    mean = {l: sums[l] / count for l in layer_ids}
    sq = {l: 0.0 for l in layer_ids}
    for batch in _batches(x, batch_size):
        r = rows(batch)
        for l in layer_ids:
            sq[l] = sq[l] + ((r[l] - mean[l]) ** 2).sum(0)
    model.train(was_training)
    return SourceStatistics(
        {l: mean[l].float() for l in layer_ids},
        {l: (sq[l] / count).float() for l in layer_ids},
        include_class_token,
    )


# -- training loop --------------------------------------------------------------

@dataclass
class TrainResult:
    model: DattaModel
    source_stats: SourceStatistics
    log: list[dict] = field(default_factory=list)
    domain_index: dict[int, int] = field(default_factory=dict)
    best_val_f1: float | None = None


@torch.no_grad()
def predict_samples(model: DattaModel, samples: Sequence[CsiSample], batch_size: int = 256) -> np.ndarray:
    model.eval()
    x = stack_amplitudes(samples)
    preds = [model.predict(b).numpy() for b in _batches(x, batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def train_dat(
    train_samples: Sequence[CsiSample],
    val_samples: Sequence[CsiSample],
    model_cfg: ModelConfig,
    dat_cfg: DatConfig,
    augment_cfg: AugmentConfig | None = None,
    model: DattaModel | None = None,
) -> TrainResult:
    """Train with L = L_a + alpha*L_d + beta*L_c, lambda ramped by global progress.

    The returned model is the epoch with the best validation macro-F1 (the last
    epoch when ``val_samples`` is empty). Domain labels are densely re-indexed.
    """
    train_samples = list(train_samples)
    if not train_samples:
        raise EmptyDataset("training split is empty")
    torch.manual_seed(dat_cfg.rng_seed)
    rng = np.random.default_rng(dat_cfg.rng_seed)
    domains = sorted({s.domain for s in train_samples})
    domain_index = {d: i for i, d in enumerate(domains)}
    if len(domains) > model_cfg.n_domains:
        raise ValueError(f"{len(domains)} training domains but n_domains={model_cfg.n_domains}")
    model = model if model is not None else DattaModel(model_cfg)
    disc = {id(p) for p in model.domain_head.parameters()}
    opt = torch.optim.Adam(
        [
            {"params": [p for p in model.parameters() if id(p) not in disc]},
            {"params": list(model.domain_head.parameters()), "lr": dat_cfg.learning_rate * dat_cfg.discriminator_lr_scale},
        ],
        lr=dat_cfg.learning_rate,
    )
    eps = dat_cfg.prob_clamp_eps
    y_act = torch.tensor([s.activity for s in train_samples])
    y_dom = torch.tensor([domain_index[s.domain] for s in train_samples])
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / dat_cfg.batch_size)
    total_steps = steps_per_epoch * dat_cfg.epochs
    use_domain = dat_cfg.alpha > 0

    history: list[dict] = []
    best_f1, best_state = -1.0, None
    step = 0
    for epoch in range(dat_cfg.epochs):
        model.train()
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * dat_cfg.batch_size : (b + 1) * dat_cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            if augment_cfg is not None:
                batch = [augment(s, augment_cfg, salt=epoch) for s in batch]
            x = torch.from_numpy(stack_amplitudes(batch))
            lambd = lambda_schedule(step / total_steps, dat_cfg.gamma)
            out = model(x, lambd=lambd, with_domain=use_domain)
            a_probs = out.activity_probs
            l_a = activity_loss(a_probs, F.one_hot(y_act[idx], model_cfg.n_activities).float(), eps).mean()
            l_c = ccc_loss(a_probs, eps).mean()
            if use_domain:
                l_d = domain_loss(out.domain_probs, F.one_hot(y_dom[idx], model_cfg.n_domains).float(), eps).mean()
            else:
                l_d = torch.zeros(())
            loss = total_loss(l_a, l_d, l_c, dat_cfg.alpha, dat_cfg.beta)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "loss": loss.item(),
                    "L_a": l_a.item(),
                    "L_d": l_d.item(),
                    "L_c": l_c.item(),
                    "lambda": lambd,
                    "val_f1": None,
                }
            )
            step += 1
        if val_samples:
            f1 = macro_f1([s.activity for s in val_samples], predict_samples(model, val_samples))
            history[-1]["val_f1"] = f1
            log.info("epoch %d loss %.4f val-F1 %.4f", epoch, history[-1]["loss"], f1)
            if f1 >= best_f1:  # ties go to the later, longer-trained epoch
                best_f1, best_state = f1, copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    stats = compute_source_statistics(model, train_samples, dat_cfg.stats_layers, dat_cfg.include_class_token)
    return TrainResult(model, stats, history, domain_index, best_f1 if val_samples else None)
