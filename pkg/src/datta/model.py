"""Feature extractor, activity/domain heads and the gradient reversal layer."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .data import N_SUBCARRIERS, N_TIMESTEPS


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    n_encoder_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int = 64
    n_activities: int = 6
    n_domains: int = 7
    stem_kernel: int = 8
    stem_stride: int = 4
    dropout: float = 0.1
    target_param_count: int = 40_800

    def __post_init__(self):
        if self.n_encoder_layers != 4:
            raise ValueError("the encoder has exactly 4 layers")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    @property
    def n_tokens(self) -> int:
        return (N_TIMESTEPS - self.stem_kernel) // self.stem_stride + 1

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lambd * grad, None


def grl(x: torch.Tensor, lambd: float) -> torch.Tensor:
    """Identity on the forward pass; multiplies incoming gradients by ``-lambd``."""
    if lambd < 0:
        raise ValueError("lambda must be non-negative")
    return _GradReverse.apply(x, float(lambd))


class GradientReversal(nn.Module):
    def forward(self, x, lambd: float):
        return grl(x, lambd)


class GaussianPositionalEncoding(nn.Module):
    """One Gaussian bump over token positions per embedding channel.

    Centers start evenly spread over the sequence; centers and widths are learned.
    """

    def __init__(self, n_tokens: int, dim: int):
        super().__init__()
        self.register_buffer("positions", torch.arange(n_tokens, dtype=torch.float32), persistent=False)
        self.centers = nn.Parameter(torch.linspace(0, n_tokens - 1, dim))
        self.log_widths = nn.Parameter(torch.full((dim,), float(torch.tensor(n_tokens / 8).log())))

    def forward(self, x):
        z = (self.positions[:, None] - self.centers[None, :]) / self.log_widths.exp()[None, :]
        return x + torch.exp(-0.5 * z**2)


class FeatureExtractor(nn.Module):
    """Conv stem over time, Gaussian positional encoding, class token, 4 encoder layers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv1d(N_SUBCARRIERS, cfg.embed_dim, cfg.stem_kernel, stride=cfg.stem_stride)
        self.pos = GaussianPositionalEncoding(cfg.n_tokens, cfg.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        nn.init.normal_(self.cls_token, std=0.02)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                cfg.embed_dim, cfg.n_heads, cfg.mlp_hidden, dropout=cfg.dropout, batch_first=True
            )
            for _ in range(cfg.n_encoder_layers)
        )

    def forward_features(self, x: torch.Tensor, upto: int | None = None):
        """Return ``(class_token, [phi_1, ..., phi_upto])``.

        Each ``phi_l`` has shape (batch, n_tokens + 1, embed_dim) with the class
        token in row 0. ``class_token`` is None when ``upto`` stops early.
        """
        if x.dim() != 3 or x.shape[1:] != (N_SUBCARRIERS, N_TIMESTEPS):
            raise ShapeError(f"expected (batch, {N_SUBCARRIERS}, {N_TIMESTEPS}), got {tuple(x.shape)}")
        upto = len(self.layers) if upto is None else upto
        h = F.gelu(self.stem(x)).transpose(1, 2)
        h = self.pos(h)
        h = torch.cat([self.cls_token.expand(h.shape[0], -1, -1), h], dim=1)
        maps = []
        for layer in self.layers[:upto]:
            h = layer(h)
            maps.append(h)
        c = h[:, 0] if upto == len(self.layers) else None
        return c, maps

    def forward(self, x):
        return self.forward_features(x)[0]


def _head(dim: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, out))


@dataclass
class HeadOutputs:
    activity_logits: torch.Tensor
    domain_logits: torch.Tensor | None = None

    @property
    def activity_probs(self) -> torch.Tensor:
        return self.activity_logits.softmax(-1)

    @property
    def domain_probs(self) -> torch.Tensor | None:
        return None if self.domain_logits is None else self.domain_logits.softmax(-1)


class DattaModel(nn.Module):
    """Feature extractor with an activity recognizer and a domain discriminator.

    The discriminator sees the class token only, behind a gradient reversal
    layer; it is unused at inference.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.extractor = FeatureExtractor(cfg)
        self.activity_head = _head(cfg.embed_dim, cfg.embed_dim, cfg.n_activities)
        self.domain_head = _head(cfg.embed_dim, cfg.embed_dim, cfg.n_domains)
        self.grl = GradientReversal()

    def forward(self, x, lambd: float = 0.0, with_domain: bool = False) -> HeadOutputs:
        c, _ = self.extractor.forward_features(x)
        out = HeadOutputs(self.activity_head(c))
        if with_domain:
            out.domain_logits = self.domain_head(self.grl(c, lambd))
        return out

    @torch.no_grad()
    def predict(self, x) -> torch.Tensor:
        return self.activity_head(self.extractor(x)).argmax(-1)


def count_parameters(model: DattaModel, include_domain_head: bool = False) -> int:
    n = sum(p.numel() for p in model.extractor.parameters()) + sum(p.numel() for p in model.activity_head.parameters())
    if include_domain_head:
        n += sum(p.numel() for p in model.domain_head.parameters())
    return n


# -- checkpoints --------------------------------------------------------------

_META_KEY = "datta"


def save_tensors(tensors: dict[str, torch.Tensor], path: str | Path, metadata: dict[str, str]) -> None:
    """Named float32 tensors in a safetensors archive (little-endian, JSON manifest header).

    The metadata is packed into one sorted JSON entry: safetensors writes its
    metadata map in hash order, so several entries would make the file bytes
    vary from process to process.
    """
    tensors = {k: v.detach().to(torch.float32).contiguous() for k, v in tensors.items()}
    save_file(tensors, str(path), metadata={_META_KEY: json.dumps(metadata, sort_keys=True)})


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    if _META_KEY in meta:
        meta = json.loads(meta[_META_KEY])
    return load_file(str(path)), meta


def save_checkpoint(model: DattaModel, directory: str | Path, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    cfg = asdict(model.cfg)
    save_tensors(state, directory / "model.safetensors", {"config": json.dumps(cfg), "config_hash": model.cfg.digest()})
    manifest = {
        "config": cfg,
        "config_hash": model.cfg.digest(),
        "dtype": "float32",
        "byteorder": "little",
        "parameters": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory: str | Path) -> DattaModel:
    directory = Path(directory)
    tensors, meta = load_tensors(directory / "model.safetensors")
    cfg = ModelConfig(**json.loads(meta["config"]))
    if cfg.digest() != meta.get("config_hash"):
        raise ValueError("checkpoint config hash mismatch")
    model = DattaModel(cfg)
    model.load_state_dict(tensors)
    model.eval()
    return model
