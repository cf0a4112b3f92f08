"""Random CSI augmentations applied to training spectrograms.

All functions act on the real (unpadded) block ``s[:, :valid_length]`` only and
leave the zero padding untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import CsiSample, stable_hash


@dataclass(frozen=True)
class AugmentConfig:
    amplitude_jitter_sigma: float = 0.05
    max_rotation_fraction: float = 1.0
    pixel_dropout_rate: float = 0.1
    row_dropout_rate: float = 0.05
    apply_probability: float = 0.5
    rng_seed: int = 0
    enabled: bool = True

    def __post_init__(self):
        if self.amplitude_jitter_sigma < 0:
            raise ValueError("amplitude_jitter_sigma must be non-negative")
        for name in ("max_rotation_fraction", "pixel_dropout_rate", "row_dropout_rate", "apply_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def amplitude_perturb(s: np.ndarray, sigma: float, valid_length: int, rng: np.random.Generator) -> np.ndarray:
    out = s.copy()
    if sigma == 0:
        return out
    real = out[:, :valid_length]
    real += rng.normal(0.0, sigma, size=real.shape).astype(out.dtype)
    np.clip(real, 0.0, 1.0, out=real)
    return out


def circular_rotate(s: np.ndarray, shift: int, valid_length: int) -> np.ndarray:
    out = s.copy()
    if valid_length > 0:
        out[:, :valid_length] = np.roll(s[:, :valid_length], shift % valid_length, axis=1)
    return out


def dropout_mean_replace(
    s: np.ndarray, pixel_rate: float, row_rate: float, valid_length: int, rng: np.random.Generator
) -> np.ndarray:
    out = s.copy()
    if valid_length == 0 or (pixel_rate == 0 and row_rate == 0):
        return out
    real = out[:, :valid_length]
    mean = real.mean(dtype=np.float64)
    mask = rng.random(real.shape) < pixel_rate
    mask |= (rng.random(real.shape[0]) < row_rate)[:, None]
    real[mask] = mean
    return out


def augment_array(s: np.ndarray, valid_length: int, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotate, then jitter, then drop out; each step fires with ``cfg.apply_probability``."""
    out = s
    # draws happen unconditionally so that the stream of random numbers does not
    # depend on which augmentations fired
    fire = rng.random(3) < cfg.apply_probability
    max_shift = int(round(cfg.max_rotation_fraction * valid_length))
    shift = int(rng.integers(0, max_shift + 1))
    if fire[0] and shift:
        out = circular_rotate(out, shift, valid_length)
    if fire[1]:
        out = amplitude_perturb(out, cfg.amplitude_jitter_sigma, valid_length, rng)
    if fire[2]:
        out = dropout_mean_replace(out, cfg.pixel_dropout_rate, cfg.row_dropout_rate, valid_length, rng)
    return out.copy() if out is s else out


def augment(sample: CsiSample, cfg: AugmentConfig, salt: int = 0) -> CsiSample:
    """Augmented copy of ``sample``; deterministic given (seed, sample_id, salt).

    The training loop passes the epoch index as ``salt`` so that each epoch sees
    fresh draws.
    """
    if not cfg.enabled:
        return sample
    rng = np.random.default_rng([cfg.rng_seed, stable_hash(sample.sample_id), salt])
    return replace(sample, amplitudes=augment_array(sample.amplitudes, sample.valid_length, cfg, rng))
