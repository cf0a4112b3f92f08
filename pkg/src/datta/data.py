"""CSI amplitude spectrograms: preprocessing, splits, synthetic domains and file I/O."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

N_SUBCARRIERS = 30
N_TIMESTEPS = 220
MIN_LENGTH = 120
MAX_LENGTH = 220
TARGET_RATE_HZ = 100

SPLIT_NAMES = ("Train", "Val", "Val_TTA", "Test")
SOURCE_GROUP = frozenset({"Train", "Val"})
TARGET_GROUP = frozenset({"Val_TTA", "Test"})
DEFAULT_SPLIT_FRACTIONS = {"Train": 0.8, "Val": 0.2, "Val_TTA": 0.1, "Test": 0.9}

MAGIC = b"CSID"
FORMAT_VERSION = 1


class PreprocessRejection(ValueError):
    """A raw stream that cannot become a sample."""


class RejectTooShort(PreprocessRejection):
    pass


class RejectTooLong(PreprocessRejection):
    pass


class DegenerateRange(PreprocessRejection):
    """All real amplitudes are equal. ``sample`` holds the all-zero result."""

    def __init__(self, message: str, sample: "CsiSample"):
        super().__init__(message)
        self.sample = sample


class DomainOverlap(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class CsiSample:
    amplitudes: np.ndarray  # (F, T) float32
    activity: int
    domain: int
    valid_length: int
    sample_id: str

    def __eq__(self, other):
        if not isinstance(other, CsiSample):
            return NotImplemented
        return (
            self.activity == other.activity
            and self.domain == other.domain
            and self.valid_length == other.valid_length
            and self.sample_id == other.sample_id
            and self.amplitudes.shape == other.amplitudes.shape
            and np.array_equal(self.amplitudes, other.amplitudes)
        )


@dataclass
class DatasetSplit:
    name: str
    samples: list[CsiSample] = field(default_factory=list)

    @property
    def domain_set(self) -> set[int]:
        return {s.domain for s in self.samples}

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


@dataclass
class SyntheticDomainSpec:
    domain_id: int
    amplitude_offset: float = 0.0
    amplitude_scale: float = 1.0
    subcarrier_response: np.ndarray | None = None  # (F,), defaults to unit gain
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.amplitude_scale <= 0:
            raise ValueError("amplitude_scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.subcarrier_response is None:
            self.subcarrier_response = np.ones(N_SUBCARRIERS)
        self.subcarrier_response = np.asarray(self.subcarrier_response, dtype=np.float64)
        if self.subcarrier_response.shape != (N_SUBCARRIERS,):
            raise ValueError(f"subcarrier_response must have {N_SUBCARRIERS} entries")
        if np.any(self.subcarrier_response <= 0):
            raise ValueError("subcarrier_response entries must be positive")


def normalize_spectrogram(real: np.ndarray) -> tuple[np.ndarray, bool]:
    """Min-max scale the real (unpadded) block to [0, 1] and pad it to ``N_TIMESTEPS``.

    Returns the padded float32 matrix and whether the block was degenerate.
    """
    real = np.asarray(real, dtype=np.float64)
    lo, hi = real.min(), real.max()
    out = np.zeros((real.shape[0], N_TIMESTEPS), dtype=np.float32)
    if hi == lo:
        return out, True
    out[:, : real.shape[1]] = (real - lo) / (hi - lo)
    return out, False


def preprocess_stream(
    raw: Sequence[Sequence[float]] | np.ndarray,
    rate_hz: int,
    *,
    activity: int = 0,
    domain: int = 0,
    sample_id: str = "",
) -> CsiSample:
    """Turn a packet stream of shape (n_packets, F) into a padded, normalized sample.

    The stream is sub-sampled to 100 Hz with stride ``rate_hz // 100`` starting at
    packet 0, range-checked, min-max normalized and zero-padded on the right.
    """
    if rate_hz < TARGET_RATE_HZ:
        raise ValueError(f"rate_hz must be >= {TARGET_RATE_HZ}, got {rate_hz}")
    packets = np.asarray(raw, dtype=np.float64)
    if packets.ndim != 2 or packets.shape[1] != N_SUBCARRIERS:
        raise ValueError(f"expected packets of {N_SUBCARRIERS} amplitudes, got shape {packets.shape}")
    stride = rate_hz // TARGET_RATE_HZ
    packets = packets[::stride]
    n = packets.shape[0]
    if n < MIN_LENGTH:
        raise RejectTooShort(f"{n} time steps after sub-sampling (< {MIN_LENGTH})")
    if n > MAX_LENGTH:
        raise RejectTooLong(f"{n} time steps after sub-sampling (> {MAX_LENGTH})")
    amps, degenerate = normalize_spectrogram(packets.T)
    sample = CsiSample(amps, int(activity), int(domain), n, sample_id)
    if degenerate:
        raise DegenerateRange("all amplitudes are equal", sample)
    return sample


def build_splits(
    samples: Iterable[CsiSample],
    domain_assignment: Mapping[int, str | Sequence[str]],
    fractions: Mapping[str, float] | None = None,
    seed: int = 0,
) -> dict[str, DatasetSplit]:
    """Partition samples into Train/Val/Val_TTA/Test by domain.

    A domain maps to one split name or to several names from the same group
    (e.g. ``("Train", "Val")``); in the latter case its samples are divided by
    ``fractions`` after a seeded per-domain permutation.
    """
    fractions = dict(DEFAULT_SPLIT_FRACTIONS if fractions is None else fractions)
    targets: dict[int, tuple[str, ...]] = {}
    for dom, names in domain_assignment.items():
        names = (names,) if isinstance(names, str) else tuple(names)
        unknown = set(names) - set(SPLIT_NAMES)
        if unknown or not names:
            raise ValueError(f"domain {dom}: invalid split names {names}")
        if set(names) & SOURCE_GROUP and set(names) & TARGET_GROUP:
            raise DomainOverlap(f"domain {dom} assigned to both source and target splits: {names}")
        targets[int(dom)] = names

    by_domain: dict[int, list[CsiSample]] = {}
    for s in samples:
        if s.domain not in targets:
            raise ValueError(f"domain {s.domain} missing from assignment")
        by_domain.setdefault(s.domain, []).append(s)

    splits = {name: DatasetSplit(name) for name in SPLIT_NAMES}
    for dom in sorted(by_domain):
        members = by_domain[dom]
        names = targets[dom]
        if len(names) == 1:
            splits[names[0]].samples.extend(members)
            continue
        rng = np.random.default_rng([seed, dom])
        order = rng.permutation(len(members))
        weights = np.array([fractions[n] for n in names], dtype=np.float64)
        bounds = np.round(np.cumsum(weights / weights.sum()) * len(members)).astype(int)
        start = 0
        for name, stop in zip(names, bounds):
            splits[name].samples.extend(members[i] for i in sorted(order[start:stop]))
            start = stop
    return splits


class ActivityTemplates:
    """Deterministic clean spectrograms, one per activity.

    Each activity is a fixed set of Gaussian blobs over (subcarrier, time) on a
    flat baseline, plus a sinusoidal modulation with an activity-specific
    temporal frequency. Calling the instance is a pure function of the label.
    """

    def __init__(self, n_activities: int = 6, length: int = 180, n_blobs: int = 4, seed: int = 0):
        if not MIN_LENGTH <= length <= MAX_LENGTH:
            raise ValueError(f"template length must lie in [{MIN_LENGTH}, {MAX_LENGTH}]")
        self.n_activities = n_activities
        self.length = length
        rng = np.random.default_rng(seed)
        sub = np.arange(N_SUBCARRIERS)[:, None]
        t = np.arange(length)[None, :]
        self._templates = []
        for k in range(n_activities):
            img = np.full((N_SUBCARRIERS, length), 1.0)
            for _ in range(n_blobs):
                cf, ct = rng.uniform(0, N_SUBCARRIERS), rng.uniform(0, length)
                wf, wt = rng.uniform(3, 8), rng.uniform(10, 30)
                amp = rng.uniform(0.5, 1.5)
                img += amp * np.exp(-0.5 * (((sub - cf) / wf) ** 2 + ((t - ct) / wt) ** 2))
            freq = 1.0 + 1.5 * k
            img += 0.3 * np.sin(2 * np.pi * freq * t / length + 0.2 * sub)
            self._templates.append(img)

    def __call__(self, activity: int) -> np.ndarray:
        return self._templates[activity].copy()


def synthesize_domain(
    spec: SyntheticDomainSpec,
    n: int,
    activity_generator: Callable[[int], np.ndarray],
    n_activities: int,
    name: str = "synthetic",
) -> DatasetSplit:
    """Draw ``n`` samples of one synthetic domain.

    Activities cycle 0..n_activities-1. Each clean template (F, L) is multiplied
    by the per-subcarrier gain, scaled, offset, perturbed with Gaussian noise and
    then preprocessed as a 100 Hz stream.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(spec.rng_seed)
    gain = spec.subcarrier_response[:, None]
    out = DatasetSplit(name)
    for i in range(n):
        activity = i % n_activities
        clean = np.asarray(activity_generator(activity), dtype=np.float64)
        raw = clean * gain * spec.amplitude_scale + spec.amplitude_offset
        if spec.noise_sigma > 0:
            raw = raw + rng.normal(0.0, spec.noise_sigma, size=raw.shape)
        sid = f"d{spec.domain_id}-{i:06d}"
        try:
            sample = preprocess_stream(raw.T, TARGET_RATE_HZ, activity=activity, domain=spec.domain_id, sample_id=sid)
        except DegenerateRange as exc:
            sample = exc.sample
        out.samples.append(sample)
    return out


def stack_amplitudes(samples: Sequence[CsiSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, N_SUBCARRIERS, N_TIMESTEPS), dtype=np.float32)
    return np.stack([s.amplitudes for s in samples]).astype(np.float32, copy=False)


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


# -- interchange format -----------------------------------------------------

_HEADER = struct.Struct("<4sHIHH")
_RECORD = struct.Struct("<BHH")
_LEN = struct.Struct("<H")


def write_dataset(samples: Iterable[CsiSample], path: str | Path) -> None:
    samples = list(samples)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(samples), N_SUBCARRIERS, N_TIMESTEPS))
        for s in samples:
            if s.amplitudes.shape != (N_SUBCARRIERS, N_TIMESTEPS):
                raise FormatError(f"sample {s.sample_id!r} has shape {s.amplitudes.shape}")
            sid = s.sample_id.encode("utf-8")
            fh.write(_RECORD.pack(s.activity, s.domain, s.valid_length))
            fh.write(_LEN.pack(len(sid)))
            fh.write(sid)
            fh.write(np.ascontiguousarray(s.amplitudes, dtype="<f4").tobytes())


def read_dataset(path: str | Path) -> list[CsiSample]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError("file shorter than header")
    magic, version, count, f, t = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if (f, t) != (N_SUBCARRIERS, N_TIMESTEPS):
        raise FormatError(f"dimension mismatch: F={f}, T={t}")
    pos = _HEADER.size
    block = f * t * 4
    samples = []
    for _ in range(count):
        if pos + _RECORD.size + _LEN.size > len(buf):
            raise FormatError("truncated record header")
        activity, domain, valid_length = _RECORD.unpack_from(buf, pos)
        pos += _RECORD.size
        (n,) = _LEN.unpack_from(buf, pos)
        pos += _LEN.size
        if pos + n + block > len(buf):
            raise FormatError("truncated record body")
        sid = buf[pos : pos + n].decode("utf-8")
        pos += n
        amps = np.frombuffer(buf, dtype="<f4", count=f * t, offset=pos).reshape(f, t).astype(np.float32)
        pos += block
        samples.append(CsiSample(amps, activity, domain, valid_length, sid))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes")
    return samples
