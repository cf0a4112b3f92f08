import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datta.data import (
    ActivityTemplates,
    DegenerateRange,
    DomainOverlap,
    FormatError,
    N_SUBCARRIERS,
    N_TIMESTEPS,
    RejectTooLong,
    RejectTooShort,
    SOURCE_GROUP,
    SPLIT_NAMES,
    SyntheticDomainSpec,
    TARGET_GROUP,
    build_splits,
    normalize_spectrogram,
    preprocess_stream,
    read_dataset,
    synthesize_domain,
    write_dataset,
)

from conftest import random_sample


# -- preprocess_stream ------------------------------------------------------------

def test_150_packets_at_100hz(rng):
    raw = rng.uniform(0, 5, size=(150, N_SUBCARRIERS))
    s = preprocess_stream(raw, 100)
    assert s.valid_length == 150
    assert s.amplitudes.shape == (N_SUBCARRIERS, N_TIMESTEPS)
    assert s.amplitudes[:, :150].max() == 1.0
    assert s.amplitudes[:, :150].min() == 0.0
    assert np.all(s.amplitudes[:, 150:] == 0)


def test_119_packets_rejected(rng):
    with pytest.raises(RejectTooShort):
        preprocess_stream(rng.random((119, N_SUBCARRIERS)), 100)


def test_1000hz_stream_subsampled_then_rejected(rng):
    raw = rng.random((1000, N_SUBCARRIERS))
    assert len(raw[::10]) == 100
    with pytest.raises(RejectTooShort):
        preprocess_stream(raw, 1000)


def test_too_long_rejected(rng):
    with pytest.raises(RejectTooLong):
        preprocess_stream(rng.random((221, N_SUBCARRIERS)), 100)


def test_subsampling_keeps_every_stride_th_packet():
    # packet i carries value i on every subcarrier; 1000 Hz -> keep 0, 10, 20, ...
    raw = np.repeat(np.arange(1500, dtype=float)[:, None], N_SUBCARRIERS, axis=1)
    s = preprocess_stream(raw, 1000)
    assert s.valid_length == 150
    np.testing.assert_allclose(s.amplitudes[0, :150], np.arange(0, 1500, 10) / 1490, atol=1e-7)


def test_boundaries_accepted(rng):
    assert preprocess_stream(rng.random((120, N_SUBCARRIERS)), 100).valid_length == 120
    assert preprocess_stream(rng.random((220, N_SUBCARRIERS)), 100).valid_length == 220


def test_degenerate_range_flags_and_zeros():
    with pytest.raises(DegenerateRange) as info:
        preprocess_stream(np.full((150, N_SUBCARRIERS), 3.0), 100, sample_id="flat")
    assert np.all(info.value.sample.amplitudes == 0)
    assert info.value.sample.sample_id == "flat"


def test_bad_packet_width_and_rate(rng):
    with pytest.raises(ValueError):
        preprocess_stream(rng.random((150, 31)), 100)
    with pytest.raises(ValueError):
        preprocess_stream(rng.random((150, N_SUBCARRIERS)), 50)


@settings(max_examples=40, deadline=None)
@given(st.integers(120, 220), st.integers(0, 2**31 - 1))
def test_normalization_hits_zero_and_one(n, seed):
    raw = np.random.default_rng(seed).normal(size=(n, N_SUBCARRIERS)) * 7 + 3
    s = preprocess_stream(raw, 100)
    real = s.amplitudes[:, :n]
    assert real.min() == 0.0 and real.max() == 1.0
    assert np.all(s.amplitudes[:, n:] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(120, 220), st.integers(0, 2**31 - 1))
def test_preprocess_idempotent_on_normalized_input(n, seed):
    first = preprocess_stream(np.random.default_rng(seed).random((n, N_SUBCARRIERS)), 100)
    again = preprocess_stream(first.amplitudes[:, : first.valid_length].T, 100)
    assert again.valid_length == first.valid_length
    np.testing.assert_allclose(again.amplitudes, first.amplitudes, atol=1e-6)


def test_normalize_spectrogram_degenerate():
    out, degenerate = normalize_spectrogram(np.ones((N_SUBCARRIERS, 130)))
    assert degenerate and out.shape == (N_SUBCARRIERS, N_TIMESTEPS) and not out.any()


# -- build_splits -----------------------------------------------------------------

def test_empty_sample_set_gives_four_empty_splits():
    splits = build_splits([], {})
    assert set(splits) == set(SPLIT_NAMES)
    assert all(len(s) == 0 for s in splits.values())


def test_two_domain_counting(rng):
    samples = [random_sample(rng, f"a{i}", domain=0) for i in range(4)] + [random_sample(rng, f"b{i}", domain=1) for i in range(6)]
    splits = build_splits(samples, {0: "Train", 1: "Test"})
    assert len(splits["Train"]) == 4 and len(splits["Test"]) == 6
    assert len(splits["Val"]) == 0 and len(splits["Val_TTA"]) == 0
    assert splits["Train"].domain_set == {0} and splits["Test"].domain_set == {1}


def test_overlap_rejected(rng):
    with pytest.raises(DomainOverlap):
        build_splits([random_sample(rng)], {0: ("Train", "Test")})


def test_missing_domain_rejected(rng):
    with pytest.raises(ValueError):
        build_splits([random_sample(rng, domain=3)], {0: "Train"})


def test_fractional_split_within_domain(rng):
    samples = [random_sample(rng, f"x{d}-{i}", domain=d) for d in (0, 1) for i in range(50)]
    splits = build_splits(samples, {0: ("Train", "Val"), 1: ("Val_TTA", "Test")}, seed=7)
    assert (len(splits["Train"]), len(splits["Val"])) == (40, 10)
    assert (len(splits["Val_TTA"]), len(splits["Test"])) == (5, 45)
    ids = [s.sample_id for sp in splits.values() for s in sp]
    assert len(ids) == len(set(ids)) == 100
    again = build_splits(samples, {0: ("Train", "Val"), 1: ("Val_TTA", "Test")}, seed=7)
    assert [s.sample_id for s in again["Val"]] == [s.sample_id for s in splits["Val"]]


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.integers(0, 8), st.sampled_from([("Train",), ("Val",), ("Train", "Val"), ("Val_TTA",), ("Test",), ("Val_TTA", "Test")]), min_size=1))
def test_split_disjointness_property(assignment):
    rng = np.random.default_rng(0)
    samples = [random_sample(rng, f"{d}-{i}", domain=d, valid_length=120) for d in assignment for i in range(5)]
    splits = build_splits(samples, assignment)
    source = set().union(*(splits[n].domain_set for n in SOURCE_GROUP))
    target = set().union(*(splits[n].domain_set for n in TARGET_GROUP))
    assert not source & target
    assert sum(len(s) for s in splits.values()) == len(samples)


# -- synthesize_domain --------------------------------------------------------------

def test_identity_spec_reproduces_normalized_templates():
    templates = ActivityTemplates(3, seed=2)
    split = synthesize_domain(SyntheticDomainSpec(0), 6, templates, 3)
    for i, s in enumerate(split):
        assert s.activity == i % 3
        expected, _ = normalize_spectrogram(templates(s.activity))
        np.testing.assert_allclose(s.amplitudes, expected, atol=1e-6)


def test_synthesis_deterministic():
    templates = ActivityTemplates(2, seed=0)
    spec = SyntheticDomainSpec(4, 0.3, 1.2, np.linspace(0.5, 2, 30), 0.2, 99)
    a = synthesize_domain(spec, 5, templates, 2).samples
    b = synthesize_domain(spec, 5, templates, 2).samples
    assert all(np.array_equal(x.amplitudes, y.amplitudes) for x, y in zip(a, b))


def test_offset_shifts_prenormalization_means():
    # replicate the pre-normalization pipeline with a direct loop
    templates = ActivityTemplates(2, seed=1)

    def raw_means(spec):
        rng = np.random.default_rng(spec.rng_seed)
        out = []
        for i in range(4):
            clean = templates(i % 2)
            raw = np.empty_like(clean)
            for f in range(clean.shape[0]):
                for t in range(clean.shape[1]):
                    raw[f, t] = clean[f, t] * spec.subcarrier_response[f] * spec.amplitude_scale + spec.amplitude_offset
            raw += rng.normal(0, spec.noise_sigma, size=raw.shape)
            out.append(raw.mean(axis=1))
        return np.array(out)

    base = raw_means(SyntheticDomainSpec(0, 0.0, noise_sigma=0.1, rng_seed=5))
    shifted = raw_means(SyntheticDomainSpec(1, 0.75, noise_sigma=0.1, rng_seed=5))
    np.testing.assert_allclose(shifted - base, 0.75, atol=1e-12)


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        SyntheticDomainSpec(0, amplitude_scale=0)
    with pytest.raises(ValueError):
        SyntheticDomainSpec(0, subcarrier_response=np.r_[np.ones(29), 0.0])
    with pytest.raises(ValueError):
        SyntheticDomainSpec(0, noise_sigma=-1)


def test_templates_pure_function():
    t = ActivityTemplates(2, seed=0)
    a = t(1)
    a[:] = 0
    assert t(1).any()


# -- interchange format ---------------------------------------------------------------

def test_round_trip_100(tmp_path, rng):
    samples = [random_sample(rng, f"sample-{i}-é", activity=i % 6, domain=i % 9) for i in range(100)]
    path = tmp_path / "d.csid"
    write_dataset(samples, path)
    back = read_dataset(path)
    assert len(back) == 100
    for a, b in zip(samples, back):
        assert a == b


def test_header_layout(tmp_path, rng):
    path = tmp_path / "d.csid"
    write_dataset([random_sample(rng, "ab", activity=2, domain=300, valid_length=150)], path)
    buf = path.read_bytes()
    assert buf[:4] == b"CSID"
    assert struct.unpack_from("<HIHH", buf, 4) == (1, 1, 30, 220)
    assert struct.unpack_from("<BHHH", buf, 14) == (2, 300, 150, 2)
    assert buf[21:23] == b"ab"
    assert len(buf) == 23 + 30 * 220 * 4


def test_truncated_file(tmp_path, rng):
    path = tmp_path / "d.csid"
    write_dataset([random_sample(rng, "a"), random_sample(rng, "b")], path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError):
        read_dataset(path)


def test_wrong_subcarrier_count(tmp_path):
    path = tmp_path / "d.csid"
    path.write_bytes(struct.pack("<4sHIHH", b"CSID", 1, 0, 31, 220))
    with pytest.raises(FormatError):
        read_dataset(path)


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "d.csid"
    path.write_bytes(struct.pack("<4sHIHH", b"XXXX", 1, 0, 30, 220))
    with pytest.raises(FormatError):
        read_dataset(path)
    path.write_bytes(struct.pack("<4sHIHH", b"CSID", 2, 0, 30, 220))
    with pytest.raises(FormatError):
        read_dataset(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "d.csid"
    path.write_bytes(struct.pack("<4sHIHH", b"CSID", 1, 0, 30, 220) + b"\0")
    with pytest.raises(FormatError):
        read_dataset(path)
