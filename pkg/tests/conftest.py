import numpy as np
import pytest
import torch

from datta.data import ActivityTemplates, CsiSample, N_SUBCARRIERS, N_TIMESTEPS, SyntheticDomainSpec, synthesize_domain


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def random_sample(rng, sid="s", activity=0, domain=0, valid_length=None):
    n = int(rng.integers(120, 221)) if valid_length is None else valid_length
    amps = np.zeros((N_SUBCARRIERS, N_TIMESTEPS), dtype=np.float32)
    amps[:, :n] = rng.random((N_SUBCARRIERS, n), dtype=np.float32)
    return CsiSample(amps, activity, domain, n, sid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_domain_samples():
    templates = ActivityTemplates(2, seed=3)
    a = synthesize_domain(SyntheticDomainSpec(0, noise_sigma=0.05, rng_seed=1), 20, templates, 2)
    b = synthesize_domain(SyntheticDomainSpec(1, 0.2, 1.5, np.linspace(0.6, 1.4, 30), 0.05, 2), 20, templates, 2)
    return a.samples + b.samples


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
