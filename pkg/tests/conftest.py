import numpy as np
import pytest

from onis.config import RunConfig
from onis.dataset import DatasetConfig, generate_dataset
from onis.deploy import BenchmarkSuite, FlatBCConfig
from onis.multimodal import build_encoders, train_prompt
from onis.skillseq import DecoderConfig, USkillConfig
from onis.transfer import TransferConfig

TINY = RunConfig(
    dataset=DatasetConfig(episodes_per_cell=1),
    decoder=DecoderConfig(hidden=32, layers=3, steps=300),
    transfer=TransferConfig(steps=150, batch=64, groups=4, hidden=32, layers=2, early_stop=False, log_every=50),
    uskill=USkillConfig(steps=60, hidden=32, batch=64),
    flat_bc=FlatBCConfig(steps=100, hidden=32, layers=2, head_steps=50, batch=64),
    eval=BenchmarkSuite(Ks=(1,), levels=("stationary",), n_episodes=3, seeds=(0,)),
)


@pytest.fixture(scope="session")
def small_dataset():
    """One episode per (m, task) cell: 208 episodes, 24 annotated."""
    return generate_dataset(0, DatasetConfig(episodes_per_cell=1))


@pytest.fixture(scope="session")
def encoders():
    return build_encoders()


@pytest.fixture(scope="session")
def prompt(encoders, small_dataset):
    return train_prompt(encoders, small_dataset.annotated)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def s_output(small_dataset):
    """A briefly trained S-mode system; good enough for plumbing tests, not for success rates."""
    from onis.pipeline import train_s_onis
    return train_s_onis(small_dataset, TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
