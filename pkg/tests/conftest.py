import pytest

from pmol.adapter import ExpertGroupTable
from pmol.backbone import BackboneConfig, init_backbone
from pmol.data import SyntheticSpec, generate_synthetic_dataset
from pmol.numcore import Rng
from pmol.trainengine import build_model

TINY = BackboneConfig(vocab_size=64, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=32, seed=0)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_backbone():
    return init_backbone(TINY, Rng(7)).freeze()


@pytest.fixture
def groups3():
    return ExpertGroupTable.even(3, 2)


@pytest.fixture
def tiny_model(tiny_backbone, groups3):
    return build_model(tiny_backbone, groups3, rank=4, rng=Rng(11))


@pytest.fixture
def small_pairs():
    return generate_synthetic_dataset(SyntheticSpec(n_preferences=3, pairs_per_preference=12, seed=3))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
