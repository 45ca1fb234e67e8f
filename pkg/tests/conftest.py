import numpy as np
import pytest

from freerea.netbuilder import MacroSkeleton


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_table_path(tmp_path_factory):
    """Full 15625-row synthetic accuracy table with real cost columns."""
    from synth import write_synthetic_table
    path = tmp_path_factory.mktemp("synth") / "nats_synth.csv"
    write_synthetic_table(path)
    return path


@pytest.fixture
def desk_skeleton():
    return MacroSkeleton()


@pytest.fixture
def tiny_skeleton():
    # small enough that metric evaluation is a few milliseconds
    return MacroSkeleton(input_shape=(2, 8, 8), stages=((1, 4), (1, 8)), num_classes=3)
