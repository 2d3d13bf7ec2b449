import numpy as np
import pytest

from synthguard.cli import stage_seed
from synthguard.datasets import load_prison_fixture
from synthguard.tabular import Dataset, Kind, Schema, Variable, split_holdout

BUNDLED_SEED = 2024  # seed of the bundled pipeline config


@pytest.fixture(scope="session")
def prison():
    return load_prison_fixture()


@pytest.fixture(scope="session")
def prison_train(prison):
    """The 600 training rows the bundled pipeline config synthesizes from."""
    train, _ = split_holdout(prison, 199, stage_seed(BUNDLED_SEED, "split"))
    return train


def numeric_dataset(X, names=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = names or [f"x{i}" for i in range(X.shape[1])]
    schema = Schema(tuple(Variable(n, Kind.QUANTITATIVE, missing_allowed=True) for n in names))
    return Dataset(schema, {n: X[:, i] for i, n in enumerate(names)})


@pytest.fixture
def small_schema():
    return Schema(
        (
            Variable("age", Kind.QUANTITATIVE, missing_allowed=True),
            Variable("grade", Kind.ORDINAL, (1, 2, 3)),
            Variable("smoker", Kind.BINARY),
            Variable("region", Kind.NOMINAL, ("north", "south", "east")),
        )
    )
