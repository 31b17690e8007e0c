"""Shared fixtures.

The BLAS thread caps are exported before numpy is first imported so that
every test computes single-threaded and is therefore bitwise reproducible.
"""

import os

for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ[_var] = "1"

import numpy as np
import pytest

from lsnet.data import Dataset, make_blobs10


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def blobs():
    """The seeded synthetic dataset pair shared by every training test."""
    return make_blobs10(seed=0)


def subset(ds, count):
    """Balanced prefix slice (labels are laid out round-robin)."""
    return Dataset(ds.name, ds.images[:count], ds.labels[:count], ds.classes, ds.mean, ds.std)


@pytest.fixture(scope="session")
def blobs_small(blobs):
    train, test = blobs
    return subset(train, 200), subset(test, 100)
