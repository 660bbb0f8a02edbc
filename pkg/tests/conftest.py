"""Shared fixtures.

Heavy artifacts (desk dataset, trained surrogate, trained agent) are built
once per session.  Set REDISPATCH_TEST_CACHE to a directory to persist
them across sessions while iterating; leave it unset for a fully fresh
run (the default, and what CI-style runs should use).
"""

import os

import numpy as np
import pytest

from redispatch import datasets, grid, surrogate


def _cache_dir():
    path = os.environ.get("REDISPATCH_TEST_CACHE", "")
    if path:
        os.makedirs(path, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def case():
    return grid.load_case(grid.shipped_case_path())


@pytest.fixture(scope="session")
def standard_case():
    return grid.load_case(grid.shipped_case_path(standard=True))


@pytest.fixture(scope="session")
def tiny_records(case):
    """A small labeled dataset for machinery tests (2 states x 33 faults)."""
    rng = np.random.default_rng(7)
    return datasets.generate_dataset(case, rng, samples_per_level=1,
                                     levels=(1.0, 1.2))


@pytest.fixture(scope="session")
def desk_dataset(case, tmp_path_factory):
    """The desk-scale dataset: 9 levels x 10 states x 33 faults."""
    cache = _cache_dir()
    path = os.path.join(cache or str(tmp_path_factory.mktemp("desk")),
                        "dataset.txt")
    if not (cache and os.path.exists(path)):
        rng = np.random.default_rng(42)
        records = datasets.generate_dataset(case, rng, samples_per_level=10)
        datasets.write_records(path, case, records)
    return datasets.read_records(path, case)


@pytest.fixture(scope="session")
def desk_surrogate(case, desk_dataset, tmp_path_factory):
    """Surrogate trained on the desk dataset (the acceptance-gate model)."""
    cache = _cache_dir()
    path = os.path.join(cache or str(tmp_path_factory.mktemp("desk_model")),
                        "surrogate.ckpt")
    if cache and os.path.exists(path):
        return surrogate.SurrogateModel.load(path, case)
    model, _ = surrogate.train_surrogate(case, desk_dataset,
                                         np.random.default_rng(1),
                                         batch_size=128, lr=0.005,
                                         lr_decay_every=200, max_epochs=400,
                                         patience=60)
    model.save(path)
    return model
