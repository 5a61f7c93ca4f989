import numpy as np
import pytest

from distill_influence.data import Batch, make_gaussian_task
from distill_influence.models import ClassifierSpec, build_classifier


def random_batch(n, dim, num_classes, seed, id_offset=0):
    rng = np.random.default_rng(seed)
    return Batch(rng.standard_normal((n, dim)), rng.integers(0, num_classes, n),
                 np.arange(id_offset, id_offset + n))


@pytest.fixture
def make_pair():
    """Factory for a (teacher, student) pair of small random MLPs."""

    def _make(seed=0, dim=4, classes=3, t_hidden=(8,), s_hidden=(5,), activation="tanh"):
        teacher = build_classifier(ClassifierSpec(dim, t_hidden, classes, activation), seed, "teacher")
        student = build_classifier(ClassifierSpec(dim, s_hidden, classes, activation), seed + 1000, "student")
        return teacher, student

    return _make


@pytest.fixture
def toy_task():
    train = make_gaussian_task(2, 4, 3.0, 0.1, 120, seed=3, means_seed=1)
    val = make_gaussian_task(2, 4, 3.0, 0.0, 60, seed=4, means_seed=1, id_offset=120)
    return train, val
