import numpy as np
import pytest

from synthdata import attach_annotations, make_params, p0, sample_dataset


@pytest.fixture
def params():
    return p0()


@pytest.fixture
def small_params():
    return make_params(d=3, gamma=0.2, eta=0.5, p_c=0.7)


@pytest.fixture
def small_dataset(small_params):
    return sample_dataset(small_params, 40, seed=11)


@pytest.fixture
def annotated_dataset(small_params):
    return attach_annotations(sample_dataset(small_params, 60, seed=5), 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit(v):
    return v / np.linalg.norm(v)


def random_ball(rng, n, radius=0.9):
    w = rng.standard_normal(n)
    return radius * rng.uniform(0.1, 1.0) * w / np.linalg.norm(w)


def cosine(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
