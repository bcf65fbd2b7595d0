"""Shared fixtures: the standard synthetic benchmark pair and small helpers."""

import time

import numpy as np
import pytest

from tlab import datasets, models

FIXTURE_SIDE = 16
FIXTURE_WIDTH = 8
FIXTURE_SEED = 3


class LinearModel:
    """Two-logit linear classifier exposing the TrainedModel query protocol.

    Logits are w @ x.ravel() + b with float64 arithmetic, so attack and
    boost behavior can be checked against closed forms.
    """

    def __init__(self, w, b=(0.0, 0.0)):
        self.w = np.asarray(w, dtype=np.float64)  # (2, n)
        self.b = np.asarray(b, dtype=np.float64)

    def logits01(self, x01):
        return self.w @ np.asarray(x01, dtype=np.float64).ravel() + self.b

    def predict01(self, x01):
        return int(np.argmax(self.logits01(x01)))

    def margin01(self, x01, true_class):
        z = self.logits01(x01)
        return float(z[1 - true_class] - z[true_class])

    def loss_grad01(self, x01, true_class):
        z = self.logits01(x01)
        p = np.exp(z - z.max())
        p /= p.sum()
        loss = -np.log(p[true_class])
        dz = p.copy()
        dz[true_class] -= 1.0
        grad = (dz @ self.w).reshape(np.asarray(x01).shape)
        return float(loss), grad

    def logit_grads01(self, x01):
        shape = np.asarray(x01).shape
        return self.logits01(x01), [self.w[k].reshape(shape) for k in range(2)]

    def margin_grad01(self, x01, true_class):
        shape = np.asarray(x01).shape
        other = 1 - true_class
        grad = (self.w[other] - self.w[true_class]).reshape(shape)
        return self.margin01(x01, true_class), grad


@pytest.fixture
def linear_model_cls():
    return LinearModel


@pytest.fixture(scope="session")
def fixture_dataset():
    return datasets.synth_dataset(seed=FIXTURE_SEED, n_per_class=500,
                                  separation=4.0, input_side=FIXTURE_SIDE)


# wall-clock training duration of each session model, keyed by spec name
TRAIN_SECONDS = {}


def _timed_train(name, dataset):
    spec = models.build_spec(name, FIXTURE_SIDE, FIXTURE_WIDTH)
    start = time.monotonic()
    model = models.train(spec, dataset, models.TrainConfig(seed=FIXTURE_SEED))
    TRAIN_SECONDS[name] = time.monotonic() - start
    return model


@pytest.fixture(scope="session")
def qub2_model(fixture_dataset):
    return _timed_train("QUB2", fixture_dataset)


@pytest.fixture(scope="session")
def qub1_model(fixture_dataset):
    return _timed_train("QUB1", fixture_dataset)


@pytest.fixture(scope="session")
def small_dataset():
    """Tiny 8x8 dataset for fast attack/harness behavior tests."""
    return datasets.synth_dataset(seed=0, n_per_class=60, separation=4.0,
                                  input_side=8)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    spec = models.build_spec("QUB2", 8, 4)
    return models.train(spec, small_dataset, models.TrainConfig(seed=0))


def correctly_classified(model, dataset, n, splits=("test",), seed=0):
    """First n seeded samples (x01, y) the model classifies correctly."""
    xs = np.concatenate([dataset.split_arrays(s)[0] for s in splits])
    ys = np.concatenate([dataset.split_arrays(s)[1] for s in splits])
    x01 = (xs[:, None].astype(np.float32)) / np.float32(255)
    order = np.random.default_rng(seed).permutation(len(ys))
    picked = []
    for i in order:
        if model.predict01(x01[i]) == ys[i]:
            picked.append(i)
            if len(picked) == n:
                break
    assert len(picked) == n, f"only {len(picked)} correctly classified"
    return x01[picked], ys[picked].astype(int)
