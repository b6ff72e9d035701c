import numpy as np
import pytest

from drmood import dataset as D
from drmood.training import TrainConfig, train


def random_spd(rng, n, cond_floor=0.1):
    a = rng.normal(size=(n, n))
    return a @ a.T + cond_floor * np.eye(n)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = D.SynthConfig(n_classes=3, vocab_per_class=12, samples_per_class=40, ood_samples=30, seed=3)
    ind, ood = D.synth_generate(cfg)
    train_ds, dev_ds, test_ds = D.split(ind, (0.6, 0.2, 0.2), seed=3)
    return train_ds, dev_ds, test_ds, ood


@pytest.fixture(scope="session")
def small_models(small_corpus):
    train_ds, dev_ds, _, _ = small_corpus
    base = TrainConfig(epochs=4, batch_size=16, learning_rate=3e-3, d_emb=8, width=12, n_layers=3, seed=1)
    return {
        "drm": train(train_ds, dev_ds, base),
        "linear": train(train_ds, dev_ds, TrainConfig(**{**base.__dict__, "head_kind": "linear"})),
    }


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
