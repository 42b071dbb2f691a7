import numpy as np
import pytest

from tamcl.model import ModelConfig, TAMCLModel
from tamcl.tasks import TaskSpec

SMALL_MODEL = dict(image_size=(8, 8), channels=1, patch=4, vocab_size=16, max_text_len=4,
                   hidden=16, depth=2, heads=2, mlp_dim=16)


def small_specs(n_tasks=3, n_train=64, n_test=32, labels=(2, 3, 4, 2, 3), **kw):
    return [TaskSpec(task_id=i + 1, n_labels=labels[i % len(labels)], n_train=n_train, n_test=n_test,
                     image_size=(8, 8), patch=4, text_len=4, vocab_size=16, seed=11 * (i + 1), **kw)
            for i in range(n_tasks)]


def small_model(seed=0, **kw):
    return TAMCLModel(ModelConfig(**{**SMALL_MODEL, **kw}), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
