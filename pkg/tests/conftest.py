import copy

import pytest

from partsmith.synth import pretrained_toy_backend, toy_block_task
from partsmith.training import ModelBundle, TrainConfig, Trainer, build_training_set

_BASE_CACHE: dict = {}


def pretrained_base(task, seed=0, pretrain_steps=250):
    """Session-cached unconditionally pretrained toy base; callers get a copy."""
    key = (seed, pretrain_steps)
    if key not in _BASE_CACHE:
        _BASE_CACHE[key] = pretrained_toy_backend(
            task.images, seed=seed, pretrain_steps=pretrain_steps)
    return copy.deepcopy(_BASE_CACHE[key])


@pytest.fixture(scope="session")
def toy_task():
    return toy_block_task(seed=0)


def train_toy(task, lam=0.01, seed=0, steps=120, lr=5e-3, use_projector=True,
              attn_loss="bce", pretrain_steps=250):
    """Short desk-scale training run shared by unit tests."""
    backend = pretrained_base(task, seed=seed, pretrain_steps=pretrain_steps)
    samples = build_training_set(
        list(zip(task.image_ids, task.images)), task.dictionary, task.extractor,
        backend,
    )
    cfg = TrainConfig(
        max_steps=steps, seed=seed, learning_rate=lr, image_size=32,
        lambda_attn=lam, checkpoint_every=0, use_projector=use_projector,
        attn_loss=attn_loss,
    )
    trainer = Trainer(samples, task.dictionary, backend, cfg)
    history = trainer.run()
    bundle = ModelBundle(
        trainer.token_dict, trainer.projector, backend, trainer.template, cfg,
        {"M": task.dictionary.M, "K": task.dictionary.K, "dim": task.dictionary.dim},
    )
    return trainer, bundle, samples, history


@pytest.fixture(scope="session")
def quick_bundle(toy_task):
    """One lightly trained model reused by evaluation/service tests."""
    trainer, bundle, samples, history = train_toy(toy_task, steps=120)
    return bundle, samples


@pytest.fixture()
def rng():
    import numpy as np

    return np.random.default_rng(0)
