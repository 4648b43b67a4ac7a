"""Shared heavyweight fixtures: one properly trained model zoo reused by the
acceptance criteria, plus its timing ledger."""

import time
from dataclasses import replace

import pytest

from refgame import listener, speaker, synthworld
from refgame.data import build_vocabulary

ACCEPT_SEED = 42


@pytest.fixture(scope="session")
def timings():
    return {}


@pytest.fixture(scope="session")
def accept_world(timings):
    t0 = time.monotonic()
    spec = synthworld.default_world_spec(seed=ACCEPT_SEED)
    dataset = synthworld.generate_dataset(spec, {"train": 2000, "val": 200, "test": 500})
    vocab = build_vocabulary(dataset.records["train"], min_freq=6)
    timings["generate"] = time.monotonic() - t0
    return dataset, vocab


@pytest.fixture(scope="session")
def sl_model(accept_world, timings):
    dataset, vocab = accept_world
    t0 = time.monotonic()
    model, history = listener.train_listener(
        dataset.records["train"], dataset.features, vocab,
        regime="contrastive", epochs=5, seed=1,
    )
    timings["train_sl"] = time.monotonic() - t0
    assert history[-1] < history[0]
    return model


@pytest.fixture(scope="session")
def slr_model(accept_world):
    dataset, vocab = accept_world
    model, _ = listener.train_listener(
        dataset.records["train"], dataset.features, vocab,
        regime="random_negative", epochs=5, seed=2,
    )
    return model


@pytest.fixture(scope="session")
def ss_model(accept_world):
    dataset, vocab = accept_world
    model, _ = speaker.train_speaker(
        dataset.records["train"], dataset.features, vocab,
        kind="simple", epochs=8, seed=3,
    )
    return model


@pytest.fixture(scope="session")
def ds_model(accept_world):
    dataset, vocab = accept_world
    model, _ = speaker.train_speaker(
        dataset.records["train"], dataset.features, vocab,
        kind="discerning", epochs=24, seed=3,
    )
    return model


@pytest.fixture(scope="session")
def difficulty_world():
    spec = synthworld.default_world_spec(seed=7, saliency_decay=0.45)
    dataset = synthworld.generate_dataset(spec, {"train": 2000, "test": 500})
    vocab = build_vocabulary(dataset.records["train"], min_freq=6)
    model, _ = listener.train_listener(
        dataset.records["train"], dataset.features, vocab, epochs=5, seed=1,
    )
    return dataset, model


@pytest.fixture(scope="session")
def category_data(accept_world):
    dataset, _ = accept_world
    # harder features than the pair data: more beam diversity for speakers
    spec = replace(dataset.spec, noise_sigma=0.2)
    return synthworld.generate_categories(
        spec, n_categories=10, n_train=40, n_test=20, seed=9,
    )
