"""Shared fixtures. The session-scoped trained model backs the slow
end-to-end checks so it is only built once per run."""

from __future__ import annotations

from dataclasses import dataclass

import pytest

from btts.corpus import (CorruptionConfig, build_vocab, default_style_specs,
                         pair_context_target, synth_corpus)
from btts.losses import BTConfig, LossConfig
from btts.model import ModelConfig, init_model
from btts.training import TrainConfig, train


@pytest.fixture(scope="session")
def style_specs():
    return default_style_specs()


@pytest.fixture()
def small_corpus(style_specs):
    return synth_corpus(style_specs, 64, seed=1)


@pytest.fixture()
def small_vocab(small_corpus):
    return build_vocab(small_corpus)


@pytest.fixture()
def small_pairs(small_corpus):
    return pair_context_target(small_corpus)


@pytest.fixture()
def small_model(small_vocab):
    cfg = ModelConfig(d_model=32, n_heads=4, d_ff=64,
                      vocab_size=small_vocab.size, max_len=32)
    return init_model(cfg, seed=0)


@dataclass
class TrainedAssets:
    model: object
    vocab: object
    sentences: list
    pairs: list
    specs: list
    train_cfg: TrainConfig


# Configuration shared by the style-separation, transfer, and shot-size
# checks: a 2-style corpus of 2,000 sentences and 3,000 training steps at
# the best-known loss weights.
SYNTH_SEED = 11
TRAIN_SEED = 0
SYNTH_N_PER_STYLE = 1000
SYNTH_STEPS = 3000


@pytest.fixture(scope="session")
def trained_synth(style_specs):
    sentences = synth_corpus(style_specs, SYNTH_N_PER_STYLE, seed=SYNTH_SEED)
    vocab = build_vocab(sentences)
    pairs = pair_context_target(sentences)
    cfg = TrainConfig(steps=SYNTH_STEPS, batch_size=16, seed=TRAIN_SEED,
                      loss=LossConfig(lam=1e-2, bt_level="sentence"),
                      bt=BTConfig(delta=1e-4),
                      corruption=CorruptionConfig((0.2, 0.5), (0.1, 0.3)))
    model = init_model(ModelConfig(vocab_size=vocab.size), cfg.seed)
    train(model, vocab, pairs, cfg)
    return TrainedAssets(model, vocab, sentences, pairs, style_specs, cfg)
