"""Shared fixtures.

The acceptance demos train many victim models on a 5k-pair corpus, so
everything heavy is session-scoped and computed once: one corpus, one
split, one decoder, one poison batch per attack kind, and one set of
twin training runs reused by several tests.
"""

import numpy as np
import pytest

from textpoison.attack import AttackSpec, merge_poison, run_attack
from textpoison.corpus import DEFAULT_VOCAB, Corpus, split_corpus, synthesize_corpus
from textpoison.decoder import train_reference_decoder
from textpoison.embedding import PromptTemplateSet, ReferenceBackend
from textpoison.victim import TrainConfig, train_victim

ACC_DIM = 16
ACC_TARGET_IMAGE = "cat-0000"
ACC_STI_CLASS = "dog"
ACC_BD_CLASS = "boat"
ACC_TRIGGER = "zx"


@pytest.fixture(scope="session")
def acc_backend():
    return ReferenceBackend(ACC_DIM)


@pytest.fixture(scope="session")
def acc_templates():
    return PromptTemplateSet.default()


@pytest.fixture(scope="session")
def acc_corpus():
    return synthesize_corpus(10, 500, ACC_DIM, DEFAULT_VOCAB, seed=0)


@pytest.fixture(scope="session")
def acc_split(acc_corpus):
    train, held = split_corpus(acc_corpus, 0.1, 0)
    # the attacked image must be a training pair
    if not any(p.id == ACC_TARGET_IMAGE for p in train):
        moved = [p for p in held if p.id == ACC_TARGET_IMAGE]
        held = Corpus.from_pairs([p for p in held if p.id != ACC_TARGET_IMAGE])
        train = Corpus.from_pairs(train.pairs + tuple(moved))
    return train, held


@pytest.fixture(scope="session")
def acc_decoder(acc_split, acc_backend):
    train, _ = acc_split
    return train_reference_decoder(train, acc_backend, epochs=8, lr=0.05, seed=0)


@pytest.fixture(scope="session")
def sti_attack(acc_split, acc_backend, acc_decoder, acc_templates):
    train, _ = acc_split
    spec = AttackSpec(
        kind="sti_poison",
        target_class=ACC_STI_CLASS,
        source_image_ids=(ACC_TARGET_IMAGE,),
    )
    batch = run_attack(train, spec, acc_backend, acc_decoder, acc_templates)
    return spec, batch, merge_poison(train, batch)


@pytest.fixture(scope="session")
def bd_attack(acc_split, acc_backend, acc_decoder, acc_templates):
    train, _ = acc_split
    image_ids = tuple(sorted(p.id for p in train if p.class_label == ACC_BD_CLASS)[:20])
    spec = AttackSpec(
        kind="word_backdoor",
        target_class=ACC_BD_CLASS,
        source_image_ids=image_ids,
        trigger=ACC_TRIGGER,
        texts_per_image=5,
    )
    batch = run_attack(train, spec, acc_backend, acc_decoder, acc_templates)
    return spec, batch, merge_poison(train, batch)


def _victim(corpus, seed):
    return train_victim(corpus, TrainConfig(epochs=30, batch_size=256, lr=1.0, seed=seed))


@pytest.fixture(scope="session")
def twin_runs(acc_split, sti_attack, bd_attack):
    """Victim triples per seed: clean twin, targeted-poison, backdoor-poison.

    Seeds 0-9 get clean and targeted models; seeds 0-4 additionally get
    the backdoor model.  This is the dominant cost of the suite, paid
    exactly once.
    """
    train, _ = acc_split
    _, _, sti_poisoned = sti_attack
    _, _, bd_poisoned = bd_attack
    runs = {}
    for seed in range(10):
        entry = {
            "clean": _victim(train, seed),
            "sti": _victim(sti_poisoned, seed),
        }
        if seed < 5:
            entry["bd"] = _victim(bd_poisoned, seed)
        runs[seed] = entry
    return runs


@pytest.fixture(scope="session")
def unit_corpus():
    """Small corpus for module-level tests that need real structure."""
    return synthesize_corpus(4, 150, ACC_DIM, DEFAULT_VOCAB, seed=1)


@pytest.fixture(scope="session")
def unit_split(unit_corpus):
    return split_corpus(unit_corpus, 0.15, 1)


@pytest.fixture(scope="session")
def unit_decoder(unit_split, acc_backend):
    train, _ = unit_split
    return train_reference_decoder(train, acc_backend, epochs=6, lr=0.05, seed=0)


@pytest.fixture(scope="session")
def unit_victim(unit_split):
    train, _ = unit_split
    config = TrainConfig(epochs=30, batch_size=128, lr=1.0, seed=0, embed_dim=16, proj_dim=16)
    return train_victim(train, config)
