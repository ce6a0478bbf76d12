import numpy as np
import pytest

from promptstyler.encoder import Arch, Vocabulary, identity_encoder, init_encoder

CLASSES = ("dog", "elephant", "giraffe", "guitar", "horse")


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.build(CLASSES)


@pytest.fixture(scope="session")
def tiny_encoder(vocab):
    return init_encoder(42, Arch(blocks=2, heads=2, width=32, out_dim=16, max_len=16), vocab)


@pytest.fixture(scope="session")
def ident(vocab):
    return identity_encoder(vocab, width=8, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
