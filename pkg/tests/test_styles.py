import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from promptstyler.encoder import content_prompt, encode, init_encoder, Arch, style_content_prompt
from promptstyler.errors import BadDistribution, DimensionMismatch, NonFiniteLoss, NotNormalized
from promptstyler.sphere import l2_normalize
from promptstyler.styles import (
    InitDistribution,
    PromptObjective,
    StyleBank,
    TrainConfig,
    content_consistency_loss,
    content_similarity_matrix,
    init_style_vectors,
    learn_styles,
    learn_styles_parallel,
    load_style_bank,
    pairwise_abs_cosines,
    prompt_loss,
    save_style_bank,
    style_diversity_loss,
)
from reference_encoder import reference_encode

CLASSES = ("dog", "elephant", "giraffe", "guitar", "horse")


# --- loss oracles (hand evaluation) ----------------------------------------------


def test_style_loss_empty_previous_is_zero():
    assert style_diversity_loss(np.array([1.0, 0.0]), []) == 0.0


def test_style_loss_self_is_one():
    f = l2_normalize([1.0, 2.0, 2.0])
    assert style_diversity_loss(f, [f]) == pytest.approx(1.0, abs=1e-12)


def test_style_loss_hand_case():
    current = np.array([1.0, 0.0, 0.0])
    p1 = np.array([0.5, math.sqrt(0.75), 0.0])
    p2 = np.array([-0.3, 0.0, math.sqrt(0.91)])
    # (|0.5| + |-0.3|) / 2
    assert style_diversity_loss(current, [p1, p2]) == pytest.approx(0.4, abs=1e-12)


def test_style_loss_validates_inputs():
    with pytest.raises(NotNormalized):
        style_diversity_loss(np.array([2.0, 0.0]), [np.array([1.0, 0.0])])
    with pytest.raises(DimensionMismatch):
        style_diversity_loss(np.array([1.0, 0.0]), [np.array([1.0, 0.0, 0.0])])


@settings(max_examples=50)
@given(st.integers(2, 10), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_style_loss_in_unit_interval(dim, count, seed):
    rng = np.random.default_rng(seed)
    cur = l2_normalize(rng.normal(size=dim))
    prev = [l2_normalize(rng.normal(size=dim)) for _ in range(count)]
    assert 0.0 <= style_diversity_loss(cur, prev) <= 1.0 + 1e-15


def test_style_loss_zero_iff_orthogonal():
    e = np.eye(4)
    assert style_diversity_loss(e[0], [e[1], e[2], e[3]]) == 0.0
    assert style_diversity_loss(e[0], [e[1], l2_normalize(e[0] + 1e-3 * e[2])]) > 0


def test_content_loss_single_class():
    assert content_consistency_loss([[0.3]]) == 0.0


@pytest.mark.parametrize("n", [2, 5, 65])
def test_content_loss_uniform_is_log_n(n):
    assert content_consistency_loss(np.full((n, n), 0.37)) == pytest.approx(math.log(n), abs=1e-9)


def test_content_loss_two_class_diagonal():
    assert content_consistency_loss(np.eye(2)) == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-9)
    assert content_consistency_loss(np.eye(2)) == pytest.approx(0.31326, abs=1e-5)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(1e-3, 0.5))
def test_content_loss_monotone_in_diagonal(n, seed, bump):
    z = np.random.default_rng(seed).uniform(-1, 1, size=(n, n))
    base = content_consistency_loss(z)
    assert base >= 0
    m = seed % n
    z2 = z.copy()
    z2[m, m] += bump
    if n > 1:
        assert content_consistency_loss(z2) < base
    else:
        assert content_consistency_loss(z2) == base == 0


# --- similarity matrix -------------------------------------------------------------


def test_similarity_single_class(tiny_encoder, rng):
    z = content_similarity_matrix(tiny_encoder, rng.normal(0, 0.02, 32), ["dog"])
    assert z.shape == (1, 1)
    assert -1.0 <= z[0, 0] <= 1.0


def test_similarity_matches_independent_recomputation(tiny_encoder, vocab, rng):
    names = ["dog", "giraffe", "horse"]
    s = rng.normal(0, 0.02, 32)
    z = content_similarity_matrix(tiny_encoder, s, names)
    ids = [vocab.class_names.index(c) + 1 for c in names]
    for a, m in enumerate(ids):
        sc = l2_normalize(reference_encode(tiny_encoder, style_content_prompt(vocab, m), s))
        for b, n in enumerate(ids):
            c = l2_normalize(reference_encode(tiny_encoder, content_prompt(vocab, n)))
            assert z[a, b] == pytest.approx(float(sc @ c), abs=1e-6)


def test_similarity_gram_when_style_content_equals_content(ident, vocab):
    # identity encoder: the style-content feature is s itself; with s set to
    # class m's content feature, row m of z is that class's Gram row
    obj = PromptObjective(ident, CLASSES)
    gram = obj.content_features @ obj.content_features.T
    for m, name in enumerate(CLASSES):
        s = ident.token_embedding[vocab.class_id(name)]
        z = obj.similarity_matrix(s)
        np.testing.assert_allclose(z[m], gram[m], atol=1e-12)
        assert z[m, m] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(np.diag(gram), 1.0, atol=1e-12)


# --- prompt loss ---------------------------------------------------------------------


def _fd_grad(f, s, h=1e-5):
    return np.array([(f(s + h * e) - f(s - h * e)) / (2 * h) for e in np.eye(len(s))])


def _previous_features(enc, rng, count):
    obj = PromptObjective(enc, CLASSES)
    return obj.style_features(rng.normal(0, 0.3, (count, enc.arch.width))) if count else np.zeros((0, enc.arch.out_dim))


def test_first_style_total_is_content_loss(tiny_encoder, rng):
    s = rng.normal(0, 0.02, 32)
    loss, _ = prompt_loss(tiny_encoder, s, [], CLASSES)
    assert loss.style_loss == 0.0
    assert loss.total == loss.content_loss


@pytest.mark.parametrize("flags", [(True, True), (True, False), (False, True)])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_prompt_loss_gradient_matches_fd(vocab, seed, flags):
    enc = init_encoder(seed, Arch(), vocab)
    rng = np.random.default_rng(seed + 50)
    prev = _previous_features(enc, rng, 3)
    s = rng.normal(0, 0.1, 32)
    _, grad = prompt_loss(enc, s, prev, CLASSES, *flags)
    fd = _fd_grad(lambda x: prompt_loss(enc, x, prev, CLASSES, *flags)[0].total, s)
    assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4


def test_prompt_loss_fuzz_nonnegative(tiny_encoder):
    rng = np.random.default_rng(77)
    obj = PromptObjective(tiny_encoder, CLASSES)
    prev = _previous_features(tiny_encoder, rng, 4)
    for _ in range(100):
        loss, grad = obj.loss(rng.normal(0, rng.choice([0.02, 0.5, 5.0]), 32), prev)
        assert loss.style_loss >= 0 and loss.content_loss >= 0
        assert loss.total == loss.style_loss + loss.content_loss
        assert np.all(np.isfinite(grad))


def test_disabled_losses_give_zero(tiny_encoder, rng):
    loss, grad = prompt_loss(tiny_encoder, rng.normal(size=32), _previous_features(tiny_encoder, rng, 2),
                             CLASSES, use_style_loss=False, use_content_loss=False)
    assert (loss.style_loss, loss.content_loss, loss.total) == (0.0, 0.0, 0.0)
    assert not np.any(grad)


# --- initialisation -------------------------------------------------------------------


def test_default_init_statistics():
    v = init_style_vectors(TrainConfig(K=80, seed=5), 512)
    assert v.shape == (80, 512)
    assert abs(v.mean()) <= 0.002
    assert abs(v.std() - 0.02) <= 0.002


@pytest.mark.parametrize("dist", [
    InitDistribution("normal", 0.0, 0.2),
    InitDistribution("normal", 0.2, 0.02),
    InitDistribution("uniform", 0.0, 0.2),
])
def test_alternative_inits(dist):
    v = init_style_vectors(TrainConfig(K=80, seed=1, init=dist), 512)
    if dist.kind == "uniform":
        assert v.min() >= 0.0 and v.max() < 0.2
    else:
        assert abs(v.mean() - dist.a) < 0.01
        assert abs(v.std() - dist.b) / dist.b < 0.1


def test_init_deterministic():
    cfg = TrainConfig(K=6, seed=9)
    np.testing.assert_array_equal(init_style_vectors(cfg, 32), init_style_vectors(cfg, 32))


@pytest.mark.parametrize("dist", [
    InitDistribution("normal", 0.0, 0.0),
    InitDistribution("uniform", 0.2, 0.1),
    InitDistribution("laplace", 0.0, 1.0),
    InitDistribution("normal", float("nan"), 1.0),
])
def test_bad_distribution(dist):
    with pytest.raises(BadDistribution):
        init_style_vectors(TrainConfig(K=2, init=dist), 4)


# --- learning -------------------------------------------------------------------------


def test_default_training_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.K, cfg.L, cfg.learning_rate, cfg.momentum) == (80, 100, 0.002, 0.9)
    assert (cfg.init.kind, cfg.init.a, cfg.init.b) == ("normal", 0.0, 0.02)
    assert cfg.mode == "sequential"


def _sphere_oracle(previous, dim, seed, steps=3000, lr=0.05):
    """Projected gradient descent of mean |cos| directly on the unit sphere."""
    rng = np.random.default_rng(seed)
    u = l2_normalize(rng.normal(size=dim))
    for _ in range(steps):
        c = previous @ u
        g = np.sign(c) @ previous / len(previous)
        g -= u * (u @ g)
        u = l2_normalize(u - lr * g)
        lr *= 0.999
    return u


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_identity_encoder_reaches_orthogonality(vocab, seed):
    from promptstyler.encoder import identity_encoder

    enc = identity_encoder(vocab, width=8, seed=seed)
    bank = learn_styles(enc, CLASSES, TrainConfig(K=4, L=500, seed=seed))
    feats = PromptObjective(enc, CLASSES).style_features(bank.vectors)
    assert pairwise_abs_cosines(feats).max() < 1e-2
    # oracle: the sphere admits a 4th direction orthogonal to the first three
    u = _sphere_oracle(feats[:3], 8, seed)
    assert np.abs(feats[:3] @ u).max() < 1e-2


def test_earlier_styles_never_change(tiny_encoder):
    snapshots = {}

    def record(i, vectors):
        snapshots[i] = vectors

    bank = learn_styles(tiny_encoder, CLASSES, TrainConfig(K=3, L=10, seed=4), on_stage_end=record)
    for i, vecs in snapshots.items():
        np.testing.assert_array_equal(vecs, bank.vectors[:i])
    assert bank.peak_style_content_features == len(CLASSES)


def test_learning_is_deterministic(tiny_encoder):
    cfg = TrainConfig(K=3, L=15, seed=8)
    a = learn_styles(tiny_encoder, CLASSES, cfg)
    b = learn_styles(tiny_encoder, CLASSES, cfg)
    np.testing.assert_array_equal(a.vectors, b.vectors)
    np.testing.assert_array_equal(a.style_losses, b.style_losses)
    np.testing.assert_array_equal(a.content_losses, b.content_losses)


def test_logged_losses_finite_nonnegative(tiny_encoder):
    bank = learn_styles(tiny_encoder, CLASSES, TrainConfig(K=3, L=10, seed=2))
    for arr in (bank.style_losses, bank.content_losses):
        assert np.all(np.isfinite(arr)) and np.all(arr >= 0)
    assert bank.style_losses[0] == 0.0
    assert np.all(bank.style_losses <= 1.0)


def test_encoder_frozen_through_learning(tiny_encoder):
    before = tiny_encoder.content_hash()
    learn_styles(tiny_encoder, CLASSES, TrainConfig(K=2, L=5))
    assert tiny_encoder.content_hash() == before


def test_no_loss_keeps_initialisation(tiny_encoder):
    cfg = TrainConfig(K=3, L=20, seed=6, use_style_loss=False, use_content_loss=False)
    bank = learn_styles(tiny_encoder, CLASSES, cfg)
    np.testing.assert_array_equal(bank.vectors, init_style_vectors(cfg, 32))
    assert not np.any(bank.style_losses) and not np.any(bank.content_losses)


def test_nonfinite_loss_aborts(tiny_encoder):
    cfg = TrainConfig(K=2, L=5, seed=0, init=InitDistribution("normal", 0.0, 1e300))
    with pytest.raises(NonFiniteLoss) as info:
        learn_styles(tiny_encoder, CLASSES, cfg)
    assert info.value.style_index == 1 and info.value.iteration == 1


def test_sequential_rejects_parallel_mode(tiny_encoder):
    with pytest.raises(ValueError):
        learn_styles(tiny_encoder, CLASSES, TrainConfig(K=2, L=2, mode="parallel"))


# --- parallel variant ----------------------------------------------------------------


def test_parallel_peak_count_is_k_times_n(tiny_encoder):
    bank = learn_styles_parallel(tiny_encoder, CLASSES, TrainConfig(K=7, L=2, mode="parallel"))
    assert bank.peak_style_content_features == 7 * len(CLASSES)


def test_parallel_single_style_matches_sequential(tiny_encoder):
    seq = learn_styles(tiny_encoder, CLASSES, TrainConfig(K=1, L=40, seed=3))
    par = learn_styles_parallel(tiny_encoder, CLASSES, TrainConfig(K=1, L=40, seed=3, mode="parallel"))
    assert abs(seq.content_losses[0] - par.content_losses[0]) < 1e-6
    np.testing.assert_array_equal(seq.vectors, par.vectors)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_parallel_identity_converges(vocab, seed):
    from promptstyler.encoder import identity_encoder

    enc = identity_encoder(vocab, width=8, seed=seed)
    bank = learn_styles_parallel(enc, CLASSES, TrainConfig(K=4, L=500, seed=seed, mode="parallel"))
    feats = PromptObjective(enc, CLASSES).style_features(bank.vectors)
    # joint updates chase moving targets and settle in a ~1e-2 oscillation band
    assert pairwise_abs_cosines(feats).max() < 2e-2


def test_parallel_gradient_matches_fd(tiny_encoder):
    rng = np.random.default_rng(21)
    obj = PromptObjective(tiny_encoder, CLASSES)
    vecs = rng.normal(0, 0.2, (3, 32))
    _, _, grad = obj.joint_loss(vecs)
    for i in range(3):
        others = np.delete(vecs, i, axis=0)

        def own_loss(x):
            stack = np.insert(others, i, x, axis=0)
            sl, cl, _ = obj.joint_loss(stack)
            # other styles' features are constants in s_i's own loss
            return sl[i] + cl[i]

        fd = _fd_grad(own_loss, vecs[i])
        assert np.linalg.norm(grad[i] - fd) / np.linalg.norm(fd) < 1e-4


# --- style bank file ---------------------------------------------------------------------


def test_style_bank_round_trip(tmp_path, tiny_encoder):
    bank = learn_styles(tiny_encoder, CLASSES, TrainConfig(K=3, L=5, seed=12))
    path = tmp_path / "styles.bin"
    save_style_bank(bank, path)
    back = load_style_bank(path)
    np.testing.assert_array_equal(back.vectors, bank.vectors)
    np.testing.assert_array_equal(back.style_losses, bank.style_losses)
    np.testing.assert_array_equal(back.content_losses, bank.content_losses)
    assert (back.iterations, back.seed, back.config) == (bank.iterations, bank.seed, bank.config)
    assert back.config_digest() == bank.config_digest()
    save_style_bank(back, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_style_bank_header(tmp_path):
    import struct

    bank = StyleBank(np.zeros((2, 4)), np.zeros(2), np.ones(2), 7, -3, TrainConfig(K=2, L=7, seed=-3))
    path = tmp_path / "s.bin"
    save_style_bank(bank, path)
    data = path.read_bytes()
    assert data[:8] == b"PSTYSTB\0"
    assert struct.unpack_from("<I3iq", data, 8) == (1, 2, 4, 7, -3)
    assert data[32:64] == bank.config.digest()
