import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from zvforge import tensor as T
from zvforge.model import VisionLanguageModel
from zvforge.objectives import (MATCH, Batch, BatchTooSmallError, NoNegativeError, SimilarityMatrix,
                                itc_features, itc_loss, itc_similarity, itg_loss, itg_targets, itm_logits,
                                itm_loss, itm_loss_from_logits, joint_loss, mine_negatives,
                                negative_weights, sample_hard_negative, similarity_matrix)
from zvforge.qformer import EOS, MaskMode, QFormerConfig
from zvforge.trainer import SyntheticCorpus, TrainConfig, adamw_step

from oracles import grad_ok, gradient_errors

CFG = QFormerConfig()


def random_batch(rng, B=4, cfg=CFG, max_len=5):
    images = rng.normal(size=(B, cfg.image_patches, cfg.image_feat_dim))
    caps = [rng.integers(4, cfg.vocab_size, size=int(rng.integers(1, max_len))).tolist() + [EOS]
            for _ in range(B)]
    return Batch(images=images, captions=caps)


# -- ITC ----------------------------------------------------------------------------------

def test_itc_similarity_examples():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert itc_similarity(q, [1.0, 0.0]) == 1.0
    assert abs(itc_similarity(q, [math.sqrt(0.5)] * 2) - math.sqrt(0.5)) < 1e-12


def test_itc_similarity_brute_force(rng):
    q = rng.normal(size=(4, 8))
    t = rng.normal(size=8)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    t /= np.linalg.norm(t)
    expected = max(sum(q[i, k] * t[k] for k in range(8)) for i in range(4))
    assert abs(itc_similarity(q, t) - expected) < 1e-12


def test_itc_similarity_zero_norm():
    with pytest.raises(T.NormalizationError):
        itc_similarity(np.zeros((2, 3)), [1.0, 0.0, 0.0])


def test_similarity_matrix_matches_pairwise(rng):
    img, txt = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 8))
    with T.default_dtype(np.float64):
        s = similarity_matrix(T.Tensor(img), T.Tensor(txt)).data
    for i in range(3):
        for j in range(3):
            assert abs(s[i, j] - itc_similarity(img[i], txt[j])) < 1e-12


def test_itc_loss_examples():
    assert itc_loss(np.ones((1, 1)), 0.07).item() == 0.0
    assert abs(itc_loss(np.eye(2), 1.0).item() - 0.3133) < 1e-4
    expected = -math.log(math.e / (math.e + 1))
    with T.default_dtype(np.float64):
        assert abs(itc_loss(np.eye(2), 1.0).item() - expected) < 1e-12
    assert abs(itc_loss(np.full((5, 5), 0.3), 0.1).item() - math.log(5)) < 1e-6


def test_itc_loss_non_square():
    with pytest.raises(ValueError):
        itc_loss(np.zeros((2, 3)), 1.0)


@given(hnp.arrays(np.float64, (5, 5), elements=st.floats(-1, 1)), st.permutations(range(5)))
def test_itc_loss_permutation_invariant(s, perm):
    perm = np.array(perm)
    with T.default_dtype(np.float64):
        a = itc_loss(s, 0.1).item()
        b = itc_loss(s[perm][:, perm], 0.1).item()
    assert abs(a - b) < 1e-10


@given(hnp.arrays(np.float64, (4, 4), elements=st.floats(-1, 1)), st.floats(0.01, 1.0))
def test_itc_loss_decreases_with_diagonal(s, bump):
    with T.default_dtype(np.float64):
        a = itc_loss(s, 0.5).item()
        b = itc_loss(s + np.eye(4) * bump, 0.5).item()
    assert b < a


# -- hard negatives -----------------------------------------------------------------------

def test_hard_negative_examples():
    sim = SimilarityMatrix(np.array([[0.9, 0.1, 0.8], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), 0.07)
    assert sample_hard_negative(sim, 0) == 2
    assert sample_hard_negative(SimilarityMatrix(np.eye(2), 0.1), 1) == 0


def test_hard_negative_batch_of_one():
    with pytest.raises(NoNegativeError):
        sample_hard_negative(SimilarityMatrix(np.ones((1, 1)), 0.1), 0)


@pytest.mark.parametrize("B", range(2, 9))
def test_hard_negative_never_positive_and_argmax(B):
    rng = np.random.default_rng(B)
    for _ in range(20):
        s = rng.normal(size=(B, B))
        sim = SimilarityMatrix(s, 0.1)
        for row in range(B):
            expected = max((j for j in range(B) if j != row), key=lambda j: (s[row, j], -j))
            assert sample_hard_negative(sim, row) == expected
            assert sample_hard_negative(sim, row, deterministic=False, seed=row) != row


@given(st.floats(1e-3, 100.0))
def test_hard_negative_temperature_invariant(tau):
    s = np.random.default_rng(1).normal(size=(6, 6))
    base = [sample_hard_negative(SimilarityMatrix(s, 1.0), r) for r in range(6)]
    assert [sample_hard_negative(SimilarityMatrix(s, tau), r) for r in range(6)] == base


def test_hard_negative_stochastic_frequencies():
    sim = SimilarityMatrix(np.array([[1.0, 0.2, 0.5, -0.3, 0.4]] * 5), 0.5)
    w = negative_weights(sim, 0)
    rng = np.random.default_rng(11)
    n = 10_000
    counts = np.bincount([sample_hard_negative(sim, 0, deterministic=False, seed=rng) for _ in range(n)],
                         minlength=5)
    assert counts[0] == 0
    sigma = np.sqrt(n * w * (1 - w))
    assert np.all(np.abs(counts - n * w) <= 3 * sigma + 1e-9)


def test_random_negatives_exclude_positive(rng):
    sim = SimilarityMatrix(np.zeros((6, 6)), 0.1)
    for _ in range(50):
        negs = mine_negatives(sim, "random", rng=rng)
        assert all(n != i for i, n in enumerate(negs))


# -- ITM ----------------------------------------------------------------------------------

def test_itm_separable_limit():
    M = 50.0
    logits = T.Tensor(np.array([[M, -M]] * 3 + [[-M, M]] * 3))
    assert itm_loss_from_logits(logits, [MATCH] * 3 + [1] * 3).item() < 1e-12


def test_itm_zero_head_is_ln2(rng):
    m = VisionLanguageModel(CFG, seed=0)
    m.itm_head.weight.data[...] = 0
    m.itm_head.bias.data[...] = 0
    batch = random_batch(rng)
    assert abs(itm_loss(m, batch, [1, 2, 3, 0]).item() - math.log(2)) < 1e-6


def test_itm_rejects_self_negative(rng):
    m = VisionLanguageModel(CFG, seed=0)
    with pytest.raises(ValueError):
        itm_loss(m, random_batch(rng), [0, 2, 3, 0])


# -- ITG ----------------------------------------------------------------------------------

def test_itg_untrained_near_uniform(rng):
    m = VisionLanguageModel(CFG, seed=0)
    batch = random_batch(rng, B=8)
    assert abs(itg_loss(m, batch).item() - math.log(64)) < 0.5


def test_itg_single_token_reduces_to_first_logits(rng):
    m = VisionLanguageModel(CFG, seed=0)
    batch = Batch(images=rng.normal(size=(3, 8, 16)), captions=[[EOS]] * 3)
    inputs, targets = itg_targets(batch)
    out = m.qformer.encode(m.queries, m.encode_images(batch.images), inputs, MaskMode.ITG)
    direct = T.cross_entropy(out.lm_logits[:, 0, :], [EOS] * 3).item()
    assert abs(itg_loss(m, batch).item() - direct) < 1e-6


def test_itg_memorizes_four_pairs():
    rng = np.random.default_rng(5)
    m = VisionLanguageModel(CFG, seed=5)
    batch = random_batch(rng, B=4, max_len=4)
    params = dict(m.named_parameters())
    cfg = TrainConfig(lr=3e-3, weight_decay=0.0)
    from zvforge.trainer import OptimizerState
    opt = OptimizerState()
    for _ in range(500):
        loss = itg_loss(m, batch)
        loss.backward()
        adamw_step(params, opt, cfg)
        for p in params.values():
            p.grad = None
    assert itg_loss(m, batch).item() < 0.1


# -- joint ---------------------------------------------------------------------------------

def test_joint_loss_composition(rng):
    m = VisionLanguageModel(CFG, seed=2)
    batch = random_batch(rng)
    jl = joint_loss(m, batch)
    img, txt = itc_features(m, batch)
    sim = similarity_matrix(img, txt)
    assert jl.itc.item() == itc_loss(sim, m.temperature).item()
    assert jl.itm.item() == itm_loss(m, batch, jl.negatives).item()
    assert jl.itg.item() == itg_loss(m, batch).item()
    assert jl.total.item() == (jl.itc + jl.itg + jl.itm).item()
    assert jl.negatives == mine_negatives(jl.sim, "hard", True)


def test_joint_loss_too_small(rng):
    with pytest.raises(BatchTooSmallError):
        joint_loss(VisionLanguageModel(CFG), random_batch(rng, B=1))


def test_joint_loss_fuzz():
    rng = np.random.default_rng(123)
    cfg = QFormerConfig(num_layers=1, cross_attention_period=1, decoder_layers=1, hidden_dim=16,
                        num_heads=2, image_patches=4, image_feat_dim=8, decoder_dim=16)
    models = [VisionLanguageModel(cfg, seed=s) for s in range(5)]
    for trial in range(1000):
        batch = random_batch(rng, B=int(rng.integers(2, 5)), cfg=cfg)
        strategy = "hard" if trial % 2 else "random"
        jl = joint_loss(models[trial % 5], batch, deterministic_negatives=trial % 3 != 0,
                        strategy=strategy, rng=rng)
        for v in jl.as_floats().values():
            assert math.isfinite(v) and v >= 0


# -- gradients ------------------------------------------------------------------------------

def _grad_model():
    with T.default_dtype(np.float64):
        return VisionLanguageModel(CFG, seed=8)


LOSS_PARAMS = {
    "itc": ("qformer.", "queries.", "vision.", "temperature"),
    "itg": ("qformer.", "queries.", "vision."),
    "itm": ("qformer.", "queries.", "itm_head.", "vision."),
}


@pytest.mark.parametrize("which", sorted(LOSS_PARAMS))
def test_objective_gradients(which):
    rng = np.random.default_rng(21)
    with T.default_dtype(np.float64):
        m = _grad_model()
        batch = random_batch(rng, B=3)
        img, txt = itc_features(m, batch)
        negs = mine_negatives(SimilarityMatrix(similarity_matrix(img, txt).data, 0.07), "hard")
        fns = {
            "itc": lambda: itc_loss(similarity_matrix(*itc_features(m, batch)), m.temperature),
            "itg": lambda: itg_loss(m, batch),
            "itm": lambda: itm_loss(m, batch, negs),
        }
        params = {n: p for n, p in m.named_parameters() if n.startswith(LOSS_PARAMS[which])}
        bad, checked = [], 0
        for name, idx, a, g in gradient_errors(fns[which], params, h=1e-5, per_param=3, rng=rng):
            checked += 1
            if not grad_ok(a, g):
                bad.append((name, idx, a, g))
        assert checked > 50 and not bad, bad[:5]
