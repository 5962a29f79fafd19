import numpy as np
import pytest
from hypothesis import given, strategies as st

from zvforge import tensor as T
from zvforge.model import VisionLanguageModel
from zvforge.nn import Linear
from zvforge.qformer import (PAD, ConfigError, MaskMode, QFormerConfig, ShapeError, VocabularyError,
                             build_attention_mask, decode, project_queries)

from oracles import grad_ok, gradient_errors


def closed_form_mask(mode, Q, T_):
    N = Q + T_
    m = np.zeros((N, N), dtype=bool)
    for i in range(N):
        for j in range(N):
            qi, qj = i < Q, j < Q
            if mode in (MaskMode.ITM, MaskMode.INSTRUCTION):
                m[i, j] = True
            elif mode is MaskMode.ITC:
                m[i, j] = qi == qj
            else:
                m[i, j] = (qi and qj) or (not qi and (qj or j <= i))
    return m


@pytest.fixture(scope="module")
def model():
    return VisionLanguageModel(QFormerConfig(), seed=3)


def image(rng, cfg=QFormerConfig()):
    return rng.normal(size=(cfg.image_patches, cfg.image_feat_dim))


def test_mask_examples():
    assert build_attention_mask(MaskMode.ITC, 2, 2).astype(int).tolist() == \
        [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]
    assert build_attention_mask(MaskMode.ITG, 2, 2).astype(int).tolist() == \
        [[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]]
    assert build_attention_mask(MaskMode.ITM, 1, 1).astype(int).tolist() == [[1, 1], [1, 1]]


def test_mask_errors():
    with pytest.raises(ValueError, match="text"):
        build_attention_mask(MaskMode.ITG, 2, 0)
    with pytest.raises(ValueError):
        build_attention_mask(MaskMode.ITC, 0, 2)


@given(st.sampled_from(list(MaskMode)), st.integers(1, 6), st.integers(0, 6))
def test_mask_algebra(mode, Q, T_):
    if mode is MaskMode.ITG and T_ == 0:
        return
    m = build_attention_mask(mode, Q, T_)
    np.testing.assert_array_equal(m, closed_form_mask(mode, Q, T_))
    assert m.any(axis=1).all()
    if mode is MaskMode.ITC:
        assert (m == m.T).all()
    if mode in (MaskMode.ITM, MaskMode.INSTRUCTION):
        assert m.all()
    if mode is MaskMode.ITG:
        text = m[Q:, Q:]
        assert (text == np.tril(np.ones_like(text))).all()


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        QFormerConfig(hidden_dim=30, num_heads=4)
    with pytest.raises(ConfigError):
        QFormerConfig(num_queries=0)
    with pytest.raises(ConfigError, match="cross_attention_period"):
        QFormerConfig(num_layers=2, cross_attention_period=3)


def test_cross_layers_follow_period():
    cfg = QFormerConfig(num_layers=4, cross_attention_period=2)
    assert cfg.cross_layers() == [0, 2]
    m = VisionLanguageModel(cfg)
    assert [hasattr(layer, "cross_attn") for layer in m.qformer.layers] == [True, False, True, False]


def test_forward_shapes_without_text(model, rng):
    out = model.qformer.forward(model.queries, image(rng))
    assert out.query_states.shape == (4, 32) and out.text_states is None


def test_forward_text_states_present_with_text(model, rng):
    out = model.qformer.forward(model.queries, image(rng), [5, 6, 2], MaskMode.ITG)
    assert out.text_states.shape == (3, 32) and out.lm_logits.shape == (3, 64)


@pytest.mark.parametrize("patches", [4, 64, 256])
def test_compression_contract(patches, rng):
    cfg = QFormerConfig(image_patches=patches)
    m = VisionLanguageModel(cfg, seed=1)
    out = m.qformer.forward(m.queries, image(rng, cfg), [7, 8])
    assert out.query_states.shape == (cfg.num_queries, cfg.hidden_dim)


def test_full_scale_shape(rng):
    cfg = QFormerConfig.full_scale()
    m = VisionLanguageModel(cfg, seed=0)
    out = m.qformer.forward(m.queries, rng.normal(size=(256, 768)).astype(np.float32))
    assert out.query_states.shape == (64, 768)


def test_image_shape_error(model):
    with pytest.raises(ShapeError):
        model.qformer.forward(model.queries, np.zeros((7, 16)))


def test_unknown_token(model, rng):
    with pytest.raises(VocabularyError):
        model.qformer.forward(model.queries, image(rng), [64])


def test_text_too_long(model, rng):
    with pytest.raises(ShapeError):
        model.qformer.forward(model.queries, image(rng), [5] * 33)


def test_itc_vs_itm_queries_differ(model, rng):
    im = image(rng)
    a = model.qformer.forward(model.queries, im, [5, 6, 7], MaskMode.ITC).query_states.data
    b = model.qformer.forward(model.queries, im, [5, 6, 7], MaskMode.ITM).query_states.data
    assert np.abs(a - b).max() > 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_itc_text_invisibility(seed):
    rng = np.random.default_rng(seed)
    m = VisionLanguageModel(QFormerConfig(), seed=seed)
    im = image(rng)
    toks = rng.integers(4, 64, size=int(rng.integers(1, 10))).tolist()
    with_text = m.qformer.forward(m.queries, im, toks, MaskMode.ITC).query_states.data
    without = m.qformer.forward(m.queries, im, None, MaskMode.ITC).query_states.data
    assert with_text.tobytes() == without.tobytes()


def test_itg_causality(model, rng):
    im = image(rng)
    toks = [5, 6, 7, 8, 9]
    base = model.qformer.forward(model.queries, im, toks, MaskMode.ITG).text_states.data
    for t in range(len(toks) - 1):
        alt = list(toks)
        alt[t + 1:] = [40] * (len(toks) - t - 1)
        other = model.qformer.forward(model.queries, im, alt, MaskMode.ITG).text_states.data
        assert base[:t + 1].tobytes() == other[:t + 1].tobytes()


def test_padding_does_not_change_batched_rows(model, rng):
    ims = np.stack([image(rng), image(rng)])
    tokens = np.array([[5, 6, 2, PAD], [5, 6, 7, 2]])
    out = model.qformer.encode(model.queries, ims, tokens, MaskMode.ITM).query_states.data
    single = model.qformer.forward(model.queries, ims[0], [5, 6, 2], MaskMode.ITM).query_states.data
    np.testing.assert_allclose(out[0], single, atol=1e-6)


def test_forward_deterministic(rng):
    im = image(rng)
    a = VisionLanguageModel(QFormerConfig(), seed=9)
    b = VisionLanguageModel(QFormerConfig(), seed=9)
    oa = a.qformer.forward(a.queries, im, [5, 6], MaskMode.ITM).query_states.data
    ob = b.qformer.forward(b.queries, im, [5, 6], MaskMode.ITM).query_states.data
    assert oa.tobytes() == ob.tobytes()


# -- instruction-aware ---------------------------------------------------------------

def test_instructions_change_queries(model, rng):
    im = image(rng)
    a = model.qformer.forward_instructed(model.queries, im, [17, 3]).query_states.data
    b = model.qformer.forward_instructed(model.queries, im, [18, 23, 3]).query_states.data
    assert np.abs(a - b).max() > 1e-6


def test_pad_only_instruction_equals_itm(model, rng):
    im = image(rng)
    a = model.qformer.forward_instructed(model.queries, im, [PAD])
    b = model.qformer.forward(model.queries, im, [PAD], MaskMode.ITM)
    assert a.query_states.data.tobytes() == b.query_states.data.tobytes()
    assert a.text_states.data.tobytes() == b.text_states.data.tobytes()


def test_instructed_shape(model, rng):
    out = model.qformer.forward_instructed(model.queries, image(rng), [17, 18, 3])
    assert out.query_states.shape == (4, 32)


def test_empty_instruction_points_to_forward(model, rng):
    with pytest.raises(ValueError, match="forward"):
        model.qformer.forward_instructed(model.queries, image(rng), [])


# -- projection and decoder ------------------------------------------------------------

def test_projection_identity_and_zero(rng):
    fc = Linear(32, 32, rng)
    fc.weight.data[...] = np.eye(32)
    fc.bias.data[...] = 0
    x = T.Tensor(rng.normal(size=(4, 32)).astype(np.float32))
    np.testing.assert_array_equal(project_queries(fc, x).data, x.data)
    fc.weight.data[...] = 0
    assert not project_queries(fc, x).data.any()


def test_projection_dimension_mismatch(rng):
    with pytest.raises(ShapeError):
        project_queries(Linear(16, 32, rng), T.Tensor(np.zeros((4, 32))))


def test_projection_gradient_through_decoder(rng):
    with T.default_dtype(np.float64):
        m = VisionLanguageModel(QFormerConfig(), seed=4)
        q = T.Tensor(rng.normal(size=(4, 32)))
        toks = [1, 5, 6, 7]

        def loss():
            return T.cross_entropy(decode(m.decoder, project_queries(m.projection, q), toks), [5, 6, 7, 2])

        params = dict(m.projection.named_parameters())
        bad = [e for e in gradient_errors(loss, params, per_param=40) if not grad_ok(e[2], e[3])]
        assert not bad


def test_decode_causality(model, rng):
    prefix = T.Tensor(rng.normal(size=(4, 32)).astype(np.float32))
    toks = [1, 5, 6, 7, 8]
    base = decode(model.decoder, prefix, toks).data
    for t in range(len(toks) - 1):
        alt = list(toks)
        alt[t + 1] = 50
        out = decode(model.decoder, prefix, alt).data
        assert base[:t + 1].tobytes() == out[:t + 1].tobytes()


def test_decode_prefix_sensitivity(model, rng):
    data = rng.normal(size=(4, 32)).astype(np.float32)
    base = decode(model.decoder, T.Tensor(data), [1, 5]).data
    for row in range(4):
        bumped = data.copy()
        bumped[row] += 0.5
        assert np.abs(decode(model.decoder, T.Tensor(bumped), [1, 5]).data[0] - base[0]).max() > 0


def test_decode_empty_and_errors(model, rng):
    prefix = T.Tensor(rng.normal(size=(4, 32)).astype(np.float32))
    assert decode(model.decoder, prefix, []).shape == (0, 64)
    with pytest.raises(VocabularyError):
        decode(model.decoder, prefix, [1, 99])
    with pytest.raises(ShapeError):
        decode(model.decoder, T.Tensor(np.zeros((3, 32))), [1])
