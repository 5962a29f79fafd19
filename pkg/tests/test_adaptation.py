import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zvforge import tensor as T
from zvforge.adaptation import (PARAMETER_GROUPS, LoRAAdapter, Profile, Stage, apply_trainable, attach_lora,
                                group_of, lora_forward, merge, resolve_trainable)
from zvforge.model import LoRAConfig, VisionLanguageModel
from zvforge.nn import Linear
from zvforge.qformer import ConfigError, MaskMode, QFormerConfig

EXPECTED = {
    (Stage.PRETRAIN, Profile.BASE): {"qformer", "queries", "itm_head", "temperature"},
    (Stage.PRETRAIN, Profile.CHAT): {"qformer", "queries", "itm_head", "temperature"},
    (Stage.MULTITASK, Profile.BASE): {"projection"},
    (Stage.MULTITASK, Profile.CHAT): {"projection", "lora_vision", "lora_decoder"},
    (Stage.SCENE_AWARE, Profile.BASE): {"qformer", "queries", "projection"},
    (Stage.SCENE_AWARE, Profile.CHAT): {"qformer", "queries", "projection", "lora_vision", "lora_decoder"},
}


def adapter_with_random_b(d_in, d_out, r, rng, alpha=16.0):
    ad = LoRAAdapter(d_in, d_out, r, alpha, rng)
    ad.B.data = rng.normal(size=ad.B.shape).astype(ad.B.data.dtype)
    return ad


def test_zero_init_identity_bit_exact(rng):
    base = Linear(12, 7, rng)
    ad = LoRAAdapter(12, 7, 4, 16.0, rng)
    assert not ad.B.data.any()
    x = T.Tensor(rng.normal(size=(5, 12)).astype(np.float32))
    assert lora_forward(base, ad, x).data.tobytes() == base(x).data.tobytes()


def test_hand_arithmetic(rng):
    with T.default_dtype(np.float64):
        base = Linear(2, 2, rng)
        ad = LoRAAdapter(2, 2, 1, 1.0, rng)
        ad.A.data = np.array([[1.0, 0.0]])
        ad.B.data = np.array([[1.0], [0.0]])
        x = T.Tensor(np.array([2.0, 5.0]))
        np.testing.assert_array_equal(lora_forward(base, ad, x).data, base(x).data + np.array([2.0, 0.0]))


def test_gradients_reach_adapter_only(rng):
    base = Linear(6, 4, rng)
    ad = adapter_with_random_b(6, 4, 2, rng)
    lora_forward(base, ad, T.Tensor(rng.normal(size=(3, 6)))).sum().backward()
    assert base.weight.grad is None and base.bias.grad is None
    assert ad.A.grad is not None and ad.B.grad is not None


def test_dimension_mismatch(rng):
    with pytest.raises(T.DimensionError):
        lora_forward(Linear(6, 4, rng), LoRAAdapter(5, 4, 2, 1.0, rng), T.Tensor(np.zeros((1, 6))))
    with pytest.raises(ValueError):
        LoRAAdapter(4, 3, 4, 1.0, rng)


def test_merge_zero_b_is_identity(rng):
    base = Linear(8, 5, rng)
    merged = merge(base, LoRAAdapter(8, 5, 2, 16.0, rng))
    np.testing.assert_array_equal(merged.weight.data, base.weight.data)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_merge_delta_rank(r, rng):
    for _ in range(10):
        ad = adapter_with_random_b(6, 5, r, rng)
        delta = ad.delta_weight()
        s = np.linalg.svd(delta, compute_uv=False)
        assert int((s > 1e-9 * s[0]).sum()) <= r


def test_merge_equivalence_100_inputs(rng):
    base = Linear(16, 12, rng)
    ad = adapter_with_random_b(16, 12, 4, rng)
    merged = merge(base, ad)
    worst = 0.0
    for _ in range(100):
        x = T.Tensor(rng.normal(size=(16,)).astype(np.float32))
        worst = max(worst, float(np.abs(merged(x).data - lora_forward(base, ad, x).data).max()))
    assert worst <= 1e-5


@pytest.mark.parametrize("stage,profile", list(itertools.product(Stage, Profile)))
def test_resolve_trainable_table(stage, profile):
    ts = resolve_trainable(stage, profile)
    assert set(ts.open) == EXPECTED[(stage, profile)]
    assert resolve_trainable(stage.value, profile.value) == ts
    assert set(ts.open) <= set(PARAMETER_GROUPS)
    assert "vision" not in ts.open and "decoder" not in ts.open


def test_resolve_trainable_lora_restricted_to_scene():
    ts = resolve_trainable(Stage.MULTITASK, Profile.CHAT, lora_stages=[Stage.SCENE_AWARE])
    assert set(ts.open) == {"projection"}


def test_resolve_trainable_unknown():
    with pytest.raises(ValueError):
        resolve_trainable("warmup", "base")
    with pytest.raises(ValueError):
        resolve_trainable("pretrain", "pro")


def test_group_of():
    assert group_of("qformer.layers.0.self_attn.q.weight") == "qformer"
    assert group_of("lora.vision.A") == "lora_vision"
    assert group_of("lora.decoder.layers.0.attn.q.B") == "lora_decoder"
    with pytest.raises(KeyError):
        group_of("mystery.weight")


def test_model_adapters_named_with_prefix_and_start_inert(rng):
    m = VisionLanguageModel(QFormerConfig(), seed=0)
    im = rng.normal(size=(2, 8, 16))
    before = m.encode_images(im).data.copy()
    prefix = T.Tensor(rng.normal(size=(1, 4, 32)).astype(np.float32))
    dec_before = m.decoder(prefix, np.array([[1, 5, 6]])).data.copy()
    m.attach_adapters(LoRAConfig())
    names = [n for n, _ in m.named_parameters() if n.startswith("lora.")]
    assert names and all(group_of(n) in ("lora_vision", "lora_decoder") for n in names)
    assert m.encode_images(im).data.tobytes() == before.tobytes()
    assert m.decoder(prefix, np.array([[1, 5, 6]])).data.tobytes() == dec_before.tobytes()


def test_apply_trainable_marks_frozen():
    m = VisionLanguageModel(QFormerConfig(), seed=0)
    m.attach_adapters(LoRAConfig())
    open_ = apply_trainable(m.named_parameters(), resolve_trainable(Stage.MULTITASK, Profile.CHAT))
    for name, p in m.named_parameters():
        assert p.requires_grad == (group_of(name) in {"projection", "lora_vision", "lora_decoder"})
        assert (name in open_) == p.requires_grad


def test_lora_config_validation():
    with pytest.raises(ConfigError):
        LoRAConfig(rank=0)
    with pytest.raises(ConfigError):
        LoRAConfig(targets=("q", "z"))
    assert not LoRAConfig().enabled_for("scene", "base")
    assert LoRAConfig().enabled_for("multitask", "chat")
    assert not LoRAConfig(stages=("scene",)).enabled_for("multitask", "chat")


@given(st.integers(1, 4), st.floats(0.5, 32.0))
def test_merge_equivalence_property(r, alpha):
    rng = np.random.default_rng(r)
    with T.default_dtype(np.float64):
        base = Linear(6, 5, rng)
        ad = adapter_with_random_b(6, 5, r, rng, alpha)
        x = T.Tensor(rng.normal(size=(3, 6)))
        np.testing.assert_allclose(merge(base, ad)(x).data, lora_forward(base, ad, x).data, atol=1e-9)
