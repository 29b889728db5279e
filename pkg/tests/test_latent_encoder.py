import dataclasses

import numpy as np
import pytest

from atomizer import autograd as ag
from atomizer import latent_encoder as le
from atomizer.errors import ConfigurationError, NumericFailure, PreconditionError

CFG = le.EncoderConfig(
    num_latents=4, latent_dim=16, num_blocks=3, self_layers_per_block=2, num_heads=4, num_classes=3, mlp_ratio=2
)
D = 10


@pytest.fixture
def params():
    p = le.init_parameters(CFG, D, seed=5, dtype=np.float64)
    rng = np.random.default_rng(0)
    for arr in p.arrays.values():  # move off the near-uniform-attention init
        arr += rng.normal(0.0, 0.3, arr.shape)
    return p


def tokens(n=12, seed=1):
    return np.random.default_rng(seed).uniform(-1, 1, (n, D))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        le.EncoderConfig(latent_dim=10, num_heads=4)
    with pytest.raises(ConfigurationError):
        le.EncoderConfig(prune_p=1.0)
    with pytest.raises(ConfigurationError):
        le.EncoderConfig(num_blocks=0)


def test_init_deterministic():
    a = le.init_parameters(CFG, D, seed=3)
    b = le.init_parameters(CFG, D, seed=3)
    assert a.names() == b.names()
    for k in a.names():
        assert a[k].tobytes() == b[k].tobytes()


def test_init_distribution():
    p = le.init_parameters(le.EncoderConfig(num_latents=64, latent_dim=64, num_heads=4), 40, seed=0)
    for name, arr in p.arrays.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            assert np.all(arr == 1), name
        elif leaf in ("b", "bo", "b1", "b2"):
            assert np.all(arr == 0), name
        else:
            assert np.max(np.abs(arr)) <= 0.04 + 1e-7, name
    w = p["blocks.0.self.0.mlp.w1"]
    assert 0.015 < w.std() < 0.02  # truncation at 2 sigma shrinks the std to ~0.88 * 0.02


def test_weight_sharing_parameter_count():
    a = dataclasses.replace(CFG, num_blocks=4)
    b = dataclasses.replace(CFG, num_blocks=8)
    c = dataclasses.replace(CFG, num_blocks=2)
    n = lambda cfg: le.init_parameters(cfg, D).num_parameters()
    assert n(a) == n(b) == n(c)
    assert n(dataclasses.replace(CFG, share_weights_after_first=False, num_blocks=4)) > n(a)


def test_cross_attention_permutation_invariant(params):
    tok = tokens(20)
    lat = params["latents"]
    perm = np.random.default_rng(9).permutation(20)
    np.testing.assert_allclose(
        le.cross_attention(lat, tok, params), le.cross_attention(lat, tok[perm], params), atol=1e-12
    )


def test_cross_attention_duplicated_tokens(params):
    tok = tokens(7)
    lat = params["latents"]
    np.testing.assert_allclose(
        le.cross_attention(lat, tok, params), le.cross_attention(lat, np.concatenate([tok, tok]), params), atol=1e-12
    )


def test_cross_attention_single_token(params):
    p = params.copy()
    prefix = "blocks.0.cross."
    p.arrays[prefix + "mlp.w2"][:] = 0
    p.arrays[prefix + "mlp.b2"][:] = 0
    tok = tokens(1)
    lat = p["latents"]
    out = le.cross_attention(lat, tok, p)
    P = le.bind(p)
    ctx = ag.layer_norm(le.lift(ag.Tensor(tok), P), P[prefix + "ln_kv.g"], P[prefix + "ln_kv.b"]).data
    value_out = (ctx @ p[prefix + "wv"]) @ p[prefix + "wo"] + p[prefix + "bo"]
    np.testing.assert_allclose(out - lat, np.repeat(value_out, CFG.num_latents, axis=0), atol=1e-12)


def test_self_attention_zero_projections(params):
    p = params.copy()
    prefix = "blocks.0.self.1."
    p.arrays[prefix + "wo"][:] = 0
    p.arrays[prefix + "bo"][:] = 0
    lat = np.random.default_rng(2).normal(size=(CFG.num_latents, CFG.latent_dim))
    out = le.self_attention_layer(lat, p, 0, 1)
    P = le.bind(p)
    mlp = le._mlp(ag.Tensor(lat), P, prefix).data
    np.testing.assert_allclose(out, lat + mlp, atol=1e-12)
    p.arrays[prefix + "mlp.w2"][:] = 0
    p.arrays[prefix + "mlp.b2"][:] = 0
    assert np.array_equal(le.self_attention_layer(lat, p, 0, 1), lat)


def test_self_attention_shape_and_finite(params):
    rng = np.random.default_rng(4)
    for _ in range(20):
        lat = rng.uniform(-10, 10, (CFG.num_latents, CFG.latent_dim))
        out = le.self_attention_layer(lat, params, 1, 0)
        assert out.shape == lat.shape and np.all(np.isfinite(out))


def test_encode_eval_ignores_seed(params):
    tok = tokens(30)
    np.testing.assert_array_equal(le.encode(tok, params, step_seed=1), le.encode(tok, params, step_seed=99))


def test_encode_train_prune_zero_equals_eval(params):
    cfg = dataclasses.replace(CFG, prune_p=0.0)
    tok = tokens(30)
    assert np.array_equal(le.encode(tok, params, cfg, "train", 5), le.encode(tok, params, cfg, "eval"))


def test_encode_train_mode_is_seeded(params):
    tok = tokens(30)
    a = le.encode(tok, params, mode="train", step_seed=1)
    assert np.array_equal(a, le.encode(tok, params, mode="train", step_seed=1))
    assert not np.allclose(a, le.encode(tok, params, mode="train", step_seed=2))


def test_encode_permutation_invariant(params):
    tok = tokens(40)
    perm = np.random.default_rng(3).permutation(40)
    np.testing.assert_allclose(le.encode(tok, params), le.encode(tok[perm], params), atol=1e-10)


def test_encode_accepts_any_cardinality(params):
    for n in (1, 3, 257):
        assert le.encode(tokens(n), params).shape == (CFG.num_latents, CFG.latent_dim)


def test_token_width_checked(params):
    with pytest.raises(PreconditionError):
        le.predict_logits(np.zeros((5, D + 1)), params)


def test_nan_guard_names_block(params):
    p = params.copy()
    p.arrays["blocks.1.self.0.mlp.b2"][0] = np.inf
    with pytest.raises(NumericFailure) as info:
        le.predict_logits(tokens(5), p)
    assert "block 1 self-attention layer 0" in str(info.value)


def test_pool_identical_latents(params):
    row = np.random.default_rng(0).normal(size=CFG.latent_dim)
    lat = np.tile(row, (CFG.num_latents, 1))
    pooled, weights = le.attention_pool(lat, params)
    np.testing.assert_allclose(pooled, le.pool_values(lat, params)[0], atol=1e-12)
    assert abs(weights.sum() - 1) < 1e-9


def test_pool_single_latent():
    cfg = dataclasses.replace(CFG, num_latents=1)
    p = le.init_parameters(cfg, D, seed=0, dtype=np.float64)
    lat = np.random.default_rng(0).normal(size=(1, cfg.latent_dim))
    pooled, weights = le.attention_pool(lat, p)
    assert weights.tolist() == [1.0]
    np.testing.assert_allclose(pooled, le.pool_values(lat, p)[0], atol=1e-12)


def test_classify_affine(params):
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=CFG.latent_dim), rng.normal(size=CFG.latent_dim)
    out = le.classify(a, params)
    assert out.shape == (CFG.num_classes,)
    np.testing.assert_allclose(le.classify(a + b, params), out + le.classify(b, params) - params["head.b"], atol=1e-12)
    z = params.copy()
    z.arrays["head.w"][:] = 0
    z.arrays["head.b"][:] = 0
    assert np.all(le.classify(a, z) == 0)


def test_loss_and_grads_batch_equals_mean(params):
    rng = np.random.default_rng(2)
    tok = rng.uniform(-1, 1, (3, 8, D))
    tgt = (rng.random((3, CFG.num_classes)) < 0.5).astype(float)
    loss, grads = le.loss_and_grads(params, tok, tgt)
    singles = [le.loss_and_grads(params, tok[i], tgt[i]) for i in range(3)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    np.testing.assert_allclose(grads["lift.w"], np.mean([s[1]["lift.w"] for s in singles], axis=0), atol=1e-12)


def test_grad_check_toy():
    cfg, p, tok, tgt = le.toy_instance(0)
    report = le.grad_check(p, tok, tgt, 1e-4, cfg=cfg)
    assert report.passed, report.format()
    assert report.num_checked >= 200
    assert set(report.groups) == set(p.names())


def test_grad_check_head_bias_zero_at_balance():
    cfg, p, tok, _ = le.toy_instance(1)
    p.arrays["head.w"][:] = 0
    p.arrays["head.b"][:] = 0
    _, grads = le.loss_and_grads(p, tok, np.full(cfg.num_classes, 0.5), cfg)
    assert np.max(np.abs(grads["head.b"])) < 1e-8


def test_unused_block_is_dead():
    cfg = dataclasses.replace(CFG, share_weights_after_first=False)
    p = le.init_parameters(cfg, D, seed=0, dtype=np.float64)
    tok, tgt = tokens(6), np.array([1.0, 0.0, 1.0])
    before = le.loss_only(p, tok, tgt, cfg, num_blocks=1)
    p.arrays["blocks.2.cross.wq"] += 1.0
    assert le.loss_only(p, tok, tgt, cfg, num_blocks=1) == before


def test_grad_check_detects_sign_flip():
    cfg, p, tok, tgt = le.toy_instance(0)

    def flip(grads):
        grads["blocks.0.cross.wv"] = -grads["blocks.0.cross.wv"]

    report = le.grad_check(p, tok, tgt, 1e-4, cfg=cfg, grad_hook=flip)
    assert not report.passed
    assert report.worst[0].name == "blocks.0.cross.wv"
    d = report.to_dict()
    assert d["worst"][0]["name"] == "blocks.0.cross.wv" and d["max_rel_error"] > 1


def test_float32_matches_float64(params):
    tok = tokens(16)
    tgt = np.array([1.0, 0.0, 0.0])
    l64, g64 = le.loss_and_grads(params, tok, tgt)
    l32, g32 = le.loss_and_grads(params.astype(np.float32), tok, tgt)
    assert l32 == pytest.approx(l64, rel=1e-5)
    for k in g64:
        assert g32[k].dtype == np.float32
        np.testing.assert_allclose(g32[k], g64[k], atol=1e-4 * max(1.0, np.abs(g64[k]).max()))
