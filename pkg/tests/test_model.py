import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equitab import tensor as T
from equitab.errors import CapacityError, ConfigurationError, EmptyContextError
from equitab.model import (
    EquiTabModel,
    ModelConfig,
    attend_components,
    attend_datapoints,
    attention_readout,
    backbone,
    component_mask,
    decode,
    encode,
    self_attention,
)
from equitab.prior import EpisodeBatch, PermutationSpec, PriorConfig, permute_targets, sample_batch, sample_episode
from equitab.tensor import Tensor

SMALL_CFG = ModelConfig(d=16, n_layers=2, n_heads=2, hidden=16, p_max=8, decoder_hidden=8)


def episode(q=3, n=10, m=6, p=3, seed=0):
    return sample_episode(PriorConfig(n_range=(n, n), total=n + m, p_range=(p, p), q_range=(q, q)), seed)


@pytest.fixture(scope="module")
def small32():
    return EquiTabModel.initialize(SMALL_CFG, seed=1, dtype=np.float32)


@pytest.fixture(scope="module")
def small64():
    return EquiTabModel.initialize(SMALL_CFG, seed=1, dtype=np.float64)


def randomize(model, seed=0, scale=0.3):
    """Give every parameter (including V and W_pred) O(1) random values."""
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)
    return model


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d=10, n_heads=4).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(n_layers=3).validate()


def test_shared_vectors():
    model = EquiTabModel.initialize(ModelConfig())
    assert model.params["V"].shape == (64,)
    assert model.params["W_pred"].shape == (64,)
    assert model.params["U"].shape == (64, 16)


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------


def test_encode_one_hot_target_tokens(small64):
    ep = episode(q=4)
    E = encode(ep, small64.params, SMALL_CFG).data[0]
    V = small64.params["V"].data
    for n, k in enumerate(ep.labels):
        for j in range(4):
            np.testing.assert_array_equal(E[n, 1 + j], V if j == k else np.zeros_like(V))


def test_encode_test_slots_hold_prediction_token(small64):
    ep = episode(q=3)
    E = encode(ep, small64.params, SMALL_CFG).data[0]
    np.testing.assert_array_equal(E[ep.N:, 1:], np.broadcast_to(small64.params["W_pred"].data, (ep.M, 3, 16)))


def test_encode_zero_covariates_zero_token(small64):
    ep = episode()
    ep.X[0] = 0
    E = encode(ep, small64.params, SMALL_CFG).data[0]
    np.testing.assert_array_equal(E[0, 0], 0)


def test_encode_permuted_targets_reindex_slots(small64):
    ep = episode(q=5)
    perm = PermutationSpec.random(5, np.random.default_rng(0))
    E = encode(ep, small64.params, SMALL_CFG).data[0]
    Ep = encode(permute_targets(ep, perm), small64.params, SMALL_CFG).data[0]
    np.testing.assert_array_equal(Ep[:, 0], E[:, 0])
    np.testing.assert_array_equal(Ep[:, 1:], E[:, 1:][:, list(perm.sigma)])


def test_encode_rejects_too_many_features(small64):
    with pytest.raises(CapacityError):
        encode(episode(p=9, n=12), small64.params, SMALL_CFG)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_component_mask_literal():
    m = component_mask(4)
    assert m[0].all()
    np.testing.assert_array_equal(m[1:], np.tile([True, False, False, False], (3, 1)))


def test_class_token_attention_depends_on_covariate_only(small64):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 5, 16))
    ablated = x.copy()
    ablated[:, 2:] = 0  # zero every class token except slot 1
    prefix = "layers.0"
    a = self_attention(Tensor(x), small64.params, prefix, 2, mask=component_mask(5)).data
    b = self_attention(Tensor(ablated), small64.params, prefix, 2, mask=component_mask(5)).data
    np.testing.assert_allclose(a[:, 1], b[:, 1], atol=1e-12)


def test_component_attention_slot_equivariant(small32):
    rng = np.random.default_rng(1)
    E = rng.standard_normal((2, 3, 6, 16)).astype(np.float32)
    sigma = [0] + list(1 + rng.permutation(5))
    out = attend_components(Tensor(E), small32.params, "layers.0", 2).data
    out_p = attend_components(Tensor(E[:, :, sigma]), small32.params, "layers.0", 2).data
    np.testing.assert_allclose(out_p, out[:, :, sigma], atol=1e-4)


def test_degenerate_grid_shape(small64):
    E = Tensor(np.random.default_rng(0).standard_normal((1, 1, 2, 16)))
    assert attend_components(E, small64.params, "layers.0", 2).shape == (1, 1, 2, 16)
    assert attend_datapoints(E, small64.params, "layers.1", 2, 1).shape == (1, 1, 2, 16)


def test_datapoint_attention_needs_training_rows(small64):
    with pytest.raises(EmptyContextError):
        attend_datapoints(Tensor(np.zeros((1, 3, 2, 16))), small64.params, "layers.1", 2, 0)


def test_datapoint_single_training_row_takes_all_weight(small64):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 16))
    out = self_attention(Tensor(x), small64.params, "layers.1", 2, key_rows=1).data
    p = {k: v.data for k, v in small64.params.items()}
    value = x[:, :1] @ p["layers.1.wv"] + p["layers.1.bv"]
    expected = value @ p["layers.1.wo"] + p["layers.1.bo"]
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)


def test_backbone_preserves_shape(small64):
    E = encode(episode(), small64.params, SMALL_CFG)
    assert backbone(E, small64.params, SMALL_CFG, 10).shape == E.shape


def test_backbone_dual_precision(small64):
    ep = episode()
    E64 = backbone(encode(ep, small64.params, SMALL_CFG), small64.params, SMALL_CFG, ep.N).data
    m32 = small64.astype(np.float32)
    E32 = backbone(encode(ep, m32.params, SMALL_CFG), m32.params, SMALL_CFG, ep.N).data
    assert np.abs(E64 - E32).max() <= 1e-3


def test_backbone_target_equivariant(small32):
    ep = episode(q=6, seed=4)
    perm = PermutationSpec.random(6, np.random.default_rng(3))
    slots = [0] + [1 + s for s in perm.sigma]
    E = backbone(encode(ep, small32.params, SMALL_CFG), small32.params, SMALL_CFG, ep.N).data
    pe = permute_targets(ep, perm)
    Ep = backbone(encode(pe, small32.params, SMALL_CFG), small32.params, SMALL_CFG, ep.N).data
    np.testing.assert_allclose(Ep, E[:, :, slots], atol=1e-4)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def test_readout_zero_embeddings_gives_column_mean():
    Y = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    out = attention_readout(Tensor(np.zeros((1, 3, 3, 4))), Y, 2).data
    np.testing.assert_allclose(out, np.full((1, 1, 2), 0.5))


def test_readout_single_training_row_copies_target():
    Y = np.array([[[0.0, 0.0, 1.0]]])
    E = np.random.default_rng(0).standard_normal((1, 4, 4, 5))
    np.testing.assert_allclose(attention_readout(Tensor(E), Y, 1).data, np.tile(Y, (1, 3, 1)), atol=0)


def test_decoder_without_correction_is_convex_combination(small64):
    ep = episode(q=4, seed=6)
    params = dict(small64.params)
    for name in ("decoder.w1", "decoder.b1", "decoder.w2", "decoder.b2", "V"):
        params[name] = Tensor(np.zeros_like(params[name].data))
    E = backbone(encode(ep, params, SMALL_CFG), params, SMALL_CFG, ep.N)
    rows = decode(E, ep.Y[None], params, ep.N).data[0]
    assert (rows >= -1e-6).all()
    np.testing.assert_allclose(rows.sum(-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def max_equivariance_error(model, ep, perms):
    base = model(ep)[0]
    worst, agree, total = 0.0, 0, 0
    for perm in perms:
        out = perm.unapply(model(permute_targets(ep, perm))[0])
        worst = max(worst, float(np.abs(out - base).max()))
        agree += int((out.argmax(-1) == base.argmax(-1)).sum())
        total += len(base)
    return worst, agree / total


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-4), (np.float64, 1e-8)])
def test_forward_equivariant_random_params(dtype, tol):
    model = randomize(EquiTabModel.initialize(SMALL_CFG, 3, np.float64), seed=3).astype(dtype)
    rng = np.random.default_rng(0)
    for q in (2, 5, 9, 16):
        ep = episode(q=q, n=2 * q + 4, m=5, seed=q)
        perms = [PermutationSpec.random(q, rng) for _ in range(20)]
        err, agree = max_equivariance_error(model, ep, perms)
        assert err <= tol, (q, err)
        assert agree >= 0.999


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 16), st.integers(0, 10_000))
def test_forward_equivariant_property(q, seed):
    model = EquiTabModel.initialize(SMALL_CFG, seed % 7, np.float64)
    ep = episode(q=q, n=4 * q, m=3, seed=seed)
    perm = PermutationSpec.random(q, np.random.default_rng(seed))
    err, _ = max_equivariance_error(model, ep, [perm])
    assert err <= 1e-8


def test_forward_handles_unconfigured_q(small32):
    ep = episode(q=13, n=30, m=7)
    probs = small32(ep)[0]
    assert probs.shape == (7, 13)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)


def test_train_row_shuffle_invariance(small32):
    ep = episode(q=4, n=20, m=8, seed=2)
    order = np.random.default_rng(0).permutation(ep.N)
    np.testing.assert_allclose(small32(ep.shuffle_train_rows(order)), small32(ep), atol=1e-4)


def test_test_row_drop_independence(small32):
    ep = episode(q=4, n=20, m=8, seed=2)
    keep = [0, 1, 2, 4, 5, 6, 7]
    np.testing.assert_allclose(small32(ep.drop_test_rows([3]))[0], small32(ep)[0][keep], atol=1e-4)


def test_batch_rows_independent(small32):
    cfg = PriorConfig(n_range=(12, 12), total=18, q_range=(3, 3), p_range=(4, 4))
    batch = sample_batch(cfg, 3, 0)
    together = small32(batch)
    for i, ep in enumerate(batch.episodes()):
        np.testing.assert_allclose(small32(ep)[0], together[i], atol=1e-5)


def test_loss_gradient_every_parameter_group():
    from equitab.harness import model_gradcheck

    results = model_gradcheck("equitab")
    assert {name.split(":")[1] for name, _ in results} >= {"U", "V", "W_pred", "decoder.w1"}
    worst = max(results, key=lambda r: r[1])
    assert worst[1] <= 1e-5, worst


def test_no_tape_at_inference(small32):
    assert T.is_grad_enabled()
    small32(episode())
    assert T.is_grad_enabled()


def test_episode_batch_from_mismatched_dims_raises():
    with pytest.raises(Exception):
        EpisodeBatch.from_episodes([episode(q=3), episode(q=4)])
