import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, max_rel_error
from weakseg.core import ValidationError
from weakseg.losses import softmax
from weakseg.model import (NORM_EPS, AdamState, NetSpec, adam_step, backward, count_parameters,
                           forward, init_params, load_checkpoint, norm_forward, save_checkpoint)

SMALL = NetSpec(filters=(3, 5), strides=(1, 2), dropout=0.0, convs_per_stage=1)


def perturbed(spec, seed=0, scale=0.3):
    params = init_params(spec, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for p in params.values():
        p += rng.normal(0, scale, p.shape)
    return params


def test_zero_head_gives_uniform_softmax():
    spec = NetSpec()
    x = np.random.default_rng(0).normal(size=(2, 2, 16, 12))
    scores, _ = forward(init_params(spec, 0), spec, x)
    assert scores.shape == (2, 3, 16, 12)
    np.testing.assert_allclose(softmax(scores, axis=1), 1 / 3, atol=1e-7)


@pytest.mark.parametrize("shape", [(1, 2, 7, 9), (3, 2, 8, 8), (1, 2, 5, 13)])
def test_output_shape_2d(shape):
    params = perturbed(SMALL)
    scores, _ = forward(params, SMALL, np.ones(shape))
    assert scores.shape == (shape[0], SMALL.classes) + shape[2:]


def test_output_shape_3d():
    spec = NetSpec(dimensionality=3, filters=(2, 3), strides=(1, 2), dropout=0.0,
                   convs_per_stage=1)
    scores, _ = forward(init_params(spec, 0), spec, np.ones((1, 2, 3, 6, 5)))
    assert scores.shape == (1, 3, 3, 6, 5)


def test_single_pointwise_stage_is_a_matrix_product():
    spec = NetSpec(filters=(4,), strides=(1,), kernel=1, norm="none", dropout=0.0,
                   convs_per_stage=1)
    params = perturbed(spec, 3)
    x = np.random.default_rng(1).normal(size=(1, 2, 3, 4))
    w1, b1 = params["enc0.conv0.w"][:, :, 0, 0], params["enc0.conv0.b"]
    w2, b2 = params["head.w"][:, :, 0, 0], params["head.b"]
    pix = x[0].reshape(2, -1)
    hidden = w1 @ pix + b1[:, None]
    hidden = np.where(hidden > 0, hidden, 0.01 * hidden)
    expect = (w2 @ hidden + b2[:, None]).reshape(3, 3, 4)
    scores, _ = forward(params, spec, x)
    np.testing.assert_allclose(scores[0], expect, rtol=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ValidationError):
        forward(init_params(SMALL, 0), SMALL, np.ones((1, 3, 8, 8)))
    with pytest.raises(ValidationError):
        forward(init_params(SMALL, 0), SMALL, np.ones((2, 8, 8)))


def test_dropout_needs_generator():
    spec = NetSpec(filters=(2, 3), strides=(1, 2), dropout=0.5)
    with pytest.raises(ValidationError):
        forward(init_params(spec, 0), spec, np.ones((1, 2, 6, 6)), train=True)


def test_zero_upstream_gradient_gives_zero_grads():
    params = perturbed(SMALL)
    scores, cache = forward(params, SMALL, np.random.default_rng(0).normal(size=(1, 2, 6, 6)))
    grads = backward(params, SMALL, cache, np.zeros_like(scores))
    assert set(grads) == set(params)
    assert all(not g.any() for g in grads.values())


@pytest.mark.parametrize("norm", ["instance", "none"])
def test_network_gradient_matches_finite_differences(norm):
    spec = NetSpec(filters=(2, 3), strides=(1, 2), norm=norm, dropout=0.0, convs_per_stage=2)
    params = perturbed(spec, 4)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 6, 6))
    upstream = rng.normal(size=(1, 3, 6, 6))

    def f():
        return float((forward(params, spec, x)[0] * upstream).sum())

    _, cache = forward(params, spec, x)
    grads = backward(params, spec, cache, upstream)
    for name in params:
        assert max_rel_error(grads[name], central_difference(f, params[name])) < 1e-4, name


def test_duplicated_batch_doubles_gradient():
    params = perturbed(SMALL)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 8, 8))
    up = rng.normal(size=(1, 3, 8, 8))
    _, c1 = forward(params, SMALL, x)
    g1 = backward(params, SMALL, c1, up)
    _, c2 = forward(params, SMALL, np.concatenate([x, x]))
    g2 = backward(params, SMALL, c2, np.concatenate([up, up]))
    for name in params:
        np.testing.assert_allclose(g2[name], 2 * g1[name], rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.5, 50))
def test_instance_norm_statistics(seed, scale):
    x = np.random.default_rng(seed).normal(3.0, scale, size=(2, 3, 5, 7))
    y, _ = norm_forward(x, np.ones(3), np.zeros(3))
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0, atol=1e-9)
    v = x.var(axis=(2, 3))
    np.testing.assert_allclose(y.var(axis=(2, 3)), v / (v + NORM_EPS), rtol=1e-9)
    assert np.all(np.abs(y.var(axis=(2, 3)) - 1) < 1e-3)


def test_init_is_deterministic_and_head_is_zero():
    a, b = init_params(NetSpec(), 7), init_params(NetSpec(), 7)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not a["head.w"].any()
    c = init_params(NetSpec(), 8)
    assert not np.array_equal(a["enc0.conv0.w"], c["enc0.conv0.w"])


def test_full_size_presets_are_expressible():
    # same four-stage layout as the reference networks, millions of weights
    assert count_parameters(init_params(NetSpec.dynunet_2d(), 0)) > 1_000_000
    assert NetSpec.dynunet_3d().dimensionality == 3


def test_netspec_validation():
    with pytest.raises(ValueError):
        NetSpec(filters=(8, 16), strides=(1, 2, 2))
    with pytest.raises(ValueError):
        NetSpec(classes=1)
    with pytest.raises(ValueError):
        NetSpec(norm="batch")


def test_adam_zero_gradient_no_decay_is_identity():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState(weight_decay=0.0)
    adam_step(state, p, {"w": np.zeros(3)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([0.5])}
    state = AdamState(weight_decay=0.0)
    adam_step(state, p, {"w": np.array([1.0])})
    # m_hat = v_hat = 1 so the step is lr / (1 + eps)
    np.testing.assert_allclose(p["w"], 0.5 - 1e-3 / (1 + 1e-8), rtol=1e-12)
    assert state.t == 1


def test_adam_decoupled_decay():
    p = {"w": np.array([2.0, -4.0])}
    state = AdamState(lr=0.1, weight_decay=0.5)
    for _ in range(3):
        adam_step(state, p, {"w": np.zeros(2)})
    np.testing.assert_allclose(p["w"], np.array([2.0, -4.0]) * 0.95 ** 3, rtol=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ValidationError):
        adam_step(AdamState(), {"w": np.zeros(3)}, {"w": np.zeros(2)})


def test_checkpoint_roundtrip(tmp_path):
    spec = NetSpec(filters=(2, 4), strides=(1, 2))
    params = init_params(spec, 1)
    save_checkpoint(tmp_path / "m", params, spec)
    loaded, spec2 = load_checkpoint(tmp_path / "m.bin")
    assert spec2 == spec and list(loaded) == list(params)
    for k in params:
        assert loaded[k].dtype == np.float32
        np.testing.assert_array_equal(loaded[k], params[k])
    idx = (tmp_path / "m.index").read_text().splitlines()
    assert idx[0].startswith("enc0.conv0.w\t2x2x3x3\t0")
