"""Analytic noise-prediction oracles and the trainable conv net."""

import numpy as np
import pytest

from cascade_inversion import (
    ConvNet,
    ConvNetDenoiser,
    DeltaOracle,
    DenoiserInput,
    GaussianOracle,
    PromptEmbedding,
    build_linear_schedule,
    predict_eps,
    predict_eps_with_vjp,
    q_sample,
    timestep_embedding,
    train_vjp,
)

SCHED = build_linear_schedule()


def _emb(vec, pid=0):
    return PromptEmbedding(np.asarray(vec, dtype=np.float64), pid)


def _zero_emb(width=32):
    return _emb(np.zeros(width))


# ---------------------------------------------------------------------------
# delta oracle


def test_delta_oracle_recovers_exact_noise():
    """Diffusing the anchor with known noise must return that noise exactly."""
    rng = np.random.default_rng(0)
    anchor = rng.uniform(-1, 1, (8, 8, 3))
    oracle = DeltaOracle(SCHED, anchor)
    for t in (0, 250, 500, 980):
        noise = rng.standard_normal(anchor.shape)
        z = q_sample(SCHED, anchor, t, noise)
        out = predict_eps(oracle, DenoiserInput(z, t, _zero_emb()))
        assert np.allclose(out, noise, atol=1e-9)


def test_delta_oracle_is_affine_in_state():
    rng = np.random.default_rng(1)
    anchor = rng.uniform(-1, 1, (4, 4, 3))
    oracle = DeltaOracle(SCHED, anchor)
    z = rng.standard_normal(anchor.shape)
    v = rng.standard_normal(anchor.shape)
    t = 400
    base = predict_eps(oracle, DenoiserInput(z, t, _zero_emb()))
    moved = predict_eps(oracle, DenoiserInput(z + v, t, _zero_emb()))
    scale = 1.0 / np.sqrt(1.0 - SCHED.alpha_bar(t))
    assert np.allclose(moved - base, scale * v, atol=1e-9)


def test_delta_oracle_multi_anchor_selects_nearest_embedding():
    rng = np.random.default_rng(2)
    anchors = rng.uniform(-1, 1, (3, 4, 4, 2))
    embeds = np.eye(3, 5)
    oracle = DeltaOracle(SCHED, anchors, embeds, cond_width=5)
    t = 300
    noise = rng.standard_normal((4, 4, 2))
    for m in range(3):
        z = q_sample(SCHED, anchors[m], t, noise)
        # query near the m-th stored embedding
        query = embeds[m] + 0.01 * rng.standard_normal(5)
        out = predict_eps(oracle, DenoiserInput(z, t, _emb(query)))
        assert np.allclose(out, noise, atol=1e-9)


def test_delta_oracle_validation():
    anchor = np.zeros((4, 4, 3))
    with pytest.raises(ValueError):
        DeltaOracle(SCHED, np.zeros((2, 4, 4, 3)))  # several anchors, no embeddings
    oracle = DeltaOracle(SCHED, anchor)
    with pytest.raises(ValueError):
        predict_eps(oracle, DenoiserInput(np.zeros((4, 4, 3)), -1, _zero_emb()))
    with pytest.raises(ValueError):
        predict_eps(oracle, DenoiserInput(np.zeros((5, 5, 3)), 10, _zero_emb()))
    with pytest.raises(ValueError):
        predict_eps(oracle, DenoiserInput(np.zeros((4, 4, 3)), 10, _zero_emb(7)))


def test_delta_oracle_vjp_matches_affine_slope():
    rng = np.random.default_rng(3)
    anchor = rng.uniform(-1, 1, (4, 4, 1))
    oracle = DeltaOracle(SCHED, anchor)
    z = rng.standard_normal(anchor.shape)
    up = rng.standard_normal(anchor.shape)
    t = 600
    res = predict_eps_with_vjp(oracle, DenoiserInput(z, t, _zero_emb()), up)
    scale = 1.0 / np.sqrt(1.0 - SCHED.alpha_bar(t))
    assert np.allclose(res.grad_wrt_state, up * scale, atol=1e-12)
    assert np.array_equal(res.grad_wrt_cond_embedding, np.zeros(32))


# ---------------------------------------------------------------------------
# gaussian oracle


def _posterior_eps_quadrature(z, t, mu, sigma):
    """Coordinatewise numerical posterior mean for a N(mu, sigma^2 I) prior.

    Independent of the closed form under test: integrates prior x likelihood
    on a wide grid per coordinate.
    """
    ab = SCHED.alpha_bar(t)
    rem = 1.0 - ab
    xs = np.linspace(-14.0, 14.0, 6001)
    out = np.empty_like(z)
    for idx in np.ndindex(z.shape):
        lik = np.exp(-((z[idx] - np.sqrt(ab) * xs) ** 2) / (2.0 * rem))
        pri = np.exp(-((xs - mu[idx]) ** 2) / (2.0 * sigma**2))
        weight = lik * pri
        x0_hat = np.trapezoid(xs * weight, xs) / np.trapezoid(weight, xs)
        out[idx] = (z[idx] - np.sqrt(ab) * x0_hat) / np.sqrt(rem)
    return out


def test_gaussian_oracle_matches_quadrature_posterior():
    rng = np.random.default_rng(4)
    mu = rng.uniform(-1, 1, (2, 2, 2))
    for sigma, t in ((0.8, 500), (0.3, 100), (1.2, 900)):
        oracle = GaussianOracle(SCHED, mu, sigma)
        z = rng.standard_normal(mu.shape) * 1.5
        got = predict_eps(oracle, DenoiserInput(z, t, _zero_emb()))
        want = _posterior_eps_quadrature(z, t, mu, sigma)
        assert np.allclose(got, want, atol=1e-8), (sigma, t)


def test_gaussian_oracle_small_sigma_approaches_delta():
    rng = np.random.default_rng(5)
    mu = rng.uniform(-1, 1, (3, 3, 3))
    gauss = GaussianOracle(SCHED, mu, 1e-6)
    delta = DeltaOracle(SCHED, mu)
    z = rng.standard_normal(mu.shape)
    t = 500
    a = predict_eps(gauss, DenoiserInput(z, t, _zero_emb()))
    b = predict_eps(delta, DenoiserInput(z, t, _zero_emb()))
    assert np.allclose(a, b, atol=1e-9)


def test_gaussian_oracle_vjp_scale():
    rng = np.random.default_rng(6)
    mu = rng.uniform(-1, 1, (3, 3, 1))
    oracle = GaussianOracle(SCHED, mu, 0.7)
    z = rng.standard_normal(mu.shape)
    up = rng.standard_normal(mu.shape)
    t = 440
    res = predict_eps_with_vjp(oracle, DenoiserInput(z, t, _zero_emb()), up)
    # finite difference of the affine map is exact up to rounding
    h = 1e-4
    v = rng.standard_normal(mu.shape)
    f_plus = predict_eps(oracle, DenoiserInput(z + h * v, t, _zero_emb()))
    f_minus = predict_eps(oracle, DenoiserInput(z - h * v, t, _zero_emb()))
    lhs = float(np.sum(up * (f_plus - f_minus) / (2 * h)))
    rhs = float(np.sum(res.grad_wrt_state * v))
    assert lhs == pytest.approx(rhs, rel=1e-8)


def test_gaussian_oracle_validation():
    with pytest.raises(ValueError):
        GaussianOracle(SCHED, np.zeros((4, 4, 3)), 0.0)
    with pytest.raises(ValueError):
        GaussianOracle(SCHED, np.zeros((4, 4)), 1.0)


# ---------------------------------------------------------------------------
# conv net


def _small_net(cond_image_channels=0, seed=0):
    return ConvNetDenoiser.create(
        2, cond_image_channels=cond_image_channels, hidden=(4, 4, 4), seed=seed
    )


def test_convnet_zero_params_zero_output():
    model = _small_net()
    model.net.set_flat_params(np.zeros(model.net.num_params))
    rng = np.random.default_rng(7)
    inp = DenoiserInput(rng.standard_normal((6, 6, 2)), 123, _emb(rng.standard_normal(4)))
    assert np.array_equal(predict_eps(model, inp), np.zeros((6, 6, 2)))


def test_convnet_param_round_trip():
    model = _small_net(seed=3)
    flat = model.net.get_flat_params()
    other = _small_net(seed=4)
    assert not np.array_equal(other.net.get_flat_params(), flat)
    other.net.set_flat_params(flat)
    assert np.array_equal(other.net.get_flat_params(), flat)
    rng = np.random.default_rng(8)
    inp = DenoiserInput(rng.standard_normal((5, 5, 2)), 77, _emb(rng.standard_normal(4)))
    assert np.array_equal(predict_eps(model, inp), predict_eps(other, inp))


def test_convnet_deterministic_in_seed():
    a = _small_net(seed=11)
    b = _small_net(seed=11)
    assert np.array_equal(a.net.get_flat_params(), b.net.get_flat_params())


def _fd_directional(f, x, v, h=1e-6):
    return (f(x + h * v) - f(x - h * v)) / (2.0 * h)


def test_convnet_state_vjp_matches_finite_differences():
    rng = np.random.default_rng(9)
    model = _small_net(cond_image_channels=2, seed=1)
    z = rng.standard_normal((5, 5, 2))
    cond_img = rng.standard_normal((5, 5, 2))
    emb = _emb(rng.standard_normal(4))
    up = rng.standard_normal(z.shape)
    res = predict_eps_with_vjp(model, DenoiserInput(z, 250, emb, cond_img), up)
    for _ in range(3):
        v = rng.standard_normal(z.shape)
        fd = _fd_directional(
            lambda s: float(
                np.sum(up * predict_eps(model, DenoiserInput(s, 250, emb, cond_img)))
            ),
            z,
            v,
        )
        assert fd == pytest.approx(float(np.sum(res.grad_wrt_state * v)), rel=1e-5)


def test_convnet_cond_vjp_matches_finite_differences():
    rng = np.random.default_rng(10)
    model = _small_net(seed=2)
    z = rng.standard_normal((5, 5, 2))
    vec = rng.standard_normal(4)
    up = rng.standard_normal(z.shape)
    res = predict_eps_with_vjp(model, DenoiserInput(z, 500, _emb(vec)), up)
    for _ in range(3):
        v = rng.standard_normal(4)
        fd = _fd_directional(
            lambda c: float(
                np.sum(up * predict_eps(model, DenoiserInput(z, 500, _emb(c))))
            ),
            vec,
            v,
        )
        assert fd == pytest.approx(float(np.sum(res.grad_wrt_cond_embedding * v)), rel=1e-5)


def test_convnet_param_grad_matches_finite_differences():
    rng = np.random.default_rng(11)
    model = _small_net(seed=5)
    z = rng.standard_normal((4, 4, 2))
    emb = _emb(rng.standard_normal(4))
    up = rng.standard_normal(z.shape)
    inp = DenoiserInput(z, 333, emb)
    grad = train_vjp(model, inp, up)
    assert grad.shape == (model.net.num_params,)
    flat0 = model.net.get_flat_params()

    def loss_at(flat):
        model.net.set_flat_params(flat)
        val = float(np.sum(up * predict_eps(model, inp)))
        model.net.set_flat_params(flat0)
        return val

    for _ in range(3):
        v = rng.standard_normal(flat0.shape)
        fd = (loss_at(flat0 + 1e-6 * v) - loss_at(flat0 - 1e-6 * v)) / 2e-6
        assert fd == pytest.approx(float(np.sum(grad * v)), rel=1e-4)


def test_convnet_linearize_agrees_with_vjp():
    rng = np.random.default_rng(12)
    model = _small_net(seed=6)
    z = rng.standard_normal((5, 5, 2))
    emb = _emb(rng.standard_normal(4))
    inp = DenoiserInput(z, 111, emb)
    lin = model.predict_linearize(inp)
    up = rng.standard_normal(z.shape)
    ref = predict_eps_with_vjp(model, inp, up)
    g_state, g_cond = lin.vjp(up)
    assert np.array_equal(lin.output, ref.output)
    assert np.allclose(g_state, ref.grad_wrt_state, atol=1e-12)
    assert np.allclose(g_cond, ref.grad_wrt_cond_embedding, atol=1e-12)


def test_convnet_requires_cond_image_when_configured():
    model = _small_net(cond_image_channels=2)
    z = np.zeros((4, 4, 2))
    with pytest.raises(ValueError):
        predict_eps(model, DenoiserInput(z, 10, _emb(np.zeros(4))))
    with pytest.raises(ValueError):
        predict_eps(
            model, DenoiserInput(z, 10, _emb(np.zeros(4)), np.zeros((2, 2, 2)))
        )


def test_convnet_float_cast_round_trip_preserves_float64_params():
    net = ConvNet(2, 0, (4, 4, 4), seed=0)
    before = net.get_flat_params().copy()
    net.cast(np.float32)
    assert net.dtype == np.float32
    net.cast(np.float64)
    # f64 -> f32 loses precision; params must stay finite and close
    after = net.get_flat_params()
    assert after.dtype == np.float64
    assert np.allclose(after, before, atol=1e-6)


def test_timestep_embedding_properties():
    emb = timestep_embedding(np.array([0, 5, 999]), 8)
    assert emb.shape == (3, 8)
    assert np.all(np.isfinite(emb))
    assert not np.allclose(emb[0], emb[1])
    again = timestep_embedding(np.array([0, 5, 999]), 8)
    assert np.array_equal(emb, again)


def test_upstream_shape_validation():
    model = _small_net()
    z = np.zeros((4, 4, 2))
    inp = DenoiserInput(z, 5, _emb(np.zeros(4)))
    with pytest.raises(ValueError):
        predict_eps_with_vjp(model, inp, np.zeros((3, 3, 2)))
    with pytest.raises(ValueError):
        train_vjp(model, inp, np.zeros((3, 3, 2)))
