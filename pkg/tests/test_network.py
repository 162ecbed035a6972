import numpy as np
import pytest

from hashsdf import network as net
from hashsdf.encoding import EncoderConfig

SMALL = EncoderConfig(levels=3, features=2, table_size=2 ** 8)


def small_model(seed=0, hidden=8, table_scale=0.3):
    m = net.init_model(SMALL, hidden, seed)
    rng = np.random.default_rng(seed + 100)
    m.tables[:] = rng.uniform(-table_scale, table_scale, m.tables.shape)
    m.b1[:] = rng.normal(0, 0.5, m.b1.shape)
    m.bc[:] = rng.normal(0, 0.5, 3)
    return m


def _interior_points(rng, n, config=SMALL, margin=1e-3):
    """Random points at least ``margin`` voxels away from every grid plane."""
    out = []
    res = config.resolutions()
    while len(out) < n:
        x = rng.uniform(0.02, 0.98, 3)
        u = x[None, :] * res[:, None]
        if np.all(np.abs(u - np.rint(u)) > margin):
            out.append(x)
    return np.array(out)


def test_bias_only_network_is_constant():
    m = net.init_model(SMALL, 8, 0)
    for k in ("W1", "b1", "W2", "Wc", "bc"):
        getattr(m, k)[:] = 0
    m.b2[:] = 0.3
    x = np.random.default_rng(0).uniform(size=(10, 3))
    np.testing.assert_array_equal(net.forward(m, x)[0], 0.3)


def test_zero_tables_give_constant_output_and_zero_gradient():
    m = small_model()
    m.tables[:] = 0
    d, g, rgb = net.forward_with_spatial_grad(m, np.random.default_rng(1).uniform(size=(10, 3)))
    assert np.ptp(d) == 0 and np.ptp(rgb, axis=0).max() == 0
    assert not g.any()


def test_forward_is_pure():
    m = small_model()
    x = np.array([0.3, 0.6, 0.1])
    a, b = net.forward(m, x), net.forward(m, x)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_spatial_gradient_matches_finite_differences():
    m = small_model(2)
    x = _interior_points(np.random.default_rng(3), 100, margin=1e-2)
    _, g, _ = net.forward_with_spatial_grad(m, x)
    h = 1e-6
    fd = np.stack([(net.forward(m, x + h * e)[0] - net.forward(m, x - h * e)[0]) / (2 * h) for e in np.eye(3)], 1)
    rel = np.linalg.norm(g - fd, axis=1) / np.maximum(np.linalg.norm(fd, axis=1), 1e-12)
    assert rel.max() < 1e-4


def test_one_hidden_unit_chain_rule_by_hand():
    cfg = EncoderConfig(levels=1, features=1, table_size=2 ** 16, base_resolution=14)
    m = net.init_model(cfg, 1, 0)
    m.tables[:] = np.random.default_rng(4).uniform(-1, 1, m.tables.shape)
    m.W1[:] = 0.7
    m.b1[:] = -0.2
    m.W2[:] = 1.3
    x = np.array([0.31, 0.52, 0.77])
    from hashsdf import encoding as enc
    e = enc.encode_with_jacobian(m.tables, cfg, x)
    z = 0.7 * e.feature[0] - 0.2
    expect = 1.3 / (1 + np.exp(-z)) * 0.7 * e.jacobian[0]
    np.testing.assert_allclose(net.forward_with_spatial_grad(m, x)[1], expect, rtol=1e-14)


def test_softplus_is_stable_and_correct():
    z = np.array([-800.0, -30, -1, 0, 1, 30, 800])
    h, s = net.softplus(z.copy())
    np.testing.assert_allclose(h[1:-1], np.log1p(np.exp(z[1:-1])), rtol=1e-14)
    assert h[0] == 0.0 and h[-1] == 800.0
    from scipy.special import expit
    np.testing.assert_allclose(s, expit(z), rtol=1e-14, atol=0)


def _linear_loss(m, x, du, ru, gu):
    d, g, rgb = net.forward_with_spatial_grad(m, x)
    return float(du @ d + np.sum(ru * rgb) + np.sum(gu * g))


def test_zero_upstream_gives_zero_gradients():
    m = small_model()
    cache = net.evaluate(m, np.random.default_rng(0).uniform(size=(5, 3)))
    g, _ = net.backward(m, cache, np.zeros(5), np.zeros((5, 3)), np.zeros((5, 3)))
    assert all(not v.any() for v in g.values())


def test_loss_equal_to_d_has_unit_b2_gradient():
    m = small_model()
    cache = net.evaluate(m, np.array([0.2, 0.4, 0.6]), spatial_grad=False)
    g, _ = net.backward(m, cache, d_up=np.ones(1))
    assert g["b2"][0] == 1.0


def test_backward_missing_cache_or_jacobian():
    m = small_model()
    with pytest.raises(ValueError):
        net.backward(m, None, np.ones(1))
    cache = net.evaluate(m, np.array([0.2, 0.4, 0.6]), spatial_grad=False)
    with pytest.raises(ValueError, match="spatial gradient"):
        net.backward(m, cache, grad_up=np.ones((1, 3)))


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    m = small_model(seed)
    rng = np.random.default_rng(seed + 7)
    x = _interior_points(rng, 32)
    du, ru, gu = rng.standard_normal(32), rng.standard_normal((32, 3)), rng.standard_normal((32, 3))
    grads, _ = net.backward(m, net.evaluate(m, x), du, ru, gu)
    h = 1e-5
    for name in net.PARAM_NAMES:
        p = getattr(m, name)
        flat = p.reshape(-1)
        if name == "tables":
            cand = np.flatnonzero(grads["tables"].reshape(-1))
            picks = rng.choice(cand, 30, replace=False)
        else:
            picks = np.arange(flat.size)
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            lp = _linear_loss(m, x, du, ru, gu)
            flat[i] = old - h
            lm = _linear_loss(m, x, du, ru, gu)
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            an = grads[name].reshape(-1)[i]
            assert abs(an - fd) <= 1e-3 * abs(fd) + 1e-6, (name, i, an, fd)


def test_layer_stats_symmetric_psd():
    m = small_model()
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(64, 3))
    _, st = net.backward(m, net.evaluate(m, x), rng.standard_normal(64), rng.standard_normal((64, 3)),
                         rng.standard_normal((64, 3)), capture=True)
    assert set(st.A) == {"geo1", "geo2", "color"}
    # value use plus three derivative uses per sample on the two geometry layers
    assert st.counts["geo1"] == 4 * 64 and st.counts["color"] == 64
    for name in st.A:
        for M in (st.A[name], st.G[name]):
            np.testing.assert_allclose(M, M.T, atol=1e-12)
            assert np.linalg.eigvalsh(M).min() > -1e-10


def test_init_model_defaults():
    a = net.init_model(seed=3)
    b = net.init_model(seed=3)
    for k in net.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(a, k), getattr(b, k))
    # W1 64x40, b1, W2 1x64, b2, Wc 3x40, bc
    assert a.n_params(heads_only=True) == 64 * 40 + 64 + 64 + 1 + 3 * 40 + 3
    d = net.forward(a, np.array([0.5, 0.5, 0.5]))[0]
    assert 0.0 <= d <= 0.3
    assert abs(d - 0.1) < 1e-3


def test_divergence_is_detected():
    m = small_model()
    m.W2[0, 0] = np.nan
    with pytest.raises(net.DivergenceError):
        net.forward(m, np.array([0.5, 0.5, 0.5]))
