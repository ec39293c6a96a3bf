import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdmkit.denoiser import (
    AdamState,
    Condition,
    DenoiserNet,
    NetConfig,
    OracleDenoiser,
    adam_step,
    downsample_mean,
    load_checkpoint,
    oracle_predict,
    save_checkpoint,
    timestep_embedding,
    upsample_nearest,
)
from pdmkit.errors import BadMagicError, ConfigError, TruncatedError
from pdmkit.schedule import make_schedule

TOY = NetConfig(image_shape=(1, 4, 4), hidden=(12, 10), time_dim=8, learned_variance=True)


def toy_condition(kind, B, rng):
    if kind == "class_label":
        return Condition("class_label", class_id=rng.integers(0, 3, size=B))
    if kind == "low_res":
        return Condition("low_res", low_res=rng.standard_normal((B, 1, 2, 2)))
    return Condition()


def toy_net(kind="none", learned=True, seed=0):
    cfg = NetConfig(
        image_shape=(1, 4, 4), hidden=(12, 10), time_dim=8, learned_variance=learned,
        cond_kind=kind, num_classes=3 if kind == "class_label" else 0, class_dim=5,
    )
    return DenoiserNet(cfg, seed=seed)


# -- oracle -------------------------------------------------------------------


def test_oracle_standard_normal_target():
    s = make_schedule("linear", 100)
    x = np.random.default_rng(0).standard_normal((5, 1, 2, 2))
    t = np.array([1, 10, 50, 99, 100])
    got = oracle_predict(x, t, s, 0.0, 1.0).eps
    np.testing.assert_allclose(got, np.sqrt(1 - s.alpha_bar[t - 1])[:, None, None, None] * x, rtol=1e-14)


def test_oracle_fully_noised_limit():
    s = make_schedule("cosine", 1000)
    x = np.linspace(-3, 3, 9).reshape(1, 1, 3, 3)
    np.testing.assert_allclose(oracle_predict(x, 1000, s, 2.0, 0.5).eps, x, atol=1e-4)


def test_oracle_on_mean_input_is_zero():
    s = make_schedule("linear", 10)
    abar = s.alpha_bar[6]
    x = np.full((1, 1, 2, 2), np.sqrt(abar) * 3.0)
    np.testing.assert_allclose(oracle_predict(x, 7, s, 3.0, 0.25).eps, 0.0, atol=1e-15)


def test_oracle_rejects_nonpositive_variance():
    s = make_schedule("linear", 10)
    with pytest.raises(ConfigError):
        oracle_predict(np.zeros((1, 1, 1, 1)), 1, s, 0.0, 0.0)


def test_oracle_is_the_conditional_mean():
    # regression slope of eps on x_t from simulated joint draws
    s = make_schedule("linear", 100)
    rng = np.random.default_rng(1)
    n, t, mu0, var0 = 200_000, 40, 1.5, 0.3
    x0 = mu0 + np.sqrt(var0) * rng.standard_normal(n)
    eps = rng.standard_normal(n)
    abar = s.alpha_bar[t - 1]
    xt = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
    pred = oracle_predict(xt.reshape(n, 1, 1, 1), t, s, mu0, var0).eps.ravel()
    resid = eps - pred
    assert abs(resid.mean()) < 3 * resid.std() / np.sqrt(n)
    # residual uncorrelated with x_t
    r = np.corrcoef(resid, xt)[0, 1]
    assert abs(r) < 3 / np.sqrt(n)


def test_oracle_beats_training_target_mse():
    s = make_schedule("linear", 100)
    rng = np.random.default_rng(2)
    n = 50_000
    x0 = 0.5 + 0.7 * rng.standard_normal((n, 1, 1, 1))
    eps = rng.standard_normal(x0.shape)
    t = 30
    abar = s.alpha_bar[t - 1]
    xt = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * eps
    oracle_mse = np.mean((oracle_predict(xt, t, s, 0.5, 0.49).eps - eps) ** 2)
    naive_mse = np.mean((np.sqrt(1 - abar) * xt - eps) ** 2)
    assert oracle_mse < naive_mse


def test_oracle_denoiser_counts_calls():
    s = make_schedule("linear", 10)
    o = OracleDenoiser(s)
    o(np.zeros((2, 1, 1, 1)), 3)
    o(np.zeros((2, 1, 1, 1)), 4)
    assert o.calls == 2


# -- network ------------------------------------------------------------------


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(np.array([1, 500]), 32)
    assert e.shape == (2, 32)
    assert np.all(np.abs(e) <= 1.0)


def test_zero_parameters_give_bias_output():
    net = toy_net()
    params = [np.zeros_like(p) for p in net.params]
    params[-1][:16] = 0.25
    zero = DenoiserNet(net.config, params)
    rng = np.random.default_rng(0)
    pred = zero(rng.standard_normal((3, 1, 4, 4)), np.array([1, 5, 9]))
    np.testing.assert_array_equal(pred.eps, 0.25)
    np.testing.assert_array_equal(pred.v, 0.5)


def test_forward_is_deterministic():
    net = toy_net("class_label")
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 1, 4, 4))
    c = Condition("class_label", class_id=[0, 1, 2, 1])
    a = net(x, 7, c)
    b = net(x, 7, c)
    np.testing.assert_array_equal(a.eps, b.eps)
    np.testing.assert_array_equal(a.v, b.v)


def test_default_toy_config_shapes():
    net = DenoiserNet(NetConfig(image_shape=(1, 8, 8), hidden=(128, 128), learned_variance=True))
    x = np.random.default_rng(2).standard_normal((5, 1, 8, 8)) * 50
    pred = net(x, np.arange(1, 6))
    assert pred.eps.shape == x.shape and pred.v.shape == x.shape
    assert np.all((pred.v >= 0) & (pred.v <= 1))
    assert net.config.in_dim == 64 + 32


def test_shape_and_condition_errors():
    net = toy_net("class_label")
    with pytest.raises(ConfigError):
        net(np.zeros((1, 1, 5, 5)), 1, Condition("class_label", class_id=[0]))
    with pytest.raises(ConfigError):
        net(np.zeros((1, 1, 4, 4)), 1, Condition("class_label", class_id=[3]))
    with pytest.raises(ConfigError):
        net(np.zeros((1, 1, 4, 4)), 1)
    with pytest.raises(ConfigError):
        Condition("class_label")
    with pytest.raises(ConfigError):
        NetConfig(image_shape=(1, 5, 5), cond_kind="low_res", low_res_factor=2)


def test_upsample_downsample():
    lr = np.arange(4.0).reshape(1, 1, 2, 2)
    up = upsample_nearest(lr, (4, 4))
    np.testing.assert_array_equal(up[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    np.testing.assert_array_equal(downsample_mean(up, 2), lr)
    with pytest.raises(ConfigError):
        upsample_nearest(np.zeros((1, 1, 3, 3)), (4, 4))


def test_conditioning_changes_output():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 1, 4, 4))
    net = toy_net("class_label")
    a = net(x, 5, Condition("class_label", class_id=[0])).eps
    b = net(x, 5, Condition("class_label", class_id=[2])).eps
    assert np.linalg.norm(a - b) > 0
    net = toy_net("low_res")
    a = net(x, 5, Condition("low_res", low_res=np.zeros((1, 1, 2, 2)))).eps
    b = net(x, 5, Condition("low_res", low_res=np.ones((1, 1, 2, 2)))).eps
    assert np.linalg.norm(a - b) > 0


def loss_and_grads(net, x, t, cond, ge, gv):
    pred, cache = net.forward(x, t, cond)
    loss = np.sum(pred.eps * ge) + (np.sum(pred.v * gv) if gv is not None else 0.0)
    return loss, net.backward(cache, ge, gv)


@pytest.mark.parametrize("kind", ["none", "class_label", "low_res"])
@pytest.mark.parametrize("learned", [True, False])
def test_backward_matches_finite_differences(kind, learned):
    rng = np.random.default_rng(4)
    net = toy_net(kind, learned, seed=1)
    B = 3
    x = rng.standard_normal((B, 1, 4, 4))
    t = np.array([1, 40, 99])
    cond = toy_condition(kind, B, rng)
    ge = rng.standard_normal(x.shape)
    gv = rng.standard_normal(x.shape) if learned else None
    _, grads = loss_and_grads(net, x, t, cond, ge, gv)
    h = 1e-5
    for p, g in zip(net.params, grads):
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            keep = p[i]
            p[i] = keep + h
            up = loss_and_grads(net, x, t, cond, ge, gv)[0]
            p[i] = keep - h
            dn = loss_and_grads(net, x, t, cond, ge, gv)[0]
            p[i] = keep
            fd[i] = (up - dn) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)


def test_zero_upstream_gives_zero_gradients():
    net = toy_net("class_label")
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 1, 4, 4))
    _, grads = loss_and_grads(net, x, 3, Condition("class_label", class_id=[0, 1]), np.zeros_like(x), np.zeros_like(x))
    for g in grads:
        np.testing.assert_array_equal(g, 0.0)


def test_unused_class_row_gets_zero_gradient():
    net = toy_net("class_label")
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 1, 4, 4))
    _, grads = loss_and_grads(net, x, 3, Condition("class_label", class_id=[0, 0]), rng.standard_normal(x.shape), rng.standard_normal(x.shape))
    table = grads[-1]
    assert np.any(table[0] != 0)
    np.testing.assert_array_equal(table[1:], 0.0)


def test_backward_shape_errors():
    net = toy_net()
    _, cache = net.forward(np.zeros((2, 1, 4, 4)), 1)
    with pytest.raises(ConfigError):
        net.backward(cache, np.zeros((2, 1, 4, 3)))
    plain = toy_net(learned=False)
    _, cache = plain.forward(np.zeros((2, 1, 4, 4)), 1)
    with pytest.raises(ConfigError):
        plain.backward(cache, np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 4, 4)))


# -- adam -----------------------------------------------------------------------


def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    new, st_ = adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), lr=0.1)
    np.testing.assert_array_equal(new[0], p[0])
    assert st_.step == 1


def test_adam_first_step_scalar():
    p, g, lr = [np.array([1.0])], [np.array([0.5])], 0.1
    new, state = adam_step(p, g, AdamState.zeros_like(p), lr=lr)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps_hat)
    assert new[0][0] == pytest.approx(1.0 - lr * 0.5 / (0.5 + 1e-8), rel=1e-15)
    assert state.m[0][0] == pytest.approx(0.05) and state.v[0][0] == pytest.approx(0.00025)


def test_adam_does_not_mutate_inputs():
    p = [np.array([1.0])]
    s0 = AdamState.zeros_like(p)
    adam_step(p, [np.array([1.0])], s0)
    assert p[0][0] == 1.0 and s0.step == 0 and s0.m[0][0] == 0.0


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20))
def test_adam_is_deterministic(stream):
    runs = []
    for _ in range(2):
        p = [np.array([0.3, -0.1])]
        state = AdamState.zeros_like(p)
        for g in stream:
            p, state = adam_step(p, [np.array([g, -g])], state)
        runs.append(p[0])
    np.testing.assert_array_equal(runs[0], runs[1])


def test_adam_errors():
    p = [np.zeros(2)]
    with pytest.raises(ConfigError):
        adam_step(p, [np.zeros(3)], AdamState.zeros_like(p))
    with pytest.raises(ConfigError):
        adam_step(p, [np.zeros(2)], AdamState.zeros_like(p), lr=0.0)


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    net = toy_net("class_label")
    p = [x + 0.1 for x in net.params]
    _, adam = adam_step(net.params, p, AdamState.zeros_like(net.params))
    path = tmp_path / "m.pdmw"
    save_checkpoint(path, net, adam, {"step": 3, "note": "x"})
    back, adam2, extra = load_checkpoint(path)
    assert back.config == net.config
    for a, b in zip(back.params, net.params):
        np.testing.assert_array_equal(a, b)
    assert adam2.step == 1
    for a, b in zip(adam2.v, adam.v):
        np.testing.assert_array_equal(a, b)
    assert extra == {"step": 3, "note": "x"}
    save_checkpoint(tmp_path / "again.pdmw", back, adam2, extra)
    assert (tmp_path / "again.pdmw").read_bytes() == path.read_bytes()


def test_checkpoint_without_optional_blocks(tmp_path):
    net = toy_net()
    save_checkpoint(tmp_path / "m.pdmw", net)
    _, adam, extra = load_checkpoint(tmp_path / "m.pdmw")
    assert adam is None and extra is None


def test_checkpoint_malformed(tmp_path):
    net = toy_net()
    path = tmp_path / "m.pdmw"
    save_checkpoint(path, net)
    data = path.read_bytes()
    (tmp_path / "bad.pdmw").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError) as e:
        load_checkpoint(tmp_path / "bad.pdmw")
    assert "XXXX" in str(e.value)
    (tmp_path / "short.pdmw").write_bytes(data[:-5])
    with pytest.raises(TruncatedError) as e:
        load_checkpoint(tmp_path / "short.pdmw")
    assert e.value.offset is not None
