import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, logsumexp

from qbm_forge.data import synthetic_bimodal
from qbm_forge.errors import ValidationError
from qbm_forge.metrics import histogram, kl_divergence
from qbm_forge.rbm import (
    RbmParameters,
    TrainConfig,
    cd_update,
    conditional_probabilities,
    exact_gradient,
    free_energy,
    gibbs_chain,
    load_rbm,
    log_likelihood,
    lr_at,
    rbm_energy,
    sample_rbm,
    save_rbm,
    train_rbm,
    visible_distribution,
)


def random_rbm(nv, nh, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return RbmParameters(rng.normal(0, scale, (nv, nh)), rng.normal(0, scale, nv), rng.normal(0, scale, nh))


def all_bits(n):
    return np.array(list(itertools.product([0, 1], repeat=n)), dtype=float)


def enumerated_joint(params):
    """``p(v, h)`` table indexed ``[v_index, h_index]`` by brute force."""
    V, H = all_bits(params.n_visible), all_bits(params.n_hidden)
    E = np.array([[-(params.visible_bias @ v) - params.hidden_bias @ h - v @ params.weights @ h for h in H]
                  for v in V])
    logp = -E - logsumexp(-E)
    return np.exp(logp)


def test_energy_examples():
    p = RbmParameters([[2.0]], [1.0], [1.0])
    assert rbm_energy(p, [1], [1]) == pytest.approx(-4.0)
    assert rbm_energy(random_rbm(3, 2, 0), [0, 0, 0], [0, 0]) == 0
    with pytest.raises(ValidationError):
        rbm_energy(p, [1, 0], [1])
    with pytest.raises(ValidationError):
        rbm_energy(p, [2], [1])


@pytest.mark.parametrize("nv,nh", [(2, 2), (4, 3), (6, 6)])
def test_enumerated_joint_normalizes(nv, nh):
    params = random_rbm(nv, nh, nv)
    V, H = all_bits(nv), all_bits(nh)
    E = rbm_energy(params, np.repeat(V, len(H), axis=0), np.tile(H, (len(V), 1)))
    assert np.exp(logsumexp(-E) - logsumexp(-E)) == 1.0
    np.testing.assert_allclose(enumerated_joint(params).sum(), 1.0, atol=1e-12)
    # free energy reproduces the hidden sum
    np.testing.assert_allclose(free_energy(params, V), -logsumexp(-E.reshape(len(V), len(H)), axis=1),
                               atol=1e-12)


def test_conditionals_trivial():
    zero = RbmParameters(np.zeros((3, 2)), np.zeros(3), np.zeros(2))
    assert np.all(conditional_probabilities(zero, [1, 0, 1]) == 0.5)
    assert np.all(conditional_probabilities(zero, [1, 1], "visible") == 0.5)
    p = RbmParameters([[np.log(3) - 0.2]], [0.0], [0.2])
    assert conditional_probabilities(p, [1])[0] == pytest.approx(0.75, abs=1e-15)
    with pytest.raises(ValidationError):
        conditional_probabilities(zero, [1, 0])
    with pytest.raises(ValidationError):
        conditional_probabilities(zero, [1, 0, 1], "sideways")


def test_conditionals_match_enumerated_joint():
    params = random_rbm(3, 2, 1)
    joint = enumerated_joint(params)
    V, H = all_bits(3), all_bits(2)
    for vi, v in enumerate(V):
        cond = joint[vi] / joint[vi].sum()
        marg = np.array([cond[H[:, j] == 1].sum() for j in range(2)])
        np.testing.assert_allclose(conditional_probabilities(params, v), marg, atol=1e-12)
        # the product form reproduces every joint conditional entry
        ph = conditional_probabilities(params, v)
        prod = np.prod(np.where(H == 1, ph, 1 - ph), axis=1)
        np.testing.assert_allclose(prod, cond, atol=1e-12)
    for hi, h in enumerate(H):
        cond = joint[:, hi] / joint[:, hi].sum()
        marg = np.array([cond[V[:, i] == 1].sum() for i in range(3)])
        np.testing.assert_allclose(conditional_probabilities(params, h, "visible"), marg, atol=1e-12)


def test_gibbs_saturated_and_reproducible():
    p = RbmParameters(np.zeros((4, 2)), np.full(4, 50.0), np.zeros(2))
    out = gibbs_chain(p, np.zeros(4), 3, np.random.default_rng(0))
    assert out.tolist() == [1, 1, 1, 1]
    q = random_rbm(4, 3, 2)
    a = gibbs_chain(q, np.zeros((5, 4)), 10, np.random.default_rng(1))
    b = gibbs_chain(q, np.zeros((5, 4)), 10, np.random.default_rng(1))
    assert np.array_equal(a, b)
    with pytest.raises(ValidationError):
        gibbs_chain(q, np.zeros(4), 0, np.random.default_rng(0))


def hand_cd1(params, v, eta, rng):
    """Scripted CD-1 on one sample: mean-field h+, sampled h-, sampled v-, mean-field h-."""
    W, a, b = params.weights, params.visible_bias, params.hidden_bias
    h_pos = expit(b + v @ W)
    h_draw = (rng.random(len(b)) < h_pos).astype(float)
    p_v = expit(a + W @ h_draw)
    v_neg = (rng.random(len(a)) < p_v).astype(float)
    h_neg = expit(b + v_neg @ W)
    W2 = W + eta * (np.outer(v, h_pos) - np.outer(v_neg, h_neg))
    return W2, a + eta * (v - v_neg), b + eta * (h_pos - h_neg)


@pytest.mark.parametrize("seed", range(5))
def test_cd1_matches_hand_trace(seed):
    params = random_rbm(4, 3, 10 + seed)
    v = np.array([1.0, 0.0, 1.0, 1.0])
    got = cd_update(params, v[None, :], 1, 0.1, np.random.default_rng(seed))
    W, a, b = hand_cd1(params, v, 0.1, np.random.default_rng(seed))
    np.testing.assert_allclose(got.weights, W, atol=1e-15)
    np.testing.assert_allclose(got.visible_bias, a, atol=1e-15)
    np.testing.assert_allclose(got.hidden_bias, b, atol=1e-15)


def test_cd_batch_averages():
    params = random_rbm(3, 2, 0)
    batch = np.array([[1, 0, 1], [0, 1, 1]], dtype=float)
    rng = np.random.default_rng(0)
    got = cd_update(params, batch, 1, 0.2, rng)
    # replay the batch step by hand: rows share one draw per layer
    rng = np.random.default_rng(0)
    h_pos = expit(params.hidden_bias + batch @ params.weights)
    h = (rng.random(h_pos.shape) < h_pos).astype(float)
    pv = expit(params.visible_bias + h @ params.weights.T)
    v_neg = (rng.random(pv.shape) < pv).astype(float)
    h_neg = expit(params.hidden_bias + v_neg @ params.weights)
    np.testing.assert_allclose(got.weights, params.weights + 0.1 * (batch.T @ h_pos - v_neg.T @ h_neg), atol=1e-15)
    with pytest.raises(ValidationError):
        cd_update(params, np.zeros((0, 3)), 1, 0.1, rng)


def test_exact_gradient_zero_at_model_equilibrium():
    params = random_rbm(3, 2, 4)
    p_v = visible_distribution(params)
    V = all_bits(3)
    # data distributed as the model marginal: the expected gradient vanishes
    grads = [exact_gradient(params, v[None, :]) for v in V]
    W = sum(p * g.weights for p, g in zip(p_v, grads))
    a = sum(p * g.visible_bias for p, g in zip(p_v, grads))
    b = sum(p * g.hidden_bias for p, g in zip(p_v, grads))
    assert np.abs(W).max() <= 1e-12 and np.abs(a).max() <= 1e-12 and np.abs(b).max() <= 1e-12


def test_exact_gradient_matches_finite_differences():
    params = random_rbm(4, 3, 5)
    data = np.random.default_rng(0).integers(0, 2, (20, 4)).astype(float)
    g = exact_gradient(params, data)
    h = 1e-6
    fd = []
    for name in ("weights", "visible_bias", "hidden_bias"):
        base = getattr(params, name)
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up, dn = base.copy(), base.copy()
            up[idx] += h
            dn[idx] -= h
            fields = {k: getattr(params, k) for k in ("weights", "visible_bias", "hidden_bias")}
            lp = log_likelihood(RbmParameters(**{**fields, name: up}), data)
            lm = log_likelihood(RbmParameters(**{**fields, name: dn}), data)
            num[idx] = (lp - lm) / (2 * h)
        fd.append(num.ravel())
    fd = np.concatenate(fd)
    an = np.concatenate([g.weights.ravel(), g.visible_bias.ravel(), g.hidden_bias.ravel()])
    assert np.linalg.norm(an - fd) <= 1e-6 * np.linalg.norm(fd)


def test_exact_gradient_ascent_on_random_models():
    improved = 0
    for seed in range(100):
        params = random_rbm(4, 3, 1000 + seed)
        data = np.random.default_rng(seed).integers(0, 2, (10, 4)).astype(float)
        g = exact_gradient(params, data)
        eta = 1e-3
        nxt = RbmParameters(params.weights + eta * g.weights, params.visible_bias + eta * g.visible_bias,
                            params.hidden_bias + eta * g.hidden_bias)
        improved += log_likelihood(nxt, data) > log_likelihood(params, data)
    assert improved >= 99


def test_lr_schedule():
    c = TrainConfig(eta0=1e-3, t_decay=5000, T_decay=1000)
    assert lr_at(c, 0) == 1e-3 and lr_at(c, 5000) == 1e-3
    assert lr_at(c, 6000) == pytest.approx(5e-4)
    assert lr_at(c, 7000) == pytest.approx(2.5e-4, rel=1e-15)
    with pytest.raises(ValidationError):
        lr_at(c, -1)


@given(st.integers(0, 100_000), st.integers(0, 100_000))
def test_lr_non_increasing(t1, t2):
    c = TrainConfig(eta0=0.1, t_decay=100, T_decay=50)
    lo, hi = sorted((t1, t2))
    assert lr_at(c, hi) <= lr_at(c, lo)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(minibatch=0)
    with pytest.raises(ValidationError):
        TrainConfig(eta0=0.0)


def test_train_zero_epochs_and_empty():
    params = random_rbm(8, 4, 0)
    data = np.zeros((5, 8))
    out, hist = train_rbm(data, TrainConfig(epochs=0), params)
    assert out is params and hist == []
    with pytest.raises(ValidationError):
        train_rbm(np.zeros((0, 8)), TrainConfig(epochs=1), params)


def _histogram_kl(ds, params, seed):
    samples = sample_rbm(params, 5000, thermalization=500, spacing=5, rng=seed)
    lo, hi = ds.codec.mins[0], ds.codec.maxs[0]
    p = histogram(ds.values()[0], 32, (lo, hi)).probabilities
    q = histogram(ds.values(samples.T)[0], 32, (lo, hi)).probabilities
    return kl_divergence(p, q)


def test_training_reduces_kl_and_is_reproducible():
    ds = synthetic_bimodal()
    config = TrainConfig(epochs=200, eta0=0.05, t_decay=100, T_decay=50, seed=3, kl_every=100)
    params, hist = train_rbm(ds, config, n_hidden=8, evaluate=lambda p: _histogram_kl(ds, p, 1))
    init = RbmParameters.initialize(8, 8, np.random.default_rng(3))
    assert _histogram_kl(ds, params, 1) < _histogram_kl(ds, init, 1)
    assert [h["epoch"] for h in hist if "kl" in h] == [100, 200]
    again, _ = train_rbm(ds, config, n_hidden=8)
    assert np.array_equal(again.weights, params.weights)


def test_resume_continues_epoch_numbering():
    data = np.random.default_rng(0).integers(0, 2, (30, 4))
    config = TrainConfig(epochs=3, eta0=0.1, t_decay=2, T_decay=1)
    params, hist = train_rbm(data, config, n_hidden=2)
    _, hist2 = train_rbm(data, config, params, start_epoch=3)
    assert [h["epoch"] for h in hist2] == [4, 5, 6]
    assert hist2[0]["lr"] == pytest.approx(0.1 * 2 ** -2)


def test_sampling_clamp_and_spacing():
    params = random_rbm(5, 3, 6)
    out = sample_rbm(params, 50, thermalization=10, rng=0, clamp=(range(5), [1, 0, 1, 0, 1]))
    assert np.all(out == [1, 0, 1, 0, 1])
    part = sample_rbm(params, 200, thermalization=10, rng=0, clamp=([0, 3], [1, 1]))
    assert np.all(part[:, [0, 3]] == 1)
    dense = sample_rbm(params, 60, thermalization=7, spacing=1, rng=5)
    sparse = sample_rbm(params, 20, thermalization=7, spacing=3, rng=5)
    assert np.array_equal(dense[2::3], sparse)
    with pytest.raises(ValidationError):
        sample_rbm(params, 10, clamp=([7], [1]))
    with pytest.raises(ValidationError):
        sample_rbm(params, 10, spacing=0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 4))
def test_clamp_never_violated(seed, k):
    rng = np.random.default_rng(seed)
    params = random_rbm(6, 3, seed, scale=2.0)
    idx = rng.choice(6, k, replace=False)
    bits = rng.integers(0, 2, k)
    out = sample_rbm(params, 100, thermalization=5, rng=seed, clamp=(idx, bits))
    assert np.all(out[:, idx] == bits)


def test_long_chain_marginal_matches_enumeration():
    params = random_rbm(3, 2, 7)
    out = sample_rbm(params, 200_000, thermalization=100, rng=0)
    idx = out @ (1 << np.arange(2, -1, -1))
    emp = np.bincount(idx, minlength=8) / len(idx)
    exact = enumerated_joint(params).sum(axis=1)
    np.testing.assert_allclose(visible_distribution(params), exact, atol=1e-12)
    assert kl_divergence(emp, exact) <= 1e-3


def test_model_round_trip(tmp_path):
    params = random_rbm(4, 3, 8)
    config = TrainConfig(epochs=7, eta0=0.02)
    save_rbm(params, tmp_path / "m.json", config, 7)
    back, cfg, epochs = load_rbm(tmp_path / "m.json")
    assert np.array_equal(back.weights, params.weights)
    assert np.array_equal(back.visible_bias, params.visible_bias)
    assert cfg == config and epochs == 7
    (tmp_path / "bad.json").write_text('{"schema": "other"}')
    with pytest.raises(ValidationError):
        load_rbm(tmp_path / "bad.json")
