import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from numerla import env as E
from numerla import policy as P


def _obs(rng, masked=False):
    o = np.array([rng.uniform(0, 40), rng.uniform(0, 4), rng.uniform(0, 15), rng.uniform(0, 1.5),
                  rng.integers(0, 3)] * 2, dtype=float)
    if masked:
        o[[E.D_P, E.V_P, E.LIGHT]] = -1.0
    return o


def _params(seed, scale=0.5, arch=P.DEFAULT_ARCH):
    rng = np.random.default_rng(seed)
    return P.PolicyParams(rng.normal(scale=scale, size=arch.n_params), arch)


def test_zero_theta_is_uniform():
    p = P.action_probs(P.PolicyParams(np.zeros(P.DEFAULT_ARCH.n_params)), _obs(np.random.default_rng(0)))
    assert np.allclose(p, 1 / 7, atol=1e-15)


def test_arch_and_init():
    assert P.DEFAULT_ARCH.n_params == 64 * 10 + 64 + 7 * 64 + 7
    a = P.init_params(3)
    i, h, o = a.arch.dims
    assert np.all(np.abs(a.theta) <= 0.05)
    assert np.all(a.theta[h * i: h * i + h] == 0) and np.all(a.theta[-o:] == 0)
    assert a == P.init_params(3) and a.version == P.init_params(3).version
    assert a.version != P.init_params(4).version
    with pytest.raises(ValueError):
        P.PolicyParams(np.zeros(5))


def test_non_finite_params_rejected():
    theta = np.zeros(P.DEFAULT_ARCH.n_params)
    theta[3] = np.nan
    with pytest.raises(P.NumericError):
        P.action_probs(P.PolicyParams(theta), np.zeros(10))


def test_normalization_passes_mask_through():
    o = _obs(np.random.default_rng(1), masked=True)
    x = P.normalize(o)
    assert x[E.D_P] == x[E.V_P] == x[E.LIGHT] == -1.0
    assert x[E.D_C] == pytest.approx(o[E.D_C] / 50.0)
    assert x[E.V_C] == pytest.approx(o[E.V_C] / 15.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), masked=st.booleans(), scale=st.floats(0.01, 5.0))
def test_probs_valid(seed, masked, scale):
    rng = np.random.default_rng(seed)
    p = P.action_probs(_params(seed, scale), _obs(rng, masked))
    assert np.all(p >= 0) and abs(p.sum() - 1) <= 1e-9


def test_probs_lipschitz():
    rng = np.random.default_rng(5)
    ratios = []
    for k in range(20):
        params, o = _params(k), _obs(rng)
        d = rng.normal(size=params.theta.size)
        d /= np.linalg.norm(d)
        p0 = P.action_probs(params, o)
        for eps in (1e-3, 1e-5, 1e-7):
            p1 = P.action_probs(params.with_theta(params.theta + eps * d), o)
            ratios.append(np.abs(p1 - p0).max() / eps)
    # a softmax over bounded tanh features is Lipschitz; the ratio stays bounded as eps shrinks
    assert max(ratios) < 10.0


def test_sample_action_examples():
    rng = np.random.default_rng(0)
    onehot = np.eye(7)[3]
    assert all(P.sample_action(onehot, rng) == 3 for _ in range(200))
    n = 70_000
    draws = np.array([P.sample_action(np.full(7, 1 / 7), rng) for _ in range(n)])
    freq = np.bincount(draws, minlength=7)
    sigma = np.sqrt(n * (1 / 7) * (6 / 7))
    assert np.all(np.abs(freq - n / 7) <= 5 * sigma)
    a = [P.sample_action(np.full(7, 1 / 7), np.random.default_rng(9)) for _ in range(2)]
    assert a[0] == a[1]


def _fd_log_prob(params, o, a, i, h):
    t = params.theta.copy()
    t[i] += h
    up = np.log(P.action_probs(params.with_theta(t), o)[a])
    t[i] -= 2 * h
    dn = np.log(P.action_probs(params.with_theta(t), o)[a])
    return (up - dn) / (2 * h)


def test_log_prob_grad_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for k in range(100):
        params, o, a = _params(100 + k), _obs(rng, masked=k % 4 == 0), int(rng.integers(7))
        g = P.log_prob_grad(params, o, a)
        idx = rng.choice(params.theta.size, 8, replace=False)
        fd = np.array([_fd_log_prob(params, o, a, i, 1e-5) for i in idx])
        err = np.abs(fd - g[idx]) / np.maximum(np.abs(fd), 1e-3)
        worst = max(worst, err.max())
    assert worst <= 1e-4


def test_score_identity():
    rng = np.random.default_rng(2)
    for k in range(10):
        params, o = _params(k), _obs(rng)
        p = P.action_probs(params, o)
        s = sum(p[a] * P.log_prob_grad(params, o, a) for a in range(7))
        assert np.abs(s).max() <= 1e-8
    zero = P.PolicyParams(np.zeros(P.DEFAULT_ARCH.n_params))
    s = sum(P.log_prob_grad(zero, _obs(rng), a) for a in range(7))
    assert np.abs(s).max() <= 1e-12


def test_kl_divergence_hand_oracle():
    rng = np.random.default_rng(4)
    p_old, p_new, o = _params(1), _params(2), _obs(rng)
    p, q = P.action_probs(p_old, o), P.action_probs(p_new, o)
    direct = sum(pi * np.log(pi / qi) for pi, qi in zip(p, q))
    assert P.kl_divergence(p_old, p_new, [o]) == pytest.approx(direct, rel=1e-10)
    states = [_obs(rng) for _ in range(20)]
    assert P.kl_divergence(p_old, p_old, states) == 0.0
    assert P.kl_divergence(p_old, p_new, states) >= 0.0
    with pytest.raises(E.UsageError):
        P.kl_divergence(p_old, p_new, [])


def test_train_config_validation():
    with pytest.raises(E.ConfigError):
        P.TrainConfig(gamma=0.0)
    with pytest.raises(E.ConfigError):
        P.TrainConfig(prior=(0.3, 0.3))
    with pytest.raises(E.ConfigError):
        P.TrainConfig.from_dict({"learning_rate": 1})
    assert P.TrainConfig().gamma == 0.99


def test_train_lr_zero_is_identity():
    init = P.init_params(0)
    out = P.train_meta(P.TrainConfig(episodes=50, lr=0.0, seed=0))
    assert out == init


def test_train_deterministic_and_beats_random():
    short = P.TrainConfig(episodes=100, seed=1)
    assert P.train_meta(short) == P.train_meta(short)
    a = P.train_meta(P.TrainConfig())
    modes = [E.COMPLIANT, E.JAYWALK]
    trained = P.evaluate_returns(a, E.SimConfig(), modes, (0.5, 0.5), episodes=1000)
    random = P.evaluate_returns(None, E.SimConfig(), modes, (0.5, 0.5), episodes=1000)
    assert trained.mean() > random.mean()


def test_rollout_records():
    sim = E.SimConfig(initial_gap_m=15.0)
    obs, acts, rews, info = P.rollout(P.init_params(0), sim, E.JAYWALK, 3, np.random.default_rng(0),
                                      record_states=True)
    assert len(obs) == len(acts) == len(rews) == len(info["states"])
    assert info["done_reason"] in ("Goal", "Collision", "Timeout")
