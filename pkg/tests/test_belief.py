import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from numerla import env as E
from numerla.belief import (Belief, ModeTransitionModel, ObservationWindow, init_belief,
                            mode_likelihood, start_distribution, update_belief)

CFG = E.SimConfig(initial_gap_m=15.0, light_cycle=(5, 40, 15))
TIMID = E.Mode("Timid", "Compliant", yellow_go_prob=0.0)


def _ped_obs(t, y, v, cfg=CFG, x_c=-10.0):
    s = E.WorldState(x_c=x_c, v_c=5.0, y_p=y, v_p=v, light=E.light_at(t, cfg.light_cycle), t=t,
                     walking_started=y > 0)
    return E.observe(s, None, cfg)


def _trajectory(start, T, cfg=CFG):
    """Observations t = 0..T-1 of a pedestrian starting at ``start`` (-1 = never)."""
    step = cfg.walk_speed * cfg.dt
    out = []
    for t in range(T):
        if start < 0 or t <= start:
            y, v = 0.0, 0.0
        else:
            y = min((t - start) * step, cfg.lane_width)
            v = cfg.walk_speed if y < cfg.lane_width else 0.0
        out.append(_ped_obs(t, y, v, cfg))
    return out


def _window(observations, size=5, cfg=CFG):
    w = ObservationWindow(cfg, size)
    for t, o in enumerate(observations):
        w.push(t, o)
    return w


def test_init_belief_examples():
    m = ModeTransitionModel.stationary((E.COMPLIANT, E.JAYWALK))
    assert np.allclose(init_belief(m).probs, [0.5, 0.5])
    m = ModeTransitionModel.stationary((E.COMPLIANT, E.JAYWALK), prior=[1.0, 0.0])
    b = init_belief(m)
    assert np.array_equal(b.probs, [1.0, 0.0]) and abs(b.probs.sum() - 1) < 1e-12


@pytest.mark.parametrize("p_z,rho", [([[0.5, 0.6], [0, 1]], [0.5, 0.5]), (np.eye(2), [0.7, 0.7]),
                                     (np.eye(3), [0.5, 0.5])])
def test_invalid_model(p_z, rho):
    m = ModeTransitionModel((E.COMPLIANT, E.JAYWALK), p_z, rho)
    with pytest.raises(E.ConfigError):
        init_belief(m)


def test_masked_window_is_uninformative():
    far = E.SimConfig(initial_gap_m=35.0, light_cycle=(5, 40, 15))
    _, obs = E.reset(far, E.COMPLIANT, 0)
    w = _window([obs, obs], cfg=far)
    assert mode_likelihood(E.COMPLIANT, w) == 1.0
    assert mode_likelihood(E.JAYWALK, w) == 1.0


def test_start_on_red():
    obs = _trajectory(start=2, T=4)  # step 2 is Red
    w = _window(obs)
    assert mode_likelihood(E.COMPLIANT, w) == 0.0
    assert mode_likelihood(E.JAYWALK, w) > 0.0


def test_start_on_yellow_compliant():
    obs = _trajectory(start=10, T=12)
    w = _window(obs)
    assert mode_likelihood(E.COMPLIANT, w) == pytest.approx(0.1, abs=1e-12)
    # each extra Yellow step without a start costs a factor 0.9
    w = _window(_trajectory(start=-1, T=12))
    assert mode_likelihood(E.COMPLIANT, w) == pytest.approx(0.9, abs=1e-12)


def test_update_examples():
    m = ModeTransitionModel.stationary((TIMID, E.COMPLIANT))
    w = _window(_trajectory(start=10, T=12))
    assert mode_likelihood(TIMID, w) == 0.0
    b = update_belief(Belief([0.5, 0.5], m.mode_ids), w, m)
    assert np.allclose(b.probs, [0.0, 1.0], atol=1e-15)
    far = E.SimConfig(initial_gap_m=35.0)
    _, obs = E.reset(far, E.COMPLIANT, 0)
    b0 = Belief([0.3, 0.7], m.mode_ids)
    b = update_belief(b0, _window([obs, obs], cfg=far), m)
    assert np.allclose(b.probs, b0.probs)


def test_degenerate_evidence_falls_back():
    m = ModeTransitionModel.stationary((TIMID, E.COMPLIANT))
    w = _window(_trajectory(start=2, T=4))  # Red start: impossible for both
    b = update_belief(Belief([0.4, 0.6], m.mode_ids), w, m)
    assert b.degenerate and np.allclose(b.probs, [0.4, 0.6])


def _direct_likelihood(mode, observations, cfg=CFG):
    """Sum over every start step of P(start) * [trajectory reproduces the observations]."""
    rng_free = np.zeros(cfg.h_max + 1)
    if mode.behavior == "Jaywalk":
        lo, hi = mode.jaywalk_start
        rng_free[lo: hi + 1] = 1.0 / (hi - lo + 1)
    else:
        alive = 1.0
        for s in range(cfg.h_max):
            light = E.light_at(s, cfg.light_cycle)
            h = {E.RED: 0.0, E.YELLOW: mode.yellow_go_prob, E.GREEN: 1.0}[light]
            rng_free[s] = alive * h
            alive *= 1 - h
        rng_free[-1] = alive
    T = len(observations)
    total = 0.0
    for s in range(cfg.h_max + 1):
        if rng_free[s] == 0:
            continue
        traj = _trajectory(s if s < cfg.h_max else -1, T, cfg)
        if all(np.allclose(a[:5], b[:5]) for a, b in zip(traj, observations)):
            total += rng_free[s]
    return total


@pytest.mark.parametrize("start", [-1, 3, 7, 8, 9])
def test_recursive_matches_full_bayes(start):
    cfg = E.SimConfig(initial_gap_m=15.0, light_cycle=(3, 4, 3))
    modes = (E.COMPLIANT, E.Mode("J", "Jaywalk", 0.0, (0, 12)))
    m = ModeTransitionModel.stationary(modes, prior=[0.6, 0.4])
    obs = _trajectory(start, 10, cfg)
    w = ObservationWindow(cfg, 5)
    b = init_belief(m)
    for t, o in enumerate(obs):
        w.push(t, o)
        b = update_belief(b, w, m)
    joint = np.array([0.6, 0.4]) * [_direct_likelihood(z, obs, cfg) for z in modes]
    assert np.abs(b.probs - joint / joint.sum()).max() <= 1e-10


def test_jaywalk_identified_after_red_start():
    m = ModeTransitionModel.stationary((E.COMPLIANT, E.JAYWALK))
    for seed in range(20):
        sim = E.SimConfig(initial_gap_m=15.0, light_cycle=(5, 40, 15))
        mode = E.Mode("Jaywalk", "Jaywalk", 0.0, (0, 3))
        state, obs = E.reset(sim, mode, seed)
        rng = E.step_rng(seed)
        w = ObservationWindow(sim, 5)
        w.push(0, obs)
        b = update_belief(init_belief(m), w, m)
        started_at = None
        for _ in range(20):
            res = E.step(state, 4, mode, rng, sim)
            state = res.next_state
            w.push(state.t, res.obs)
            b = update_belief(b, w, m)
            if state.walking_started and started_at is None:
                started_at = state.t
            if started_at is not None and state.t - started_at >= 10:
                break
        assert b["Jaywalk"] >= 0.99


@settings(max_examples=50, deadline=None)
@given(start=st.integers(-1, 60), p=st.floats(0.01, 0.99), T=st.integers(2, 60),
       mix=st.floats(0.0, 0.2))
def test_update_invariants(start, p, T, mix):
    p_z = np.array([[1 - mix, mix], [mix, 1 - mix]])
    m = ModeTransitionModel((E.COMPLIANT, E.JAYWALK), p_z, [p, 1 - p])
    w = ObservationWindow(CFG, 5)
    b = init_belief(m)
    for t, o in enumerate(_trajectory(start, T)):
        w.push(t, o)
        nb = update_belief(b, w, m)
        assert np.all(nb.probs >= 0) and abs(nb.probs.sum() - 1) <= 1e-9
        if mix == 0.0:
            assert np.all(nb.probs[b.probs == 0] == 0)
        b = nb
    assert len(w) <= 5


def test_start_distribution_normalized():
    for mode in (E.COMPLIANT, E.JAYWALK, TIMID, E.Mode("late", "Jaywalk", 0.0, (150, 400))):
        p = start_distribution(mode, CFG)
        assert np.all(p >= 0) and p.sum() == pytest.approx(1.0, abs=1e-12)
    assert start_distribution(E.COMPLIANT, CFG)[:5].sum() == 0.0


def test_model_roundtrip():
    m = ModeTransitionModel((E.COMPLIANT, E.JAYWALK), [[0.9, 0.1], [0.2, 0.8]], [0.3, 0.7])
    back = ModeTransitionModel.from_dict(m.to_dict())
    assert back.modes == m.modes and np.array_equal(back.p_z, m.p_z) and np.array_equal(back.rho_z, m.rho_z)
