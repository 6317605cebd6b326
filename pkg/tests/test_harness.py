import json
import random
import statistics

import numpy as np
import pytest

from numerla import env as E
from numerla import harness as H
from numerla.ssc import BRAKE_ONLY, SSCFunction, baseline_ssc

from conftest import TEST_SIM


def _spec(method, scenario="Jaywalk", gap=15.0, n=3, **kw):
    kw.setdefault("K", 10)
    kw.setdefault("cadence", 5)
    return H.ScenarioSpec(scenario, gap, n, method, sim=TEST_SIM, **kw)


def test_spec_validation():
    with pytest.raises(E.ConfigError):
        H.ScenarioSpec("Rainy", 15, 1, "RL")
    with pytest.raises(E.ConfigError):
        H.ScenarioSpec("Jaywalk", 15, 1, "PPO")
    with pytest.raises(E.ConfigError):
        H.ScenarioSpec("Jaywalk", 15, 0, "RL")
    with pytest.raises(E.ConfigError):
        H.ScenarioSpec("Jaywalk", 15, 1, "RL", cadence=0)
    with pytest.raises(E.ConfigError):
        H.ScenarioSpec("Jaywalk", 15, 1, "RL", dispatch="guess")
    s = H.ScenarioSpec("WellBehaved", 25, 1, "RL", sim=TEST_SIM)
    assert s.mode is E.COMPLIANT and s.sim_config.initial_gap_m == 25.0


def test_episode_seed_shared_across_methods():
    a = H.episode_seed(0, "Jaywalk", 15.0, 3)
    assert a == H.episode_seed(0, "Jaywalk", 15, 3)
    assert len({a, H.episode_seed(0, "Jaywalk", 25.0, 3), H.episode_seed(0, "Jaywalk", 15.0, 4),
                H.episode_seed(1, "Jaywalk", 15.0, 3)}) == 4


def test_missing_artifacts(meta):
    art = H.Artifacts(meta)
    with pytest.raises(E.ConfigError):
        H.run_experiment([_spec("COLA")], art)
    with pytest.raises(E.ConfigError):
        H.run_episode(_spec("NUMERLA"), 1, meta, bank=None)
    with pytest.raises(E.ConfigError):
        H.run_experiment([_spec("RL", carry_theta=True)], art)


def test_run_deterministic(meta, small_bank):
    art = H.Artifacts(meta, small_bank, baseline_ssc())
    specs = [_spec(m) for m in H.METHODS]
    s1, r1 = H.run_experiment(specs, art)
    s2, r2 = H.run_experiment(specs, art)
    assert s1 == s2 and r1 == r2
    assert [r.index for r in r1[("COLA", "Jaywalk", 15.0)]] == [0, 1, 2]


def test_rl_episode_matches_manual_rollout(meta):
    from numerla.policy import action_probs, sample_action
    spec = _spec("RL", gap=25.0)
    seed = H.episode_seed(0, "Jaywalk", 25.0, 0)
    trace = []
    rec = H.run_episode(spec, seed, meta, trace=trace)
    state, obs = E.reset(spec.sim_config, E.JAYWALK, seed)
    srng, prng = E.step_rng(seed), np.random.default_rng([seed, 2])
    total = 0.0
    while True:
        a = sample_action(action_probs(meta, obs), prng)
        res = E.step(state, a, E.JAYWALK, srng, spec.sim_config)
        total += res.reward
        state, obs = res.next_state, res.obs
        if res.done:
            break
    assert rec.ret == total and rec.steps == state.t == len(trace)
    assert rec.done_reason == res.done_reason


def test_numerla_never_uses_masked_actions(meta, small_bank):
    spec = _spec("NUMERLA", gap=15.0)
    art = H.Artifacts(meta, small_bank, baseline_ssc())
    for i in range(3):
        trace = []
        seed = H.episode_seed(0, spec.scenario, spec.gap_m, i)
        H.run_episode(spec, seed, meta, small_bank, art.ssc, trace=trace)
        for row in trace:
            ped_in_lane = abs(row["x_c"]) <= 15.0 and E.SimConfig().lane_width - row["y_p"] >= 0.5
            if ped_in_lane:
                assert row["action"] == E.FULL_BRAKE


def test_uncovered_mode_uses_max_caution(meta, small_bank):
    empty = SSCFunction((), 0, E.FEATURE_DIM)
    trace = []
    rec = H.run_episode(_spec("NUMERLA", scenario="WellBehaved", gap=35.0), 5, meta, small_bank,
                        empty, trace=trace)
    assert all(row["action"] in BRAKE_ONLY for row in trace)
    assert not rec.collided and rec.interventions > 0


def test_shield_violation_detected(meta, small_bank, monkeypatch):
    leak = lambda dist, cs, s_hat: (np.full(7, 1 / 7), False, False)
    monkeypatch.setattr(H, "shield", leak)
    with pytest.raises(H.ShieldViolation):
        H.run_episode(_spec("NUMERLA"), 1, meta, small_bank, baseline_ssc(),
                      index=0)


def test_ssc_version_pinned(meta, small_bank):
    from numerla.persist import ArtifactError
    with pytest.raises(ArtifactError):
        H.run_episode(_spec("NUMERLA", ssc_version=3), 1, meta, small_bank, baseline_ssc())


def _records(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        hit = bool(rng.random() < 0.3)
        out.append(H.EpisodeRecord(i, i, float(rng.normal(scale=5)) / 7, hit, 10,
                                   "Collision" if hit else "Timeout"))
    return out


def test_cell_stats_against_statistics_module():
    recs = _records(200, 0)
    s = H.CellStats()
    for r in recs:
        s.add(r)
    rets = [r.ret for r in recs]
    assert s.mean == pytest.approx(statistics.fmean(rets), abs=1e-12)
    assert s.std == pytest.approx(statistics.stdev(rets), abs=1e-12)
    assert s.collision_rate == sum(r.collided for r in recs) / 200
    one = H.CellStats()
    one.add(recs[0])
    assert one.low_n and one.std == 0.0
    assert np.isnan(H.CellStats().mean)


def test_aggregation_order_and_split_invariant():
    recs = _records(300, 1)
    whole = H.CellStats()
    for r in recs:
        whole.add(r)
    shuffled = recs[:]
    random.Random(4).shuffle(shuffled)
    parts = [H.CellStats() for _ in range(3)]
    for k, r in enumerate(shuffled):
        parts[k % 3].add(r)
    merged = parts[2].merge(parts[0]).merge(parts[1])
    assert merged == whole and merged.mean == whole.mean and merged.std == whole.std


def test_record_invariant():
    with pytest.raises(ValueError):
        H.EpisodeRecord(0, 0, 1.0, True, 3, "Goal")


def _summary(values):
    s = H.MetricsSummary()
    for (method, gap), (ret, hit) in values.items():
        s.add((method, "Jaywalk", gap), H.EpisodeRecord(0, 0, ret, hit, 1, "Collision" if hit else "Goal"))
    return s


def test_ordering_checks_and_ties(tmp_path):
    s = _summary({("RL", 15.0): (1.0, True), ("COLA", 15.0): (1.0, True),
                  ("NUMERLA", 15.0): (2.0, False)})
    checks = {c["check"]: c["status"] for c in H.ordering_checks(s)}
    assert checks["collision COLA < RL"] == "tie" and checks["reward COLA >= RL"] == "tie"
    assert checks["collision NUMERLA < COLA"] == "pass" and checks["reward NUMERLA >= RL"] == "pass"
    rl = _summary({("RL", 15.0): (1.0, False)})
    bad = _summary({("COLA", 15.0): (0.0, True)})
    rep = H.compare_report([rl, bad], tmp_path / "rep")
    assert rep["failed"] == 2 and rep["ties"] == 0
    assert json.loads((tmp_path / "rep.json").read_text()) == rep
    assert (tmp_path / "rep.csv").read_text().splitlines()[0].startswith("method,scenario")
    with pytest.raises(E.ConfigError):
        H.compare_report([rl], tmp_path / "x")


def test_csv_writers(tmp_path, meta):
    summ, recs = H.run_experiment([_spec("RL", n=2)], H.Artifacts(meta))
    H.write_metrics_csv(tmp_path / "m.csv", summ)
    H.write_episodes_csv(tmp_path / "e.csv", recs)
    H.write_long_csv(tmp_path / "l.csv", summ)
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 2
    assert len((tmp_path / "e.csv").read_text().splitlines()) == 3
    assert len((tmp_path / "l.csv").read_text().splitlines()) == 4
