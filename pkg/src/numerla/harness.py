"""Closed-loop evaluation of RL, COLA and NUMERLA over the scenario grid."""
from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import env as E
from .belief import ModeTransitionModel, ObservationWindow, init_belief, update_belief
from .cola import SampleBank, cola_step
from .persist import ArtifactError, atomic_write
from .policy import PolicyParams, action_probs, sample_action
from .ssc import BRAKE_ONLY, ConstraintSet, Predicate, Rule, SHAT_DIM, SSCFunction, evaluate_ssc, shield

log = logging.getLogger(__name__)

METHODS = ("RL", "COLA", "NUMERLA")
SCENARIOS = {"WellBehaved": E.COMPLIANT, "Jaywalk": E.JAYWALK}
METRICS_FORMAT = "numerla-metrics/1"

# used when the belief's mode falls outside every SSC partition
MAX_CAUTION = ConstraintSet((Rule(Predicate.always(SHAT_DIM), BRAKE_ONLY),), "max-caution")


class ShieldViolation(AssertionError):
    """The shielded distribution put mass on a masked action."""


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str
    gap_m: float
    episodes: int
    method: str
    seed: int = 0
    K: int = 50
    M: int = 64
    delta: float = 0.5
    cadence: int = 5
    n_iter: int = 1
    window: int = 5
    dispatch: str = "belief"      # or "truth" for oracle runs
    carry_theta: bool = False
    baseline: bool = True
    align: bool = True            # conjecture from windows at the current step
    ssc_version: int = None
    sim: E.SimConfig = field(default_factory=E.SimConfig)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise E.ConfigError(f"unknown scenario {self.scenario!r}")
        if self.method not in METHODS:
            raise E.ConfigError(f"unknown method {self.method!r}")
        if self.episodes < 1:
            raise E.ConfigError("episodes must be >= 1")
        if self.cadence < 1 or self.K < 1 or self.M < 0 or self.delta < 0:
            raise E.ConfigError("cadence and K must be >= 1, M and delta >= 0")
        if self.dispatch not in ("belief", "truth"):
            raise E.ConfigError("dispatch must be 'belief' or 'truth'")

    @property
    def cell(self):
        return (self.method, self.scenario, float(self.gap_m))

    @property
    def mode(self) -> E.Mode:
        return SCENARIOS[self.scenario]

    @property
    def sim_config(self) -> E.SimConfig:
        return replace(self.sim, initial_gap_m=float(self.gap_m))


@dataclass(frozen=True)
class EpisodeRecord:
    index: int
    seed: int
    ret: float
    collided: bool
    steps: int
    done_reason: str
    adaptations: int = 0
    interventions: int = 0
    fallbacks: int = 0

    def __post_init__(self):
        if self.collided != (self.done_reason == "Collision"):
            raise ValueError("collided must coincide with a Collision done reason")


@dataclass(frozen=True)
class Artifacts:
    theta: PolicyParams
    bank: SampleBank = None
    ssc: SSCFunction = None
    model: ModeTransitionModel = None

    def for_method(self, method):
        if method != "RL" and self.bank is None:
            raise E.ConfigError(f"{method} needs a sample bank")
        if method == "NUMERLA" and self.ssc is None:
            raise E.ConfigError("NUMERLA needs a knowledge base")
        if self.theta is None:
            raise E.ConfigError("no policy checkpoint loaded")
        return self


def default_model() -> ModeTransitionModel:
    return ModeTransitionModel.stationary((E.COMPLIANT, E.JAYWALK))


def episode_seed(base: int, scenario: str, gap_m: float, index: int) -> int:
    """Counter-based seed; the method is left out so methods share pedestrian draws."""
    key = zlib.crc32(f"{scenario}:{float(gap_m):g}".encode())
    return int(np.random.SeedSequence([base, key, index]).generate_state(1)[0])


def run_episode(spec: ScenarioSpec, episode_seed: int, theta: PolicyParams, bank: SampleBank = None,
                f: SSCFunction = None, model: ModeTransitionModel = None, index: int = 0,
                trace: list = None) -> EpisodeRecord:
    model = model or default_model()
    adaptive = spec.method != "RL"
    if adaptive and bank is None:
        raise E.ConfigError(f"{spec.method} needs a sample bank")
    if spec.method == "NUMERLA":
        if f is None:
            raise E.ConfigError("NUMERLA needs a knowledge base")
        if spec.ssc_version is not None and f.version != spec.ssc_version:
            raise ArtifactError(f"knowledge base version {f.version}, spec wants {spec.ssc_version}")
    mode = spec.mode
    cfg = spec.sim_config
    modes_by_id = {m.name: m for m in model.modes}

    state, obs = E.reset(cfg, mode, episode_seed)
    srng = E.step_rng(episode_seed)
    policy_rng = np.random.default_rng([episode_seed, 2])
    adapt_rng = np.random.default_rng([episode_seed, 3])
    window = ObservationWindow(cfg, spec.window)
    window.push(0, obs)
    b = update_belief(init_belief(model), window, model)
    meta = theta
    cur = theta
    aligned = {"t": 0, "gap0": float(obs[E.D_C])} if spec.align else {}
    total, adaptations, interventions, fallbacks = 0.0, 0, 0, 0
    while True:
        if adaptive and state.t % spec.cadence == 0:
            if spec.align:
                aligned["t"] = state.t
            nxt = cola_step(cur, b, obs, bank, spec.K, spec.M, spec.delta, adapt_rng,
                            meta=meta, n_iter=spec.n_iter, baseline=spec.baseline, **aligned)
            if nxt is not cur:
                adaptations += 1
            cur = nxt
        probs = action_probs(cur, obs)
        if spec.method == "NUMERLA":
            z = mode if spec.dispatch == "truth" else modes_by_id[b.argmax()]
            cs = evaluate_ssc(f, z.features)
            if cs is None:
                cs = MAX_CAUTION
            shielded, intervened, fb = shield(probs, cs, obs)
            allowed = cs.select(obs).allowed
            masked = np.setdiff1d(np.arange(E.N_ACTIONS), allowed)
            if fb:
                if probs[list(allowed)].sum() >= 1e-12:
                    raise ShieldViolation("fallback brake used while allowed mass was available")
            elif np.any(shielded[masked] != 0.0):
                raise ShieldViolation(f"mass on masked actions {masked} at t={state.t}")
            interventions += int(intervened)
            fallbacks += int(fb)
            probs = shielded
        a = sample_action(probs, policy_rng)
        res = E.step(state, a, mode, srng, cfg)
        if trace is not None:
            trace.append({"t": state.t, "x_c": state.x_c, "v_c": state.v_c, "y_p": state.y_p,
                          "v_p": state.v_p, "light": state.light, "action": a,
                          "reward": res.reward, "collision": res.collision})
        total += res.reward
        state, obs = res.next_state, res.obs
        if res.done:
            break
        window.push(state.t, obs)
        b = update_belief(b, window, model)
    return EpisodeRecord(index, int(episode_seed), float(total), bool(res.collision), state.t,
                         res.done_reason, adaptations, interventions, fallbacks)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class CellStats:
    """Exact running sums (as rationals) so merging and reordering are lossless."""

    n: int = 0
    collisions: int = 0
    failures: int = 0
    total: Fraction = Fraction(0)
    total_sq: Fraction = Fraction(0)
    interventions: int = 0
    adaptations: int = 0

    def add(self, rec: EpisodeRecord):
        x = Fraction(rec.ret)
        self.n += 1
        self.collisions += int(rec.collided)
        self.total += x
        self.total_sq += x * x
        self.interventions += rec.interventions
        self.adaptations += rec.adaptations

    def merge(self, other: "CellStats") -> "CellStats":
        return CellStats(self.n + other.n, self.collisions + other.collisions,
                         self.failures + other.failures, self.total + other.total,
                         self.total_sq + other.total_sq, self.interventions + other.interventions,
                         self.adaptations + other.adaptations)

    @property
    def mean(self) -> float:
        return float(self.total / self.n) if self.n else float("nan")

    @property
    def std(self) -> float:
        if self.n < 2:
            return 0.0
        var = (self.total_sq - self.total * self.total / self.n) / (self.n - 1)
        return float(var) ** 0.5

    @property
    def low_n(self) -> bool:
        return self.n < 2

    @property
    def collision_rate(self) -> float:
        return self.collisions / self.n if self.n else float("nan")

    def to_dict(self):
        return {"n": self.n, "collisions": self.collisions, "failures": self.failures,
                "total": str(self.total), "total_sq": str(self.total_sq),
                "interventions": self.interventions, "adaptations": self.adaptations}

    @classmethod
    def from_dict(cls, d):
        return cls(d["n"], d["collisions"], d["failures"], Fraction(d["total"]),
                   Fraction(d["total_sq"]), d.get("interventions", 0), d.get("adaptations", 0))


class MetricsSummary:
    def __init__(self, cells=None):
        self.cells = dict(cells or {})

    def add(self, cell, rec: EpisodeRecord):
        self.cells.setdefault(cell, CellStats()).add(rec)

    def merge(self, other: "MetricsSummary") -> "MetricsSummary":
        out = MetricsSummary(self.cells)
        for k, v in other.cells.items():
            out.cells[k] = out.cells[k].merge(v) if k in out.cells else v
        return out

    def __getitem__(self, cell) -> CellStats:
        return self.cells[cell]

    def __eq__(self, other):
        return isinstance(other, MetricsSummary) and self.cells == other.cells

    def rows(self):
        for (method, scenario, gap), s in sorted(self.cells.items()):
            yield {"method": method, "scenario": scenario, "gap_m": gap, "episodes": s.n,
                   "mean_reward": s.mean, "std": s.std, "collision_rate": s.collision_rate,
                   "low_n": s.low_n, "failures": s.failures}

    def to_dict(self):
        return {"format": METRICS_FORMAT,
                "cells": [{"method": m, "scenario": sc, "gap_m": g, **s.to_dict()}
                          for (m, sc, g), s in sorted(self.cells.items())]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != METRICS_FORMAT:
            raise ArtifactError("not a metrics file")
        return cls({(c["method"], c["scenario"], float(c["gap_m"])): CellStats.from_dict(c)
                    for c in d["cells"]})


def save_metrics(path, summary: MetricsSummary):
    atomic_write(path, json.dumps(summary.to_dict(), indent=1))


def load_metrics(path) -> MetricsSummary:
    try:
        with open(path) as fh:
            return MetricsSummary.from_dict(json.load(fh))
    except FileNotFoundError:
        raise ArtifactError(f"{path}: no such file") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"{path}: corrupt metrics file ({exc})") from None


def _run_cell(spec: ScenarioSpec, art: Artifacts, indices):
    out, failures = [], []
    theta = art.theta
    for i in indices:
        seed = episode_seed(spec.seed, spec.scenario, spec.gap_m, i)
        try:
            rec = run_episode(spec, seed, theta, art.bank, art.ssc, art.model, index=i)
        except (ShieldViolation, E.ConfigError):
            raise
        except Exception as exc:  # keep the grid going, count the failure
            log.error("episode %d of %s failed: %s", i, spec.cell, exc)
            failures.append(i)
            continue
        out.append(rec)
    return spec, out, failures


def run_experiment(specs, artifacts: Artifacts, jobs: int = 1, progress=None):
    """Run every spec; returns (MetricsSummary, {cell: [EpisodeRecord, ...]})."""
    for spec in specs:
        artifacts.for_method(spec.method)
        if spec.carry_theta:
            raise E.ConfigError("carry_theta needs sequential episodes; not supported by run_experiment")
    tasks = [(spec, artifacts, range(spec.episodes)) for spec in specs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, *zip(*tasks)))
    else:
        results = []
        for t in tasks:
            results.append(_run_cell(*t))
            if progress:
                progress(t[0])
    summary = MetricsSummary()
    records = {}
    for spec, recs, failures in results:
        recs = sorted(recs, key=lambda r: r.index)
        records[spec.cell] = recs
        stats = summary.cells.setdefault(spec.cell, CellStats())
        for r in recs:
            stats.add(r)
        stats.failures += len(failures)
    return summary, records


# ---------------------------------------------------------------------------
# reporting

METRIC_FIELDS = ("method", "scenario", "gap_m", "episodes", "mean_reward", "std", "collision_rate")
EPISODE_FIELDS = ("method", "scenario", "gap_m", "index", "seed", "ret", "collided", "steps",
                  "done_reason", "adaptations", "interventions", "fallbacks")


def _csv_text(fields, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def write_metrics_csv(path, summary: MetricsSummary):
    atomic_write(path, _csv_text(METRIC_FIELDS, summary.rows()))


def write_episodes_csv(path, records):
    rows = []
    for (method, scenario, gap), recs in sorted(records.items()):
        for r in recs:
            rows.append({"method": method, "scenario": scenario, "gap_m": gap, **asdict(r)})
    atomic_write(path, _csv_text(EPISODE_FIELDS, rows))


def write_long_csv(path, summary: MetricsSummary):
    rows = []
    for r in summary.rows():
        for metric in ("mean_reward", "std", "collision_rate"):
            rows.append({"method": r["method"], "scenario": r["scenario"], "gap_m": r["gap_m"],
                         "metric": metric, "value": r[metric]})
    atomic_write(path, _csv_text(("method", "scenario", "gap_m", "metric", "value"), rows))


def _compare(a, b, strict):
    if a == b:
        return "tie"
    ok = a < b if strict else a <= b
    return "pass" if ok else "fail"


def ordering_checks(summary: MetricsSummary):
    """Collision and reward orderings between adjacent methods, per (scenario, gap)."""
    pairs = (("NUMERLA", "COLA"), ("COLA", "RL"), ("NUMERLA", "RL"))
    groups = sorted({(sc, g) for (_, sc, g) in summary.cells})
    checks = []
    for sc, g in groups:
        for lo, hi in pairs:
            if (lo, sc, g) not in summary.cells or (hi, sc, g) not in summary.cells:
                continue
            a, b = summary[(lo, sc, g)], summary[(hi, sc, g)]
            checks.append({"scenario": sc, "gap_m": g, "check": f"collision {lo} < {hi}",
                           "left": a.collision_rate, "right": b.collision_rate,
                           "status": _compare(a.collision_rate, b.collision_rate, strict=True)})
            checks.append({"scenario": sc, "gap_m": g, "check": f"reward {lo} >= {hi}",
                           "left": a.mean, "right": b.mean,
                           "status": _compare(-a.mean, -b.mean, strict=False)})
    return checks


def compare_report(summaries, out_prefix):
    """Merge summaries, write ``<prefix>.csv`` and ``<prefix>.json``; returns the report dict."""
    summaries = list(summaries)
    merged = MetricsSummary()
    for s in summaries:
        merged = merged.merge(s)
    methods = sorted({m for (m, _, _) in merged.cells})
    if len(methods) < 2:
        raise E.ConfigError("a comparison needs summaries for at least two methods")
    checks = ordering_checks(merged)
    report = {"methods": methods, "cells": list(merged.rows()), "checks": checks,
              "failed": sum(c["status"] == "fail" for c in checks),
              "ties": sum(c["status"] == "tie" for c in checks)}
    atomic_write(f"{out_prefix}.csv", _csv_text(METRIC_FIELDS, merged.rows()))
    atomic_write(f"{out_prefix}.json", json.dumps(report, indent=1))
    return report
