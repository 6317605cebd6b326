"""Symbolic safety constraints: predicate dispatch, action shielding and synthesis.

An SSC function is an ordered list of cases ``(predicate, constraint set)``.
Predicates are conjunctions of linear inequalities over mode features and
dispatch is first-match, so the effective partitions never overlap. A
constraint set is an ordered list of guarded action masks over the reduced
observation (the first five entries); its last rule is an unguarded default.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import env as E
from .belief import Belief
from .cola import WS_FIELDS, BankCoverageError, SampleBank
from .policy import PolicyParams, action_probs, sample_action

log = logging.getLogger(__name__)

ALL_ACTIONS = tuple(range(E.N_ACTIONS))
NON_THROTTLE = (0, 4, 5, 6)
BRAKE_ONLY = (4, 5, 6)
NON_BRAKE = (0, 1, 2, 3)
FALLBACK_MASS = 1e-12
SHAT_DIM = 5


@dataclass(frozen=True, eq=False)
class Predicate:
    """Conjunction ``A @ x <= c``; zero rows means always true."""

    A: np.ndarray
    c: np.ndarray
    dim: int

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float).reshape(-1, self.dim)
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if A.shape[0] != c.shape[0]:
            raise E.ConfigError("predicate needs one bound per row")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(c))):
            raise E.ConfigError("predicate coefficients must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)

    @classmethod
    def always(cls, dim):
        return cls(np.zeros((0, dim)), np.zeros(0), dim)

    @classmethod
    def box(cls, lo, hi):
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        eye = np.eye(len(lo))
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]), len(lo))

    @property
    def trivial(self):
        return self.A.shape[0] == 0

    def holds(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise E.UsageError(f"expected a {self.dim}-vector, got shape {x.shape}")
        return bool(np.all(self.A @ x <= self.c))

    def __eq__(self, other):
        return (isinstance(other, Predicate) and self.dim == other.dim
                and np.array_equal(self.A, other.A) and np.array_equal(self.c, other.c))

    def to_dict(self):
        return {"dim": self.dim, "A": self.A.tolist(), "c": self.c.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["A"], dtype=float), np.array(d["c"], dtype=float), int(d["dim"]))


def guard(*terms):
    """Guard over the reduced observation from ``(index, op, bound)`` terms."""
    A, c = [], []
    for idx, op, bound in terms:
        row = np.zeros(SHAT_DIM)
        if op == "<=":
            row[idx] = 1.0
            A.append(row)
            c.append(bound)
        elif op == ">=":
            row[idx] = -1.0
            A.append(row)
            c.append(-bound)
        else:
            raise E.ConfigError(f"unknown guard operator {op!r}")
    if not A:
        return Predicate.always(SHAT_DIM)
    return Predicate(np.array(A), np.array(c), SHAT_DIM)


@dataclass(frozen=True, eq=False)
class Rule:
    guard: Predicate
    allowed: tuple

    def __post_init__(self):
        allowed = tuple(sorted(set(int(a) for a in self.allowed)))
        if not allowed:
            raise E.ConfigError("a rule must allow at least one action")
        if allowed[0] < 0 or allowed[-1] >= E.N_ACTIONS:
            raise E.ConfigError(f"action index out of range in {allowed}")
        object.__setattr__(self, "allowed", allowed)

    def __eq__(self, other):
        return isinstance(other, Rule) and self.guard == other.guard and self.allowed == other.allowed


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    rules: tuple
    name: str = ""

    def __post_init__(self):
        rules = tuple(self.rules)
        if not rules or not rules[-1].guard.trivial:
            raise E.ConfigError("constraint set must end with an unguarded default rule")
        object.__setattr__(self, "rules", rules)

    def select(self, s_hat) -> Rule:
        s_hat = np.asarray(s_hat, dtype=float)[:SHAT_DIM]
        for rule in self.rules:
            if rule.guard.holds(s_hat):
                return rule
        return self.rules[-1]

    @property
    def allowed_count(self) -> int:
        return sum(len(r.allowed) for r in self.rules)

    def __eq__(self, other):
        return isinstance(other, ConstraintSet) and self.rules == other.rules

    def to_dict(self):
        return {"name": self.name,
                "rules": [{"guard": r.guard.to_dict(), "allowed": list(r.allowed)} for r in self.rules]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(Rule(Predicate.from_dict(r["guard"]), tuple(r["allowed"])) for r in d["rules"]),
                   d.get("name", ""))


@dataclass(frozen=True, eq=False)
class SSCFunction:
    cases: tuple
    version: int = 0
    dim: int = E.FEATURE_DIM
    domain: tuple = ()   # names of modes known to be covered

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(tuple(c) for c in self.cases))
        object.__setattr__(self, "domain", tuple(self.domain))
        for chi, _ in self.cases:
            if chi.dim != self.dim:
                raise E.ConfigError("all predicates must share the feature dimension")

    def __eq__(self, other):
        return (isinstance(other, SSCFunction) and self.version == other.version
                and self.dim == other.dim and self.domain == other.domain
                and len(self.cases) == len(other.cases)
                and all(a == c and b == d for (a, b), (c, d) in zip(self.cases, other.cases)))

    def to_dict(self):
        return {"version": self.version, "dim": self.dim, "domain": list(self.domain),
                "cases": [{"predicate": chi.to_dict(), "constraints": phi.to_dict()}
                          for chi, phi in self.cases]}

    @classmethod
    def from_dict(cls, d):
        cases = tuple((Predicate.from_dict(c["predicate"]), ConstraintSet.from_dict(c["constraints"]))
                      for c in d["cases"])
        return cls(cases, int(d["version"]), int(d["dim"]), tuple(d.get("domain", ())))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def partition_index(f: SSCFunction, features):
    """Index of the first case whose predicate holds, or None."""
    x = np.asarray(features, dtype=float)
    if x.shape != (f.dim,):
        raise E.UsageError(f"feature vector has shape {x.shape}, SSC expects ({f.dim},)")
    for i, (chi, _) in enumerate(f.cases):
        if chi.holds(x):
            return i
    return None


def evaluate_ssc(f: SSCFunction, mode_features):
    """Constraint set of the first matching case; None signals not covered."""
    i = partition_index(f, mode_features)
    return None if i is None else f.cases[i][1]


def covers(f: SSCFunction, mode_features) -> bool:
    return partition_index(f, mode_features) is not None


# ---------------------------------------------------------------------------
# safety assessor and shielding


@dataclass(frozen=True)
class SafetyAssessor:
    d_safe: float = 3.0
    horizon: int = 10
    config: E.SimConfig = field(default_factory=E.SimConfig)

    def __post_init__(self):
        if not self.d_safe > 0:
            raise E.ConfigError("d_safe must be positive")
        if self.horizon < 0:
            raise E.ConfigError("horizon must be non-negative")


def safe(s: E.WorldState, a: int, assessor: SafetyAssessor) -> int:
    """0 if the pair is judged safe, 1 if unsafe.

    The vehicle applies ``a`` for one step and then holds that speed; the
    pedestrian keeps its current lateral speed. Unsafe when, at some step of
    the horizon, the pedestrian is in the lane band while the vehicle is
    inside the crossing window, or still approaching it with less than
    ``d_safe`` of clearance.
    """
    cfg = assessor.config
    v = min(max(s.v_c + E.ACTION_VALUES[a] * cfg.a_max * cfg.dt, 0.0), cfg.v_max)
    lo, hi = cfg.lane_band
    half = cfg.crossing_halfwidth
    for k in range(1, assessor.horizon + 1):
        x = s.x_c + k * v * cfg.dt
        y = min(max(s.y_p + k * s.v_p * cfg.dt, 0.0), cfg.lane_width)
        if not lo < y < hi:
            continue
        if abs(x) <= half:
            return 1
        if v > 0 and -half - assessor.d_safe < x < -half:
            return 1
    return 0


def shield(dist, cs: ConstraintSet, s_hat):
    """Masked distribution plus (intervened, fallback) flags."""
    p = np.asarray(dist, dtype=float)
    rule = cs.select(s_hat)
    mask = np.zeros(len(p), dtype=bool)
    mask[list(rule.allowed)] = True
    kept = np.where(mask, p, 0.0)
    total = kept.sum()
    intervened = bool(np.any(p[~mask] > 0))
    if total < FALLBACK_MASS:
        out = np.zeros(len(p))
        out[E.FULL_BRAKE] = 1.0
        return out, True, True
    if not intervened:
        return kept, False, False
    return kept / total, True, False


def apply_constraint(dist, cs: ConstraintSet, s_hat) -> np.ndarray:
    return shield(dist, cs, s_hat)[0]


# ---------------------------------------------------------------------------
# baseline knowledge and synthesis grammar


def baseline_ssc(modes=(E.COMPLIANT, E.JAYWALK)) -> SSCFunction:
    """Hand-written starting knowledge: one case covering the training modes.

    Yield to any sensed pedestrian who has not yet cleared the lane, stop
    accelerating above 10 m/s so the vehicle can always halt inside sensor
    range, and do not dawdle below 3 m/s once nothing is in the way.
    """
    feats = np.array([m.features for m in modes])
    chi = Predicate.box(feats.min(axis=0), feats.max(axis=0))
    phi = ConstraintSet((
        Rule(guard((E.D_P, ">=", 0.5)), (E.FULL_BRAKE,)),
        Rule(guard((E.V_C, ">=", 10.0)), NON_THROTTLE),
        Rule(guard((E.V_C, "<=", 3.0)), NON_BRAKE),
        Rule(Predicate.always(SHAT_DIM), ALL_ACTIONS),
    ), name="yield")
    return SSCFunction(((chi, phi),), 0, feats.shape[1], tuple(m.name for m in modes))


def default_grammar():
    """12 candidates: {all, non-throttle, brake-only} x {d_c <= 5, 10, 15, unguarded}."""
    out = []
    for label, allowed in (("all", ALL_ACTIONS), ("nothrottle", NON_THROTTLE), ("brake", BRAKE_ONLY)):
        for T in (5.0, 10.0, 15.0, None):
            if T is None:
                rules = (Rule(Predicate.always(SHAT_DIM), allowed),)
                name = label
            else:
                g = guard((E.D_P, ">=", 0.0), (E.D_C, "<=", T))
                rules = (Rule(g, allowed), Rule(Predicate.always(SHAT_DIM), ALL_ACTIONS))
                name = f"{label}@{T:g}"
            out.append(ConstraintSet(rules, name))
    return out


def _restore(row, first_obs, config) -> E.WorldState:
    d = dict(zip(WS_FIELDS, row))
    t = int(d["t"])
    return E.WorldState(x_c=float(d["x_c"]), v_c=float(d["v_c"]), y_p=float(d["y_p"]),
                        v_p=float(d["v_p"]), light=E.light_at(t, config.light_cycle), t=t,
                        walking_started=bool(d["walking_started"]),
                        jaywalk_start=int(d["jaywalk_start"]), obs=tuple(first_obs))


def _mode_weights(g, b: Belief):
    w = np.array([b[m.name] if b is not None and m.name in b.mode_ids else 0.0 for m in g])
    if not w.sum() > 0:
        w = np.ones(len(g))
    return w / w.sum()


def draw_starts(g, bank: SampleBank, b: Belief, M_eval: int, rng, config: E.SimConfig):
    """``M_eval`` (mode, world state) pairs: mode ~ b restricted to g, state from the bank."""
    if not g:
        raise E.UsageError("partition has no modes")
    for m in g:
        b_ok = bank.covers(m.name) and bank.buckets[m.name].start_states is not None
        if not b_ok:
            raise BankCoverageError(f"bank has no start states for mode {m.name!r}")
    w = _mode_weights(g, b)
    cdf = np.cumsum(w)
    out = []
    for _ in range(M_eval):
        j = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(g) - 1)
        bucket = bank.buckets[g[j].name]
        i = int(rng.integers(len(bucket)))
        out.append((g[j], _restore(bucket.start_states[i], bucket.obs[i, 0], config)))
    return out


def _unsafe_count_mc(phi, mode, state, theta, K, assessor, rng):
    cfg = assessor.config
    total = 0
    for _ in range(K):
        if state.done:
            break
        obs = np.asarray(state.obs)
        p = apply_constraint(action_probs(theta, obs), phi, obs)
        a = sample_action(p, rng)
        total += safe(state, a, assessor)
        state = E.step(state, a, mode, rng, cfg).next_state
    return total


def _unsafe_count_exact(phi, mode, state, theta, K, assessor, seed):
    """Expectation over action sequences; the env stream is rebuilt from ``seed`` per branch."""
    cfg = assessor.config

    def rec(st, k, draws):
        if k == K or st.done:
            return 0.0
        obs = np.asarray(st.obs)
        p = apply_constraint(action_probs(theta, obs), phi, obs)
        val = 0.0
        for a in np.flatnonzero(p > 0):
            rng = np.random.default_rng([seed, draws])
            nxt = E.step(st, int(a), mode, rng, cfg).next_state
            val += p[a] * (safe(st, int(a), assessor) + rec(nxt, k + 1, draws + 1))
        return val

    return rec(state, 0, 0)


def sscap_objective(phi: ConstraintSet, g, bank: SampleBank, theta: PolicyParams, b: Belief, K: int,
                    assessor: SafetyAssessor, rng, M_eval: int = 64, exact: bool = False,
                    starts=None) -> float:
    """Expected number of unsafe steps over K-step shielded rollouts in partition ``g``.

    With ``exact`` the action randomness is summed out instead of sampled.
    """
    if not g:
        raise E.UsageError("partition has no modes")
    if assessor.horizon == 0 or K == 0:
        return 0.0
    if starts is None:
        starts = draw_starts(g, bank, b, M_eval, rng, assessor.config)
    if not starts:
        return 0.0
    vals = []
    for i, (mode, st) in enumerate(starts):
        if exact:
            vals.append(_unsafe_count_exact(phi, mode, st, theta, K, assessor, i))
        else:
            vals.append(_unsafe_count_mc(phi, mode, st, theta, K, assessor, rng))
    return float(np.mean(vals))


def sscap_optimize(g, bank: SampleBank, theta: PolicyParams, b: Belief, K: int,
                   assessor: SafetyAssessor, grammar, rng, M_eval: int = 64,
                   exact: bool = False, return_scores: bool = False):
    """Grammar candidate with the fewest expected unsafe steps.

    Every candidate is scored on the same start states and action stream.
    Ties go to the most permissive candidate, then to grammar order.
    """
    grammar = list(grammar)
    if not grammar:
        raise E.UsageError("grammar is empty")
    starts = draw_starts(g, bank, b, M_eval, rng, assessor.config)
    seed = int(rng.integers(2**63))
    scores = [sscap_objective(phi, g, bank, theta, b, K, assessor, np.random.default_rng(seed),
                              exact=exact, starts=starts) for phi in grammar]
    best = min(range(len(grammar)),
               key=lambda i: (scores[i], -grammar[i].allowed_count, i))
    if return_scores:
        return grammar[best], scores
    return grammar[best]


def ssca_update(f: SSCFunction, new_modes, bank: SampleBank, theta: PolicyParams, b: Belief, K: int,
                assessor: SafetyAssessor, grammar, rng, M_eval: int = 64, exact: bool = False,
                known_modes=()) -> SSCFunction:
    """Append one case covering every mode in ``new_modes`` the function misses."""
    uncovered = [m for m in new_modes if not covers(f, m.features)]
    if not uncovered:
        return f
    feats = np.array([m.features for m in uncovered])
    chi = Predicate.box(feats.min(axis=0), feats.max(axis=0))
    for m in known_modes:
        if covers(f, m.features) and chi.holds(m.features):
            log.info("new partition box also contains covered mode %s; earlier case keeps it", m.name)
    phi = sscap_optimize(uncovered, bank, theta, b, K, assessor, grammar, rng, M_eval, exact)
    domain = f.domain + tuple(m.name for m in uncovered if m.name not in f.domain)
    return SSCFunction(f.cases + ((chi, phi),), f.version + 1, f.dim, domain)


def brute_force_partition(f: SSCFunction, features):
    """Partition membership by the explicit ``chi_i and not chi_j (j < i)`` formula."""
    hits = []
    for i, (chi, _) in enumerate(f.cases):
        if chi.holds(features) and not any(f.cases[j][0].holds(features) for j in range(i)):
            hits.append(i)
    return hits


