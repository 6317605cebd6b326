"""Recursive Bayesian filter over latent pedestrian modes.

The only mode-discriminating signal in the crossing scenario is *when* the
pedestrian starts walking relative to the signal light. Every observation
pins the start step to a set of candidates (not yet started, started at a
known step, or finished crossing). A mode's likelihood for that set is the
probability mass its start-time distribution puts on it; the incremental
likelihood of a new observation is the ratio of the current to the previous
mass, so the recursive product telescopes to the full-sequence likelihood.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import env as E

log = logging.getLogger(__name__)

TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Belief:
    probs: np.ndarray
    mode_ids: tuple
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        object.__setattr__(self, "mode_ids", tuple(self.mode_ids))

    def __getitem__(self, mode_id):
        return float(self.probs[self.mode_ids.index(mode_id)])

    def argmax(self) -> str:
        return self.mode_ids[int(np.argmax(self.probs))]


@dataclass(frozen=True, eq=False)
class ModeTransitionModel:
    modes: tuple
    p_z: np.ndarray
    rho_z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "p_z", np.asarray(self.p_z, dtype=float))
        object.__setattr__(self, "rho_z", np.asarray(self.rho_z, dtype=float))

    @property
    def mode_ids(self):
        return tuple(m.name for m in self.modes)

    def validate(self):
        n = len(self.modes)
        if n == 0:
            raise E.ConfigError("mode model has no modes")
        if self.p_z.shape != (n, n) or self.rho_z.shape != (n,):
            raise E.ConfigError("p_z must be (n, n) and rho_z (n,)")
        if np.any(self.p_z < 0) or np.any(np.abs(self.p_z.sum(axis=1) - 1.0) > TOL):
            raise E.ConfigError("p_z rows must be probability vectors")
        if np.any(self.rho_z < 0) or abs(self.rho_z.sum() - 1.0) > TOL:
            raise E.ConfigError("rho_z must be a probability vector")

    @classmethod
    def stationary(cls, modes, prior=None):
        n = len(modes)
        prior = np.full(n, 1.0 / n) if prior is None else prior
        return cls(tuple(modes), np.eye(n), np.asarray(prior, dtype=float))

    def to_dict(self):
        return {"modes": [m.to_dict() for m in self.modes], "p_z": self.p_z.tolist(),
                "rho_z": self.rho_z.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(E.Mode.from_dict(m) for m in d["modes"]), d["p_z"], d["rho_z"])


class ObservationWindow:
    """Last ``W`` observations with their step indices, plus the light history."""

    def __init__(self, config: E.SimConfig, size: int = 5):
        if size < 2:
            raise E.ConfigError("window needs room for at least two observations")
        self.config = config
        self.size = size
        self.obs = deque(maxlen=size)
        self.steps = deque(maxlen=size)
        self.lights = []

    def push(self, t: int, obs):
        self.obs.append(np.asarray(obs, dtype=float))
        self.steps.append(int(t))
        while len(self.lights) <= t:
            self.lights.append(E.light_at(len(self.lights), self.config.light_cycle))

    def __len__(self):
        return len(self.obs)


# ---------------------------------------------------------------------------
# start-time model

def start_distribution(mode: E.Mode, config: E.SimConfig) -> np.ndarray:
    """P(start step = s) for s = 0..h_max-1, with the last slot h_max = never."""
    H = config.h_max
    p = np.zeros(H + 1)
    if mode.behavior == "Jaywalk":
        lo, hi = mode.jaywalk_start
        n = hi - lo + 1
        for s in range(lo, hi + 1):
            if s < H:
                p[s] = 1.0 / n
            else:
                p[H] += 1.0 / n
        return p
    survive = 1.0
    for s in range(H):
        light = E.light_at(s, config.light_cycle)
        hazard = 0.0 if light == E.RED else (mode.yellow_go_prob if light == E.YELLOW else 1.0)
        p[s] = survive * hazard
        survive *= 1.0 - hazard
    p[H] = survive
    return p


def _steps_per_crossing(config: E.SimConfig) -> int:
    per_step = config.walk_speed * config.dt
    return int(np.ceil(config.lane_width / per_step - 1e-9))


def start_constraint(t: int, obs, config: E.SimConfig):
    """Start steps consistent with one observation, as ``(lo, hi)`` inclusive; None = no info.

    A start at step ``s`` means the pedestrian moves during ``s -> s+1``.
    """
    if obs[E.D_P] == E.MASK:
        return None
    H = config.h_max
    y = config.lane_width - obs[E.D_P]
    if y <= 1e-9 and obs[E.V_P] == 0.0:
        return (t, H)
    n_cross = _steps_per_crossing(config)
    if y >= config.lane_width - 1e-9 and obs[E.V_P] == 0.0:
        return (0, t - n_cross)
    walked = int(round(y / (config.walk_speed * config.dt)))
    return (t - walked, t - walked)


def _mass(p: np.ndarray, c) -> float:
    if c is None:
        return 1.0
    lo, hi = max(c[0], 0), min(c[1], len(p) - 1)
    if hi < lo:
        return 0.0
    return float(p[lo: hi + 1].sum())


class _Cache:
    def __init__(self):
        self.dists = {}

    def get(self, mode, config):
        key = (mode, config.light_cycle, config.h_max)
        if key not in self.dists:
            self.dists[key] = start_distribution(mode, config)
        return self.dists[key]


_cache = _Cache()


def mode_likelihood(mode: E.Mode, window: ObservationWindow) -> float:
    """Probability of the newest observation's start evidence given the previous one."""
    if len(window) == 0:
        return 1.0
    config = window.config
    p = _cache.get(mode, config)
    cur = start_constraint(window.steps[-1], window.obs[-1], config)
    if cur is None:
        return 1.0
    prev = None
    if len(window) >= 2:
        prev = start_constraint(window.steps[-2], window.obs[-2], config)
    m_prev = _mass(p, prev)
    m_cur = _mass(p, intersect(cur, prev))
    if m_prev == 0.0:
        return 0.0
    return m_cur / m_prev


def intersect(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return (max(a[0], b[0]), min(a[1], b[1]))


def init_belief(model: ModeTransitionModel) -> Belief:
    model.validate()
    return Belief(model.rho_z.copy(), model.mode_ids)


def update_belief(b: Belief, window: ObservationWindow, model: ModeTransitionModel) -> Belief:
    """Predict with p_z, correct with the window's evidence, normalise."""
    predicted = b.probs @ model.p_z
    lik = np.array([mode_likelihood(m, window) for m in model.modes])
    post = predicted * lik
    total = post.sum()
    if not total > 0.0:
        log.warning("evidence has zero likelihood under every mode; keeping predicted belief")
        return Belief(predicted / predicted.sum(), b.mode_ids, degenerate=True)
    return Belief(post / total, b.mode_ids)
