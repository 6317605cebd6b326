"""Kinematic vehicle/pedestrian/signal-light crossing simulator.

One vehicle moves longitudinally toward a crossing at ``x = 0``; one
pedestrian waits at the curb and walks laterally across a 4 m lane. The
vehicle starts ``initial_gap_m`` before the crossing. Everything is a pure
function of ``(config, mode, seed)``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

# Table of discrete vehicle actions: throttle (> 0) or brake (< 0) strength.
ACTION_VALUES = (0.0, 1.0, 0.5, 0.25, -1.0, -0.5, -0.25)
N_ACTIONS = len(ACTION_VALUES)
FULL_BRAKE = 4

RED, YELLOW, GREEN = 0, 1, 2
LIGHT_NAMES = ("Red", "Yellow", "Green")

MASK = -1.0
OBS_DIM = 10
# index of each current-step entry; previous-step copies sit at +5
D_C, D_P, V_C, V_P, LIGHT = range(5)

BEHAVIORS = ("Compliant", "Jaywalk")
STANDARD_GAPS = (15.0, 25.0, 35.0)


class ConfigError(ValueError):
    """Invalid simulator, experiment or artifact configuration."""


class UsageError(RuntimeError):
    """Operation called in a state where it is not defined."""


@dataclass(frozen=True)
class Mode:
    """Latent pedestrian behaviour descriptor."""

    name: str
    behavior: str
    yellow_go_prob: float = 0.1
    jaywalk_start: tuple = (0, 100)
    horizon: int = 200

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ConfigError(f"unknown behavior {self.behavior!r}")
        if not 0.0 <= self.yellow_go_prob <= 1.0:
            raise ConfigError("yellow_go_prob must lie in [0, 1]")
        lo, hi = self.jaywalk_start
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad jaywalk_start window {self.jaywalk_start}")
        object.__setattr__(self, "jaywalk_start", (int(lo), int(hi)))

    @property
    def features(self) -> np.ndarray:
        onehot = [1.0 if self.behavior == b else 0.0 for b in BEHAVIORS]
        if self.behavior == "Jaywalk":
            lo, hi = self.jaywalk_start
            mean_start = 0.5 * (lo + hi) / self.horizon
        else:
            mean_start = 0.0
        return np.array(onehot + [self.yellow_go_prob, mean_start])

    def to_dict(self):
        d = asdict(self)
        d["jaywalk_start"] = list(self.jaywalk_start)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["jaywalk_start"] = tuple(d.get("jaywalk_start", (0, 100)))
        return cls(**d)


COMPLIANT = Mode("Compliant", "Compliant", yellow_go_prob=0.1)
JAYWALK = Mode("Jaywalk", "Jaywalk", yellow_go_prob=0.0, jaywalk_start=(0, 100))
FEATURE_DIM = len(COMPLIANT.features)


@dataclass(frozen=True)
class SimConfig:
    initial_gap_m: float = 25.0
    v0: float = 8.0
    dt: float = 0.1
    h_max: int = 200
    light_cycle: tuple = (5, 40, 15)
    a_max: float = 5.0
    v_max: float = 15.0
    walk_speed: float = 1.5
    lane_width: float = 4.0
    lane_band: tuple = (0.5, 3.5)
    crossing_halfwidth: float = 2.0
    sensor_range: float = 15.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "light_cycle", tuple(int(x) for x in self.light_cycle))
        object.__setattr__(self, "lane_band", tuple(float(x) for x in self.lane_band))
        if not self.initial_gap_m > 0:
            raise ConfigError("initial_gap_m must be positive")
        if self.v0 < 0 or self.v0 > self.v_max:
            raise ConfigError("v0 must lie in [0, v_max]")
        if self.dt <= 0 or self.h_max < 1:
            raise ConfigError("dt and h_max must be positive")
        if len(self.light_cycle) != 3 or min(self.light_cycle) < 0 or sum(self.light_cycle) == 0:
            raise ConfigError("light_cycle must be three non-negative step counts")

    @property
    def is_standard_gap(self) -> bool:
        return float(self.initial_gap_m) in STANDARD_GAPS

    @classmethod
    def from_dict(cls, d) -> "SimConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown sim config keys: {sorted(unknown)}")
        return cls(**known)

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path) as fh:
            data = json.load(fh)
        return cls.from_dict(data.get("sim", data))

    def to_dict(self):
        d = asdict(self)
        d["light_cycle"] = list(self.light_cycle)
        d["lane_band"] = list(self.lane_band)
        return d


def light_at(t: int, cycle) -> int:
    red, yellow, green = cycle
    phase = t % (red + yellow + green)
    if phase < red:
        return RED
    if phase < red + yellow:
        return YELLOW
    return GREEN


@dataclass(frozen=True)
class WorldState:
    x_c: float
    v_c: float
    y_p: float
    v_p: float
    light: int
    t: int
    walking_started: bool
    jaywalk_start: int = -1
    obs: tuple = field(default=(MASK,) * OBS_DIM, repr=False)
    done: bool = False

    @property
    def ped_distance(self) -> float:
        return abs(self.x_c)


@dataclass(frozen=True)
class StepResult:
    next_state: WorldState
    obs: np.ndarray
    reward: float
    collision: bool
    done: bool
    done_reason: Optional[str]


def observe(state: WorldState, prev_obs, config: SimConfig) -> np.ndarray:
    """10-entry sensor vector; pedestrian and light entries masked beyond range."""
    cur = [-state.x_c, MASK, state.v_c, MASK, MASK]
    if state.ped_distance <= config.sensor_range:
        cur[D_P] = config.lane_width - state.y_p
        cur[V_P] = state.v_p
        cur[LIGHT] = float(state.light)
    prev = list(prev_obs[:5]) if prev_obs is not None else [MASK] * 5
    return np.array(cur + prev, dtype=float)


def step_rng(seed: int) -> np.random.Generator:
    """RNG stream consumed by ``step`` for an episode started with ``seed``."""
    return np.random.default_rng([seed, 1])


def reset(config: SimConfig, mode: Mode, seed: int):
    """Initial ``(WorldState, observation)``; the jaywalk start is drawn here."""
    if not config.is_standard_gap:
        log.warning("nonstandard initial gap %.1f m", config.initial_gap_m)
    rng = np.random.default_rng([seed, 0])
    start = -1
    if mode.behavior == "Jaywalk":
        lo, hi = mode.jaywalk_start
        start = int(rng.integers(lo, hi + 1))
    state = WorldState(x_c=-float(config.initial_gap_m), v_c=float(config.v0), y_p=0.0, v_p=0.0,
                       light=light_at(0, config.light_cycle), t=0, walking_started=False,
                       jaywalk_start=start)
    obs = observe(state, None, config)
    return replace(state, obs=tuple(obs)), obs


def pedestrian_policy(state: WorldState, mode: Mode, rng, config: SimConfig) -> float:
    """Lateral acceleration of the pedestrian for this step."""
    if state.walking_started:
        # constant walking speed; step() stops the pedestrian at the far curb
        return 0.0
    if mode.behavior == "Compliant":
        if state.light == RED:
            go = False
        elif state.light == YELLOW:
            go = rng.random() < mode.yellow_go_prob
        else:
            go = True
    else:
        go = state.t >= state.jaywalk_start
    return config.walk_speed / config.dt if go else 0.0


def collision_check(state: WorldState, config: SimConfig) -> bool:
    lo, hi = config.lane_band
    return abs(state.x_c) <= config.crossing_halfwidth and lo < state.y_p < hi


def reward(state: WorldState, action: int, collision: bool, reached_goal: bool,
           config: SimConfig) -> float:
    r = 0.1 * (state.v_c / config.v_max) - 0.01
    if reached_goal:
        r += 1.0
    if collision:
        r -= 10.0
    return r


def step(state: WorldState, action: int, mode: Mode, rng, config: SimConfig) -> StepResult:
    if state.done:
        raise UsageError("step called on a terminal state")
    value = ACTION_VALUES[action]
    v = min(max(state.v_c + value * config.a_max * config.dt, 0.0), config.v_max)
    x = state.x_c + v * config.dt

    a_p = pedestrian_policy(state, mode, rng, config)
    started = state.walking_started or a_p > 0
    v_p = state.v_p + a_p * config.dt
    y_p = state.y_p + v_p * config.dt
    if y_p >= config.lane_width:
        y_p = config.lane_width
        v_p = 0.0
    t = state.t + 1
    nxt = WorldState(x_c=x, v_c=v, y_p=y_p, v_p=v_p, light=light_at(t, config.light_cycle), t=t,
                     walking_started=started, jaywalk_start=state.jaywalk_start)
    collision = collision_check(nxt, config)
    goal = (not collision) and x > config.crossing_halfwidth
    if collision:
        reason = "Collision"
    elif goal:
        reason = "Goal"
    elif t >= config.h_max:
        reason = "Timeout"
    else:
        reason = None
    obs = observe(nxt, state.obs, config)
    nxt = replace(nxt, obs=tuple(obs), done=reason is not None)
    r = reward(nxt, action, collision, goal, config)
    return StepResult(nxt, obs, r, collision, reason is not None, reason)


class CrossingEnv:
    """Stateful wrapper: one instance and one RNG stream per episode."""

    def __init__(self, config: SimConfig, mode: Mode):
        self.config = config
        self.mode = mode
        self.state = None
        self.rng = None

    def reset(self, seed: int) -> np.ndarray:
        self.state, obs = reset(self.config, self.mode, seed)
        self.rng = step_rng(seed)
        return obs

    def step(self, action: int) -> StepResult:
        res = step(self.state, action, self.mode, self.rng, self.config)
        self.state = res.next_state
        return res


TRACE_FIELDS = ("t", "x_c", "v_c", "y_p", "v_p", "light", "action", "reward", "collision")


def write_trace(path, rows):
    """Dump an episode trace as CSV; ``rows`` are dicts keyed by TRACE_FIELDS."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in TRACE_FIELDS})
