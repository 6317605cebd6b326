"""Stochastic discrete-action policy network and its offline meta-training."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import env as E
from . import kernels

log = logging.getLogger(__name__)

# observation normalisation: distances / 50 m, speeds / v_max, light / 2
DIST_SCALE = 50.0
SPEED_SCALE = 15.0
LIGHT_SCALE = 2.0
_SCALE = np.array([DIST_SCALE, DIST_SCALE, SPEED_SCALE, SPEED_SCALE, LIGHT_SCALE] * 2)
# entries that may carry the -1 "unsensed" marker (everything except current d_c, v_c)
_MASKABLE = np.array([False, True, False, True, True] + [True] * 5)


class NumericError(ArithmeticError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Arch:
    input_dim: int = E.OBS_DIM
    hidden: int = 64
    n_actions: int = E.N_ACTIONS
    activation: str = "tanh"

    @property
    def n_params(self) -> int:
        if self.hidden == 0:
            return self.n_actions * self.input_dim + self.n_actions
        return (self.hidden * self.input_dim + self.hidden
                + self.n_actions * self.hidden + self.n_actions)

    @property
    def dims(self):
        return self.input_dim, self.hidden, self.n_actions

    def to_dict(self):
        return {"input_dim": self.input_dim, "hidden": self.hidden,
                "n_actions": self.n_actions, "activation": self.activation}


DEFAULT_ARCH = Arch()


def _version_of(theta: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(theta, dtype=np.float64).tobytes()).hexdigest()[:12]


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Immutable parameter vector plus architecture; ``version`` is a content hash."""

    theta: np.ndarray
    arch: Arch = DEFAULT_ARCH
    lineage: tuple = ()
    version: str = field(default="", init=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size != self.arch.n_params:
            raise ValueError(f"theta has {theta.size} entries, arch needs {self.arch.n_params}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "lineage", tuple(self.lineage))
        object.__setattr__(self, "version", _version_of(theta))

    def __eq__(self, other):
        return (isinstance(other, PolicyParams) and self.arch == other.arch
                and self.lineage == other.lineage
                and np.array_equal(self.theta, other.theta))

    def __hash__(self):
        return hash(self.version)

    def with_theta(self, theta, note=None) -> "PolicyParams":
        lineage = self.lineage + ((note,) if note else ())
        return PolicyParams(theta, self.arch, lineage)


def init_params(seed: int, arch: Arch = DEFAULT_ARCH, scale: float = 0.05) -> PolicyParams:
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.n_params)
    i, h, o = arch.dims
    if h == 0:
        theta[: o * i] = rng.uniform(-scale, scale, o * i)
    else:
        theta[: h * i] = rng.uniform(-scale, scale, h * i)
        w2 = h * i + h
        theta[w2: w2 + o * h] = rng.uniform(-scale, scale, o * h)
    return PolicyParams(theta, arch, (f"init:{seed}",))


def normalize(obs) -> np.ndarray:
    """Scale raw observations (one row or a batch); -1 markers pass through."""
    obs = np.asarray(obs, dtype=np.float64)
    scaled = obs / _SCALE
    return np.ascontiguousarray(np.where(_MASKABLE & (obs == E.MASK), E.MASK, scaled))


def _check(params: PolicyParams):
    if not np.all(np.isfinite(params.theta)):
        raise NumericError("policy parameters contain non-finite values")


def log_softmax_batch(params: PolicyParams, X_norm: np.ndarray) -> np.ndarray:
    """Full log-probabilities for already-normalised inputs (raw network inputs)."""
    return kernels.log_softmax(params.theta, X_norm, *params.arch.dims)


def _inputs(params: PolicyParams, obs) -> np.ndarray:
    if params.arch.input_dim == E.OBS_DIM:
        return normalize(np.atleast_2d(obs))
    return np.ascontiguousarray(np.atleast_2d(np.asarray(obs, dtype=np.float64)))


def action_probs(params: PolicyParams, obs) -> np.ndarray:
    _check(params)
    lp = kernels.log_softmax(params.theta, _inputs(params, obs), *params.arch.dims)[0]
    p = np.exp(lp)
    return p / p.sum()


def sample_action(probs, rng) -> int:
    """Inverse-CDF draw with fixed index order."""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    i = int(np.searchsorted(cdf, u, side="right"))
    return min(i, len(cdf) - 1)


def log_prob_grad(params: PolicyParams, obs, action: int) -> np.ndarray:
    X = _inputs(params, obs)
    return kernels.score_grad(params.theta, X, np.array([action], dtype=np.int64),
                              np.ones(1), *params.arch.dims)


def kl_divergence(params_old: PolicyParams, params_new: PolicyParams, states) -> float:
    """Mean over states of KL(pi(.|s; old) || pi(.|s; new))."""
    if len(states) == 0:
        raise E.UsageError("kl_divergence needs at least one state")
    X = _inputs(params_old, np.asarray(states))
    return mean_kl_inputs(params_old.theta, params_new.theta, X, params_old.arch)


def mean_kl_inputs(theta_old, theta_new, X, arch: Arch, lp_old=None) -> float:
    if lp_old is None:
        lp_old = kernels.log_softmax(theta_old, X, *arch.dims)
    lp_new = kernels.log_softmax(theta_new, X, *arch.dims)
    kl = (np.exp(lp_old) * (lp_old - lp_new)).sum(axis=1)
    return float(np.maximum(kl, 0.0).mean())


# --------------------------------------------------------------------------
# offline meta-training


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 2000
    lr: float = 0.001
    gamma: float = 0.99
    baseline: bool = True
    baseline_decay: float = 0.9
    batch_episodes: int = 8
    optimizer: str = "adam"
    grad_clip: float = 10.0
    modes: tuple = ("Compliant", "Jaywalk")
    prior: tuple = (0.5, 0.5)
    gaps: tuple = E.STANDARD_GAPS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise E.ConfigError("gamma must lie in (0, 1]")
        if len(self.modes) != len(self.prior) or not self.modes:
            raise E.ConfigError("modes and prior must be non-empty and aligned")
        p = np.asarray(self.prior, dtype=float)
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise E.ConfigError("prior must be a probability vector")
        if self.optimizer not in ("adam", "sgd"):
            raise E.ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.episodes < 0 or self.batch_episodes < 1:
            raise E.ConfigError("episodes must be >= 0 and batch_episodes >= 1")

    @classmethod
    def from_dict(cls, d):
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise E.ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class _Adam:
    def __init__(self, n, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def rollout(params: PolicyParams, sim: E.SimConfig, mode: E.Mode, seed: int, policy_rng,
            record_states=False):
    """Run one episode with the raw policy; returns (obs, actions, rewards, info)."""
    state, obs = E.reset(sim, mode, seed)
    rng = E.step_rng(seed)
    obs_list, acts, rews, states = [], [], [], []
    res = None
    while True:
        probs = action_probs(params, obs)
        a = sample_action(probs, policy_rng)
        obs_list.append(obs)
        if record_states:
            states.append(state)
        acts.append(a)
        res = E.step(state, a, mode, rng, sim)
        rews.append(res.reward)
        state, obs = res.next_state, res.obs
        if res.done:
            break
    info = {"final_obs": obs, "done_reason": res.done_reason, "collision": res.collision,
            "states": states, "final_state": state}
    return np.array(obs_list), np.array(acts, dtype=np.int64), np.array(rews), info


def _discounted(rewards, gamma):
    out = np.empty_like(rewards)
    g = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        g = rewards[i] + gamma * g
        out[i] = g
    return out


def resolve_modes(names, registry=None):
    registry = registry or {m.name: m for m in (E.COMPLIANT, E.JAYWALK)}
    try:
        return [registry[n] for n in names]
    except KeyError as exc:
        raise E.ConfigError(f"unknown mode {exc.args[0]!r}") from None


def train_meta(config: TrainConfig, sim: E.SimConfig = E.SimConfig(), init: PolicyParams = None,
               registry=None) -> PolicyParams:
    """REINFORCE with a moving-average baseline over modes drawn from the prior.

    Gaps are drawn uniformly from ``config.gaps``; the gradient is averaged over
    ``batch_episodes`` episodes before each (clipped) parameter update.
    """
    modes = resolve_modes(config.modes, registry)
    prior = np.asarray(config.prior, dtype=float)
    params = init if init is not None else init_params(config.seed)
    if config.lr == 0.0 or config.episodes == 0:
        return params
    theta = params.theta.copy()
    rng = np.random.default_rng([config.seed, 7])
    opt = _Adam(theta.size, config.lr) if config.optimizer == "adam" else None
    sims = {g: E.SimConfig(**{**sim.to_dict(), "initial_gap_m": float(g)}) for g in config.gaps}
    baseline = None
    g_acc = np.zeros_like(theta)
    in_batch = 0
    for ep in range(config.episodes):
        mode = modes[rng.choice(len(modes), p=prior)]
        sim_ep = sims[config.gaps[rng.integers(len(config.gaps))]]
        cur = PolicyParams(theta, params.arch)
        obs, acts, rews, _ = rollout(cur, sim_ep, mode, int(rng.integers(2**31)), rng)
        returns = _discounted(rews, config.gamma)
        adv = returns
        if config.baseline:
            if baseline is None:
                baseline = float(returns.mean())
            adv = returns - baseline
            baseline = (config.baseline_decay * baseline
                        + (1 - config.baseline_decay) * float(returns.mean()))
        g_acc += kernels.score_grad(theta, _inputs(cur, obs), acts, adv, *params.arch.dims)
        in_batch += 1
        if in_batch < config.batch_episodes and ep != config.episodes - 1:
            continue
        g = g_acc / in_batch
        g_acc[:] = 0.0
        in_batch = 0
        norm = float(np.linalg.norm(g))
        if not np.isfinite(norm):
            raise TrainingError(f"non-finite gradient at episode {ep} "
                                f"(last return {rews.sum():.3f}, baseline {baseline})")
        if norm > config.grad_clip:
            g *= config.grad_clip / norm
        theta = theta + (opt.step(g) if opt else config.lr * g)
        if not np.all(np.isfinite(theta)):
            raise TrainingError(f"parameters diverged at episode {ep}")
    return params.with_theta(theta, f"train:{config.seed}:{config.episodes}")


def evaluate_returns(params, sim: E.SimConfig, modes, prior, episodes=200, seed=12345,
                     gaps=E.STANDARD_GAPS):
    """Undiscounted returns over ``episodes`` held-out episodes; ``params=None`` is uniform-random."""
    rng = np.random.default_rng([seed, 11])
    out = np.empty(episodes)
    uniform = np.full(E.N_ACTIONS, 1.0 / E.N_ACTIONS)
    for i in range(episodes):
        mode = modes[rng.choice(len(modes), p=prior)]
        gap = float(gaps[rng.integers(len(gaps))])
        sim_ep = E.SimConfig(**{**sim.to_dict(), "initial_gap_m": gap})
        ep_seed = int(rng.integers(2**31))
        state, obs = E.reset(sim_ep, mode, ep_seed)
        srng = E.step_rng(ep_seed)
        total = 0.0
        while True:
            probs = uniform if params is None else action_probs(params, obs)
            res = E.step(state, sample_action(probs, rng), mode, srng, sim_ep)
            total += res.reward
            state, obs = res.next_state, res.obs
            if res.done:
                break
        out[i] = total
    return out
