"""Online lookahead adaptation: K-step conjectures and the trust-region update.

The sample bank stores, per mode, overlapping K-step windows cut from
rollouts of the meta-policy together with the behaviour log-probabilities.
A conjecture is a belief-weighted draw of windows; the policy is then moved
by gradient ascent on the importance-weighted K-step return subject to a
bound on the empirical KL divergence from the current policy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import env as E
from . import kernels
from .belief import Belief
from .policy import (NumericError, PolicyParams, _inputs, action_probs, mean_kl_inputs,
                     sample_action)

log = logging.getLogger(__name__)

LOG_RATIO_CLIP = 20.0
PROJECT_STEPS = 8
# world-state snapshot columns stored for each window start
WS_FIELDS = ("x_c", "v_c", "y_p", "v_p", "t", "walking_started", "jaywalk_start", "gap0")


class StaleBankError(RuntimeError):
    """Samples were collected under a different policy version."""


class BankCoverageError(RuntimeError):
    """A mode with positive belief has no samples."""


@dataclass(eq=False)
class Bucket:
    obs: np.ndarray        # (N, K+1, obs_dim) raw observations
    actions: np.ndarray    # (N, K) int64
    rewards: np.ndarray    # (N, K)
    logp: np.ndarray       # (N, K) behaviour log-probabilities
    valid: np.ndarray      # (N, K) bool; False marks absorbing padding
    start_states: np.ndarray = None  # (N, len(WS_FIELDS)) or None

    def __len__(self):
        return len(self.actions)

    def aligned(self, t, gap0=None):
        """Indices of windows starting at step ``t`` (nearest earlier step if none)
        in episodes whose initial gap is closest to ``gap0``; None without metadata."""
        if self.start_states is None or len(self) == 0:
            return None
        if getattr(self, "_index", None) is None:
            index = {}
            for i, (g, st) in enumerate(zip(self.start_states[:, 7], self.start_states[:, 4])):
                index.setdefault(float(g), {}).setdefault(int(st), []).append(i)
            self._index = {g: {st: np.array(v) for st, v in d.items()} for g, d in index.items()}
        gaps = np.array(sorted(self._index))
        g = gaps[0] if gap0 is None else gaps[int(np.argmin(np.abs(gaps - gap0)))]
        if gap0 is None:
            by_t = {}
            for d in self._index.values():
                for st, idx in d.items():
                    by_t.setdefault(st, []).append(idx)
            by_t = {st: np.concatenate(v) for st, v in by_t.items()}
        else:
            by_t = self._index[float(g)]
        steps = np.array(sorted(by_t))
        earlier = steps[steps <= t]
        st = earlier[-1] if len(earlier) else steps[0]
        return by_t[int(st)]

    def equals(self, other) -> bool:
        names = ("obs", "actions", "rewards", "logp", "valid")
        same = all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)
        if (self.start_states is None) != (other.start_states is None):
            return False
        if self.start_states is not None:
            same = same and np.array_equal(self.start_states, other.start_states)
        return same

    @classmethod
    def empty(cls, K, obs_dim=E.OBS_DIM):
        return cls(np.zeros((0, K + 1, obs_dim)), np.zeros((0, K), np.int64), np.zeros((0, K)),
                   np.zeros((0, K)), np.zeros((0, K), bool), np.zeros((0, len(WS_FIELDS))))


@dataclass(eq=False)
class SampleBank:
    K: int
    policy_version: str
    buckets: dict = field(default_factory=dict)

    @property
    def mode_ids(self):
        return tuple(self.buckets)

    @property
    def counts(self):
        return {m: len(b) for m, b in self.buckets.items()}

    @property
    def usable(self) -> bool:
        return any(len(b) > 0 for b in self.buckets.values())

    def covers(self, mode_id) -> bool:
        return mode_id in self.buckets and len(self.buckets[mode_id]) > 0

    def __eq__(self, other):
        return (isinstance(other, SampleBank) and self.K == other.K
                and self.policy_version == other.policy_version
                and self.mode_ids == other.mode_ids
                and all(self.buckets[m].equals(other.buckets[m]) for m in self.mode_ids))

    def samples(self, mode_id):
        b = self.buckets[mode_id]
        return [LookaheadSample(b.obs[i], b.actions[i], b.rewards[i], b.logp[i], b.valid[i],
                                mode_id) for i in range(len(b))]


@dataclass(frozen=True, eq=False)
class LookaheadSample:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    logp: np.ndarray
    valid: np.ndarray
    mode_id: str

    @property
    def padded(self) -> bool:
        return not bool(self.valid.all())


class Conjecture:
    """M drawn windows, stored flat for the kernels; iterates as LookaheadSample."""

    def __init__(self, bank: SampleBank, picks):
        self.bank = bank
        self.picks = list(picks)  # (mode_id, index)
        self.policy_version = bank.policy_version
        K = bank.K
        if self.picks:
            rows = [self._row(m, i) for m, i in self.picks]
            self.obs = np.stack([r[0] for r in rows])
            self.actions = np.stack([r[1] for r in rows])
            self.rewards = np.stack([r[2] for r in rows])
            self.logp = np.stack([r[3] for r in rows])
            self.valid = np.stack([r[4] for r in rows])
        else:
            dim = next((b.obs.shape[2] for b in bank.buckets.values()), E.OBS_DIM)
            self.obs = np.zeros((0, K + 1, dim))
            self.actions = np.zeros((0, K), np.int64)
            self.rewards = np.zeros((0, K))
            self.logp = np.zeros((0, K))
            self.valid = np.zeros((0, K), bool)
        self._flat = None

    def _row(self, mode_id, i):
        b = self.bank.buckets[mode_id]
        return b.obs[i], b.actions[i], b.rewards[i], b.logp[i], b.valid[i]

    def __len__(self):
        return len(self.picks)

    def __iter__(self):
        for j, (m, _) in enumerate(self.picks):
            yield LookaheadSample(self.obs[j], self.actions[j], self.rewards[j], self.logp[j],
                                  self.valid[j], m)

    @property
    def mode_counts(self):
        out = {}
        for m, _ in self.picks:
            out[m] = out.get(m, 0) + 1
        return out

    def flat(self, params: PolicyParams):
        """Valid (state, action) rows as network inputs, with their sample owner."""
        if self._flat is None:
            K = self.actions.shape[1]
            mask = self.valid
            owner = np.repeat(np.arange(len(self)), K).reshape(len(self), K)[mask]
            states = self.obs[:, :K][mask]
            X = _inputs(params, states) if len(states) else np.zeros((0, self.obs.shape[2]))
            self._flat = (X, self.actions[mask].astype(np.int64), self.logp[mask], owner,
                          (self.rewards * mask).sum(axis=1))
        return self._flat


# ---------------------------------------------------------------------------
# bank construction


def windows_from_episode(obs, actions, rewards, logp, final_obs, K, states=None):
    """Overlapping K-step windows starting at every step; tails are padded."""
    T = len(actions)
    all_obs = np.vstack([obs, final_obs[None, :]])
    W_obs = np.empty((T, K + 1, all_obs.shape[1]))
    W_a = np.zeros((T, K), np.int64)
    W_r = np.zeros((T, K))
    W_lp = np.zeros((T, K))
    W_v = np.zeros((T, K), bool)
    for t in range(T):
        n = min(K, T - t)
        W_obs[t, : n + 1] = all_obs[t: t + n + 1]
        W_obs[t, n + 1:] = all_obs[t + n]
        W_a[t, :n] = actions[t: t + n]
        W_r[t, :n] = rewards[t: t + n]
        W_lp[t, :n] = logp[t: t + n]
        W_v[t, :n] = True
    ws = None
    if states is not None:
        gap0 = -states[0].x_c
        ws = np.array([[getattr(s, f) for f in WS_FIELDS[:-1]] + [gap0] for s in states], dtype=float)
    return W_obs, W_a, W_r, W_lp, W_v, ws


def build_sample_bank(params: PolicyParams, modes, episodes_per_mode: int, K: int, seed: int,
                      sim: E.SimConfig = E.SimConfig(), gaps=E.STANDARD_GAPS) -> SampleBank:
    """Roll out ``params`` in every mode (gaps round-robin) and slice K-step windows."""
    if K < 1:
        raise E.ConfigError("K must be >= 1")
    bank = SampleBank(K, params.version)
    for mi, mode in enumerate(modes):
        if not isinstance(mode, E.Mode):
            raise E.ConfigError(f"mode {mode!r} is not available in the simulator")
        parts = []
        rng = np.random.default_rng([seed, mi, 3])
        for ep in range(episodes_per_mode):
            gap = float(gaps[ep % len(gaps)])
            sim_ep = E.SimConfig(**{**sim.to_dict(), "initial_gap_m": gap})
            ep_seed = int(rng.integers(2**31))
            state, obs = E.reset(sim_ep, mode, ep_seed)
            srng = E.step_rng(ep_seed)
            O, A, R, LP, S = [], [], [], [], []
            while True:
                p = action_probs(params, obs)
                a = sample_action(p, rng)
                O.append(obs)
                A.append(a)
                LP.append(math.log(p[a]))
                S.append(state)
                res = E.step(state, a, mode, srng, sim_ep)
                R.append(res.reward)
                state, obs = res.next_state, res.obs
                if res.done:
                    break
            parts.append(windows_from_episode(np.array(O), np.array(A), np.array(R),
                                              np.array(LP), obs, K, S))
        if parts:
            cols = list(zip(*parts))
            bucket = Bucket(*[np.concatenate(c) for c in cols])
        else:
            bucket = Bucket.empty(K)
        bank.buckets[mode.name] = bucket
    if not bank.usable:
        log.warning("sample bank is empty and cannot be used for adaptation")
    return bank


# ---------------------------------------------------------------------------
# conjecture and surrogate


def sample_conjecture(bank: SampleBank, b: Belief, M: int, K: int, rng, t: int = None,
                      gap0: float = None) -> Conjecture:
    """M windows: mode ~ belief, then a uniform window from that mode's bucket.

    With ``t`` the bucket is narrowed to windows that start at step ``t`` of
    bank episodes with the closest initial gap to ``gap0``, i.e. the
    K-step futures from the current point of the episode.
    """
    if K != bank.K:
        raise E.ConfigError(f"bank holds {bank.K}-step windows, K={K} requested")
    probs = np.asarray(b.probs, dtype=float)
    for mid, p in zip(b.mode_ids, probs):
        if p > 0 and not bank.covers(mid):
            raise BankCoverageError(f"no samples for mode {mid!r} with belief {p:.3g}")
    if M == 0:
        return Conjecture(bank, [])
    cdf = np.cumsum(probs)
    pools = {}
    picks = []
    for _ in range(M):
        u = rng.random() * cdf[-1]
        j = min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)
        mid = b.mode_ids[j]
        if t is None:
            picks.append((mid, int(rng.integers(len(bank.buckets[mid])))))
            continue
        if mid not in pools:
            pools[mid] = bank.buckets[mid].aligned(t, gap0)
        pool = pools[mid]
        if pool is None:
            picks.append((mid, int(rng.integers(len(bank.buckets[mid])))))
        else:
            picks.append((mid, int(pool[rng.integers(len(pool))])))
    return Conjecture(bank, picks)


def _check_version(theta_old: PolicyParams, samples: Conjecture):
    if theta_old.version != samples.policy_version:
        raise StaleBankError(f"samples collected under policy {samples.policy_version}, "
                             f"ratio requested against {theta_old.version}")


class _Surrogate:
    """Importance-weighted K-step return and its gradient on a fixed conjecture."""

    def __init__(self, samples: Conjecture, like: PolicyParams, baseline: bool = False):
        self.arch = like.arch
        self.M = len(samples)
        self.X, self.actions, self.logp_b, self.owner, self.returns = samples.flat(like)
        if baseline and self.M:
            # a constant shift leaves the expected objective's maximiser unchanged
            self.returns = self.returns - self.returns.mean()
        self.clip_count = 0

    def _log_ratio(self, lp_rows):
        lr = np.zeros(self.M)
        np.add.at(lr, self.owner, lp_rows - self.logp_b)
        return lr

    def rows_logp(self, theta, full=None):
        if full is None:
            full = kernels.log_softmax(theta, self.X, *self.arch.dims)
        return full[np.arange(len(self.actions)), self.actions]

    def value(self, theta, full=None):
        if self.M == 0:
            return 0.0
        lr = self._log_ratio(self.rows_logp(theta, full))
        clipped = lr > LOG_RATIO_CLIP
        if clipped.any():
            self.clip_count += int(clipped.sum())
        w = np.exp(np.minimum(lr, LOG_RATIO_CLIP))
        return float(np.mean(w * self.returns))

    def grad(self, theta):
        if self.M == 0:
            return np.zeros_like(theta)
        lr = self._log_ratio(self.rows_logp(theta))
        w = np.where(lr > LOG_RATIO_CLIP, 0.0, np.exp(np.minimum(lr, LOG_RATIO_CLIP)))
        coef = (w * self.returns / self.M)[self.owner]
        return kernels.score_grad(theta, self.X, self.actions, coef, *self.arch.dims)


def surrogate_objective(theta_new: PolicyParams, theta_old: PolicyParams, samples: Conjecture) -> float:
    _check_version(theta_old, samples)
    return _Surrogate(samples, theta_new).value(theta_new.theta)


def surrogate_gradient(theta_new: PolicyParams, theta_old: PolicyParams, samples: Conjecture) -> np.ndarray:
    _check_version(theta_old, samples)
    return _Surrogate(samples, theta_new).grad(theta_new.theta)


@dataclass(frozen=True, eq=False)
class CLOResult:
    theta_new: PolicyParams
    surrogate_before: float
    surrogate_after: float
    kl: float
    accepted: bool
    iterations: int
    clip_count: int = 0


def adapt_mask(arch, subspace: str):
    """0/1 vector selecting the adapted coordinates; None means all of them."""
    if subspace == "all":
        return None
    i, h, o = arch.dims
    n = arch.n_params
    mask = np.zeros(n)
    if subspace == "output":
        mask[n - o * max(h, i) - o if h else 0:] = 1.0
    elif subspace == "bias":
        mask[n - o:] = 1.0
    else:
        raise E.ConfigError(f"unknown adaptation subspace {subspace!r}")
    return mask


def solve_clo(theta: PolicyParams, b: Belief, bank: SampleBank, K: int, M: int, delta: float,
              rng, n_iter: int = 5, max_backtracks: int = 20, samples: Conjecture = None,
              t: int = None, gap0: float = None, baseline: bool = False,
              subspace: str = "all") -> CLOResult:
    """KL-constrained ascent on the lookahead surrogate around ``theta``.

    Each iteration proposes ``cur + eta * g``; a proposal outside the KL ball
    is pulled back radially (towards ``theta``) onto its boundary, and ``eta``
    is halved until the projected point does not lower the surrogate.

    ``theta`` is the policy the bank was collected with: it is the ratio
    denominator, the centre of the trust region and the starting point.
    With ``baseline`` the conjecture's mean return is subtracted from every
    sample first, and before/after values refer to that centred surrogate.
    ``subspace`` restricts the ascent to "output" (last layer) or "bias"
    (output biases) parameters; the rest stay at ``theta``.
    """
    mask = adapt_mask(theta.arch, subspace)
    if samples is None:
        if not bank.usable:
            return CLOResult(theta, 0.0, 0.0, 0.0, False, 0)
        samples = sample_conjecture(bank, b, M, K, rng, t, gap0)
    _check_version(theta, samples)
    sur = _Surrogate(samples, theta, baseline)
    f0 = sur.value(theta.theta)
    if len(samples) == 0 or not delta > 0 or len(sur.X) == 0:
        return CLOResult(theta, f0, f0, 0.0, False, 0, sur.clip_count)

    arch = theta.arch
    base = theta.theta
    lp_base = kernels.log_softmax(base, sur.X, *arch.dims)
    p_base = np.exp(lp_base)

    def kl_to(cand):
        full = kernels.log_softmax(cand, sur.X, *arch.dims)
        kl = (p_base * (lp_base - full)).sum(axis=1)
        return float(np.maximum(kl, 0.0).mean()), full

    def project(cand):
        # pull a point outside the ball back along its displacement from base
        kl, full = kl_to(cand)
        if kl <= delta:
            return cand, kl, full
        d = cand - base
        lo, hi = 0.0, 1.0
        for _ in range(PROJECT_STEPS):
            mid = 0.5 * (lo + hi)
            if kl_to(base + mid * d)[0] <= delta:
                lo = mid
            else:
                hi = mid
        cand = base + lo * d
        kl, full = kl_to(cand)
        return cand, kl, full

    cur, f_cur, kl_cur = base, f0, 0.0
    accepted = False
    eta = None
    it = 0
    for it in range(1, n_iter + 1):
        g = sur.grad(cur)
        if mask is not None:
            g = g * mask
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite surrogate gradient")
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            it -= 1
            break
        if eta is None:
            # step length from the local quadratic KL model along g
            eps = 1e-4 / gnorm
            kl_eps, _ = kl_to(cur + eps * g)
            eta = eps * math.sqrt(delta / kl_eps) if kl_eps > 1e-300 else 1.0 / gnorm
            eta = min(eta, 1e3 / gnorm)
        else:
            eta *= 2.0
        step_ok = False
        for _ in range(max_backtracks + 1):
            cand = cur + eta * g
            if np.all(np.isfinite(cand)):
                cand, kl, full = project(cand)
                if kl <= delta:
                    f = sur.value(cand, full)
                    if np.isfinite(f) and f >= f_cur:
                        step_ok = True
                        break
            eta *= 0.5
        if not step_ok:
            break
        improved = f > f_cur
        cur, f_cur, kl_cur = cand, f, kl
        accepted = accepted or improved
        if not improved:
            break
    if not accepted:
        return CLOResult(theta, f0, f0, 0.0, False, it, sur.clip_count)
    new = theta.with_theta(cur)
    return CLOResult(new, f0, f_cur, kl_cur, True, it, sur.clip_count)


def cola_step(theta_t: PolicyParams, b_t: Belief, s_t, bank: SampleBank, K: int, M: int,
              delta: float, rng, meta: PolicyParams = None, **solver) -> PolicyParams:
    """One pass of the adaptation loop body; returns the accepted update or ``theta_t``.

    The lookahead problem is solved around ``meta`` (default ``theta_t``), the
    policy whose rollouts fill the bank, so importance ratios stay within the
    trust region no matter how often the loop runs. ``s_t`` only enters
    through the caller's belief.
    """
    if not bank.usable:
        return theta_t
    base = meta if meta is not None else theta_t
    res = solve_clo(base, b_t, bank, K, M, delta, rng, **solver)
    return res.theta_new if res.accepted else theta_t
