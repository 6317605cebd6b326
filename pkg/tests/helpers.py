"""Shared test oracles (synthetic banks, a tiny enumerable MDP) and the acceptance registry."""
import itertools

import numpy as np

from numerla import policy as P
from numerla.cola import Bucket, SampleBank


def synthetic_bank(params, rows_by_mode, K):
    """Bank from explicit windows: ``rows_by_mode[mode] = (obs, actions, rewards)``.

    Behaviour log-probabilities are computed under ``params``; every step is valid.
    """
    bank = SampleBank(K, params.version)
    for mode, (obs, actions, rewards) in rows_by_mode.items():
        obs = np.asarray(obs, dtype=float)
        actions = np.asarray(actions, dtype=np.int64)
        N = len(actions)
        X = P._inputs(params, obs[:, :K].reshape(N * K, -1))
        lp = P.log_softmax_batch(params, X)[np.arange(N * K), actions.ravel()].reshape(N, K)
        bank.buckets[mode] = Bucket(obs, actions, np.asarray(rewards, dtype=float), lp,
                                    np.ones((N, K), bool), None)
    return bank


class TinyMDP:
    """Four one-hot states, two actions, stochastic transitions; small enough to enumerate."""

    arch = P.Arch(input_dim=4, hidden=0, n_actions=2)

    def __init__(self, seed=0, rewards=(-1.0, 2.0)):
        rng = np.random.default_rng(seed)
        self.P = rng.dirichlet(np.ones(4), size=(4, 2))   # P[s, a] -> next-state probs
        self.R = rng.uniform(*rewards, size=(4, 2))
        self.rho = rng.dirichlet(np.ones(4))

    def params(self, seed, scale=0.7):
        rng = np.random.default_rng(seed)
        return P.PolicyParams(rng.normal(scale=scale, size=self.arch.n_params), self.arch)

    def pi(self, params):
        return np.exp(P.log_softmax_batch(params, np.eye(4)))

    def exact_value(self, params, K):
        """E[sum of K rewards] by summing over every state/action sequence."""
        pi = self.pi(params)
        total = 0.0
        for s0 in range(4):
            for seq in itertools.product(range(2), range(4), repeat=K):
                prob, ret, s = self.rho[s0], 0.0, s0
                for k in range(K):
                    a, s_next = seq[2 * k], seq[2 * k + 1]
                    prob *= pi[s, a] * self.P[s, a, s_next]
                    ret += self.R[s, a]
                    s = s_next
                total += prob * ret
        return total

    def windows(self, params, K, N, rng):
        pi = self.pi(params)
        obs = np.zeros((N, K + 1, 4))
        acts = np.zeros((N, K), np.int64)
        rews = np.zeros((N, K))
        for i in range(N):
            s = rng.choice(4, p=self.rho)
            for k in range(K):
                a = rng.choice(2, p=pi[s])
                obs[i, k, s] = 1.0
                acts[i, k] = a
                rews[i, k] = self.R[s, a]
                s = rng.choice(4, p=self.P[s, a])
            obs[i, K, s] = 1.0
        return obs, acts, rews


# criterion number -> (passed, detail); printed at the end of the session
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return passed
