"""Pure numpy implementation of the policy-network kernels.

Parameter layout (flat, row-major) for an ``n_in -> n_hid (tanh) -> n_out``
network is ``W1 (n_hid, n_in) | b1 (n_hid) | W2 (n_out, n_hid) | b2 (n_out)``.
With ``n_hid == 0`` the network is a linear softmax: ``W (n_out, n_in) | b``.
"""
import numpy as np


def _unpack(theta, n_in, n_hid, n_out):
    if n_hid == 0:
        W = theta[: n_out * n_in].reshape(n_out, n_in)
        b = theta[n_out * n_in: n_out * n_in + n_out]
        return W, b, None, None
    o = 0
    W1 = theta[o: o + n_hid * n_in].reshape(n_hid, n_in)
    o += n_hid * n_in
    b1 = theta[o: o + n_hid]
    o += n_hid
    W2 = theta[o: o + n_out * n_hid].reshape(n_out, n_hid)
    o += n_out * n_hid
    b2 = theta[o: o + n_out]
    return W1, b1, W2, b2


def _logits(theta, X, n_in, n_hid, n_out):
    W1, b1, W2, b2 = _unpack(theta, n_in, n_hid, n_out)
    if n_hid == 0:
        return X @ W1.T + b1, None
    H = np.tanh(X @ W1.T + b1)
    return H @ W2.T + b2, H


def _log_softmax(z):
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def log_softmax(theta, X, n_in, n_hid, n_out):
    """Row-wise log action probabilities, shape ``(len(X), n_out)``."""
    if len(X) == 0:
        return np.empty((0, n_out))
    z, _ = _logits(theta, X, n_in, n_hid, n_out)
    return _log_softmax(z)


def score_grad(theta, X, actions, weights, n_in, n_hid, n_out):
    """Sum over rows of ``weights[j] * grad_theta log pi(actions[j] | X[j])``."""
    if len(X) == 0:
        return np.zeros_like(theta)
    z, H = _logits(theta, X, n_in, n_hid, n_out)
    dz = -np.exp(_log_softmax(z))
    dz[np.arange(len(actions)), actions] += 1.0
    dz *= weights[:, None]
    if n_hid == 0:
        return np.concatenate([(dz.T @ X).ravel(), dz.sum(axis=0)])
    W1, b1, W2, b2 = _unpack(theta, n_in, n_hid, n_out)
    gW2 = dz.T @ H
    gb2 = dz.sum(axis=0)
    dh = (dz @ W2) * (1.0 - H * H)
    gW1 = dh.T @ X
    gb1 = dh.sum(axis=0)
    return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
