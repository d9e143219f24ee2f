"""Minimal fully-connected network with manual backprop (numpy only)."""

from __future__ import annotations

import numpy as np


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda a: (a > 0).astype(a.dtype)),
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "sigmoid": (_sigmoid, lambda a: a * (1.0 - a)),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_glorot(sizes, rng):
    coefs, intercepts = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        coefs.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        intercepts.append(np.zeros(fan_out))
    return coefs, intercepts


def init_normal(sizes, rng, scale=1.0):
    coefs = [rng.normal(0.0, scale, size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    intercepts = [rng.normal(0.0, scale, size=b) for b in sizes[1:]]
    return coefs, intercepts


def forward(X, coefs, intercepts, hidden, output, dropout=0.0, rng=None):
    """Return per-layer activations; ``acts[-1]`` is the network output.

    With ``dropout > 0`` and an ``rng`` (training only), inverted dropout masks
    are applied after every hidden layer and returned alongside.
    """
    act = ACTIVATIONS[hidden][0]
    acts, masks = [X], []
    a = X
    last = len(coefs) - 1
    for li, (W, b) in enumerate(zip(coefs, intercepts)):
        z = a @ W + b
        if li == last:
            a = softmax(z) if output == "softmax" else ACTIVATIONS[output][0](z)
        else:
            a = act(z)
            if dropout > 0.0 and rng is not None:
                keep = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
                a = a * keep
                masks.append(keep)
            else:
                masks.append(None)
        acts.append(a)
    return acts, masks


def backward(acts, masks, coefs, delta, hidden):
    """Backpropagate ``delta`` (dLoss/dz of the output layer) into gradients."""
    dact = ACTIVATIONS[hidden][1]
    grads_W = [None] * len(coefs)
    grads_b = [None] * len(coefs)
    for li in range(len(coefs) - 1, -1, -1):
        grads_W[li] = acts[li].T @ delta
        grads_b[li] = delta.sum(axis=0)
        if li > 0:
            delta = delta @ coefs[li].T
            a = acts[li]
            if masks[li - 1] is not None:
                # a is the post-dropout value; recover the derivative on the kept units
                keep = masks[li - 1]
                raw = np.divide(a, keep, out=np.zeros_like(a), where=keep > 0)
                delta = delta * keep * dact(raw)
            else:
                delta = delta * dact(a)
    return grads_W, grads_b
