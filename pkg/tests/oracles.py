"""Independent numpy reference implementations used as test oracles.

Nothing here touches the autodiff engine: every oracle is plain array math
so a bug in the library cannot leak into its own expected values.
"""

import itertools

import numpy as np


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    p = softmax(logits)
    return float(-np.mean(np.log(p[np.arange(len(labels)), labels])))


def ridge_weights(x, y_onehot, lam, bias=True):
    """Explicit normal equations with an explicit inverse."""
    if bias:
        x = np.hstack([x, np.ones((x.shape[0], 1))])
    return np.linalg.inv(x.T @ x + lam * np.eye(x.shape[1])) @ x.T @ y_onehot


def central_difference(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def linear_logits(w, b):
    """Classifier closure over numpy weights: rows of x times w.T plus b."""
    w, b = np.asarray(w, float), np.asarray(b, float)
    return lambda x: np.asarray(x, float) @ w.T + b


def box_corners(x, eps):
    """All 2^d corners of the l-inf box around a single point."""
    x = np.asarray(x, float)
    for signs in itertools.product((-1.0, 1.0), repeat=x.size):
        yield x + eps * np.array(signs)


def box_grid(x, eps, n=201):
    """Dense grid over the l-inf box around a 2-D point."""
    t = np.linspace(-eps, eps, n)
    gx, gy = np.meshgrid(t, t)
    return np.stack([x[0] + gx.ravel(), x[1] + gy.ravel()], axis=1)


def mi_fgsm_unrolled(grad_fn, x, eps, step, steps, mu, clip=None):
    """Hand-written momentum iterative FGSM recurrence for one batch."""
    x = np.asarray(x, float)
    delta = np.zeros_like(x)
    g_acc = np.zeros_like(x)
    for _ in range(steps):
        g = grad_fn(x + delta)
        l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
        g_acc = mu * g_acc + g / np.where(l1 > 0, l1, 1.0)
        delta = np.clip(delta + step * np.sign(g_acc), -eps, eps)
        if clip is not None:
            delta = np.clip(x + delta, *clip) - x
    return x + delta


def proto_logits(features, prototypes):
    f = np.asarray(features, float)
    p = np.asarray(prototypes, float)
    out = np.zeros((len(f), len(p)))
    for i in range(len(f)):
        for c in range(len(p)):
            out[i, c] = -np.sum((f[i] - p[c]) ** 2)
    return out
