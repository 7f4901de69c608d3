"""Norm-bounded evasion attacks: FGSM, PGD, MI-FGSM, l-inf DeepFool and transfer.

A *model* here is any callable mapping an ``[n, ...]`` Tensor to ``[n, C]``
logits. Attacks treat examples independently: each row gets its own step,
early stop and restart selection. Inputs and outputs are numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

Model = Callable[[Tensor], Tensor]
RowLoss = Callable[[Tensor, np.ndarray], Tensor]


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 8 / 255
    step: float = 2 / 255
    steps: int = 20
    restarts: int = 1
    p: float = math.inf
    random_start: bool = True
    clip: tuple | None = (0.0, 1.0)
    early_stop: bool = False

    def __post_init__(self):
        if self.eps < 0 or self.step < 0:
            raise ValueError("eps and step must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.p not in (2, math.inf):
            raise ValueError("p must be 2 or inf")
        if self.clip is not None:
            lo, hi = self.clip
            if lo > hi:
                raise ValueError("clip range is empty")
            object.__setattr__(self, "clip", (float(lo), float(hi)))

    def with_(self, **changes) -> "AttackConfig":
        return replace(self, **changes)


# ell-inf 8/255 with 2/255 steps; 20 steps to evaluate, 7 to train
STANDARD_EVAL = AttackConfig(eps=8 / 255, step=2 / 255, steps=20, early_stop=True)
STANDARD_TRAIN = AttackConfig(eps=8 / 255, step=2 / 255, steps=7, early_stop=False)
# same eps:step ratio, eps at 0.1 of the [0, 1] feature range
SYNTHETIC_EVAL = AttackConfig(eps=0.1, step=0.025, steps=20, early_stop=True)
SYNTHETIC_TRAIN = AttackConfig(eps=0.1, step=0.025, steps=7, early_stop=False)


@dataclass
class AttackOutcome:
    x_adv: np.ndarray
    success: np.ndarray
    iterations_used: np.ndarray
    loss: np.ndarray | None = None
    aborted_restarts: int = 0

    def linf(self, x) -> np.ndarray:
        d = (self.x_adv - np.asarray(x)).reshape(len(self.x_adv), -1)
        return np.abs(d).max(axis=1) if d.size else np.zeros(len(self.x_adv))


def ce_rows(logits: Tensor, y: np.ndarray) -> Tensor:
    """Per-example cross-entropy."""
    picked = (logits * ad.constant(nn.one_hot(y, logits.shape[1]))).sum(axis=1)
    return ad.logsumexp(logits, axis=1) - picked


def _flat_norm(a: np.ndarray, p) -> np.ndarray:
    flat = a.reshape(len(a), -1)
    if p == math.inf:
        return np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(len(a))
    if p == 1:
        return np.abs(flat).sum(axis=1)
    return np.sqrt((flat * flat).sum(axis=1))


def _rows(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def project(delta: np.ndarray, eps: float, p=math.inf) -> np.ndarray:
    """Project each row of ``delta`` onto the closed ``eps`` ball."""
    if p == math.inf:
        return np.clip(delta, -eps, eps)
    norms = _flat_norm(delta, 2)
    scale = np.where(norms > eps, eps / np.where(norms > 0, norms, 1.0), 1.0)
    return delta * _rows(scale, delta.ndim)


def _random_start(rng: np.random.Generator, shape, eps: float, p) -> np.ndarray:
    if p == math.inf:
        return rng.uniform(-eps, eps, size=shape)
    n = shape[0]
    dim = int(np.prod(shape[1:]))
    direction = rng.standard_normal((n, dim))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    radius = eps * rng.uniform(size=(n, 1)) ** (1.0 / max(dim, 1))
    return (direction * radius).reshape(shape)


def _direction(g: np.ndarray, p) -> np.ndarray:
    if p == math.inf:
        return np.sign(g)
    norms = _flat_norm(g, 2)
    return g / _rows(np.where(norms > 0, norms, 1.0), g.ndim)


def _clip(x: np.ndarray, clip) -> np.ndarray:
    return x if clip is None else np.clip(x, clip[0], clip[1])


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray, loss_fn: RowLoss = ce_rows,
                   need_grad: bool = True):
    """Returns ``(gradient, logits, per-row loss)`` at ``x``."""
    xt = ad.tensor(x)
    logits = model(xt)
    rows = loss_fn(logits, y)
    g = None
    if need_grad:
        (g,) = ad.grad(rows.sum(), [xt], create_graph=False)
        g = g.data
    return g, logits.data, rows.data


def fgsm(model: Model, x, y, eps: float, clip=(0.0, 1.0), loss_fn: RowLoss = ce_rows) -> AttackOutcome:
    """Single signed-gradient step of size ``eps``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    g, _, _ = input_gradient(model, x, y, loss_fn)
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    x_adv = _clip(x + eps * np.sign(g), clip)
    _, logits, loss = input_gradient(model, x_adv, y, loss_fn, need_grad=False)
    return AttackOutcome(x_adv, nn.predict(logits) != y, np.ones(len(x), dtype=int), loss)


def _iterate(model, x, y, cfg: AttackConfig, delta, loss_fn, momentum: float | None):
    """Shared signed-step loop; returns (x_adv, logits, loss, iterations) or None on a non-finite gradient."""
    active = np.ones(len(x), dtype=bool)
    iters = np.zeros(len(x), dtype=int)
    accum = np.zeros_like(x)
    x_adv = _clip(x + delta, cfg.clip)
    for i in range(cfg.steps + 1):
        last = i == cfg.steps
        g, logits, loss = input_gradient(model, x_adv, y, loss_fn, need_grad=not last)
        if cfg.early_stop and i > 0:
            active &= nn.predict(logits) == y
        if last or not active.any():
            break
        if not np.all(np.isfinite(g)):
            return None
        if momentum is not None:
            l1 = _flat_norm(g, 1)
            g = g / _rows(np.where(l1 > 0, l1, 1.0), g.ndim)
            accum = momentum * accum + g
            g = accum
        mask = _rows(active.astype(np.float64), x.ndim)
        delta = delta + mask * (cfg.step * _direction(g, cfg.p))
        delta = project(delta, cfg.eps, cfg.p)
        x_adv = _clip(x + delta, cfg.clip)
        delta = x_adv - x
        iters += active
    return x_adv, logits, loss, iters


def pgd(model: Model, x, y, cfg: AttackConfig, rng: np.random.Generator | int | None = None,
        loss_fn: RowLoss = ce_rows) -> AttackOutcome:
    """Projected gradient ascent on the loss inside the ``eps`` ball.

    Each step adds ``step * sign(grad)`` (l-inf) or the l2-normalized gradient,
    projects back onto the ball and clips to the data range. With
    ``early_stop`` an example stops moving once it is misclassified. Over
    restarts, each example keeps a misclassifying restart if there is one,
    and among those (or among all, if none fools the model) the one with
    the highest final loss; ties keep the earlier restart. Restarts draw
    their random starts in order from ``rng``, so the first restart equals
    a single-restart run with the same generator. ``steps == 0`` returns ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if cfg.steps == 0:
        _, logits, loss = input_gradient(model, x, y, loss_fn, need_grad=False)
        return AttackOutcome(x.copy(), nn.predict(logits) != y, np.zeros(len(x), dtype=int), loss)
    best = None
    aborted = 0
    for _ in range(cfg.restarts):
        delta = _random_start(rng, x.shape, cfg.eps, cfg.p) if cfg.random_start else np.zeros_like(x)
        result = _iterate(model, x, y, cfg, delta, loss_fn, momentum=None)
        if result is None:
            aborted += 1
            continue
        x_adv, logits, loss, iters = result
        success = nn.predict(logits) != y
        if best is None:
            best = AttackOutcome(x_adv, success, iters, loss)
            continue
        # a fooling restart always wins; otherwise compare final losses
        better = (success & ~best.success) | ((success == best.success) & (loss > best.loss))
        rows = _rows(better, x.ndim)
        best = AttackOutcome(
            np.where(rows, x_adv, best.x_adv),
            np.where(better, success, best.success),
            np.where(better, iters, best.iterations_used),
            np.where(better, loss, best.loss),
        )
    if best is None:
        raise AttackError(f"all {cfg.restarts} restarts hit a non-finite gradient")
    best.aborted_restarts = aborted
    return best


def mi_fgsm(model: Model, x, y, cfg: AttackConfig, mu: float = 1.0,
            loss_fn: RowLoss = ce_rows) -> AttackOutcome:
    """Momentum iterative FGSM: accumulate l1-normalized gradients, step on their sign.

    Starts at ``x`` (no random start); a zero gradient is accumulated unnormalized.
    """
    if mu < 0:
        raise ValueError("momentum decay must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    result = _iterate(model, x, y, cfg, np.zeros_like(x), loss_fn, momentum=mu)
    if result is None:
        raise AttackError("non-finite input gradient")
    x_adv, logits, loss, iters = result
    return AttackOutcome(x_adv, nn.predict(logits) != y, iters, loss)


def _class_gradients(model: Model, x: np.ndarray):
    xt = ad.tensor(x)
    logits = model(xt)
    grads = []
    for k in range(logits.shape[1]):
        (g,) = ad.grad(logits[:, k].sum(), [xt], create_graph=False)
        grads.append(g.data)
    return logits.data, np.stack(grads, axis=1)


def deepfool_linf(model: Model, x, max_iter: int = 2, overshoot: float = 0.02,
                  clip=None, y=None) -> AttackOutcome:
    """l-inf DeepFool: step to the nearest linearized boundary, repeat until the label flips.

    For each wrong class k the linearized distance is ``|f_k - f_y| / ||grad f_k - grad f_y||_1``;
    the closest class sets the step ``distance * sign(grad difference)``. The
    accumulated step is scaled by ``1 + overshoot``. Not norm bounded.

    The attack pushes away from ``y`` when given (examples already
    misclassified are left alone), otherwise from the model's own prediction.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    logits0 = model(ad.constant(x)).data
    label = nn.predict(logits0) if y is None else np.asarray(y, dtype=int)
    r_tot = np.zeros_like(x)
    iters = np.zeros(n, dtype=int)
    x_adv = x.copy()
    for _ in range(max_iter):
        logits, grads = _class_gradients(model, x_adv)
        active = nn.predict(logits) == label
        if not active.any():
            break
        for i in np.flatnonzero(active):
            k0 = label[i]
            best_dist, best_step = np.inf, None
            for k in range(logits.shape[1]):
                if k == k0:
                    continue
                w = grads[i, k] - grads[i, k0]
                w_norm = np.abs(w).sum()
                if w_norm == 0:
                    continue
                dist = abs(logits[i, k] - logits[i, k0]) / w_norm
                if dist < best_dist:
                    best_dist, best_step = dist, dist * np.sign(w)
            if best_step is not None:
                r_tot[i] += best_step
                iters[i] += 1
        x_adv = _clip(x + (1 + overshoot) * r_tot, clip)
    final = nn.predict(model(ad.constant(x_adv)).data)
    return AttackOutcome(x_adv, final != label, iters)


def accuracy(model: Model, x, y) -> float:
    y = np.asarray(y, dtype=int)
    if len(y) == 0:
        return 0.0
    return float(np.mean(nn.predict(model(ad.constant(np.asarray(x, dtype=np.float64)))) == y))


def transfer_attack(source: Model, target: Model, x, y, cfg: AttackConfig,
                    target_labels=None, rng=None) -> float:
    """Accuracy of ``target`` on PGD examples crafted against ``source``.

    ``y`` labels the examples for the source model; ``target_labels`` (default
    ``y``) are used for scoring the target.
    """
    x = np.asarray(x, dtype=np.float64)
    probe_s = source(ad.constant(x[:1]))
    probe_t = target(ad.constant(x[:1]))
    if probe_s.ndim != 2 or probe_t.ndim != 2:
        raise ValueError("source and target must return [n, C] logits")
    outcome = pgd(source, x, y, cfg, rng=rng)
    return accuracy(target, outcome.x_adv, y if target_labels is None else target_labels)
