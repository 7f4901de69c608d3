"""Outer-loop training: natural meta-learning, adversarial querying and baselines.

All regimes share one loop. Per outer step, ``meta_batch`` episodes are
sampled; each is adapted on its support set, its query set is (optionally)
attacked against the adapted model, and the query loss is differentiated
through the adaptation back to the base parameters. The per-task gradients
are averaged and handed to SGD.

Perturbations are treated as data: no gradient flows through the attack.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.special

from . import autodiff as ad
from . import nn
from .attacks import SYNTHETIC_TRAIN, AttackConfig, ce_rows, pgd
from .finetune import AdaptedModel, FineTuneSpec, adapt
from .tasks import Dataset, sample_episode

log = logging.getLogger(__name__)

REGIMES = ("natural", "aq", "aq_support", "trades")
FULL_SCHEDULE = ((20, 0.06), (40, 0.012), (50, 0.0024))


class MetaTrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class OuterOptimizer:
    """SGD with optional Nesterov momentum, weight decay and a stepwise schedule.

    ``schedule`` holds ``(epoch, lr)`` pairs: from that (0-based) epoch on, the
    learning rate is ``lr``.
    """

    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    schedule: tuple = FULL_SCHEDULE

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for start, value in sorted(self.schedule):
            if epoch >= start:
                lr = value
        return lr


def scaled_schedule(epochs: int, reference_epochs: int = 60, schedule=FULL_SCHEDULE) -> tuple:
    """Stretch a schedule written for ``reference_epochs`` to ``epochs``."""
    return tuple((int(round(e * epochs / reference_epochs)), lr) for e, lr in schedule)


class SGD:
    def __init__(self, opt: OuterOptimizer):
        self.opt = opt
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        opt = self.opt
        out = {}
        for k, p in params.items():
            d = grads[k]
            if opt.weight_decay:
                d = d + opt.weight_decay * p
            if opt.momentum:
                buf = self.buffers.get(k)
                buf = d.copy() if buf is None else opt.momentum * buf + d
                self.buffers[k] = buf
                d = d + opt.momentum * buf if opt.nesterov else buf
            out[k] = p - lr * d
        return out


@dataclass(frozen=True)
class MetaTrainConfig:
    finetune: FineTuneSpec = FineTuneSpec()
    attack: AttackConfig = SYNTHETIC_TRAIN
    regime: str = "natural"
    trades_inv_lambda: float = 1.0
    meta_batch: int = 4
    optimizer: OuterOptimizer = OuterOptimizer()
    epochs: int = 60
    episodes_per_epoch: int = 100
    n_way: int = 5
    k_shot: int = 5
    q_query: int = 15
    seed: int = 0
    arch: nn.Architecture | None = None
    support_attack_target: str = "base"
    batch_size: int = 64

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.meta_batch < 1:
            raise ValueError("meta_batch must be >= 1")
        if self.trades_inv_lambda < 0:
            raise ValueError("trades_inv_lambda must be >= 0")
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and episodes_per_epoch >= 1")
        if self.support_attack_target not in ("base", "adapted"):
            raise ValueError("support_attack_target must be 'base' or 'adapted'")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.episodes_per_epoch // self.meta_batch)

    def with_(self, **changes) -> "MetaTrainConfig":
        return replace(self, **changes)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    clean_acc: float
    attack_success: float
    attack_calls: int
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        # wall time is kept out of the CSV so that reruns are byte-identical
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "clean_acc", "attack_success", "attack_calls"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.loss), repr(r.clean_acc), repr(r.attack_success), r.attack_calls])
        return buf.getvalue()


def default_arch(cfg: MetaTrainConfig, dataset: Dataset) -> nn.Architecture:
    if cfg.arch is not None:
        return cfg.arch
    n_way = cfg.n_way if cfg.finetune.kind == "maml_sgd" else 0
    return nn.Architecture(dataset.feature_shape, (nn.Dense(64), nn.Dense(64)), n_way)


def _rngs(seed: int):
    tasks, attacks = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(tasks), np.random.default_rng(attacks)


@dataclass
class _TaskResult:
    grads: list
    loss: float
    correct: int
    total: int
    fooled: int
    attacked: int
    attack_calls: int


def trades_query_loss(model: AdaptedModel, qx, qy, x_hat, inv_lambda: float) -> ad.Tensor:
    """Clean cross-entropy plus ``inv_lambda * KL(p(x) || p(x_hat))``."""
    clean = model(qx)
    loss = nn.cross_entropy(clean, qy)
    adv = model(x_hat)
    return loss + inv_lambda * nn.kl_divergence(clean, adv)


def _kl_rows(clean_logits: np.ndarray):
    """Per-row KL(p_clean || p(x)) with the clean distribution held fixed (attack objective)."""
    log_p = scipy.special.log_softmax(clean_logits, axis=1)
    p = ad.constant(np.exp(log_p))
    log_p = ad.constant(log_p)

    def rows(logits, _y):
        return (p * (log_p - ad.log_softmax(logits, axis=1))).sum(axis=1)

    return rows


def _support_target(cfg: MetaTrainConfig, params: nn.ParameterSet, sx, sy, n_way):
    """Model the support set is attacked against in the query+support regime."""
    if cfg.support_attack_target == "base" and cfg.finetune.kind == "maml_sgd":
        frozen = params.detach()
        return lambda z: nn.forward(frozen, z)
    # closed-form heads have no classifier before adaptation; use the clean fit
    return adapt(cfg.finetune, params.detach(), sx, sy, n_way).detached()


def _task(cfg: MetaTrainConfig, params: nn.ParameterSet, ep, attack_rng) -> _TaskResult:
    names = list(params)
    sx, sy, qx, qy = ep.support_x, ep.support_y, ep.query_x, ep.query_y
    calls = 0
    if cfg.regime == "aq_support":
        target = _support_target(cfg, params, sx, sy, ep.n_way)
        sx = pgd(target, sx, sy, cfg.attack, rng=attack_rng).x_adv
        calls += 1
    model = adapt(cfg.finetune, params, sx, sy, ep.n_way)
    fooled = attacked = 0
    if cfg.regime == "natural":
        logits = model(qx)
        loss = nn.cross_entropy(logits, qy)
        correct = int(np.sum(nn.predict(logits) == qy))
    else:
        frozen = model.detached()
        clean_pred = nn.predict(frozen(ad.constant(qx)))
        correct = int(np.sum(clean_pred == qy))
        if cfg.regime == "trades":
            outcome = pgd(frozen, qx, qy, cfg.attack, rng=attack_rng,
                          loss_fn=_kl_rows(frozen(ad.constant(qx)).data))
            loss = trades_query_loss(model, qx, qy, outcome.x_adv, cfg.trades_inv_lambda)
            adv_pred = nn.predict(frozen(ad.constant(outcome.x_adv)))
            fooled = int(np.sum(adv_pred != qy))
        else:
            outcome = pgd(frozen, qx, qy, cfg.attack, rng=attack_rng)
            loss = nn.cross_entropy(model(outcome.x_adv), qy)
            fooled = int(np.sum(outcome.success))
        attacked = len(qy)
        calls += 1
    grads = ad.grad(loss, [params[k] for k in names], create_graph=False)
    return _TaskResult([g.data for g in grads], loss.item(), correct, len(qy), fooled, attacked, calls)


def meta_train(cfg: MetaTrainConfig, dataset: Dataset, init: nn.ParameterSet | None = None,
               on_epoch: Callable[[EpochRecord, nn.ParameterSet], None] | None = None):
    """Run the configured regime; returns ``(params, TrainLog)``."""
    arch = default_arch(cfg, dataset)
    params = init if init is not None else nn.init_params(arch, cfg.seed)
    params = params.track()
    task_rng, attack_rng = _rngs(cfg.seed)
    sgd = SGD(cfg.optimizer)
    train_log = TrainLog()
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = cfg.optimizer.lr_at(epoch)
        tot_loss = 0.0
        correct = total = fooled = attacked = calls = 0
        n_tasks = 0
        for step in range(cfg.steps_per_epoch):
            summed = None
            for _ in range(cfg.meta_batch):
                ep = sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.q_query, task_rng)
                r = _task(cfg, params, ep, attack_rng)
                summed = r.grads if summed is None else [a + b for a, b in zip(summed, r.grads)]
                tot_loss += r.loss
                correct += r.correct
                total += r.total
                fooled += r.fooled
                attacked += r.attacked
                calls += r.attack_calls
                n_tasks += 1
            mean_grads = {k: g / cfg.meta_batch for k, g in zip(params, summed)}
            bad = [k for k, g in mean_grads.items() if not np.all(np.isfinite(g))]
            if bad:
                raise MetaTrainError(f"non-finite outer gradient at epoch {epoch} step {step}: {bad}")
            new = sgd.step(params.arrays(), mean_grads, lr)
            params = params.replace({k: ad.Tensor(v, name=k) for k, v in new.items()})
        rec = EpochRecord(
            epoch=epoch + 1,
            loss=tot_loss / n_tasks,
            clean_acc=correct / total if total else 0.0,
            attack_success=fooled / attacked if attacked else 0.0,
            attack_calls=calls,
            seconds=time.perf_counter() - start,
        )
        train_log.records.append(rec)
        log.info("epoch %d loss %.4f clean_acc %.3f attack_success %.3f", rec.epoch, rec.loss,
                 rec.clean_acc, rec.attack_success)
        if on_epoch is not None:
            on_epoch(rec, params.detach())
    return params.detach(), train_log


def _check_regime(cfg: MetaTrainConfig, regime: str) -> MetaTrainConfig:
    if cfg.regime != regime:
        raise ValueError(f"config regime is {cfg.regime!r}, expected {regime!r}")
    return cfg


def meta_train_natural(cfg: MetaTrainConfig, dataset: Dataset, init=None):
    return meta_train(_check_regime(cfg, "natural"), dataset, init)


def meta_train_aq(cfg: MetaTrainConfig, dataset: Dataset, init=None):
    """Adversarial querying: adapt on clean support, attack the queries, learn from the attacked queries."""
    return meta_train(_check_regime(cfg, "aq"), dataset, init)


def meta_train_aq_support(cfg: MetaTrainConfig, dataset: Dataset, init=None):
    return meta_train(_check_regime(cfg, "aq_support"), dataset, init)


def meta_train_trades(cfg: MetaTrainConfig, dataset: Dataset, init=None):
    return meta_train(_check_regime(cfg, "trades"), dataset, init)


def adv_train_transfer(cfg: MetaTrainConfig, dataset: Dataset, init=None):
    """Minibatch adversarial training of backbone + all-class linear head.

    Every training class is a label of one big classification problem. The
    returned parameter set holds only the backbone, ready for a few-shot head.
    """
    base = default_arch(cfg, dataset)
    arch = nn.Architecture(base.input_shape, base.layers, dataset.n_classes)
    params = (init if init is not None else nn.init_params(arch, cfg.seed)).track()
    x_all, y_all = dataset.as_arrays()
    task_rng, attack_rng = _rngs(cfg.seed)
    sgd = SGD(cfg.optimizer)
    train_log = TrainLog()
    n_batches = math.ceil(len(y_all) / cfg.batch_size)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = cfg.optimizer.lr_at(epoch)
        order = task_rng.permutation(len(y_all))
        tot_loss = 0.0
        correct = fooled = calls = 0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            frozen = params.detach()
            model = lambda z, p=frozen: nn.forward(p, z)
            correct += int(np.sum(nn.predict(model(ad.constant(x))) == y))
            outcome = pgd(model, x, y, cfg.attack, rng=attack_rng)
            calls += 1
            fooled += int(np.sum(outcome.success))
            loss = nn.cross_entropy(nn.forward(params, outcome.x_adv), y)
            names = list(params)
            grads = ad.grad(loss, [params[k] for k in names], create_graph=False)
            grads = {k: g.data for k, g in zip(names, grads)}
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise MetaTrainError(f"non-finite gradient at epoch {epoch} batch {b}")
            tot_loss += loss.item()
            new = sgd.step(params.arrays(), grads, lr)
            params = params.replace({k: ad.Tensor(v, name=k) for k, v in new.items()})
        train_log.records.append(EpochRecord(
            epoch=epoch + 1,
            loss=tot_loss / n_batches,
            clean_acc=correct / len(y_all),
            attack_success=fooled / len(y_all),
            attack_calls=calls,
            seconds=time.perf_counter() - start,
        ))
    return backbone_only(params.detach()), train_log


def backbone_only(params: nn.ParameterSet) -> nn.ParameterSet:
    names = params.names(nn.BACKBONE)
    arch = params.arch.with_n_way(0) if params.arch is not None else None
    return nn.ParameterSet({k: params[k] for k in names}, {k: nn.BACKBONE for k in names}, arch)
