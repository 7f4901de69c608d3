"""Test-time protocol: fine-tune on hold-out support sets, score clean and attacked queries."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .attacks import SYNTHETIC_EVAL, AttackConfig, pgd
from .finetune import FineTuneSpec, adapt
from .tasks import Dataset, sample_episode

FIELDS = ("model", "a_nat", "a_adv", "a_nat_at", "a_adv_at", "stderr_bound", "n_samples")


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 200
    finetune: FineTuneSpec = FineTuneSpec()
    attack: AttackConfig = SYNTHETIC_EVAL
    adv_finetune: bool = False
    seed: int = 0
    n_way: int = 5
    k_shot: int = 5
    q_query: int = 15
    # steps of the support-set attack used when adv_finetune is set
    finetune_attack_steps: int = 7

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")

    def with_(self, **changes) -> "EvalConfig":
        return replace(self, **changes)

    @property
    def finetune_attack(self) -> AttackConfig:
        return self.attack.with_(steps=self.finetune_attack_steps, early_stop=False)


@dataclass(frozen=True)
class Metrics:
    a_nat: float
    a_adv: float
    stderr_bound: float
    n_samples: int
    a_nat_at: float | None = None
    a_adv_at: float | None = None

    def row(self, model: str) -> dict:
        return {"model": model, **{k: getattr(self, k) for k in FIELDS[1:]}}


def stderr_bound(n_samples: int) -> float:
    """Largest one-standard-error width of an accuracy estimated from ``n_samples`` queries."""
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    return math.sqrt(0.25 / n_samples)


def episode_seeds(seed: int, n_episodes: int) -> list[np.random.SeedSequence]:
    """Per-episode seed sequences; identical for every model evaluated with the same seed."""
    return np.random.SeedSequence(seed).spawn(n_episodes)


def _support_attack(cfg: AttackConfig, rng: np.random.Generator):
    def attack(predict, x, y):
        return pgd(predict, x, y, cfg, rng=rng).x_adv

    return attack


def _score(model, qx, qy, attack: AttackConfig, rng) -> tuple[int, int]:
    frozen = model.detached()
    clean = int(np.sum(nn.predict(frozen(ad.constant(qx))) == qy))
    if attack.eps == 0 or attack.steps == 0:
        return clean, clean
    outcome = pgd(frozen, qx, qy, attack, rng=rng)
    return clean, int(np.sum(~outcome.success))


def evaluate(params: nn.ParameterSet, dataset_test: Dataset, cfg: EvalConfig) -> Metrics:
    """Average clean and robust query accuracy over ``cfg.n_episodes`` seeded episodes."""
    params = params.detach()
    nat = adv = nat_at = adv_at = total = 0
    for seq in episode_seeds(cfg.seed, cfg.n_episodes):
        task_ss, attack_ss, at_ss = seq.spawn(3)
        ep = sample_episode(dataset_test, cfg.n_way, cfg.k_shot, cfg.q_query, np.random.default_rng(task_ss))
        model = adapt(cfg.finetune, params, ep.support_x, ep.support_y, ep.n_way)
        c, a = _score(model, ep.query_x, ep.query_y, cfg.attack, np.random.default_rng(attack_ss))
        nat += c
        adv += a
        if cfg.adv_finetune:
            at_rng = np.random.default_rng(at_ss)
            model = adapt(cfg.finetune, params, ep.support_x, ep.support_y, ep.n_way,
                          support_attack=_support_attack(cfg.finetune_attack, at_rng))
            c, a = _score(model, ep.query_x, ep.query_y, cfg.attack, at_rng)
            nat_at += c
            adv_at += a
        total += len(ep.query_y)
    return Metrics(
        a_nat=nat / total,
        a_adv=adv / total,
        stderr_bound=stderr_bound(total),
        n_samples=total,
        a_nat_at=nat_at / total if cfg.adv_finetune else None,
        a_adv_at=adv_at / total if cfg.adv_finetune else None,
    )


def compare(models, dataset_test: Dataset, cfg: EvalConfig) -> list[dict]:
    """Evaluate ``(name, params, finetune_spec)`` triples on the same episode draws."""
    models = list(models)
    if not models:
        raise ValueError("compare needs at least one model")
    rows = []
    for name, params, spec in models:
        run_cfg = cfg if spec is None else cfg.with_(finetune=spec)
        rows.append(evaluate(params, dataset_test, run_cfg).row(name))
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[dict], fields=FIELDS, extra: dict | None = None) -> str:
    """RFC-4180 CSV; ``extra`` key/values are appended as constant columns."""
    extra = extra or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(list(fields) + list(extra))
    for r in rows:
        w.writerow([_cell(r.get(f)) for f in fields] + [_cell(v) for v in extra.values()])
    return buf.getvalue()


def rows_to_json(rows: list[dict], extra: dict | None = None) -> str:
    return json.dumps({**(extra or {}), "rows": rows}, indent=2, sort_keys=False) + "\n"


def metrics_dict(m: Metrics) -> dict:
    return asdict(m)
