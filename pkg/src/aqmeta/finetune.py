"""Inner-loop fine-tuning algorithms A(theta, S).

Each algorithm returns an :class:`AdaptedModel` whose predictions stay
connected to the base parameters, so the outer loop can differentiate the
query loss through adaptation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import SingularSystemError, Tensor, constant

KINDS = ("maml_sgd", "ridge", "proto")
SCOPES = ("all", "last_layer")


class FineTuneError(RuntimeError):
    pass


@dataclass(frozen=True)
class FineTuneSpec:
    kind: str = "ridge"
    inner_steps: int = 10
    inner_lr: float = 0.01
    scope: str = "all"
    ridge_lambda: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.inner_steps < 0 or self.inner_lr < 0 or self.ridge_lambda < 0:
            raise ValueError("inner_steps, inner_lr and ridge_lambda must be >= 0")


# a support attack maps (predict, x, y) -> perturbed x as a numpy array
SupportAttack = Callable[[Callable[[Tensor], Tensor], np.ndarray, np.ndarray], np.ndarray]


class AdaptedModel:
    """A classifier produced by fine-tuning ``base`` on one support set."""

    def __init__(self, kind: str, base: nn.ParameterSet, n_way: int, *, params=None, weights=None,
                 prototypes=None):
        self.kind = kind
        self.base = base
        self.n_way = n_way
        self.params = params
        self.weights = weights
        self.prototypes = prototypes

    def features(self, x) -> Tensor:
        return nn.forward_backbone(self.base, x)

    def predict(self, x) -> Tensor:
        if self.kind == "maml_sgd":
            return nn.forward(self.params, x)
        feats = self.features(x)
        if self.kind == "ridge":
            return ridge_logits(feats, self.weights)
        return proto_logits(feats, self.prototypes)

    __call__ = predict

    def detached(self) -> "AdaptedModel":
        """Same classifier with every tensor cut from the graph (cheap to attack)."""
        return AdaptedModel(
            self.kind,
            self.base.detach(),
            self.n_way,
            params=None if self.params is None else self.params.detach(),
            weights=None if self.weights is None else self.weights.detach(),
            prototypes=None if self.prototypes is None else self.prototypes.detach(),
        )


def _augment(features: Tensor) -> Tensor:
    ones = constant(np.ones((features.shape[0], 1)))
    return ad.concat([features, ones], axis=1)


def ridge_head(features, onehot_labels, lam: float, bias: bool = True) -> Tensor:
    """Closed-form ridge regression ``W = (X^T X + lam I)^-1 X^T Y``.

    ``X`` is the feature matrix, with a ones column appended when ``bias``.
    The bias row is regularized like every other row.
    """
    x = ad.as_tensor(features)
    y = ad.as_tensor(onehot_labels)
    if bias:
        x = _augment(x)
    d = x.shape[1]
    if lam == 0 and np.linalg.matrix_rank(x.data) < d:
        raise SingularSystemError(
            f"X^T X is singular ({x.shape[0]} rows, rank {np.linalg.matrix_rank(x.data)} < {d}) and lambda = 0"
        )
    gram = x.T @ x
    if lam:
        gram = gram + constant(lam * np.eye(d))
    return ad.solve_spd(gram, x.T @ y)


def ridge_logits(features: Tensor, weights: Tensor) -> Tensor:
    return _augment(ad.as_tensor(features)) @ weights


def proto_head(features, labels, n_way: int | None = None) -> Tensor:
    """Class centroids, one row per episode label."""
    labels = np.asarray(labels, dtype=int)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    counts = np.bincount(labels, minlength=n_way)
    if np.any(counts == 0):
        raise FineTuneError(f"classes {np.flatnonzero(counts == 0).tolist()} have no support examples")
    averaging = nn.one_hot(labels, n_way).T / counts[:, None]
    return constant(averaging) @ ad.as_tensor(features)


def proto_logits(features: Tensor, prototypes: Tensor) -> Tensor:
    """Negative squared Euclidean distance to each prototype."""
    f = ad.as_tensor(features)
    diff = f.reshape(f.shape[0], 1, f.shape[1]) - prototypes.reshape(1, *prototypes.shape)
    return -(ad.square(diff).sum(axis=2))


def _adapted_names(params: nn.ParameterSet, scope: str) -> list[str]:
    names = params.names(nn.HEAD) if scope == "last_layer" else params.names()
    if not names:
        raise FineTuneError("no parameters selected for fine-tuning")
    return names


def finetune_maml(params: nn.ParameterSet, support_x, support_y, spec: FineTuneSpec,
                  support_attack: SupportAttack | None = None) -> AdaptedModel:
    """``inner_steps`` plain gradient-descent steps on the support cross-entropy.

    If any base parameter is tracked, the inner updates are kept in the graph
    (exact second-order meta-gradients). Untracked parameters are adapted
    without building a graph.
    """
    n_way = params["head.weight"].shape[0]
    if spec.inner_steps == 0 or spec.inner_lr == 0:
        return AdaptedModel("maml_sgd", params, n_way, params=params)
    names = _adapted_names(params, spec.scope)
    second_order = any(params[k].tracked for k in names)
    current = params if second_order else params.track()
    for _ in range(spec.inner_steps):
        x = support_x
        if support_attack is not None:
            frozen = current.detach()
            x = support_attack(lambda z: nn.forward(frozen, z), support_x, support_y)
        loss = nn.cross_entropy(nn.forward(current, x), support_y)
        if not np.isfinite(loss.item()):
            raise FineTuneError(f"non-finite inner loss {loss.item()}")
        grads = ad.grad(loss, [current[k] for k in names], create_graph=second_order)
        updated = {k: current[k] - spec.inner_lr * g for k, g in zip(names, grads)}
        if not second_order:
            updated = {k: Tensor(v.data, name=k) for k, v in updated.items()}
        current = current.replace(updated)
    if not second_order:
        current = current.detach()
    return AdaptedModel("maml_sgd", params, n_way, params=current)


def _fit_head(spec: FineTuneSpec, features: Tensor, labels, n_way: int):
    if spec.kind == "ridge":
        return {"weights": ridge_head(features, nn.one_hot(labels, n_way), spec.ridge_lambda)}
    return {"prototypes": proto_head(features, labels, n_way)}


def adapt(spec: FineTuneSpec, params: nn.ParameterSet, support_x, support_y, n_way: int | None = None,
          support_attack: SupportAttack | None = None) -> AdaptedModel:
    """Dispatch to the configured fine-tuning algorithm.

    Ridge and prototype heads keep the backbone frozen. With ``support_attack``
    the closed-form heads are fitted once on clean support, the support inputs
    are attacked against that fit, and the head is re-fitted on the perturbed
    inputs; MAML attacks the support set before every inner step.
    """
    support_y = np.asarray(support_y, dtype=int)
    n_way = int(support_y.max()) + 1 if n_way is None else n_way
    if spec.kind == "maml_sgd":
        return finetune_maml(params, support_x, support_y, spec, support_attack)
    features = nn.forward_backbone(params, support_x)
    model = AdaptedModel(spec.kind, params, n_way, **_fit_head(spec, features, support_y, n_way))
    if support_attack is not None:
        frozen = model.detached()
        x_adv = support_attack(frozen.predict, support_x, support_y)
        features = nn.forward_backbone(params, x_adv)
        model = AdaptedModel(spec.kind, params, n_way, **_fit_head(spec, features, support_y, n_way))
    return model
