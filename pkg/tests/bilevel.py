"""Shared setup for outer-gradient (meta-gradient) finite-difference checks."""

import numpy as np

from aqmeta import autodiff as ad
from aqmeta import nn
from aqmeta.finetune import FineTuneSpec, adapt

SPECS = {
    "maml_all": FineTuneSpec("maml_sgd", inner_steps=2, inner_lr=0.1, scope="all"),
    "maml_last_layer": FineTuneSpec("maml_sgd", inner_steps=2, inner_lr=0.1, scope="last_layer"),
    "ridge": FineTuneSpec("ridge", ridge_lambda=0.5),
    "proto": FineTuneSpec("proto"),
}


def episode(seed, d=3, n_way=2, k_shot=2, q_query=3):
    rng = np.random.default_rng(seed)
    sx = rng.normal(size=(n_way * k_shot, d))
    sy = np.repeat(np.arange(n_way), k_shot)
    qx = rng.normal(size=(n_way * q_query, d))
    qy = np.repeat(np.arange(n_way), q_query)
    return sx, sy, qx, qy


def meta_gradient_report(spec, seed, tol=1e-4):
    """Compare the outer gradient of the query loss after adaptation with central differences."""
    sx, sy, qx, qy = episode(seed)
    n_way = 2 if spec.kind == "maml_sgd" else 0
    arch = nn.Architecture((3,), (nn.Dense(5), nn.Dense(4)), n_way)
    params = nn.init_params(arch, seed)
    # shift biases off zero so no ReLU sits exactly on its kink
    rng = np.random.default_rng(seed + 1)
    params = params.replace({k: ad.tensor(params[k].numpy() + 0.1 * rng.normal(size=params[k].shape), name=k)
                             for k in params})

    def outer_loss(tensors):
        theta = params.replace(tensors)
        model = adapt(spec, theta, sx, sy, 2)
        return nn.cross_entropy(model(ad.constant(qx)), qy)

    return ad.check_grad(outer_loss, params.arrays(), tol=tol, h=1e-6)
