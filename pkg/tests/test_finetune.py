import numpy as np
import pytest
from hypothesis import given, strategies as st

from aqmeta import autodiff as ad
from aqmeta import nn, tasks
from aqmeta.autodiff import SingularSystemError, constant
from aqmeta.finetune import (FineTuneError, FineTuneSpec, adapt, finetune_maml, proto_head, proto_logits,
                             ridge_head)

import oracles
from bilevel import SPECS, meta_gradient_report

ARCH = nn.Architecture((4,), (nn.Dense(6), nn.Dense(5)), n_way=3)


def support(seed=0, n=9, d=4, n_way=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), np.arange(n) % n_way


# ---------------------------------------------------------------- spec


@pytest.mark.parametrize("bad", [dict(kind="svm"), dict(scope="head"), dict(inner_steps=-1),
                                 dict(inner_lr=-0.1), dict(ridge_lambda=-1.0)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        FineTuneSpec(**bad)


# ---------------------------------------------------------------- maml


@pytest.mark.parametrize("spec", [FineTuneSpec("maml_sgd", inner_steps=0, inner_lr=0.5),
                                  FineTuneSpec("maml_sgd", inner_steps=5, inner_lr=0.0)])
def test_maml_identity_cases(spec):
    params = nn.init_params(ARCH, 0)
    sx, sy = support()
    model = finetune_maml(params, sx, sy, spec)
    assert model.params.equals(params)


def test_scalar_quadratic_inner_step_chain_rule():
    # inner loss (t - 3)^2, one step at lr 0.1 from t = 0, outer loss (t_i - 1)^2
    lr = 0.1

    def outer(theta):
        inner = ad.square(theta - 3.0).sum()
        (g,) = ad.grad(inner, [theta], create_graph=True)
        theta_i = theta - lr * g
        return theta_i, ad.square(theta_i - 1.0).sum()

    theta = ad.tensor(np.array([0.0]))
    theta_i, loss = outer(theta)
    assert theta_i.numpy()[0] == pytest.approx(0.6, abs=1e-15)
    (g,) = ad.grad(loss, [theta])
    hand = (1 - 2 * lr) * 2 * (0.6 - 1.0)
    fd = oracles.central_difference(lambda v: outer(ad.tensor(v))[1].item(), [0.0])
    assert g.numpy()[0] == pytest.approx(hand, abs=1e-12)
    assert fd[0] == pytest.approx(hand, abs=1e-8)


def test_last_layer_scope_freezes_backbone_bitwise():
    params = nn.init_params(ARCH, 1)
    sx, sy = support(1)
    model = finetune_maml(params, sx, sy, FineTuneSpec("maml_sgd", inner_steps=3, inner_lr=0.5, scope="last_layer"))
    for name in params.names(nn.BACKBONE):
        assert model.params[name].numpy().tobytes() == params[name].numpy().tobytes()
    assert not np.array_equal(model.params["head.weight"].numpy(), params["head.weight"].numpy())


def test_maml_inner_loop_is_plain_gradient_descent():
    params = nn.init_params(ARCH, 2).detach()
    sx, sy = support(2)
    model = finetune_maml(params, sx, sy, FineTuneSpec("maml_sgd", inner_steps=1, inner_lr=0.2))
    tracked = params.track()
    grads = ad.grad(nn.cross_entropy(nn.forward(tracked, sx), sy), [tracked[k] for k in tracked])
    for k, g in zip(tracked, grads):
        np.testing.assert_allclose(model.params[k].numpy(), params[k].numpy() - 0.2 * g.numpy(), atol=1e-14)


def test_maml_reports_nonfinite_inner_loss():
    params = nn.init_params(ARCH, 0)
    sx, sy = support()
    sx[0, 0] = np.inf
    with pytest.raises(FineTuneError):
        finetune_maml(params, sx, sy, FineTuneSpec("maml_sgd", inner_steps=1, inner_lr=0.1))


# ---------------------------------------------------------------- ridge


def test_ridge_shrinks_to_zero_for_huge_lambda():
    x, y = support(3)
    w = ridge_head(x, nn.one_hot(y, 3), 1e12).numpy()
    assert np.abs(w).max() <= 1e-9


def test_ridge_interpolates_square_system_at_zero_lambda():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 4))  # bias column makes the design 5x5
    y = nn.one_hot(np.arange(5) % 3, 3)
    w = ridge_head(x, y, 0.0).numpy()
    design = np.hstack([x, np.ones((5, 1))])
    np.testing.assert_allclose(design @ w, y, atol=1e-8)


def test_ridge_singular_without_regularization():
    x = np.ones((3, 4))
    with pytest.raises(SingularSystemError):
        ridge_head(x, nn.one_hot([0, 1, 2], 3), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_ridge_matches_normal_equations(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 4))
    y = nn.one_hot(rng.integers(0, 3, size=10), 3)
    np.testing.assert_allclose(ridge_head(x, y, 1.0).numpy(), oracles.ridge_weights(x, y, 1.0), atol=1e-10)


def test_ridge_gradient_wrt_features():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(10, 4))
    y = nn.one_hot(rng.integers(0, 3, size=10), 3)
    report = ad.check_grad(lambda t: ridge_head(t, y, 1.0).sum(), x, tol=1e-5)
    assert report.passed, report


@given(st.integers(0, 2**32 - 1))
def test_duplicate_rows_equal_row_weights(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 3))
    y = nn.one_hot(rng.integers(0, 2, size=6), 2)
    counts = rng.integers(1, 4, size=6)
    w_dup = ridge_head(np.repeat(x, counts, axis=0), np.repeat(y, counts, axis=0), 0.7).numpy()
    xb = np.hstack([x, np.ones((6, 1))])
    d = np.diag(counts.astype(float))
    w_weighted = np.linalg.solve(xb.T @ d @ xb + 0.7 * np.eye(4), xb.T @ d @ y)
    np.testing.assert_allclose(w_dup, w_weighted, atol=1e-10)
    perm = rng.permutation(6)
    np.testing.assert_allclose(ridge_head(x[perm], y[perm], 0.7).numpy(), ridge_head(x, y, 0.7).numpy(),
                               atol=1e-12)


# ---------------------------------------------------------------- proto


def test_one_shot_prototype_is_the_support_feature():
    f = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(proto_head(f, [0, 1, 2]).numpy(), f)


def test_symmetric_points_average_to_zero():
    v = np.array([1.5, -2.0, 0.25])
    np.testing.assert_array_equal(proto_head(np.stack([v, -v]), [0, 0]).numpy(), np.zeros((1, 3)))


def test_proto_logits_match_hand_distances():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(9, 4))
    labels = np.arange(9) % 3
    protos = np.stack([f[labels == c].mean(axis=0) for c in range(3)])
    np.testing.assert_allclose(proto_head(f, labels).numpy(), protos, atol=1e-15)
    q = rng.normal(size=(5, 4))
    got = proto_logits(constant(q), constant(protos)).numpy()
    np.testing.assert_allclose(got, oracles.proto_logits(q, protos), atol=1e-12)


def test_proto_empty_class():
    with pytest.raises(FineTuneError):
        proto_head(np.zeros((2, 3)), [0, 2], n_way=3)


@given(st.integers(0, 2**32 - 1))
def test_proto_translation_covariance(seed):
    rng = np.random.default_rng(seed)
    protos, q, v = rng.normal(size=(4, 3)), rng.normal(size=(6, 3)), rng.normal(size=3) * 10
    a = proto_logits(constant(q), constant(protos)).numpy()
    b = proto_logits(constant(q + v), constant(protos + v)).numpy()
    np.testing.assert_array_equal(a.argmax(axis=1), b.argmax(axis=1))


# ---------------------------------------------------------------- adapt


def identity_backbone(d=4):
    arch = nn.Architecture((d,), (nn.Dense(d, "none"),), n_way=0)
    return nn.ParameterSet({"layer0.weight": ad.tensor(np.eye(d)), "layer0.bias": ad.tensor(np.zeros(d))},
                           {"layer0.weight": nn.BACKBONE, "layer0.bias": nn.BACKBONE}, arch)


def test_ridge_on_identity_backbone_is_ridge_on_inputs():
    x, y = support(7)
    model = adapt(FineTuneSpec("ridge", ridge_lambda=0.3), identity_backbone(), x, y)
    np.testing.assert_allclose(model.weights.numpy(), oracles.ridge_weights(x, nn.one_hot(y, 3), 0.3), atol=1e-12)


def test_proto_support_points_win_in_tight_limit():
    spec = tasks.SyntheticSpec(n_classes=5, feature_dim=4, sigma=1e-6, per_class=4)
    ds = tasks.gen_synthetic(spec, 0)
    ep = tasks.sample_episode(ds, 5, 2, 1, 0)
    model = adapt(FineTuneSpec("proto"), identity_backbone(), ep.support_x, ep.support_y)
    np.testing.assert_array_equal(nn.predict(model(ep.support_x)), ep.support_y)


def test_closed_form_heads_keep_backbone_frozen():
    params = nn.init_params(ARCH.with_n_way(0), 0)
    x, y = support(8)
    for kind in ("ridge", "proto"):
        model = adapt(FineTuneSpec(kind), params, x, y)
        assert model.base is params


def test_adapted_models_match_independent_heads():
    params = nn.init_params(ARCH, 3).detach()
    x, y = support(9, n=15)
    q, qy = support(10, n=30)
    feats = lambda z: nn.forward_backbone(params, z).numpy()
    fb = np.hstack([feats(q), np.ones((30, 1))])
    expected = {
        "ridge": (fb @ oracles.ridge_weights(feats(x), nn.one_hot(y, 3), 1.0)).argmax(1),
        "proto": oracles.proto_logits(feats(q), np.stack([feats(x)[y == c].mean(0) for c in range(3)])).argmax(1),
    }
    # MAML oracle: 3 steps of hand-written softmax-regression gradient on the head only
    w, b = params["head.weight"].numpy().copy(), params["head.bias"].numpy().copy()
    fs, oh = feats(x), nn.one_hot(y, 3)
    for _ in range(3):
        p = oracles.softmax(fs @ w.T + b)
        gz = (p - oh) / len(y)
        w, b = w - 0.5 * gz.T @ fs, b - 0.5 * gz.sum(0)
    expected["maml_sgd"] = (feats(q) @ w.T + b).argmax(1)
    specs = {"ridge": FineTuneSpec("ridge"), "proto": FineTuneSpec("proto"),
             "maml_sgd": FineTuneSpec("maml_sgd", inner_steps=3, inner_lr=0.5, scope="last_layer")}
    for kind, spec in specs.items():
        model = adapt(spec, params if kind == "maml_sgd" else params, x, y, 3)
        got = nn.predict(model(q))
        assert np.mean(got == qy) == np.mean(expected[kind] == qy), kind
        np.testing.assert_array_equal(got, expected[kind])
        assert model(q).shape == (30, 3)


def test_support_attack_refits_closed_form_head():
    params = nn.init_params(ARCH.with_n_way(0), 0).detach()
    x, y = support(11)
    seen = []

    def attack(predict, sx, sy):
        seen.append(predict(sx).shape)
        return sx + 0.05

    model = adapt(FineTuneSpec("ridge"), params, x, y, support_attack=attack)
    want = adapt(FineTuneSpec("ridge"), params, x + 0.05, y)
    assert seen == [(9, 3)]
    np.testing.assert_allclose(model.weights.numpy(), want.weights.numpy(), atol=1e-14)


@pytest.mark.parametrize("name", sorted(SPECS))
@pytest.mark.parametrize("seed", [0, 1])
def test_meta_gradient_matches_finite_differences(name, seed):
    report = meta_gradient_report(SPECS[name], seed)
    assert report.passed, report.message or report.errors
