"""The three wrappers: exactness, reductions, selection, STE, objective."""

import numpy as np
import pytest

from equiwrap import autodiff as ad
from equiwrap import nn
from equiwrap.groups import (
    action_perm, cyclic_group, rot90_image, token_swap, trivial_action,
    vector_negation,
)
from equiwrap.rng import substream
from equiwrap.wrappers import (
    EquiConfig, ProxyLoss, entropy_loss, eq3_objective, equitune_forward,
    equivariance_gap, equizero_forward, lambda_equitune_forward,
    make_cubic_fixture, make_lambda_net, neg_max_prob, neg_max_softmax_q,
    ste_surrogate_loss, universality_fit,
)

from helpers import (
    AffineBackbone, CallOrderLambda, ConstLambda, ImageMLP, TableBackbone,
    VectorMLP,
)


def _negation_cfg(mode="equitune", **kw):
    z2 = cyclic_group(2)
    return EquiConfig(group=z2, input_action=vector_negation(z2),
                      output_action=vector_negation(z2), mode=mode, **kw)


# ---------------------------------------------------------------------------
# equitune
# ---------------------------------------------------------------------------

def test_equitune_negation_cancels_offset():
    rng = substream(0, "affine")
    a = rng.normal(size=(3, 3))
    c = rng.normal(size=3)
    m = AffineBackbone(a, c)
    cfg = _negation_cfg()
    for _ in range(5):
        x = rng.normal(size=(1, 3))
        out = equitune_forward(m, cfg, x)
        np.testing.assert_allclose(out.data, x @ a, atol=1e-12)


def test_equitune_trivial_output_is_plain_average():
    rng = substream(1, "avg")
    m = VectorMLP(rng, 4)
    z2 = cyclic_group(2)
    cfg = EquiConfig(group=z2, input_action=vector_negation(z2),
                     output_action=trivial_action(z2))
    x = rng.normal(size=(2, 4))
    expect = 0.5 * (m.forward(x).data + m.forward(-x).data)
    np.testing.assert_allclose(equitune_forward(m, cfg, x).data, expect, atol=1e-14)


def test_equitune_rot90_equivariance():
    rng = substream(2, "равequi")
    m = ImageMLP(rng, side=4)
    z4 = cyclic_group(4)
    cfg = EquiConfig(group=z4, input_action=rot90_image(4, z4),
                     output_action=rot90_image(4, z4))
    for _ in range(5):
        x = rng.normal(size=(3, 1, 4, 4))
        gap = equivariance_gap(lambda p: equitune_forward(m, cfg, p), cfg, x)
        assert gap <= 1e-9


# ---------------------------------------------------------------------------
# equizero
# ---------------------------------------------------------------------------

def _first_logit_proxy():
    return ProxyLoss("first_logit", lambda o: np.asarray(o)[..., 0])


def test_equizero_brute_force_selection():
    table = np.array([[3.0, 0.1, 0.2, 0.3],
                      [1.0, 0.5, 0.6, 0.7],
                      [2.0, 0.8, 0.9, 1.0],
                      [5.0, 1.1, 1.2, 1.3]])
    m = TableBackbone(table)
    z4 = cyclic_group(4)
    in_act = action_perm([1, 2, 3, 0], z4)
    out_act = action_perm([1, 2, 3, 0], z4, name="out_perm")
    cfg = EquiConfig(group=z4, input_action=in_act, output_action=out_act,
                     mode="equizero", proxy_loss=_first_logit_proxy())
    x = np.array([1.0, 0.0, 0.0, 0.0])  # branch g sees selector at index g
    res = equizero_forward(m, cfg, x)
    # independent oracle: enumerate branches
    losses = [float(m.forward(in_act.apply(g, x)).data[0]) for g in range(4)]
    assert losses == [3.0, 1.0, 2.0, 5.0]
    assert res.g_star == int(np.argmin(losses)) == 1
    expect = out_act.apply(z4.inv(1), m.forward(in_act.apply(1, x)).data)
    np.testing.assert_array_equal(res.output.data, expect)
    np.testing.assert_array_equal(res.losses, losses)


def test_equizero_tie_breaks_to_lowest_index():
    m = TableBackbone(np.ones((4, 4)))
    z4 = cyclic_group(4)
    cfg = EquiConfig(group=z4, input_action=action_perm([1, 2, 3, 0], z4),
                     output_action=trivial_action(z4),
                     mode="equizero", proxy_loss=_first_logit_proxy())
    x = np.array([1.0, 0.0, 0.0, 0.0])
    res = equizero_forward(m, cfg, x)
    assert res.g_star == 0
    np.testing.assert_array_equal(res.output.data, m.forward(x).data)


def test_equizero_trivial_group_is_plain_backbone():
    rng = substream(3, "z1")
    m = VectorMLP(rng, 4)
    z1 = cyclic_group(1)
    cfg = EquiConfig(group=z1, input_action=trivial_action(z1),
                     output_action=trivial_action(z1),
                     mode="equizero", proxy_loss=neg_max_prob())
    x = rng.normal(size=(2, 4))
    res = equizero_forward(m, cfg, x)
    np.testing.assert_array_equal(res.output.data, m.forward(x).data)


def test_equizero_rejects_nan_loss():
    m = TableBackbone(np.array([[np.nan, 0.0], [0.0, 0.0]]))
    z2 = cyclic_group(2)
    cfg = EquiConfig(group=z2, input_action=action_perm([1, 0], z2),
                     output_action=trivial_action(z2),
                     mode="equizero", proxy_loss=_first_logit_proxy())
    with pytest.raises(ValueError, match="NaN"):
        equizero_forward(m, cfg, np.array([1.0, 0.0]))


def test_equizero_batched_per_example_selection():
    rng = substream(4, "batchsel")
    m = VectorMLP(rng, 4)
    z2 = cyclic_group(2)
    cfg = EquiConfig(group=z2, input_action=vector_negation(z2),
                     output_action=vector_negation(z2),
                     mode="equizero", proxy_loss=neg_max_prob())
    x = rng.normal(size=(6, 4))
    res = equizero_forward(m, cfg, x)
    for i in range(6):
        single = equizero_forward(m, cfg, x[i:i + 1])
        assert single.g_star == res.g_star[i]
        np.testing.assert_allclose(res.output.data[i], single.output.data[0],
                                   atol=1e-14)


def test_equizero_equivariance_when_unique():
    rng = substream(5, "ez_equi")
    m = ImageMLP(rng, side=4)
    z4 = cyclic_group(4)
    cfg = EquiConfig(group=z4, input_action=rot90_image(4, z4),
                     output_action=rot90_image(4, z4),
                     mode="equizero", proxy_loss=entropy_loss())
    tried = 0
    for _ in range(10):
        x = rng.normal(size=(1, 1, 4, 4))
        res = equizero_forward(m, cfg, x)
        low = np.sort(res.losses, axis=0)
        if low[1] - low[0] < 1e-6:  # perturb ties away
            continue
        tried += 1
        gap = equivariance_gap(lambda p: equizero_forward(m, cfg, p).output, cfg, x)
        assert gap <= 1e-9
    assert tried >= 5


# ---------------------------------------------------------------------------
# lambda-equitune and its reductions
# ---------------------------------------------------------------------------

def test_lambda_constant_reduces_to_equitune():
    rng = substream(6, "lamconst")
    m = VectorMLP(rng, 5)
    for c in (1.0, 0.37, 4.2):
        cfg = _negation_cfg(mode="lambda", lambda_net=ConstLambda(c))
        x = rng.normal(size=(3, 5))
        lam_out = lambda_equitune_forward(m, cfg, x)
        et_out = equitune_forward(m, _negation_cfg(), x)
        np.testing.assert_allclose(lam_out.data, et_out.data, atol=1e-12)


def test_lambda_indicator_reduces_to_equizero_bit_exact():
    rng = substream(7, "lamind")
    m = VectorMLP(rng, 5)
    ez_cfg = _negation_cfg(mode="equizero", proxy_loss=neg_max_prob())
    x = rng.normal(size=(1, 5))
    res = equizero_forward(m, ez_cfg, x)
    g_star = int(np.ravel(res.g_star)[0])
    indicator = CallOrderLambda([1.0 if g == g_star else 0.0 for g in range(2)])
    lam_cfg = _negation_cfg(mode="lambda", lambda_net=indicator)
    out = lambda_equitune_forward(m, lam_cfg, x)
    np.testing.assert_array_equal(out.data, res.output.data)


def test_lambda_weights_1_3_analytic():
    rng = substream(8, "lam13")
    m = VectorMLP(rng, 4)
    x = rng.normal(size=(1, 4))
    cfg = _negation_cfg(mode="lambda", lambda_net=CallOrderLambda([1.0, 3.0]))
    out = lambda_equitune_forward(m, cfg, x)
    y0 = m.forward(x).data
    y1 = m.forward(-x).data
    np.testing.assert_allclose(out.data, (1.0 * y0 + 3.0 * (-y1)) / 4.0, atol=1e-12)


def test_lambda_rejects_all_zero_weights():
    rng = substream(9, "lamzero")
    m = VectorMLP(rng, 4)
    cfg = _negation_cfg(mode="lambda", lambda_net=ConstLambda(0.0))
    with pytest.raises(ValueError, match="sum to zero"):
        lambda_equitune_forward(m, cfg, rng.normal(size=(1, 4)))


def test_lambda_rejects_negative_weights():
    rng = substream(10, "lamneg")
    m = VectorMLP(rng, 4)
    cfg = _negation_cfg(mode="lambda", lambda_net=ConstLambda(-1.0))
    with pytest.raises(ValueError, match="nonnegative"):
        lambda_equitune_forward(m, cfg, rng.normal(size=(1, 4)))


def test_lambda_equivariance_with_real_weight_net():
    rng = substream(11, "lamequi")
    m = ImageMLP(rng, side=4)
    z4 = cyclic_group(4)
    cfg = EquiConfig(group=z4, input_action=rot90_image(4, z4),
                     output_action=rot90_image(4, z4), mode="lambda",
                     lambda_net=make_lambda_net(16, seed=0))
    for _ in range(5):
        x = rng.normal(size=(2, 1, 4, 4))
        gap = equivariance_gap(lambda p: lambda_equitune_forward(m, cfg, p), cfg, x)
        assert gap <= 1e-9


# ---------------------------------------------------------------------------
# weight network
# ---------------------------------------------------------------------------

def test_lambda_net_strictly_positive():
    net = make_lambda_net(12, seed=3)
    rng = substream(12, "lampos")
    feats = rng.normal(size=(1000, 12)) * 5.0
    out = net.forward(ad.value(feats))
    assert np.all(out.data > 0.0)


def test_lambda_net_parameter_count():
    net = make_lambda_net(512, seed=0)
    assert net.num_params() == 512 * 100 + 100 + 100 * 1 + 1 == 51401


def test_lambda_net_gradcheck():
    net = make_lambda_net(6, seed=1)
    x = substream(13, "lamgc").normal(size=(3, 6))

    def f():
        return ad.mean(net.forward(ad.value(x)))

    assert ad.grad_check(f, list(net.params().values())) <= 1e-4


# ---------------------------------------------------------------------------
# proxy losses
# ---------------------------------------------------------------------------

def test_proxy_loss_values():
    assert neg_max_prob()(np.array([0.0, 0.0])) == pytest.approx(-0.5)
    assert entropy_loss()(np.zeros(4)) == pytest.approx(np.log(4.0))
    assert neg_max_softmax_q()(np.array([1.0, 1.0, 1.0])) == pytest.approx(-1 / 3)


def test_proxy_loss_empty_vector_raises():
    with pytest.raises(ValueError):
        neg_max_prob()(np.zeros(0))


# ---------------------------------------------------------------------------
# straight-through estimator
# ---------------------------------------------------------------------------

def _loss_grads(m, out, weights):
    loss = ad.mean(ad.mul(out, ad.value(weights)))
    for p in m.params().values():
        p.zero_grad()
    ad.backward(loss)
    return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for k, p in m.params().items()}


def test_ste_gradients_match_equitune():
    rng = substream(14, "ste")
    for trial in range(5):
        m = VectorMLP(substream(14, "ste_model", trial), 5)
        x = rng.normal(size=(2, 5))
        weights = rng.normal(size=(2, 5))
        ez_cfg = _negation_cfg(mode="equizero", proxy_loss=neg_max_prob(),
                               ste=True)
        res = equizero_forward(m, ez_cfg, x)
        g_ste = _loss_grads(m, res.output, weights)
        g_et = _loss_grads(m, equitune_forward(m, _negation_cfg(), x), weights)
        for k in g_ste:
            np.testing.assert_allclose(g_ste[k], g_et[k], atol=1e-10)
        # forward value is still the selected branch
        plain = equizero_forward(m, _negation_cfg(mode="equizero",
                                                  proxy_loss=neg_max_prob()), x)
        np.testing.assert_array_equal(res.output.data, plain.output.data)


def test_ste_surrogate_loss_contract():
    a = ad.param(np.asarray(2.0))
    sel = ad.mul(a, a)           # value 4
    avg = ad.scale(a, 3.0)       # value 6, grad 3
    loss = ste_surrogate_loss(sel, avg)
    assert loss.item() == pytest.approx(4.0)
    ad.backward(loss)
    assert float(a.grad) == pytest.approx(3.0)


# ---------------------------------------------------------------------------
# weighted objective (the wrapper is its constrained minimizer)
# ---------------------------------------------------------------------------

def _perturb(rng, shape, norm):
    d = rng.normal(size=shape)
    return d / np.linalg.norm(d) * norm


def test_eq3_objective_wrapper_is_minimizer():
    rng = substream(15, "eq3")
    for trial in range(3):
        m = VectorMLP(substream(15, "eq3_model", trial), 4)
        cfg = _negation_cfg(mode="lambda",
                            lambda_net=make_lambda_net(4, seed=trial))
        x = rng.normal(size=(1, 4))
        v_star = lambda_equitune_forward(m, cfg, x).data
        base = eq3_objective(m, cfg, v_star, x)
        for _ in range(100):
            cand = v_star + _perturb(rng, v_star.shape, 0.1)
            assert base <= eq3_objective(m, cfg, cand, x) + 1e-12


def test_eq3_objective_trivial_group_minimizer_is_backbone():
    rng = substream(16, "eq3z1")
    m = VectorMLP(rng, 4)
    z1 = cyclic_group(1)
    cfg = EquiConfig(group=z1, input_action=trivial_action(z1),
                     output_action=trivial_action(z1), mode="lambda",
                     lambda_net=ConstLambda(2.0))
    x = rng.normal(size=(1, 4))
    v_star = m.forward(x).data
    np.testing.assert_allclose(lambda_equitune_forward(m, cfg, x).data, v_star,
                               atol=1e-14)
    base = eq3_objective(m, cfg, v_star, x)
    for _ in range(50):
        assert base <= eq3_objective(m, cfg, v_star + _perturb(rng, v_star.shape, 0.1), x)


def test_eq3_objective_unit_weights_minimized_by_equitune():
    rng = substream(17, "eq3unit")
    m = VectorMLP(rng, 4)
    cfg = _negation_cfg(mode="lambda", lambda_net=ConstLambda(1.0))
    x = rng.normal(size=(1, 4))
    et = equitune_forward(m, _negation_cfg(), x).data
    base = eq3_objective(m, cfg, et, x)
    for _ in range(100):
        assert base <= eq3_objective(m, cfg, et + _perturb(rng, et.shape, 0.1), x) + 1e-12


# ---------------------------------------------------------------------------
# invertibility of the selection wrapper
# ---------------------------------------------------------------------------

def test_equizero_invertible_backbone_roundtrip():
    rng = substream(18, "inv")
    w = rng.normal(size=(4, 4)) + 2.0 * np.eye(4)
    m = AffineBackbone(w, np.zeros(4))
    w_inv = np.linalg.inv(w)
    z4 = cyclic_group(4)
    in_act = action_perm([1, 2, 3, 0], z4)
    out_act = action_perm([3, 0, 1, 2], z4, name="out")  # the inverse 4-cycle
    cfg = EquiConfig(group=z4, input_action=in_act, output_action=out_act,
                     mode="equizero", proxy_loss=neg_max_prob())
    for _ in range(20):
        x = rng.normal(size=(1, 4))
        res = equizero_forward(m, cfg, x)
        g = int(np.ravel(res.g_star)[0])
        y = res.output.data
        x_hat = in_act.apply(z4.inv(g), out_act.apply(g, y) @ w_inv)
        np.testing.assert_allclose(x_hat, x, atol=1e-9)


# ---------------------------------------------------------------------------
# universality fixture
# ---------------------------------------------------------------------------

def test_universality_fixture_target_is_equivariant():
    fx = make_cubic_fixture(seed=0)
    rng = substream(19, "unifix")
    g = fx.input_action.group
    for _ in range(20):
        x = rng.uniform(-1, 1, size=(2,))
        for k in g.elements():
            lhs = fx.target(fx.input_action.apply(k, x))
            rhs = fx.output_action.apply(k, fx.target(x))
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_universality_linear_target_fits_tightly():
    # a linear equivariant map under Z2 negation is exactly representable by
    # the (bias-free) linear model class, so the fit reaches ~machine zero
    z2 = cyclic_group(2)
    neg = vector_negation(z2)
    a = np.array([[0.8, -0.3], [0.2, 0.5]])
    from equiwrap.wrappers import UniversalityFixture
    fx = UniversalityFixture(target=lambda x: np.asarray(x) @ a.T,
                             input_action=neg, output_action=neg,
                             box=((-1, 1), (-1, 1)), grid_n=11)
    result = universality_fit(fx, budget=2500, seed=0, hidden=(), lr=2e-2,
                              lr_decay=1e-5, bias=False)
    assert result["sup_error"] <= 1e-3


def test_universality_wrapper_exactly_equivariant_even_untrained():
    fx = make_cubic_fixture(seed=1)
    result = universality_fit(fx, budget=1, seed=1, hidden=(16,))
    m, cfg = result["model"], result["config"]
    grid = fx.grid()[::40]
    gap = equivariance_gap(lambda p: lambda_equitune_forward(m, cfg, p), cfg, grid)
    assert gap <= 1e-9
