import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import mlp_gradient_errors, rel_error, two_layer_gradient_errors
from unifed.nn import (BNLayer, Dense, DegenerateNeuronError, Network, ReLU, ShapeError, bn_forward, build_mlp,
                       load_checkpoint, loss_and_grad, mlp_backward, projected_inputs, s_projection,
                       save_checkpoint, two_layer_forward, two_layer_init,
                       two_layer_predict, TwoLayerBNModel)


def test_bn_fixed_point(rng):
    x = rng.standard_normal((64, 5))
    x = (x - x.mean(0)) / x.std(0)
    layer = BNLayer.fresh("bn", 5, eps=1e-12)
    assert np.max(np.abs(bn_forward(layer, x, "train") - x)) < 1e-6


def test_reestimate_with_zero_momentum_uses_batch_stats(rng):
    layer = BNLayer.fresh("bn", 3, momentum=0.0)
    x = rng.standard_normal((16, 3)) * 2 + 1
    out = bn_forward(layer, x, "reestimate")
    assert np.array_equal(layer.running_mean, x.mean(0))
    assert np.allclose(layer.running_var, x.var(0), rtol=1e-14)
    assert np.allclose(out, (x - x.mean(0)) / np.sqrt(x.var(0) + layer.eps))


def test_running_stats_converge_over_stream():
    r = np.random.default_rng(0)
    layer = BNLayer.fresh("bn", 4, momentum=0.9)
    for _ in range(50):
        bn_forward(layer, 5.0 + 3.0 * r.standard_normal((32, 4)), "reestimate")
    assert np.all(np.abs(layer.running_mean - 5.0) < 0.3)
    assert np.all(np.abs(layer.running_var - 9.0) < 1.0)


def test_var_center_variants_agree_at_zero_momentum(rng):
    x = rng.standard_normal((10, 2))
    a = BNLayer.fresh("a", 2, momentum=0.0, var_center="running")
    b = BNLayer.fresh("b", 2, momentum=0.0, var_center="batch")
    a.update_stats(x)
    b.update_stats(x)
    assert np.allclose(a.running_var, b.running_var)


def test_eval_and_probe_leave_stats_alone(rng):
    net = build_mlp(4, (6,), 2, seed=0)
    before = net.state_dict()
    X = rng.standard_normal((8, 4))
    net.forward(X, "eval")
    net.forward(X, "probe")
    net.forward(X, "train", update_stats=False)
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    net.forward(X, "train")
    assert not np.array_equal(before["bn1.running_mean"], net.state_dict()["bn1.running_mean"])


def test_bn_argument_checks():
    with pytest.raises(ValueError):
        BNLayer.fresh("bn", 2, momentum=1.0)
    with pytest.raises(ValueError):
        BNLayer.fresh("bn", 2, eps=0.0)
    with pytest.raises(ShapeError):
        bn_forward(BNLayer.fresh("bn", 2), np.zeros((3, 3)), "train")


def test_relu_identity_layer():
    net = Network([Dense("fc", np.eye(2), np.zeros(2)), ReLU("relu")])
    assert np.array_equal(net.forward(np.array([[-1.0, 2.0]]))[0], [[0.0, 2.0]])


def test_modes_irrelevant_without_bn(rng):
    net = build_mlp(3, (5, 5), 2, bn=False, seed=1)
    X = rng.standard_normal((7, 3))
    outs = [net.forward(X, mode)[0] for mode in ("train", "eval", "reestimate", "probe")]
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_eval_forward_is_deterministic(rng):
    net = build_mlp(3, (5,), 2, seed=2)
    X = rng.standard_normal((4, 3))
    assert np.array_equal(net.forward(X)[0], net.forward(X)[0])


def test_shape_errors():
    with pytest.raises(ShapeError):
        Network([Dense("a", np.ones((3, 2)), np.zeros(3)), Dense("b", np.ones((1, 4)), np.zeros(1))])
    with pytest.raises(ValueError):
        Network([ReLU("x"), ReLU("x")])
    with pytest.raises(ShapeError):
        build_mlp(3, (4,), 2).forward(np.zeros((2, 5)))


def test_zero_loss_zero_gradient(rng):
    net = build_mlp(3, (4,), 1, seed=0)
    X = rng.standard_normal((6, 3))
    y = net.forward(X, "train", update_stats=False)[0].ravel()
    value, grads = mlp_backward(net, X, y, "squared")
    assert value == 0.0
    assert all(np.all(g == 0) for layer in grads.values() for g in layer.values())


def test_gradient_linear_in_residual(rng):
    net = build_mlp(3, (4,), 1, seed=0)
    X = rng.standard_normal((6, 3))
    pred = net.forward(X, "train", update_stats=False)[0].ravel()
    r = rng.standard_normal(6)
    _, g1 = mlp_backward(net, X, pred + r, "squared")
    _, g2 = mlp_backward(net, X, pred + 2 * r, "squared")
    for lid in g1:
        for name in g1[lid]:
            assert np.allclose(g2[lid][name], 2 * g1[lid][name], atol=1e-12)


@pytest.mark.parametrize("loss", ["squared", "cross-entropy"])
@pytest.mark.parametrize("bn_mode", ["train", "eval"])
def test_mlp_gradients_match_finite_differences(rng, loss, bn_mode):
    net = build_mlp(4, (5, 3), 2 if loss == "cross-entropy" else 1, seed=3)
    for layer in net.bn_layers:
        layer.running_mean = rng.standard_normal(layer.dim)
        layer.running_var = rng.uniform(0.5, 2.0, layer.dim)
        layer.gamma = rng.uniform(0.5, 1.5, layer.dim)
    X = rng.standard_normal((8, 4))
    y = np.where(rng.standard_normal(8) > 0, 1.0, -1.0) if loss == "cross-entropy" else rng.standard_normal(8)
    errors = mlp_gradient_errors(net, X, y, loss, bn_mode)
    assert errors["all"] < 1e-5, errors


def test_loss_and_grad_values():
    out = np.array([[0.0, 0.0], [2.0, 0.0]])
    value, d = loss_and_grad(out, np.array([1.0, -1.0]), "cross-entropy")
    expected = (np.log(2) + (-np.log(np.exp(2) / (np.exp(2) + 1)))) / 2
    assert value == pytest.approx(expected)
    assert np.allclose(d.sum(axis=1), 0)
    with pytest.raises(ValueError):
        loss_and_grad(out, np.zeros(2), "hinge")


def test_state_dict_roundtrip_and_skip_bn(tmp_path, rng):
    a = build_mlp(3, (4,), 2, seed=0)
    b = build_mlp(3, (4,), 2, seed=1)
    b.layer("bn1").running_mean = rng.standard_normal(4)
    keep = b.layer("bn1").running_mean.copy()
    b.load_state_dict(a.state_dict(), skip_bn=True)
    assert np.array_equal(b.layer("fc1").W, a.layer("fc1").W)
    assert np.array_equal(b.layer("bn1").running_mean, keep)
    path = tmp_path / "net.json"
    save_checkpoint(b, path)
    c = load_checkpoint(path)
    sa, sc = b.state_dict(), c.state_dict()
    assert sa.keys() == sc.keys() and all(np.array_equal(sa[k], sc[k]) for k in sa)


# -- two-layer BN model --------------------------------------------------------


def test_init_formulas():
    m = two_layer_init(5, 1, 2, 1.0, 0)
    assert np.allclose(m.gamma[:, 0], np.abs(m.V[:, 0]))
    assert np.array_equal(m.gamma[:, 0], m.gamma[:, 1])
    big = two_layer_init(10_000, 6, 1, 2.5, 1, shared=True)
    assert np.mean(np.sum(big.V**2, axis=1) / 2.5**2) == pytest.approx(6.0, rel=0.03)
    assert set(np.unique(big.c)) == {-1.0, 1.0}


def test_hand_computed_output():
    model = TwoLayerBNModel(np.array([[1.0, 0.0]]), np.array([1.0]), np.array([1.0]), 1.0, [np.eye(2)])
    assert two_layer_forward(model, [2.0, 0.0], 0) == pytest.approx(2.0)


def test_negated_input_kills_active_neurons(rng):
    model = two_layer_init(8, 3, 1, 1.0, 0, shared=True)
    model.V = np.abs(model.V)
    x = np.abs(rng.standard_normal(3)) + 0.1
    assert two_layer_forward(model, x, 0) != 0.0
    assert two_layer_forward(model, -x, 0) == 0.0


def test_shared_equals_client_specific_with_equal_gammas(rng):
    covs = [np.eye(3), 2 * np.eye(3)]
    shared = two_layer_init(16, 3, 2, 1.0, 4, covs, shared=True)
    specific = shared.as_client_specific()
    X = rng.standard_normal((6, 3))
    cids = np.array([0, 1, 0, 1, 1, 0])
    assert np.allclose(two_layer_predict(shared, X, cids), two_layer_predict(specific, X, cids), rtol=0, atol=0)


def test_rescaling_neurons_is_invariant(rng):
    model = two_layer_init(10, 4, 2, 1.0, 0, [np.eye(4), np.diag([1, 2, 3, 4.0])])
    X = rng.standard_normal((5, 4))
    cids = np.array([0, 1, 1, 0, 1])
    scaled = model.copy()
    scaled.V = scaled.V * rng.uniform(0.1, 10.0, size=(10, 1))
    assert np.allclose(two_layer_predict(model, X, cids), two_layer_predict(scaled, X, cids), rtol=1e-12)


def test_degenerate_neuron_rejected():
    model = two_layer_init(3, 2, 1, 1.0, 0, shared=True)
    model.V[1] = 0.0
    with pytest.raises(DegenerateNeuronError):
        two_layer_predict(model, np.ones((1, 2)), [0])


def test_s_projection_matches_matrix(rng):
    S = np.diag([1.0, 2.0, 3.0])
    u = rng.standard_normal(3)
    x = rng.standard_normal(3)
    P = np.eye(3) - np.outer(S @ u, u) / (u @ S @ u)
    assert np.allclose(s_projection(x, u, S), P @ x)
    assert abs(u @ s_projection(x, u, S)) < 1e-12
    Pi = np.eye(3) - np.outer(u, u) / (u @ u)
    assert np.allclose(s_projection(x, u, np.eye(3)), Pi @ x)
    model = TwoLayerBNModel(u[None, :], np.array([1.0]), np.array([1.0]), 1.0, [S])
    assert np.allclose(projected_inputs(model, x[None, :], np.array([0]))[0, 0], P @ x)


@pytest.mark.parametrize("shared", [True, False])
def test_two_layer_gradients_match_finite_differences(rng, shared):
    covs = [np.eye(4), np.diag([1.0, 2.0, 0.5, 3.0])]
    model = two_layer_init(16, 4, 2, 1.0, 7, covs, shared=shared)
    model.gamma = model.gamma * rng.uniform(0.5, 1.5, size=model.gamma.shape)
    X = rng.standard_normal((8, 4))
    cids = np.repeat([0, 1], 4)
    y = rng.standard_normal(8)
    errors = two_layer_gradient_errors(model, X, cids, y)
    assert errors["all"] < 1e-5, errors


@given(st.integers(0, 10_000))
def test_rel_error_oracle_is_scale_free(seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal(5)
    b = a + 1e-3 * r.standard_normal(5)
    assert rel_error(a, b) == pytest.approx(rel_error(7 * a, 7 * b))
    assert rel_error(a, a) == 0.0
