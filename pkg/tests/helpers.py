"""Oracles shared by the unit and acceptance tests."""

import numpy as np

from unifed.datagen import holdout_split, make_feature_shift_suite, make_teacher, make_unseen_spec, \
    sample_client_dataset
from unifed.nn import build_mlp, loss_and_grad, mlp_backward, two_layer_gradients, two_layer_loss

FD_STEP = 1e-4


def rel_error(analytic, numeric, floor=1e-8) -> float:
    """Norm-wise relative error ``||a - n|| / max(||a||, ||n||, floor)``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def central_difference(f, array, h=FD_STEP):
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``array`` (edited in place)."""
    out = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        keep = array[idx]
        array[idx] = keep + h
        up = f()
        array[idx] = keep - h
        down = f()
        array[idx] = keep
        out[idx] = (up - down) / (2 * h)
    return out


def mlp_gradient_errors(net, X, y, loss, bn_mode="train", h=FD_STEP):
    """Relative errors of the MLP backward pass against central differences.

    Keys are tensor names plus ``"all"``, the error over the concatenated
    gradient.  A per-tensor ratio is meaningless where the true gradient is
    exactly zero (a Dense bias feeding a train-mode BN), so checks use
    ``"all"``.
    """
    _, grads = mlp_backward(net, X, y, loss, bn_mode=bn_mode, update_stats=False)

    def f():
        out = net.forward(X, bn_mode, update_stats=False)[0]
        return loss_and_grad(out, y, loss)[0]

    errors, analytic, numeric = {}, [], []
    for layer in net.layers:
        for name in layer.params():
            num = central_difference(f, getattr(layer, name), h)
            errors[f"{layer.id}.{name}"] = rel_error(grads[layer.id][name], num)
            analytic.append(np.ravel(grads[layer.id][name]))
            numeric.append(np.ravel(num))
    errors["all"] = rel_error(np.concatenate(analytic), np.concatenate(numeric))
    return errors


def two_layer_gradient_errors(model, X, cids, y, h=FD_STEP):
    grads = two_layer_gradients(model, X, cids, y)

    def f():
        return two_layer_loss(model, X, cids, y)

    nv = central_difference(f, model.V, h)
    ng = central_difference(f, model.gamma, h)
    return {"V": rel_error(grads["V"], nv), "gamma": rel_error(grads["gamma"], ng),
            "all": rel_error(np.concatenate([grads["V"].ravel(), grads["gamma"].ravel()]),
                             np.concatenate([nv.ravel(), ng.ravel()]))}


def shift_problem(seed, N=3, d=16, M=200, severity=3.0, kind="linear-classification", shift="scale",
                  hidden=(32, 32), factor=4.0, external_M=4096):
    """Clients, model template and an external client for the desk-scale experiments."""
    specs = make_feature_shift_suite(N, d, shift, severity, seed)
    teacher = make_teacher(kind, d, seed)
    pairs = [holdout_split(sample_client_dataset(s, teacher, M, seed), (0.8, 0.2), seed) for s in specs]
    template = build_mlp(d, hidden, 2 if teacher.is_classification else 1, seed=seed)
    external = sample_client_dataset(make_unseen_spec(specs, factor), teacher, external_M, seed + 1000)
    return specs, teacher, pairs, template, external
