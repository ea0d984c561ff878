"""Central finite-difference gradient checks."""
from __future__ import annotations

import numpy as np

from .network import Network, backward, forward


def numeric_gradient(f, x: np.ndarray, h=1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """``max|a - n| / max(max|a|, max|n|, 1e-8)`` for one tensor."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("inf")
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def finite_diff_check(network: Network, x, loss_fn, mode="train", h=1e-5,
                      check_input=False) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn(output, trace)`` returns ``(loss, dloss/doutput, stat_grads)``
    where ``stat_grads`` may be ``None``. The error is taken per parameter
    tensor (and for the input when ``check_input``) and maximized. A network
    with ``trainable = False`` checks no parameters and returns 0.0.
    """
    x = np.array(x, dtype=np.float64)

    def loss_value():
        out, trace = forward(network, x, mode)
        return loss_fn(out, trace)[0]

    try:
        out, trace = forward(network, x, mode)
        _, dout, stat_grads = loss_fn(out, trace)
        dx, grads = backward(network, trace, dout, stat_grads)
    except (ValueError, FloatingPointError):
        return float("inf")

    worst = 0.0
    targets = list(network.named_parameters().items()) if network.trainable else []
    for key, param in targets:
        num = numeric_gradient(loss_value, param, h)
        worst = max(worst, relative_error(grads[key], num))
    if check_input:
        worst = max(worst, relative_error(dx, numeric_gradient(loss_value, x, h)))
    return worst
