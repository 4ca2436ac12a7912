"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

from tappfl.nn.tensor import ParamTensor

FD_STEP = 1e-5
FD_RTOL = 1e-4


def numeric_grad(f, param: ParamTensor, step: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``param``, perturbed in place."""
    grad = np.zeros(param.size)
    for k in range(param.size):
        orig = param.data[k]
        param.data[k] = orig + step
        up = float(f())
        param.data[k] = orig - step
        down = float(f())
        param.data[k] = orig
        grad[k] = (up - down) / (2 * step)
    return grad.reshape(param.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def plain_forward(net, x: np.ndarray) -> np.ndarray:
    """Straight-line matrix arithmetic, independent of the engine's graph code."""
    h = np.asarray(x, dtype=np.float64)
    for layer in net.layers:
        z = h @ layer.weight.value.T + layer.bias.value
        if layer.activation == "relu":
            h = np.maximum(z, 0.0)
        elif layer.activation == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-z))
        else:
            h = z
    return h
