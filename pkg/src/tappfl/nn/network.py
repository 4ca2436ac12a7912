"""Dense networks: construction, forward pass and the SGD update."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape
from .tensor import NonFiniteError, ParamTensor, ShapeError, check_compatible


class DimensionError(ShapeError):
    """Input width does not match what a layer expects."""

    def __init__(self, layer: int, expected: int, got: int):
        super().__init__(f"layer {layer}: expected input width {expected}, got {got}")
        self.layer = layer


@dataclass(frozen=True)
class Layer:
    weight: ParamTensor  # [out, in]
    bias: ParamTensor  # [out]
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class DenseNet:
    layers: tuple[Layer, ...]
    input_dim: int

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("a DenseNet needs at least one layer")
        width = self.input_dim
        for k, layer in enumerate(self.layers):
            if layer.activation not in ad.ACTIVATIONS:
                raise ValueError(f"layer {k}: unknown activation {layer.activation!r}")
            if len(layer.weight.shape) != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {k}: weight {layer.weight.shape} / bias {layer.bias.shape}")
            if layer.in_dim != width:
                raise DimensionError(k, width, layer.in_dim)
            width = layer.out_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def params(self) -> list[ParamTensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def with_params(self, params: Sequence[ParamTensor]) -> "DenseNet":
        check_compatible(self.params(), params)
        layers = tuple(
            Layer(params[2 * k], params[2 * k + 1], layer.activation)
            for k, layer in enumerate(self.layers)
        )
        # shapes were just checked against a validated net
        net = object.__new__(DenseNet)
        object.__setattr__(net, "layers", layers)
        object.__setattr__(net, "input_dim", self.input_dim)
        return net

    def copy(self) -> "DenseNet":
        return self.with_params([p.copy() for p in self.params()])


def init_net(widths: Sequence[int], activations: Sequence[str], seed, prefix: str = "") -> DenseNet:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``.

    ``widths`` lists input width followed by each layer's output width;
    ``activations`` has one entry per layer. ``seed`` is anything
    :func:`numpy.random.default_rng` accepts.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("network spec needs an input width and at least one layer")
    if len(activations) != len(widths) - 1:
        raise ValueError(f"{len(widths) - 1} layers but {len(activations)} activations")
    if any(w <= 0 for w in widths):
        raise ValueError(f"widths must be positive, got {widths}")
    rng = np.random.default_rng(seed)
    layers = []
    for k, (fan_in, fan_out, act) in enumerate(zip(widths[:-1], widths[1:], activations)):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        layers.append(Layer(
            ParamTensor.from_array(w, f"{prefix}layer{k}.weight"),
            ParamTensor((fan_out,), np.zeros(fan_out), f"{prefix}layer{k}.bias"),
            act,
        ))
    return DenseNet(tuple(layers), widths[0])


def forward(net: DenseNet, batch, tape: GradTape | None = None, frozen: bool = False):
    """Apply the network to a ``[b, input_dim]`` batch.

    With a tape the parameters are watched and a :class:`Node` comes back;
    ``frozen=True`` uses the parameters as constants (gradients still flow
    to ``batch`` if it is tracked). Without a tape and with a plain array
    batch the result is a plain array.
    """
    values = ad.value_of(batch)
    if values.ndim != 2 or values.shape[1] != net.input_dim:
        raise DimensionError(0, net.input_dim, values.shape[-1] if values.ndim else -1)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("forward received non-finite inputs")
    h = batch
    for layer in net.layers:
        if tape is not None and not frozen:
            w, b = tape.watch(layer.weight), tape.watch(layer.bias)
        else:
            w, b = layer.weight.value, layer.bias.value
        h = ad.ACTIVATIONS[layer.activation](ad.affine(h, w, b))
    return h


def sgd_step(params: Sequence[ParamTensor], grads: Sequence[np.ndarray], lr: float) -> list[ParamTensor]:
    """``p - lr * g`` for every pair; returns fresh tensors, inputs untouched."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    out = []
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.size != p.size:
            raise ShapeError(f"{p.name}: gradient has {g.size} entries, parameter {p.size}")
        # lr == 0 must be an exact no-op, signed zeros included
        out.append(p.copy() if lr == 0 else p.with_data(p.data - lr * g.reshape(-1)))
    return out


def apply_sgd(net: DenseNet, grads: ad.Gradients, lr: float) -> DenseNet:
    params = net.params()
    return net.with_params(sgd_step(params, grads.collect(params), lr))
