"""Local device update: joint training of extractor, adversary and critic."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from .nn import autodiff as ad
from .nn.autodiff import GradTape
from .nn.network import DenseNet, DimensionError, apply_sgd, forward
from .nn.tensor import NonFiniteError
from .objectives import (
    PrivacyLossBatch,
    UtilityCriticBatch,
    ce_privacy_loss,
    combined_device_loss,
    jsd_mi_estimate,
)

if TYPE_CHECKING:
    from .fl import FLConfig


class NumericError(ArithmeticError):
    """A loss went non-finite during training."""


@dataclass(frozen=True)
class DeviceShard:
    """A device's training data: features and private attribute only.

    There is deliberately no label field; the training path cannot see
    primary-task labels.
    """

    x: np.ndarray
    u: np.ndarray
    attribute_arity: int

    def __post_init__(self) -> None:
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.intp)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError(f"shard features must be a non-empty matrix, got shape {x.shape}")
        if u.shape != (x.shape[0],):
            raise ValueError(f"{x.shape[0]} rows but {u.shape} attributes")
        if self.attribute_arity < 2:
            raise ValueError("attribute arity must be at least 2")
        if u.min() < 0 or u.max() >= self.attribute_arity:
            raise ValueError(f"attribute values must lie in 0..{self.attribute_arity - 1}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class DeviceModel:
    """Per-device networks: extractor (theta), adversary (psi), critic (omega)."""

    theta: DenseNet
    psi: DenseNet
    omega: DenseNet
    lam: float
    device_id: int

    def __post_init__(self) -> None:
        if self.psi.input_dim != self.theta.output_dim:
            raise DimensionError(0, self.theta.output_dim, self.psi.input_dim)
        if self.omega.output_dim != 1:
            raise ValueError("critic must emit a single score")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def attribute_arity(self) -> int:
        return self.psi.output_dim

    def check_data_width(self, x_dim: int) -> None:
        expected = x_dim + self.theta.output_dim + self.attribute_arity
        if self.omega.input_dim != expected:
            raise DimensionError(0, expected, self.omega.input_dim)


DeviceModelTriple = DeviceModel


@dataclass
class LossSummary:
    """Epoch means of the adversary CE and the JSD loss (``-I_jsd``)."""

    ce_loss: list[float] = field(default_factory=list)
    jsd_loss: list[float] = field(default_factory=list)

    @property
    def mean_ce(self) -> float:
        return float(np.mean(self.ce_loss)) if self.ce_loss else float("nan")

    @property
    def mean_jsd(self) -> float:
        return float(np.mean(self.jsd_loss)) if self.jsd_loss else float("nan")


class BatchLosses(NamedTuple):
    total: object
    ce: float
    mi: float


def _one_hot(u: np.ndarray, arity: int) -> np.ndarray:
    return np.eye(arity)[u]


def critic_inputs(x, r, onehot):
    """Stack matched rows over mismatched rows for one critic pass.

    The mismatched sample for row ``j`` is ``x[(j + 1) mod b]``.
    """
    xs = np.concatenate([x, np.roll(x, -1, axis=0)], axis=0)
    return ad.concat([xs, ad.concat([r, r], axis=0), np.concatenate([onehot, onehot], axis=0)], axis=1)


def critic_batch(omega: DenseNet, x, r, onehot, tape=None, frozen=False) -> UtilityCriticBatch:
    b = x.shape[0]
    scores = forward(omega, critic_inputs(x, r, onehot), tape, frozen=frozen)
    return UtilityCriticBatch(ad.rows(scores, 0, b), ad.rows(scores, b, 2 * b))


def batch_objective(model: DeviceModel, x: np.ndarray, u: np.ndarray, tape: GradTape,
                    theta_privacy_sign: str = "eq7") -> BatchLosses:
    """One graph whose gradient gives all three simultaneous updates.

    The adversary and critic see the representation through gradient
    scaling nodes, so their parameters receive the gradients of their own
    losses while the extractor receives those of its combined loss.
    """
    lam = model.lam
    onehot = _one_hot(u, model.attribute_arity)
    r = forward(model.theta, x, tape)
    priv_factor = -lam if theta_privacy_sign == "eq7" else lam
    logits = forward(model.psi, ad.scale_grad(r, priv_factor), tape)
    ce = ce_privacy_loss(PrivacyLossBatch(logits, u))
    mi = jsd_mi_estimate(critic_batch(model.omega, x, ad.scale_grad(r, 1.0 - lam), onehot, tape))
    total = ad.add(ce, ad.neg(mi))
    return BatchLosses(total, float(ad.value_of(ce)), float(ad.value_of(mi)))


def device_losses(model: DeviceModel, x: np.ndarray, u: np.ndarray, tape: GradTape,
                  theta_privacy_sign: str = "eq7"):
    """The three per-network losses built as separate graph branches.

    Returns ``(loss_theta, loss_psi, loss_omega)`` where each loss touches
    only the parameters that descend it: the adversary and critic branches
    see a detached representation, the extractor branch sees frozen heads.
    Their sum has the same gradient as :func:`batch_objective`.
    """
    onehot = _one_hot(u, model.attribute_arity)
    r = forward(model.theta, x, tape)
    r_det = ad.detach(r)
    ce_psi = ce_privacy_loss(PrivacyLossBatch(forward(model.psi, r_det, tape), u))
    mi_omega = jsd_mi_estimate(critic_batch(model.omega, x, r_det, onehot, tape))
    ce_theta = ce_privacy_loss(PrivacyLossBatch(forward(model.psi, r, tape, frozen=True), u))
    mi_theta = jsd_mi_estimate(critic_batch(model.omega, x, r, onehot, tape, frozen=True))
    loss_theta, _, _ = combined_device_loss(ce_theta, mi_theta, model.lam, theta_privacy_sign)
    _, loss_psi, loss_omega = combined_device_loss(ce_psi, mi_omega, model.lam, theta_privacy_sign)
    return loss_theta, loss_psi, loss_omega


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one sample is dropped."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def _step(model: DeviceModel, x, u, cfg, which: tuple[str, ...]) -> tuple[DeviceModel, float, float]:
    tape = GradTape()
    losses = batch_objective(model, x, u, tape, cfg.theta_privacy_sign)
    grads = tape.backward(losses.total)
    lrs = {"psi": cfg.lr_psi, "omega": cfg.lr_omega, "theta": cfg.lr_theta}
    updates = {name: apply_sgd(getattr(model, name), grads, lrs[name]) for name in which}
    return replace(model, **updates), losses.ce, losses.mi


def device_update(model: DeviceModel, shard: DeviceShard, cfg: "FLConfig",
                  rng: np.random.Generator, epochs: int | None = None) -> tuple[DeviceModel, LossSummary]:
    """Run ``cfg.local_epochs`` epochs of minibatch SGD on one device.

    Per batch the adversary descends its CE with ``lr_psi``, the critic
    descends ``-I_jsd`` with ``lr_omega`` and the extractor descends its
    combined loss with ``lr_theta``. By default all three gradients come
    from the batch's starting parameters; ``cfg.sequential_refresh``
    re-runs the forward pass after each network's step instead.
    """
    if len(shard) < 2:
        raise ValueError("a shard needs at least two samples for negative pairing")
    if shard.x.shape[1] != model.theta.input_dim:
        raise DimensionError(0, model.theta.input_dim, shard.x.shape[1])
    if shard.attribute_arity != model.attribute_arity:
        raise ValueError(f"shard arity {shard.attribute_arity} vs adversary outputs {model.attribute_arity}")
    model.check_data_width(shard.x.shape[1])
    summary = LossSummary()
    n_epochs = cfg.local_epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        ce_vals, mi_vals = [], []
        for k, idx in enumerate(minibatches(len(shard), cfg.batch_size, rng)):
            x, u = shard.x[idx], shard.u[idx]
            where = f"device {model.device_id}, epoch {epoch}, batch {k}"
            try:
                if cfg.sequential_refresh:
                    model, ce, mi = _step(model, x, u, cfg, ("psi",))
                    model, _, _ = _step(model, x, u, cfg, ("omega",))
                    model, _, _ = _step(model, x, u, cfg, ("theta",))
                else:
                    model, ce, mi = _step(model, x, u, cfg, ("psi", "omega", "theta"))
            except NonFiniteError as exc:
                raise NumericError(f"{where}: {exc}") from exc
            if not (np.isfinite(ce) and np.isfinite(mi)):
                raise NumericError(f"{where}: non-finite loss (ce={ce}, jsd={mi})")
            ce_vals.append(ce)
            mi_vals.append(mi)
        summary.ce_loss.append(float(np.mean(ce_vals)))
        summary.jsd_loss.append(-float(np.mean(mi_vals)))
    return model, summary


def extract_representations(model: DeviceModel, inputs: np.ndarray) -> np.ndarray:
    """Forward through the extractor only."""
    return forward(model.theta, np.asarray(inputs, dtype=np.float64))
