"""Post-hoc attacks on frozen representations.

A fresh attribute-inference adversary and a fresh primary-task probe are
trained on representations of the training pool and scored on the test
split. The extractor is never updated here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .nn.autodiff import GradTape, softmax_cross_entropy
from .nn.network import DenseNet, apply_sgd, forward, init_net
from .nn.tensor import params_digest
from .trainer import DeviceModel


class DegenerateSplitError(ValueError):
    """The training split holds a single class, so there is nothing to attack."""


@dataclass(frozen=True)
class ProbeSettings:
    hidden: tuple[int, ...] = (64, 128, 4)
    epochs: int = 50
    lr: float = 0.01
    batch_size: int = 32  # 0 means full batch
    standardize: bool = True


@dataclass
class ProbeResult:
    net: DenseNet
    accuracy: float
    degenerate: bool = False
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None

    def predict(self, reps: np.ndarray) -> np.ndarray:
        z = _apply_standardization(reps, self.mean, self.scale)
        return forward(self.net, z).argmax(axis=1)


@dataclass
class EvalReport:
    test_acc: float
    infer_acc: float
    guess_baseline: float
    lam: Optional[float] = None
    dataset: str = ""
    seed: int = 0
    flags: list[str] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.infer_acc - self.guess_baseline

    def __post_init__(self) -> None:
        for name in ("test_acc", "infer_acc", "guess_baseline"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


def majority_rate(values: np.ndarray) -> float:
    """Frequency of the most common value: the random-guess baseline."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("empty split")
    return float(np.bincount(values).max() / values.size)


def _apply_standardization(reps, mean, scale):
    reps = np.asarray(reps, dtype=np.float64)
    if mean is None:
        return reps
    return (reps - mean) / scale


def _check_split(train_x, train_t, test_x, test_t, what: str) -> None:
    if train_x.shape[0] < 10 or test_x.shape[0] < 10:
        raise ValueError(f"{what}: need at least 10 samples per split, got {train_x.shape[0]}/{test_x.shape[0]}")
    if train_x.shape[0] != train_t.shape[0] or test_x.shape[0] != test_t.shape[0]:
        raise ValueError(f"{what}: representation and target row counts differ")
    if train_x.shape[1] != test_x.shape[1]:
        raise ValueError(f"{what}: train/test representation widths differ")


def train_classifier(train_x: np.ndarray, train_t: np.ndarray, test_x: np.ndarray, test_t: np.ndarray,
                     arity: int, seed, settings: ProbeSettings = ProbeSettings()) -> ProbeResult:
    """Minibatch-SGD softmax classifier on fixed features; returns held-out accuracy."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_t = np.asarray(train_t, dtype=np.intp)
    test_t = np.asarray(test_t, dtype=np.intp)
    mean = scale = None
    if settings.standardize:
        mean = train_x.mean(axis=0)
        scale = train_x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    z_train = _apply_standardization(train_x, mean, scale)
    z_test = _apply_standardization(test_x, mean, scale)
    rng = np.random.default_rng(seed)
    widths = [train_x.shape[1], *settings.hidden, arity]
    net = init_net(widths, ["relu"] * len(settings.hidden) + ["identity"], seed=rng.integers(2**63))
    n = z_train.shape[0]
    bs = n if settings.batch_size <= 0 else settings.batch_size
    for _ in range(settings.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            tape = GradTape()
            loss = softmax_cross_entropy(forward(net, z_train[idx], tape), train_t[idx])
            net = apply_sgd(net, tape.backward(loss), settings.lr)
    pred = forward(net, z_test).argmax(axis=1)
    return ProbeResult(net, float(np.mean(pred == test_t)), mean=mean, scale=scale)


def train_adversary(train_reps, train_attrs, test_reps, test_attrs, arity: int, seed,
                    settings: ProbeSettings = ProbeSettings()) -> ProbeResult:
    """Fresh attribute-inference head on frozen representations."""
    train_reps, test_reps = np.asarray(train_reps), np.asarray(test_reps)
    train_attrs, test_attrs = np.asarray(train_attrs), np.asarray(test_attrs)
    _check_split(train_reps, train_attrs, test_reps, test_attrs, "adversary")
    if np.unique(train_attrs).size < 2:
        raise DegenerateSplitError(
            f"attribute takes the single value {train_attrs[0]} in the training split; "
            "inference accuracy would be meaningless"
        )
    return train_classifier(train_reps, train_attrs, test_reps, test_attrs, arity, seed, settings)


def train_utility_probe(train_reps, train_labels, test_reps, test_labels, arity: int, seed,
                        settings: ProbeSettings = ProbeSettings()) -> ProbeResult:
    """Fresh primary-task head on frozen representations.

    Constant training labels give a flagged degenerate result whose
    accuracy is the fraction of test labels equal to that constant.
    """
    train_reps, test_reps = np.asarray(train_reps), np.asarray(test_reps)
    train_labels, test_labels = np.asarray(train_labels), np.asarray(test_labels)
    _check_split(train_reps, train_labels, test_reps, test_labels, "utility probe")
    if np.unique(train_labels).size < 2:
        const = train_labels[0]
        net = init_net([train_reps.shape[1], arity], ["identity"], seed=0)
        return ProbeResult(net, float(np.mean(test_labels == const)), degenerate=True)
    return train_classifier(train_reps, train_labels, test_reps, test_labels, arity, seed, settings)


def training_psi_accuracy(devices: Sequence[DeviceModel], test_reps: np.ndarray, test_attrs: np.ndarray) -> float:
    """Mean accuracy of the devices' own training-time adversaries."""
    accs = [float(np.mean(forward(d.psi, test_reps).argmax(axis=1) == test_attrs)) for d in devices]
    return float(np.mean(accs))


def evaluate_extractor(theta: DenseNet, split, seed: int, settings: ProbeSettings = ProbeSettings(),
                       adversary: str = "fresh", devices: Sequence[DeviceModel] = (),
                       lam: Optional[float] = None, dataset: str = "") -> EvalReport:
    """Headline metrics for one trained extractor.

    ``split`` has ``train``/``test`` labeled datasets. Labels are fetched
    here and nowhere on the training path.
    """
    if split.train is None or split.test is None:
        raise ValueError("evaluation needs both train and test splits")
    before = params_digest(theta.params())
    train_reps = forward(theta, split.train.x)
    test_reps = forward(theta, split.test.x)
    flags = []
    if adversary == "fresh":
        adv = train_adversary(train_reps, split.train.u, test_reps, split.test.u,
                              split.train.attribute_arity, [seed, 1], settings)
        infer_acc = adv.accuracy
    elif adversary == "training_psi":
        if not devices:
            raise ValueError("adversary='training_psi' needs the trained devices")
        infer_acc = training_psi_accuracy(devices, test_reps, split.test.u)
    else:
        raise ValueError(f"unknown adversary mode {adversary!r}")
    probe = train_utility_probe(train_reps, split.train.labels("evaluation"), test_reps,
                                split.test.labels("evaluation"), split.train.label_arity, [seed, 2], settings)
    if probe.degenerate:
        flags.append("constant_labels")
    if params_digest(theta.params()) != before:
        raise RuntimeError("evaluation modified the extractor")
    return EvalReport(probe.accuracy, infer_acc, majority_rate(split.test.u), lam, dataset, seed, flags)


LAMBDA_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)


def sweep_rows(reports: Sequence[EvalReport]) -> list[dict]:
    """One row per (dataset, lambda, seed) with the three headline columns."""
    return [
        {"dataset": r.dataset, "lambda": r.lam, "test_acc": r.test_acc, "infer_acc": r.infer_acc,
         "gap": r.gap, "seed": r.seed}
        for r in reports
    ]
