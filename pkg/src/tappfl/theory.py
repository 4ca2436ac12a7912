"""Exact checks of the tradeoff and privacy bounds on small discrete joints.

A joint is a pmf over (representation cell, attribute u, label y) with
binary u and y. Every quantity here is computed exactly; there is no
sampling except in the instance generators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import bisect
from scipy.special import expit, xlogy

BRUTE_FORCE_MAX_BINS = 20
QUANTIZER_MAX_CELLS = 2**20
TOL = 1e-9


class JointError(ValueError):
    """A conditional needed by a bound is undefined."""


@dataclass(frozen=True)
class DiscreteJoint:
    """``pmf[r, u, y]`` with binary ``u`` and ``y``."""

    pmf: np.ndarray

    def __post_init__(self) -> None:
        pmf = np.asarray(self.pmf, dtype=np.float64)
        if pmf.ndim != 3 or pmf.shape[1:] != (2, 2) or pmf.shape[0] < 1:
            raise ValueError(f"pmf must have shape (r_bins, 2, 2), got {pmf.shape}")
        if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
            raise ValueError("pmf entries must be finite and non-negative")
        if abs(pmf.sum() - 1.0) > 1e-12:
            raise ValueError(f"pmf sums to {pmf.sum()!r}, not 1")
        object.__setattr__(self, "pmf", pmf)

    @property
    def r_bins(self) -> int:
        return self.pmf.shape[0]

    @property
    def p_ru(self) -> np.ndarray:
        return self.pmf.sum(axis=2)

    @property
    def p_r(self) -> np.ndarray:
        return self.pmf.sum(axis=(1, 2))

    @property
    def p_u(self) -> np.ndarray:
        return self.pmf.sum(axis=(0, 2))

    def r_given_u(self) -> np.ndarray:
        """Columns are p(r | u=0) and p(r | u=1)."""
        pu = self.p_u
        for a in (0, 1):
            if pu[a] <= 0:
                raise JointError(f"P(u={a}) = 0, so p(r | u={a}) is undefined")
        return self.p_ru / pu


def random_joint(rng: np.random.Generator, r_bins: int, alpha: float = 1.0) -> DiscreteJoint:
    """Dirichlet-distributed joint over ``r_bins * 4`` cells."""
    pmf = rng.dirichlet(np.full(r_bins * 4, alpha)).reshape(r_bins, 2, 2)
    return DiscreteJoint(pmf / pmf.sum())


def binary_entropy_bits(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(xlogy(p, p) + xlogy(1.0 - p, 1.0 - p)) / math.log(2.0)


def tv_advantage(joint: DiscreteJoint) -> float:
    """Total-variation distance between the two attribute conditionals."""
    cond = joint.r_given_u()
    return float(0.5 * np.abs(cond[:, 0] - cond[:, 1]).sum())


def brute_force_advantage(joint: DiscreteJoint, chunk_bits: int = 14) -> float:
    """Maximum over every subset of cells of |P(E | u=0) - P(E | u=1)|.

    Each subset is the acceptance region of one binary classifier.
    """
    n = joint.r_bins
    if n > BRUTE_FORCE_MAX_BINS:
        raise ValueError(f"brute force is limited to {BRUTE_FORCE_MAX_BINS} bins, got {n}")
    cond = joint.r_given_u()
    diff = cond[:, 0] - cond[:, 1]
    low = min(n, chunk_bits)
    low_masks = (np.arange(2**low)[:, None] >> np.arange(low)) & 1
    low_sums = low_masks @ diff[:low]
    best = 0.0
    for high in range(2 ** (n - low)):
        high_bits = (high >> np.arange(n - low)) & 1
        sums = low_sums + high_bits @ diff[low:]
        best = max(best, float(np.abs(sums).max()))
    return best


def worst_case_advantage(joint: DiscreteJoint, cross_check: bool = True) -> float:
    """Worst-case adversary advantage as the TV distance.

    With ``cross_check`` and at most 20 bins, the value is confirmed against
    exhaustive classifier enumeration.
    """
    adv = tv_advantage(joint)
    if cross_check and joint.r_bins <= BRUTE_FORCE_MAX_BINS:
        brute = brute_force_advantage(joint)
        if abs(brute - adv) > 1e-12:
            raise AssertionError(f"TV advantage {adv!r} disagrees with brute force {brute!r}")
    return adv


def conditional_entropy_bits(joint: DiscreteJoint) -> float:
    """H(u | r) in bits; cells with p(r) = 0 contribute nothing."""
    p_r = joint.p_r
    occupied = p_r > 0
    q = np.zeros_like(p_r)
    q[occupied] = joint.p_ru[occupied, 1] / p_r[occupied]
    return float(np.sum(p_r * binary_entropy_bits(q)))


def bayes_accuracy(joint: DiscreteJoint) -> float:
    """Accuracy of the best attribute guess from r: sum_r max_a p(r, u=a)."""
    return float(joint.p_ru.max(axis=1).sum())


def thm2_accuracy_bound(h_bits: float) -> float:
    """Upper bound ``1 - H / (2 log2(6 / H))`` on any adversary's accuracy."""
    if h_bits > 1.0 + 1e-12:
        raise ValueError(f"H(u|r) = {h_bits} exceeds 1 bit, impossible for a binary attribute")
    if h_bits <= 0.0:
        return 1.0
    h = min(h_bits, 1.0)
    return 1.0 - h / (2.0 * math.log2(6.0 / h))


@dataclass(frozen=True)
class Thm2Result:
    bayes_acc: float
    bound: float
    h_bits: float

    @property
    def holds(self) -> bool:
        return self.bayes_acc <= self.bound + TOL

    @property
    def margin(self) -> float:
        return self.bound - self.bayes_acc


def verify_thm2(joint: DiscreteJoint) -> Thm2Result:
    h = conditional_entropy_bits(joint)
    return Thm2Result(bayes_accuracy(joint), thm2_accuracy_bound(h), h)


def inverse_binary_entropy(p: float, xtol: float = 1e-12) -> float:
    """The q in [0, 1/2] with H2(q) = p, by bisection."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"binary entropy takes values in [0, 1], got {p}")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 0.5
    return float(bisect(lambda q: float(binary_entropy_bits(q)) - p, 0.0, 0.5, xtol=xtol, maxiter=200))


@dataclass(frozen=True)
class LemmaPoint:
    p: float
    inverse: float
    lower: float

    @property
    def holds(self) -> bool:
        return self.inverse >= self.lower - 1e-12


def verify_inverse_entropy_lemma(resolution: int = 1000, xtol: float = 1e-12) -> list[LemmaPoint]:
    """Check H2^{-1}(p) >= p / (2 log2(6/p)) on the grid p = k / resolution."""
    points = []
    for k in range(1, resolution + 1):
        p = k / resolution
        points.append(LemmaPoint(p, inverse_binary_entropy(p, xtol), p / (2.0 * math.log2(6.0 / p))))
    return points


@dataclass(frozen=True)
class SigmoidClassifier:
    """``c(r) = sigmoid(w . r + b)``; Lipschitz with constant ``|w| / 4``."""

    weight: np.ndarray
    bias: float

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return expit(np.asarray(points) @ np.asarray(self.weight) + self.bias)

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.weight)) / 4.0


@dataclass(frozen=True)
class TheoryReport:
    adv: float
    delta: float
    R: float
    C_L: float
    err: float
    H: float
    thm1_lhs: float
    thm1_rhs: float
    thm2_acc: float
    thm2_bound: float
    thm1_holds: bool
    thm2_holds: bool
    instance_id: int = 0

    def __post_init__(self) -> None:
        if not -1e-12 <= self.adv <= 1.0 + 1e-12:
            raise ValueError(f"advantage {self.adv} outside [0, 1]")
        if self.H < -1e-12:
            raise ValueError(f"negative entropy {self.H}")

    @property
    def verdicts(self) -> str:
        return f"thm1={'pass' if self.thm1_holds else 'fail'};thm2={'pass' if self.thm2_holds else 'fail'}"


def label_gap(joint: DiscreteJoint) -> float:
    """|P(y=1 | u=0) - P(y=1 | u=1)|."""
    p_uy = joint.pmf.sum(axis=0)
    pu = p_uy.sum(axis=1)
    for a in (0, 1):
        if pu[a] <= 0:
            raise JointError(f"P(u={a}) = 0, so P(y=1 | u={a}) is undefined")
    return float(abs(p_uy[0, 1] / pu[0] - p_uy[1, 1] / pu[1]))


def group_cross_entropy_sum(joint: DiscreteJoint, probs: np.ndarray) -> float:
    """Sum over attribute groups of the expected cross-entropy (nats) of ``probs`` for y."""
    probs = np.asarray(probs, dtype=np.float64)
    pu = joint.p_u
    total = 0.0
    for a in (0, 1):
        if pu[a] <= 0:
            raise JointError(f"P(u={a}) = 0, so the group-{a} error is undefined")
        w1 = joint.pmf[:, a, 1] / pu[a]
        w0 = joint.pmf[:, a, 0] / pu[a]
        # xlogy keeps 0 * log(0) at zero for cells the group never visits
        total += float(-(xlogy(w1, probs) + xlogy(w0, 1.0 - probs)).sum())
    return total


def verify_thm1(joint: DiscreteJoint, points: np.ndarray, classifier: SigmoidClassifier,
                R: Optional[float] = None, instance_id: int = 0) -> TheoryReport:
    """Evaluate both bounds on one instance.

    ``points[k]`` embeds cell ``k``; ``R`` defaults to the largest point norm
    and must not be smaller than it.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] != joint.r_bins:
        raise ValueError(f"{points.shape[0]} embedding points for {joint.r_bins} cells")
    max_norm = float(np.linalg.norm(points, axis=1).max())
    R = max_norm if R is None else float(R)
    if R < max_norm - 1e-12:
        raise ValueError(f"R={R} is below the largest embedding norm {max_norm}")
    adv = worst_case_advantage(joint)
    delta = label_gap(joint)
    err = group_cross_entropy_sum(joint, classifier(points))
    rhs = delta - 2.0 * R * classifier.lipschitz * adv
    t2 = verify_thm2(joint)
    return TheoryReport(adv, delta, R, classifier.lipschitz, err, t2.h_bits, err, rhs,
                        t2.bayes_acc, t2.bound, err >= rhs - TOL, t2.holds, instance_id)


def random_instance(rng: np.random.Generator, max_bins: int = 8, dim: int = 2,
                    instance_id: int = 0) -> TheoryReport:
    """Random joint, random embedding inside the unit ball scaled by R, random classifier."""
    r_bins = int(rng.integers(2, max_bins + 1))
    while True:
        joint = random_joint(rng, r_bins, alpha=float(rng.uniform(0.2, 2.0)))
        if np.all(joint.p_u > 1e-9):
            break
    R = float(rng.uniform(0.5, 3.0))
    raw = rng.standard_normal((r_bins, dim))
    radii = R * rng.uniform(0.0, 1.0, size=r_bins)
    points = raw / np.linalg.norm(raw, axis=1, keepdims=True) * radii[:, None]
    clf = SigmoidClassifier(rng.standard_normal(dim) * rng.uniform(0.1, 3.0), float(rng.normal()))
    return verify_thm1(joint, points, clf, R=R, instance_id=instance_id)


def run_suite(instances: int = 50, seed: int = 0, max_bins: int = 8) -> list[TheoryReport]:
    rng = np.random.default_rng([seed, 0x7E0])
    return [random_instance(rng, max_bins, instance_id=k) for k in range(instances)]


THEORY_COLUMNS = ("instance_id", "adv", "delta", "H", "err", "thm1_lhs", "thm1_rhs", "thm2_acc",
                  "thm2_bound", "verdicts")


def report_row(rep: TheoryReport) -> dict:
    return {name: getattr(rep, name) for name in THEORY_COLUMNS}


def quantize(reps: np.ndarray, bins: int, low: Optional[np.ndarray] = None,
             high: Optional[np.ndarray] = None) -> np.ndarray:
    """Uniform per-dimension bins, then one id per occupied product cell.

    Ids are the ranks of the occupied cells in lexicographic order.
    """
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2:
        raise ValueError("representations must be a matrix")
    if bins < 1:
        raise ValueError("need at least one bin per dimension")
    if bins ** reps.shape[1] > QUANTIZER_MAX_CELLS:
        raise ValueError(
            f"{bins} bins over {reps.shape[1]} dimensions gives more than {QUANTIZER_MAX_CELLS} cells"
        )
    low = reps.min(axis=0) if low is None else np.asarray(low, dtype=np.float64)
    high = reps.max(axis=0) if high is None else np.asarray(high, dtype=np.float64)
    width = np.where(high > low, high - low, 1.0)
    idx = np.clip(np.floor((reps - low) / width * bins), 0, bins - 1).astype(np.int64)
    _, cells = np.unique(idx, axis=0, return_inverse=True)
    return cells.reshape(-1)


def empirical_joint(cells: np.ndarray, u: np.ndarray, y: np.ndarray) -> DiscreteJoint:
    cells = np.asarray(cells)
    counts = np.zeros((int(cells.max()) + 1, 2, 2))
    np.add.at(counts, (cells, np.asarray(u), np.asarray(y)), 1.0)
    return DiscreteJoint(counts / counts.sum())
