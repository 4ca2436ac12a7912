"""Upload-time defenses: parameter noise and magnitude pruning.

Each defense is a pure transform applied to the extractor copy a device
uploads; the device keeps training from its untouched local copy. No
formal privacy budget is attached to the noise scale.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .fl import FLConfig, UploadTransform, upload_rng
from .nn.tensor import ParamTensor, flatten

DEFENSE_KINDS = ("none", "dp_gaussian", "dp_laplace", "compression")


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "none"
    noise_scale: float = 0.0
    prune_rate: float = 0.0
    per_layer: bool = False

    def __post_init__(self) -> None:
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if self.kind in ("dp_gaussian", "dp_laplace") and not self.noise_scale >= 0:
            raise ValueError(f"noise_scale must be non-negative, got {self.noise_scale}")
        if self.kind == "compression" and not 0.0 <= self.prune_rate < 1.0:
            raise ValueError(f"prune_rate must lie in [0, 1), got {self.prune_rate}")

    @property
    def hyperparam(self) -> float:
        if self.kind == "compression":
            return self.prune_rate
        if self.kind in ("dp_gaussian", "dp_laplace"):
            return self.noise_scale
        return 0.0


def dp_noise(params: Sequence[ParamTensor], kind: str, scale: float,
             rng: np.random.Generator) -> list[ParamTensor]:
    """Add iid Gaussian (std ``scale``) or Laplace (scale ``scale``) noise to every entry.

    A zero scale draws nothing and returns bitwise copies.
    """
    if not scale >= 0:
        raise ValueError(f"noise scale must be non-negative, got {scale}")
    if kind not in ("dp_gaussian", "dp_laplace"):
        raise ValueError(f"dp_noise needs dp_gaussian or dp_laplace, got {kind!r}")
    if scale == 0:
        return [p.copy() for p in params]
    out = []
    for p in params:
        if kind == "dp_gaussian":
            noise = rng.normal(0.0, scale, size=p.size)
        else:
            noise = rng.laplace(0.0, scale, size=p.size)
        out.append(p.with_data(p.data + noise))
    return out


def _prune_flat(values: np.ndarray, rate: float) -> np.ndarray:
    """Mask keeping all but the floor(rate * N) smallest magnitudes; ties go to lower index."""
    k = int(np.floor(rate * values.size))
    keep = np.ones(values.size, dtype=bool)
    if k > 0:
        order = np.argsort(np.abs(values), kind="stable")
        keep[order[:k]] = False
    return keep


def magnitude_prune(params: Sequence[ParamTensor], rate: float,
                    per_layer: bool = False) -> tuple[list[ParamTensor], list[np.ndarray]]:
    """Zero the smallest-magnitude fraction of entries; returns the set and its kept-masks.

    The quantile is taken over the whole set unless ``per_layer``.
    Survivors are bit-identical to the input.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"prune rate must lie in [0, 1), got {rate}")
    if per_layer:
        masks = [_prune_flat(p.data, rate) for p in params]
    else:
        flat_mask = _prune_flat(flatten(params), rate)
        masks, offset = [], 0
        for p in params:
            masks.append(flat_mask[offset:offset + p.size])
            offset += p.size
    out = [p.with_data(np.where(m, p.data, 0.0)) for p, m in zip(params, masks)]
    return out, [m.reshape(p.shape) for p, m in zip(params, masks)]


def upload_transform(defense: DefenseConfig, seed: int) -> Optional[UploadTransform]:
    """Per-upload transform for ``fl.run_round``; ``None`` when the defense is a no-op."""
    if defense.kind == "none":
        return None
    if defense.kind == "compression":
        if defense.prune_rate == 0:
            return None

        def prune(params, device_id, round_index):
            return magnitude_prune(params, defense.prune_rate, defense.per_layer)[0]
        return prune
    if defense.noise_scale == 0:
        return None

    def noise(params, device_id, round_index):
        return dp_noise(params, defense.kind, defense.noise_scale, upload_rng(seed, device_id, round_index))
    return noise


def baseline_config(cfg: FLConfig) -> FLConfig:
    """The same federation with the privacy objective switched off."""
    return replace(cfg, lambdas=(0.0,) * cfg.num_devices)


MATCHED_COLUMNS = ("defense", "hyperparam", "test_acc", "infer_acc")


def matched_leakage_rows(entries) -> list[dict]:
    """Rows of ``(DefenseConfig or label, EvalReport)`` for the matched-leakage table."""
    rows = []
    for defense, report in entries:
        if isinstance(defense, DefenseConfig):
            name, hp = defense.kind, defense.hyperparam
        else:
            name, hp = str(defense[0]), float(defense[1])
        rows.append({"defense": name, "hyperparam": hp, "test_acc": report.test_acc,
                     "infer_acc": report.infer_acc})
    return rows


def closest_match(candidates, target_infer: float):
    """The candidate whose inference accuracy is nearest ``target_infer``; ties keep the first."""
    best = None
    for item in candidates:
        dist = abs(item[1].infer_acc - target_infer)
        if best is None or dist < best[0]:
            best = (dist, item)
    if best is None:
        raise ValueError("no candidates to match against")
    return best[1]
