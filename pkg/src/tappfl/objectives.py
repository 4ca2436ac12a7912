"""Privacy and utility losses for device training.

The privacy term is the adversary's softmax cross-entropy (a likelihood
surrogate for the contrastive upper bound on I(r; u)); the utility term
is the Jensen-Shannon MI estimate computed from a critic's scores on
matched and mismatched (x, r, u) triples.

All functions accept plain arrays or tape nodes. On arrays they return
floats; on nodes they return nodes so the result can be differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .nn import autodiff as ad
from .nn.autodiff import Node
from .nn.tensor import NonFiniteError

ThetaPrivacySign = Literal["eq7", "alg1"]


def _finish(x):
    return x if isinstance(x, Node) and x.tape is not None else float(ad.value_of(x))


@dataclass
class PrivacyLossBatch:
    logits: object  # [b, A] array or Node
    attributes: np.ndarray  # [b] ints in 0..A-1

    def __post_init__(self) -> None:
        values = ad.value_of(self.logits)
        self.attributes = np.asarray(self.attributes)
        if values.ndim != 2 or values.shape[0] != self.attributes.shape[0]:
            raise ValueError(f"logits {values.shape} do not match {self.attributes.shape[0]} attributes")
        if values.shape[0] == 0:
            raise ValueError("empty privacy batch")
        if not np.all(np.isfinite(values)):
            raise NonFiniteError("privacy logits contain non-finite values")
        if not np.issubdtype(self.attributes.dtype, np.integer):
            raise ValueError("attributes must be integers")
        arity = values.shape[1]
        bad = (self.attributes < 0) | (self.attributes >= arity)
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise ValueError(f"attribute {self.attributes[j]} at row {j} outside 0..{arity - 1}")


@dataclass
class UtilityCriticBatch:
    pos_scores: object  # [b] critic scores on matched triples
    neg_scores: object  # [b] scores with x replaced by an independent sample

    def __post_init__(self) -> None:
        pos, neg = ad.value_of(self.pos_scores), ad.value_of(self.neg_scores)
        if pos.size == 0 or neg.size == 0:
            raise ValueError("empty critic batch")
        if pos.shape != neg.shape:
            raise ValueError(f"positive scores {pos.shape} vs negative scores {neg.shape}")


def softplus(z):
    """``log(1 + exp(z))`` without overflow, as array or node."""
    if isinstance(z, Node):
        return ad.softplus(z)
    return ad.softplus_values(z)


def ce_privacy_loss(batch: PrivacyLossBatch):
    """Mean of ``-log softmax(logits)[u_j]`` over the batch."""
    return _finish(ad.softmax_cross_entropy(batch.logits, batch.attributes))


def jsd_mi_estimate(batch: UtilityCriticBatch):
    """``mean(-sp(-pos)) - mean(sp(neg))``; never positive."""
    pos_term = ad.mean(ad.softplus(ad.neg(batch.pos_scores)))
    neg_term = ad.mean(ad.softplus(batch.neg_scores))
    return _finish(ad.neg(ad.add(pos_term, neg_term)))


def combined_device_loss(priv, util, lam: float, theta_privacy_sign: ThetaPrivacySign = "eq7"):
    """Split the per-device objective into the three quantities each net descends.

    Returns ``(loss_theta, loss_psi, loss_omega)``:

    * ``loss_psi = CE`` -- the adversary maximises the attribute likelihood.
    * ``loss_omega = -I_jsd`` -- the critic cooperates with the extractor.
    * ``loss_theta = lam * (-CE) + (1 - lam) * (-I_jsd)`` -- the extractor
      pushes the adversary's CE up while keeping the MI estimate high.

    ``theta_privacy_sign="alg1"`` gives the literal pseudo-code variant
    ``lam * CE + (1 - lam) * (-I_jsd)`` for comparison runs.
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if theta_privacy_sign not in ("eq7", "alg1"):
        raise ValueError(f"unknown theta_privacy_sign {theta_privacy_sign!r}")
    util_loss = ad.neg(util)
    priv_term = ad.neg(priv) if theta_privacy_sign == "eq7" else priv
    loss_theta = ad.add(ad.mul(priv_term, lam), ad.mul(util_loss, 1.0 - lam))
    return _finish(loss_theta), _finish(priv), _finish(util_loss)
