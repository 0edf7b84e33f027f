"""Event segmentation gates and the event-aware loss terms.

Scalars that gate losses (event densities, gate values) are plain numpy
data; the per-element losses they weight are autodiff tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, NumericError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class GesVariant:
    kind: str = "indicator"
    smoothing: float = 0.0005

    def __post_init__(self):
        if self.kind not in ("indicator", "arsinh"):
            raise ContractViolation(f"unknown GES variant {self.kind!r}")
        if self.kind == "arsinh" and not self.smoothing > 0:
            raise ContractViolation("arsinh GES needs a positive smoothing coefficient")


INDICATOR = GesVariant("indicator")


def ges(alpha, alpha_thr, variant=INDICATOR):
    """Gate value for event density ``alpha``; 0 marks an event boundary.

    Works elementwise on arrays. The arsinh form grows as events get
    sparser and is bounded by ``1 / arsinh(smoothing)``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    below = (alpha < alpha_thr).astype(np.float64)
    if variant.kind == "indicator":
        out = below
    else:
        ratio = np.clip(alpha / alpha_thr, variant.smoothing, 1.0)
        out = below / np.arcsinh(ratio)
    return float(out) if out.ndim == 0 else out


def focal_loss(p, target, alpha=0.15, gamma=4.0):
    """Summed binary focal loss.

    ``p`` is a tensor of probabilities (clamped to ``[1e-7, 1 - 1e-7]``);
    ``target`` holds 0/1 occurrences. :func:`focal_loss_elements` gives the
    unreduced terms.
    """
    return focal_loss_elements(p, target, alpha, gamma).sum()


def focal_loss_elements(p, target, alpha=0.15, gamma=4.0):
    p = ad.as_tensor(p)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != p.shape:
        raise ContractViolation(f"focal loss: shapes {p.shape} and {target.shape} differ")
    if not 0 < alpha < 1 or gamma < 0:
        raise ContractViolation("focal loss needs alpha in (0, 1) and gamma >= 0")
    p = ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    # p_t = p for positives, 1 - p for negatives
    p_t = p * (2.0 * target - 1.0) + (1.0 - target)
    alpha_t = alpha * target + (1.0 - alpha) * (1.0 - target)
    weight = ad.pow(1.0 - p_t, gamma) if gamma != 0 else 1.0
    return -(alpha_t * weight * ad.log(p_t))


def weighted_bce(p, target, alpha=0.15):
    """Alpha-weighted binary cross-entropy (the gamma = 0 focal loss)."""
    p = ad.clip(ad.as_tensor(p), PROB_EPS, 1.0 - PROB_EPS)
    target = np.asarray(target, dtype=np.float64)
    return -(alpha * target * ad.log(p) + (1.0 - alpha) * (1.0 - target) * ad.log(1.0 - p)).sum()


ORDINAL_CLASSES = (-1, 0, 1)


def ordinal_targets_onehot(target):
    target = np.asarray(target)
    if not np.isin(target, ORDINAL_CLASSES).all():
        raise ContractViolation("ordinal event targets must be -1, 0 or +1")
    return np.eye(3)[target.astype(np.int64) + 1]


def ordinal_event_ce_elements(logits, target):
    logits = ad.as_tensor(logits)
    onehot = ordinal_targets_onehot(target)
    if logits.shape != onehot.shape:
        raise ContractViolation(f"logits {logits.shape} do not match targets {onehot.shape[:-1]}")
    return -(ad.log_softmax(logits, axis=-1) * onehot).sum(axis=-1)


def ordinal_event_ce(logits, target):
    """Summed 3-class cross-entropy over classes (-1, 0, +1) per coordinate."""
    return ordinal_event_ce_elements(logits, target).sum()


def event_loss(per_modality_losses, densities, configs, variant=INDICATOR):
    """Gate each modality's loss by its GES value and sum with its weight.

    A modality at an event boundary (gate 0) contributes exactly zero value
    and zero gradient.
    """
    if not len(per_modality_losses) == len(densities) == len(configs):
        raise ContractViolation("need one loss, density and config per modality")
    total = None
    for loss, alpha, cfg in zip(per_modality_losses, densities, configs):
        g = ges(alpha, cfg.ges_threshold, variant)
        coeff = cfg.event_loss_weight * g
        if np.ndim(coeff) == 0 and coeff == 0.0:
            continue
        term = ad.as_tensor(loss) * coeff
        if np.ndim(coeff) > 0:
            term = term.sum()
        total = term if total is None else total + term
    return total if total is not None else ad.Tensor(0.0)


def event_aware_obs_loss(per_element, occurrences, omega, gate):
    """Down-weight non-event elements: ``sum(eps) + omega*g*sum((e - 1) * eps)``.

    ``gate`` may be a scalar or broadcast over the leading axes of
    ``per_element``. Rejects ``omega * gate > 1`` so weights stay in [0, 1].
    """
    per_element = ad.as_tensor(per_element)
    occ = np.asarray(occurrences, dtype=np.float64)
    if occ.shape != per_element.shape:
        raise ContractViolation(f"loss shape {per_element.shape} vs occurrence shape {occ.shape}")
    if not 0 <= omega <= 1:
        raise ContractViolation("omega must lie in [0, 1]")
    gate = np.asarray(gate, dtype=np.float64)
    if np.any(gate < 0) or np.any(omega * gate > 1):
        raise ContractViolation("omega * gate must lie in [0, 1]")
    base = per_element.sum()
    if omega == 0 or not np.any(gate):
        return base
    w = omega * gate
    if w.ndim:
        w = w.reshape(w.shape + (1,) * (occ.ndim - w.ndim))
    return base + (per_element * (w * (occ - 1.0))).sum()


@dataclass
class LossBreakdown:
    l_wm: float
    l_obs: float
    l_event: float
    total: float
    beta_o: float = 1.0
    beta_e: float = 0.5
    omega: float = 0.5
    per_modality_event: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    tensor: object = None

    def as_dict(self):
        return {"l_total": self.total, "l_wm": self.l_wm, "l_obs": self.l_obs,
                "l_event": self.l_event, **self.extras}


def total_loss(l_wm, l_obs, l_event, beta_o=1.0, beta_e=0.5, omega=0.5):
    """Compose ``l_wm + beta_o * l_obs + beta_e * l_event``.

    Inputs may be floats or scalar tensors; the composed tensor (when any
    input is one) is kept on ``LossBreakdown.tensor`` for backward.
    """
    vals = {}
    for name, v in (("l_wm", l_wm), ("l_obs", l_obs), ("l_event", l_event)):
        f = float(ad.as_tensor(v).data)
        if not math.isfinite(f):
            raise NumericError(f"non-finite loss component {name}: {f}", component=name)
        vals[name] = f
    tensor = ad.as_tensor(l_wm) + beta_o * ad.as_tensor(l_obs)
    if beta_e != 0:
        tensor = tensor + beta_e * ad.as_tensor(l_event)
    return LossBreakdown(vals["l_wm"], vals["l_obs"], vals["l_event"], float(tensor.data),
                         beta_o, beta_e, omega, tensor=tensor)
