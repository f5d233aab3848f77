"""Training objectives.

All reductions are means, so the detection weight is comparable across
image sizes. Functions accept numpy arrays or torch tensors and return
torch scalars (use ``float()`` for plain numbers).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class LossWeights:
    lam: float = 10.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")


@dataclass
class LossReport:
    l_pix: float
    l_pix_cons: float
    l_det: float
    l_det_cons: float
    total: float
    det_unmatched: bool = False

    def as_dict(self):
        return asdict(self)


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l_pix(pred, target) -> torch.Tensor:
    """Mean absolute error between a translated image and the day ground truth."""
    pred, target = _t(pred), _t(target)
    _same_shape(pred, target)
    return (pred - target).abs().mean()


def l_pix_cons(a, b) -> torch.Tensor:
    """Mean absolute disagreement between the two translated branches."""
    return l_pix(a, b)


def smooth_l1(x) -> torch.Tensor:
    """Mean of ``0.5 x^2`` (``|x| < 1``) / ``|x| - 0.5`` (otherwise)."""
    x = _t(x)
    if not torch.isfinite(x).all():
        raise NumericError("smooth_l1 received non-finite input")
    ax = x.abs()
    return torch.where(ax < 1, 0.5 * x * x, ax - 0.5).mean()


def l_det(heads, targets):
    """Detection loss for one translated batch against matched day targets.

    Returns ``(loss, unmatched)``; with no positive anchors only the
    classification term remains and ``unmatched`` is True.
    """
    from .detector import detection_loss_terms

    cls, reg, n_pos = detection_loss_terms(heads, targets)
    return cls + reg, n_pos == 0


def l_det_cons(head_a, head_b) -> torch.Tensor:
    """Smooth-L1 between two dense head maps on the same anchor grid."""
    a = torch.cat([head_a.objectness.unsqueeze(-1), head_a.deltas], dim=-1)
    b = torch.cat([head_b.objectness.unsqueeze(-1), head_b.deltas], dim=-1)
    _same_shape(a, b)
    return smooth_l1(a - b)


def total_loss(l_pix_value, l_pix_cons_value, l_det_value, l_det_cons_value,
               weights: LossWeights | None = None, det_unmatched=False):
    """``l_pix + l_pix_cons + lam * (l_det + l_det_cons)``.

    Returns ``(total_tensor, LossReport)``; the tensor keeps the graph.
    """
    weights = weights or LossWeights()
    parts = [_t(v) for v in (l_pix_value, l_pix_cons_value, l_det_value, l_det_cons_value)]
    values = [float(p.detach()) for p in parts]
    if any(v < 0 for v in values):
        raise ValueError(f"negative loss component in {values}")
    total = parts[0] + parts[1] + weights.lam * (parts[2] + parts[3])
    report = LossReport(*values, total=float(total.detach()), det_unmatched=det_unmatched)
    return total, report
