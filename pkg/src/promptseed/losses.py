"""Training losses: multi-label contrastive, CAM activation, and baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class LossBreakdown:
    mcl: torch.Tensor
    cal_fg: torch.Tensor
    cal_bg: torch.Tensor
    cal: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("mcl", "cal_fg", "cal_bg", "cal", "total")}


def mcl_loss(logits: torch.Tensor, present: Sequence[int]) -> torch.Tensor:
    """Multi-label contrastive loss over foreground logits.

    Each present class is contrasted against the absent foreground classes
    only; background logits must not be passed in.
    """
    present = sorted(set(present))
    if not present:
        raise ValueError("multi-label contrastive loss needs at least one present class")
    logits = torch.as_tensor(logits)
    absent = [i for i in range(logits.shape[0]) if i not in present]
    neg = logits[absent]
    terms = []
    for c in present:
        z = torch.cat([logits[c:c + 1], neg])
        terms.append(torch.logsumexp(z, 0) - logits[c])
    return torch.stack(terms).mean()


def coarse_binary_masks(seed, present: Sequence[int]) -> torch.Tensor:
    """|P| x H x W indicator of ``seed == c + 1`` for each present class."""
    seed = torch.as_tensor(np.asarray(getattr(seed, "labels", seed)))
    return torch.stack([(seed == c + 1) for c in present]) if present else torch.zeros(0, *seed.shape, dtype=torch.bool)


def cal_loss(seed, seg_cams: torch.Tensor, present: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """CAM activation loss against a (constant) coarse seed map.

    ``seg_cams`` is |P| x H x W, aligned with ``present``.  Returns
    ``(fg, bg, cal)`` where ``cal = (fg + bg) / (|P| H W)``.  The
    foreground maximum is detached; a class with no seed pixels contributes
    only its background term.
    """
    present = list(present)
    if not present:
        raise ValueError("CAM activation loss needs at least one present class")
    masks = coarse_binary_masks(seed, present).to(seg_cams.dtype)
    if masks.shape != seg_cams.shape:
        raise ValueError(f"seed masks {tuple(masks.shape)} do not match CAMs {tuple(seg_cams.shape)}")
    fg = seg_cams.new_zeros(())
    bg = seg_cams.new_zeros(())
    for d, m in zip(masks, seg_cams):
        if d.any():
            peak = (d * m).max().detach()
            fg = fg + (d * (peak - m)).abs().sum()
        bg = bg + ((1 - d) * m).abs().sum()
    h, w = seg_cams.shape[-2:]
    return fg, bg, (fg + bg) / (len(present) * h * w)


def total_loss(mcl, cal):
    return mcl + cal


class LinearScale(torch.nn.Module):
    """x -> a * x + b, fixed (manual) or learnable (auto)."""

    def __init__(self, a: float = 1.0, b: float = 0.0, learnable: bool = False, dtype=torch.float64):
        super().__init__()
        a_t = torch.tensor(float(a), dtype=dtype)
        b_t = torch.tensor(float(b), dtype=dtype)
        if learnable:
            self.a = torch.nn.Parameter(a_t)
            self.b = torch.nn.Parameter(b_t)
        else:
            self.register_buffer("a", a_t)
            self.register_buffer("b", b_t)

    def forward(self, x):
        return self.a * x + self.b


def make_scaling(scaling) -> LinearScale | None:
    """``None``/``"none"``, ``("manual", a, b)`` or ``"auto"``."""
    if scaling is None or scaling == "none":
        return None
    if scaling == "auto":
        return LinearScale(learnable=True)
    if isinstance(scaling, LinearScale):
        return scaling
    kind, a, b = scaling
    if kind != "manual":
        raise ValueError(f"unknown scaling {scaling!r}")
    return LinearScale(a, b)


def baseline_loss(kind: str, values: torch.Tensor, targets, scaling=None) -> torch.Tensor:
    """Binary cross-entropy baselines.

    ``bce``: ``values`` are classification logits over F, ``targets`` the
    multi-hot image labels.  ``sigmoid_ce``: ``values`` are positive-class
    CAMs (|P| x H x W) and ``targets`` the matching binary seed masks; the
    probability of each pixel is the sigmoid of its (scaled) activation.
    """
    if kind not in ("bce", "sigmoid_ce"):
        raise ValueError(f"unknown baseline loss {kind!r}")
    scale = make_scaling(scaling)
    x = scale(values) if scale is not None else values
    targets = torch.as_tensor(np.asarray(targets), dtype=x.dtype)
    return F.binary_cross_entropy_with_logits(x, targets)

