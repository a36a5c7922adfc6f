"""Softmax-GradCAM and attention-affinity refinement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backend import EncoderOutputs


class NoGradientPathError(RuntimeError):
    pass


@dataclass
class CamStack:
    """One activation map per present class.

    ``maps`` is C_P x H x W (numpy or torch); ``class_ids`` are foreground
    registry indices in the same order.
    """

    maps: np.ndarray | torch.Tensor
    class_ids: list[int]
    refined: bool = False

    def __post_init__(self):
        if len(self.class_ids) != self.maps.shape[0]:
            raise ValueError(f"{len(self.class_ids)} class ids for {self.maps.shape[0]} maps")

    def numpy(self) -> np.ndarray:
        if isinstance(self.maps, torch.Tensor):
            return self.maps.detach().cpu().numpy()
        return np.asarray(self.maps)


@dataclass
class ScoreVector:
    scores: torch.Tensor
    present: list[int]
    background: list[int]


def softmax_scores(logits, present: Sequence[int], background: Sequence[int]) -> ScoreVector:
    """Softmax over present-foreground and background logits, kept for present classes.

    ``present`` and ``background`` index into ``logits``.  Each score is
    evaluated as a sigmoid against the log-sum-exp of the competing logits,
    which is overflow-safe without subtracting the maximum.
    """
    logits = torch.as_tensor(logits)
    idx = list(present) + list(background)
    if any(i < 0 or i >= logits.shape[0] for i in idx):
        raise IndexError(f"logits of length {logits.shape[0]} do not cover classes {idx}")
    sub = logits[idx]
    n = len(sub)
    if n == 1:
        return ScoreVector(torch.ones_like(sub), list(present), list(background))
    # s_c = sigmoid(y_c - logsumexp(others)) in log space: same value as the
    # plain softmax, but its gradient keeps full precision when s_c is near 1
    scores = []
    for i in range(len(present)):
        others = torch.cat([sub[:i], sub[i + 1:]])
        scores.append(torch.exp(F.logsigmoid(sub[i] - torch.logsumexp(others, 0))))
    probs = torch.stack(scores) if scores else sub[:0]
    return ScoreVector(probs, list(present), list(background))


def gradcam_weights(score: torch.Tensor, outputs: EncoderOutputs, create_graph: bool = False) -> torch.Tensor:
    """Spatial mean of d(score)/d(feature_map), one weight per channel."""
    fmap = outputs.feature_map
    if outputs.grad_mode == "none" or not fmap.requires_grad:
        raise NoGradientPathError("feature map carries no gradient; encode with grad_mode != 'none'")
    if not score.requires_grad:
        return torch.zeros(fmap.shape[0], dtype=fmap.dtype)
    (grad,) = torch.autograd.grad(score, fmap, retain_graph=True, create_graph=create_graph, allow_unused=True)
    if grad is None:
        return torch.zeros(fmap.shape[0], dtype=fmap.dtype)
    return grad.mean(dim=(1, 2))


def gradcam(score: torch.Tensor, outputs: EncoderOutputs, create_graph: bool = False) -> torch.Tensor:
    """ReLU of the channel-weighted feature map.

    With ``create_graph`` the weights stay differentiable with respect to
    whatever produced ``score`` (the text side), which is how gradients
    reach the prompts during training.  The feature map itself always
    enters as a constant.
    """
    w = gradcam_weights(score, outputs, create_graph)
    return torch.relu(torch.einsum("k,khw->hw", w, outputs.feature_map.detach()))


def gradcam_stack(scores: ScoreVector, outputs: EncoderOutputs, create_graph: bool = False) -> CamStack:
    maps = [gradcam(s, outputs, create_graph) for s in scores.scores]
    if not maps:
        _, h, w = outputs.feature_map.shape
        return CamStack(torch.zeros(0, h, w, dtype=outputs.feature_map.dtype), [])
    return CamStack(torch.stack(maps), list(scores.present))


def affinity(attention, normalization: str = "row", sinkhorn_iters: int = 20) -> torch.Tensor:
    """Symmetrize attention by transpose-averaging, then normalize."""
    attn = torch.as_tensor(attention)
    if attn.ndim == 3:
        attn = attn.mean(0)
    a = (attn + attn.T) / 2
    if normalization == "row":
        return a / a.sum(-1, keepdim=True)
    if normalization == "sinkhorn":
        for _ in range(sinkhorn_iters):
            a = a / a.sum(-1, keepdim=True)
            a = a / a.sum(-2, keepdim=True)
        return a / a.sum(-1, keepdim=True)
    raise ValueError(f"unknown affinity normalization {normalization!r}")


def normalize_cam(cam):
    """Clip negatives, then min-max to [0, 1]; a constant map becomes zeros."""
    if isinstance(cam, torch.Tensor):
        x = cam.clamp(min=0)
        lo, hi = x.min(), x.max()
        if hi <= lo:
            return torch.zeros_like(x)
        return (x - lo) / (hi - lo)
    x = np.clip(np.asarray(cam, dtype=np.float64), 0, None)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def box_mask(cam, threshold: float = 0.4) -> torch.Tensor:
    """Bounding box of pixels whose normalized activation exceeds ``threshold``."""
    norm = normalize_cam(torch.as_tensor(cam).detach())
    hot = norm > threshold
    box = torch.zeros_like(hot)
    if hot.any():
        rows = torch.nonzero(hot.any(1)).flatten()
        cols = torch.nonzero(hot.any(0)).flatten()
        box[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1] = True
    return box


def caa_refine(cam, attention, t: int = 2, box_threshold: float = 0.4, box=None,
               normalization: str = "row") -> torch.Tensor:
    """Propagate a CAM ``t`` times through the attention affinity, inside its box."""
    cam = torch.as_tensor(cam)
    h, w = cam.shape
    attn = torch.as_tensor(attention)
    if attn.shape[-2:] != (h * w, h * w):
        raise ValueError(f"attention {tuple(attn.shape)} does not match a {h}x{w} map")
    if t < 0:
        raise ValueError("t must be >= 0")
    if box is None:
        box = box_mask(cam, box_threshold)
    box = torch.as_tensor(box, dtype=torch.bool)
    a = affinity(attn, normalization).to(cam.dtype)
    v = cam.reshape(h * w)
    for _ in range(t):
        v = a @ v
    return (v * box.reshape(h * w).to(cam.dtype)).reshape(h, w)


def refine_stack(cams: CamStack, attention, t: int = 2, box_threshold: float = 0.4,
                 normalization: str = "row") -> CamStack:
    maps = cams.maps if isinstance(cams.maps, torch.Tensor) else torch.as_tensor(cams.maps)
    out = [caa_refine(m, attention, t, box_threshold, normalization=normalization) for m in maps]
    stacked = torch.stack(out) if out else maps.clone()
    return CamStack(stacked, list(cams.class_ids), refined=True)
