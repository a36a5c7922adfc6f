"""Mask-based seeding: quasi-superpixels, their classification, and seed maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

WHOLE, PART, SUBPART = 2, 1, 0
LEVELS = {"whole": WHOLE, "part": PART, "subpart": SUBPART}
LEVEL_NAMES = {v: k for k, v in LEVELS.items()}

# documented defaults; the whole-level and non-whole confidence cut-offs and
# the NMS IoU are not given numerically anywhere, t_r and alpha are
DEFAULT_T_M_WHOLE = 0.70
DEFAULT_T_M = 0.88
DEFAULT_NMS_IOU = 0.7
DEFAULT_T_R = 0.3
DEFAULT_ALPHA = 0.6


@dataclass
class MaskEntry:
    mask: np.ndarray
    level: int
    confidence: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if isinstance(self.level, str):
            self.level = LEVELS[self.level]
        if self.level not in LEVEL_NAMES:
            raise ValueError(f"invalid level {self.level}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class QuasiSuperpixelSet:
    entries: list[MaskEntry]
    source_dims: tuple[int, int]

    def __len__(self):
        return len(self.entries)

    def stack(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, *self.source_dims), dtype=bool)
        return np.stack([e.mask for e in self.entries])


@dataclass
class LabeledSuperpixels:
    """Seed values per superpixel (0 = bg, k = foreground class k-1) and scores."""

    labels: np.ndarray
    fg_scores: np.ndarray
    bg_scores: np.ndarray
    present: list[int] = field(default_factory=list)

    def label_score(self, i: int) -> float:
        lab = int(self.labels[i])
        if lab == 0:
            return float(self.bg_scores[i])
        return float(self.fg_scores[i, self.present.index(lab - 1)])


@dataclass
class SeedMap:
    """Per-pixel labels: 0 = background, k = foreground registry class k-1."""

    labels: np.ndarray
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)


def _check_dims(masks: Sequence[MaskEntry]) -> tuple[int, int] | None:
    if not masks:
        return None
    dims = masks[0].mask.shape
    for m in masks:
        if m.mask.shape != dims:
            raise ValueError(f"mask dimensions differ: {m.mask.shape} vs {dims}")
    return dims


def priority_order(masks: Sequence[MaskEntry]) -> list[int]:
    """Indices sorted by level (whole first), then confidence, then input order."""
    return sorted(range(len(masks)), key=lambda i: (-masks[i].level, -masks[i].confidence, i))


def whole_priority_nms(masks: Sequence[MaskEntry], iou_threshold: float = DEFAULT_NMS_IOU) -> list[int]:
    """Greedy mask NMS visiting masks in :func:`priority_order`.

    Whole masks are visited before any part or subpart mask, so they can
    only be suppressed by other whole masks.  Returns kept indices in
    visiting order.
    """
    if not masks:
        return []
    flat = np.stack([m.mask.ravel() for m in masks]).astype(np.float64)
    inter = flat @ flat.T
    areas = flat.sum(1)
    union = areas[:, None] + areas[None, :] - inter
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    kept: list[int] = []
    for i in priority_order(masks):
        if all(iou[i, j] < iou_threshold for j in kept):
            kept.append(i)
    return kept


def generate_quasi_superpixels(
    masks: Sequence[MaskEntry],
    t_m_whole: float = DEFAULT_T_M_WHOLE,
    nms_iou: float = DEFAULT_NMS_IOU,
    t_r: float = DEFAULT_T_R,
    t_m: float = DEFAULT_T_M,
) -> QuasiSuperpixelSet:
    """Confidence gate, whole-priority NMS, then occupation-ratio admission."""
    dims = _check_dims(masks)
    if dims is None:
        return QuasiSuperpixelSet([], (0, 0))
    gated = [m for m in masks
             if m.area > 0 and m.confidence >= (t_m_whole if m.level == WHOLE else t_m)]
    kept = [gated[i] for i in whole_priority_nms(gated, nms_iou)]
    selected: list[MaskEntry] = []
    union = np.zeros(dims, dtype=bool)
    for m in kept:
        ratio = np.logical_and(m.mask, union).sum() / m.area
        if ratio < t_r:
            selected.append(m)
            union |= m.mask
    return QuasiSuperpixelSet(selected, dims)


def superpixel_means(qsp: QuasiSuperpixelSet, maps: np.ndarray) -> np.ndarray:
    """Mean of each map inside each superpixel; shape n_superpixels x n_maps."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.shape[1:] != tuple(qsp.source_dims) and len(qsp):
        raise ValueError(f"maps {maps.shape[1:]} do not match superpixels {qsp.source_dims}")
    if not len(qsp):
        return np.zeros((0, maps.shape[0]))
    flat = qsp.stack().reshape(len(qsp), -1).astype(np.float64)
    areas = flat.sum(1, keepdims=True)
    return flat @ maps.reshape(maps.shape[0], -1).T / areas


def minmax_columns(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize each column across rows; constant columns become 0."""
    if raw.size == 0:
        return raw.copy()
    lo = raw.min(0, keepdims=True)
    hi = raw.max(0, keepdims=True)
    span = hi - lo
    return np.divide(raw - lo, span, out=np.zeros_like(raw), where=span > 0)


def background_score(fg_scores: np.ndarray, alpha: float) -> np.ndarray:
    """(1 - max foreground score) ** alpha; 1 when there is no foreground class."""
    if fg_scores.shape[1] == 0:
        return np.ones(fg_scores.shape[0])
    return (1.0 - fg_scores.max(1)) ** alpha


def _assign(fg_scores: np.ndarray, bg_scores: np.ndarray, present: Sequence[int]) -> np.ndarray:
    labels = np.zeros(len(bg_scores), dtype=np.int64)
    for i in range(len(bg_scores)):
        best, best_val = 0, bg_scores[i]
        for j, c in enumerate(present):
            if fg_scores[i, j] > best_val:
                best, best_val = c + 1, fg_scores[i, j]
            elif fg_scores[i, j] == best_val and best != 0 and c + 1 < best:
                best = c + 1
        labels[i] = best
    return labels


def classify_superpixels(qsp: QuasiSuperpixelSet, cams: np.ndarray, present: Sequence[int],
                         alpha: float = DEFAULT_ALPHA) -> LabeledSuperpixels:
    """Label each superpixel with a present class or background.

    ``cams`` holds one normalized map per entry of ``present`` at the
    superpixel resolution.  Argmax ties go to background, then to the
    lowest class index.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    present = list(present)
    n = len(qsp)
    if not present:
        return LabeledSuperpixels(np.zeros(n, dtype=np.int64), np.zeros((n, 0)), np.ones(n), [])
    fg = minmax_columns(superpixel_means(qsp, cams))
    bg = background_score(fg, alpha)
    return LabeledSuperpixels(_assign(fg, bg, present), fg, bg, present)


def generate_seed_map(qsp: QuasiSuperpixelSet, labeled: LabeledSuperpixels) -> SeedMap:
    """Paint superpixel labels; overlaps go to the higher level, then the higher label score."""
    if len(labeled.labels) != len(qsp):
        raise ValueError("labels do not align with superpixels")
    seed = np.zeros(qsp.source_dims, dtype=np.int64)
    keyed = [(e.level, labeled.label_score(i), -i) for i, e in enumerate(qsp.entries)]
    for i in sorted(range(len(qsp)), key=lambda i: keyed[i]):
        seed[qsp.entries[i].mask] = labeled.labels[i]
    return SeedMap(seed)


def seed_from_cams(qsp: QuasiSuperpixelSet, cams: np.ndarray, present: Sequence[int],
                   alpha: float = DEFAULT_ALPHA) -> SeedMap:
    return generate_seed_map(qsp, classify_superpixels(qsp, cams, present, alpha))


def refine_score_map(scores: np.ndarray, masks, alpha: float = DEFAULT_ALPHA,
                     class_ids: Sequence[int] | None = None, background_channel: bool = False,
                     **qsp_kwargs) -> SeedMap:
    """Re-label a dense score map through superpixels.

    ``scores`` is C x H0 x W0; with ``background_channel`` the last channel
    is an explicit background score and replaces the alpha-power rule.
    ``masks`` is either a list of :class:`MaskEntry` or a ready
    :class:`QuasiSuperpixelSet`.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3 or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be a finite C x H x W array")
    qsp = masks if isinstance(masks, QuasiSuperpixelSet) else generate_quasi_superpixels(masks, **qsp_kwargs)
    if len(qsp) and tuple(qsp.source_dims) != scores.shape[1:]:
        raise ValueError(f"scores {scores.shape[1:]} do not match masks {qsp.source_dims}")
    fg_maps = scores[:-1] if background_channel else scores
    present = list(class_ids) if class_ids is not None else list(range(fg_maps.shape[0]))
    if len(present) != fg_maps.shape[0]:
        raise ValueError("class_ids must name every foreground channel")
    if not background_channel:
        return seed_from_cams(qsp, fg_maps, present, alpha) if len(qsp) else SeedMap(np.zeros(scores.shape[1:], np.int64))
    if not len(qsp):
        return SeedMap(np.zeros(scores.shape[1:], np.int64))
    norm = minmax_columns(superpixel_means(qsp, scores))
    fg, bg = norm[:, :-1], norm[:, -1]
    labeled = LabeledSuperpixels(_assign(fg, bg, present), fg, bg, present)
    return generate_seed_map(qsp, labeled)


def threshold_seed_map(cams: np.ndarray, present: Sequence[int], threshold: float = 0.5) -> SeedMap:
    """Per-pixel baseline: argmax over present classes, background below ``threshold``."""
    cams = np.asarray(cams, dtype=np.float64)
    if not len(present):
        return SeedMap(np.zeros(cams.shape[1:], np.int64))
    best = cams.argmax(0)
    lut = np.asarray([c + 1 for c in present])
    seed = lut[best]
    seed[cams.max(0) < threshold] = 0
    return SeedMap(seed)
