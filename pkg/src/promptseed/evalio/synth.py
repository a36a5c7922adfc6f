"""Synthetic scenes standing in for real images and SAM mask proposals."""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..backend import TOY_PALETTE
from ..prompts import ClassRegistry, ForegroundClass
from ..sams import DEFAULT_T_M_WHOLE, PART, SUBPART, WHOLE, MaskEntry, SeedMap
from . import codecs


class PackingError(RuntimeError):
    pass


BACKGROUND_COLORS = (TOY_PALETTE["sky"], TOY_PALETTE["soil"])
BASE_COLORS = (TOY_PALETTE["red"], TOY_PALETTE["green"], TOY_PALETTE["blue"])


def class_color(c: int) -> tuple[float, float, float]:
    if c < len(BASE_COLORS):
        return BASE_COLORS[c]
    return colorsys.hsv_to_rgb((0.13 + 0.618 * c) % 1.0, 0.8, 0.8)


def default_registry(n_classes: int = 3) -> ClassRegistry:
    names = [ForegroundClass("tomato"), ForegroundClass("lime", ("green citrus",)), ForegroundClass("blueberry")]
    names += [ForegroundClass(f"thing {i}") for i in range(3, n_classes)]
    return ClassRegistry(tuple(names[:n_classes]), ("sky", "soil"))


@dataclass
class SyntheticScene:
    image: np.ndarray
    gt: SeedMap
    masks: list[MaskEntry]
    present: list[int]

    @property
    def size(self) -> tuple[int, int]:
        return self.gt.labels.shape


def _shape_mask(kind: str, top: int, left: int, h: int, w: int, size) -> np.ndarray:
    m = np.zeros(size, dtype=bool)
    if kind == "rect":
        m[top:top + h, left:left + w] = True
        return m
    yy, xx = np.mgrid[: size[0], : size[1]]
    cy, cx = top + (h - 1) / 2, left + (w - 1) / 2
    return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0


def _split(mask: np.ndarray, k: int, axis: int) -> list[np.ndarray]:
    """Cut a mask into ``k`` strips of roughly equal extent along ``axis``."""
    idx = np.flatnonzero(mask.any(axis=1 - axis))
    cuts = np.linspace(idx[0], idx[-1] + 1, k + 1).round().astype(int)
    parts = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        strip = np.zeros_like(mask)
        if axis == 0:
            strip[a:b] = True
        else:
            strip[:, a:b] = True
        piece = mask & strip
        if piece.any():
            parts.append(piece)
    return parts


def synth_scene(
    seed: int,
    n_objects: int = 2,
    size: tuple[int, int] = (128, 128),
    n_classes: int = 3,
    part_split: tuple[int, int] = (2, 3),
    confidence_noise: float = 0.2,
    subpart_prob: float = 0.5,
    object_size: tuple[int, int] = (28, 56),
    pixel_noise: float = 0.04,
    t_m_whole: float = DEFAULT_T_M_WHOLE,
    classes: list[int] | None = None,
    max_tries: int = 500,
) -> SyntheticScene:
    """Non-overlapping rectangles/ellipses on a two-region background.

    Each object yields one whole mask, a partition into 2-3 part masks and
    optional subpart masks; each background region yields a whole mask.
    Whole-mask confidences always clear ``t_m_whole``.
    """
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    H, W = size
    gt = np.zeros(size, dtype=np.int64)
    image = np.zeros((H, W, 3))
    horizon = int(rng.integers(H // 4, 3 * H // 4 + 1))
    image[:horizon] = BACKGROUND_COLORS[0]
    image[horizon:] = BACKGROUND_COLORS[1]

    boxes: list[tuple[int, int, int, int]] = []
    objects: list[tuple[np.ndarray, int]] = []
    for k in range(n_objects):
        for _ in range(max_tries):
            h, w = rng.integers(object_size[0], object_size[1] + 1, size=2)
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            if all(top + h + 2 <= t or t + bh + 2 <= top or left + w + 2 <= l or l + bw + 2 <= left
                   for t, l, bh, bw in boxes):
                break
        else:
            raise PackingError(f"could not place object {k} after {max_tries} tries")
        boxes.append((top, left, int(h), int(w)))
        c = int(classes[k]) if classes is not None else int(rng.integers(n_classes))
        m = _shape_mask("rect" if rng.random() < 0.5 else "ellipse", top, left, int(h), int(w), size)
        objects.append((m, c))
        gt[m] = c + 1
        image[m] = class_color(c)

    image = np.clip(image + rng.normal(0.0, pixel_noise, image.shape), 0.0, 1.0)
    image = np.rint(image * 255) / 255

    def conf():
        return float(np.clip(1.0 - confidence_noise * rng.random(), 0.0, 1.0))

    def whole_conf():
        return float(t_m_whole + (1.0 - t_m_whole) * conf())

    masks: list[MaskEntry] = []
    occupied = gt > 0
    for region in (np.arange(H)[:, None] < horizon, np.arange(H)[:, None] >= horizon):
        bg = np.broadcast_to(region, size) & ~occupied
        if bg.any():
            masks.append(MaskEntry(bg.copy(), WHOLE, whole_conf()))
    for m, _ in objects:
        masks.append(MaskEntry(m, WHOLE, whole_conf()))
        k = int(rng.integers(part_split[0], part_split[1] + 1))
        axis = int(rng.integers(2))
        for part in _split(m, k, axis):
            masks.append(MaskEntry(part, PART, conf()))
            if rng.random() < subpart_prob:
                for sub in _split(part, 2, 1 - axis):
                    masks.append(MaskEntry(sub, SUBPART, conf()))
    order = rng.permutation(len(masks))
    masks = [masks[i] for i in order]
    present = sorted({c for _, c in objects})
    return SyntheticScene(image, SeedMap(gt), masks, present)


def make_scenes(seed: int, n: int, n_objects=(1, 3), **kwargs) -> list[SyntheticScene]:
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(n):
        k = int(rng.integers(n_objects[0], n_objects[1] + 1))
        scenes.append(synth_scene(int(rng.integers(2 ** 31)), k, **kwargs))
    return scenes


# dataset directories ----------------------------------------------------

def write_dataset(directory, scenes: list[SyntheticScene], registry: ClassRegistry) -> None:
    """Write images, masks and ground-truth seeds plus an ``index.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    names = {i + 1: c.name for i, c in enumerate(registry.foreground)}
    items = []
    for i, scene in enumerate(scenes):
        sid = f"scene_{i:04d}"
        codecs.write_image(out / f"{sid}.png", scene.image)
        codecs.write_masks(out / f"{sid}.masks.json", scene.masks, *scene.size)
        codecs.write_seed(out / "gt" / f"{sid}.png", scene.gt, names)
        items.append({"id": sid, "present": scene.present})
    index = {"registry": registry.to_dict(), "scenes": items}
    (out / "index.json").write_text(json.dumps(index, indent=1) + "\n")


def read_dataset(directory) -> tuple[ClassRegistry, list[tuple[str, SyntheticScene]]]:
    root = Path(directory)
    index = json.loads((root / "index.json").read_text())
    registry = ClassRegistry.from_dict(index["registry"])
    scenes = []
    for item in index["scenes"]:
        sid = item["id"]
        masks, _, _ = codecs.read_masks(root / f"{sid}.masks.json")
        gt_path = root / "gt" / f"{sid}.png"
        gt = codecs.read_seed(gt_path) if gt_path.exists() else None
        image = codecs.read_image(root / f"{sid}.png")
        scenes.append((sid, SyntheticScene(image, gt, masks, list(item["present"]))))
    return registry, scenes
