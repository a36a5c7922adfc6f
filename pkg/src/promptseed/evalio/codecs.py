"""File formats: mask JSON with COCO-style RLE, CAM tensor binary, seed PNG."""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from ..sams import LEVEL_NAMES, LEVELS, MaskEntry, SeedMap


class FormatError(ValueError):
    pass


# run-length encoding ----------------------------------------------------

def rle_encode(mask: np.ndarray) -> list[int]:
    """Column-major run lengths, starting with a (possibly empty) background run."""
    flat = np.asarray(mask, dtype=bool).ravel(order="F")
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return counts


def rle_decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise FormatError("negative run length")
    if sum(counts) != height * width:
        raise FormatError(f"run lengths sum to {sum(counts)}, expected {height * width}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape((height, width), order="F")


# mask files -------------------------------------------------------------

def masks_to_dict(masks: Sequence[MaskEntry], height: int, width: int) -> dict:
    return {
        "height": height,
        "width": width,
        "masks": [
            {"level": LEVEL_NAMES[m.level], "confidence": float(m.confidence), "rle": rle_encode(m.mask)}
            for m in masks
        ],
    }


def masks_from_dict(doc: dict) -> tuple[list[MaskEntry], int, int]:
    try:
        h, w = int(doc["height"]), int(doc["width"])
        items = doc["masks"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"mask document is missing {exc}") from exc
    out = []
    for i, item in enumerate(items):
        if item.get("level") not in LEVELS:
            raise FormatError(f"mask {i}: invalid level {item.get('level')!r}")
        try:
            mask = rle_decode(item["rle"], h, w)
        except FormatError as exc:
            raise FormatError(f"mask {i}: {exc}") from exc
        out.append(MaskEntry(mask, LEVELS[item["level"]], float(item["confidence"])))
    return out, h, w


def write_masks(path, masks: Sequence[MaskEntry], height: int, width: int) -> None:
    Path(path).write_text(json.dumps(masks_to_dict(masks, height, width)))


def read_masks(path) -> tuple[list[MaskEntry], int, int]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON at byte {exc.pos}") from exc
    try:
        return masks_from_dict(doc)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# CAM tensor binary ------------------------------------------------------

_DTYPES = {"f32le": np.dtype("<f4")}


def encode_tensor(array, class_ids: Sequence[int] = (), **extra) -> bytes:
    """One JSON header line followed by raw little-endian float32 data (C order)."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = {"shape": list(arr.shape), "class_ids": [int(c) for c in class_ids], "dtype": "f32le", **extra}
    return json.dumps(header, sort_keys=True).encode() + b"\n" + arr.tobytes()


def decode_tensors(data: bytes) -> list[tuple[np.ndarray, dict]]:
    """Decode one or more concatenated tensor records."""
    out = []
    pos = 0
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"missing header terminator after byte {pos}")
        try:
            header = json.loads(data[pos:nl])
            shape = [int(s) for s in header["shape"]]
            dtype = _DTYPES[header["dtype"]]
        except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed header at byte {pos}: {exc}") from exc
        start = nl + 1
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if start + nbytes > len(data):
            raise FormatError(
                f"truncated tensor data at byte {start}: expected {nbytes} bytes, found {len(data) - start}")
        arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=start).reshape(shape)
        out.append((arr.copy(), header))
        pos = start + nbytes
    return out


def decode_tensor(data: bytes) -> tuple[np.ndarray, dict]:
    records = decode_tensors(data)
    if len(records) != 1:
        raise FormatError(f"expected one tensor record, found {len(records)}")
    return records[0]


def write_tensor(path, array, class_ids: Sequence[int] = (), **extra) -> None:
    Path(path).write_bytes(encode_tensor(array, class_ids, **extra))


def read_tensor(path) -> tuple[np.ndarray, dict]:
    try:
        return decode_tensor(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# seed maps --------------------------------------------------------------

def encode_seed_png(seed: SeedMap) -> bytes:
    labels = np.asarray(seed.labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise FormatError("seed values must fit in 8 bits")
    buf = io.BytesIO()
    Image.fromarray(labels.astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_seed_png(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise FormatError(f"unreadable PNG: {exc}") from exc
    if img.mode != "L":
        raise FormatError(f"seed PNG must be single-channel 8-bit, got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8)


def sidecar_path(png_path) -> Path:
    return Path(png_path).with_suffix(".json")


def write_seed(path, seed: SeedMap, class_names: dict[int, str] | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_seed_png(seed))
    names = class_names if class_names is not None else seed.class_names
    names = {0: "background", **{int(k): v for k, v in names.items()}}
    sidecar_path(path).write_text(json.dumps({str(k): names[k] for k in sorted(names)}, indent=1) + "\n")


def read_seed(path) -> SeedMap:
    path = Path(path)
    labels = decode_seed_png(path.read_bytes())
    names = {}
    side = sidecar_path(path)
    if side.exists():
        names = {int(k): v for k, v in json.loads(side.read_text()).items()}
    return SeedMap(labels.astype(np.int64), names)


def write_image(path, raster: np.ndarray) -> None:
    """Store an H x W x 3 raster with values k/255 as an 8-bit PNG."""
    arr = np.rint(np.asarray(raster) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
