"""Bit-exact file formats shared by every pipeline stage.

* ``.btf`` tensors: magic ``BTF1``, u32 little-endian rank, that many u32
  little-endian dims, then row-major 32-bit little-endian IEEE-754 floats.
* label maps: binary PGM (``P5``), maxval 255, one byte per pixel.
* RGB images: binary PPM (``P6``), maxval 255.
* boxes: a JSON object ``{"width", "height", "boxes": [{"class", "xmin",
  "ymin", "xmax", "ymax"}, ...]}``.

Writers emit canonical bytes so that write -> read -> write round-trips are
byte-identical; readers report malformed input with the file offset.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .core import IGNORE, BBox, BoxSet, validate_label_map

_BTF_MAGIC = b"BTF1"
_MAX_RANK = 8


class FileFormatError(ValueError):
    """Raised when a data file is malformed; the message carries the offset."""


def _atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    # Write-then-rename keeps partially written files out of the pipeline.
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_text(path: str | os.PathLike, text: str) -> None:
    """Atomically write ASCII text (reports, CSV logs, config echoes)."""
    _atomic_write_bytes(path, text.encode("ascii"))


# ---------------------------------------------------------------------------
# .btf tensors
# ---------------------------------------------------------------------------


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write an array as a .btf tensor (float32, little-endian, row-major)."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim < 1 or a.ndim > _MAX_RANK:
        raise ValueError(f"tensor rank must be in 1..{_MAX_RANK}, got {a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError("refusing to write non-finite tensor values")
    header = _BTF_MAGIC + np.asarray([a.ndim] + list(a.shape), dtype="<u4").tobytes()
    _atomic_write_bytes(path, header + a.tobytes())


def read_tensor(path: str | os.PathLike, expected_rank: int | None = None) -> np.ndarray:
    """Read a .btf tensor; returns float32 with the stored shape."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FileFormatError(f"{path}: truncated header, expected 4 magic bytes at offset 0")
    if data[:4] != _BTF_MAGIC:
        raise FileFormatError(f"{path}: bad magic {data[:4]!r} at offset 0, expected {_BTF_MAGIC!r}")
    if len(data) < 8:
        raise FileFormatError(f"{path}: truncated header, expected u32 rank at offset 4")
    rank = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    if rank < 1 or rank > _MAX_RANK:
        raise FileFormatError(f"{path}: rank {rank} at offset 4 outside 1..{_MAX_RANK}")
    dims_end = 8 + 4 * rank
    if len(data) < dims_end:
        raise FileFormatError(f"{path}: truncated header, expected {rank} u32 dims at offset 8")
    dims = np.frombuffer(data, dtype="<u4", count=rank, offset=8).astype(np.int64)
    for i, d in enumerate(dims):
        if d < 1:
            raise FileFormatError(f"{path}: dimension {i} is {d} at offset {8 + 4 * i}, must be >= 1")
    if expected_rank is not None and rank != expected_rank:
        raise FileFormatError(f"{path}: rank {rank}, expected {expected_rank}")
    count = int(np.prod(dims))
    expected = count * 4
    actual = len(data) - dims_end
    if actual != expected:
        raise FileFormatError(
            f"{path}: expected {expected} payload bytes at offset {dims_end}, found {actual}"
        )
    a = np.frombuffer(data, dtype="<f4", count=count, offset=dims_end).reshape(tuple(dims))
    if not np.all(np.isfinite(a)):
        bad = int(np.flatnonzero(~np.isfinite(a.ravel()))[0])
        raise FileFormatError(f"{path}: non-finite value at offset {dims_end + 4 * bad}")
    return a.copy()


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _parse_pnm_header(data: bytes, path, magic: bytes) -> tuple[int, int, int]:
    """Return (width, height, pixel_offset); maxval is required to be 255."""
    if data[:2] != magic:
        raise FileFormatError(f"{path}: bad magic {data[:2]!r} at offset 0, expected {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FileFormatError(f"{path}: expected integer header field at offset {start}")
        fields.append(int(token))
    if pos >= len(data):
        raise FileFormatError(f"{path}: missing whitespace after maxval at offset {pos}")
    pos += 1  # exactly one whitespace byte separates the header from pixels
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FileFormatError(f"{path}: image dimensions {w}x{h} must be >= 1")
    if maxval != 255:
        raise FileFormatError(f"{path}: maxval {maxval}, only 255 is supported")
    return w, h, pos


def write_label_map(path: str | os.PathLike, labels: np.ndarray) -> None:
    """Write an (H, W) uint8 label map as binary PGM."""
    y = np.asarray(labels)
    validate_label_map(y)
    if y.dtype != np.uint8:
        if y.min() < 0 or y.max() > 255:
            raise ValueError("label values must fit in a byte")
        y = y.astype(np.uint8)
    h, w = y.shape
    _atomic_write_bytes(path, b"P5\n%d %d\n255\n" % (w, h) + y.tobytes())


def read_label_map(path: str | os.PathLike, num_classes: int | None = None) -> np.ndarray:
    """Read a binary PGM label map; optionally validate the value range.

    With ``num_classes=L``, any value in (L, 255) is rejected: labels are
    class indices 0..L or the IGNORE marker 255.
    """
    data = Path(path).read_bytes()
    w, h, pix = _parse_pnm_header(data, path, b"P5")
    expected = w * h
    actual = len(data) - pix
    if actual != expected:
        raise FileFormatError(f"{path}: expected {expected} pixel bytes at offset {pix}, found {actual}")
    y = np.frombuffer(data, dtype=np.uint8, count=expected, offset=pix).reshape(h, w)
    if num_classes is not None:
        bad = (y > num_classes) & (y != IGNORE)
        if np.any(bad):
            i = int(np.flatnonzero(bad.ravel())[0])
            raise FileFormatError(
                f"{path}: label out of range: value {int(y.ravel()[i])} at offset {pix + i} "
                f"(num_classes={num_classes}, ignore={IGNORE})"
            )
    return y.copy()


def write_image(path: str | os.PathLike, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 image as binary PPM."""
    img = np.asarray(rgb)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"image must be uint8, got {img.dtype}")
    h, w, _ = img.shape
    _atomic_write_bytes(path, b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PPM image into an (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    w, h, pix = _parse_pnm_header(data, path, b"P6")
    expected = w * h * 3
    actual = len(data) - pix
    if actual != expected:
        raise FileFormatError(f"{path}: expected {expected} pixel bytes at offset {pix}, found {actual}")
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=pix).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# boxes JSON
# ---------------------------------------------------------------------------


def write_boxes(path: str | os.PathLike, boxes: BoxSet) -> None:
    obj = {
        "width": boxes.image_width,
        "height": boxes.image_height,
        "boxes": [
            {"class": b.class_id, "xmin": b.xmin, "ymin": b.ymin, "xmax": b.xmax, "ymax": b.ymax}
            for b in boxes.boxes
        ],
    }
    _atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("ascii"))


def read_boxes(path: str | os.PathLike) -> BoxSet:
    try:
        obj = json.loads(Path(path).read_text("ascii"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FileFormatError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise FileFormatError(f"{path}: top level must be a JSON object")
    for key in ("width", "height", "boxes"):
        if key not in obj:
            raise FileFormatError(f"{path}: missing required key '{key}'")
    if not isinstance(obj["width"], int) or not isinstance(obj["height"], int):
        raise FileFormatError(f"{path}: width/height must be integers")
    if not isinstance(obj["boxes"], list):
        raise FileFormatError(f"{path}: 'boxes' must be a list")
    parsed = []
    for i, rec in enumerate(obj["boxes"]):
        if not isinstance(rec, dict):
            raise FileFormatError(f"{path}: boxes[{i}] must be an object")
        try:
            vals = {k: rec[k] for k in ("class", "xmin", "ymin", "xmax", "ymax")}
        except KeyError as e:
            raise FileFormatError(f"{path}: boxes[{i}] missing key {e.args[0]!r}") from e
        if not all(isinstance(v, int) for v in vals.values()):
            raise FileFormatError(f"{path}: boxes[{i}] fields must be integers")
        try:
            parsed.append(BBox(vals["class"], vals["xmin"], vals["ymin"], vals["xmax"], vals["ymax"]))
        except ValueError as e:
            raise FileFormatError(f"{path}: boxes[{i}]: {e}") from e
    try:
        return BoxSet(image_width=obj["width"], image_height=obj["height"], boxes=parsed)
    except ValueError as e:
        raise FileFormatError(f"{path}: {e}") from e
