"""Box, point and mask arithmetic plus gIoU/cIoU segmentation metrics.

Boxes are closed real intervals ``[x1, y1, x2, y2]`` in pixels; overlap uses
continuous area, not rasterized pixels.
"""

from __future__ import annotations

import base64
import binascii
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


class InvalidBox(GeometryError):
    pass


class OutOfBounds(GeometryError):
    pass


class DimensionMismatch(GeometryError):
    pass


class EmptyInput(GeometryError):
    pass


class MaskFormatError(GeometryError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBox(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def __iter__(self):
        return iter(self.as_tuple())


@dataclass(frozen=True)
class CenterBox:
    cx: float
    cy: float
    w: float
    h: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(K, 4)`` box arrays."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def box_l1(a: Sequence[float], b: Sequence[float], reduction: str = "sum") -> float:
    """L1 distance over the four coordinates, summed (default) or averaged."""
    d = sum(abs(float(x) - float(y)) for x, y in zip(a, b))
    if reduction == "sum":
        return d
    if reduction == "mean":
        return d / 4.0
    raise ValueError(f"unknown reduction {reduction!r}")


def point_l1(p: Sequence[float], q: Sequence[float]) -> float:
    return abs(float(p[0]) - float(q[0])) + abs(float(p[1]) - float(q[1]))


def to_center_format(b: Sequence[float], image_w: float, image_h: float) -> CenterBox:
    """Corner pixels to normalized ``(cx, cy, w, h)``."""
    x1, y1, x2, y2 = (float(v) for v in b)
    if not (x1 < x2 and y1 < y2):
        raise InvalidBox(f"degenerate box {(x1, y1, x2, y2)}")
    if x1 < 0 or y1 < 0 or x2 > image_w or y2 > image_h:
        raise OutOfBounds(f"box {(x1, y1, x2, y2)} exceeds {image_w}x{image_h} image")
    return CenterBox(
        (x1 + x2) / (2 * image_w),
        (y1 + y2) / (2 * image_h),
        (x2 - x1) / image_w,
        (y2 - y1) / image_h,
    )


def from_center_format(c: CenterBox, image_w: float, image_h: float) -> Box:
    return Box(
        (c.cx - c.w / 2) * image_w,
        (c.cy - c.h / 2) * image_h,
        (c.cx + c.w / 2) * image_w,
        (c.cy + c.h / 2) * image_h,
    )


def valid_center_boxes(boxes: Iterable[Sequence[float]], image_w: float, image_h: float):
    """Convert boxes, silently dropping degenerate or out-of-image ones."""
    out = []
    for b in boxes:
        try:
            out.append(to_center_format(b, image_w, image_h))
        except GeometryError:
            continue
    return out


# --- masks ------------------------------------------------------------------


class BinaryMask:
    """Row-major boolean grid of shape ``(height, width)``."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2:
            raise MaskFormatError("mask bits must be two-dimensional")
        self.bits = bits

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_flat(cls, width: int, height: int, flat) -> "BinaryMask":
        flat = np.asarray(flat, dtype=bool).ravel()
        if flat.size != width * height:
            raise MaskFormatError(f"expected {width * height} bits, got {flat.size}")
        return cls(flat.reshape(height, width))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, {self.count()} set)"


def _check_dims(masks: Sequence[BinaryMask]):
    shapes = {m.shape for m in masks}
    if len(shapes) > 1:
        raise DimensionMismatch(f"mask shapes differ: {sorted(shapes)}")


def mask_or(masks: Sequence[BinaryMask]) -> BinaryMask:
    masks = list(masks)
    if not masks:
        raise EmptyInput("mask_or needs at least one mask")
    _check_dims(masks)
    return BinaryMask(np.logical_or.reduce([m.bits for m in masks]))


def mask_intersection_union(a: BinaryMask, b: BinaryMask) -> tuple[int, int]:
    _check_dims([a, b])
    return int(np.logical_and(a.bits, b.bits).sum()), int(np.logical_or(a.bits, b.bits).sum())


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    inter, union = mask_intersection_union(a, b)
    if union == 0:
        return 1.0
    return inter / union


def seg_metrics(per_image: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """``(gIoU, cIoU)`` from per-image ``(intersection, union)`` pixel counts.

    An image whose union is zero counts as IoU 1 for gIoU and adds nothing to
    cIoU.
    """
    if len(per_image) == 0:
        raise EmptyInput("seg_metrics needs at least one image")
    ious, total_i, total_u = [], 0.0, 0.0
    for inter, union in per_image:
        ious.append(1.0 if union == 0 else inter / union)
        total_i += inter
        total_u += union
    giou = float(np.mean(ious))
    ciou = total_i / total_u if total_u > 0 else 1.0
    return giou, ciou


# --- mask serialization ------------------------------------------------------
# Layout: uint32 little-endian width, uint32 little-endian height, then the
# row-major bits packed MSB-first, zero padded to a whole byte.

_HEADER = struct.Struct("<II")


def encode_mask(mask: BinaryMask) -> bytes:
    return _HEADER.pack(mask.width, mask.height) + np.packbits(mask.bits.ravel()).tobytes()


def decode_mask(data: bytes | str) -> BinaryMask:
    """Decode raw bytes or a Base64 string of the same layout."""
    if isinstance(data, str):
        try:
            data = base64.b64decode(data.encode("ascii"), validate=True)
        except (binascii.Error, UnicodeEncodeError) as exc:
            raise MaskFormatError(f"invalid Base64 mask payload: {exc}") from None
    if len(data) < _HEADER.size:
        raise MaskFormatError("mask payload shorter than its header")
    width, height = _HEADER.unpack_from(data)
    n = width * height
    body = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    if body.size != (n + 7) // 8:
        raise MaskFormatError(f"{width}x{height} mask needs {(n + 7) // 8} bytes, got {body.size}")
    bits = np.unpackbits(body)[:n]
    return BinaryMask.from_flat(width, height, bits)


def mask_to_base64(mask: BinaryMask) -> str:
    return base64.b64encode(encode_mask(mask)).decode("ascii")


def write_mask(path, mask: BinaryMask) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_mask(mask))


def read_mask(path) -> BinaryMask:
    with open(path, "rb") as fh:
        return decode_mask(fh.read())


def rasterize_box(box: Sequence[float], width: int, height: int, scale: float = 1.0) -> BinaryMask:
    """Mask of grid cells whose centers fall inside ``box`` (given in pixels).

    ``scale`` maps pixels to grid cells, e.g. ``0.125`` for an 8x reduced grid.
    """
    x1, y1, x2, y2 = (float(v) * scale for v in box)
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    inside_x = (xs >= x1) & (xs <= x2)
    inside_y = (ys >= y1) & (ys <= y2)
    return BinaryMask(inside_y[:, None] & inside_x[None, :])


def rasterize_ellipse(box: Sequence[float], width: int, height: int, scale: float = 1.0) -> BinaryMask:
    """Ellipse inscribed in ``box``, sampled at grid-cell centers."""
    x1, y1, x2, y2 = (float(v) * scale for v in box)
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    rx, ry = max((x2 - x1) / 2, 1e-9), max((y2 - y1) / 2, 1e-9)
    xs = (np.arange(width) + 0.5 - cx) / rx
    ys = (np.arange(height) + 0.5 - cy) / ry
    return BinaryMask(ys[:, None] ** 2 + xs[None, :] ** 2 <= 1.0)
