"""Images, point-and-radius annotations, rasterisation and nested sparsification.

Images are stored as single-channel portable graymaps (P2 or P5, maxval 255)
and annotations as CSV files with the header ``cx,cy,radius,class_id``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    EmptyAnnotations,
    FormatError,
    InvalidPlan,
    OutOfBounds,
    RangeError,
    ShapeError,
)

FOREGROUND = 1
BACKGROUND_ASSUMED = 0

CSV_HEADER = ("cx", "cy", "radius", "class_id")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray

    def __post_init__(self):
        px = _frozen(self.pixels, np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ShapeError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise RangeError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class Annotation:
    cx: float
    cy: float
    radius: float
    class_id: int = 1

    def __post_init__(self):
        for name in ("cx", "cy", "radius"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise RangeError(f"{name} must be finite")
            object.__setattr__(self, name, v)
        if self.radius <= 0:
            raise RangeError(f"radius must be positive, got {self.radius}")
        if int(self.class_id) != self.class_id or self.class_id < 1:
            raise RangeError(f"class_id must be an integer >= 1, got {self.class_id}")
        object.__setattr__(self, "class_id", int(self.class_id))

    def inside(self, height: int, width: int) -> bool:
        return 0 <= self.cx < width and 0 <= self.cy < height


@dataclass(frozen=True)
class AnnotationSet:
    annotations: tuple[Annotation, ...] = ()
    image_id: str = ""

    def __post_init__(self):
        annos = tuple(self.annotations)
        seen = set()
        for a in annos:
            key = (a.cx, a.cy, a.class_id)
            if key in seen:
                raise FormatError(f"duplicate annotation at {key}")
            seen.add(key)
        object.__setattr__(self, "annotations", annos)

    def __len__(self):
        return len(self.annotations)

    def __iter__(self):
        return iter(self.annotations)

    def of_class(self, class_id: int) -> "AnnotationSet":
        return AnnotationSet(
            tuple(a for a in self.annotations if a.class_id == class_id), self.image_id
        )


@dataclass(frozen=True, eq=False)
class DenseLabelField:
    """Per-pixel binary label plus annotation membership.

    ``membership`` is FOREGROUND where the label is trusted and
    BACKGROUND_ASSUMED where the pixel is unannotated and tentatively
    negative.
    """

    labels: np.ndarray
    membership: np.ndarray

    def __post_init__(self):
        labels = _frozen(self.labels, np.uint8)
        membership = _frozen(self.membership, np.uint8)
        if labels.shape != membership.shape or labels.ndim != 2:
            raise ShapeError("labels and membership must be 2-D arrays of the same shape")
        if labels.max(initial=0) > 1 or membership.max(initial=0) > 1:
            raise RangeError("labels and membership must be 0/1 valued")
        if np.any((labels == 1) & (membership != FOREGROUND)):
            raise RangeError("positive label outside the FOREGROUND set")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "membership", membership)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def foreground(self) -> np.ndarray:
        return self.membership == FOREGROUND

    @property
    def background(self) -> np.ndarray:
        return self.membership == BACKGROUND_ASSUMED

    def __eq__(self, other):
        if not isinstance(other, DenseLabelField):
            return NotImplemented
        return np.array_equal(self.labels, other.labels) and np.array_equal(
            self.membership, other.membership
        )


@dataclass(frozen=True)
class SparsificationPlan:
    fractions: tuple[float, ...]
    seed: int
    permutation: tuple[int, ...] = field(default=())

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if not fr:
            raise InvalidPlan("at least one fraction is required")
        for f in fr:
            if not (0.0 < f <= 1.0):
                raise InvalidPlan(f"fraction {f} outside (0, 1]")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise InvalidPlan(f"fractions must be strictly increasing: {fr}")
        object.__setattr__(self, "fractions", fr)
        object.__setattr__(self, "permutation", tuple(int(i) for i in self.permutation))


def make_plan(n_annotations: int, fractions: Sequence[float], seed: int) -> SparsificationPlan:
    """Draw a single seeded permutation that is reused for every fraction."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_annotations)
    return SparsificationPlan(tuple(fractions), seed, tuple(int(i) for i in perm))


def variant_size(fraction: float, n: int) -> int:
    # round() first so that 0.3 * 10 = 3.0000000000000004 does not ceil to 4
    return max(1, math.ceil(round(fraction * n, 9)))


def sparsify(full: AnnotationSet, plan: SparsificationPlan) -> list[AnnotationSet]:
    """Nested subsets of ``full``, one per fraction of ``plan``.

    The variant for fraction f keeps the first ceil(f*N) annotations under the
    plan's permutation, so every smaller variant is contained in every larger
    one. Kept annotations retain their original order.
    """
    n = len(full)
    if n == 0:
        raise EmptyAnnotations(f"image {full.image_id!r} has no annotations to sparsify")
    if sorted(plan.permutation) != list(range(n)):
        raise InvalidPlan(f"permutation is not a bijection over {n} annotations")
    # re-validate in case the plan was built around the checks
    SparsificationPlan(plan.fractions, plan.seed, plan.permutation)

    variants = []
    for f in plan.fractions:
        keep = sorted(plan.permutation[: variant_size(f, n)])
        variants.append(AnnotationSet(tuple(full.annotations[i] for i in keep), full.image_id))
    return variants


def disk_mask(annos: AnnotationSet, height: int, width: int, class_id: int | None = 1) -> np.ndarray:
    """Boolean mask of pixels within ``radius`` of a centroid of ``class_id``.

    Pixel (row, col) has its centre at x=col, y=row. ``class_id=None`` uses
    every annotation.
    """
    mask = np.zeros((height, width), dtype=bool)
    for a in annos:
        if not a.inside(height, width):
            raise OutOfBounds(f"annotation ({a.cx}, {a.cy}) outside {width}x{height} image")
        if class_id is not None and a.class_id != class_id:
            continue
        r0 = max(0, math.floor(a.cy - a.radius))
        r1 = min(height, math.ceil(a.cy + a.radius) + 1)
        c0 = max(0, math.floor(a.cx - a.radius))
        c1 = min(width, math.ceil(a.cx + a.radius) + 1)
        rr, cc = np.mgrid[r0:r1, c0:c1]
        inside = (cc - a.cx) ** 2 + (rr - a.cy) ** 2 <= a.radius**2
        mask[r0:r1, c0:c1] |= inside
    return mask


def rasterize(annos: AnnotationSet, height: int, width: int, class_id: int = 1) -> DenseLabelField:
    mask = disk_mask(annos, height, width, class_id)
    labels = mask.astype(np.uint8)
    return DenseLabelField(labels, labels.copy())


def exhaustive_labels(annos: AnnotationSet, height: int, width: int, class_id: int = 1) -> DenseLabelField:
    """Label field for fully annotated data: every pixel is trusted."""
    labels = disk_mask(annos, height, width, class_id).astype(np.uint8)
    return DenseLabelField(labels, np.full(labels.shape, FOREGROUND, dtype=np.uint8))


# ---------------------------------------------------------------- graymap I/O


def _read_header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i : i + 1].isspace():
            i += 1
        if i < n and buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        if i >= n:
            raise FormatError("truncated graymap header")
        start = i
        while i < n and not buf[i : i + 1].isspace() and buf[i : i + 1] != b"#":
            i += 1
        tokens.append(buf[start:i])
    return tokens, i


def _decode_graymap(buf: bytes) -> np.ndarray:
    tokens, pos = _read_header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"unsupported graymap magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"malformed graymap header: {tokens}") from exc
    if width <= 0 or height <= 0 or not (0 < maxval <= 255):
        raise FormatError(f"invalid graymap dimensions or maxval: {width}x{height}, {maxval}")

    if magic == b"P5":
        data = buf[pos + 1 : pos + 1 + width * height]
        if len(data) != width * height:
            raise FormatError("graymap pixel data is truncated")
        raw = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    else:
        body = buf[pos:].split()
        if len(body) != width * height:
            raise FormatError(f"expected {width * height} pixel values, found {len(body)}")
        try:
            raw = np.array([int(t) for t in body], dtype=np.int64)
        except ValueError as exc:
            raise FormatError("non-integer pixel value") from exc
    if raw.min() < 0 or raw.max() > maxval:
        raise RangeError(f"pixel value outside [0, {maxval}]")
    return raw.reshape(height, width), maxval


def load_image(path) -> Image:
    raw, maxval = _decode_graymap(Path(path).read_bytes())
    return Image(raw / maxval)


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(pixels, dtype=np.float64) * 255.0).astype(np.uint8)


def _write_graymap(path, q: np.ndarray, binary: bool) -> None:
    h, w = q.shape
    header = f"{'P5' if binary else 'P2'}\n{w} {h}\n255\n".encode("ascii")
    if binary:
        body = q.astype(np.uint8).tobytes()
    else:
        body = "\n".join(" ".join(str(int(v)) for v in row) for row in q).encode("ascii") + b"\n"
    Path(path).write_bytes(header + body)


def save_image(path, image: Image, binary: bool = True) -> None:
    _write_graymap(path, quantize(image.pixels), binary)


def save_mask(path, mask: np.ndarray, binary: bool = True) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError("mask must be 2-D")
    _write_graymap(path, np.where(m != 0, 255, 0).astype(np.uint8), binary)


def load_mask(path) -> np.ndarray:
    raw, _ = _decode_graymap(Path(path).read_bytes())
    return raw > 0


# ---------------------------------------------------------------- annotation CSV


def load_annotations(path, image_id: str | None = None) -> AnnotationSet:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        annos = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                cx, cy, radius = (float(v) for v in row[:3])
                class_id = int(row[3])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            annos.append(Annotation(cx, cy, radius, class_id))
    return AnnotationSet(tuple(annos), path.stem if image_id is None else image_id)


def save_annotations(path, annos: AnnotationSet) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for a in annos:
            writer.writerow([repr(a.cx), repr(a.cy), repr(a.radius), a.class_id])
