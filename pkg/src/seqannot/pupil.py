"""Pupil extraction from grayscale eye crops.

Six steps: mask to the eye polygon, rescale intensity between the 2nd and
98th percentiles, binarize (inverted by default, the pupil being dark),
open, close, then keep the largest 8-connected blob. The three thresholds
are grid-searched for the largest blob whose bounding box is roughly
square; an empty grid means the crop has no usable pupil, which doubles as
an upstream-alignment failure flag.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

CDF_THRESHOLDS = (0.02, 0.05, 0.1, 0.15, 0.2)
MORPH_WINDOWS = (1, 3, 5)
ASPECT_LIMIT = 1.5
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class PupilFormatError(ValueError):
    """Raised when an image or polygon file cannot be parsed."""


class NoPupilError(ValueError):
    """No parameter combination produced an acceptable blob."""


@dataclass(frozen=True, eq=False)
class GrayImage:
    width: int
    height: int
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("image must have positive dimensions")
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if data.shape != (self.height, self.width):
            raise ValueError("data must be a height x width array")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        data.setflags(write=False)

    @classmethod
    def from_array(cls, data: np.ndarray) -> "GrayImage":
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("a grayscale image is a 2-d array")
        return cls(arr.shape[1], arr.shape[0], arr)


@dataclass(frozen=True, eq=False)
class BinaryImage:
    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.ascontiguousarray(np.asarray(self.bits, dtype=bool))
        if bits.shape != (self.height, self.width):
            raise ValueError("bits must be a height x width array")
        object.__setattr__(self, "bits", bits)
        bits.setflags(write=False)

    @classmethod
    def from_array(cls, bits: np.ndarray) -> "BinaryImage":
        arr = np.asarray(bits, dtype=bool)
        if arr.ndim != 2:
            raise ValueError("a binary image is a 2-d array")
        return cls(arr.shape[1], arr.shape[0], arr)


@dataclass(frozen=True)
class PupilResult:
    center: tuple[float, float]
    blob_area: int
    params_used: tuple[float, int, int]

    def __post_init__(self) -> None:
        if self.blob_area < 1:
            raise ValueError("a pupil blob covers at least one pixel")


def rescale_intensity(img: GrayImage) -> GrayImage:
    """Linear stretch sending the 2nd percentile to 0 and the 98th to 1."""
    p2, p98 = np.percentile(img.data, (2, 98))
    if p98 <= p2:
        return GrayImage(img.width, img.height, np.zeros_like(img.data))
    stretched = np.clip((img.data - p2) / (p98 - p2), 0.0, 1.0)
    return GrayImage(img.width, img.height, stretched)


def binarize_cdf(img: GrayImage, threshold: float, invert: bool = True) -> BinaryImage:
    """Strictly-above thresholding; invert first when hunting dark regions."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    values = 1.0 - img.data if invert else img.data
    return BinaryImage(img.width, img.height, values > threshold)


def morphology(img: BinaryImage, op: str, window: int) -> BinaryImage:
    """Square-window opening or closing with zeros beyond the border.

    Closing runs on a window-radius zero pad and is cropped back, i.e. it is
    the true full-plane closing restricted to the canvas; eroding the raw
    canvas instead would eat whatever the dilation pushed against the
    border and closing would no longer be extensive there.
    """
    if op not in ("open", "close"):
        raise ValueError(f"unknown morphology op {op!r}")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    se = np.ones((window, window), dtype=bool)
    if op == "open":
        out = ndimage.binary_dilation(
            ndimage.binary_erosion(img.bits, se, border_value=0), se, border_value=0
        )
    else:
        k = window // 2
        padded = np.pad(img.bits, k)
        closed = ndimage.binary_erosion(
            ndimage.binary_dilation(padded, se, border_value=0), se, border_value=0
        )
        out = closed[k : k + img.height, k : k + img.width]
    return BinaryImage(img.width, img.height, out)


def polygon_mask(width: int, height: int, polygon: Sequence[tuple[float, float]]) -> np.ndarray:
    """Even-odd crossing test of every pixel center against the polygon."""
    verts = [(float(x), float(y)) for x, y in polygon]
    if len(verts) < 3:
        raise ValueError("a polygon needs at least three vertices")
    xs = np.arange(width, dtype=np.float64)[None, :]
    ys = np.arange(height, dtype=np.float64)[:, None]
    inside = np.zeros((height, width), dtype=bool)
    for (x1, y1), (x2, y2) in zip(verts, verts[1:] + verts[:1]):
        if y1 == y2:
            continue
        crosses = (y1 > ys) != (y2 > ys)
        cut = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < cut)
    return inside


def _shoelace_area(polygon: Sequence[tuple[float, float]]) -> float:
    xs = np.array([p[0] for p in polygon], dtype=np.float64)
    ys = np.array([p[1] for p in polygon], dtype=np.float64)
    return float(np.abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))) / 2.0


def largest_blob(img: BinaryImage) -> tuple[np.ndarray, np.ndarray] | None:
    """Row and column indices of the biggest 8-connected component."""
    labels, count = ndimage.label(img.bits, structure=EIGHT_CONNECTED)
    if count == 0:
        return None
    sizes = np.bincount(labels.ravel())[1:]
    best = int(sizes.argmax()) + 1
    rows, cols = np.nonzero(labels == best)
    return rows, cols


def extract_pupil(
    eye: GrayImage,
    polygon: Sequence[tuple[float, float]],
    invert: bool = True,
) -> PupilResult:
    """Grid-search the binarization and morphology windows for the pupil.

    The winner is the largest acceptably-square blob over the whole grid;
    ties go to the earliest (threshold, open, close) triple. Pixels outside
    the polygon are erased before rescaling and excluded from candidacy
    (inversion would otherwise resurrect them as bright blobs).
    """
    verts = [(float(x), float(y)) for x, y in polygon]
    if len(verts) < 3:
        raise ValueError("a polygon needs at least three vertices")
    if _shoelace_area(verts) <= 0.0:
        raise ValueError("polygon must enclose a positive area")
    for x, y in verts:
        if not (0.0 <= x <= eye.width and 0.0 <= y <= eye.height):
            raise ValueError(f"polygon vertex ({x:g}, {y:g}) is outside the image")
    mask = polygon_mask(eye.width, eye.height, verts)
    masked = rescale_intensity(
        GrayImage(eye.width, eye.height, np.where(mask, eye.data, 0.0))
    )

    best: tuple[int, tuple[float, int, int], tuple[float, float]] | None = None
    for threshold in CDF_THRESHOLDS:
        candidates = binarize_cdf(masked, threshold, invert).bits & mask
        base = BinaryImage(eye.width, eye.height, candidates)
        for open_window in MORPH_WINDOWS:
            opened = morphology(base, "open", open_window)
            for close_window in MORPH_WINDOWS:
                closed = morphology(opened, "close", close_window)
                blob = largest_blob(closed)
                if blob is None:
                    continue
                rows, cols = blob
                bb_w = int(cols.max() - cols.min()) + 1
                bb_h = int(rows.max() - rows.min()) + 1
                aspect = bb_w / bb_h
                if not 1.0 / ASPECT_LIMIT <= aspect <= ASPECT_LIMIT:
                    continue
                area = int(rows.size)
                if best is None or area > best[0]:
                    center = (float(cols.mean()), float(rows.mean()))
                    best = (area, (threshold, open_window, close_window), center)
    if best is None:
        raise NoPupilError("no circle-shaped blob under any parameter combination")
    area, params_used, center = best
    return PupilResult(center=center, blob_area=area, params_used=params_used)


# --- file formats ---------------------------------------------------------------


def read_pgm(path: str | Path) -> GrayImage:
    """8-bit binary PGM (P5), intensities mapped onto [0, 1]."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise PupilFormatError("not a binary PGM (P5) file")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not re.fullmatch(rb"\d+", token):
            raise PupilFormatError(f"malformed PGM header near byte {start}")
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PupilFormatError("PGM dimensions must be positive")
    if not 0 < maxval < 256:
        raise PupilFormatError("only 8-bit PGM files are supported")
    pos += 1
    pixels = raw[pos : pos + width * height]
    if len(pixels) != width * height:
        raise PupilFormatError("PGM pixel data is truncated")
    data = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width) / maxval
    return GrayImage(width, height, data)


def write_pgm(img: GrayImage, path: str | Path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    body = np.round(img.data * 255.0).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def parse_polygon(text: str) -> list[tuple[float, float]]:
    """One "x,y" vertex per line; blank lines and #-comments are skipped."""
    verts: list[tuple[float, float]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        bare = line.strip()
        if not bare or bare.startswith("#"):
            continue
        parts = bare.split(",")
        if len(parts) != 2:
            raise PupilFormatError(f"line {lineno}: expected \"x,y\", got {bare!r}")
        try:
            verts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise PupilFormatError(f"line {lineno}: non-numeric vertex {bare!r}") from None
    if len(verts) < 3:
        raise PupilFormatError("a polygon needs at least three vertices")
    return verts
