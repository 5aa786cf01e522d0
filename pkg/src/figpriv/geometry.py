"""Coordinate math for crops, rotations, polygons and binary masks.

Conventions used throughout:

* Images are ``uint8`` arrays of shape ``(h, w, 3)``; masks are ``bool``
  arrays of shape ``(h, w)``.
* A point is ``(x, y)`` with x to the right and y downward. Pixel
  ``(row i, col j)`` has its center at ``(j, i)``, so an image spans
  ``[-0.5, w - 0.5] x [-0.5, h - 0.5]`` in continuous coordinates.
* Bounding boxes are inclusive pixel boxes ``(x_top, y_top, x_bottom, y_bottom)``.
* A positive rotation angle turns the picture counter-clockwise as seen on
  screen (``np.rot90`` direction).
* A pixel belongs to a polygon when its center lies inside or on the
  polygon boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

WHITE = 255
_EPS = 1e-9


class GeometryError(ValueError):
    pass


class BBox(NamedTuple):
    x_top: int
    y_top: int
    x_bottom: int
    y_bottom: int

    @classmethod
    def of(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise GeometryError(f"bbox needs 4 values, got {len(values)}")
        x0, y0, x1, y1 = (int(round(float(v))) for v in values)
        if x0 > x1:
            x0, x1 = x1, x0
        if y0 > y1:
            y0, y1 = y1, y0
        return cls(x0, y0, x1, y1)

    @property
    def width(self) -> int:
        return self.x_bottom - self.x_top + 1

    @property
    def height(self) -> int:
        return self.y_bottom - self.y_top + 1

    def validate(self) -> "BBox":
        if self.x_top > self.x_bottom or self.y_top > self.y_bottom:
            raise GeometryError(f"inverted bbox {tuple(self)}")
        if min(self) < 0:
            raise GeometryError(f"negative bbox coordinate {tuple(self)}")
        return self

    def clamp(self, width: int, height: int) -> "BBox | None":
        """Intersection with a ``width x height`` image, or None if empty."""
        x0, y0 = max(self.x_top, 0), max(self.y_top, 0)
        x1, y1 = min(self.x_bottom, width - 1), min(self.y_bottom, height - 1)
        if x0 > x1 or y0 > y1:
            return None
        return BBox(x0, y0, x1, y1)


def as_polygon(points) -> np.ndarray:
    """Validate and convert a vertex list to a float ``(n, 2)`` array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"polygon must be a list of (x, y) pairs, got shape {arr.shape}")
    if len(arr) < 3:
        raise GeometryError(f"polygon needs at least 3 vertices, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("polygon has non-finite coordinates")
    return arr


def is_degenerate(poly: np.ndarray) -> bool:
    """True when the polygon encloses zero area."""
    x, y = poly[:, 0], poly[:, 1]
    area2 = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    return abs(area2) < _EPS


def image_size(image: np.ndarray) -> tuple[int, int]:
    return image.shape[1], image.shape[0]


def crop(image: np.ndarray, bbox: BBox) -> tuple[np.ndarray, BBox]:
    """Cut the part of ``bbox`` that lies inside the image.

    Returns the sub-image and the clamped box actually used, whose top-left
    corner is the crop origin in the source image.
    """
    h, w = image.shape[:2]
    used = BBox(*bbox).clamp(w, h)
    if used is None:
        raise GeometryError(f"bbox {tuple(bbox)} does not intersect a {w}x{h} image")
    sub = image[used.y_top : used.y_bottom + 1, used.x_top : used.x_bottom + 1].copy()
    return sub, used


def whiteout_outside_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if mask.shape != image.shape[:2]:
        raise GeometryError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[~mask] = WHITE
    return out


def _cos_sin(theta: float) -> tuple[float, float]:
    q, r = divmod(float(theta), 90.0)
    if r == 0.0:
        # exact values for right angles
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[int(q) % 4]
    rad = math.radians(theta)
    return math.cos(rad), math.sin(rad)


def _rotate_points(points: np.ndarray, theta: float, c_from, c_to) -> np.ndarray:
    cos_t, sin_t = _cos_sin(theta)
    dx = points[..., 0] - c_from[0]
    dy = points[..., 1] - c_from[1]
    # counter-clockwise on screen with y pointing down
    x = cos_t * dx + sin_t * dy + c_to[0]
    y = -sin_t * dx + cos_t * dy + c_to[1]
    return np.stack([x, y], axis=-1)


@dataclass(frozen=True)
class RotationSpec:
    """Everything needed to move points between a crop and its rotated canvas."""

    theta: float
    c_original: tuple[float, float]
    c_rotated: tuple[float, float]
    canvas_size_rotated: tuple[int, int]
    size_original: tuple[int, int]

    def forward(self, points) -> np.ndarray:
        return _rotate_points(np.asarray(points, dtype=float), self.theta, self.c_original, self.c_rotated)

    def inverse(self, points) -> np.ndarray:
        return _rotate_points(np.asarray(points, dtype=float), -self.theta, self.c_rotated, self.c_original)

    def to_json(self) -> dict:
        return {
            "theta": self.theta,
            "c_original": list(self.c_original),
            "c_rotated": list(self.c_rotated),
            "canvas_size_rotated": list(self.canvas_size_rotated),
            "size_original": list(self.size_original),
        }


def rotation_spec(width: int, height: int, theta: float) -> RotationSpec:
    cos_t, sin_t = _cos_sin(theta)
    new_w = math.ceil(abs(width * cos_t) + abs(height * sin_t) - _EPS)
    new_h = math.ceil(abs(width * sin_t) + abs(height * cos_t) - _EPS)
    return RotationSpec(
        theta=float(theta),
        c_original=((width - 1) / 2.0, (height - 1) / 2.0),
        c_rotated=((new_w - 1) / 2.0, (new_h - 1) / 2.0),
        canvas_size_rotated=(new_w, new_h),
        size_original=(width, height),
    )


def rotate_array(arr: np.ndarray, theta: float, fill=WHITE) -> tuple[np.ndarray, RotationSpec]:
    """Rotate about the center onto an expanded canvas (nearest neighbour)."""
    h, w = arr.shape[:2]
    spec = rotation_spec(w, h, theta)
    if spec.theta % 360.0 == 0.0:
        return arr.copy(), spec
    new_w, new_h = spec.canvas_size_rotated
    ys, xs = np.mgrid[0:new_h, 0:new_w]
    src = spec.inverse(np.stack([xs, ys], axis=-1).astype(float))
    sx = np.floor(src[..., 0] + 0.5).astype(np.int64)
    sy = np.floor(src[..., 1] + 0.5).astype(np.int64)
    inside = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.empty((new_h, new_w) + arr.shape[2:], dtype=arr.dtype)
    out[...] = fill
    out[inside] = arr[sy[inside], sx[inside]]
    return out, spec


def rotate_with_spec(image: np.ndarray, theta: float) -> tuple[np.ndarray, RotationSpec]:
    if not math.isfinite(theta):
        raise GeometryError("rotation angle must be finite")
    return rotate_array(image, theta, fill=WHITE)


def bbox_to_polygon(bbox: BBox) -> np.ndarray:
    """Rectangle ring TL, TR, BR, BL (vertices on the corner pixel centers)."""
    x0, y0, x1, y1 = bbox
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def bbox_corners_listed(bbox: BBox) -> list[list[int]]:
    """Corners in the order ``(x_top,y_top),(x_top,y_bottom),(x_bottom,y_top),(x_bottom,y_bottom)``.

    Kept as manifest metadata only; this order is not a simple ring.
    """
    x0, y0, x1, y1 = (int(v) for v in bbox)
    return [[x0, y0], [x0, y1], [x1, y0], [x1, y1]]


def clamp_polygon(poly: np.ndarray, width: int, height: int) -> np.ndarray:
    out = np.array(poly, dtype=float)
    out[:, 0] = np.clip(out[:, 0], 0.0, width - 1)
    out[:, 1] = np.clip(out[:, 1], 0.0, height - 1)
    return out


def inverse_rotate_polygon(poly, spec: RotationSpec | Sequence[RotationSpec], clamp: bool = True) -> np.ndarray:
    """Map a polygon from a rotated canvas back to the source crop.

    ``spec`` may be a chain (first rotation first); inverses are applied in
    reverse order and the result is clamped to the source crop.
    """
    chain = [spec] if isinstance(spec, RotationSpec) else list(spec)
    pts = np.asarray(poly, dtype=float)
    for s in reversed(chain):
        pts = s.inverse(pts)
    if clamp and chain:
        w, h = chain[0].size_original
        pts = clamp_polygon(pts, w, h)
    return pts


def realign_to_original(poly, object_origin=(0.0, 0.0)) -> np.ndarray:
    ox, oy = object_origin
    return np.asarray(poly, dtype=float) + np.array([ox, oy], dtype=float)


def polygon_orientation_angle(poly) -> float:
    """Angle of the dominant principal axis against the horizontal.

    Measured counter-clockwise on screen, in degrees, folded into (-90, 90].
    Isotropic vertex sets report 0.
    """
    pts = np.asarray(poly, dtype=float)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    if np.allclose(cov, 0.0, atol=1e-18):
        raise GeometryError("degenerate polygon: all vertices identical")
    sxx, syy, sxy = cov[0, 0], cov[1, 1], cov[0, 1]
    scale = max(sxx, syy)
    if abs(sxx - syy) <= 1e-12 * scale and abs(sxy) <= 1e-12 * scale:
        return 0.0
    # major-axis angle in y-down coordinates, then flipped to screen CCW
    angle = -0.5 * math.degrees(math.atan2(2.0 * sxy, sxx - syy))
    if angle <= -90.0:
        angle += 180.0
    elif angle > 90.0:
        angle -= 180.0
    if abs(angle + 90.0) < 1e-12:
        angle = 90.0
    return angle


def _fill_polygon(mask: np.ndarray, poly: np.ndarray) -> None:
    h, w = mask.shape
    xs, ys = poly[:, 0], poly[:, 1]
    x_next, y_next = np.roll(xs, -1), np.roll(ys, -1)
    row_lo = max(0, math.ceil(ys.min() - _EPS))
    row_hi = min(h - 1, math.floor(ys.max() + _EPS))
    for row in range(row_lo, row_hi + 1):
        y = float(row)
        # even-odd crossings with half-open edges [ymin, ymax)
        lo = np.minimum(ys, y_next)
        hi = np.maximum(ys, y_next)
        hit = (lo <= y) & (y < hi)
        if hit.any():
            x0, y0, x1, y1 = xs[hit], ys[hit], x_next[hit], y_next[hit]
            cross = np.sort(x0 + (y - y0) * (x1 - x0) / (y1 - y0))
            for a, b in zip(cross[0::2], cross[1::2]):
                c0 = max(0, math.ceil(a - _EPS))
                c1 = min(w - 1, math.floor(b + _EPS))
                if c0 <= c1:
                    mask[row, c0 : c1 + 1] = True
        # boundary pixels not reached by the spans (bottom edges, apexes)
        on = (lo <= y + _EPS) & (y - _EPS <= hi)
        for i in np.nonzero(on)[0]:
            ax, ay, bx, by = xs[i], ys[i], x_next[i], y_next[i]
            if abs(by - ay) < _EPS:
                c0 = max(0, math.ceil(min(ax, bx) - _EPS))
                c1 = min(w - 1, math.floor(max(ax, bx) + _EPS))
                if c0 <= c1:
                    mask[row, c0 : c1 + 1] = True
            else:
                x = ax + (y - ay) * (bx - ax) / (by - ay)
                col = round(x)
                if abs(x - col) < 1e-7 and 0 <= col < w:
                    mask[row, col] = True


def rasterize(polygons: Iterable, width: int, height: int) -> np.ndarray:
    """Union of the given polygons as a ``(height, width)`` boolean mask."""
    mask = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        arr = np.asarray(poly, dtype=float)
        if arr.ndim != 2 or len(arr) == 0:
            continue
        _fill_polygon(mask, arr)
    return mask


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paint masked pixels solid black."""
    if mask.shape != image.shape[:2]:
        raise GeometryError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[mask] = 0
    return out


def place_mask(mask: np.ndarray, origin: tuple[int, int], width: int, height: int) -> np.ndarray:
    """Paste a crop-frame mask into a full ``width x height`` frame at ``origin``."""
    full = np.zeros((height, width), dtype=bool)
    ox, oy = int(origin[0]), int(origin[1])
    mh, mw = mask.shape
    x1, y1 = min(width, ox + mw), min(height, oy + mh)
    if x1 > ox and y1 > oy and ox >= 0 and oy >= 0:
        full[oy:y1, ox:x1] = mask[: y1 - oy, : x1 - ox]
    return full


def polygon_bounds(poly: np.ndarray) -> tuple[float, float, float, float]:
    return float(poly[:, 0].min()), float(poly[:, 1].min()), float(poly[:, 0].max()), float(poly[:, 1].max())
