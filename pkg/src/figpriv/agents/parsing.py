"""Tolerant parsing of model output."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass

from ..geometry import BBox

log = logging.getLogger(__name__)

_FENCE = re.compile(r"```(?:[a-zA-Z0-9_-]+)?\s*\n?(.*?)```", re.DOTALL)
_PUNCT = re.compile(r"[^\w\s/&()-]+")


@dataclass(frozen=True)
class DetectionResult:
    bbox: BBox
    label: str
    raw: str


def strip_fences(raw: str) -> str:
    m = _FENCE.search(raw)
    return m.group(1).strip() if m else raw.strip()


def loads_lenient(raw: str):
    """Parse JSON out of model text; None when nothing parseable is found."""
    body = strip_fences(raw)
    try:
        return json.loads(body)
    except (json.JSONDecodeError, TypeError):
        pass
    for open_ch, close_ch in (("[", "]"), ("{", "}")):
        start, end = body.find(open_ch), body.rfind(close_ch)
        if start != -1 and end > start:
            try:
                return json.loads(body[start : end + 1])
            except json.JSONDecodeError:
                continue
    return None


def _item_text(item: dict) -> str:
    for key in ("text_content", "text", "label"):
        val = item.get(key)
        if isinstance(val, str):
            return val
    return ""


def parse_bbox_json(raw_text: str, image_size: tuple[int, int] | None = None) -> list[DetectionResult]:
    """Boxes from a model answer.

    Accepts fenced or bare JSON, an array of objects or a single object, with
    ``bbox_2d`` or ``bbox`` as ``[x1, y1, x2, y2]``. Boxes are clamped to
    ``image_size`` (width, height) when given; boxes entirely outside are dropped.
    """
    data = loads_lenient(raw_text or "")
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        return []
    out = []
    for item in data:
        if not isinstance(item, dict):
            continue
        coords = item.get("bbox_2d", item.get("bbox"))
        if not isinstance(coords, (list, tuple)) or len(coords) != 4:
            continue
        try:
            values = [float(v) for v in coords]
        except (TypeError, ValueError):
            continue
        if not all(math.isfinite(v) for v in values):
            continue
        box = BBox.of(values)
        if image_size is not None:
            box = box.clamp(*image_size)
            if box is None:
                log.warning("dropping box %s outside %s image", coords, image_size)
                continue
        elif min(box) < 0:
            box = BBox(max(box[0], 0), max(box[1], 0), max(box[2], 0), max(box[3], 0))
        out.append(DetectionResult(bbox=box, label=_item_text(item), raw=raw_text))
    return out


def normalize_label(text: str) -> str:
    """Lowercase, drop quotes and trailing punctuation, collapse whitespace."""
    cleaned = _PUNCT.sub(" ", str(text).lower())
    return " ".join(cleaned.split())


def yes_no_from_text(text: str) -> float | None:
    words = normalize_label(text).split()
    if not words:
        return None
    if words[0] == "yes":
        return 1.0
    if words[0] == "no":
        return 0.0
    return None
