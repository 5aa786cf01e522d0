"""Synthetic image corpus with matching mock-agent answers.

Mock answers are keyed by image content hash, so the builder replays the
same crop, whiteout and rotation steps as the pipeline to learn which
images each agent will actually see.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import geometry as geo
from .agents import encode_mask, image_key
from .pipeline import DEFAULT_ANGLES, save_image, skew_angle
from .agents.roles import TextDetection

WHITE = (255, 255, 255)
YES = {"text": "yes", "logprobs": {"yes": -0.05, "no": -3.0}}
NO = {"text": "no", "logprobs": {"yes": -4.0, "no": -0.02}}


def default_fixture_dir() -> Path:
    return Path(str(resources.files("figpriv") / "data" / "fixtures"))


@dataclass
class Text:
    text: str
    box: tuple[int, int, int, int]  # inclusive, in the frame the reader sees
    label: str
    reader: str = "ocr"  # "ocr", "vlm" or "both"


@dataclass
class Mocks:
    tables: dict[str, dict] = field(default_factory=lambda: {})

    def put(self, role: str, key: str, response: dict) -> None:
        self.tables.setdefault(role, {})[key] = response


def _canvas(w: int, h: int, color=WHITE) -> Image.Image:
    return Image.new("RGB", (w, h), color)


def _draw_texts(img: Image.Image, texts, offset=(0, 0)) -> None:
    draw = ImageDraw.Draw(img)
    ox, oy = offset
    for t in texts:
        x0, y0, x1, y1 = t.box
        draw.rectangle((x0 + ox, y0 + oy, x1 + ox, y1 + oy), outline=(150, 150, 150))
        draw.text((x0 + ox + 2, y0 + oy + 1), t.text, fill=(0, 0, 0))


def _ocr_item(text: str, poly) -> dict:
    return {"text": text, "polygon": [[round(float(x), 6), round(float(y), 6)] for x, y in poly]}


def _vlm_text(items) -> dict:
    return {"text": json.dumps([{"bbox_2d": list(b), "text_content": t} for t, b in items])}


def _judge(mocks: Mocks, isolated: np.ndarray, winner: float) -> None:
    for theta in DEFAULT_ANGLES:
        rotated, _ = geo.rotate_with_spec(isolated, theta)
        mocks.put("orientation", image_key(rotated), YES if theta == winner else NO)


def _axis_aligned_readers(mocks, aligned, texts) -> None:
    """OCR and VLM answers for an aligned image whose texts have zero skew."""
    ocr = [_ocr_item(t.text, geo.bbox_to_polygon(geo.BBox(*t.box))) for t in texts if t.reader in ("ocr", "both")]
    vlm = [(t.text, t.box) for t in texts if t.reader in ("vlm", "both")]
    mocks.put("ocr", image_key(aligned), {"detections": ocr})
    mocks.put("vlm_text", image_key(aligned), _vlm_text(vlm))


def _labels(mocks, texts) -> None:
    for t in texts:
        mocks.put("classify", " ".join(t.text.lower().split()), {"text": t.label})


def credit_card(mocks: Mocks):
    """Card occupies half the image; number and name cover 28 percent."""
    origin = (20, 10)
    bbox = (20, 10, 144, 89)
    texts = [
        Text("4111 1111 1111 1111", (5, 18, 112, 42), "credit card number", "both"),
        Text("JANE Q DOE", (5, 46, 104, 74), "name"),
        Text("VISA", (88, 2, 121, 15), "other", "vlm"),
        Text("DEBIT", (5, 2, 40, 15), "other", "vlm"),
    ]
    img = _canvas(200, 100)
    ImageDraw.Draw(img).rectangle(bbox, fill=(200, 220, 255))
    _draw_texts(img, texts, origin)
    arr = np.asarray(img).copy()
    mocks.put("detect", image_key(arr), {"text": json.dumps([{"bbox_2d": list(bbox), "label": "credit card"}])})
    crop, _ = geo.crop(arr, geo.BBox(*bbox))
    mocks.put("segment", image_key(crop), {"mask": encode_mask(np.ones(crop.shape[:2], bool))})
    _judge(mocks, crop, 0.0)
    _axis_aligned_readers(mocks, crop, texts)
    _labels(mocks, texts)
    return arr, {
        "category": "credit or debit card",
        "containment": True,
        "compare": True,
        "high_risk_texts": ["4111 1111 1111 1111", "JANE Q DOE"],
        "theta_star": 0.0,
    }


def pregnancy_test_box(mocks: Mocks):
    """Sideways box (needs a 90 degree turn); its category has no PII types."""
    texts = [
        Text("PREGNANCY TEST", (5, 10, 99, 24), "other"),
        Text("1 TEST", (10, 35, 49, 49), "other", "vlm"),
    ]
    upright = _canvas(100, 60, (255, 205, 225))
    _draw_texts(upright, texts)
    sideways, _ = geo.rotate_with_spec(np.asarray(upright), -90.0)
    img = np.full((100, 200, 3), 255, np.uint8)
    img[0:100, 100:160] = sideways
    bbox = (100, 0, 159, 99)
    mocks.put("detect", image_key(img), {"text": json.dumps([{"bbox_2d": list(bbox), "label": "box"}])})
    crop, _ = geo.crop(img, geo.BBox(*bbox))
    mocks.put("segment", image_key(crop), {"mask": encode_mask(np.ones(crop.shape[:2], bool))})
    _judge(mocks, crop, 90.0)
    aligned, _ = geo.rotate_with_spec(crop, 90.0)
    _axis_aligned_readers(mocks, aligned, texts)
    _labels(mocks, texts)
    return img, {
        "category": "pregnancy test box",
        "containment": True,
        "compare": True,
        "high_risk_texts": [],
        "theta_star": 90.0,
    }


def letter(mocks: Mocks):
    """Letter page turned 190 degrees: coarse search finds 180, skew is 10."""
    texts = [
        Text("JOHN SMITH", (10, 10, 79, 21), "name", "both"),
        Text("12 OAK ST SPRINGFIELD", (2, 26, 119, 37), "address", "both"),
        Text("Dear John,", (10, 50, 69, 61), "other", "vlm"),
    ]
    page = _canvas(120, 90, (255, 250, 220))
    _draw_texts(page, texts)
    turned, spec_page = geo.rotate_with_spec(np.asarray(page), 190.0)
    th, tw = turned.shape[:2]
    ox, oy = 50, 40
    img = np.full((200, 240, 3), 255, np.uint8)
    img[oy:oy + th, ox:ox + tw] = turned
    bbox = (ox, oy, ox + tw - 1, oy + th - 1)
    mocks.put("detect", image_key(img), {"text": json.dumps([{"bbox_2d": list(bbox), "label": "letter"}])})
    crop, _ = geo.crop(img, geo.BBox(*bbox))
    page_ring = spec_page.forward(geo.bbox_to_polygon(geo.BBox(0, 0, 119, 89)))
    mocks.put("segment", image_key(crop), {"polygons": [page_ring.tolist()]})
    seg = geo.rasterize([page_ring], tw, th)
    isolated = geo.whiteout_outside_mask(crop, seg)
    _judge(mocks, isolated, 180.0)
    aligned, spec_180 = geo.rotate_with_spec(isolated, 180.0)

    def in_aligned(t):
        return spec_180.forward(spec_page.forward(geo.bbox_to_polygon(geo.BBox(*t.box))))

    items = [_ocr_item(t.text, in_aligned(t)) for t in texts if t.reader in ("ocr", "both")]
    mocks.put("ocr", image_key(aligned), {"detections": items})
    # skew from the stored (rounded) polygons, exactly as the pipeline sees them
    phi = skew_angle([TextDetection(i["text"], np.array(i["polygon"]), "ocr") for i in items])
    corrected, spec_phi = geo.rotate_with_spec(aligned, -phi)
    cw, ch = spec_phi.canvas_size_rotated
    vlm = []
    for t in texts:
        if t.reader not in ("vlm", "both"):
            continue
        x0, y0, x1, y1 = geo.polygon_bounds(spec_phi.forward(in_aligned(t)))
        box = geo.BBox(math.floor(x0), math.floor(y0), math.ceil(x1), math.ceil(y1)).clamp(cw, ch)
        vlm.append((t.text, tuple(box)))
    mocks.put("vlm_text", image_key(corrected), _vlm_text(vlm))
    _labels(mocks, texts)
    return img, {
        "category": "letter with address",
        "containment": False,
        "compare": False,
        "high_risk_texts": ["JOHN SMITH", "12 OAK ST SPRINGFIELD"],
        "theta_star": 180.0,
        "phi": 10.0,
    }


def business_card(mocks: Mocks):
    """No detection: the whole image is processed. Employer and position stay visible."""
    texts = [
        Text("ALEX RIVERA", (20, 15, 109, 29), "name"),
        Text("SENIOR ENGINEER", (20, 35, 129, 46), "position"),
        Text("ACME ROBOTICS", (20, 55, 119, 66), "employer name", "vlm"),
        Text("555-0142", (20, 75, 89, 86), "phone number", "vlm"),
    ]
    img = _canvas(200, 100, (235, 235, 235))
    _draw_texts(img, texts)
    arr = np.asarray(img).copy()
    _judge(mocks, arr, 0.0)
    _axis_aligned_readers(mocks, arr, texts)
    _labels(mocks, texts)
    return arr, {
        "category": "business card",
        "containment": True,
        "compare": False,
        "high_risk_texts": ["ALEX RIVERA", "555-0142"],
        "theta_star": 0.0,
    }


def blank(mocks: Mocks):
    arr = np.full((80, 120, 3), 255, np.uint8)
    return arr, {
        "category": "local newspaper",
        "containment": True,
        "compare": False,
        "high_risk_texts": [],
        "theta_star": 0.0,
    }


BUILDERS = {
    "credit_card": credit_card,
    "pregnancy_test_box": pregnancy_test_box,
    "letter": letter,
    "business_card": business_card,
    "blank": blank,
}


def build_fixtures(out_dir: str | Path) -> dict:
    """Write images, ``index.json``, ``agents.json`` and ``mocks/<role>.json``."""
    out = Path(out_dir)
    (out / "mocks").mkdir(parents=True, exist_ok=True)
    mocks = Mocks()
    index = {}
    for stem, build in BUILDERS.items():
        arr, meta = build(mocks)
        save_image(arr, out / f"{stem}.png")
        index[f"{stem}.png"] = meta
    (out / "index.json").write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    for role, table in sorted(mocks.tables.items()):
        text = json.dumps(dict(sorted(table.items())), indent=1) + "\n"
        (out / "mocks" / f"{role}.json").write_text(text, encoding="utf-8")
    agents = {"backend": "mock", "fixtures": "mocks"}
    (out / "agents.json").write_text(json.dumps(agents, indent=2) + "\n", encoding="utf-8")
    return index
