"""The model-backed roles of the pipeline, each behind a plain function."""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import BBox, GeometryError, as_polygon, bbox_to_polygon, is_degenerate, rasterize
from .backends import MockBackend, RemoteBackend
from .config import (
    ROLES,
    AgentEndpointConfig,
    AgentResponseError,
    AgentsFile,
)
from .parsing import loads_lenient, normalize_label, parse_bbox_json, yes_no_from_text

log = logging.getLogger(__name__)


@dataclass
class Agent:
    role: str
    config: AgentEndpointConfig
    backend: object

    def ask(self, image, text=None, **prompt_values) -> dict:
        if text is not None:
            prompt_values.setdefault("text", text)
        prompt = self.config.render(**prompt_values)
        resp = self.backend.request(self.role, self.config, image, prompt, text=text)
        if not isinstance(resp, dict):
            raise AgentResponseError(f"{self.role}: response is not an object")
        return resp

    @property
    def tag(self) -> str:
        name = getattr(self.backend, "name", type(self.backend).__name__)
        return f"{name}:{self.config.model_id}" if self.config.model_id else name


@dataclass
class AgentSet:
    detect: Agent
    segment: Agent
    orientation: Agent
    ocr: Agent
    vlm_text: Agent
    classify: Agent
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_backend(cls, backend, configs: dict[str, AgentEndpointConfig] | None = None) -> "AgentSet":
        configs = configs or {}
        agents = {r: Agent(r, configs.get(r) or AgentEndpointConfig(role=r), backend) for r in ROLES}
        extra = {
            r: Agent(r, configs.get(r) or AgentEndpointConfig(role=r), backend)
            for r in ("recognition", "answerability")
        }
        return cls(**agents, extra=extra)

    @classmethod
    def from_file(cls, agents_file: AgentsFile, live: bool | None = None, fixtures=None) -> "AgentSet":
        use_live = agents_file.backend == "live" if live is None else live
        if use_live:
            backend = RemoteBackend()
        else:
            backend = MockBackend(fixtures or agents_file.fixtures)
        return cls.from_backend(backend, agents_file.roles)

    def tags(self) -> dict[str, str]:
        return {r: getattr(self, r).tag for r in ROLES}


@dataclass(eq=False)
class TextDetection:
    text: str
    region: np.ndarray | BBox
    source: str  # "ocr" or "vlm"
    frame: str = "rotated"

    def polygon(self) -> np.ndarray:
        if isinstance(self.region, BBox):
            return bbox_to_polygon(self.region)
        return np.asarray(self.region, dtype=float)


def detect_object(image: np.ndarray, category_name: str, agent: Agent):
    """First box the detector reports for ``category_name``, or None."""
    resp = agent.ask(image, object=category_name)
    h, w = image.shape[:2]
    found = parse_bbox_json(resp.get("text", ""), image_size=(w, h))
    if not found:
        return None
    return found[0]


def decode_mask(data, width: int, height: int) -> np.ndarray | None:
    """Mask from a response payload; None when the payload carries nothing."""
    if data is None:
        return None
    if isinstance(data, dict) and "bits" in data:
        mw, mh = int(data["width"]), int(data["height"])
        raw = np.frombuffer(base64.b64decode(data["bits"]), dtype=np.uint8)
        bits = np.unpackbits(raw)[: mw * mh]
        if bits.size != mw * mh:
            raise AgentResponseError("mask bit count does not match its declared size")
        return bits.reshape(mh, mw).astype(bool)
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise AgentResponseError(f"mask must be 2-D, got shape {arr.shape}")
    return arr.astype(bool)


def encode_mask(mask: np.ndarray) -> dict:
    h, w = mask.shape
    packed = np.packbits(mask.astype(np.uint8).ravel())
    return {"width": w, "height": h, "bits": base64.b64encode(packed.tobytes()).decode("ascii")}


def segment_object(crop: np.ndarray, category_name: str, agent: Agent) -> np.ndarray:
    """Object mask in crop coordinates; all-ones when the segmenter finds nothing."""
    h, w = crop.shape[:2]
    resp = agent.ask(crop, object=category_name)
    if "text" in resp and not ({"mask", "polygons"} & set(resp)):
        parsed = loads_lenient(resp["text"])
        resp = parsed if isinstance(parsed, dict) else {}
    mask = None
    if resp.get("mask") is not None:
        mask = decode_mask(resp["mask"], w, h)
        if mask.shape != (h, w):
            raise AgentResponseError(f"segment mask {mask.shape[::-1]} does not match crop {(w, h)}")
    elif resp.get("polygons"):
        polys = []
        for p in resp["polygons"]:
            try:
                polys.append(as_polygon(p))
            except GeometryError as exc:
                log.warning("segment: dropping polygon (%s)", exc)
        mask = rasterize(polys, w, h)
    if mask is None or not mask.any():
        log.warning("segment: empty mask for %r, falling back to the full crop", category_name)
        return np.ones((h, w), dtype=bool)
    return mask


def yes_probability(resp: dict, logprob_mode: bool) -> float:
    """P(yes) from token likelihoods, else from the textual answer."""
    if logprob_mode and resp.get("logprobs"):
        p_yes = p_no = 0.0
        for token, lp in resp["logprobs"].items():
            word = normalize_label(token)
            if word == "yes":
                p_yes += math.exp(lp)
            elif word == "no":
                p_no += math.exp(lp)
        if p_yes + p_no > 0:
            return p_yes / (p_yes + p_no)
    value = yes_no_from_text(resp.get("text", ""))
    if value is None:
        log.warning("unrecognized yes/no answer %r; using 0.5", resp.get("text", ""))
        return 0.5
    return value


def judge_orientation(image: np.ndarray, agent: Agent) -> float:
    return yes_probability(agent.ask(image), agent.config.logprob_mode)


def _detection_items(resp: dict) -> list:
    if "detections" in resp:
        items = resp["detections"]
    elif "result" in resp:
        items = resp["result"]
    elif "text" in resp:
        items = loads_lenient(resp["text"])
    else:
        items = None
    if isinstance(items, dict):
        items = items.get("detections", [items])
    return items if isinstance(items, list) else []


def ocr_text(image: np.ndarray, agent: Agent, frame: str = "rotated") -> list[TextDetection]:
    """Polygon detections in ``image``'s own frame; malformed ones are dropped."""
    out = []
    for item in _detection_items(agent.ask(image)):
        if not isinstance(item, dict):
            continue
        pts = item.get("polygon", item.get("points", item.get("poly")))
        try:
            poly = as_polygon(pts)
        except (GeometryError, TypeError, ValueError) as exc:
            log.warning("ocr: dropping detection %r (%s)", item.get("text", ""), exc)
            continue
        if is_degenerate(poly):
            log.warning("ocr: dropping zero-area polygon for %r", item.get("text", ""))
            continue
        out.append(TextDetection(text=str(item.get("text", "")), region=poly, source="ocr", frame=frame))
    return out


def vlm_text(image: np.ndarray, agent: Agent, frame: str = "rotated") -> list[TextDetection]:
    """Box detections from the text VLM, clamped to the image."""
    resp = agent.ask(image)
    h, w = image.shape[:2]
    raw = resp.get("text", "")
    if not raw and "detections" in resp:
        raw = json.dumps(resp["detections"])
    return [
        TextDetection(text=d.label, region=d.bbox, source="vlm", frame=frame)
        for d in parse_bbox_json(raw, image_size=(w, h))
    ]


def classify_text(
    image_crop: np.ndarray, text: str, category: str, allowed_labels, agent: Agent
) -> str:
    """Sub-category of ``text``, always one of ``allowed_labels`` or ``"other"``."""
    allowed = [normalize_label(x) for x in allowed_labels]
    if not allowed:
        raise ValueError("allowed_labels must not be empty")
    resp = agent.ask(image_crop, text=text, categories=", ".join(allowed))
    answer = normalize_label(resp.get("text", ""))
    if answer in allowed:
        return answer
    log.warning("classify: %r is not an allowed label for %s; using 'other'", answer, category)
    return "other"
