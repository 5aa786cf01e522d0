"""Detect, segment, align, read, refine, label and mask one image."""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import geometry as geo
from .agents import (
    AgentError,
    AgentResponseError,
    AgentSet,
    AgentTransportError,
    TextDetection,
    classify_text,
    detect_object,
    judge_orientation,
    ocr_text,
    segment_object,
    vlm_text,
)
from .metrics import masked_percentage
from .risk_graph import EcosystemGraph, GraphError, ScoreConfig, ScoreVector, percentile_threshold, risk_scores
from .taxonomy import CategoryTable, HighRiskSet, TaxonomyError, high_risk_for_category

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "figpriv-manifest/1"
DEFAULT_ANGLES = (0.0, 90.0, 180.0, 270.0)
TEXT_STAGES = ("orientation", "ocr", "vlm_text", "classify")


class MaskStrategy(str, Enum):
    OBJECT = "object"
    FINE_GRAINED = "fine_grained"
    HIGH_RISK = "high_risk"

    @property
    def suffix(self) -> str:
        return {"object": "object", "fine_grained": "fine", "high_risk": "highrisk"}[self.value]


class PipelineFailure(Exception):
    """A stage failed; ``manifest`` holds the partial trace."""

    def __init__(self, message: str, manifest: "Manifest", kind: str):
        super().__init__(message)
        self.manifest = manifest
        self.kind = kind  # "transport" or "data"


@dataclass(frozen=True)
class PipelineConfig:
    candidate_angles: tuple[float, ...] = DEFAULT_ANGLES
    strategy: MaskStrategy = MaskStrategy.HIGH_RISK
    score: ScoreConfig = ScoreConfig()
    tau: float | None = None
    tau_percentile: float = 60.0
    category: str | None = None
    phi_correction: bool = True
    strict_labeling: bool = True
    strict_unscored: bool = False
    merge_iou: float | None = None

    def __post_init__(self):
        if not self.candidate_angles:
            raise ValueError("candidate angle set must not be empty")
        object.__setattr__(self, "candidate_angles", tuple(float(a) for a in self.candidate_angles))
        object.__setattr__(self, "strategy", MaskStrategy(self.strategy))
        if self.tau is not None and not np.isfinite(self.tau):
            raise ValueError("tau must be finite")

    def to_json(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["candidate_angles"] = list(self.candidate_angles)
        return d


@dataclass(frozen=True)
class RiskContext:
    scores: ScoreVector
    tau: float


def prepare_risk(graph: EcosystemGraph, config: PipelineConfig) -> RiskContext:
    scores = risk_scores(graph, config.score)
    tau = config.tau if config.tau is not None else percentile_threshold(scores, config.tau_percentile)
    return RiskContext(scores, float(tau))


def load_image(path: str | Path) -> np.ndarray:
    """8-bit RGB array; transparency is flattened against white."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("RGBA", "LA") or (im.mode == "P" and "transparency" in im.info):
            rgba = im.convert("RGBA")
            bg = Image.new("RGBA", rgba.size, (255, 255, 255, 255))
            im = Image.alpha_composite(bg, rgba)
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_image(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, format="PNG")


# ---------------------------------------------------------------- stages


def select_orientation(crop: np.ndarray, angles: Sequence[float], judge):
    """Rotate by every candidate angle and keep the one the judge likes most.

    Ties go to the earliest angle. A single candidate is applied without
    consulting the judge. Returns ``(theta_star, spec, rotated, probabilities)``.
    """
    angles = list(angles)
    if not angles:
        raise ValueError("candidate angle set must not be empty")
    if len(angles) == 1:
        rotated, spec = geo.rotate_with_spec(crop, angles[0])
        return angles[0], spec, rotated, {}
    best = None
    probs = {}
    for theta in angles:
        rotated, spec = geo.rotate_with_spec(crop, theta)
        p = judge(rotated)
        probs[theta] = p
        if best is None or p > best[0]:
            best = (p, theta, spec, rotated)
    _, theta, spec, rotated = best
    return theta, spec, rotated, probs


@dataclass
class Recognition:
    detections: list[TextDetection]
    frames: dict[str, list[geo.RotationSpec]]
    phi: float | None = None
    warnings: list[str] = field(default_factory=list)
    vlm_input: np.ndarray | None = None


def skew_angle(detections: Sequence[TextDetection]) -> float | None:
    """Median principal-axis angle over polygon detections."""
    angles = []
    for det in detections:
        try:
            angles.append(geo.polygon_orientation_angle(det.polygon()))
        except geo.GeometryError:
            continue
    return float(statistics.median(angles)) if angles else None


def recognize_text(rotated: np.ndarray, spec: geo.RotationSpec, agents: AgentSet, phi_correction: bool = True) -> Recognition:
    """Union of OCR polygons and text-VLM boxes for the aligned object.

    With ``phi_correction`` the median OCR skew is undone before the VLM pass,
    and the VLM boxes are tagged with the composed frame.
    """
    frames = {"theta": [spec]}
    warnings = []
    failures = []
    try:
        ocr = ocr_text(rotated, agents.ocr, frame="theta")
    except AgentTransportError as exc:
        failures.append(exc)
        warnings.append(f"ocr failed: {exc}")
        ocr = []

    phi = skew_angle(ocr)
    vlm_image, vlm_frame = rotated, "theta"
    if phi_correction and phi:
        vlm_image, phi_spec = geo.rotate_with_spec(rotated, -phi)
        frames["theta+phi"] = [spec, phi_spec]
        vlm_frame = "theta+phi"
    try:
        vlm = vlm_text(vlm_image, agents.vlm_text, frame=vlm_frame)
    except AgentTransportError as exc:
        failures.append(exc)
        warnings.append(f"vlm_text failed: {exc}")
        vlm = []
    if len(failures) == 2:
        raise AgentTransportError("both text agents failed: " + "; ".join(map(str, failures)))
    for w in warnings:
        log.warning(w)
    return Recognition(ocr + vlm, frames, phi, warnings, vlm_image)


def refine_detections(detections, frames, object_origin=(0, 0)) -> list[np.ndarray]:
    """Polygons of ``detections`` in original-image coordinates."""
    out = []
    for det in detections:
        try:
            chain = frames[det.frame]
        except KeyError:
            raise geo.GeometryError(f"unknown frame tag {det.frame!r}") from None
        local = geo.inverse_rotate_polygon(det.polygon(), chain)
        out.append(geo.realign_to_original(local, object_origin))
    return out


@dataclass
class Labeled:
    sub_category: str | None
    high_risk: bool
    labeling_failed: bool = False


def assign_risk(detections, image, category, hr_set: HighRiskSet, table: CategoryTable, labeler, strict: bool = True):
    """Label each detection and flag the ones whose label is high risk.

    A labeler failure marks the detection high risk in strict mode and
    ``other`` otherwise.
    """
    allowed = list(table[category].pii_types) + ["other"]
    out = []
    for det in detections:
        try:
            label = classify_text(image, det.text, category, allowed, labeler)
        except AgentError as exc:
            log.warning("labeling failed for %r: %s", det.text, exc)
            if strict:
                out.append(Labeled(None, True, True))
            else:
                out.append(Labeled("other", False, True))
            continue
        out.append(Labeled(label, label != "other" and label in hr_set))
    return out


def build_strategy_mask(strategy, seg_mask_full, all_polygons, high_risk_polygons, image_dims) -> np.ndarray:
    w, h = image_dims
    strategy = MaskStrategy(strategy)
    if strategy is MaskStrategy.OBJECT:
        return seg_mask_full.copy()
    if strategy is MaskStrategy.FINE_GRAINED:
        return geo.rasterize(all_polygons, w, h)
    return geo.rasterize(high_risk_polygons, w, h)


def _bbox_iou(a: np.ndarray, b: np.ndarray) -> float:
    ax0, ay0, ax1, ay1 = geo.polygon_bounds(a)
    bx0, by0, bx1, by1 = geo.polygon_bounds(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0) + 1)
    ih = max(0.0, min(ay1, by1) - max(ay0, by0) + 1)
    inter = iw * ih
    union = (ax1 - ax0 + 1) * (ay1 - ay0 + 1) + (bx1 - bx0 + 1) * (by1 - by0 + 1) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------- manifest


def _r(v: float) -> float:
    return round(float(v), 4) + 0.0


@dataclass
class DetectionRecord:
    text: str
    source: str
    frame: str
    polygon: np.ndarray
    sub_category: str | None = None
    high_risk: bool = False
    labeling_failed: bool = False
    box: tuple | None = None

    def sort_key(self):
        x0, y0, _, _ = geo.polygon_bounds(self.polygon)
        return (0 if self.source == "ocr" else 1, _r(y0), _r(x0), self.text)

    def to_json(self) -> dict:
        d = {
            "text": self.text,
            "source": self.source,
            "frame": self.frame,
            "polygon": [[_r(x), _r(y)] for x, y in self.polygon],
            "sub_category": self.sub_category,
            "high_risk": self.high_risk,
        }
        if self.box is not None:
            d["box_rotated_frame"] = list(self.box)
            d["box_corners_listed"] = geo.bbox_corners_listed(self.box)
        if self.labeling_failed:
            d["labeling_failed"] = True
        return d


@dataclass
class Manifest:
    input: str
    image_size: tuple[int, int]
    category: str
    strategy: str
    detection: dict | None = None
    crop_origin: tuple[int, int] = (0, 0)
    theta_star: float | None = None
    orientation_scores: dict | None = None
    phi: float | None = None
    detections: list[DetectionRecord] = field(default_factory=list)
    high_risk_set: dict | None = None
    masked_percentage: float | None = None
    stages: dict = field(default_factory=dict)
    agents: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    errors: list[dict] = field(default_factory=list)
    status: str = "ok"
    timings: dict = field(default_factory=dict)

    def to_json(self, include_timings: bool = False) -> dict:
        d = {
            "schema": MANIFEST_SCHEMA,
            "input": self.input,
            "image_size": list(self.image_size),
            "category": self.category,
            "strategy": self.strategy,
            "status": self.status,
            "detection": self.detection,
            "crop_origin": list(self.crop_origin),
            "theta_star": self.theta_star,
            "orientation_scores": self.orientation_scores,
            "phi": None if self.phi is None else _r(self.phi),
            "detections": [r.to_json() for r in self.detections],
            "high_risk_set": self.high_risk_set,
            "masked_percentage": self.masked_percentage,
            "stages": self.stages,
            "agents": self.agents,
            "config": self.config,
            "errors": self.errors,
        }
        if include_timings:
            d["timings"] = {k: round(v, 6) for k, v in self.timings.items()}
        return d

    def dumps(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_json(include_timings), indent=2, sort_keys=False) + "\n"


# ---------------------------------------------------------------- driver


@dataclass
class Analysis:
    image: np.ndarray
    manifest: Manifest
    seg_mask_full: np.ndarray
    records: list[DetectionRecord]
    with_text: bool


class _Stage:
    def __init__(self, manifest: Manifest, name: str):
        self.manifest = manifest
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.manifest.timings[self.name] = time.perf_counter() - self.t0
        if exc is None:
            self.manifest.stages[self.name] = "ok"
            return False
        if isinstance(exc, AgentTransportError):
            kind = "transport"
        elif isinstance(exc, (AgentResponseError, geo.GeometryError, TaxonomyError, GraphError, ValueError)):
            kind = "data"
        else:
            return False
        self.manifest.stages[self.name] = "failed"
        self.manifest.errors.append({"stage": self.name, "kind": kind, "message": str(exc)})
        self.manifest.status = "failed"
        raise PipelineFailure(f"{self.name}: {exc}", self.manifest, kind) from exc


def analyze(
    image: np.ndarray,
    category: str,
    config: PipelineConfig,
    agents: AgentSet,
    table: CategoryTable,
    risk: RiskContext | None,
    *,
    input_name: str = "<array>",
    with_text: bool = True,
    extra_config: dict | None = None,
) -> Analysis:
    h, w = image.shape[:2]
    cfg_json = config.to_json()
    if extra_config:
        cfg_json = {**extra_config, "pipeline": cfg_json}
    manifest = Manifest(
        input=input_name,
        image_size=(w, h),
        category=category,
        strategy="",
        agents=agents.tags(),
        config=cfg_json,
    )
    for name in ("detect", "segment") + TEXT_STAGES:
        manifest.stages[name] = "pending"

    with _Stage(manifest, "taxonomy"):
        cat = table[category]
    manifest.stages.pop("taxonomy", None)
    manifest.category = cat.name

    with _Stage(manifest, "detect"):
        found = detect_object(image, cat.name, agents.detect)
    if found is None:
        origin = (0, 0)
        crop_img = image.copy()
        manifest.detection = None
    else:
        with _Stage(manifest, "detect"):
            crop_img, used = geo.crop(image, found.bbox)
        origin = (used.x_top, used.y_top)
        manifest.detection = {
            "bbox": list(used),
            "bbox_format": "x_top,y_top,x_bottom,y_bottom",
            "label": found.label,
        }
    manifest.crop_origin = origin

    with _Stage(manifest, "segment"):
        seg = segment_object(crop_img, cat.name, agents.segment)
        isolated = geo.whiteout_outside_mask(crop_img, seg)
    seg_full = geo.place_mask(seg, origin, w, h)

    records: list[DetectionRecord] = []
    if not with_text:
        for name in TEXT_STAGES:
            manifest.stages[name] = "skipped"
        return Analysis(image, manifest, seg_full, records, False)

    with _Stage(manifest, "orientation"):
        theta, spec, rotated, probs = select_orientation(
            isolated, config.candidate_angles, lambda im: judge_orientation(im, agents.orientation)
        )
    manifest.theta_star = theta
    manifest.orientation_scores = {f"{a:g}": round(p, 6) for a, p in probs.items()} or None

    t0 = time.perf_counter()
    try:
        rec = recognize_text(rotated, spec, agents, config.phi_correction)
    except AgentTransportError as exc:
        manifest.timings["text"] = time.perf_counter() - t0
        manifest.stages["ocr"] = manifest.stages["vlm_text"] = "failed"
        manifest.errors.append({"stage": "text", "kind": "transport", "message": str(exc)})
        manifest.status = "failed"
        raise PipelineFailure(str(exc), manifest, "transport") from exc
    manifest.timings["text"] = time.perf_counter() - t0
    manifest.stages["ocr"] = "failed" if any(m.startswith("ocr") for m in rec.warnings) else "ok"
    manifest.stages["vlm_text"] = "failed" if any(m.startswith("vlm") for m in rec.warnings) else "ok"
    for msg in rec.warnings:
        manifest.errors.append({"stage": msg.split()[0], "kind": "transport", "message": msg})
    manifest.phi = rec.phi

    with _Stage(manifest, "refine"):
        polygons = refine_detections(rec.detections, rec.frames, origin)
    manifest.stages.pop("refine", None)

    dets = list(rec.detections)
    if config.merge_iou is not None:
        keep = []
        for i, poly in enumerate(polygons):
            if any(_bbox_iou(poly, polygons[j]) > config.merge_iou for j in keep):
                continue
            keep.append(i)
        dets = [dets[i] for i in keep]
        polygons = [polygons[i] for i in keep]

    with _Stage(manifest, "classify"):
        if risk is None:
            raise ValueError("risk context required for labeling")
        hr = high_risk_for_category(table, risk.scores, cat.name, risk.tau, strict=config.strict_unscored)
        labels = assign_risk(dets, rotated, cat.name, hr, table, agents.classify, config.strict_labeling)
    manifest.high_risk_set = hr.to_json()

    for det, poly, lab in zip(dets, polygons, labels):
        records.append(
            DetectionRecord(
                text=det.text,
                source=det.source,
                frame=det.frame,
                polygon=poly,
                sub_category=lab.sub_category,
                high_risk=lab.high_risk,
                labeling_failed=lab.labeling_failed,
                box=tuple(det.region) if isinstance(det.region, geo.BBox) else None,
            )
        )
    records.sort(key=DetectionRecord.sort_key)
    return Analysis(image, manifest, seg_full, records, True)


def render(analysis: Analysis, strategy) -> tuple[np.ndarray, Manifest, np.ndarray]:
    """Masked image, manifest and mask for one strategy."""
    strategy = MaskStrategy(strategy)
    base = analysis.manifest
    if strategy is not MaskStrategy.OBJECT and not analysis.with_text:
        raise ValueError(f"{strategy.value} masking needs the text stages")
    h, w = analysis.image.shape[:2]
    all_polys = [r.polygon for r in analysis.records]
    hr_polys = [r.polygon for r in analysis.records if r.high_risk]
    mask = build_strategy_mask(strategy, analysis.seg_mask_full, all_polys, hr_polys, (w, h))

    m = Manifest(**{k: getattr(base, k) for k in base.__dataclass_fields__})
    m.stages = dict(base.stages)
    m.strategy = strategy.value
    if strategy is MaskStrategy.OBJECT:
        for name in TEXT_STAGES:
            m.stages[name] = "skipped"
        m.theta_star = m.orientation_scores = m.phi = m.high_risk_set = None
        m.detections = []
        m.timings = {k: v for k, v in base.timings.items() if k in ("detect", "segment")}
    else:
        m.detections = list(analysis.records)
    m.masked_percentage = round(masked_percentage(mask), 6)
    return geo.apply_mask(analysis.image, mask), m, mask


def run_pipeline(
    image_path,
    category: str,
    config: PipelineConfig,
    agent_set: AgentSet,
    graph: EcosystemGraph | None,
    table: CategoryTable,
    *,
    risk: RiskContext | None = None,
    extra_config: dict | None = None,
) -> tuple[np.ndarray, Manifest]:
    """Run every stage for ``config.strategy`` and return the masked image."""
    image = load_image(image_path) if not isinstance(image_path, np.ndarray) else image_path
    name = str(image_path) if not isinstance(image_path, np.ndarray) else "<array>"
    needs_text = config.strategy is not MaskStrategy.OBJECT
    if needs_text and risk is None:
        if graph is None:
            raise ValueError("a graph or a precomputed risk context is required")
        risk = prepare_risk(graph, config)
    analysis = analyze(
        image, category, config, agent_set, table, risk,
        input_name=name, with_text=needs_text, extra_config=extra_config,
    )
    masked, manifest, _ = render(analysis, config.strategy)
    return masked, manifest
