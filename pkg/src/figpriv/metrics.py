"""Masking statistics and model probes for evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .agents import Agent, yes_probability

log = logging.getLogger(__name__)

STRATEGIES = ("object", "fine_grained", "high_risk")


class ReportError(ValueError):
    pass


def masked_percentage(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"mask must be a non-empty 2-D array, got shape {mask.shape}")
    return 100.0 * float(np.count_nonzero(mask)) / mask.size


@dataclass(frozen=True)
class StrategyReport:
    """Per-image percentages plus means, over one shared image set."""

    rows: tuple[tuple[str, str, float], ...]  # (image, strategy, percentage)
    strategies: tuple[str, ...]
    means: dict[str, float]
    preserved_delta: float | None  # object minus high_risk, in percentage points
    per_image_delta: dict[str, float]

    @property
    def images(self) -> list[str]:
        return sorted({r[0] for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "strategy", "masked_percentage"])
        for row in self.rows:
            w.writerow(row)
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "images": self.images,
            "strategies": list(self.strategies),
            "mean_masked_percentage": self.means,
            "preserved_delta": self.preserved_delta,
            "per_image_delta": self.per_image_delta,
        }


def compare_strategies(by_image: Mapping[str, Mapping[str, float]]) -> StrategyReport:
    """Build a report from ``{image: {strategy: masked_percentage}}``.

    Every image must carry the same strategy set. The preserved-content
    delta is reported when both ``object`` and ``high_risk`` are present.
    """
    if not by_image:
        raise ReportError("no images to compare")
    images = sorted(by_image)
    expected = set(by_image[images[0]])
    for img in images:
        got = set(by_image[img])
        if got != expected:
            raise ReportError(f"{img}: strategies {sorted(got)} differ from {sorted(expected)}")
    strategies = tuple(s for s in STRATEGIES if s in expected) + tuple(sorted(expected - set(STRATEGIES)))
    rows = []
    for img in images:
        for s in strategies:
            p = float(by_image[img][s])
            if not 0.0 <= p <= 100.0:
                raise ReportError(f"{img}/{s}: percentage {p} out of range")
            rows.append((img, s, p))
    means = {s: float(np.mean([by_image[i][s] for i in images])) for s in strategies}
    delta, per_image = None, {}
    if "object" in expected and "high_risk" in expected:
        per_image = {i: float(by_image[i]["object"]) - float(by_image[i]["high_risk"]) for i in images}
        delta = means["object"] - means["high_risk"]
    return StrategyReport(tuple(rows), strategies, means, delta, per_image)


def percentages_from_manifests(paths: Iterable[str | Path]) -> dict[str, dict[str, float]]:
    """Group manifest files by input image."""
    out: dict[str, dict[str, float]] = {}
    for path in paths:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ReportError(f"{path}: unreadable manifest ({exc})") from None
        if data.get("status") != "ok" or data.get("masked_percentage") is None:
            raise ReportError(f"{path}: manifest is not a completed run")
        img = Path(data["input"]).name
        strategy = data["strategy"]
        if strategy in out.get(img, {}):
            raise ReportError(f"{img}: duplicate {strategy} manifest")
        out.setdefault(img, {})[strategy] = float(data["masked_percentage"])
    return out


def write_report(report: StrategyReport, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    json_path.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    return csv_path, json_path


def recognition_probe(image: np.ndarray, category: str, agent: Agent) -> float:
    """Likelihood that the model says the object is present."""
    return yes_probability(agent.ask(image, object=category), agent.config.logprob_mode)


def answerability_probe(image: np.ndarray, question: str, agent: Agent) -> float:
    return yes_probability(agent.ask(image, question=question), agent.config.logprob_mode)


def load_questions(path: str | Path) -> list[dict]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list) or not all(
        isinstance(q, dict) and isinstance(q.get("category"), str) and isinstance(q.get("question"), str)
        for q in data
    ):
        raise ValueError(f"{path}: expected a list of {{category, question}} objects")
    return data


def answerability_batch(images: Mapping[str, tuple[np.ndarray, str]], questions: list[dict], agent: Agent) -> dict:
    """Probe every image against the questions of its category.

    ``images`` maps a name to ``(array, category)``. Returns raw rows and
    the mean per image and overall.
    """
    rows = []
    for name in sorted(images):
        arr, category = images[name]
        for q in questions:
            if q["category"] != category:
                continue
            rows.append({"image": name, "question": q["question"], "p_yes": answerability_probe(arr, q["question"], agent)})
    per_image = {}
    for r in rows:
        per_image.setdefault(r["image"], []).append(r["p_yes"])
    return {
        "rows": rows,
        "mean_per_image": {k: float(np.mean(v)) for k, v in per_image.items()},
        "mean": float(np.mean([r["p_yes"] for r in rows])) if rows else None,
    }
