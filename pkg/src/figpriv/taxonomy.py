"""Private-object categories, their synonym graph nodes and contained PII types."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .risk_graph import EcosystemGraph, ScoreVector, normalize_id

log = logging.getLogger(__name__)

# Spelling variants that should resolve to the bundled row names.
ALIASES = {
    "pregnancy test": "preganancy test",
    "mortgage or investment report": "mortage or investment report",
}


class TaxonomyError(ValueError):
    pass


class UnknownCategory(TaxonomyError, KeyError):
    def __str__(self):
        return f"unknown category {self.args[0]!r}"


@dataclass(frozen=True)
class PrivateCategory:
    name: str
    synonym_nodes: tuple[str, ...] = ()
    pii_types: tuple[str, ...] = ()

    def __post_init__(self):
        if not normalize_id(self.name):
            raise TaxonomyError("category name must be non-empty")
        for label, items in (("synonym_nodes", self.synonym_nodes), ("pii_types", self.pii_types)):
            normed = [normalize_id(x) for x in items]
            if len(set(normed)) != len(normed):
                raise TaxonomyError(f"{self.name}: duplicate entries in {label}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "synonym_nodes": list(self.synonym_nodes),
            "pii_types": list(self.pii_types),
        }


@dataclass(frozen=True)
class CategoryTable:
    categories: Mapping[str, PrivateCategory]

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "CategoryTable":
        cats: dict[str, PrivateCategory] = {}
        for i, rec in enumerate(records, 1):
            if not isinstance(rec, Mapping) or "name" not in rec:
                raise TaxonomyError(f"category record {i} must be an object with a 'name'")
            for key in ("synonym_nodes", "pii_types"):
                val = rec.get(key, [])
                if not isinstance(val, list) or not all(isinstance(x, str) for x in val):
                    raise TaxonomyError(f"category record {i}: {key} must be a list of strings")
            cat = PrivateCategory(
                name=str(rec["name"]).strip(),
                synonym_nodes=tuple(rec.get("synonym_nodes", [])),
                pii_types=tuple(rec.get("pii_types", [])),
            )
            key = normalize_id(cat.name)
            if key in cats:
                raise TaxonomyError(f"duplicate category name {cat.name!r}")
            cats[key] = cat
        return cls(cats)

    def __getitem__(self, name: str) -> PrivateCategory:
        key = normalize_id(name)
        key = ALIASES.get(key, key)
        try:
            return self.categories[key]
        except KeyError:
            raise UnknownCategory(name) from None

    def __contains__(self, name: str) -> bool:
        key = normalize_id(name)
        return ALIASES.get(key, key) in self.categories

    def __iter__(self):
        return iter(self.categories.values())

    def __len__(self):
        return len(self.categories)

    def to_records(self) -> list[dict]:
        return [c.to_json() for c in self.categories.values()]

    def dumps(self) -> str:
        return json.dumps(self.to_records(), indent=2) + "\n"


def default_table_path() -> Path:
    return Path(str(resources.files("figpriv") / "data" / "categories.json"))


def load_table(path: str | Path | None = None) -> CategoryTable:
    """Load a category table; ``None`` loads the bundled default."""
    path = default_table_path() if path is None else Path(path)
    if path.suffix.lower() != ".json":
        raise TaxonomyError(f"{path}: unsupported category table format {path.suffix!r}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, list):
        raise TaxonomyError(f"{path}: expected a JSON array of categories")
    return CategoryTable.from_records(data)


def resolve_synonyms(table: CategoryTable, graph: EcosystemGraph, category: str) -> list[str]:
    """Synonym nodes of ``category`` that exist in ``graph`` (normalized ids)."""
    cat = table[category]
    return [normalize_id(s) for s in cat.synonym_nodes if normalize_id(s) in graph.index]


@dataclass(frozen=True)
class HighRiskSet:
    category: str
    members: frozenset[str]
    tau: float
    score_source: str
    unscored: tuple[str, ...] = ()
    strict: bool = False

    def __contains__(self, pii: str) -> bool:
        return normalize_id(pii) in self.members

    def to_json(self) -> dict:
        return {
            "category": self.category,
            "members": sorted(self.members),
            "tau": self.tau,
            "score_source": self.score_source,
            "unscored": list(self.unscored),
            "strict": self.strict,
        }


def high_risk_for_category(
    table: CategoryTable,
    scores: ScoreVector | Mapping[str, float],
    category: str,
    tau: float,
    strict: bool = False,
) -> HighRiskSet:
    """PII types of ``category`` whose score is at least ``tau``.

    PII missing from the score vector are listed as ``unscored``. They are
    excluded unless ``strict`` is set, in which case they are kept.
    """
    if not isinstance(tau, (int, float)) or tau != tau or tau in (float("inf"), float("-inf")):
        raise TaxonomyError(f"tau must be finite, got {tau!r}")
    cat = table[category]
    if isinstance(scores, ScoreVector):
        values, source = scores.scores, scores.source_tag
    else:
        values, source = scores, "custom"
    members, unscored = set(), []
    for pii in cat.pii_types:
        pid = normalize_id(pii)
        if pid not in values:
            unscored.append(pid)
            if strict:
                members.add(pid)
            continue
        if values[pid] >= tau:
            members.add(pid)
    if unscored:
        log.warning(
            "%s: PII without a risk score %s (%s)",
            cat.name,
            unscored,
            "kept, strict mode" if strict else "excluded",
        )
    return HighRiskSet(
        category=cat.name,
        members=frozenset(members),
        tau=float(tau),
        score_source=source,
        unscored=tuple(unscored),
        strict=strict,
    )
