"""Identity-ecosystem graph and PII risk scoring.

Nodes are PII attributes, a directed edge ``u -> v`` says that exposing ``u``
has led to compromise of ``v``. Every edge carries two weight channels:
occurrence frequency and monetary loss. Three scorers are provided:

* ``pagerank_standard``: damped, weight-proportional PageRank with teleport
  and uniform redistribution of dangling mass (the default).
* ``pagerank_literal``: the undamped-teleport recurrence
  ``x[u] = sum_{(v,u)} d * x[v] / outdeg(v)``, kept verbatim for fidelity.
  Its fixed point is the zero vector.
* ``ehits``: edge-weighted HITS, risk = hub + authority.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CHANNELS = ("frequency", "loss")
ALGORITHMS = ("pagerank_standard", "pagerank_literal", "ehits")


class GraphError(ValueError):
    """Invalid graph input or a scorer precondition that does not hold."""


def normalize_id(name: str) -> str:
    """Trim, lowercase and collapse internal whitespace."""
    return " ".join(str(name).split()).lower()


@dataclass(frozen=True)
class PiiNode:
    id: str
    display_name: str


@dataclass(frozen=True)
class WeightedEdge:
    source: str
    target: str
    weight_frequency: float
    weight_loss: float

    def weight(self, channel: str) -> float:
        return self.weight_frequency if channel == "frequency" else self.weight_loss


@dataclass(frozen=True)
class EcosystemGraph:
    nodes: tuple[PiiNode, ...]
    edges: tuple[WeightedEdge, ...]

    @cached_property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes)

    @cached_property
    def index(self) -> dict[str, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    @cached_property
    def out_adjacency(self) -> dict[str, tuple[WeightedEdge, ...]]:
        adj: dict[str, list[WeightedEdge]] = {nid: [] for nid in self.node_ids}
        for e in self.edges:
            adj[e.source].append(e)
        return {k: tuple(v) for k, v in adj.items()}

    @cached_property
    def in_adjacency(self) -> dict[str, tuple[WeightedEdge, ...]]:
        adj: dict[str, list[WeightedEdge]] = {nid: [] for nid in self.node_ids}
        for e in self.edges:
            adj[e.target].append(e)
        return {k: tuple(v) for k, v in adj.items()}

    def __contains__(self, node_id: str) -> bool:
        return normalize_id(node_id) in self.index

    def __len__(self) -> int:
        return len(self.nodes)

    def weight_matrix(self, channel: str) -> np.ndarray:
        """Dense ``W[i, j] = weight(i -> j)`` on the given channel."""
        _check_channel(channel)
        n = len(self.nodes)
        w = np.zeros((n, n), dtype=float)
        for e in self.edges:
            w[self.index[e.source], self.index[e.target]] = e.weight(channel)
        return w

    def adjacency_matrix(self) -> np.ndarray:
        n = len(self.nodes)
        a = np.zeros((n, n), dtype=float)
        for e in self.edges:
            a[self.index[e.source], self.index[e.target]] = 1.0
        return a

    def to_records(self) -> list[dict]:
        return [
            {
                "source": e.source,
                "target": e.target,
                "weight_frequency": e.weight_frequency,
                "weight_loss": e.weight_loss,
            }
            for e in self.edges
        ]


def _check_channel(channel: str) -> None:
    if channel not in CHANNELS:
        raise GraphError(f"unknown weight channel {channel!r}; expected one of {CHANNELS}")


def build_graph(edge_records: Iterable[Sequence | Mapping]) -> EcosystemGraph:
    """Build a graph from ``(source, target, weight_frequency, weight_loss)`` records.

    Records may also be mappings with those four keys. Endpoint names are
    normalized; duplicate ordered pairs are merged by summing each channel.
    """
    merged: dict[tuple[str, str], list[float]] = {}
    display: dict[str, str] = {}
    count = 0
    for rec in edge_records:
        count += 1
        if isinstance(rec, Mapping):
            try:
                src, dst = rec["source"], rec["target"]
            except KeyError as exc:
                raise GraphError(f"edge record {count} missing {exc.args[0]!r}") from None
            wf, wl = rec.get("weight_frequency", 0.0), rec.get("weight_loss", 0.0)
        else:
            if len(rec) != 4:
                raise GraphError(f"edge record {count} must have 4 fields, got {len(rec)}")
            src, dst, wf, wl = rec
        try:
            wf, wl = float(wf), float(wl)
        except (TypeError, ValueError):
            raise GraphError(f"edge record {count} has non-numeric weight") from None
        if not (math.isfinite(wf) and math.isfinite(wl)):
            raise GraphError(f"edge record {count} has non-finite weight")
        if wf < 0 or wl < 0:
            raise GraphError(f"edge record {count} has negative weight ({wf}, {wl})")
        ends = []
        for name in (src, dst):
            if not isinstance(name, str) or not normalize_id(name):
                raise GraphError(f"edge record {count} has an empty endpoint name")
            nid = normalize_id(name)
            display.setdefault(nid, " ".join(name.split()))
            ends.append(nid)
        acc = merged.setdefault((ends[0], ends[1]), [0.0, 0.0])
        acc[0] += wf
        acc[1] += wl
    if count == 0:
        raise GraphError("empty graph")

    node_ids = sorted(display)
    nodes = tuple(PiiNode(nid, display[nid]) for nid in node_ids)
    edges = tuple(
        WeightedEdge(s, t, w[0], w[1]) for (s, t), w in sorted(merged.items())
    )
    return EcosystemGraph(nodes=nodes, edges=edges)


def load_graph(path: str | Path) -> EcosystemGraph:
    """Read an edge list from JSON (array of objects) or CSV with a header row."""
    path = Path(path)
    suffix = path.suffix.lower()
    text = path.read_text(encoding="utf-8")
    if suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise GraphError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, list):
            raise GraphError(f"{path}: expected a JSON array of edge objects")
        for i, rec in enumerate(data, 1):
            if not isinstance(rec, dict):
                raise GraphError(f"{path}: edge record {i} is not an object")
        return build_graph(data)
    if suffix == ".csv":
        rows = list(csv.DictReader(text.splitlines()))
        needed = {"source", "target", "weight_frequency", "weight_loss"}
        if rows and not needed <= set(rows[0]):
            raise GraphError(f"{path}: CSV header must contain {sorted(needed)}")
        return build_graph(rows)
    raise GraphError(f"{path}: unsupported edge-list format {suffix!r}")


@dataclass(frozen=True)
class ScoreConfig:
    algorithm: str = "pagerank_standard"
    weight_channel: str = "frequency"
    damping: float = 0.85
    epsilon: float = 1e-8
    max_iterations: int = 1000

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise GraphError(f"unknown algorithm {self.algorithm!r}")
        _check_channel(self.weight_channel)
        if not 0.0 < self.damping < 1.0:
            raise GraphError("damping must lie in (0, 1)")
        if not self.epsilon > 0:
            raise GraphError("epsilon must be positive")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise GraphError("max_iterations must be a positive integer")


@dataclass(frozen=True)
class ScoreVector:
    scores: Mapping[str, float]
    algorithm: str
    weight_channel: str
    iterations_used: int
    converged: bool
    component: str = "risk"

    def __getitem__(self, node_id: str) -> float:
        return self.scores[node_id]

    @property
    def source_tag(self) -> str:
        return f"{self.algorithm}/{self.weight_channel}"

    def to_json(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "channel": self.weight_channel,
            "scores": dict(self.scores),
            "converged": self.converged,
            "iterations": self.iterations_used,
        }


def _vector(graph, values, config, iterations, converged, component="risk"):
    scores = {nid: float(v) for nid, v in zip(graph.node_ids, values)}
    return ScoreVector(
        scores=scores,
        algorithm=config.algorithm,
        weight_channel=config.weight_channel,
        iterations_used=iterations,
        converged=converged,
        component=component,
    )


def pagerank(graph: EcosystemGraph, config: ScoreConfig = ScoreConfig()) -> ScoreVector:
    """Power-iterate PageRank until the L-infinity change drops to ``epsilon``.

    Non-convergence within ``max_iterations`` is reported through
    ``converged=False`` rather than raised.
    """
    if config.algorithm not in ("pagerank_standard", "pagerank_literal"):
        raise GraphError(f"pagerank cannot run algorithm {config.algorithm!r}")
    n = len(graph.nodes)
    if n == 0:
        raise GraphError("graph has no nodes")
    d = config.damping

    if config.algorithm == "pagerank_literal":
        # weights ignored; share 1/outdegree along each out-edge
        a = graph.adjacency_matrix()
        outdeg = a.sum(axis=1)
        trans = np.divide(a, outdeg[:, None], out=np.zeros_like(a), where=outdeg[:, None] > 0)
        dangling = np.zeros(n, dtype=bool)
        teleport = 0.0
        redistribute = False
    else:
        w = graph.weight_matrix(config.weight_channel)
        rowsum = w.sum(axis=1)
        dangling = rowsum <= 0
        trans = np.divide(w, rowsum[:, None], out=np.zeros_like(w), where=~dangling[:, None])
        teleport = (1.0 - d) / n
        redistribute = True

    trans_t = trans.T.copy()
    x = np.full(n, 1.0 / n)
    converged = False
    it = 0
    while it < config.max_iterations:
        it += 1
        nxt = d * (trans_t @ x)
        if redistribute:
            nxt += teleport + d * x[dangling].sum() / n
        delta = np.max(np.abs(nxt - x))
        x = nxt
        if delta <= config.epsilon:
            converged = True
            break
    return _vector(graph, x, config, it, converged)


def ehits(
    graph: EcosystemGraph, config: ScoreConfig = ScoreConfig(algorithm="ehits")
) -> tuple[ScoreVector, ScoreVector, ScoreVector]:
    """Edge-weighted HITS; returns ``(hub, authority, risk)``.

    Both vectors start at 1. Each sweep computes hub and authority from the
    previous sweep's vectors (simultaneous update), scales by the maximum
    out/in degree, then L1-normalizes each. Risk is ``hub + authority``.
    """
    w = graph.weight_matrix(config.weight_channel)
    if not np.any(w > 0):
        raise GraphError(f"no signal on channel {config.weight_channel!r}")
    a01 = graph.adjacency_matrix()
    max_out = a01.sum(axis=1).max()
    max_in = a01.sum(axis=0).max()

    n = len(graph.nodes)
    hub = np.ones(n)
    auth = np.ones(n)
    wt = w.T.copy()
    converged = False
    it = 0
    while it < config.max_iterations:
        it += 1
        new_hub = (w @ auth) / max_out
        new_auth = (wt @ hub) / max_in
        new_hub /= new_hub.sum()
        new_auth /= new_auth.sum()
        delta = max(np.max(np.abs(new_hub - hub)), np.max(np.abs(new_auth - auth)))
        hub, auth = new_hub, new_auth
        if delta <= config.epsilon:
            converged = True
            break

    return (
        _vector(graph, hub, config, it, converged, component="hub"),
        _vector(graph, auth, config, it, converged, component="authority"),
        _vector(graph, hub + auth, config, it, converged, component="risk"),
    )


def risk_scores(graph: EcosystemGraph, config: ScoreConfig = ScoreConfig()) -> ScoreVector:
    """Per-node risk under the configured algorithm and weight channel."""
    if config.algorithm == "ehits":
        return ehits(graph, config)[2]
    return pagerank(graph, config)


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the positions they span."""
    vals = np.asarray(values, dtype=float)
    order = np.argsort(vals, kind="mergesort")
    ranks = np.empty(len(vals), dtype=float)
    i = 0
    while i < len(vals):
        j = i
        while j + 1 < len(vals) and vals[order[j + 1]] == vals[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a: ScoreVector | Mapping[str, float], b: ScoreVector | Mapping[str, float]) -> float:
    """Spearman rank correlation using average ranks for ties."""
    sa = a.scores if isinstance(a, ScoreVector) else a
    sb = b.scores if isinstance(b, ScoreVector) else b
    if set(sa) != set(sb):
        raise GraphError("score vectors cover different node sets")
    keys = sorted(sa)
    if len(keys) < 2:
        raise GraphError("spearman needs at least two nodes")
    ra = average_ranks([sa[k] for k in keys])
    rb = average_ranks([sb[k] for k in keys])
    # perfectly monotone rankings are reported exactly
    if np.array_equal(ra, rb):
        if np.all(ra == ra[0]):
            raise GraphError("undefined correlation: all ranks tied")
        return 1.0
    if np.array_equal(ra, (len(keys) + 1) - rb) and not np.all(ra == ra[0]):
        return -1.0
    da = ra - ra.mean()
    db = rb - rb.mean()
    va = float(np.dot(da, da))
    vb = float(np.dot(db, db))
    if va == 0.0 or vb == 0.0:
        raise GraphError("undefined correlation: all ranks tied")
    rho = float(np.dot(da, db)) / math.sqrt(va * vb)
    return max(-1.0, min(1.0, rho))


def percentile_threshold(scores: ScoreVector | Mapping[str, float], q: float = 60.0) -> float:
    """Linear-interpolated ``q``-th percentile over all node scores."""
    vals = list((scores.scores if isinstance(scores, ScoreVector) else scores).values())
    if not vals:
        raise GraphError("no scores")
    return float(np.percentile(np.asarray(vals, dtype=float), q))


NEWS_STORIES: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...] = (
    (
        ("Mail with PII Stolen", "Mailbox(es) Broken Into"),
        ("Check Information Altered", "Check(s) Deposited", "Monetary Amount", "Stolen Check"),
    ),
    (
        (
            "Credit Card Application(s) Submitted",
            "Date of Birth",
            "Name",
            "PII Distributed via Email",
            "PII Stolen",
            "Server(s) Accessed without Authorization",
            "Social Security Number",
        ),
        ("Consumer Goods and/or Services Purchased", "Counterfeit Credit Card(s) Created"),
    ),
    (
        ("Email Address", "Name", "Phishing Email Sent"),
        ("Name", "Social Security Number", "W-2 Form Information"),
    ),
    (
        ("Name", "Social Security Number", "Social Security Number(s) Stolen"),
        ("Fraudulent Bank Account(s) Opened", "Fraudulent Loan Taken Out"),
    ),
    (
        ("Employee Credentials Stolen", "Malware Injected", "Password", "Username"),
        ("Bank Account Information", "Bank Account(s) Compromised", "Name", "Payroll System Breached"),
    ),
)


def story_records(stories=NEWS_STORIES) -> list[tuple[str, str, float, float]]:
    """One frequency-1 edge from every source to every target of each story.

    The stories carry no loss figures, so the loss channel is left at zero.
    """
    return [(s, t, 1.0, 0.0) for sources, targets in stories for s in sources for t in targets]
