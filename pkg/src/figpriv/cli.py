"""Command-line entry point: ``figpriv risk|mask|compare|validate|fixtures``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

from . import pipeline as pl
from .agents import AgentConfigError, AgentError, AgentSet, AgentTransportError, load_agents_file
from .metrics import ReportError, compare_strategies, percentages_from_manifests, write_report
from .risk_graph import ALGORITHMS, CHANNELS, GraphError, ScoreConfig, load_graph, percentile_threshold, risk_scores
from .taxonomy import TaxonomyError, high_risk_for_category, load_table

log = logging.getLogger("figpriv")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRANSPORT = 0, 2, 3, 4
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _bundled(*parts: str) -> str:
    return str(Path(str(resources.files("figpriv"))).joinpath("data", *parts))


DEFAULTS = {
    "graph": None,  # resolved lazily to the bundled toy graph
    "categories": None,
    "agents": None,
    "algorithm": "pagerank_standard",
    "channel": "frequency",
    "damping": 0.85,
    "tau": None,
    "tau_percentile": 60.0,
    "angles": "0,90,180,270",
    "strategy": "high_risk",
    "jobs": None,
    "out": None,
    "keep_going": False,
    "strict_labeling": True,
    "phi_correction": True,
    "live": False,
    "category": None,
    "index": None,
}


def effective(args: argparse.Namespace) -> dict:
    """Defaults, overridden by ``--config FILE``, overridden by explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_CONFIG) from None
        if not isinstance(data, dict):
            raise CliError(f"{args.config}: expected a JSON object", EXIT_CONFIG)
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise CliError(f"{args.config}: unknown keys {sorted(unknown)}", EXIT_CONFIG)
        cfg.update(data)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["graph"] = cfg["graph"] or _bundled("toy_ecosystem.json")
    cfg["categories"] = cfg["categories"] or _bundled("categories.json")
    cfg["agents"] = cfg["agents"] or _bundled("fixtures", "agents.json")
    return cfg


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}", EXIT_CONFIG)
    return p


def _score_config(cfg: dict) -> ScoreConfig:
    try:
        return ScoreConfig(algorithm=cfg["algorithm"], weight_channel=cfg["channel"], damping=float(cfg["damping"]))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _parse_angles(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [s for s in str(text).split(",") if s.strip()]
    try:
        angles = tuple(float(a) for a in items)
    except ValueError:
        raise CliError(f"invalid angle list {text!r}", EXIT_CONFIG) from None
    if not angles:
        raise CliError("angle list must not be empty", EXIT_CONFIG)
    return angles


# ---------------------------------------------------------------- risk


def cmd_risk(args) -> int:
    cfg = effective(args)
    graph = load_graph(_require_file(cfg["graph"], "graph file"))
    score_cfg = _score_config(cfg)
    if args.risk_command == "scores":
        text = json.dumps(risk_scores(graph, score_cfg).to_json(), indent=2) + "\n"
        if cfg["out"]:
            Path(cfg["out"]).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    table = load_table(_require_file(cfg["categories"], "category table"))
    scores = risk_scores(graph, score_cfg)
    tau = cfg["tau"] if cfg["tau"] is not None else percentile_threshold(scores, cfg["tau_percentile"])
    hr = high_risk_for_category(table, scores, args.category, float(tau), strict=args.strict)
    sys.stdout.write(json.dumps(hr.to_json(), indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- mask


def _collect_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
    if path.is_file():
        return [path]
    raise CliError(f"input not found: {path}", EXIT_CONFIG)


def _categories_for(inputs: list[Path], cfg: dict, root: Path) -> dict[Path, str]:
    if cfg["category"]:
        return {p: cfg["category"] for p in inputs}
    index_path = Path(cfg["index"]) if cfg["index"] else (root if root.is_dir() else root.parent) / "index.json"
    if not index_path.is_file():
        raise CliError("no --category given and no index.json next to the inputs", EXIT_CONFIG)
    index = json.loads(index_path.read_text(encoding="utf-8"))
    out = {}
    for p in inputs:
        entry = index.get(p.name)
        if entry is None:
            raise CliError(f"{p.name}: no category in {index_path}", EXIT_CONFIG)
        out[p] = entry["category"] if isinstance(entry, dict) else str(entry)
    return out


def _agent_set(cfg: dict) -> AgentSet:
    agents_file = load_agents_file(_require_file(cfg["agents"], "agent config"))
    live = bool(cfg["live"]) or agents_file.backend == "live"
    if live:
        missing = agents_file.missing_auth()
        if missing:
            raise AgentConfigError("auth token variable not set for " + ", ".join(missing))
        no_url = [r for r in ("detect", "segment", "orientation", "ocr", "vlm_text", "classify")
                  if not agents_file.config_for(r).base_url]
        if no_url:
            raise AgentConfigError("live backend needs base_url for " + ", ".join(no_url))
    return AgentSet.from_file(agents_file, live=live)


def _write_outputs(stem_path: Path, strategy: pl.MaskStrategy, masked, manifest: pl.Manifest, mask, source: Path):
    img_path = stem_path.with_name(f"{stem_path.name}.{strategy.suffix}.png")
    if not mask.any() and source.suffix.lower() == ".png":
        shutil.copyfile(source, img_path)
    else:
        pl.save_image(masked, img_path)
    stem_path.with_name(f"{stem_path.name}.{strategy.suffix}.json").write_text(manifest.dumps(), encoding="utf-8")
    timings = {k: round(v, 6) for k, v in manifest.timings.items()}
    stem_path.with_name(f"{stem_path.name}.{strategy.suffix}.timings.json").write_text(
        json.dumps(timings, indent=2) + "\n", encoding="utf-8"
    )


def cmd_mask(args) -> int:
    cfg = effective(args)
    jobs = cfg["jobs"] if cfg["jobs"] is not None else (os.cpu_count() or 1)
    if int(jobs) < 1:
        raise CliError("--jobs must be >= 1", EXIT_CONFIG)
    strategies = list(pl.MaskStrategy) if cfg["strategy"] == "all" else [pl.MaskStrategy(cfg["strategy"])]
    root = Path(args.input)
    inputs = _collect_inputs(root)
    if not inputs:
        raise CliError(f"no images under {root}", EXIT_CONFIG)
    categories = _categories_for(inputs, cfg, root)
    agents = _agent_set(cfg)
    table = load_table(_require_file(cfg["categories"], "category table"))
    graph_path = _require_file(cfg["graph"], "graph file")
    try:
        config = pl.PipelineConfig(
            candidate_angles=_parse_angles(cfg["angles"]),
            strategy=strategies[0],
            score=_score_config(cfg),
            tau=cfg["tau"],
            tau_percentile=float(cfg["tau_percentile"]),
            phi_correction=bool(cfg["phi_correction"]),
            strict_labeling=bool(cfg["strict_labeling"]),
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    with_text = any(s is not pl.MaskStrategy.OBJECT for s in strategies)
    risk = pl.prepare_risk(load_graph(graph_path), config) if with_text else None
    echo = {k: cfg[k] for k in ("graph", "categories", "agents", "algorithm", "channel", "damping", "tau",
                                "tau_percentile", "angles", "strategy", "live", "strict_labeling")}
    out_dir = Path(cfg["out"] or "figpriv-out")
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(path: Path) -> int:
        try:
            image = pl.load_image(path)
        except OSError as exc:
            log.error("%s: cannot read image (%s)", path, exc)
            return EXIT_DATA
        try:
            analysis = pl.analyze(image, categories[path], config, agents, table, risk,
                                  input_name=str(path), with_text=with_text, extra_config=echo)
        except pl.PipelineFailure as exc:
            log.error("%s: %s", path, exc)
            (out_dir / f"{path.stem}.failed.json").write_text(exc.manifest.dumps(), encoding="utf-8")
            return EXIT_TRANSPORT if exc.kind == "transport" else EXIT_DATA
        except TaxonomyError as exc:
            log.error("%s: %s", path, exc)
            return EXIT_DATA
        for s in strategies:
            masked, manifest, mask = pl.render(analysis, s)
            _write_outputs(out_dir / path.stem, s, masked, manifest, mask, path)
        return EXIT_OK

    codes: list[int | None] = [None] * len(inputs)
    with ThreadPoolExecutor(max_workers=int(jobs)) as pool:
        futures = [pool.submit(one, p) for p in inputs]
        for i, fut in enumerate(futures):
            codes[i] = fut.result()
            if codes[i] != EXIT_OK and not cfg["keep_going"]:
                for rest in futures[i + 1:]:
                    rest.cancel()
                break
    done = [c for c in codes if c is not None]
    failures = [c for c in done if c != EXIT_OK]
    log.info("%d of %d inputs succeeded", len(done) - len(failures), len(inputs))
    if not failures:
        return EXIT_OK
    if cfg["keep_going"] and len(failures) < len(done):
        return EXIT_OK
    return failures[0]


# ---------------------------------------------------------------- compare


def manifest_files(directory: Path) -> list[Path]:
    out = []
    for p in sorted(directory.glob("*.json")):
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(data, dict) and data.get("schema") == pl.MANIFEST_SCHEMA and data.get("status") == "ok":
            out.append(p)
    return out


def cmd_compare(args) -> int:
    directory = Path(args.directory)
    if not directory.is_dir():
        raise CliError(f"manifest directory not found: {directory}", EXIT_CONFIG)
    files = manifest_files(directory)
    by_image = percentages_from_manifests(files)
    if args.images:
        wanted = set(args.images)
        by_image = {k: v for k, v in by_image.items() if k in wanted or Path(k).stem in wanted}
    report = compare_strategies(by_image)
    csv_path, json_path = write_report(report, Path(args.out or directory))
    sys.stdout.write(json.dumps(report.to_json(), indent=2) + "\n")
    log.info("wrote %s and %s", csv_path, json_path)
    return EXIT_OK


# ---------------------------------------------------------------- validate


def cmd_validate(args) -> int:
    cfg = effective(args)
    rows: list[tuple[str, str, str]] = []
    graph = table = None
    try:
        graph = load_graph(_require_file(cfg["graph"], "graph file"))
        rows.append(("graph", "ok", f"{len(graph)} nodes, {len(graph.edges)} edges"))
    except (CliError, GraphError, OSError) as exc:
        rows.append(("graph", "error", str(exc)))
    try:
        table = load_table(_require_file(cfg["categories"], "category table"))
        rows.append(("categories", "ok", f"{len(table)} categories"))
    except (CliError, TaxonomyError, OSError) as exc:
        rows.append(("categories", "error", str(exc)))
    if graph is not None and table is not None:
        for cat in table:
            for node in cat.synonym_nodes:
                if node not in graph:
                    rows.append(("synonym", "warning", f"{cat.name}: {node!r} not in graph"))
            for pii in cat.pii_types:
                if pii not in graph:
                    rows.append(("pii", "warning", f"{cat.name}: {pii!r} not in graph (unscored)"))
    agents_file = None
    try:
        agents_file = load_agents_file(_require_file(cfg["agents"], "agent config"))
        rows.append(("agents", "ok", f"backend {agents_file.backend}"))
    except (CliError, AgentConfigError) as exc:
        rows.append(("agents", "error", str(exc)))
    fixtures = Path(args.fixtures) if args.fixtures else None
    if fixtures is None and agents_file is not None and agents_file.backend == "mock" and agents_file.fixtures:
        fixtures = Path(agents_file.fixtures).parent
    if fixtures is not None:
        rows.extend(_check_fixtures(fixtures, table))

    errors = [r for r in rows if r[1] == "error"]
    width = max(len(r[0]) for r in rows)
    for check, status, detail in rows:
        sys.stdout.write(f"{check:<{width}}  {status:<7}  {detail}\n")
    sys.stdout.write(f"{len(errors)} error(s), {sum(r[1] == 'warning' for r in rows)} warning(s)\n")
    return EXIT_DATA if errors else EXIT_OK


def _check_fixtures(directory: Path, table) -> list[tuple[str, str, str]]:
    rows = []
    index_path = directory / "index.json"
    if not index_path.is_file():
        return [("fixtures", "error", f"{index_path} missing")]
    try:
        index = json.loads(index_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        return [("fixtures", "error", f"{index_path}: {exc}")]
    for name, entry in sorted(index.items()):
        category = entry["category"] if isinstance(entry, dict) else entry
        if not (directory / name).is_file():
            rows.append(("fixtures", "error", f"{name} listed but missing"))
        if table is not None and category not in table:
            rows.append(("fixtures", "error", f"{name}: unknown category {category!r}"))
    for mock in sorted((directory / "mocks").glob("*.json")):
        try:
            json.loads(mock.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            rows.append(("fixtures", "error", f"{mock.name}: {exc}"))
    if not any(r[1] == "error" for r in rows):
        rows.append(("fixtures", "ok", f"{len(index)} images"))
    return rows


def cmd_fixtures(args) -> int:
    from .fixtures import build_fixtures

    index = build_fixtures(args.directory)
    sys.stdout.write(f"wrote {len(index)} fixtures to {args.directory}\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_resources(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults; flags override it")
    p.add_argument("--graph", help="ecosystem graph (JSON or CSV)")
    p.add_argument("--categories", help="category table JSON")


def _add_scoring(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--channel", choices=CHANNELS)
    p.add_argument("--damping", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--tau-percentile", type=float, dest="tau_percentile")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="figpriv", description="Risk-aware masking of private content in images.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    risk = sub.add_parser("risk", help="score the ecosystem graph")
    risk_sub = risk.add_subparsers(dest="risk_command", required=True)
    scores = risk_sub.add_parser("scores", help="print risk scores as JSON")
    _add_resources(scores)
    _add_scoring(scores)
    scores.add_argument("--out")
    high = risk_sub.add_parser("high-set", help="print the high-risk PII set of a category")
    _add_resources(high)
    _add_scoring(high)
    high.add_argument("--category", required=True)
    high.add_argument("--strict", action="store_true", help="count unscored PII types as high risk")

    mask = sub.add_parser("mask", help="mask an image or a directory of images")
    mask.add_argument("input")
    _add_resources(mask)
    _add_scoring(mask)
    mask.add_argument("--agents", help="agent config JSON (default: bundled mock fixtures)")
    mask.add_argument("--live", action="store_const", const=True, help="call the configured endpoints")
    mask.add_argument("--category", help="category for every input (else read index.json)")
    mask.add_argument("--index", help="JSON mapping image file names to categories")
    mask.add_argument("--angles", help="comma-separated candidate rotations in degrees")
    mask.add_argument("--strategy", choices=[s.value for s in pl.MaskStrategy] + ["all"])
    mask.add_argument("--jobs", type=int)
    mask.add_argument("--out")
    mask.add_argument("--keep-going", action="store_const", const=True, dest="keep_going")
    mask.add_argument("--strict-labeling", action=argparse.BooleanOptionalAction, dest="strict_labeling", default=None)
    mask.add_argument("--phi-correction", action=argparse.BooleanOptionalAction, dest="phi_correction", default=None)

    cmp_ = sub.add_parser("compare", help="summarize manifests by strategy")
    cmp_.add_argument("directory")
    cmp_.add_argument("--out")
    cmp_.add_argument("--images", nargs="+", help="restrict to these image names or stems")

    val = sub.add_parser("validate", help="check graph, category table, agent config and fixtures")
    _add_resources(val)
    val.add_argument("--agents")
    val.add_argument("--fixtures", help="fixture directory with index.json and mocks/")

    fx = sub.add_parser("fixtures", help="synthetic fixture corpus")
    fx_sub = fx.add_subparsers(dest="fixtures_command", required=True)
    fb = fx_sub.add_parser("build")
    fb.add_argument("directory")
    return parser


COMMANDS = {"risk": cmd_risk, "mask": cmd_mask, "compare": cmd_compare, "validate": cmd_validate, "fixtures": cmd_fixtures}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except AgentConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except AgentTransportError as exc:
        log.error("%s", exc)
        return EXIT_TRANSPORT
    except (GraphError, TaxonomyError, ReportError, AgentError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
