import json

import numpy as np
import pytest

from figpriv import geometry as geo
from figpriv import pipeline as pl
from figpriv.agents import AgentSet, MockBackend, TextDetection, encode_mask, image_key
from figpriv.geometry import BBox
from figpriv.risk_graph import load_graph
from figpriv.taxonomy import HighRiskSet

from conftest import DATA, backend_of
from oracles import pixel_count_inclusive

CONFIG = pl.PipelineConfig()


@pytest.fixture(scope="module")
def risk():
    return pl.prepare_risk(load_graph(DATA / "toy_ecosystem.json"), CONFIG)


def analyze_fixture(name, fixture_dir, fixture_index, agents, table, risk, **kw):
    meta = fixture_index[f"{name}.png"]
    img = pl.load_image(fixture_dir / f"{name}.png")
    return pl.analyze(img, meta["category"], kw.pop("config", CONFIG), agents, table, risk, input_name=f"{name}.png", **kw)


def scripted_judge(scores):
    it = iter(scores)
    return lambda image: next(it)


# -- orientation


def test_argmax_orientation():
    crop = np.random.default_rng(0).integers(0, 255, (6, 9, 3), dtype=np.uint8)
    theta, spec, rotated, probs = pl.select_orientation(crop, [0, 90, 180, 270], scripted_judge([0.2, 0.9, 0.1, 0.3]))
    assert theta == 90
    assert np.array_equal(rotated, np.rot90(crop))
    assert probs == {0: 0.2, 90: 0.9, 180: 0.1, 270: 0.3}


def test_orientation_tie_takes_first():
    crop = np.zeros((4, 4, 3), np.uint8)
    theta, *_ = pl.select_orientation(crop, [270, 0, 90], scripted_judge([0.5, 0.5, 0.5]))
    assert theta == 270


def test_singleton_skips_judge():
    crop = np.ones((4, 5, 3), np.uint8)

    def judge(image):
        raise AssertionError("judge must not be called")

    theta, spec, rotated, probs = pl.select_orientation(crop, [0], judge)
    assert theta == 0 and np.array_equal(rotated, crop) and probs == {}


def test_empty_angle_set_rejected():
    with pytest.raises(ValueError):
        pl.PipelineConfig(candidate_angles=())
    with pytest.raises(ValueError):
        pl.PipelineConfig(tau=float("inf"))


# -- text recognition


def text_agents(img, ocr=None, vlm=None):
    tables = {}
    if ocr is not None:
        tables["ocr"] = {image_key(img): ocr}
    if vlm is not None:
        tables["vlm_text"] = {image_key(img): vlm}
    return AgentSet.from_backend(MockBackend(fixtures=tables))


def test_blank_yields_nothing():
    blank = np.full((30, 40, 3), 255, np.uint8)
    rec = pl.recognize_text(blank, geo.rotation_spec(40, 30, 0), text_agents(blank))
    assert rec.detections == [] and rec.phi is None


def test_union_keeps_duplicates():
    img = np.random.default_rng(1).integers(0, 255, (50, 80, 3), dtype=np.uint8)
    ocr = {"detections": [{"text": "a", "polygon": [[1, 1], [20, 1], [20, 6], [1, 6]]},
                          {"text": "b", "polygon": [[1, 10], [20, 10], [20, 16], [1, 16]]}]}
    vlm = {"text": json.dumps([{"bbox_2d": [1, 1, 20, 6], "text_content": "a"},
                               {"bbox_2d": [1, 10, 20, 16], "text_content": "b"},
                               {"bbox_2d": [30, 30, 60, 40], "text_content": "c"}])}
    rec = pl.recognize_text(img, geo.rotation_spec(80, 50, 0), text_agents(img, ocr, vlm))
    assert len(rec.detections) == 5
    assert [d.source for d in rec.detections] == ["ocr"] * 2 + ["vlm"] * 3


def test_one_reader_failing_is_tolerated(caplog):
    img = np.random.default_rng(2).integers(0, 255, (20, 20, 3), dtype=np.uint8)
    vlm = {"text": json.dumps([{"bbox_2d": [1, 1, 5, 5], "text_content": "x"}])}
    rec = pl.recognize_text(img, geo.rotation_spec(20, 20, 0), text_agents(img, {"error": "transport"}, vlm))
    assert [d.text for d in rec.detections] == ["x"]
    assert rec.warnings and "ocr failed" in caplog.text


def test_both_readers_failing_raises():
    img = np.zeros((10, 10, 3), np.uint8)
    agents = text_agents(img, {"error": "transport"}, {"error": "transport"})
    with pytest.raises(pl.AgentTransportError):
        pl.recognize_text(img, geo.rotation_spec(10, 10, 0), agents)


def test_skewed_letter_phi(fixture_dir, fixture_index, mock_agents, table, risk):
    a = analyze_fixture("letter", fixture_dir, fixture_index, mock_agents, table, risk)
    assert a.manifest.theta_star == 180.0
    assert abs(a.manifest.phi - 10.0) <= 1.0
    assert {r.frame for r in a.records if r.source == "vlm"} == {"theta+phi"}
    assert {r.frame for r in a.records if r.source == "ocr"} == {"theta"}
    # the VLM saw the skew-corrected image, not the coarse-aligned one
    ocr_keys = [k for role, k in backend_of(mock_agents).calls if role == "ocr"]
    vlm_keys = [k for role, k in backend_of(mock_agents).calls if role == "vlm_text"]
    assert ocr_keys != vlm_keys


def test_phi_correction_off_uses_aligned_image(fixture_dir, fixture_index, mock_agents, table, risk):
    cfg = pl.PipelineConfig(phi_correction=False)
    a = analyze_fixture("letter", fixture_dir, fixture_index, mock_agents, table, risk, config=cfg)
    assert all(r.source == "ocr" for r in a.records)  # mock has no answer for the uncorrected image


# -- refinement


def test_identity_refinement():
    poly = np.array([[1.0, 2.0], [8.0, 2.0], [8.0, 6.0]])
    det = TextDetection("t", poly, "ocr", "theta")
    (out,) = pl.refine_detections([det], {"theta": [geo.rotation_spec(10, 10, 0)]})
    assert np.array_equal(out, poly)


def test_quarter_turn_refinement_matches_index_map():
    w, h, origin = 60, 100, (100, 0)
    spec = geo.rotation_spec(w, h, 90)
    # every pixel stores its own (row, col); np.rot90 carries the labels along
    rows, cols = np.mgrid[0:h, 0:w]
    turned_rows, turned_cols = np.rot90(rows), np.rot90(cols)
    box = BBox(5, 10, 99, 24)
    det = TextDetection("t", box, "vlm", "theta")
    (out,) = pl.refine_detections([det], {"theta": [spec]}, origin)
    for (xr, yr), (x, y) in zip(geo.bbox_to_polygon(box), out):
        assert (x, y) == (turned_cols[int(yr), int(xr)] + origin[0], turned_rows[int(yr), int(xr)] + origin[1])


def test_unknown_frame_tag():
    det = TextDetection("t", BBox(0, 0, 2, 2), "vlm", "nowhere")
    with pytest.raises(geo.GeometryError, match="unknown frame"):
        pl.refine_detections([det], {"theta": []})


# -- labeling


def labeler(tables):
    return AgentSet.from_backend(MockBackend(fixtures={"classify": tables})).classify


def dets(*texts):
    return [TextDetection(t, BBox(0, 0, 3, 3), "vlm") for t in texts]


def test_assign_risk_membership(table):
    hr = HighRiskSet("credit or debit card", frozenset({"name"}), 0.1, "x")
    lab = labeler({"jane": {"text": "name"}, "visa": {"text": "other"}, "12/29": {"text": "bank card expiration date"}})
    out = pl.assign_risk(dets("JANE", "VISA", "12/29"), None, "credit or debit card", hr, table, lab)
    assert [(o.sub_category, o.high_risk) for o in out] == [
        ("name", True), ("other", False), ("bank card expiration date", False)
    ]


def test_assign_risk_empty_category(table):
    hr = HighRiskSet("pregnancy test box", frozenset(), 0.0, "x")
    out = pl.assign_risk(dets("PREGNANCY", "name"), None, "pregnancy test box", hr, table, labeler({"name": {"text": "name"}}))
    assert all(not o.high_risk and o.sub_category == "other" for o in out)


def test_assign_risk_labeler_failure(table):
    hr = HighRiskSet("credit or debit card", frozenset({"name"}), 0.1, "x")
    lab = labeler({"jane": {"error": "transport"}})
    strict = pl.assign_risk(dets("JANE"), None, "credit or debit card", hr, table, lab, strict=True)
    loose = pl.assign_risk(dets("JANE"), None, "credit or debit card", hr, table, lab, strict=False)
    assert (strict[0].high_risk, strict[0].sub_category, strict[0].labeling_failed) == (True, None, True)
    assert (loose[0].high_risk, loose[0].sub_category) == (False, "other")


# -- masks


def test_strategy_masks():
    seg = np.zeros((20, 30), bool)
    seg[2:18, 2:28] = True
    a = geo.bbox_to_polygon(BBox(3, 3, 10, 6))
    b = geo.bbox_to_polygon(BBox(12, 8, 20, 12))
    assert np.array_equal(pl.build_strategy_mask("object", seg, [a, b], [a], (30, 20)), seg)
    fine = pl.build_strategy_mask("fine_grained", seg, [a, b], [a], (30, 20))
    high = pl.build_strategy_mask("high_risk", seg, [a, b], [a], (30, 20))
    assert fine.sum() == pixel_count_inclusive((3, 3, 10, 6)) + pixel_count_inclusive((12, 8, 20, 12))
    assert not (high & ~fine).any()
    assert not pl.build_strategy_mask("high_risk", seg, [a, b], [], (30, 20)).any()


# -- end to end


def test_credit_card_flags_number_and_name(fixture_dir, fixture_index, mock_agents, table, risk):
    a = analyze_fixture("credit_card", fixture_dir, fixture_index, mock_agents, table, risk)
    flagged = {r.text for r in a.records if r.high_risk}
    assert flagged == set(fixture_index["credit_card.png"]["high_risk_texts"])
    assert {r.sub_category for r in a.records if r.high_risk} == {"credit card number", "name"}
    _, manifest, _ = pl.render(a, "high_risk")
    members = set(manifest.high_risk_set["members"])
    for rec in manifest.to_json()["detections"]:
        if rec["high_risk"]:
            assert rec["sub_category"] in members


def test_credit_card_object_percentage(fixture_dir, fixture_index, mock_agents, table, risk):
    a = analyze_fixture("credit_card", fixture_dir, fixture_index, mock_agents, table, risk)
    _, manifest, mask = pl.render(a, "object")
    bbox = manifest.detection["bbox"]
    assert manifest.masked_percentage == 100.0 * pixel_count_inclusive(bbox) / (200 * 100)
    assert manifest.masked_percentage == 100.0 * mask.sum() / mask.size


def test_no_detection_uses_whole_image(fixture_dir, fixture_index, mock_agents, table, risk):
    a = analyze_fixture("business_card", fixture_dir, fixture_index, mock_agents, table, risk)
    assert a.manifest.detection is None
    assert a.manifest.crop_origin == (0, 0)
    kept = {r.text for r in a.records if not r.high_risk}
    assert kept == {"SENIOR ENGINEER", "ACME ROBOTICS"}


def test_object_strategy_never_reads_text(fixture_dir, fixture_index, table):
    agents = AgentSet.from_backend(MockBackend(fixture_dir / "mocks"))
    img = pl.load_image(fixture_dir / "credit_card.png")
    masked, manifest = pl.run_pipeline(img, "credit or debit card", pl.PipelineConfig(strategy="object"), agents, None, table)
    assert backend_of(agents).roles_called() == {"detect", "segment"}
    assert all(manifest.stages[s] == "skipped" for s in pl.TEXT_STAGES)
    assert manifest.detections == []


def test_empty_pii_category_is_noop(fixture_dir, fixture_index, mock_agents, table, risk):
    a = analyze_fixture("pregnancy_test_box", fixture_dir, fixture_index, mock_agents, table, risk)
    masked, manifest, mask = pl.render(a, "high_risk")
    assert not mask.any() and manifest.masked_percentage == 0.0
    assert np.array_equal(masked, a.image)
    assert a.manifest.theta_star == 90.0


def test_manifest_completeness(fixture_dir, fixture_index, mock_agents, table, risk):
    for name in ("credit_card", "letter", "business_card"):
        a = analyze_fixture(name, fixture_dir, fixture_index, mock_agents, table, risk)
        calls = backend_of(mock_agents).calls
        _, manifest, _ = pl.render(a, "fine_grained")
        doc = manifest.to_json()
        texts = sorted(r["text"] for r in doc["detections"])
        ocr = json.loads((fixture_dir / "mocks" / "ocr.json").read_text())
        vlm = json.loads((fixture_dir / "mocks" / "vlm_text.json").read_text())
        ocr_key = [k for role, k in calls if role == "ocr"][-1]
        vlm_key = [k for role, k in calls if role == "vlm_text"][-1]
        expected = [d["text"] for d in ocr[ocr_key]["detections"]]
        expected += [d["text_content"] for d in json.loads(vlm[vlm_key]["text"])]
        assert texts == sorted(expected)


def test_manifests_are_deterministic(fixture_dir, fixture_index, table, risk):
    def once():
        agents = AgentSet.from_backend(MockBackend(fixture_dir / "mocks"))
        out = []
        for name in fixture_index:
            a = analyze_fixture(name[:-4], fixture_dir, fixture_index, agents, table, risk)
            out += [pl.render(a, s)[1].dumps() for s in pl.MaskStrategy]
        return out

    assert once() == once()


def test_detect_transport_failure_is_recorded(table, risk):
    img = np.zeros((10, 10, 3), np.uint8)
    agents = AgentSet.from_backend(MockBackend(fixtures={"detect": {image_key(img): {"error": "transport"}}}))
    with pytest.raises(pl.PipelineFailure) as info:
        pl.analyze(img, "credit or debit card", CONFIG, agents, table, risk)
    assert info.value.kind == "transport"
    m = info.value.manifest
    assert m.status == "failed" and m.stages["detect"] == "failed" and m.errors[0]["stage"] == "detect"


def test_bad_segment_is_data_failure(table, risk):
    img = np.zeros((10, 10, 3), np.uint8)
    tables = {"segment": {image_key(img): {"mask": encode_mask(np.ones((3, 3), bool))}}}
    agents = AgentSet.from_backend(MockBackend(fixtures=tables))
    with pytest.raises(pl.PipelineFailure) as info:
        pl.analyze(img, "credit or debit card", CONFIG, agents, table, risk)
    assert info.value.kind == "data"


def test_unknown_category(table, risk, mock_agents):
    with pytest.raises(pl.PipelineFailure):
        pl.analyze(np.zeros((4, 4, 3), np.uint8), "spaceship", CONFIG, mock_agents, table, risk)


def test_subset_and_glyph_coverage_over_corpus(fixture_dir, fixture_index, mock_agents, table, risk):
    for name, meta in fixture_index.items():
        a = analyze_fixture(name[:-4], fixture_dir, fixture_index, mock_agents, table, risk)
        masks = {s: pl.render(a, s)[2] for s in pl.MaskStrategy}
        high, fine, obj = masks[pl.MaskStrategy.HIGH_RISK], masks[pl.MaskStrategy.FINE_GRAINED], masks[pl.MaskStrategy.OBJECT]
        assert not (high & ~fine).any(), name
        glyphs = (a.image == 0).all(axis=2)
        assert not (glyphs & ~fine).any(), name
        if meta["containment"]:
            assert not (fine & ~obj).any(), name


def test_optional_merge_drops_near_duplicates(fixture_dir, fixture_index, mock_agents, table, risk):
    cfg = pl.PipelineConfig(merge_iou=0.9)
    a = analyze_fixture("credit_card", fixture_dir, fixture_index, mock_agents, table, risk, config=cfg)
    assert [r.text for r in a.records].count("4111 1111 1111 1111") == 1


def test_load_image_flattens_alpha(tmp_path):
    from PIL import Image

    rgba = np.zeros((2, 2, 4), np.uint8)
    rgba[0, 0] = (10, 20, 30, 255)
    Image.fromarray(rgba, "RGBA").save(tmp_path / "a.png")
    arr = pl.load_image(tmp_path / "a.png")
    assert arr.shape == (2, 2, 3)
    assert tuple(arr[0, 0]) == (10, 20, 30) and tuple(arr[1, 1]) == (255, 255, 255)
