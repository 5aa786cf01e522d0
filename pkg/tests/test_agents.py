import json
import logging
import math

import httpx
import numpy as np
import pytest

from figpriv.agents import (
    AgentConfigError,
    AgentEndpointConfig,
    AgentResponseError,
    AgentSet,
    AgentTransportError,
    MockBackend,
    RemoteBackend,
    classify_text,
    decode_mask,
    detect_object,
    encode_mask,
    image_key,
    judge_orientation,
    load_agents_file,
    ocr_text,
    parse_bbox_json,
    segment_object,
    vlm_text,
)
from figpriv.agents.parsing import normalize_label
from figpriv.geometry import BBox

WHITE = np.full((20, 30, 3), 255, np.uint8)


def page(seed=1, shape=(40, 60, 3)):
    return np.random.default_rng(seed).integers(0, 256, shape, dtype=np.uint8)


def agents_with(tables):
    return AgentSet.from_backend(MockBackend(fixtures=tables))


# -- parsing


def test_parse_fenced_json():
    (d,) = parse_bbox_json('```json\n[{"bbox_2d":[1,2,3,4]}]\n```')
    assert d.bbox == BBox(1, 2, 3, 4)


def test_parse_single_object_with_label():
    (d,) = parse_bbox_json('{"bbox":[0,0,5,5],"label":"card"}')
    assert d.bbox == BBox(0, 0, 5, 5) and d.label == "card"


def test_parse_refusal():
    assert parse_bbox_json("sorry, I cannot") == []
    assert parse_bbox_json("") == []


def test_parse_clamps_and_drops():
    out = parse_bbox_json('[{"bbox":[-5,-5,50,50]},{"bbox":[100,100,120,120]}]', image_size=(30, 20))
    assert [d.bbox for d in out] == [BBox(0, 0, 29, 19)]


def test_parse_json_embedded_in_prose():
    (d,) = parse_bbox_json('Here you go: [{"bbox_2d": [4, 3, 2, 1], "text_content": "hi"}] done')
    assert d.bbox == BBox(2, 1, 4, 3) and d.label == "hi"


def test_normalize_label():
    assert normalize_label("Name.") == "name"
    assert normalize_label('  "Credit  Card Number" ') == "credit card number"


# -- mock-backed roles


def test_detect_from_fixture():
    img = page()
    resp = {"text": json.dumps([{"bbox_2d": [10, 10, 50, 35], "label": "document"}])}
    got = detect_object(img, "letter", agents_with({"detect": {image_key(img): resp}}).detect)
    assert got.bbox == BBox(10, 10, 50, 35) and got.label == "document"


def test_detect_absent():
    assert detect_object(page(), "letter", agents_with({}).detect) is None


def test_segment_fallback_and_half():
    img = page()
    assert segment_object(img, "x", agents_with({}).segment).all()
    full = {"mask": encode_mask(np.ones((40, 60), bool))}
    assert segment_object(img, "x", agents_with({"segment": {image_key(img): full}}).segment).all()
    left = np.zeros((40, 60), bool)
    left[:, :30] = True
    half = {"mask": encode_mask(left)}
    assert segment_object(img, "x", agents_with({"segment": {image_key(img): half}}).segment).sum() == 30 * 40


def test_segment_size_mismatch():
    img = page()
    bad = {"mask": encode_mask(np.ones((5, 5), bool))}
    with pytest.raises(AgentResponseError):
        segment_object(img, "x", agents_with({"segment": {image_key(img): bad}}).segment)


def test_segment_polygons():
    img = page()
    resp = {"polygons": [[[0, 0], [9, 0], [9, 9], [0, 9]]]}
    assert segment_object(img, "x", agents_with({"segment": {image_key(img): resp}}).segment).sum() == 100


def test_mask_codec_round_trip():
    m = np.random.default_rng(4).random((13, 7)) > 0.5
    assert np.array_equal(decode_mask(encode_mask(m), 7, 13), m)


def test_judge_logprobs_and_text(caplog):
    up, flipped = page(1), page(2)
    tables = {
        "orientation": {
            image_key(up): {"text": "yes", "logprobs": {"yes": math.log(0.9), "no": math.log(0.1)}},
            image_key(flipped): {"text": "no", "logprobs": {"Yes": math.log(0.1), " no": math.log(0.9)}},
            image_key(WHITE): {"text": "maybe"},
        }
    }
    judge = agents_with(tables).orientation
    assert judge_orientation(up, judge) == pytest.approx(0.9)
    assert judge_orientation(flipped, judge) == pytest.approx(0.1)
    with caplog.at_level(logging.WARNING):
        assert judge_orientation(WHITE, judge) == 0.5
    assert "maybe" in caplog.text


def test_judge_text_mode():
    img = page()
    cfg = {"orientation": AgentEndpointConfig(role="orientation", logprob_mode=False)}
    agents = AgentSet.from_backend(MockBackend(fixtures={"orientation": {image_key(img): {"text": "Yes."}}}), cfg)
    assert judge_orientation(img, agents.orientation) == 1.0


def test_ocr_blank_and_malformed(caplog):
    img = page()
    resp = {
        "detections": [
            {"text": "ONE", "polygon": [[1, 1], [20, 1], [20, 8], [1, 8]]},
            {"text": "TWO", "polygon": [[1, 1], [20, 1]]},
            {"text": "FLAT", "polygon": [[1, 1], [2, 2], [3, 3]]},
        ]
    }
    agents = agents_with({"ocr": {image_key(img): resp}})
    assert ocr_text(WHITE, agents.ocr) == []
    with caplog.at_level(logging.WARNING):
        got = ocr_text(img, agents.ocr, frame="theta")
    assert [d.text for d in got] == ["ONE"]
    assert got[0].source == "ocr" and got[0].frame == "theta"
    assert "TWO" in caplog.text


def test_vlm_boxes():
    img = page()
    resp = {"text": json.dumps([{"bbox_2d": [1, 2, 10, 12], "text_content": "A"}, {"bbox": [0, 0, 1], "text": "bad"}])}
    got = vlm_text(img, agents_with({"vlm_text": {image_key(img): resp}}).vlm_text)
    assert len(got) == 1 and got[0].region == BBox(1, 2, 10, 12) and got[0].source == "vlm"
    assert got[0].polygon().tolist() == [[1, 2], [10, 2], [10, 12], [1, 12]]
    assert vlm_text(WHITE, agents_with({}).vlm_text) == []


def test_classify():
    allowed = ["credit card number", "name", "other"]
    tables = {"classify": {"4111 1111 1111 1111": {"text": "credit card number"}, "jane": {"text": "Name."},
                           "visa": {"text": "brand"}}}
    agent = agents_with(tables).classify
    assert classify_text(WHITE, "4111 1111 1111 1111", "credit or debit card", allowed, agent) == "credit card number"
    assert classify_text(WHITE, "JANE", "credit or debit card", allowed, agent) == "name"
    assert classify_text(WHITE, "VISA", "credit or debit card", allowed, agent) == "other"
    with pytest.raises(ValueError):
        classify_text(WHITE, "x", "c", [], agent)


def test_classify_prompt_lists_categories():
    backend = MockBackend()
    seen = {}
    original = backend.request

    def spy(role, config, image, prompt, text=None):
        seen["prompt"] = prompt
        return original(role, config, image, prompt, text=text)

    backend.request = spy
    classify_text(WHITE, "JANE", "c", ["name", "other"], AgentSet.from_backend(backend).classify)
    assert seen["prompt"] == (
        "Based on the image, classify this text: JANE using these categories: name, other. Output only one category."
    )


def test_mock_is_referentially_transparent():
    img = page()
    resp = {"text": json.dumps([{"bbox_2d": [1, 1, 5, 5]}])}
    backend = MockBackend(fixtures={"detect": {image_key(img): resp}})
    cfg = AgentEndpointConfig(role="detect")
    a = backend.request("detect", cfg, img, "p")
    b = backend.request("detect", cfg, img.copy(), "p")
    assert json.dumps(a) == json.dumps(b)
    a["text"] = "mutated"
    assert backend.request("detect", cfg, img, "p") == resp


def test_mock_simulated_transport_failure():
    img = page()
    agents = agents_with({"ocr": {image_key(img): {"error": "transport"}}})
    with pytest.raises(AgentTransportError):
        ocr_text(img, agents.ocr)


def test_mock_loads_directory(fixture_dir):
    backend = MockBackend(fixture_dir / "mocks")
    assert {"detect", "segment", "orientation", "ocr", "vlm_text", "classify"} <= set(backend._fixtures)


# -- config


def test_config_defaults_and_validation():
    cfg = AgentEndpointConfig(role="orientation")
    assert (cfg.timeout, cfg.max_retries, cfg.backoff, cfg.logprob_mode) == (60.0, 2, 1.0, True)
    assert AgentEndpointConfig(role="ocr").logprob_mode is False
    for bad in ({"timeout": 0}, {"max_retries": -1}, {"mode": "grpc"}, {"prompt_template": "{nope}"}):
        with pytest.raises(AgentConfigError):
            AgentEndpointConfig(role="detect", **bad)
    with pytest.raises(AgentConfigError):
        AgentEndpointConfig(role="painter")


def test_prompt_rendering():
    cfg = AgentEndpointConfig(role="detect")
    assert cfg.render(object="credit card") == "Locate credit card in the image and output in JSON format."
    assert AgentEndpointConfig(role="recognition").render(object="condom box") == (
        "Is there a condom box in the image? Answer yes or no"
    )


def test_load_agents_file(tmp_path):
    path = tmp_path / "agents.json"
    path.write_text(json.dumps({"backend": "live", "detect": {"base_url": "http://x", "model_id": "m", "auth_token_env": "TOK"}}))
    f = load_agents_file(path)
    assert f.backend == "live" and f.roles["detect"].model_id == "m"
    assert f.config_for("ocr").role == "ocr"
    path.write_text(json.dumps({"roles": {"detect": {"colour": "red"}}}))
    with pytest.raises(AgentConfigError, match="unknown keys"):
        load_agents_file(path)
    with pytest.raises(AgentConfigError):
        load_agents_file(tmp_path / "missing.json")


def test_missing_auth(monkeypatch, tmp_path):
    monkeypatch.delenv("FIGPRIV_TEST_TOKEN", raising=False)
    path = tmp_path / "agents.json"
    path.write_text(json.dumps({"roles": {"ocr": {"auth_token_env": "FIGPRIV_TEST_TOKEN"}}}))
    assert load_agents_file(path).missing_auth() == ["ocr: $FIGPRIV_TEST_TOKEN"]
    monkeypatch.setenv("FIGPRIV_TEST_TOKEN", "t")
    assert load_agents_file(path).missing_auth() == []


# -- remote backend


def remote(handler, sleeps):
    return RemoteBackend(client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=sleeps.append)


def chat(content, logprobs=None):
    choice = {"message": {"content": content}}
    if logprobs:
        choice["logprobs"] = {"content": [{"token": "x", "logprob": 0, "top_logprobs": logprobs}]}
    return {"choices": [choice]}


def test_remote_retries_then_succeeds():
    calls, sleeps = [], []

    def handler(request):
        calls.append(json.loads(request.content))
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json=chat("yes", [{"token": "yes", "logprob": -0.1}, {"token": "no", "logprob": -2.3}]))

    cfg = AgentEndpointConfig(role="orientation", base_url="http://judge", model_id="m")
    resp = remote(handler, sleeps).request("orientation", cfg, WHITE, "prompt")
    assert resp["text"] == "yes" and resp["logprobs"] == {"yes": -0.1, "no": -2.3}
    assert sleeps == [1.0, 2.0]
    assert calls[0]["logprobs"] is True and calls[0]["messages"][0]["content"][1]["text"] == "prompt"


def test_remote_gives_up_after_max_retries():
    calls, sleeps = [], []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectTimeout("timed out")

    cfg = AgentEndpointConfig(role="detect", base_url="http://det", max_retries=2)
    with pytest.raises(AgentTransportError, match="3 attempts"):
        remote(handler, sleeps).request("detect", cfg, WHITE, "p")
    assert len(calls) == 3
    assert sleeps == sorted(set(sleeps)) and len(sleeps) == 2


def test_remote_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401)

    cfg = AgentEndpointConfig(role="detect", base_url="http://det")
    with pytest.raises(AgentTransportError, match="401"):
        remote(handler, []).request("detect", cfg, WHITE, "p")
    assert len(calls) == 1


def test_remote_auth_checked_before_network(monkeypatch):
    monkeypatch.delenv("FIGPRIV_TEST_TOKEN", raising=False)
    calls = []
    cfg = AgentEndpointConfig(role="detect", base_url="http://det", auth_token_env="FIGPRIV_TEST_TOKEN")
    with pytest.raises(AgentConfigError):
        remote(lambda r: calls.append(1), []).request("detect", cfg, WHITE, "p")
    assert calls == []


def test_remote_sends_bearer_and_dedicated_mode(monkeypatch):
    monkeypatch.setenv("FIGPRIV_TEST_TOKEN", "secret")
    seen = {}

    def handler(request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=[{"text": "A", "polygon": [[0, 0], [3, 0], [3, 3]]}])

    cfg = AgentEndpointConfig(role="ocr", base_url="http://ocr", mode="dedicated", auth_token_env="FIGPRIV_TEST_TOKEN")
    resp = remote(handler, []).request("ocr", cfg, WHITE, "")
    assert seen["auth"] == "Bearer secret"
    assert set(seen["body"]) == {"model", "prompt", "image"}
    assert resp == {"result": [{"text": "A", "polygon": [[0, 0], [3, 0], [3, 3]]}]}


def test_remote_ocr_through_role_function():
    def handler(request):
        return httpx.Response(200, json={"detections": [{"text": "A", "polygon": [[0, 0], [5, 0], [5, 4], [0, 4]]}]})

    cfg = {"ocr": AgentEndpointConfig(role="ocr", base_url="http://ocr", mode="dedicated")}
    agents = AgentSet.from_backend(remote(handler, []), cfg)
    assert [d.text for d in ocr_text(WHITE, agents.ocr)] == ["A"]


def test_remote_bad_chat_shape():
    cfg = AgentEndpointConfig(role="detect", base_url="http://det")
    with pytest.raises(AgentResponseError):
        remote(lambda r: httpx.Response(200, json={"oops": 1}), []).request("detect", cfg, WHITE, "p")


def test_remote_requires_base_url():
    with pytest.raises(AgentConfigError):
        RemoteBackend(client=httpx.Client()).request("detect", AgentEndpointConfig(role="detect"), WHITE, "p")
