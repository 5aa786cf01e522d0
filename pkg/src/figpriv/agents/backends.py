"""Transports behind the agent roles.

Every backend answers ``request(role, config, image, prompt, text=None)`` with
the role's native response as a dict. Chat-style answers are normalized to
``{"text": str, "logprobs": {token: logprob} | None}``; dedicated endpoints
return their JSON body unchanged.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import threading
import time
from pathlib import Path

import httpx
import numpy as np
from PIL import Image

from .config import AgentConfigError, AgentEndpointConfig, AgentResponseError, AgentTransportError
from .parsing import normalize_label

log = logging.getLogger(__name__)


def image_key(image: np.ndarray) -> str:
    """Content hash of an image array (shape and pixel bytes)."""
    arr = np.ascontiguousarray(image, dtype=np.uint8)
    h = hashlib.sha256()
    h.update(("x".join(str(s) for s in arr.shape)).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def encode_png(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


# Answers used when a mock fixture has no entry for the requested key.
MOCK_DEFAULTS = {
    "detect": {"text": "no objects found"},
    "segment": {},
    "orientation": {"text": "no"},
    "ocr": {"detections": []},
    "vlm_text": {"text": "[]"},
    "classify": {"text": "other"},
    "recognition": {"text": "no"},
    "answerability": {"text": "no"},
}


class MockBackend:
    """Fixture-backed responses keyed by ``(role, content hash)``.

    Fixtures live in ``<directory>/<role>.json`` as a JSON object mapping a
    key to the role's native response. Image roles are keyed by
    :func:`image_key`; ``classify`` is keyed by the normalized text. A
    response of ``{"error": "transport"}`` simulates an endpoint failure.
    """

    name = "mock"

    def __init__(self, directory: str | Path | None = None, fixtures: dict | None = None):
        self.directory = Path(directory) if directory else None
        self._fixtures: dict[str, dict] = {}
        if self.directory is not None:
            for path in sorted(self.directory.glob("*.json")):
                try:
                    self._fixtures[path.stem] = json.loads(path.read_text(encoding="utf-8"))
                except json.JSONDecodeError as exc:
                    raise AgentConfigError(f"{path}: invalid fixture JSON ({exc})") from None
        for role, table in (fixtures or {}).items():
            self._fixtures.setdefault(role, {}).update(table)
        self._lock = threading.Lock()
        self.calls: list[tuple[str, str]] = []

    def key_for(self, role: str, image: np.ndarray | None, prompt: str, text: str | None) -> str:
        if role == "classify":
            return normalize_label(text or "")
        base = image_key(image) if image is not None else ""
        if role in ("recognition", "answerability"):
            return f"{base}|{prompt}"
        return base

    def request(self, role, config: AgentEndpointConfig, image, prompt, text=None) -> dict:
        key = self.key_for(role, image, prompt, text)
        with self._lock:
            self.calls.append((role, key))
        table = self._fixtures.get(role, {})
        if key in table:
            resp = table[key]
        else:
            log.debug("no %s fixture for key %s; using default", role, key[:16])
            resp = MOCK_DEFAULTS[role]
        if isinstance(resp, dict) and resp.get("error") == "transport":
            raise AgentTransportError(f"{role}: simulated transport failure")
        return json.loads(json.dumps(resp))

    def roles_called(self) -> set[str]:
        return {role for role, _ in self.calls}


class RemoteBackend:
    """HTTP client for chat-completions style and dedicated endpoints."""

    name = "live"

    def __init__(self, client: httpx.Client | None = None, sleep=time.sleep):
        self.client = client or httpx.Client()
        self.sleep = sleep

    def _payload(self, config: AgentEndpointConfig, image, prompt: str) -> dict:
        img64 = encode_png(image) if image is not None else None
        if config.mode == "dedicated":
            return {"model": config.model_id, "prompt": prompt, "image": img64}
        content = []
        if img64 is not None:
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{img64}"}})
        content.append({"type": "text", "text": prompt})
        payload = {
            "model": config.model_id,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0,
        }
        if config.logprob_mode:
            payload["logprobs"] = True
            payload["top_logprobs"] = 5
        return payload

    @staticmethod
    def _unpack_chat(data: dict) -> dict:
        try:
            choice = data["choices"][0]
            content = choice["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise AgentResponseError("chat response without choices[0].message.content") from None
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        logprobs = None
        tokens = ((choice.get("logprobs") or {}).get("content")) or []
        if tokens:
            first = tokens[0]
            tops = first.get("top_logprobs") or [first]
            logprobs = {}
            for t in tops:
                if "token" in t and "logprob" in t:
                    logprobs.setdefault(t["token"], float(t["logprob"]))
        return {"text": content or "", "logprobs": logprobs}

    def request(self, role, config: AgentEndpointConfig, image, prompt, text=None) -> dict:
        if not config.base_url:
            raise AgentConfigError(f"{role}: no base_url configured for live backend")
        headers = {"Content-Type": "application/json"}
        if config.auth_token_env:
            token = config.token()
            if not token:
                raise AgentConfigError(f"{role}: environment variable {config.auth_token_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        payload = self._payload(config, image, prompt)

        last = "no attempt made"
        for attempt in range(config.max_retries + 1):
            try:
                resp = self.client.post(config.base_url, json=payload, headers=headers, timeout=config.timeout)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                elif resp.status_code >= 400:
                    raise AgentTransportError(f"{role}: HTTP {resp.status_code} from {config.base_url}")
                else:
                    try:
                        data = resp.json()
                    except ValueError:
                        raise AgentResponseError(f"{role}: endpoint returned non-JSON body") from None
                    if config.mode == "dedicated":
                        return data if isinstance(data, dict) else {"result": data}
                    return self._unpack_chat(data)
            if attempt < config.max_retries:
                delay = config.backoff * (2**attempt)
                log.warning("%s: attempt %d failed (%s); retrying in %.1fs", role, attempt + 1, last, delay)
                self.sleep(delay)
        raise AgentTransportError(f"{role}: giving up after {config.max_retries + 1} attempts ({last})")
