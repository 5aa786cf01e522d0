from __future__ import annotations

import json
import os
import string
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

ROLES = ("detect", "segment", "orientation", "ocr", "vlm_text", "classify")
PROBE_ROLES = ("recognition", "answerability")
YES_NO_ROLES = ("orientation",) + PROBE_ROLES

DEFAULT_PROMPTS = {
    "detect": "Locate {object} in the image and output in JSON format.",
    "segment": "{object}",
    "orientation": "Is the text in this document readable (top down, left to right)? Answer yes or no",
    "ocr": "",
    "vlm_text": "Locate all text (bbox coordinates). Include all readable and blury text",
    "classify": (
        "Based on the image, classify this text: {text} using these categories: "
        "{categories}. Output only one category."
    ),
    "recognition": "Is there a {object} in the image? Answer yes or no",
    "answerability": (
        "Given this question: '{question}', based on the image, are you able to answer the question?"
    ),
}

PLACEHOLDERS = {
    "detect": {"object"},
    "segment": {"object"},
    "orientation": set(),
    "ocr": set(),
    "vlm_text": set(),
    "classify": {"text", "categories"},
    "recognition": {"object"},
    "answerability": {"question"},
}


class AgentError(Exception):
    pass


class AgentTransportError(AgentError):
    """The endpoint could not be reached or kept failing after retries."""


class AgentResponseError(AgentError, ValueError):
    """The endpoint answered, but the answer violates the role contract."""


class AgentConfigError(AgentError, ValueError):
    pass


def template_fields(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name is not None}


@dataclass(frozen=True)
class AgentEndpointConfig:
    role: str
    base_url: str = ""
    model_id: str = ""
    prompt_template: str | None = None
    timeout: float = 60.0
    max_retries: int = 2
    auth_token_env: str | None = None
    logprob_mode: bool | None = None  # defaults on for yes/no roles
    mode: str = "chat"  # "chat" or "dedicated"
    backoff: float = 1.0

    def __post_init__(self):
        if self.role not in ROLES + PROBE_ROLES:
            raise AgentConfigError(f"unknown agent role {self.role!r}")
        if self.prompt_template is None:
            object.__setattr__(self, "prompt_template", DEFAULT_PROMPTS[self.role])
        if self.logprob_mode is None:
            object.__setattr__(self, "logprob_mode", self.role in YES_NO_ROLES)
        if not self.timeout > 0:
            raise AgentConfigError(f"{self.role}: timeout must be positive")
        if self.max_retries < 0:
            raise AgentConfigError(f"{self.role}: max_retries must be >= 0")
        if self.mode not in ("chat", "dedicated"):
            raise AgentConfigError(f"{self.role}: mode must be 'chat' or 'dedicated'")
        unknown = template_fields(self.prompt_template) - PLACEHOLDERS[self.role]
        if unknown:
            raise AgentConfigError(f"{self.role}: unresolvable prompt placeholders {sorted(unknown)}")

    def render(self, **values) -> str:
        return self.prompt_template.format(**{k: values.get(k, "") for k in PLACEHOLDERS[self.role]})

    def token(self) -> str | None:
        if not self.auth_token_env:
            return None
        return os.environ.get(self.auth_token_env)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class AgentsFile:
    """Parsed agent configuration file."""

    backend: str = "mock"
    fixtures: str | None = None
    roles: dict[str, AgentEndpointConfig] = field(default_factory=dict)

    def config_for(self, role: str) -> AgentEndpointConfig:
        return self.roles.get(role) or AgentEndpointConfig(role=role)

    def missing_auth(self) -> list[str]:
        """Roles whose auth environment variable is named but unset."""
        out = []
        for role in ROLES:
            cfg = self.config_for(role)
            if cfg.auth_token_env and not cfg.token():
                out.append(f"{role}: ${cfg.auth_token_env}")
        return out


_CONFIG_KEYS = {f.name for f in fields(AgentEndpointConfig)} - {"role"}


def load_agents_file(path: str | Path) -> AgentsFile:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise AgentConfigError(f"{path}: cannot read agent config ({exc})") from None
    if not isinstance(data, dict):
        raise AgentConfigError(f"{path}: expected a JSON object")
    backend = data.get("backend", "mock")
    if backend not in ("mock", "live"):
        raise AgentConfigError(f"{path}: backend must be 'mock' or 'live'")
    fixtures = data.get("fixtures")
    if fixtures is not None:
        fixtures = str((path.parent / fixtures).resolve())
    roles_data = data.get("roles", {k: v for k, v in data.items() if k in ROLES + PROBE_ROLES})
    roles = {}
    for role, spec in roles_data.items():
        if not isinstance(spec, dict):
            raise AgentConfigError(f"{path}: role {role!r} must map to an object")
        extra = set(spec) - _CONFIG_KEYS
        if extra:
            raise AgentConfigError(f"{path}: role {role!r} has unknown keys {sorted(extra)}")
        roles[role] = AgentEndpointConfig(role=role, **spec)
    return AgentsFile(backend=backend, fixtures=fixtures, roles=roles)
