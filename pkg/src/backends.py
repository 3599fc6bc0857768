"""Agent backends: live HTTP chat-completion providers, scripted fixtures and
stochastic simulation agents, all behind the same ``invoke`` contract."""
import copy
import hashlib
import json
import os
import time
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Literal, Optional, Sequence, Union

import numpy as np
import requests
import structlog
from pydantic import Field, ValidationError, model_validator
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from src.core import (
    AnswerLetter,
    FrozenModel,
    LETTERS,
    MaybeAnswer,
    ModelId,
    StageRole,
    TaskItem,
    TokenUsage,
    format_answer,
)
from src.errors import (
    AuthenticationError,
    BackendError,
    BackendTimeout,
    ConfigError,
    FixtureMissError,
    RetryBudgetExhausted,
)

logger = structlog.get_logger(__name__)

RETRY_STATUSES = (429, 500, 502, 503, 504)
DEFAULT_TIMEOUT = 60.0


class AgentRequest(FrozenModel):
    prompt: str = Field(min_length=1)
    role: StageRole
    model: ModelId
    sampling: dict[str, Any] = Field(default_factory=dict)
    timeout: float = Field(default=DEFAULT_TIMEOUT, gt=0)
    # only the stochastic backend reads these two
    task: Optional[TaskItem] = None
    upstream_answer: MaybeAnswer = None


class AgentResponse(FrozenModel):
    raw_text: str
    usage: Optional[TokenUsage] = None
    latency: float = Field(default=0.0, ge=0)


class Backend(ABC):
    """Anything that turns an ``AgentRequest`` into an ``AgentResponse``."""

    name: str = "backend"

    @abstractmethod
    def invoke(self, request: AgentRequest) -> AgentResponse:
        ...


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


# --- HTTP --------------------------------------------------------------------


def _get_path(obj: Any, path: str) -> Any:
    for part in path.split("."):
        if isinstance(obj, list):
            obj = obj[int(part)]
        elif isinstance(obj, dict):
            obj = obj[part]
        else:
            raise KeyError(part)
    return obj


def _set_path(obj: Any, path: str, value: Any) -> None:
    *parents, last = path.split(".")
    for part in parents:
        obj = obj[int(part)] if isinstance(obj, list) else obj[part]
    if isinstance(obj, list):
        obj[int(last)] = value
    else:
        obj[last] = value


class HttpBackendSpec(FrozenModel):
    """Adapter settings for one chat-completion provider.

    ``body`` is the request template; the prompt is written at ``prompt_path``
    and the reply text and token counts are read from the ``*_path`` fields
    (dotted paths, integers index lists).
    """

    type: Literal["http"] = "http"
    url: str
    api_key_env: Optional[str] = None
    auth_header: str = "Authorization"
    auth_scheme: str = "Bearer"
    body: dict[str, Any] = Field(
        default_factory=lambda: {"messages": [{"role": "user", "content": ""}]}
    )
    prompt_path: str = "messages.0.content"
    text_path: str = "choices.0.message.content"
    prompt_tokens_path: Optional[str] = "usage.prompt_tokens"
    completion_tokens_path: Optional[str] = "usage.completion_tokens"
    sampling: dict[str, Any] = Field(default_factory=dict)
    timeout: float = Field(default=DEFAULT_TIMEOUT, gt=0)
    max_retries: int = Field(default=3, ge=0)
    backoff_factor: float = Field(default=1.0, ge=0)


class HttpBackend(Backend):
    def __init__(self, spec: HttpBackendSpec, name: str = "http", session: Optional[requests.Session] = None):
        self.spec = spec
        self.name = name
        self.session = session if session is not None else requests.Session()
        retry = Retry(
            total=spec.max_retries,
            backoff_factor=spec.backoff_factor,
            # a POST that timed out is never re-sent
            read=False,
            status_forcelist=RETRY_STATUSES,
            allowed_methods=frozenset({"POST"}),
            raise_on_status=True,
        )
        adapter = HTTPAdapter(max_retries=retry)
        self.session.mount("https://", adapter)
        self.session.mount("http://", adapter)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.spec.api_key_env:
            api_key = os.environ.get(self.spec.api_key_env)
            if not api_key:
                raise AuthenticationError(
                    f"{self.name}: environment variable {self.spec.api_key_env} is not set"
                )
            headers[self.spec.auth_header] = f"{self.spec.auth_scheme} {api_key}".strip()
        return headers

    def _body(self, request: AgentRequest) -> dict:
        body = copy.deepcopy(self.spec.body)
        try:
            _set_path(body, self.spec.prompt_path, request.prompt)
        except (KeyError, IndexError, ValueError, TypeError) as exc:
            raise ConfigError(f"{self.name}: prompt_path {self.spec.prompt_path!r} does not fit body") from exc
        body.update(self.spec.sampling)
        body.update(request.sampling)
        return body

    def _usage(self, payload: dict) -> Optional[TokenUsage]:
        if not self.spec.prompt_tokens_path or not self.spec.completion_tokens_path:
            return None
        try:
            return TokenUsage(
                prompt_tokens=_get_path(payload, self.spec.prompt_tokens_path),
                completion_tokens=_get_path(payload, self.spec.completion_tokens_path),
            )
        except (KeyError, IndexError, ValueError, TypeError):
            logger.warning("provider omitted token usage", backend=self.name)
            return None

    def invoke(self, request: AgentRequest) -> AgentResponse:
        headers = self._headers()
        body = self._body(request)
        start = time.perf_counter()
        try:
            resp = self.session.post(self.spec.url, json=body, headers=headers, timeout=request.timeout)
        except requests.exceptions.Timeout as exc:
            raise BackendTimeout(f"{self.name}: no response within {request.timeout}s") from exc
        except requests.exceptions.RetryError as exc:
            raise RetryBudgetExhausted(f"{self.name}: gave up after {self.spec.max_retries} retries") from exc
        except requests.exceptions.RequestException as exc:
            raise BackendError(f"{self.name}: request failed: {exc}") from exc

        if resp.status_code in (401, 403):
            raise AuthenticationError(f"{self.name}: provider rejected credentials (HTTP {resp.status_code})")
        if resp.status_code in RETRY_STATUSES:
            raise RetryBudgetExhausted(f"{self.name}: HTTP {resp.status_code} after {self.spec.max_retries} retries")
        if resp.status_code >= 400:
            raise BackendError(f"{self.name}: HTTP {resp.status_code}: {resp.text[:200]}")

        try:
            payload = resp.json()
            text = _get_path(payload, self.spec.text_path)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"{self.name}: response has no text at {self.spec.text_path!r}") from exc
        usage = self._usage(payload)
        latency = time.perf_counter() - start
        return AgentResponse(raw_text=text if isinstance(text, str) else str(text), usage=usage, latency=latency)


# --- Scripted fixtures -------------------------------------------------------


class ScriptedBackendSpec(FrozenModel):
    type: Literal["scripted"] = "scripted"
    fixtures: str


def load_fixtures(path: Union[str, Path]) -> dict[str, AgentResponse]:
    """Read ``{prompt_sha256, response_text, prompt_tokens, completion_tokens}`` lines."""
    fixtures = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                usage = None
                if row.get("prompt_tokens") is not None and row.get("completion_tokens") is not None:
                    usage = TokenUsage(
                        prompt_tokens=row["prompt_tokens"],
                        completion_tokens=row["completion_tokens"],
                    )
                fixtures[row["prompt_sha256"]] = AgentResponse(
                    raw_text=row["response_text"],
                    usage=usage,
                    latency=row.get("latency", 0.0),
                )
            except (json.JSONDecodeError, KeyError, ValidationError) as exc:
                raise ConfigError(f"{path}: line {line_no}: bad fixture: {exc}") from exc
    return fixtures


class ScriptedBackend(Backend):
    """Replays canned responses keyed by the SHA-256 of the prompt."""

    def __init__(self, fixtures: dict[str, AgentResponse], name: str = "scripted"):
        self.fixtures = dict(fixtures)
        self.name = name

    @classmethod
    def from_file(cls, path: Union[str, Path], name: str = "scripted") -> "ScriptedBackend":
        return cls(load_fixtures(path), name=name)

    def invoke(self, request: AgentRequest) -> AgentResponse:
        key = prompt_sha256(request.prompt)
        try:
            return self.fixtures[key]
        except KeyError:
            raise FixtureMissError(
                f"{self.name}: no fixture for {request.role.value} prompt {key[:12]}"
            ) from None


# --- Stochastic simulation ---------------------------------------------------

class RoleProfile(FrozenModel):
    base_correct: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    repair_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    harm_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    mean_prompt_tokens: float = Field(default=0.0, ge=0)
    mean_completion_tokens: float = Field(default=0.0, ge=0)
    mean_latency: float = Field(default=0.0, ge=0)


class StochasticAgentProfile(FrozenModel):
    """Per-role behaviour of one simulated model."""

    planner: Optional[RoleProfile] = None
    executor: Optional[RoleProfile] = None
    critic: Optional[RoleProfile] = None
    stream_id: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _planner_needs_base(self):
        if self.planner is not None and self.planner.base_correct is None:
            raise ValueError("a planner profile needs base_correct")
        return self

    def for_role(self, role: StageRole) -> RoleProfile:
        profile = getattr(self, role.value.lower())
        if profile is None:
            raise BackendError(f"stochastic profile has no {role.value} behaviour")
        return profile


class StochasticBackendSpec(StochasticAgentProfile):
    type: Literal["stochastic"] = "stochastic"
    seed: int = Field(default=0, ge=0)

    def profile(self) -> StochasticAgentProfile:
        return StochasticAgentProfile(
            planner=self.planner,
            executor=self.executor,
            critic=self.critic,
            stream_id=self.stream_id,
        )


def stage_rng(seed: int, stream_id: int, task_id: str, role: StageRole) -> np.random.Generator:
    """A generator that depends only on the seed, the task and the role."""
    task_key = int.from_bytes(hashlib.sha256(task_id.encode("utf-8")).digest()[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed, stream_id, task_key, role.position]))


def stochastic_step(
    profile: StochasticAgentProfile,
    role: StageRole,
    gold: AnswerLetter,
    upstream_answer: MaybeAnswer,
    rng: np.random.Generator,
    choices: Sequence[AnswerLetter] = LETTERS[:4],
) -> MaybeAnswer:
    """Draw one stage answer.

    Mid-stream roles only look at whether the upstream answer is correct: a
    correct one is kept unless harmed, a wrong one is repaired to gold or kept.
    """
    params = profile.for_role(role)
    wrong = [letter for letter in choices if letter != gold]
    u = rng.random()

    if role == StageRole.PLANNER:
        if upstream_answer is not None:
            raise BackendError("the planner has no upstream answer")
        if u < params.base_correct:
            return gold
        return wrong[int(rng.integers(len(wrong)))]

    if upstream_answer is not None and upstream_answer == gold:
        if u < params.harm_prob:
            return wrong[int(rng.integers(len(wrong)))]
        return gold
    if u < params.repair_prob:
        return gold
    return upstream_answer


class StochasticBackend(Backend):
    def __init__(self, profile: StochasticAgentProfile, seed: int = 0, name: str = "stochastic"):
        self.profile = profile
        self.seed = seed
        self.name = name

    def invoke(self, request: AgentRequest) -> AgentResponse:
        item = request.task
        if item is None:
            raise BackendError(f"{self.name}: stochastic agents need the task item")
        rng = stage_rng(self.seed, self.profile.stream_id, item.id, request.role)
        upstream = None if request.role == StageRole.PLANNER else request.upstream_answer
        answer = stochastic_step(self.profile, request.role, item.gold, upstream, rng, item.letters)

        params = self.profile.for_role(request.role)
        usage = TokenUsage(
            prompt_tokens=int(rng.poisson(params.mean_prompt_tokens)),
            completion_tokens=int(rng.poisson(params.mean_completion_tokens)),
        )
        latency = float(rng.exponential(params.mean_latency)) if params.mean_latency > 0 else 0.0
        if answer is None:
            text = f"Simulated {request.role.value.lower()} found no answer."
        else:
            text = f"Simulated {request.role.value.lower()} reasoning.\n{format_answer(answer)}"
        return AgentResponse(raw_text=text, usage=usage, latency=latency)


BackendSpec = Union[HttpBackendSpec, ScriptedBackendSpec, StochasticBackendSpec]


def build_backend(
    spec: BackendSpec,
    name: str,
    base_dir: Union[str, Path] = ".",
    seed: Optional[int] = None,
) -> Backend:
    """Instantiate a backend; ``seed`` overrides a stochastic spec's own seed."""
    if isinstance(spec, HttpBackendSpec):
        return HttpBackend(spec, name=name)
    if isinstance(spec, ScriptedBackendSpec):
        path = Path(spec.fixtures)
        if not path.is_absolute():
            path = Path(base_dir) / path
        return ScriptedBackend.from_file(path, name=name)
    if isinstance(spec, StochasticBackendSpec):
        return StochasticBackend(spec.profile(), seed=spec.seed if seed is None else seed, name=name)
    raise ConfigError(f"unknown backend type for {name!r}")
