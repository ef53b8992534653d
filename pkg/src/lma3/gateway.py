"""Chat-completion gateway with a response cache and a scripted oracle backend.

Three backends sit behind :meth:`Gateway.complete`:

* ``remote``       POST to an OpenAI-compatible ``/chat/completions`` endpoint
* ``cache-replay`` serve only from the cache; a miss raises :class:`ReplayMiss`
* ``oracle``       answer from ground truth recovered by replaying the prompt's
                   trajectory in the deterministic world

All backends are cache-first.  The cache is an append-only JSONL file keyed by
a digest of (model, temperature, messages).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import httpx

from .oracle import GoalCompiler, default_compiler, describe_events
from .prompts import MAX_RELABELS
from .world import GroundEvent, KitchenWorld, default_world

log = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-3.5-turbo-0301"
REWARD_TEMPERATURE = 0.0
SAMPLING_TEMPERATURE = 0.9
DEFAULT_MAX_TOKENS = 1024
BACKENDS = ("remote", "cache-replay", "oracle")

ENV_ENDPOINT = "LMA3_ENDPOINT"
ENV_API_KEY = "LMA3_API_KEY"
ENV_BACKEND = "LMA3_BACKEND"
ENV_MODEL = "LMA3_MODEL"


class GatewayError(RuntimeError):
    pass


class TransportFailure(GatewayError):
    pass


class TruncatedResponse(GatewayError):
    pass


class ReplayMiss(GatewayError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = SAMPLING_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for role, _ in self.messages:
            if role not in ("system", "user", "assistant"):
                raise ValueError(f"bad message role {role!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")

    @classmethod
    def from_prompt(cls, prompt: str, model: str = DEFAULT_MODEL,
                    temperature: float = SAMPLING_TEMPERATURE,
                    max_tokens: int = DEFAULT_MAX_TOKENS) -> "ChatRequest":
        return cls(model, (("user", prompt),), temperature, max_tokens)

    @property
    def prompt(self) -> str:
        return self.messages[-1][1]

    def payload(self) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def key(self) -> str:
        blob = json.dumps(
            {"model": self.model, "temperature": float(self.temperature),
             "messages": [[r, c] for r, c in self.messages]},
            sort_keys=True, ensure_ascii=False, separators=(",", ":"),
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    content: str
    backend: str
    tokens: int
    truncated: bool = False


def estimate_tokens(text: str) -> int:
    return max(1, math.ceil(len(text) / 4))


# ---------------------------------------------------------------------- cache


class ResponseCache:
    """Append-only JSONL store; reads are lock-free, appends are serialized."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._data: dict[str, str] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        # a torn final line from a killed writer
                        continue
                    self._data.setdefault(rec["key"], rec["response"])

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: str) -> str | None:
        return self._data.get(key)

    def put(self, key: str, request: ChatRequest, response: str) -> None:
        with self._lock:
            if key in self._data:
                return
            rec = {"key": key, "request": request.payload(), "response": response,
                   "timestamp": time.time()}
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            self._data[key] = response


# --------------------------------------------------------------------- remote


class RemoteBackend:
    def __init__(self, endpoint: str, api_key: str | None = None, *, max_attempts: int = 5,
                 base_delay: float = 1.0, jitter: float = 0.2, timeout: float = 120.0,
                 sleep: Callable[[float], None] = time.sleep, client: httpx.Client | None = None,
                 rng: random.Random | None = None):
        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/chat/completions"):
            self.url += "/chat/completions"
        self.api_key = api_key
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.jitter = jitter
        self.sleep = sleep
        self.client = client or httpx.Client(timeout=timeout)
        self._rng = rng or random.Random()

    def backoff(self, attempt: int) -> float:
        return self.base_delay * 2**attempt * (1 + self._rng.uniform(-self.jitter, self.jitter))

    def send(self, req: ChatRequest) -> tuple[str, str | None, int | None]:
        """Returns (content, finish_reason, completion token count)."""
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                resp = self.client.post(self.url, json=req.payload(), headers=headers)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise TransportFailure(f"HTTP {resp.status_code}")
                if resp.status_code >= 400:
                    # client errors will not improve on retry
                    raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                body = resp.json()
                choice = body["choices"][0]
                content = choice["message"]["content"] or ""
                usage = body.get("usage") or {}
                return content, choice.get("finish_reason"), usage.get("completion_tokens")
            except (httpx.TransportError, TransportFailure, ValueError, KeyError) as exc:
                last_error = exc
                log.warning("remote attempt %d/%d failed: %s", attempt + 1, self.max_attempts, exc)
                if attempt + 1 < self.max_attempts:
                    self.sleep(self.backoff(attempt))
        raise TransportFailure(f"gave up after {self.max_attempts} attempts: {last_error}")


# --------------------------------------------------------------------- oracle

_ACTION_LINE = re.compile(r"^Action (\d+): (.*)$", re.MULTILINE)
_INSTRUCTION_LINE = re.compile(r"^#(\d+) (.*)$", re.MULTILINE)
_QUOTED = re.compile(r'"([^"]*)"')


def _seed_of(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()[:8], "big")


def oracle_complete(role: str, context: Mapping, compiler: GoalCompiler | None = None) -> ChatResponse:
    """Scripted stand-in for the three LM roles, driven by ground truth.

    context keys: ``events`` (relabel, reward), ``goals`` (reward),
    ``instructions`` (goalgen), ``seed`` (relabel subsampling, goalgen), ``cot``.
    """
    compiler = compiler or default_compiler()
    cot = bool(context.get("cot", False))
    rng = random.Random(context.get("seed", 0))
    lines: list[str] = []
    if role == "relabel":
        described = describe_events(context.get("events", ()), compiler)
        if len(described) > MAX_RELABELS:
            keep = set(rng.sample(range(len(described)), MAX_RELABELS))
            described = [d for i, d in enumerate(described) if i in keep]
        if cot:
            lines.append(f"The player achieved {len(described)} distinct things worth noting.")
            lines.append("Answer:")
        lines += [f"- {desc} (step {step})." for desc, step in described]
    elif role == "reward":
        events = context.get("events", ())
        for goal in context.get("goals", ()):
            pred = compiler.compile(goal)
            step = pred(events) if pred is not None else None
            head = f"- {goal.rstrip('.')}."
            if cot:
                if step is not None:
                    head += f" Reasoning: the goal is completed in step {step}."
                else:
                    head += " Reasoning: the trajectory never completes this goal."
            lines.append(f"{head} Answer: yes (step {step})." if step is not None else f"{head} Answer: no.")
    elif role == "goalgen":
        instructions = list(context.get("instructions", ()))
        if len(instructions) < 2:
            lines.append("goal: wait. instructions: none.")
        else:
            n = rng.choice([k for k in (2, 3, 4) if k <= len(instructions)])
            picks = rng.sample(range(1, len(instructions) + 1), n)
            main = ", then ".join(instructions[k - 1].rstrip(".") for k in picks)
            items = "; ".join(f"{instructions[k - 1]} (#{k})" for k in picks)
            if cot:
                lines.append(f"You could chain {n} instructions I already master.")
            lines.append(f"{'Answer: ' if cot else ''}goal: {main}. instructions: {items}.")
    else:
        raise ValueError(f"unknown role {role!r}")
    content = "\n".join(lines)
    return ChatResponse(content, "oracle", estimate_tokens(content))


class OracleBackend:
    """Answers rendered prompts by recovering their context from the prompt text."""

    def __init__(self, world: KitchenWorld | None = None, compiler: GoalCompiler | None = None):
        self.world = world or default_world()
        self.compiler = compiler or (default_compiler() if world is None else GoalCompiler(world))

    @staticmethod
    def detect_role(prompt: str) -> str:
        if prompt.startswith("Context: I am playing a video game"):
            return "goalgen"
        if prompt.startswith("Exercise: Given the description of a player's behavior in a video game and a list of goals"):
            return "reward"
        if prompt.startswith("Exercise: Given the description of a player's behavior"):
            return "relabel"
        raise ValueError("prompt does not match any known template")

    def _events(self, segment: str) -> list[GroundEvent]:
        actions = [m.group(2) for m in _ACTION_LINE.finditer(segment)]
        return self.world.rollout(actions).events

    def context_for(self, prompt: str) -> tuple[str, dict]:
        role = self.detect_role(prompt)
        seed = _seed_of(role, prompt)
        if role == "goalgen":
            traj_seg = prompt.split("\nExercise:", 1)[0]
            tail = prompt.rsplit("Example 3:", 1)[1]
            instructions = [m.group(2) for m in _INSTRUCTION_LINE.finditer(tail)]
            cot = prompt.rstrip().endswith("Reasoning:")
            return role, {"instructions": instructions, "seed": seed, "cot": cot,
                          "events": self._events(traj_seg)}
        tail = prompt.rsplit("Example 3:", 1)[1]
        if role == "relabel":
            return role, {"events": self._events(tail), "seed": seed,
                          "cot": prompt.rstrip().endswith("Reasoning:")}
        marker = "Here is the list of goals: "
        traj_seg, goal_seg = tail.rsplit(marker, 1)
        goal_seg = goal_seg.rsplit(". Let's ", 1)[0]
        goals = _QUOTED.findall(goal_seg)
        cot = "Let's think step by step and indicate steps of goal completion:" in tail
        return role, {"events": self._events(traj_seg), "goals": goals, "cot": cot, "seed": seed}

    def complete(self, req: ChatRequest) -> ChatResponse:
        role, ctx = self.context_for(req.prompt)
        return oracle_complete(role, ctx, self.compiler)


# -------------------------------------------------------------------- gateway


class Gateway:
    def __init__(self, backend: str = "oracle", *, cache: ResponseCache | None = None,
                 remote: RemoteBackend | None = None, oracle: OracleBackend | None = None,
                 model: str = DEFAULT_MODEL, max_in_flight: int = 4):
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
        if backend == "remote" and remote is None:
            raise ValueError("remote backend needs an endpoint")
        if backend == "cache-replay" and cache is None:
            raise ValueError("cache-replay backend needs a cache file")
        self.backend = backend
        self.cache = cache
        self.remote = remote
        self.oracle = oracle or (OracleBackend() if backend == "oracle" else None)
        self.model = model
        self._in_flight = threading.BoundedSemaphore(max_in_flight)
        self._stats_lock = threading.Lock()
        self.stats = {"remote": 0, "cache": 0, "oracle": 0}

    @classmethod
    def from_env(cls, backend: str | None = None, cache_path: str | Path | None = None,
                 model: str | None = None, env: Mapping[str, str] | None = None) -> "Gateway":
        env = os.environ if env is None else env
        backend = backend or env.get(ENV_BACKEND, "oracle")
        model = model or env.get(ENV_MODEL, DEFAULT_MODEL)
        cache = ResponseCache(cache_path) if cache_path else None
        remote = None
        if backend == "remote":
            endpoint = env.get(ENV_ENDPOINT, "https://api.openai.com/v1")
            key = env.get(ENV_API_KEY) or env.get("OPENAI_API_KEY")
            remote = RemoteBackend(endpoint, key)
        return cls(backend, cache=cache, remote=remote, model=model)

    def _count(self, tag: str) -> None:
        with self._stats_lock:
            self.stats[tag] += 1

    def request(self, prompt: str, temperature: float) -> ChatRequest:
        return ChatRequest.from_prompt(prompt, self.model, temperature)

    def complete(self, req: ChatRequest) -> ChatResponse:
        key = req.key()
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                self._count("cache")
                return ChatResponse(hit, "cache", estimate_tokens(hit))
        if self.backend == "cache-replay":
            raise ReplayMiss(f"no cached response for key {key[:12]}")
        if self.backend == "oracle":
            resp = self.oracle.complete(req)
        else:
            resp = self._complete_remote(req)
        if self.cache is not None:
            self.cache.put(key, req, resp.content)
        self._count(resp.backend)
        return resp

    def _complete_remote(self, req: ChatRequest) -> ChatResponse:
        with self._in_flight:
            content, finish, ntok = self.remote.send(req)
            if finish == "length":
                bigger = ChatRequest(req.model, req.messages, req.temperature, req.max_tokens * 2)
                content, finish, ntok = self.remote.send(bigger)
                if finish == "length":
                    raise TruncatedResponse(f"response still truncated at {bigger.max_tokens} tokens")
        return ChatResponse(content, "remote", ntok or estimate_tokens(content))

    def complete_prompt(self, prompt: str, temperature: float) -> ChatResponse:
        return self.complete(self.request(prompt, temperature))


def join_messages(messages: Sequence[tuple[str, str]]) -> str:
    return "\n".join(c for _, c in messages)
