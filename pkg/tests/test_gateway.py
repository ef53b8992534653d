from __future__ import annotations

import json
import random
import threading

import httpx
import pytest

from lma3.gateway import (
    ChatRequest,
    Gateway,
    GatewayError,
    OracleBackend,
    RemoteBackend,
    ReplayMiss,
    ResponseCache,
    TransportFailure,
    TruncatedResponse,
)
from lma3.prompts import (
    PromptVariant,
    parse_goalgen_response,
    parse_relabel_response,
    parse_reward_response,
    render_goalgen_prompt,
    render_relabel_prompt,
    render_reward_prompt,
)
from lma3.world import default_world

from .witnesses import RECIPE_WITNESS

W = default_world()


def _ok(content, finish="stop"):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}, "finish_reason": finish}],
                                     "usage": {"completion_tokens": 7}})


def remote(handler, **kw):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return RemoteBackend("http://lm.test/v1", "k", client=client, sleep=lambda s: None,
                         rng=random.Random(0), **kw)


def test_request_key_ignores_max_tokens():
    a = ChatRequest.from_prompt("hi", temperature=0.0, max_tokens=10)
    b = ChatRequest.from_prompt("hi", temperature=0.0, max_tokens=99)
    c = ChatRequest.from_prompt("hi", temperature=0.9)
    assert a.key() == b.key() != c.key()
    with pytest.raises(ValueError):
        ChatRequest("m", ())


def test_cache_roundtrip_and_torn_line(tmp_path):
    path = tmp_path / "cache.jsonl"
    cache = ResponseCache(path)
    req = ChatRequest.from_prompt("hello")
    cache.put(req.key(), req, "world")
    cache.put(req.key(), req, "ignored")
    with open(path, "a") as fh:
        fh.write('{"key": "torn')
    again = ResponseCache(path)
    assert again.get(req.key()) == "world" and len(again) == 1
    assert json.loads(path.read_text().splitlines()[0])["request"]["messages"][0]["content"] == "hello"


def test_cache_replay_miss_and_hit(tmp_path):
    path = tmp_path / "c.jsonl"
    gw = Gateway("cache-replay", cache=ResponseCache(path))
    with pytest.raises(ReplayMiss):
        gw.complete_prompt("anything", 0.0)
    req = gw.request("anything", 0.0)
    gw.cache.put(req.key(), req, "cached answer")
    resp = gw.complete_prompt("anything", 0.0)
    assert resp.content == "cached answer" and resp.backend == "cache"
    assert gw.stats == {"remote": 0, "cache": 1, "oracle": 0}


def test_oracle_backend_fills_cache_then_serves_from_it(tmp_path):
    traj = W.rollout(["move south", "open the fridge"])
    prompt = render_relabel_prompt(traj, PromptVariant("relabel", cot=True))
    gw = Gateway("oracle", cache=ResponseCache(tmp_path / "c.jsonl"))
    first = gw.complete_prompt(prompt, 0.9)
    second = gw.complete_prompt(prompt, 0.9)
    assert first.backend == "oracle" and second.backend == "cache"
    assert first.content == second.content
    replay = Gateway("cache-replay", cache=ResponseCache(tmp_path / "c.jsonl"))
    assert replay.complete_prompt(prompt, 0.9).content == first.content


def test_retry_on_429_and_5xx():
    calls = []

    def handler(request):
        calls.append(json.loads(request.content))
        if len(calls) == 1:
            return httpx.Response(429)
        if len(calls) == 2:
            return httpx.Response(503)
        return _ok("fine")

    backend = remote(handler)
    content, finish, ntok = backend.send(ChatRequest.from_prompt("p", temperature=0.0))
    assert (content, finish, ntok) == ("fine", "stop", 7)
    assert len(calls) == 3 and calls[0]["temperature"] == 0.0


def test_transport_error_exhausts_attempts():
    n = []

    def handler(request):
        n.append(1)
        raise httpx.ConnectError("down")

    with pytest.raises(TransportFailure):
        remote(handler, max_attempts=3).send(ChatRequest.from_prompt("p"))
    assert len(n) == 3


def test_client_error_is_not_retried():
    n = []

    def handler(request):
        n.append(1)
        return httpx.Response(401, text="bad key")

    with pytest.raises(GatewayError):
        remote(handler).send(ChatRequest.from_prompt("p"))
    assert len(n) == 1


def test_backoff_grows_with_jitter_bounds():
    b = RemoteBackend("http://x", client=httpx.Client(), rng=random.Random(1))
    for attempt in range(5):
        d = b.backoff(attempt)
        assert 0.8 * 2**attempt <= d <= 1.2 * 2**attempt


def test_truncation_retries_once_with_more_tokens():
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append(body["max_tokens"])
        return _ok("partial", "length") if len(seen) == 1 else _ok("complete")

    gw = Gateway("remote", remote=remote(handler))
    assert gw.complete_prompt("p", 0.9).content == "complete"
    assert seen == [1024, 2048]

    gw = Gateway("remote", remote=remote(lambda r: _ok("partial", "length")))
    with pytest.raises(TruncatedResponse):
        gw.complete_prompt("p", 0.9)


def test_in_flight_bound():
    lock = threading.Lock()
    active, peak = [0], [0]
    gate = threading.Event()

    def handler(request):
        with lock:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        gate.wait(0.05)
        with lock:
            active[0] -= 1
        return _ok("x")

    gw = Gateway("remote", remote=remote(handler), max_in_flight=2)
    threads = [threading.Thread(target=gw.complete_prompt, args=(f"p{i}", 0.9)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 2 and gw.stats["remote"] == 8


def test_from_env_reads_credentials():
    gw = Gateway.from_env(env={"LMA3_BACKEND": "remote", "LMA3_ENDPOINT": "http://lm.test/v1",
                               "LMA3_API_KEY": "secret", "LMA3_MODEL": "m1"})
    assert gw.backend == "remote" and gw.model == "m1"
    assert gw.remote.url == "http://lm.test/v1/chat/completions" and gw.remote.api_key == "secret"
    with pytest.raises(ValueError):
        Gateway("cache-replay")


# ----------------------------------------------------------- oracle backend


def test_oracle_relabel_answer_parses_to_ground_truth():
    actions = ["move south", "open the kitchen cupboard", "pick up the red potato", "open the cutlery drawer",
               "pick up the knife", "move north", "slice the red potato"]
    traj = W.rollout(actions)
    gw = Gateway("oracle")
    for v in (PromptVariant("relabel", cot=False), PromptVariant("relabel", cot=True),
              PromptVariant("relabel", cot=True, human_tips=True)):
        text = gw.complete_prompt(render_relabel_prompt(traj, v), 0.9).content
        entries = dict(parse_relabel_response(text).entries)
        assert entries["slice the red potato"] == 7
        assert entries["pick up the knife"] == 5


def test_oracle_relabel_respects_cap():
    traj = W.rollout(RECIPE_WITNESS + ["move north", "move south"] * 5)
    text = Gateway("oracle").complete_prompt(render_relabel_prompt(traj, PromptVariant("relabel")), 0.9).content
    assert len([l for l in text.splitlines() if l.startswith("- ")]) == 10


def test_oracle_reward_answers():
    traj = W.rollout(["move south", "open the fridge", "pick up the parsley"])
    goals = ["pick up the parsley", "eat the parsley", "open the fridge"]
    for cot in (False, True):
        text = Gateway("oracle").complete_prompt(render_reward_prompt(traj, goals, cot), 0.0).content
        verdicts = parse_reward_response(text, goals)
        assert [(v.achieved, v.step) for v in verdicts] == [(True, 3), (False, None), (True, 2)]


def test_oracle_goalgen_is_deterministic_and_valid():
    traj = W.rollout(["move south"])
    instructions = [f"open the {x}" for x in ("fridge", "dishwasher", "trash can", "kitchen cupboard")]
    prompt = render_goalgen_prompt(traj, instructions, cot=True)
    a = OracleBackend().complete(ChatRequest.from_prompt(prompt))
    b = OracleBackend().complete(ChatRequest.from_prompt(prompt))
    assert a == b
    plan = parse_goalgen_response(a.content, instructions)
    assert 2 <= len(plan.subgoals) <= 4
    assert set(plan.subgoals) <= set(instructions)


def test_oracle_rejects_unknown_prompt():
    with pytest.raises(ValueError):
        OracleBackend().complete(ChatRequest.from_prompt("What is the capital of France?"))
