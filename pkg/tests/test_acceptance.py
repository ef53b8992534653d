"""Acceptance gate: one or more tests per criterion, named test_criterion_NN_*."""

from __future__ import annotations

import csv
import json
import math
import os
import random
import signal
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from lma3.agent import (
    BootstrapGoal,
    ExplorationConfig,
    GoalRegistry,
    RunConfig,
    SeedRun,
    execute_plan,
    read_archive,
    run,
    sample_rare,
)
from lma3.gateway import Gateway, ResponseCache
from lma3.metrics import StemDistribution, hill_number, stem_h_index
from lma3.oracle import RECIPE_GOAL, confusion_from_csv, eval_goals, evaluate_success, oracle_finetune, oracle_reward
from lma3.prompts import ALL_VARIANTS, parse_relabel_response
from lma3.world import default_world

from . import test_prompts as tp
from .test_world import random_actions
from .witnesses import RECIPE_WITNESS, witness

W = default_world()


# ------------------------------------------------------------------------- 1


def test_criterion_01_determinism_and_horizon():
    t0 = time.perf_counter()
    rng = random.Random(2024)
    scripts = [random_actions(rng, n=40, invalid_rate=0.15) for _ in range(1000)]
    first = [W.rollout(s).to_records() for s in scripts]
    second = [W.rollout(s).to_records() for s in scripts]
    elapsed = time.perf_counter() - t0
    assert json.dumps(first) == json.dumps(second)
    assert max(len(r) for r in first) <= 25
    assert all(len(W.rollout(s + ["move north"] * 30)) == 25 for s in scripts[:50])
    assert elapsed < 10, f"{elapsed:.1f}s"


# ------------------------------------------------------------------------- 2


def test_criterion_02_every_goal_satisfiable():
    t0 = time.perf_counter()
    goals = eval_goals()
    for g in goals:
        actions = witness(g.text)
        v = oracle_reward(g, W.rollout(actions).events)
        assert v.achieved and v.step == len(actions) <= 25, g.text
    recipe = W.rollout(RECIPE_WITNESS)
    assert "pick up the cilantro" in RECIPE_WITNESS and "pick up the parsley" in RECIPE_WITNESS
    assert oracle_reward(RECIPE_GOAL, recipe.events).step == len(RECIPE_WITNESS)
    assert time.perf_counter() - t0 < 5


# ------------------------------------------------------------------------- 3


@pytest.fixture(scope="module")
def oracle_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("c3")
    cfg = RunConfig(condition="lma3", episodes=2000, seeds=[1, 2, 3, 4, 5], backend="oracle", output_dir=str(out))
    t0 = time.perf_counter()
    arts = run(cfg)
    return cfg, arts, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_03_oracle_end_to_end(oracle_runs):
    cfg, arts, elapsed = oracle_runs
    t0 = time.perf_counter()
    goals = eval_goals()
    rates = []
    for seed in cfg.seeds:
        reg = arts.registries[seed]
        tuned = oracle_finetune(read_archive(cfg.seed_dir(seed)), reg, goals)
        pre = evaluate_success(reg, goals).success_rate
        post = evaluate_success(tuned, goals).success_rate
        print(f"seed {seed}: pre {pre:.3f} post {post:.3f}")
        assert pre <= post
        rates.append(post)
    total = elapsed + time.perf_counter() - t0
    print(f"mean post-finetune success {np.mean(rates):.3f}; {total:.0f}s")
    assert min(rates) >= 0.8
    assert total < 20 * 60


# ------------------------------------------------------------------------- 4


@pytest.mark.parametrize("variant", ALL_VARIANTS, ids=lambda v: v.template_name)
def test_criterion_04_prompt_fidelity(variant):
    tp.test_render_matches_golden(variant)
    tp.test_only_slots_vary(variant)


def test_criterion_04_reference_phrases():
    tp.test_relabel_examples_from_templates()
    tp.test_reward_examples_from_templates()
    tp.test_goalgen_examples_from_templates()


# ------------------------------------------------------------------------- 5


def test_criterion_05_parser_robustness():
    assert len(tp.FIXTURES) >= 30
    for path in tp.FIXTURES:
        tp.test_fixture_transcript(path)
    tp.test_reference_parse_examples()
    tp.test_fuzz_ten_thousand_strings()


# ------------------------------------------------------------------------- 6


def _random_counts(rng: np.random.Generator):
    k = int(rng.integers(1, 40))
    return {f"s{i}": int(c) for i, c in enumerate(rng.integers(1, 500, size=k))}


def _direct_hill(counts, q):
    n = sum(counts)
    if q == 1:
        return math.exp(-sum((c / n) * math.log(c / n) for c in counts))
    return sum((c / n) ** q for c in counts) ** (1 / (1 - q))


def _brute_h(counts):
    return max(h for h in range(len(counts) + 1) if sum(1 for c in counts if c >= h) >= h)


def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(7)
    qs = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0]
    for _ in range(1000):
        counts = _random_counts(rng)
        d = StemDistribution(counts)
        vals = [hill_number(d, q) for q in qs]
        for q, v in zip(qs, vals):
            ref = _direct_hill(list(counts.values()), q)
            assert abs(v - ref) <= 1e-9 * max(1.0, ref)
        assert all(a >= b - 1e-9 for a, b in zip(vals, vals[1:]))
        d1 = hill_number(d, 1)
        assert abs(hill_number(d, 1 + 1e-6) - d1) < 1e-3
        assert abs(hill_number(d, 1 - 1e-6) - d1) < 1e-3
    for _ in range(1000):
        counts = [int(c) for c in rng.integers(1, 60, size=int(rng.integers(0, 50)))]
        assert stem_h_index(counts) == _brute_h(counts)
    assert abs(hill_number({"cut": 2, "open": 1}, 1) - 1.8899) <= 1e-4


# ------------------------------------------------------------------------- 7


def test_criterion_07_truncation_frequency():
    reg = GoalRegistry()
    reg.offer("slice the parsley", witness("slice the parsley"), 1)
    rng = random.Random(77)
    cfg = ExplorationConfig(epsilon=0.2)
    n = 10_000
    hits = sum(execute_plan(W, BootstrapGoal("slice the parsley"), reg, rng, cfg)[1] for _ in range(n))
    print(f"truncation frequency {hits / n:.4f}")
    assert abs(hits / n - 0.2) <= 0.02


def test_criterion_07_rarity_sampler():
    counts = {"a": 1, "b": 3, "c": 0, "d": 10, "e": 2}
    actions = list(counts)
    w = np.array([1 / max(counts[a], 1) for a in actions])
    expected = w / w.sum()
    rng = random.Random(5)
    n = 100_000
    drawn = {a: 0 for a in actions}
    for _ in range(n):
        drawn[sample_rare(actions, counts, rng)] += 1
    observed = np.array([drawn[a] / n for a in actions])
    tv = 0.5 * np.abs(observed - expected).sum()
    print(f"rarity total variation {tv:.4f}")
    assert tv < 0.01


# ------------------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_08_schedule_conformance(tmp_path, oracle_runs):
    cache = tmp_path / "cache.jsonl"
    cfg = RunConfig(condition="lma3", episodes=4150, seeds=[11], output_dir=str(tmp_path), cache_path=str(cache))
    SeedRun(cfg, 11, Gateway("oracle", cache=ResponseCache(cache))).run()
    calls = [json.loads(l) for l in (cfg.seed_dir(11) / "calls.jsonl").read_text().splitlines()]
    goalgen = [c["episode"] for c in calls if c["role"] == "goalgen"]
    assert goalgen and min(goalgen) == 4001
    assert len(goalgen) == 150
    # the relabel cap holds in the logs of every run, and in every raw relabel answer
    logs = [cfg.seed_dir(11) / "calls.jsonl"]
    c3cfg = oracle_runs[0]
    logs += [c3cfg.seed_dir(s) / "calls.jsonl" for s in c3cfg.seeds]
    for path in logs:
        for line in path.read_text().splitlines():
            rec = json.loads(line)
            if rec["role"] == "relabel":
                assert rec["n_relabels"] <= 10
            if rec["role"] == "goalgen":
                assert rec["episode"] > 4000
    n_relabel = 0
    for line in cache.read_text().splitlines():
        rec = json.loads(line)
        prompt = rec["request"]["messages"][-1]["content"]
        if prompt.startswith("Exercise: Given the description of a player's behavior in a video game, list"):
            n_relabel += 1
            assert len(parse_relabel_response(rec["response"]).entries) <= 10
            assert sum(1 for l in rec["response"].splitlines() if l.startswith("- ")) <= 10
    assert n_relabel > 0


# ------------------------------------------------------------------------- 9


def _run_files(seed_dir: Path) -> dict[str, bytes]:
    names = ["registry.json", "trajectories.jsonl", "replay.jsonl", "calls.jsonl"]
    return {n: (seed_dir / n).read_bytes() for n in names}


def test_criterion_09_resume_in_process(tmp_path):
    common = dict(condition="lma3", episodes=300, bootstrap_episodes=150, snapshot_every=50)
    whole = RunConfig(output_dir=str(tmp_path / "whole"), **common)
    SeedRun(whole, 1, Gateway("oracle")).run()

    cut = RunConfig(output_dir=str(tmp_path / "cut"), **common)
    SeedRun(cut, 1, Gateway("oracle")).run(stop_after=175)
    with open(cut.seed_dir(1) / "trajectories.jsonl", "a") as fh:
        fh.write('{"episode": 176, "ste')  # torn write from the kill
    SeedRun(cut, 1, Gateway("oracle")).run()
    assert _run_files(cut.seed_dir(1)) == _run_files(whole.seed_dir(1))


@pytest.mark.slow
def test_criterion_09_resume_after_sigkill(tmp_path):
    args = ["--condition", "lma3", "--episodes", "600", "--seeds", "3", "--snapshot-every", "50",
            "--bootstrap-episodes", "300", "--progress-every", "0"]
    env = {**os.environ, "PYTHONHASHSEED": "0"}
    cli = [sys.executable, "-m", "lma3.cli"]
    subprocess.run(cli + ["run", "--output-dir", str(tmp_path / "whole")] + args, check=True, env=env)

    ckpt = tmp_path / "cut" / "lma3" / "seed_3" / "checkpoint.json"
    proc = subprocess.Popen(cli + ["run", "--output-dir", str(tmp_path / "cut")] + args, env=env)
    deadline = time.time() + 120
    while time.time() < deadline:
        if ckpt.exists() and json.loads(ckpt.read_text() or "{}").get("episode", 0) >= 150:
            break
        time.sleep(0.02)
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    killed_at = json.loads(ckpt.read_text())["episode"]
    subprocess.run(cli + ["run", "--output-dir", str(tmp_path / "cut")] + args, check=True, env=env)
    print(f"killed after checkpoint at episode {killed_at}")
    assert killed_at < 600
    assert (tmp_path / "cut/lma3/seed_3/registry.json").read_bytes() == \
        (tmp_path / "whole/lma3/seed_3/registry.json").read_bytes()


# ------------------------------------------------------------------------ 10


def test_criterion_10_confusion_tooling(tmp_path):
    rng = random.Random(10)
    ids = [f"traj{i:03d}" for i in range(100)]
    labels = [True] * 56 + [False] * 44
    verdicts = list(labels)
    for i in rng.sample(range(56), 5):
        verdicts[i] = False
    for i in rng.sample(range(56, 100), 5):
        verdicts[i] = True
    order = list(range(100))
    rng.shuffle(order)
    with open(tmp_path / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "label"])
        for i in order:
            w.writerow([ids[i], int(labels[i])])
    with open(tmp_path / "verdicts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        for i in reversed(order):
            w.writerow([ids[i], "yes" if verdicts[i] else "no"])
    cm = confusion_from_csv(tmp_path / "verdicts.csv", tmp_path / "labels.csv")
    assert cm.total == 100 and cm.tp + cm.fn == 56 and cm.fp + cm.tn == 44
    assert abs(cm.fp_rate - 0.1136) <= 1e-4
    assert abs(cm.fn_rate - 0.0893) <= 1e-4
