"""The autotelic episode loop: pick a plan, act, relabel, verify, remember.

Skill learning is a memory of action sequences: for every verified goal the
registry keeps the shortest prefix of actions that achieved it.  Plans chain
stored sequences, optionally truncate the last one, and fill the rest of the
horizon with rarity-weighted random actions.
"""

from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .gateway import REWARD_TEMPERATURE, SAMPLING_TEMPERATURE, Gateway
from .oracle import EVAL_GOAL_TEXTS, eval_goals, oracle_relabel, oracle_reward
from .prompts import (
    MAX_INSTRUCTIONS,
    MAX_RELABELS,
    EpisodePlan,
    PlanUnparsable,
    PromptVariant,
    RewardVerdict,
    canonical_goal,
    parse_goalgen_response,
    parse_relabel_response,
    parse_reward_response,
    render_goalgen_prompt,
    render_relabel_prompt,
    render_reward_prompt,
)
from .world import KitchenWorld, Trajectory, Transition, default_world

log = logging.getLogger(__name__)

SNAPSHOT_EVERY = 100


# ------------------------------------------------------------------ registry


@dataclass
class GoalEntry:
    sequence: list[str]
    first_episode: int
    achieved_count: int = 0


class GoalRegistry:
    """Canonical goal text -> shortest known action sequence, plus action counts."""

    def __init__(self):
        self.goals: dict[str, GoalEntry] = {}
        self.action_counts: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.goals)

    def __contains__(self, goal: str) -> bool:
        return canonical_goal(goal) in self.goals

    def keys(self) -> list[str]:
        return list(self.goals)

    def sequence(self, goal: str) -> list[str] | None:
        entry = self.goals.get(canonical_goal(goal))
        return None if entry is None else list(entry.sequence)

    def offer(self, goal: str, actions: Sequence[str], episode: int, count: bool = True) -> bool:
        """Insert or shorten; returns True when the stored sequence changed."""
        key = canonical_goal(goal)
        if not key:
            return False
        entry = self.goals.get(key)
        changed = False
        if entry is None:
            entry = self.goals[key] = GoalEntry(list(actions), episode, 0)
            changed = True
        elif len(actions) < len(entry.sequence):
            entry.sequence = list(actions)
            changed = True
        if count:
            entry.achieved_count += 1
        return changed

    def mark_achieved(self, goal: str) -> None:
        entry = self.goals.get(canonical_goal(goal))
        if entry is not None:
            entry.achieved_count += 1

    def count_action(self, action: str) -> None:
        self.action_counts[action] = self.action_counts.get(action, 0) + 1

    def copy(self) -> "GoalRegistry":
        return GoalRegistry.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "goals": {g: asdict(e) for g, e in self.goals.items()},
            "action_counts": dict(self.action_counts),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GoalRegistry":
        reg = cls()
        for g, e in d.get("goals", {}).items():
            reg.goals[g] = GoalEntry(list(e["sequence"]), int(e["first_episode"]), int(e["achieved_count"]))
        reg.action_counts = {a: int(n) for a, n in d.get("action_counts", {}).items()}
        return reg

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        _atomic_write(Path(path), self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "GoalRegistry":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


# --------------------------------------------------------------------- plans


@dataclass(frozen=True)
class ExplorationConfig:
    epsilon: float = 0.2
    bootstrap_episodes: int = 4000
    max_relabels: int = MAX_RELABELS
    max_instructions: int = MAX_INSTRUCTIONS

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")


@dataclass(frozen=True)
class RandomPolicy:
    pass


@dataclass(frozen=True)
class BootstrapGoal:
    goal: str


Plan = RandomPolicy | BootstrapGoal | EpisodePlan


def plan_to_dict(plan: Plan) -> dict:
    if isinstance(plan, RandomPolicy):
        return {"type": "random"}
    if isinstance(plan, BootstrapGoal):
        return {"type": "bootstrap", "goal": plan.goal}
    return {"type": "generated", "main_goal": plan.main_goal,
            "subgoals": list(plan.subgoals), "indices": list(plan.indices)}


def plan_from_dict(d: Mapping) -> Plan:
    if d["type"] == "random":
        return RandomPolicy()
    if d["type"] == "bootstrap":
        return BootstrapGoal(d["goal"])
    return EpisodePlan(d["main_goal"], tuple(d["subgoals"]), tuple(d["indices"]))


@dataclass(frozen=True)
class Condition:
    cot: bool
    human_tips: bool
    use_goal_generator: bool
    oracle_judges: bool


CONDITIONS: dict[str, Condition] = {
    "lma3": Condition(cot=True, human_tips=True, use_goal_generator=True, oracle_judges=False),
    "no_tips": Condition(cot=True, human_tips=False, use_goal_generator=True, oracle_judges=False),
    "no_goalgen_no_tips": Condition(cot=True, human_tips=False, use_goal_generator=False, oracle_judges=False),
    "no_cot_no_tips": Condition(cot=False, human_tips=False, use_goal_generator=True, oracle_judges=False),
    "oracle_baseline": Condition(cot=False, human_tips=False, use_goal_generator=False, oracle_judges=True),
}


@dataclass
class CallLog:
    """Per-seed audit of LM calls (role, episode, backend, sizes)."""

    records: list[dict] = field(default_factory=list)
    sink: Callable[[dict], None] | None = None

    def add(self, **rec) -> None:
        self.records.append(rec)
        if self.sink is not None:
            self.sink(rec)


def _goal_pool(registry: GoalRegistry, restrict: frozenset[str] | None) -> list[str]:
    keys = registry.keys()
    if restrict is not None:
        keys = [k for k in keys if k in restrict]
    return keys


def select_plan(episode: int, registry: GoalRegistry, last_traj: Trajectory | None,
                gateway: Gateway | None, condition: Condition, rng: random.Random,
                config: ExplorationConfig = ExplorationConfig(),
                calls: CallLog | None = None, restrict: frozenset[str] | None = None) -> Plan:
    if episode < 1:
        raise ValueError("episodes are numbered from 1")
    if episode == 1:
        return RandomPolicy()
    pool = _goal_pool(registry, restrict)
    if not pool:
        return RandomPolicy()
    if episode <= config.bootstrap_episodes or not condition.use_goal_generator or gateway is None:
        return BootstrapGoal(rng.choice(pool))
    instructions = rng.sample(pool, min(config.max_instructions, len(pool)))
    prompt = render_goalgen_prompt(last_traj or Trajectory(), instructions, cot=condition.cot)
    resp = gateway.complete_prompt(prompt, SAMPLING_TEMPERATURE)
    try:
        plan = parse_goalgen_response(resp.content, instructions)
        ok = True
    except PlanUnparsable:
        plan, ok = BootstrapGoal(rng.choice(pool)), False
    if calls is not None:
        calls.add(episode=episode, role="goalgen", backend=resp.backend, tokens=resp.tokens,
                  n_instructions=len(instructions), parsed=ok)
    return plan


# ----------------------------------------------------------------- execution


def rarity_weights(actions: Sequence[str], counts: Mapping[str, int]) -> list[float]:
    return [1.0 / max(counts.get(a, 0), 1) for a in actions]


def sample_rare(actions: Sequence[str], counts: Mapping[str, int], rng: random.Random) -> str:
    return rng.choices(actions, weights=rarity_weights(actions, counts), k=1)[0]


def scripted_actions(plan: Plan, registry: GoalRegistry, rng: random.Random,
                     config: ExplorationConfig) -> tuple[list[str], bool]:
    """Chained stored sequences for ``plan`` and whether the last one was truncated."""
    if isinstance(plan, RandomPolicy):
        seqs = []
    elif isinstance(plan, BootstrapGoal):
        seqs = [registry.sequence(plan.goal) or []]
    else:
        seqs = [registry.sequence(g) or [] for g in plan.subgoals]
    truncated = False
    if seqs and rng.random() < config.epsilon:
        last = seqs[-1]
        seqs[-1] = last[: rng.randrange(len(last))] if last else []
        truncated = True
    return [a for s in seqs for a in s], truncated


def execute_plan(world: KitchenWorld, plan: Plan, registry: GoalRegistry, rng: random.Random,
                 config: ExplorationConfig = ExplorationConfig()) -> tuple[Trajectory, bool]:
    script, truncated = scripted_actions(plan, registry, rng, config)
    state = world.reset()
    traj = Trajectory(world.render_room(state))
    queue = iter(script)
    while state.step < world.horizon:
        action = next(queue, None)
        if action is None:
            action = sample_rare(world.admissible_actions(state), registry.action_counts, rng)
        state, obs, events = world.step(state, action)
        registry.count_action(action)
        traj.transitions.append(Transition(state.step, action, obs, tuple(events)))
    return traj, truncated


# ---------------------------------------------------------------- processing


@dataclass(frozen=True)
class ReplayRecord:
    goal: str
    episode: int
    source: str
    actions: tuple[str, ...]
    rewards: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"goal": self.goal, "episode": self.episode, "source": self.source,
                "actions": list(self.actions), "rewards": list(self.rewards)}


@dataclass
class EpisodeOutcome:
    episode: int
    candidates: list[tuple[str, int]]
    verdicts: list[RewardVerdict]
    records: list[ReplayRecord]
    new_goals: list[str]


def judge_goals(gateway: Gateway, traj: Trajectory, goals: Sequence[str], cot: bool,
                calls: CallLog | None = None, episode: int | None = None) -> list[RewardVerdict]:
    prompt = render_reward_prompt(traj, goals, cot=cot)
    resp = gateway.complete_prompt(prompt, REWARD_TEMPERATURE)
    if calls is not None:
        calls.add(episode=episode, role="reward", backend=resp.backend, tokens=resp.tokens,
                  n_goals=len(goals))
    return parse_reward_response(resp.content, goals)


def relabel(gateway: Gateway, traj: Trajectory, variant: PromptVariant,
            calls: CallLog | None = None, episode: int | None = None) -> list[tuple[str, int]]:
    prompt = render_relabel_prompt(traj, variant)
    resp = gateway.complete_prompt(prompt, SAMPLING_TEMPERATURE)
    text = resp.content
    # the plain prompt ends with "Answer:\n-", so the first item arrives without its dash
    if not variant.cot and not text.lstrip().startswith("-"):
        text = "-" + text
    result = parse_relabel_response(text, max_step=len(traj))
    if calls is not None:
        calls.add(episode=episode, role="relabel", backend=resp.backend, tokens=resp.tokens,
                  n_relabels=len(result))
    return list(result.entries)


def process_episode(traj: Trajectory, plan: Plan, episode: int, gateway: Gateway | None,
                    condition: Condition, registry: GoalRegistry,
                    buffer: list[ReplayRecord] | None = None, calls: CallLog | None = None,
                    eval_set=None) -> EpisodeOutcome:
    if condition.oracle_judges:
        eval_set = eval_set if eval_set is not None else eval_goals()
        candidates = list(oracle_relabel(traj.events, eval_set).entries)
    else:
        variant = PromptVariant("relabel", cot=condition.cot, human_tips=condition.human_tips)
        candidates = relabel(gateway, traj, variant, calls, episode)

    goals: list[str] = []
    sources: list[str] = []
    seen: set[str] = set()

    def add(goal: str, source: str) -> None:
        key = canonical_goal(goal)
        if not key:
            return
        if key in seen:
            # a relabeled subgoal gets the full registry update
            i = goals.index(key)
            if sources[i] == "subgoal" and source == "relabel":
                sources[i] = source
            return
        seen.add(key)
        goals.append(key)
        sources.append(source)

    if isinstance(plan, BootstrapGoal):
        add(plan.goal, "main-goal")
    elif isinstance(plan, EpisodePlan):
        add(plan.main_goal, "main-goal")
        for g in plan.subgoals:
            add(g, "subgoal")
    for g, _ in candidates:
        add(g, "relabel")

    if not goals:
        verdicts = []
    elif condition.oracle_judges:
        verdicts = [oracle_reward(g, traj.events) for g in goals]
    else:
        verdicts = judge_goals(gateway, traj, goals, condition.cot, calls, episode)

    actions = traj.actions
    records: list[ReplayRecord] = []
    new_goals: list[str] = []
    for goal, source, v in zip(goals, sources, verdicts):
        if not v.achieved or v.step is None or not 1 <= v.step <= len(traj):
            continue
        prefix = actions[: v.step]
        rec = ReplayRecord(goal, episode, source, tuple(prefix), tuple([0] * (v.step - 1) + [1]))
        records.append(rec)
        if source == "subgoal":
            registry.mark_achieved(goal)
            continue
        fresh = goal not in registry.goals
        registry.offer(goal, prefix, episode)
        if fresh:
            new_goals.append(goal)
    if buffer is not None:
        buffer.extend(records)
    return EpisodeOutcome(episode, candidates, verdicts, records, new_goals)


# ----------------------------------------------------------------------- runs


@dataclass
class RunConfig:
    condition: str = "lma3"
    episodes: int = 100
    seeds: list[int] = field(default_factory=lambda: [1])
    backend: str = "oracle"
    model: str = "gpt-3.5-turbo-0301"
    output_dir: str = "runs"
    cache_path: str | None = None
    epsilon: float = 0.2
    bootstrap_episodes: int = 4000
    max_relabels: int = MAX_RELABELS
    max_instructions: int = MAX_INSTRUCTIONS
    snapshot_every: int = SNAPSHOT_EVERY
    workers: int = 1

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}; expected one of {sorted(CONDITIONS)}")
        if self.episodes < 1:
            raise ValueError("episodes must be positive")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be positive")
        if self.max_relabels > MAX_RELABELS:
            raise ValueError(f"max_relabels cannot exceed {MAX_RELABELS}")
        if not 1 <= self.max_instructions <= MAX_INSTRUCTIONS:
            raise ValueError(f"max_instructions must lie in [1, {MAX_INSTRUCTIONS}]")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def exploration(self) -> ExplorationConfig:
        return ExplorationConfig(self.epsilon, self.bootstrap_episodes, self.max_relabels,
                                 self.max_instructions)

    @property
    def flags(self) -> Condition:
        return CONDITIONS[self.condition]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.condition

    def seed_dir(self, seed: int) -> Path:
        return self.run_dir() / f"seed_{seed}"

    def to_dict(self) -> dict:
        return asdict(self)


TRAJECTORIES = "trajectories.jsonl"
REGISTRY = "registry.json"
REPLAY = "replay.jsonl"
CALLS = "calls.jsonl"
CHECKPOINT = "checkpoint.json"
_LOGS = (TRAJECTORIES, REPLAY, CALLS)


def _truncate_lines(path: Path, n: int) -> None:
    if not path.exists():
        return
    with open(path, "rb") as fh:
        lines = fh.readlines()
    with open(path, "wb") as fh:
        fh.writelines(lines[:n])


class SeedRun:
    """One seed's sequential episode loop with snapshot/resume."""

    def __init__(self, config: RunConfig, seed: int, gateway: Gateway | None,
                 world: KitchenWorld | None = None):
        self.config = config
        self.seed = seed
        self.gateway = gateway
        self.world = world or default_world()
        self.dir = config.seed_dir(seed)
        self.condition = config.flags
        self.exploration = config.exploration
        self.registry = GoalRegistry()
        self.rng = random.Random(seed)
        self.episode = 0
        self.last_traj: Trajectory | None = None
        self.counts = {name: 0 for name in _LOGS}
        self._handles: dict[str, object] = {}
        self.calls = CallLog(sink=lambda rec: self._write(CALLS, rec))
        self._eval_set = eval_goals() if self.condition.oracle_judges else None
        self._restrict = (frozenset(canonical_goal(g) for g in EVAL_GOAL_TEXTS)
                          if self.condition.oracle_judges else None)

    # -- persistence

    def _write(self, name: str, rec: dict) -> None:
        fh = self._handles.get(name)
        if fh is None:
            fh = self._handles[name] = open(self.dir / name, "a", encoding="utf-8")
        fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        self.counts[name] += 1

    def _flush(self) -> None:
        for fh in self._handles.values():
            fh.flush()

    def close(self) -> None:
        for fh in self._handles.values():
            fh.close()
        self._handles.clear()

    def snapshot(self) -> None:
        self._flush()
        version, internal, gauss = self.rng.getstate()
        ckpt = {
            "seed": self.seed,
            "episode": self.episode,
            "rng": [version, list(internal), gauss],
            "registry": self.registry.to_dict(),
            "last_traj": None if self.last_traj is None else self.last_traj.to_records(),
            "counts": self.counts,
        }
        self.registry.save(self.dir / REGISTRY)
        _atomic_write(self.dir / CHECKPOINT, json.dumps(ckpt, ensure_ascii=False))

    def restore(self) -> bool:
        path = self.dir / CHECKPOINT
        if not path.exists():
            return False
        ckpt = json.loads(path.read_text(encoding="utf-8"))
        self.episode = int(ckpt["episode"])
        version, internal, gauss = ckpt["rng"]
        self.rng.setstate((version, tuple(internal), gauss))
        self.registry = GoalRegistry.from_dict(ckpt["registry"])
        recs = ckpt["last_traj"]
        self.last_traj = None if recs is None else Trajectory.from_records(recs)
        self.counts = {name: int(ckpt["counts"].get(name, 0)) for name in _LOGS}
        for name in _LOGS:
            _truncate_lines(self.dir / name, self.counts[name])
        return True

    def _fresh(self) -> None:
        for name in (*_LOGS, REGISTRY, CHECKPOINT):
            p = self.dir / name
            if p.exists():
                p.unlink()

    # -- loop

    def run_episode(self, episode: int) -> EpisodeOutcome:
        plan = select_plan(episode, self.registry, self.last_traj, self.gateway, self.condition,
                           self.rng, self.exploration, self.calls, self._restrict)
        traj, truncated = execute_plan(self.world, plan, self.registry, self.rng, self.exploration)
        outcome = process_episode(traj, plan, episode, self.gateway, self.condition, self.registry,
                                  None, self.calls, self._eval_set)
        self._write(TRAJECTORIES, {"episode": episode, "plan": plan_to_dict(plan),
                                   "truncated": truncated, "steps": traj.to_records()})
        for rec in outcome.records:
            self._write(REPLAY, rec.to_dict())
        self.last_traj = traj
        self.episode = episode
        return outcome

    def run(self, resume: bool = True, stop_after: int | None = None,
            progress: Callable[[int, int, "SeedRun"], None] | None = None) -> "SeedRun":
        """Run to ``config.episodes``; ``stop_after`` halts early (simulates a kill)."""
        self.dir.mkdir(parents=True, exist_ok=True)
        if not (resume and self.restore()):
            self._fresh()
        for name in _LOGS:
            (self.dir / name).touch()
        try:
            for ep in range(self.episode + 1, self.config.episodes + 1):
                self.run_episode(ep)
                if progress is not None:
                    progress(self.seed, ep, self)
                if ep % self.config.snapshot_every == 0 or ep == self.config.episodes:
                    self.snapshot()
                if stop_after is not None and ep >= stop_after:
                    break
        finally:
            self._flush()
            self.close()
        return self


def make_gateway(config: RunConfig) -> Gateway | None:
    if config.flags.oracle_judges:
        return None
    return Gateway.from_env(config.backend, cache_path=config.cache_path, model=config.model)


@dataclass
class RunArtifacts:
    config: RunConfig
    seed_dirs: dict[int, Path]
    registries: dict[int, GoalRegistry]
    gateway: Gateway | None = None


def run(config: RunConfig, seeds: Iterable[int] | None = None, gateway: Gateway | None = None,
        resume: bool = True, progress=None) -> RunArtifacts:
    """Run every seed; seeds share only the gateway (and its cache)."""
    seeds = list(config.seeds if seeds is None else seeds)
    if gateway is None:
        gateway = make_gateway(config)
    config.run_dir().mkdir(parents=True, exist_ok=True)
    (config.run_dir() / "config.json").write_text(json.dumps(config.to_dict(), indent=1) + "\n",
                                                  encoding="utf-8")

    def one(seed: int) -> SeedRun:
        return SeedRun(config, seed, gateway).run(resume=resume, progress=progress)

    if config.workers > 1 and len(seeds) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            runs = list(pool.map(one, seeds))
    else:
        runs = [one(s) for s in seeds]
    return RunArtifacts(config, {r.seed: r.dir for r in runs}, {r.seed: r.registry for r in runs}, gateway)


def read_archive(seed_dir: str | Path) -> Iterable[dict]:
    with open(Path(seed_dir) / TRAJECTORIES, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


class ArchiveReplayer:
    """Serves ``rollout`` from archived episodes instead of stepping the world.

    The world is deterministic, so any prefix of an archived action list
    reproduces the archived transitions.  Unknown sequences fall back to a
    real rollout and are tallied in ``env_steps``.
    """

    def __init__(self, archive: Iterable[Mapping], world: KitchenWorld | None = None):
        self.world = world or default_world()
        self.horizon = self.world.horizon
        self.env_steps = 0
        self._index: dict[tuple[str, ...], tuple[Trajectory, int]] = {}
        for rec in archive:
            traj = Trajectory.from_records(rec["steps"])
            actions = tuple(traj.actions)
            for k in range(len(actions) + 1):
                self._index.setdefault(actions[:k], (traj, k))

    def rollout(self, actions: Iterable[str]) -> Trajectory:
        key = tuple(actions)[: self.horizon]
        hit = self._index.get(key)
        if hit is not None:
            traj, k = hit
            return traj.prefix(k)
        traj = self.world.rollout(key)
        self.env_steps += len(traj)
        return traj
