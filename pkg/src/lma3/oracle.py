"""Ground-truth goal predicates, hand-coded evaluation goals and oracle tooling.

Goal texts are compiled into predicates over :class:`GroundEvent` lists.  A
predicate returns the step at which the goal is first completed, or ``None``.
The grammar covers every description the oracle relabeler can emit plus two
combinators::

    <goal> ::= <clause> (", then " <clause>)*
    <clause> ::= <atom> (" and " <atom>)*

``A, then B`` completes when B is first completed strictly after A; ``A and
B`` completes when the later of the two is first completed.
"""

from __future__ import annotations

import csv
import random
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .prompts import RelabelResult, RewardVerdict, canonical_goal
from .world import GroundEvent, KitchenWorld, Trajectory, default_world

Predicate = Callable[[Sequence[GroundEvent]], "int | None"]


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EvalGoal:
    id: int
    text: str
    predicate: Predicate

    @property
    def canonical(self) -> str:
        return canonical_goal(self.text)


# ---------------------------------------------------------------- predicates


def _first(kind: str, obj: str | None = None, detail: str | None = None) -> Predicate:
    def pred(events: Sequence[GroundEvent]) -> int | None:
        for e in events:
            if e.kind != kind:
                continue
            if obj is not None and e.obj != obj:
                continue
            if detail is not None and e.detail != detail:
                continue
            return e.step
        return None

    return pred


def _conj(preds: list[Predicate]) -> Predicate:
    def pred(events):
        steps = [p(events) for p in preds]
        if any(s is None for s in steps):
            return None
        return max(steps)

    return pred


def _then(preds: list[Predicate]) -> Predicate:
    def pred(events):
        last = 0
        for p in preds:
            s = p([e for e in events if e.step > last])
            if s is None:
                return None
            last = s
        return last

    return pred


class GoalCompiler:
    """Turns goal texts into predicates for one world's vocabulary."""

    def __init__(self, world: KitchenWorld | None = None):
        self.world = world or default_world()
        w = self.world
        self.recipe_goal = canonical_goal(EVAL_GOAL_TEXTS[_RECIPE_INDEX]).casefold()
        obj = "|".join(re.escape(o) for o in sorted(w.portables, key=len, reverse=True))
        holders = "|".join(re.escape(h) for h in w.holders)
        ingredients = "|".join(re.escape(i) for i in w.ingredients + [w.meal_id])
        rooms = "|".join(re.escape(r) for r in w.rooms)
        cut = "|".join(w.cut_styles)
        cook = "|".join(w.cook_styles)
        self._atoms: list[tuple[re.Pattern, Callable[[re.Match], Predicate]]] = [
            (re.compile(rf"go to the ({rooms})"), lambda m: _first("moved", None, m[1])),
            (re.compile(rf"open the ({holders})"), lambda m: _first("opened", m[1])),
            (re.compile(rf"close the ({holders})"), lambda m: _first("closed", m[1])),
            (re.compile(rf"pick up the ({obj})"), lambda m: _first("picked_up", m[1])),
            (re.compile(rf"put the ({obj}) (?:in|on) the ({holders})"), lambda m: _first("put", m[1], m[2])),
            (re.compile(rf"cut the ({ingredients})"), lambda m: _first("cut", m[1])),
            (re.compile(rf"({cut}) the ({ingredients})"),
             lambda m: _first("cut", m[2], w.cut_styles[m[1]])),
            (re.compile(rf"cook the ({ingredients})"), lambda m: _first("cooked", m[1])),
            (re.compile(rf"({cook}) the ({ingredients})"),
             lambda m: _first("cooked", m[2], w.cook_styles[m[1]])),
            (re.compile(rf"eat the ({ingredients})"), lambda m: _first("ate", m[1])),
            (re.compile(rf"read the {re.escape(w.cookbook_id)}"), lambda m: _first("read_cookbook")),
            (re.compile(rf"prepare the {re.escape(w.meal_id)}"), lambda m: _first("prepared_meal")),
        ]

    def _atom(self, text: str) -> Predicate | None:
        if text == self.recipe_goal:
            return _first("ate", self.world.meal_id)
        for pattern, build in self._atoms:
            m = pattern.fullmatch(text)
            if m:
                return build(m)
        return None

    def compile(self, goal_text: str) -> Predicate | None:
        text = canonical_goal(goal_text).casefold()
        if not text:
            return None
        whole = self._atom(text)
        if whole is not None:
            return whole
        stages = []
        for clause in text.split(", then "):
            atoms = [self._atom(a) for a in clause.split(" and ")]
            if not atoms or any(a is None for a in atoms):
                return None
            stages.append(atoms[0] if len(atoms) == 1 else _conj(atoms))
        return stages[0] if len(stages) == 1 else _then(stages)

    def describe(self, event: GroundEvent) -> str | None:
        """Templated description of one event, phrased so that ``compile`` accepts it."""
        k = event.kind
        if k == "moved":
            return f"go to the {event.detail}"
        if k == "opened":
            return f"open the {event.obj}"
        if k == "closed":
            return f"close the {event.obj}"
        if k == "picked_up":
            return f"pick up the {event.obj}"
        if k == "put":
            prep = "in" if self.world.holder_kind(event.detail) == "container" else "on"
            return f"put the {event.obj} {prep} the {event.detail}"
        if k == "cut":
            verb = {v: s for s, v in self.world.cut_styles.items()}[event.detail]
            return f"{verb} the {event.obj}"
        if k == "cooked":
            verb = {v: s for s, v in self.world.cook_styles.items()}[event.detail]
            return f"{verb} the {event.obj}"
        if k == "ate":
            return f"eat the {event.obj}"
        if k == "read_cookbook":
            return f"read the {event.obj}"
        if k == "prepared_meal":
            return f"prepare the {event.obj}"
        return None


# ------------------------------------------------------------- eval goal set


@lru_cache(maxsize=1)
def _eval_goal_texts() -> tuple[str, ...]:
    raw = resources.files("lma3.data").joinpath("eval_goals.txt").read_text(encoding="utf-8")
    return tuple(line for line in raw.splitlines() if line.strip())


EVAL_GOAL_TEXTS = _eval_goal_texts()
_RECIPE_INDEX = next(i for i, g in enumerate(EVAL_GOAL_TEXTS) if g.startswith("You are hungry!"))
RECIPE_GOAL = EVAL_GOAL_TEXTS[_RECIPE_INDEX]


@lru_cache(maxsize=None)
def default_compiler() -> GoalCompiler:
    return GoalCompiler(default_world())


def eval_goals(compiler: GoalCompiler | None = None) -> list[EvalGoal]:
    compiler = compiler or default_compiler()
    goals = []
    for i, text in enumerate(EVAL_GOAL_TEXTS, start=1):
        pred = compiler.compile(text)
        if pred is None:
            raise RuntimeError(f"evaluation goal has no predicate: {text!r}")
        goals.append(EvalGoal(i, text, pred))
    return goals


# --------------------------------------------------------- oracle functions


def oracle_reward(goal: EvalGoal | str, events: Sequence[GroundEvent],
                  compiler: GoalCompiler | None = None) -> RewardVerdict:
    if isinstance(goal, EvalGoal):
        text, pred = goal.text, goal.predicate
    else:
        text, pred = goal, (compiler or default_compiler()).compile(goal)
    step = pred(events) if pred is not None else None
    return RewardVerdict(text, step is not None, step)


def oracle_relabel(events: Sequence[GroundEvent], goals: Sequence[EvalGoal] | None = None) -> RelabelResult:
    """Every evaluation goal the events satisfy, with completion steps (no cap)."""
    goals = goals if goals is not None else eval_goals()
    out = []
    for g in goals:
        step = g.predicate(events)
        if step is not None:
            out.append((g.canonical, step))
    return RelabelResult(tuple(out))


def describe_events(events: Sequence[GroundEvent], compiler: GoalCompiler | None = None) -> list[tuple[str, int]]:
    """Distinct templated descriptions of ``events`` at their first step, in step order."""
    compiler = compiler or default_compiler()
    seen: dict[str, int] = {}
    for e in events:
        d = compiler.describe(e)
        if d is not None and d not in seen:
            seen[d] = e.step
    return list(seen.items())


def oracle_finetune(archive: Iterable[Mapping], registry, goals: Sequence[EvalGoal] | None = None):
    """Sweep archived trajectories with the oracle relabeler; no env steps, no LM calls.

    ``archive`` yields episode records with ``episode`` and ``steps`` (the
    per-step dicts written to ``trajectories.jsonl``).  Returns a new registry.
    """
    goals = goals if goals is not None else eval_goals()
    tuned = registry.copy()
    for rec in archive:
        traj = Trajectory.from_records(rec["steps"])
        actions = traj.actions
        for goal, step in oracle_relabel(traj.events, goals):
            tuned.offer(goal, actions[:step], int(rec.get("episode", 0)), count=False)
    return tuned


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class GoalOutcome:
    goal: str
    achieved: bool
    step: int | None
    sequence_length: int | None


@dataclass
class SuccessReport:
    outcomes: list[GoalOutcome]

    @property
    def success_rate(self) -> float:
        if not self.outcomes:
            return 0.0
        return sum(o.achieved for o in self.outcomes) / len(self.outcomes)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["goal", "achieved", "step", "sequence_length"])
            for o in self.outcomes:
                w.writerow([o.goal, int(o.achieved), "" if o.step is None else o.step,
                            "" if o.sequence_length is None else o.sequence_length])


SELF_EVAL_SAMPLE = 200


def evaluate_success(registry, goals: Sequence[EvalGoal | str], judge: str = "oracle",
                     gateway=None, cot: bool = True, world: KitchenWorld | None = None,
                     rng: random.Random | None = None, sample_size: int | None = None) -> SuccessReport:
    """Replay each goal's stored sequence from reset and judge completion.

    ``judge="oracle"`` needs :class:`EvalGoal` items.  ``judge="lm"`` takes goal
    texts, samples ``min(sample_size, len(goals))`` of them uniformly and asks
    the reward component through ``gateway``.
    """
    world = world or default_world()
    goals = list(goals)
    if judge == "oracle":
        if not all(isinstance(g, EvalGoal) for g in goals):
            raise TypeError("the oracle judge only evaluates EvalGoal items")
    elif judge == "lm":
        if gateway is None:
            raise ValueError("the lm judge needs a gateway")
        size = min(SELF_EVAL_SAMPLE if sample_size is None else sample_size, len(goals))
        goals = (rng or random.Random(0)).sample(goals, size)
    else:
        raise ValueError(f"unknown judge {judge!r}")

    outcomes = []
    for g in goals:
        text = g.text if isinstance(g, EvalGoal) else g
        seq = registry.sequence(text)
        if seq is None:
            outcomes.append(GoalOutcome(text, False, None, None))
            continue
        traj = world.rollout(seq)
        if judge == "oracle":
            verdict = oracle_reward(g, traj.events)
        else:
            from .agent import judge_goals

            verdict = judge_goals(gateway, traj, [text], cot=cot)[0]
        outcomes.append(GoalOutcome(text, verdict.achieved, verdict.step, len(seq)))
    return SuccessReport(outcomes)


# ------------------------------------------------------------------ confusion


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def fp_rate(self) -> float:
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0

    @property
    def fn_rate(self) -> float:
        pos = self.tp + self.fn
        return self.fn / pos if pos else 0.0

    def as_table(self) -> str:
        return (
            "               judged yes  judged no\n"
            f"true success   {self.tp:>10d}  {self.fn:>9d}\n"
            f"true failure   {self.fp:>10d}  {self.tn:>9d}\n"
            f"FP-rate {self.fp_rate:.4f}  FN-rate {self.fn_rate:.4f}"
        )


def confusion(judge_verdicts: Sequence[bool], truth_labels: Sequence[bool]) -> ConfusionMatrix:
    if len(judge_verdicts) != len(truth_labels):
        raise LengthMismatch(f"{len(judge_verdicts)} verdicts vs {len(truth_labels)} labels")
    tp = fp = tn = fn = 0
    for v, t in zip(judge_verdicts, truth_labels):
        if v and t:
            tp += 1
        elif v:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, tn, fn)


_TRUE = {"1", "true", "yes", "y", "success"}
_FALSE = {"0", "false", "no", "n", "failure"}


def read_label_csv(path: str | Path) -> dict[str, bool]:
    """Two-column CSV (trajectory-id, label); a header row is skipped if present."""
    labels: dict[str, bool] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if len(row) < 2:
                continue
            key, value = row[0].strip(), row[1].strip().lower()
            if value in _TRUE:
                labels[key] = True
            elif value in _FALSE:
                labels[key] = False
    return labels


def confusion_from_csv(verdict_path: str | Path, label_path: str | Path) -> ConfusionMatrix:
    """Join judge verdicts and human labels on trajectory id."""
    verdicts = read_label_csv(verdict_path)
    labels = read_label_csv(label_path)
    ids = [k for k in labels if k in verdicts]
    return confusion([verdicts[k] for k in ids], [labels[k] for k in ids])
