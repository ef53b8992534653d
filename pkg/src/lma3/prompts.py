"""Prompt rendering and response parsing for the three LM roles.

Templates live in ``lma3/templates`` as plain text with named slots
(``{{trajectory}}``, ``{{goals}}``, ``{{instructions}}``).  Everything outside
the slots is reproduced byte-for-byte.  Parsers are total: malformed input
yields empty or rejected results, never an exception other than
:class:`PlanUnparsable`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from difflib import SequenceMatcher
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .world import Trajectory

TEMPLATE_VERSION = "1"
MAX_RELABELS = 10
MAX_INSTRUCTIONS = 60
MIN_SUBGOALS, MAX_SUBGOALS = 2, 4

ROLES = ("relabel", "reward", "goalgen")


class TrajectoryEmpty(ValueError):
    pass


class TooManyInstructions(ValueError):
    pass


class PlanUnparsable(ValueError):
    pass


@dataclass(frozen=True)
class PromptVariant:
    role: str
    cot: bool = True
    human_tips: bool = False

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.human_tips and not self.cot:
            raise ValueError("human tips are only defined on top of chain-of-thought")
        if self.human_tips and self.role != "relabel":
            raise ValueError("human tips only exist for the relabeler prompt")

    @property
    def template_name(self) -> str:
        if self.human_tips:
            return f"{self.role}_tips"
        return f"{self.role}_{'cot' if self.cot else 'base'}"


ALL_VARIANTS = (
    PromptVariant("relabel", cot=False),
    PromptVariant("relabel", cot=True),
    PromptVariant("relabel", cot=True, human_tips=True),
    PromptVariant("reward", cot=False),
    PromptVariant("reward", cot=True),
    PromptVariant("goalgen", cot=False),
    PromptVariant("goalgen", cot=True),
)


@dataclass(frozen=True)
class RelabelResult:
    entries: tuple[tuple[str, int], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class RewardVerdict:
    goal: str
    achieved: bool
    step: int | None = None


@dataclass(frozen=True)
class EpisodePlan:
    main_goal: str
    subgoals: tuple[str, ...]
    indices: tuple[int, ...] = field(default=())

    def to_text(self) -> str:
        items = "; ".join(f"{g} (#{k})" for g, k in zip(self.subgoals, self.indices))
        return f"goal: {self.main_goal}. instructions: {items}."


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("lma3.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def canonical_goal(text: str) -> str:
    """Trim, collapse whitespace, drop one final period, lowercase the first letter."""
    t = " ".join(text.split())
    t = t.rstrip()
    if t.endswith("."):
        t = t[:-1].rstrip()
    if t:
        t = t[0].lower() + t[1:]
    return t


def serialize_trajectory(traj: Trajectory) -> str:
    blocks = []
    for tr in traj.transitions:
        blocks.append(f"Step {tr.step}.\nAction {tr.step}: {tr.action}\nObservation {tr.step}: {tr.observation}")
    return "\n".join(blocks)


def serialize_goals(goals: Sequence[str]) -> str:
    return ", ".join('"' + g.replace('"', "'") + '"' for g in goals)


def serialize_instructions(instructions: Sequence[str]) -> str:
    return "\n".join(f"#{i} {text}" for i, text in enumerate(instructions, start=1))


def _fill(template: str, **slots: str) -> str:
    for name, value in slots.items():
        template = template.replace("{{" + name + "}}", value)
    return template


def render_relabel_prompt(traj: Trajectory, variant: PromptVariant) -> str:
    if variant.role != "relabel":
        raise ValueError("variant is not a relabel variant")
    if len(traj) == 0:
        raise TrajectoryEmpty("cannot relabel an empty trajectory")
    return _fill(load_template(variant.template_name), trajectory=serialize_trajectory(traj))


def render_reward_prompt(traj: Trajectory, goals: Sequence[str], cot: bool) -> str:
    if not goals:
        raise ValueError("reward prompt needs at least one goal")
    name = PromptVariant("reward", cot=cot).template_name
    return _fill(load_template(name), trajectory=serialize_trajectory(traj), goals=serialize_goals(goals))


def render_goalgen_prompt(traj: Trajectory, instructions: Sequence[str], cot: bool) -> str:
    if not 1 <= len(instructions) <= MAX_INSTRUCTIONS:
        raise TooManyInstructions(f"{len(instructions)} instructions (allowed 1..{MAX_INSTRUCTIONS})")
    name = PromptVariant("goalgen", cot=cot).template_name
    return _fill(
        load_template(name),
        trajectory=serialize_trajectory(traj),
        instructions=serialize_instructions(instructions),
    )


# ------------------------------------------------------------------ parsing

_INT = re.compile(r"\d+")
_RELABEL_LINE = re.compile(r"^\s*-\s*(?P<desc>.*?)\s*\(\s*steps?\s+(?P<steps>[^)]*)\)\s*\.?\s*$", re.IGNORECASE)
_ANSWER = re.compile(r"answer\s*:\s*(?P<verdict>yes|no)\b(?P<rest>.*)$", re.IGNORECASE)
_STEP_GROUP = re.compile(r"\(\s*steps?\s+([^)]*)\)", re.IGNORECASE)
_REASONING = re.compile(r"\breasoning\s*:", re.IGNORECASE)


def _last_int(text: str) -> int | None:
    found = _INT.findall(text)
    return int(found[-1]) if found else None


def parse_relabel_response(text: str, max_step: int | None = None) -> RelabelResult:
    entries: list[tuple[str, int]] = []
    seen: set[str] = set()
    for line in str(text).splitlines():
        m = _RELABEL_LINE.match(line)
        if not m:
            continue
        step = _last_int(m.group("steps"))
        desc = canonical_goal(m.group("desc"))
        if step is None or not desc:
            continue
        if max_step is not None and not 1 <= step <= max_step:
            continue
        key = desc.casefold()
        if key in seen:
            continue
        seen.add(key)
        entries.append((desc, step))
        if len(entries) == MAX_RELABELS:
            break
    return RelabelResult(tuple(entries))


def _answer_lines(text: str) -> list[tuple[str, bool, int | None]]:
    """(goal fragment, said yes with a step, step) for each '- ... Answer: ...' line."""
    out = []
    for line in str(text).splitlines():
        stripped = line.strip()
        if not stripped.startswith("-"):
            continue
        m = _ANSWER.search(stripped)
        if not m:
            continue
        head = stripped[1 : m.start()]
        r = _REASONING.search(head)
        if r:
            head = head[: r.start()]
        fragment = canonical_goal(head)
        step = None
        if m.group("verdict").lower() == "yes":
            g = _STEP_GROUP.search(m.group("rest"))
            if g:
                step = _last_int(g.group(1))
        out.append((fragment, step is not None, step))
    return out


def _lcs_len(a: str, b: str) -> int:
    if not a or not b:
        return 0
    return SequenceMatcher(None, a, b, autojunk=False).find_longest_match(0, len(a), 0, len(b)).size


def parse_reward_response(text: str, goals: Sequence[str]) -> list[RewardVerdict]:
    lines = _answer_lines(text)
    verdicts = [RewardVerdict(g, False, None) for g in goals]
    if len(lines) == len(goals):
        for i, (_, yes, step) in enumerate(lines):
            if yes:
                verdicts[i] = RewardVerdict(goals[i], True, step)
        return verdicts
    # count mismatch: bind each line to the goal it overlaps most
    canon = [canonical_goal(g).casefold() for g in goals]
    bound: set[int] = set()
    for fragment, yes, step in lines:
        frag = fragment.casefold()
        best, best_len = None, 0
        for i, g in enumerate(canon):
            if i in bound:
                continue
            n = len(g) if g == frag else _lcs_len(frag, g)
            if n > best_len:
                best, best_len = i, n
        # demand the overlap cover at least half of the goal; otherwise ambiguous
        if best is None or best_len * 2 < len(canon[best]):
            continue
        bound.add(best)
        if yes:
            verdicts[best] = RewardVerdict(goals[best], True, step)
    return verdicts


_GOAL = re.compile(r"goal\s*:", re.IGNORECASE)
_INSTRUCTIONS = re.compile(r"instructions\s*:", re.IGNORECASE)
_REF = re.compile(r"\(\s*#\s*(\d+)\s*\)")


def parse_goalgen_response(text: str, instructions: Sequence[str]) -> EpisodePlan:
    text = str(text)
    instr_matches = list(_INSTRUCTIONS.finditer(text))
    if not instr_matches:
        raise PlanUnparsable("no instruction list")
    im = instr_matches[-1]
    goal_matches = [g for g in _GOAL.finditer(text, 0, im.start())]
    if not goal_matches:
        raise PlanUnparsable("no goal description")
    main = canonical_goal(text[goal_matches[-1].end() : im.start()])
    if not main:
        raise PlanUnparsable("empty goal description")
    body = text[im.end() :].split("\n", 1)[0]
    indices: list[int] = []
    for item in body.split(";"):
        m = _REF.search(item)
        if not m:
            continue
        k = int(m.group(1))
        if 1 <= k <= len(instructions):
            indices.append(k)
    if not MIN_SUBGOALS <= len(indices) <= MAX_SUBGOALS:
        raise PlanUnparsable(f"{len(indices)} valid instruction references")
    return EpisodePlan(main, tuple(instructions[k - 1] for k in indices), tuple(indices))
