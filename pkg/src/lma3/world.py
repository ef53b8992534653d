"""Deterministic CookingWorld-style kitchen.

The world is a pure function of (state, action): ``step`` never mutates its
input and returns a fresh :class:`WorldState`.  Commands must match the
action catalogue exactly.  Every successful command emits ground-truth
:class:`GroundEvent` records, which the oracle components read instead of
the observation text.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

INVENTORY = "inventory"
CONSUMED = "consumed"
FAILURE_OBSERVATION = "You can't do that."

EVENT_KINDS = (
    "picked_up",
    "put",
    "opened",
    "closed",
    "cut",
    "cooked",
    "moved",
    "ate",
    "read_cookbook",
    "prepared_meal",
)

_OPENERS = (
    "In one part of the room you see",
    "There is also",
    "You also see",
    "In another part of the room you see",
)


class EpisodeExhausted(RuntimeError):
    """Raised when stepping a state that already reached the horizon."""


class UnknownAction(ValueError):
    """Raised when a command is not part of the action catalogue."""


@dataclass(frozen=True)
class ObjectState:
    kind: str
    location: str
    openable: bool = False
    open: bool = False
    cut_state: str = "uncut"
    cook_state: str = "raw"
    consumed: bool = False


@dataclass(frozen=True)
class WorldState:
    current_room: str
    step: int
    objects: Mapping[str, ObjectState]
    inventory: tuple[str, ...] = ()
    cookbook_read: bool = False

    def to_dict(self) -> dict:
        return {
            "current_room": self.current_room,
            "step": self.step,
            "inventory": list(self.inventory),
            "cookbook_read": self.cookbook_read,
            "objects": {
                oid: {
                    "kind": o.kind,
                    "location": o.location,
                    "openable": o.openable,
                    "open": o.open,
                    "cut_state": o.cut_state,
                    "cook_state": o.cook_state,
                    "consumed": o.consumed,
                }
                for oid, o in self.objects.items()
            },
        }


@dataclass(frozen=True)
class Action:
    text: str
    verb: str
    obj: str | None = None
    target: str | None = None


@dataclass(frozen=True)
class GroundEvent:
    step: int
    kind: str
    obj: str | None = None
    detail: str | None = None

    def to_dict(self) -> dict:
        return {"step": self.step, "kind": self.kind, "obj": self.obj, "detail": self.detail}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroundEvent":
        return cls(int(d["step"]), d["kind"], d.get("obj"), d.get("detail"))


@dataclass(frozen=True)
class Transition:
    step: int
    action: str
    observation: str
    events: tuple[GroundEvent, ...] = ()

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "action": self.action,
            "observation": self.observation,
            "events": [e.to_dict() for e in self.events],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Transition":
        return cls(
            int(d["step"]),
            d["action"],
            d["observation"],
            tuple(GroundEvent.from_dict(e) for e in d.get("events", ())),
        )


@dataclass
class Trajectory:
    """Steps are numbered from 1; step ``t`` is the outcome of the t-th action."""

    initial_observation: str = ""
    transitions: list[Transition] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def actions(self) -> list[str]:
        return [t.action for t in self.transitions]

    @property
    def events(self) -> list[GroundEvent]:
        return [e for t in self.transitions for e in t.events]

    def prefix(self, length: int) -> "Trajectory":
        return Trajectory(self.initial_observation, self.transitions[:length])

    def to_records(self) -> list[dict]:
        return [t.to_dict() for t in self.transitions]

    @classmethod
    def from_records(cls, records: Iterable[Mapping], initial_observation: str = "") -> "Trajectory":
        return cls(initial_observation, [Transition.from_dict(r) for r in records])


def write_trajectory_log(path: str | Path, traj: Trajectory) -> None:
    """One JSON line per step: {step, action, observation, events}."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in traj.to_records():
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_trajectory_log(path: str | Path) -> Trajectory:
    with open(path, encoding="utf-8") as fh:
        return Trajectory.from_records(json.loads(line) for line in fh if line.strip())


def load_scenario(path: str | Path | None = None) -> dict:
    if path is None:
        text = resources.files("lma3.data").joinpath("kitchen.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return json.loads(text)


def _join(items: list[str]) -> str:
    if not items:
        return ""
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + ", and " + items[-1]


class KitchenWorld:
    """Environment rules for one scenario; holds no per-episode state."""

    def __init__(self, scenario: Mapping | None = None):
        self.scenario = dict(scenario) if scenario is not None else load_scenario()
        sc = self.scenario
        self.horizon: int = int(sc["horizon"])
        self.start_room: str = sc["start_room"]
        self.rooms: dict[str, dict[str, str]] = {r: dict(v["exits"]) for r, v in sc["rooms"].items()}
        self._defs = {o["id"]: o for o in sc["objects"]}
        self.cut_styles: dict[str, str] = dict(sc["verbs"]["cut"])
        self.cook_styles: dict[str, str] = dict(sc["verbs"]["cook"])
        self.appliances: dict[str, str] = {
            o["appliance"]: o["id"] for o in sc["objects"] if o.get("appliance")
        }
        recipe = sc["recipe"]
        self.recipe_room: str = recipe["room"]
        self.recipe_ingredients: dict[str, str | None] = dict(recipe["ingredients"])
        self.meal_id: str = recipe["meal"]
        self.recipe_text: str = recipe["text"]

        self.holders = [o["id"] for o in sc["objects"] if o.get("holder")]
        self.containers = [h for h in self.holders if self._defs[h]["holder"] == "container"]
        self.ingredients = [o["id"] for o in sc["objects"] if o["kind"] == "ingredient"]
        self.portables = [o["id"] for o in sc["objects"] if o.get("portable")] + [self.meal_id]
        self.cookbook_id = next(o["id"] for o in sc["objects"] if o["kind"] == "cookbook")
        self.knife_id = next(o["id"] for o in sc["objects"] if o["id"] == "knife")
        self._initial = self._build_initial()
        self._catalogue = self._build_catalogue()
        self._by_text = {a.text: a for a in self._catalogue}

    # ------------------------------------------------------------------ setup

    def _build_initial(self) -> WorldState:
        objects = {
            o["id"]: ObjectState(
                kind=o["kind"],
                location=o["location"],
                openable=bool(o.get("openable", False)),
            )
            for o in self.scenario["objects"]
        }
        return WorldState(self.start_room, 0, objects, (), False)

    def _build_catalogue(self) -> list[Action]:
        acts: list[Action] = []
        for room in self.rooms:
            for direction in self.rooms[room]:
                acts.append(Action(f"move {direction}", "move", None, direction))
        for c in self.containers:
            acts.append(Action(f"open the {c}", "open", c))
            acts.append(Action(f"close the {c}", "close", c))
        for p in self.portables:
            acts.append(Action(f"pick up the {p}", "take", p))
            for h in self.holders:
                prep = "in" if self._defs[h]["holder"] == "container" else "on"
                acts.append(Action(f"put the {p} {prep} the {h}", "put", p, h))
        for i in self.ingredients:
            for verb in self.cut_styles:
                acts.append(Action(f"{verb} the {i}", "cut", i, verb))
            for verb in self.cook_styles:
                acts.append(Action(f"{verb} the {i}", "cook", i, verb))
        for e in self.ingredients + [self.meal_id]:
            acts.append(Action(f"eat the {e}", "eat", e))
        acts.append(Action(f"read the {self.cookbook_id}", "read", self.cookbook_id))
        acts.append(Action(f"prepare the {self.meal_id}", "prepare", self.meal_id))
        # dedupe while keeping first definition, then fix a lexicographic order
        seen: dict[str, Action] = {}
        for a in acts:
            seen.setdefault(a.text, a)
        return [seen[t] for t in sorted(seen)]

    # ------------------------------------------------------------- public API

    def reset(self) -> WorldState:
        return self._initial

    def action_catalogue(self) -> list[str]:
        return [a.text for a in self._catalogue]

    def parse_action(self, text: str) -> Action:
        try:
            return self._by_text[text]
        except KeyError:
            raise UnknownAction(text) from None

    def holder_kind(self, holder: str) -> str:
        return self._defs[holder]["holder"]

    def admissible_actions(self, state: WorldState) -> list[str]:
        return [a.text for a in self._catalogue if self._allowed(state, a)]

    def step(self, state: WorldState, action: str) -> tuple[WorldState, str, list[GroundEvent]]:
        if state.step >= self.horizon:
            raise EpisodeExhausted(f"episode already ran {state.step} steps")
        act = self._by_text.get(action)
        if act is None or not self._allowed(state, act):
            return replace(state, step=state.step + 1), FAILURE_OBSERVATION, []
        return self._apply(state, act)

    def rollout(self, actions: Iterable[str]) -> Trajectory:
        """Replay ``actions`` from reset; stops silently at the horizon."""
        state = self.reset()
        traj = Trajectory(self.render_room(state))
        for a in actions:
            if state.step >= self.horizon:
                break
            state, obs, events = self.step(state, a)
            traj.transitions.append(Transition(state.step, a, obs, tuple(events)))
        return traj

    # ------------------------------------------------------------ predicates

    def _holder_room(self, state: WorldState, loc: str) -> str | None:
        if loc in self.rooms:
            return loc
        holder = state.objects.get(loc)
        if holder is None:
            return None
        return holder.location if holder.location in self.rooms else None

    def _reachable(self, state: WorldState, oid: str) -> bool:
        """Object sits on/in furniture of the current room and is not shut away."""
        o = state.objects.get(oid)
        if o is None or o.consumed or o.location in (INVENTORY, CONSUMED):
            return False
        holder = state.objects.get(o.location)
        if holder is None or holder.location != state.current_room:
            return False
        return not holder.openable or holder.open

    def _held(self, state: WorldState, oid: str) -> bool:
        o = state.objects.get(oid)
        return o is not None and o.location == INVENTORY

    def _here(self, state: WorldState, oid: str) -> bool:
        o = state.objects.get(oid)
        return o is not None and o.location == state.current_room

    def _allowed(self, state: WorldState, a: Action) -> bool:
        verb = a.verb
        if verb == "move":
            return a.target in self.rooms[state.current_room]
        if verb == "open" or verb == "close":
            if not self._here(state, a.obj):
                return False
            return state.objects[a.obj].open == (verb == "close")
        if verb == "take":
            return self._reachable(state, a.obj)
        if verb == "put":
            if not self._held(state, a.obj) or not self._here(state, a.target):
                return False
            h = state.objects[a.target]
            return not h.openable or h.open
        if verb == "cut":
            o = state.objects[a.obj]
            return (
                o.location == INVENTORY
                and o.cut_state == "uncut"
                and self._held(state, self.knife_id)
            )
        if verb == "cook":
            o = state.objects[a.obj]
            return (
                o.location == INVENTORY
                and o.cook_state == "raw"
                and self._here(state, self.appliances[a.target])
            )
        if verb == "eat":
            return self._held(state, a.obj)
        if verb == "read":
            return self._held(state, a.obj) or self._reachable(state, a.obj)
        if verb == "prepare":
            if a.obj in state.objects or state.current_room != self.recipe_room:
                return False
            if not state.cookbook_read:
                return False
            for ing, needed in self.recipe_ingredients.items():
                o = state.objects.get(ing)
                if o is None or o.location != INVENTORY:
                    return False
                if needed is not None and o.cut_state != needed:
                    return False
            return True
        return False

    # --------------------------------------------------------------- effects

    def _apply(self, state: WorldState, a: Action) -> tuple[WorldState, str, list[GroundEvent]]:
        t = state.step + 1
        objects = dict(state.objects)
        inventory = list(state.inventory)
        room = state.current_room
        cookbook_read = state.cookbook_read
        verb = a.verb

        if verb == "move":
            room = self.rooms[room][a.target]
            event = GroundEvent(t, "moved", None, room)
            new = WorldState(room, t, objects, tuple(inventory), cookbook_read)
            return new, self.render_room(new), [event]

        if verb == "open":
            objects[a.obj] = replace(objects[a.obj], open=True)
            contents = [f"the {oid}" for oid, o in objects.items() if o.location == a.obj]
            if contents:
                obs = f"You open the {a.obj}. It contains {_join(contents)}."
            else:
                obs = f"You open the {a.obj}. It is empty."
            event = GroundEvent(t, "opened", a.obj)
        elif verb == "close":
            objects[a.obj] = replace(objects[a.obj], open=False)
            obs = f"You close the {a.obj}."
            event = GroundEvent(t, "closed", a.obj)
        elif verb == "take":
            source = objects[a.obj].location
            objects[a.obj] = replace(objects[a.obj], location=INVENTORY)
            inventory.append(a.obj)
            obs = f"You pick up the {a.obj}."
            event = GroundEvent(t, "picked_up", a.obj, source)
        elif verb == "put":
            objects[a.obj] = replace(objects[a.obj], location=a.target)
            inventory.remove(a.obj)
            prep = "in" if self.holder_kind(a.target) == "container" else "on"
            obs = f"You put the {a.obj} {prep} the {a.target}."
            event = GroundEvent(t, "put", a.obj, a.target)
        elif verb == "cut":
            style = self.cut_styles[a.target]
            objects[a.obj] = replace(objects[a.obj], cut_state=style)
            obs = f"You {a.target} the {a.obj}."
            event = GroundEvent(t, "cut", a.obj, style)
        elif verb == "cook":
            style = self.cook_styles[a.target]
            objects[a.obj] = replace(objects[a.obj], cook_state=style)
            obs = f"You {a.target} the {a.obj} with the {self.appliances[a.target]}."
            event = GroundEvent(t, "cooked", a.obj, style)
        elif verb == "eat":
            objects[a.obj] = replace(objects[a.obj], location=CONSUMED, consumed=True)
            inventory.remove(a.obj)
            obs = f"You eat the {a.obj}."
            event = GroundEvent(t, "ate", a.obj)
        elif verb == "read":
            cookbook_read = True
            obs = f"You read the {a.obj}. {self.recipe_text}"
            event = GroundEvent(t, "read_cookbook", a.obj)
        elif verb == "prepare":
            for ing in self.recipe_ingredients:
                objects[ing] = replace(objects[ing], location=CONSUMED, consumed=True)
                inventory.remove(ing)
            objects[a.obj] = ObjectState(kind="meal", location=INVENTORY)
            inventory.append(a.obj)
            obs = f"You prepare the {a.obj}. Adding the {a.obj} to your inventory."
            event = GroundEvent(t, "prepared_meal", a.obj)
        else:  # pragma: no cover - catalogue only holds known verbs
            raise UnknownAction(a.text)

        new = WorldState(room, t, objects, tuple(inventory), cookbook_read)
        return new, obs, [event]

    # -------------------------------------------------------------- rendering

    def _indefinite(self, oid: str, o: ObjectState) -> str:
        words = []
        if o.cut_state != "uncut":
            words.append(o.cut_state)
        if o.cook_state != "raw":
            words.append(o.cook_state)
        words.append(oid)
        phrase = " ".join(words)
        if self._defs.get(oid, {}).get("mass"):
            return f"some {phrase}"
        return f"{'an' if phrase[0] in 'aeiou' else 'a'} {phrase}"

    def _describe_fixture(self, state: WorldState, fid: str) -> str:
        f = state.objects[fid]
        article = "an" if fid[0] in "aeiou" else "a"
        holder = self._defs[fid].get("holder")
        if holder is None:
            return f"{article} {fid}."
        items = [self._indefinite(oid, o) for oid, o in state.objects.items() if o.location == fid]
        if holder == "supporter":
            if items:
                return f"{article} {fid}, that has {_join(items)} on it."
            return f"{article} {fid}, that has nothing on it."
        if not f.open:
            return f"{article} {fid} that is closed."
        if items:
            return f"an open {fid}, that contains {_join(items)}."
        return f"an open {fid}, that is empty."

    def render_room(self, state: WorldState) -> str:
        room = state.current_room
        parts = [f"You are in the {room}."]
        fixtures = [oid for oid, o in state.objects.items() if o.location == room]
        if not fixtures:
            parts.append("There is nothing of interest here.")
        for i, fid in enumerate(fixtures):
            parts.append(f"{_OPENERS[i % len(_OPENERS)]} {self._describe_fixture(state, fid)}")
        for direction, dest in self.rooms[room].items():
            parts.append(f"To the {direction.capitalize()} you see the {dest}.")
        return " ".join(parts)


_default_world: KitchenWorld | None = None


def default_world() -> KitchenWorld:
    global _default_world
    if _default_world is None:
        _default_world = KitchenWorld()
    return _default_world
