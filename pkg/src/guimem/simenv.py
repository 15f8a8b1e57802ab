"""Deterministic page-graph GUI simulator.

A world is a declarative definition (pages with widgets, click transitions
guarded by typed input, tasks with goal predicates) plus a tiny runtime that
renders pages to pixels, executes the five action kinds, and freezes after
STOP. Identical action sequences always produce identical screenshots, and
a breadth-first solver doubles as the test oracle: executing its plan must
satisfy the goal predicate.

World files are versioned line-record text, one record per page, element,
transition, and task.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .actions import Action, ActionKind, Direction
from .core import Observation, SomLabel
from .draw import draw_text, fill_rect, new_canvas, rect_border, text_width
from .errors import SchemaVersionMismatch
from .store import MediaStore
from .util import parse_record_line, record_line

WORLD_FORMAT_VERSION = 1
SCROLL_STEP = 60

_KIND_COLORS = {
    "button": (70, 110, 200),
    "link": (60, 150, 90),
    "input": (255, 255, 255),
    "text": (222, 222, 214),
}


@dataclass(frozen=True)
class SimElement:
    label: int
    bbox: tuple[int, int, int, int]  # page coordinates, pre-scroll
    text: str
    etype: str  # button | link | input | text

    def __post_init__(self) -> None:
        if self.etype not in _KIND_COLORS:
            raise ValueError(f"unknown element type {self.etype!r}")


@dataclass(frozen=True)
class SimPage:
    id: str
    title: str
    elements: tuple[SimElement, ...] = ()
    height: int = 0  # content height; 0 means viewport height

    def __post_init__(self) -> None:
        labels = [e.label for e in self.elements]
        if len(labels) != len(set(labels)):
            raise ValueError(f"page {self.id} has duplicate element labels")


@dataclass(frozen=True)
class Transition:
    """CLICK on (page, label) goes to `goto` when all guarded inputs match."""

    page: str
    label: int
    goto: str
    requires: Mapping[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Goal:
    """Predicate over world state.

    type: "on_page" (page=...), "stopped", "answer_contains" (value=...),
    or "all" (of=[...]).
    """

    type: str
    page: str = ""
    value: str = ""
    of: tuple["Goal", ...] = ()

    def to_record(self) -> dict:
        if self.type == "all":
            return {"type": "all", "of": [g.to_record() for g in self.of]}
        if self.type == "on_page":
            return {"type": "on_page", "page": self.page}
        if self.type == "answer_contains":
            return {"type": "answer_contains", "value": self.value}
        return {"type": self.type}

    @staticmethod
    def from_record(rec: Mapping) -> "Goal":
        t = rec["type"]
        if t == "all":
            return Goal(type="all", of=tuple(Goal.from_record(r) for r in rec["of"]))
        return Goal(type=t, page=rec.get("page", ""), value=rec.get("value", ""))

    def answer_values(self) -> list[str]:
        if self.type == "answer_contains":
            return [self.value]
        return [v for g in self.of for v in g.answer_values()]


@dataclass(frozen=True)
class SimTask:
    id: str
    text: str
    expected_outcome: str
    difficulty: str
    goal: Goal


@dataclass(frozen=True)
class WorldDef:
    id: str
    start_page: str
    pages: Mapping[str, SimPage]
    transitions: tuple[Transition, ...]
    tasks: Mapping[str, SimTask]
    category: str = "services"
    viewport: tuple[int, int] = (320, 240)
    theme: tuple[int, int, int] = (245, 245, 245)  # page background tint


# --- world state ---------------------------------------------------------------

@dataclass(frozen=True)
class WorldState:
    page: str
    inputs: tuple[tuple[str, int, str], ...] = ()   # (page, label, value)
    scrolls: tuple[tuple[str, int], ...] = ()       # (page, offset)
    stopped: bool = False
    answer: str = ""

    def input_value(self, page: str, label: int) -> str:
        for p, l, v in self.inputs:
            if p == page and l == label:
                return v
        return ""

    def scroll_of(self, page: str) -> int:
        for p, off in self.scrolls:
            if p == page:
                return off
        return 0

    def with_input(self, page: str, label: int, value: str) -> "WorldState":
        rest = tuple((p, l, v) for p, l, v in self.inputs if (p, l) != (page, label))
        return WorldState(page=self.page, inputs=tuple(sorted(rest + ((page, label, value),))),
                          scrolls=self.scrolls, stopped=self.stopped, answer=self.answer)

    def with_scroll(self, page: str, offset: int) -> "WorldState":
        rest = tuple((p, o) for p, o in self.scrolls if p != page)
        scrolls = tuple(sorted(rest + ((page, offset),))) if offset else tuple(sorted(rest))
        return WorldState(page=self.page, inputs=self.inputs, scrolls=scrolls,
                          stopped=self.stopped, answer=self.answer)


def _norm(text: str) -> str:
    return " ".join(text.strip().lower().split())


class SimWorld:
    """Runtime for one episode. Implements the environment adapter surface:
    reset, observe, apply, current_url."""

    def __init__(self, definition: WorldDef, media: MediaStore, env_id: str = ""):
        self.definition = definition
        self.media = media
        self.env_id = env_id
        self.state = WorldState(page=definition.start_page)
        self.active_task: SimTask | None = None

    # --- adapter surface ---------------------------------------------------

    def reset(self, task_id: str | None = None) -> Observation:
        self.state = WorldState(page=self.definition.start_page)
        self.active_task = self.definition.tasks[task_id] if task_id else None
        return self.observe()

    def current_url(self) -> str:
        return f"https://{self.definition.id}.sim/{self.state.page}"

    def observe(self) -> Observation:
        pixels = render_page(self.definition, self.state)
        ref = self.media.put(pixels)
        return Observation(screenshot=ref, page_url=self.current_url())

    def apply(self, action: Action) -> Observation:
        self.state = apply_action(self.definition, self.state, action)
        return self.observe()

    # --- oracle surface -----------------------------------------------------

    def goal_check(self) -> bool:
        if self.active_task is None:
            return False
        return eval_goal(self.active_task.goal, self.state)

    def visible_elements(self) -> list[SimElement]:
        return visible_elements(self.definition, self.state)

    def page_text(self) -> str:
        page = self.definition.pages[self.state.page]
        return " | ".join([page.title] + [e.text for e in page.elements])


class SimAnnotator:
    """Ground-truth SOM source: the world's visible elements, with screen
    (post-scroll) boxes and the currently displayed text."""

    def __init__(self, world: SimWorld):
        self.world = world

    def labels(self, obs: Observation) -> list[tuple[int, SomLabel]]:
        state = self.world.state
        offset = state.scroll_of(state.page)
        out = []
        for el in visible_elements(self.world.definition, state):
            x0, y0, x1, y1 = el.bbox
            shown = el.text
            if el.etype == "input":
                value = state.input_value(state.page, el.label)
                if value:
                    shown = value
            out.append((el.label, SomLabel(bbox=(x0, y0 - offset, x1, y1 - offset),
                                           text=shown)))
        return out


def visible_elements(world: WorldDef, state: WorldState) -> list[SimElement]:
    """Elements fully inside the viewport at the page's scroll offset."""
    page = world.pages[state.page]
    offset = state.scroll_of(state.page)
    _, vh = world.viewport
    out = []
    for el in page.elements:
        x0, y0, x1, y1 = el.bbox
        if y0 - offset >= 0 and y1 - offset <= vh:
            out.append(el)
    return out


def _max_scroll(world: WorldDef, page: SimPage) -> int:
    _, vh = world.viewport
    content = page.height or vh
    return max(0, content - vh)


def apply_action(world: WorldDef, state: WorldState, action: Action) -> WorldState:
    """Pure transition function; STOP freezes the state permanently."""
    if state.stopped:
        return state
    kind = action.kind
    if kind is ActionKind.WAIT:
        return state
    if kind is ActionKind.STOP:
        return WorldState(page=state.page, inputs=state.inputs, scrolls=state.scrolls,
                          stopped=True, answer=action.text or "")
    if kind is ActionKind.SCROLL:
        page = world.pages[state.page]
        offset = state.scroll_of(state.page)
        if action.direction is Direction.DOWN:
            new = min(offset + SCROLL_STEP, _max_scroll(world, page))
        else:
            new = max(offset - SCROLL_STEP, 0)
        return state.with_scroll(state.page, new)

    visible = {el.label: el for el in visible_elements(world, state)}
    target = visible.get(action.target_label)
    if target is None:
        return state  # clicking or typing at nothing does nothing
    if kind is ActionKind.TYPE:
        if target.etype != "input":
            return state
        return state.with_input(state.page, target.label, action.text or "")
    # CLICK: first matching transition in definition order
    for tr in world.transitions:
        if tr.page != state.page or tr.label != target.label:
            continue
        if all(_norm(state.input_value(state.page, l)) == _norm(v)
               for l, v in tr.requires.items()):
            return WorldState(page=tr.goto, inputs=state.inputs,
                              scrolls=state.scrolls, stopped=False,
                              answer=state.answer)
    return state


def eval_goal(goal: Goal, state: WorldState) -> bool:
    if goal.type == "all":
        return all(eval_goal(g, state) for g in goal.of)
    if goal.type == "on_page":
        return state.page == goal.page
    if goal.type == "stopped":
        return state.stopped
    if goal.type == "answer_contains":
        return _norm(goal.value) in _norm(state.answer)
    raise ValueError(f"unknown goal type {goal.type!r}")


# --- rendering --------------------------------------------------------------------

def _blend(a: tuple[int, int, int], b: tuple[int, int, int],
           weight_a: int = 6) -> tuple[int, int, int]:
    return tuple((ca * weight_a + cb * (10 - weight_a)) // 10
                 for ca, cb in zip(a, b))


def render_page(world: WorldDef, state: WorldState) -> np.ndarray:
    page = world.pages[state.page]
    w, h = world.viewport
    img = new_canvas(w, h, color=world.theme)
    fill_rect(img, 0, 0, w, 14, (50, 50, 60))
    draw_text(img, 4, 3, page.title[: w // 6 - 2], (240, 240, 240))
    offset = state.scroll_of(state.page)
    for el in page.elements:
        x0, y0, x1, y1 = el.bbox
        y0s, y1s = y0 - offset, y1 - offset
        if y1s <= 14 or y0s >= h:
            continue
        color = _KIND_COLORS[el.etype]
        if el.etype in ("button", "link"):
            color = _blend(color, world.theme)
        fill_rect(img, x0, y0s, x1, y1s, color)
        border = (30, 30, 30) if el.etype == "input" else tuple(max(0, c - 40) for c in color)
        rect_border(img, x0, y0s, x1, y1s, border)
        shown = el.text
        if el.etype == "input":
            value = state.input_value(state.page, el.label)
            shown = value if value else el.text
            text_color = (20, 20, 20)
        else:
            text_color = (250, 250, 250) if el.etype != "text" else (40, 40, 40)
        max_chars = max(1, (x1 - x0 - 6) // 6)
        draw_text(img, x0 + 3, y0s + max(2, ((y1s - y0s) - 7) // 2),
                  shown[:max_chars], text_color)
    return img


# --- solver ------------------------------------------------------------------------

def _candidate_types(world: WorldDef, page_id: str) -> dict[int, list[str]]:
    """Texts worth typing into each input on a page: every guard value any
    transition checks for that input."""
    texts: dict[int, list[str]] = {}
    for tr in world.transitions:
        if tr.page != page_id:
            continue
        for label, value in tr.requires.items():
            texts.setdefault(label, [])
            if value not in texts[label]:
                texts[label].append(value)
    return texts


def _enumerate_actions(world: WorldDef, state: WorldState,
                       answers: list[str]) -> Iterable[Action]:
    if state.stopped:
        return
    visible = visible_elements(world, state)
    clickable = sorted({tr.label for tr in world.transitions if tr.page == state.page})
    vis_labels = {el.label for el in visible}
    for label in clickable:
        if label in vis_labels:
            yield Action(ActionKind.CLICK, target_label=label)
    candidates = _candidate_types(world, state.page)
    for el in visible:
        if el.etype != "input":
            continue
        for text in candidates.get(el.label, []):
            if _norm(state.input_value(state.page, el.label)) != _norm(text):
                yield Action(ActionKind.TYPE, target_label=el.label, text=text)
    page = world.pages[state.page]
    offset = state.scroll_of(state.page)
    if offset < _max_scroll(world, page):
        yield Action(ActionKind.SCROLL, direction=Direction.DOWN)
    if offset > 0:
        yield Action(ActionKind.SCROLL, direction=Direction.UP)
    yield Action(ActionKind.STOP)
    for answer in answers:
        yield Action(ActionKind.STOP, text=answer)


def solve_bfs(world: WorldDef, task: SimTask,
              start: WorldState | None = None,
              max_depth: int = 25) -> list[Action] | None:
    """Shortest action sequence (STOP included) satisfying the task goal.

    Returns None when the goal is unreachable within max_depth.
    """
    state = start if start is not None else WorldState(page=world.start_page)
    answers = task.goal.answer_values()
    if eval_goal(task.goal, state):
        return []
    seen = {state}
    queue: deque[tuple[WorldState, list[Action]]] = deque([(state, [])])
    while queue:
        current, plan = queue.popleft()
        if len(plan) >= max_depth:
            continue
        for action in _enumerate_actions(world, current, answers):
            nxt = apply_action(world, current, action)
            if nxt == current or nxt in seen:
                continue
            seen.add(nxt)
            next_plan = plan + [action]
            if eval_goal(task.goal, nxt):
                return next_plan
            queue.append((nxt, next_plan))
    return None


def validate_world(world: WorldDef, max_depth: int = 25) -> dict[str, int]:
    """BFS-check that every task goal is reachable; returns optimal step
    counts by task id. Raises when a goal is unreachable."""
    optimal = {}
    for task_id in sorted(world.tasks):
        plan = solve_bfs(world, world.tasks[task_id], max_depth=max_depth)
        if plan is None:
            raise ValueError(f"task {task_id} goal unreachable in world {world.id}")
        optimal[task_id] = len(plan)
    return optimal


# --- persistence ---------------------------------------------------------------------

def save_world(world: WorldDef, path: str | Path) -> None:
    lines = [record_line({
        "kind": "world", "format_version": WORLD_FORMAT_VERSION, "id": world.id,
        "start_page": world.start_page, "viewport": list(world.viewport),
        "category": world.category, "theme": list(world.theme),
    })]
    for page_id in sorted(world.pages):
        page = world.pages[page_id]
        lines.append(record_line({"kind": "page", "id": page.id, "title": page.title,
                                  "height": page.height}))
        for el in page.elements:
            lines.append(record_line({
                "kind": "element", "page": page.id, "label": el.label,
                "bbox": list(el.bbox), "text": el.text, "etype": el.etype,
            }))
    for tr in world.transitions:
        lines.append(record_line({
            "kind": "transition", "page": tr.page, "label": tr.label,
            "goto": tr.goto, "requires": {str(k): v for k, v in sorted(tr.requires.items())},
        }))
    for task_id in sorted(world.tasks):
        task = world.tasks[task_id]
        lines.append(record_line({
            "kind": "task", "id": task.id, "text": task.text,
            "expected_outcome": task.expected_outcome,
            "difficulty": task.difficulty, "goal": task.goal.to_record(),
        }))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_world(path: str | Path) -> WorldDef:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
    head = parse_record_line(lines[0])
    if head.get("kind") != "world" or head.get("format_version") != WORLD_FORMAT_VERSION:
        raise SchemaVersionMismatch(f"not a world file: {path}")
    pages: dict[str, dict] = {}
    transitions: list[Transition] = []
    tasks: dict[str, SimTask] = {}
    for line in lines[1:]:
        rec = parse_record_line(line)
        if rec["kind"] == "page":
            pages[rec["id"]] = {"title": rec["title"], "height": rec["height"],
                                "elements": []}
        elif rec["kind"] == "element":
            pages[rec["page"]]["elements"].append(SimElement(
                label=rec["label"], bbox=tuple(rec["bbox"]), text=rec["text"],
                etype=rec["etype"]))
        elif rec["kind"] == "transition":
            transitions.append(Transition(
                page=rec["page"], label=rec["label"], goto=rec["goto"],
                requires={int(k): v for k, v in rec["requires"].items()}))
        elif rec["kind"] == "task":
            tasks[rec["id"]] = SimTask(
                id=rec["id"], text=rec["text"],
                expected_outcome=rec["expected_outcome"],
                difficulty=rec["difficulty"], goal=Goal.from_record(rec["goal"]))
        else:
            raise SchemaVersionMismatch(f"unknown world record kind {rec['kind']!r}")
    return WorldDef(
        id=head["id"], start_page=head["start_page"],
        pages={pid: SimPage(id=pid, title=p["title"], height=p["height"],
                            elements=tuple(p["elements"]))
               for pid, p in pages.items()},
        transitions=tuple(transitions), tasks=tasks,
        category=head["category"], viewport=tuple(head["viewport"]),
        theme=tuple(head.get("theme", (245, 245, 245))),
    )
