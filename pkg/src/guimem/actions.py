"""The action grammar: five verbs, bracketed element labels, quoted text.

Canonical forms (one line each):

    CLICK [12]
    TYPE [7] "red shoes"
    SCROLL up
    WAIT
    STOP
    STOP "final answer"

A model reply may contain reasoning lines before the action line; the last
non-empty line is parsed as the action and everything above it becomes the
action's rationale. STOP optionally carries a quoted answer string for
information-seeking tasks.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .errors import MalformedLabel, MissingArgument, UnknownVerb


class ActionKind(Enum):
    CLICK = "CLICK"
    TYPE = "TYPE"
    SCROLL = "SCROLL"
    WAIT = "WAIT"
    STOP = "STOP"


class Direction(Enum):
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    target_label: int | None = None
    text: str | None = None
    direction: Direction | None = None
    rationale: str = ""

    def __post_init__(self) -> None:
        k = self.kind
        if k is ActionKind.CLICK:
            _require(self.target_label is not None, "CLICK requires target_label")
            _require(self.text is None and self.direction is None,
                     "CLICK takes no text or direction")
        elif k is ActionKind.TYPE:
            _require(self.target_label is not None, "TYPE requires target_label")
            _require(self.text is not None, "TYPE requires text")
            _require(self.direction is None, "TYPE takes no direction")
        elif k is ActionKind.SCROLL:
            _require(self.direction is not None, "SCROLL requires direction")
            _require(self.target_label is None and self.text is None,
                     "SCROLL takes no label or text")
        elif k is ActionKind.WAIT:
            _require(self.target_label is None and self.text is None
                     and self.direction is None, "WAIT takes no arguments")
        elif k is ActionKind.STOP:
            # text, when present, is the optional answer payload
            _require(self.target_label is None and self.direction is None,
                     "STOP takes no label or direction")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise MissingArgument(msg)


_LABEL_RE = re.compile(r"^\[(\d+)\]")


def render_action(action: Action) -> str:
    """Canonical single-line rendering (rationale is not rendered)."""
    k = action.kind
    if k is ActionKind.CLICK:
        return f"CLICK [{action.target_label}]"
    if k is ActionKind.TYPE:
        return f'TYPE [{action.target_label}] "{_escape(action.text or "")}"'
    if k is ActionKind.SCROLL:
        return f"SCROLL {action.direction.value}"  # type: ignore[union-attr]
    if k is ActionKind.WAIT:
        return "WAIT"
    if action.text is not None:
        return f'STOP "{_escape(action.text)}"'
    return "STOP"


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def _unescape(text: str) -> str:
    return text.replace('\\"', '"').replace("\\\\", "\\")


def parse_action(raw: str) -> Action:
    """Parse a model reply into an Action.

    Raises UnknownVerb, MissingArgument, or MalformedLabel; MalformedLabel
    carries the free-text target description so the caller can re-ground it.
    """
    lines = [ln for ln in raw.splitlines() if ln.strip()]
    if not lines:
        raise UnknownVerb("empty reply")
    action_line = lines[-1].strip()
    rationale = "\n".join(ln.strip() for ln in lines[:-1]).strip()

    verb, _, rest = action_line.partition(" ")
    rest = rest.strip()
    try:
        kind = ActionKind(verb.upper())
    except ValueError:
        raise UnknownVerb(f"unknown verb {verb!r}") from None

    if kind is ActionKind.CLICK:
        label, remainder = _parse_label(rest, "CLICK")
        if remainder:
            raise MalformedLabel(f"trailing text after CLICK label: {remainder!r}",
                                 description=rest)
        return Action(kind, target_label=label, rationale=rationale)

    if kind is ActionKind.TYPE:
        label, remainder = _parse_label(rest, "TYPE")
        text = _parse_quoted(remainder)
        if text is None:
            # an unquoted remainder still counts as the text to type
            if not remainder:
                raise MissingArgument("TYPE requires a quoted text argument")
            text = remainder
        return Action(kind, target_label=label, text=text, rationale=rationale)

    if kind is ActionKind.SCROLL:
        word = rest.split()[0].lower() if rest else ""
        if word not in ("up", "down"):
            raise MissingArgument(f"SCROLL requires a direction, got {rest!r}")
        return Action(kind, direction=Direction(word), rationale=rationale)

    if kind is ActionKind.WAIT:
        return Action(kind, rationale=rationale)

    # STOP, optional answer
    if not rest:
        return Action(kind, rationale=rationale)
    answer = _parse_quoted(rest)
    return Action(kind, text=answer if answer is not None else rest,
                  rationale=rationale)


def _parse_label(rest: str, verb: str) -> tuple[int, str]:
    """Extract a leading bracketed label; raise the right error otherwise."""
    if not rest:
        raise MissingArgument(f"{verb} requires a [label] argument")
    m = _LABEL_RE.match(rest)
    if not m:
        raise MalformedLabel(f"{verb} target is not a [label]: {rest!r}",
                             description=rest)
    return int(m.group(1)), rest[m.end():].strip()


def _parse_quoted(rest: str) -> str | None:
    """Return the content of a double-quoted string, honouring escapes.

    None when rest is not a quoted string.
    """
    if len(rest) < 2 or not rest.startswith('"'):
        return None
    body = []
    i = 1
    while i < len(rest):
        ch = rest[i]
        if ch == "\\" and i + 1 < len(rest) and rest[i + 1] in ('"', "\\"):
            body.append(rest[i + 1])
            i += 2
            continue
        if ch == '"':
            return "".join(body)
        body.append(ch)
        i += 1
    return None  # unterminated quote
