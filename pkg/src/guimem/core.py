"""Domain types for trajectories, tasks, environments, and the growing pools.

All types are immutable value objects; pool updates produce new PoolState
instances rather than mutating in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping
from urllib.parse import urlsplit

from .actions import Action, ActionKind
from .errors import InvalidUrl

# The 13 seed task categories used throughout discovery and task synthesis.
SEED_CATEGORIES = (
    "education", "tech", "entertainment", "travel", "health", "news",
    "services", "shopping", "social", "food", "academic", "government",
    "finance",
)


@dataclass(frozen=True)
class ScreenshotRef:
    """Content-addressed reference to a stored screenshot.

    path: file name (relative to the media root the trajectory lives in)
    digest: 64-hex sha256 of the image file bytes
    size: (width, height) in pixels
    """

    path: str
    digest: str
    size: tuple[int, int]

    def __post_init__(self) -> None:
        if len(self.digest) != 64 or any(c not in "0123456789abcdef" for c in self.digest):
            raise ValueError(f"digest must be 64 lowercase hex chars, got {self.digest!r}")


@dataclass(frozen=True)
class SomLabel:
    """One set-of-mark entry: pixel bbox (x0, y0, x1, y1) and element text."""

    bbox: tuple[int, int, int, int]
    text: str


@dataclass(frozen=True)
class Observation:
    screenshot: ScreenshotRef
    som_labels: Mapping[int, SomLabel] | None = None
    page_url: str | None = None

    def __post_init__(self) -> None:
        if self.som_labels is None:
            return
        w, h = self.screenshot.size
        for label, som in self.som_labels.items():
            x0, y0, x1, y1 = som.bbox
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise ValueError(f"label {label} bbox {som.bbox} outside {w}x{h} image")


@dataclass(frozen=True)
class Step:
    observation: Observation
    action: Action
    index: int


class Outcome(Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    UNJUDGED = "unjudged"


@dataclass(frozen=True)
class Trajectory:
    id: str
    env_id: str
    task_id: str
    steps: tuple[Step, ...]
    outcome: Outcome = Outcome.UNJUDGED
    judge_note: str = ""

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("trajectory needs at least one step")
        for i, step in enumerate(self.steps):
            if step.index != i:
                raise ValueError(f"step indices must be contiguous from 0, got {step.index} at {i}")
            if step.action.kind is ActionKind.STOP and i != len(self.steps) - 1:
                raise ValueError("STOP must be the last step")
        if self.outcome is Outcome.SUCCESS and not self.judge_note:
            raise ValueError("success requires a recorded judge verdict note")


class EnvStatus(Enum):
    CANDIDATE = "candidate"
    ACCESSIBLE = "accessible"
    BLOCKED = "blocked"
    RETIRED = "retired"


@dataclass(frozen=True)
class Environment:
    id: str
    url: str  # normalized: scheme + host + first path level
    category: str
    description: str = ""
    status: EnvStatus = EnvStatus.CANDIDATE

    def __post_init__(self) -> None:
        if self.category not in SEED_CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if normalize_url(self.url) != self.url:
            raise ValueError(f"environment url must be normalized: {self.url!r}")


class Difficulty(Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


class Provenance(Enum):
    SEED = "seed"
    SYNTHESIZED = "synthesized"
    REFINED = "refined"


@dataclass(frozen=True)
class TaskQuery:
    id: str
    env_id: str  # "" for seed tasks, which predate any environment
    text: str
    expected_outcome: str
    difficulty: Difficulty
    provenance: Provenance
    category: str = ""
    refined_from: str = ""  # pre-refinement text; required when provenance=refined

    def __post_init__(self) -> None:
        if self.provenance is Provenance.REFINED and not self.refined_from:
            raise ValueError("refined tasks must link their pre-refinement text")
        if self.category and self.category not in SEED_CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")


@dataclass(frozen=True)
class PoolState:
    """The three growing pools, keyed by id.

    Pools only grow across iterations, and every stored trajectory carries a
    success verdict; enforcement lives in the flywheel's pool update and in
    the constructor check below.
    """

    tasks: Mapping[str, TaskQuery] = field(default_factory=dict)
    envs: Mapping[str, Environment] = field(default_factory=dict)
    trajs: Mapping[str, Trajectory] = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self) -> None:
        for traj in self.trajs.values():
            if traj.outcome is not Outcome.SUCCESS:
                raise ValueError(f"pooled trajectory {traj.id} lacks a success verdict")

    def with_added(self, tasks: Mapping[str, TaskQuery] = {},
                   envs: Mapping[str, Environment] = {},
                   trajs: Mapping[str, Trajectory] = {},
                   iteration: int | None = None) -> PoolState:
        """New state with entries merged in; existing ids are kept as-is."""
        return PoolState(
            tasks={**self.tasks, **{k: v for k, v in tasks.items() if k not in self.tasks}},
            envs={**self.envs, **{k: v for k, v in envs.items() if k not in self.envs}},
            trajs={**self.trajs, **{k: v for k, v in trajs.items() if k not in self.trajs}},
            iteration=self.iteration if iteration is None else iteration,
        )

    def is_subset_of(self, other: PoolState) -> bool:
        return (set(self.tasks) <= set(other.tasks)
                and set(self.envs) <= set(other.envs)
                and set(self.trajs) <= set(other.trajs))


@dataclass(frozen=True)
class EpisodeConfig:
    t_max: int = 15        # horizon cap
    judge_tail: int = 3    # final page states shown to the judge

    def __post_init__(self) -> None:
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if not 1 <= self.judge_tail <= self.t_max:
            raise ValueError("judge_tail must be in [1, t_max]")


def normalize_url(url: str) -> str:
    """Scheme + lowercase host + at most one path segment; idempotent.

    Query, fragment, userinfo, and default ports are dropped.
    """
    try:
        parts = urlsplit(url)
    except ValueError as exc:
        raise InvalidUrl(str(exc)) from exc
    scheme = parts.scheme.lower()
    if scheme not in ("http", "https"):
        raise InvalidUrl(f"not an absolute http(s) URL: {url!r}")
    host = parts.hostname
    if not host:
        raise InvalidUrl(f"URL has no host: {url!r}")
    host = host.lower()
    port = parts.port
    default = 80 if scheme == "http" else 443
    netloc = host if port in (None, default) else f"{host}:{port}"
    segments = [s for s in parts.path.split("/") if s]
    path = f"/{segments[0]}" if segments else ""
    return f"{scheme}://{netloc}{path}"


def validate_trajectory(traj: Trajectory, config: EpisodeConfig) -> None:
    """Enforce the config-dependent horizon invariant."""
    if len(traj.steps) > config.t_max:
        raise ValueError(f"trajectory {traj.id} exceeds horizon cap {config.t_max}")


def replace_outcome(traj: Trajectory, outcome: Outcome, note: str) -> Trajectory:
    return replace(traj, outcome=outcome, judge_note=note)
