"""The episode loop: observe, annotate, retrieve, prompt, act.

Memory enters the loop in one of three modes: none (plain prompting), text
(retrieved trajectories rendered as prompt text), or continuous (retrieved
compressed payloads carried as an injected-embedding block). Retrieval runs
once per step from the current observation. Grounding failures degrade to
WAIT so rollouts stay alive for the flywheel.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Protocol, Sequence

import numpy as np

from .actions import Action, ActionKind, parse_action, render_action
from .bank import MemoryBank, MemoryContext, inject
from .core import EpisodeConfig, Observation, PoolState, SomLabel, TaskQuery, \
    Trajectory, Step
from .draw import draw_text, rect_border, fill_rect, text_width
from .errors import AnnotatorFailure, EnvironmentCrash, GroundingFailure, \
    MalformedLabel, MissingArgument, ModeUnsupportedByClient, UnknownVerb
from .gateway import ChatClient, ChatRequest
from .retrieval import Embedder, VectorIndex, build_query_key
from .store import MediaStore

SYSTEM_PROMPT = (
    "You are a GUI agent operating a web interface from screenshots. "
    "Interactive elements are marked with numbered labels. Respond with "
    "brief reasoning, then exactly one action line from this toolset: "
    "CLICK [label] / TYPE [label] \"text\" / SCROLL up|down / WAIT / "
    "STOP [\"answer\"]. Page analysis tools are provided by the "
    "environment and need no extra action kinds."
)


class MemoryMode(Enum):
    NONE = "none"
    TEXT = "text"
    CONTINUOUS = "continuous"


class Termination(Enum):
    STOPPED = "stopped"
    HORIZON = "horizon"
    CRASH = "crash"


@dataclass(frozen=True)
class PolicyRequest:
    system: str
    user: str
    images: tuple[bytes, ...] = ()
    injected: MemoryContext = MemoryContext()

    def injected_matrix(self) -> np.ndarray | None:
        return self.injected.payload_matrix()


class Policy(Protocol):
    name: str

    def act(self, request: PolicyRequest) -> str: ...


@dataclass(frozen=True)
class EpisodeResult:
    trajectory: Trajectory
    termination: Termination
    step_latency_s: tuple[float, ...]
    incidents: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        last_is_stop = self.trajectory.steps[-1].action.kind is ActionKind.STOP
        if (self.termination is Termination.STOPPED) != last_is_stop:
            raise ValueError("termination=stopped iff the last action is STOP")


class EnvAdapter(Protocol):
    """Shared surface of the simulator and the real-browser adapter."""

    def reset(self, task_id: str | None = None) -> Observation: ...

    def observe(self) -> Observation: ...

    def apply(self, action: Action) -> Observation: ...

    def current_url(self) -> str: ...


class Annotator(Protocol):
    """Produces (label, SomLabel) pairs for the current observation."""

    def labels(self, obs: Observation) -> Sequence[tuple[int, SomLabel]]: ...


class Resolver(Protocol):
    """Maps a natural-language element description to pixel coordinates."""

    def locate(self, description: str, obs: Observation) -> tuple[int, int] | None: ...


@dataclass
class MemorySources:
    """Everything retrieval needs during an episode."""

    embedder: Embedder
    index: VectorIndex
    bank: MemoryBank
    pool: PoolState | None = None  # required for text-mode rendering
    k: int = 3


# --- SOM annotation -----------------------------------------------------------------

def som_annotate(obs: Observation, annotator: Annotator,
                 media: MediaStore) -> Observation:
    """Draw numbered markers on the screenshot and attach the label map.

    Raises AnnotatorFailure on duplicate ids or out-of-image boxes.
    """
    pairs = list(annotator.labels(obs))
    ids = [label for label, _ in pairs]
    if len(ids) != len(set(ids)):
        raise AnnotatorFailure(f"duplicate som label ids: {sorted(ids)}")
    w, h = obs.screenshot.size
    pixels = media.get_pixels(obs.screenshot)
    for label, som in sorted(pairs):
        x0, y0, x1, y1 = som.bbox
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise AnnotatorFailure(f"label {label} bbox {som.bbox} outside image")
        rect_border(pixels, x0, y0, x1, y1, (220, 40, 40))
        tag = str(label)
        tw = text_width(tag) + 3
        fill_rect(pixels, x0, y0, min(x1, x0 + tw), min(y1, y0 + 9), (220, 40, 40))
        draw_text(pixels, x0 + 2, y0 + 1, tag, (255, 255, 255))
    ref = media.put(pixels)
    return Observation(screenshot=ref, som_labels=dict(sorted(pairs)),
                       page_url=obs.page_url)


# --- grounding fallback ----------------------------------------------------------------

def ground_fallback(description: str, obs: Observation,
                    resolver: Resolver) -> int:
    """Resolve a description to the SOM label whose box contains the
    resolver's point; smallest containing box wins ties."""
    point = resolver.locate(description, obs)
    if point is None or not obs.som_labels:
        raise GroundingFailure(f"no location for {description!r}")
    x, y = point
    containing = []
    for label, som in obs.som_labels.items():
        x0, y0, x1, y1 = som.bbox
        if x0 <= x < x1 and y0 <= y < y1:
            containing.append(((x1 - x0) * (y1 - y0), label))
    if not containing:
        raise GroundingFailure(f"point {point} is outside every labelled box")
    return min(containing)[1]


_STOP_WORDS = {"the", "a", "an", "to", "of", "on", "in", "and", "or", "it",
               "for", "with", "this", "that"}


class TextMatchResolver:
    """Sim-grade resolver: picks the labelled element sharing the most words
    with the description and returns its box centre."""

    def locate(self, description: str, obs: Observation) -> tuple[int, int] | None:
        if not obs.som_labels:
            return None
        wanted = {w.strip(".,'\"!?") for w in description.lower().split()}
        wanted -= _STOP_WORDS
        best: tuple[int, int] | None = None
        best_score = 0.0
        for label, som in sorted(obs.som_labels.items()):
            words = {w.strip(".,'\"!?") for w in som.text.lower().split()}
            shared = len(wanted & words)
            if not shared:
                continue
            # favour elements whose whole text is covered by the description
            score = shared + shared / len(words)
            if score > best_score:
                best_score = score
                x0, y0, x1, y1 = som.bbox
                best = ((x0 + x1) // 2, (y0 + y1) // 2)
        return best


# --- prompt assembly --------------------------------------------------------------------

def render_trajectory_text(traj: Trajectory, task_text: str) -> str:
    """Fixed text rendering of a retrieved trajectory: its query, then the
    enumerated action lines."""
    lines = [f"Task: {task_text}"]
    for step in traj.steps:
        lines.append(f"  {step.index + 1}. {render_action(step.action)}")
    return "\n".join(lines)


def describe_elements(obs: Observation) -> list[str]:
    if not obs.som_labels:
        return ["(no labelled elements)"]
    return [f"[{label}] '{som.text}'" for label, som in sorted(obs.som_labels.items())]


def assemble_prompt(task: TaskQuery, obs: Observation, mode: MemoryMode,
                    context: MemoryContext = MemoryContext(),
                    text_memories: Sequence[str] = (),
                    media: MediaStore | None = None) -> PolicyRequest:
    """Build the policy request for one step.

    none: task + labelled screenshot. text: adds the retrieved trajectories
    rendered as text. continuous: adds the injected-embedding block.
    """
    parts = [f"Task: {task.text}", f"URL: {obs.page_url or ''}", "Elements:"]
    parts.extend(describe_elements(obs))
    if mode is MemoryMode.TEXT:
        for i, block in enumerate(text_memories):
            parts.append(f"Past experience {i + 1}:")
            parts.append(block)
    parts.append("Respond with one action line.")
    images: tuple[bytes, ...] = ()
    if media is not None:
        images = (media.get_bytes(obs.screenshot),)
    injected = context if mode is MemoryMode.CONTINUOUS else MemoryContext()
    return PolicyRequest(system=SYSTEM_PROMPT, user="\n".join(parts),
                         images=images, injected=injected)


# --- policies ------------------------------------------------------------------------------

class ChatPolicy:
    """Wraps a pure chat client; cannot carry injected embeddings."""

    def __init__(self, client: ChatClient):
        self.client = client
        self.name = f"chat:{client.name}"

    def act(self, request: PolicyRequest) -> str:
        if len(request.injected):
            raise ModeUnsupportedByClient(
                f"{self.name} cannot accept continuous memory blocks")
        return self.client.complete(ChatRequest(
            text=request.user, system=request.system, images=request.images))


class ToyLmPolicy:
    """Decodes from the toy backbone with memories injected at the input
    embedding layer; the real continuous-memory path in miniature."""

    def __init__(self, backbone, max_prompt_tokens: int = 192):
        from .backbone import detokenize, tokenize
        self._backbone = backbone
        self._tokenize = tokenize
        self._detokenize = detokenize
        self.max_prompt_tokens = max_prompt_tokens
        self.name = "toy-lm"

    def act(self, request: PolicyRequest) -> str:
        ids = self._tokenize(request.user)[-self.max_prompt_tokens:]
        prompt = self._backbone.embed_tokens(ids)
        embeds = inject(request.injected, prompt)
        out = self._backbone.decode_greedy(embeds, token_pos_offset=len(ids))
        return self._detokenize(out)


class ScriptedPolicy:
    """Replays a fixed action plan, then STOPs."""

    def __init__(self, plan: Sequence[Action], name: str = "scripted"):
        self.plan = list(plan)
        self.name = name
        self._cursor = 0

    def act(self, request: PolicyRequest) -> str:
        if self._cursor < len(self.plan):
            action = self.plan[self._cursor]
            self._cursor += 1
            return render_action(action)
        return "STOP"


class NeverStopPolicy:
    name = "never-stop"

    def act(self, request: PolicyRequest) -> str:
        return "SCROLL down"


# --- the loop -------------------------------------------------------------------------------

def step_policy(policy: Policy, request: PolicyRequest, obs: Observation,
                resolver: Resolver | None = None) -> tuple[Action, str | None]:
    """Query the policy and parse its action; re-ground malformed targets
    and degrade to WAIT when everything fails.

    Returns (action, incident description or None).
    """
    reply = policy.act(request)
    try:
        return parse_action(reply), None
    except MalformedLabel as exc:
        if resolver is not None:
            try:
                label = ground_fallback(exc.description, obs, resolver)
            except GroundingFailure as ground_exc:
                return Action(ActionKind.WAIT), f"grounding failed twice: {ground_exc}"
            verb = reply.strip().splitlines()[-1].split()[0].upper()
            if verb == "TYPE":
                return Action(ActionKind.WAIT), "TYPE fallback lacks text"
            return Action(ActionKind.CLICK, target_label=label), None
        return Action(ActionKind.WAIT), f"malformed label: {exc}"
    except (MissingArgument, UnknownVerb) as exc:
        return Action(ActionKind.WAIT), f"unparseable action: {exc}"


def retrieve_context(obs: Observation, task: TaskQuery, memory: MemorySources,
                     media: MediaStore,
                     exclude: str | None = None) -> MemoryContext:
    if len(memory.bank) == 0:
        return MemoryContext()
    key = build_query_key(obs, task.text, memory.embedder, media)
    hits = memory.index.topk(key, memory.k + (1 if exclude else 0))
    return memory.bank.context_for(hits[: memory.k] if not exclude
                                   else [h for h in hits if h[0] != exclude][: memory.k])


def text_blocks_for(context: MemoryContext, pool: PoolState | None) -> list[str]:
    if pool is None:
        return []
    blocks = []
    for entry in context.entries:
        traj = pool.trajs.get(entry.item.trajectory_id)
        if traj is None:
            continue
        task = pool.tasks.get(traj.task_id)
        blocks.append(render_trajectory_text(traj, task.text if task else ""))
    return blocks


def run_episode(env: EnvAdapter, task: TaskQuery, policy: Policy,
                mode: MemoryMode, media: MediaStore,
                cfg: EpisodeConfig = EpisodeConfig(),
                memory: MemorySources | None = None,
                annotator: Annotator | None = None,
                resolver: Resolver | None = None,
                traj_id: str | None = None,
                env_id: str = "",
                attach_images: bool = False) -> EpisodeResult:
    """One ReAct episode. Never exceeds cfg.t_max steps; STOP is terminal."""
    obs = env.reset(task.id)
    steps: list[Step] = []
    incidents: list[str] = []
    latencies: list[float] = []
    termination = Termination.HORIZON

    for t in range(cfg.t_max):
        t0 = time.perf_counter()
        if annotator is not None:
            try:
                obs = som_annotate(obs, annotator, media)
            except AnnotatorFailure as exc:
                incidents.append(f"step {t}: annotator failure: {exc}")
        context = MemoryContext()
        if mode is not MemoryMode.NONE and memory is not None:
            context = retrieve_context(obs, task, memory, media, exclude=traj_id)
        text_memories = text_blocks_for(context, memory.pool if memory else None) \
            if mode is MemoryMode.TEXT else ()
        request = assemble_prompt(task, obs, mode, context=context,
                                  text_memories=text_memories,
                                  media=media if attach_images else None)
        action, incident = step_policy(policy, request, obs, resolver)
        if incident:
            incidents.append(f"step {t}: {incident}")
        steps.append(Step(observation=obs, action=action, index=t))
        latencies.append(time.perf_counter() - t0)
        try:
            obs = env.apply(action)
        except EnvironmentCrash as exc:
            incidents.append(f"step {t}: crash: {exc}")
            if action.kind is not ActionKind.STOP:
                termination = Termination.CRASH
                break
        if action.kind is ActionKind.STOP:
            termination = Termination.STOPPED
            break

    trajectory = Trajectory(
        id=traj_id or f"ep-{task.id}",
        env_id=env_id or getattr(env, "env_id", ""),
        task_id=task.id,
        steps=tuple(steps),
    )
    return EpisodeResult(trajectory=trajectory, termination=termination,
                         step_latency_s=tuple(latencies),
                         incidents=tuple(incidents))
