"""A fully deterministic client stack for mock flywheel runs and tests.

Every component is a pure function of its request plus a seed: the scripted
VLM answers the probe/generation/refinement prompts, the plan policy solves
the simulated site with breadth-first search from whatever page the request
shows, and the judge replays the episode's actions against the world's goal
predicate. A shared registry maps environment ids to the site worlds the
iteration created, so policy and judge always agree on the ground truth.
"""

from __future__ import annotations

import dataclasses
import re
from typing import Sequence

from .actions import parse_action, render_action
from .agent import Annotator, ChatPolicy, EnvAdapter, MemoryMode, Policy, \
    ScriptedPolicy, run_episode
from .core import Difficulty, Environment, Outcome, PoolState, Provenance, \
    TaskQuery, replace_outcome
from .errors import NavigationTimeout, UnknownVerb, MissingArgument, \
    MalformedLabel
from .gateway import CallLog, ChatRequest, FixtureSearch
from .flywheel import FlywheelClients
from .simenv import Goal, SimAnnotator, SimTask, SimWorld, WorldDef, \
    WorldState, apply_action, eval_goal, render_page, solve_bfs
from .store import MediaStore, encode_ppm
from .util import derive_seed, rng_for
from .worlds import make_site_world

# (keyword, description, expected outcome, difficulty-as-written, solvable)
TASK_TEMPLATES: tuple[tuple[str, str, str, str, bool], ...] = (
    ("about", "Find the page that tells visitors about this site and stay on it",
     "The about page is open", "easy", True),
    ("products", "Show the full list of products this site offers",
     "The products page is open", "Medium", True),
    ("contact", "Locate the contact details page for the site owners",
     "The contact page is open", "EASY", True),
    ("news", "Open the latest news section of the site",
     "The news page is open", "hard", True),
    ("vault", "Open the hidden vault archive page of the site",
     "The vault archive page is open", "Hard", False),
    ("admin", "Reach the secret admin dashboard of the site",
     "The admin dashboard is open", "medium", False),
)


def goal_for_task_text(text: str) -> Goal:
    lowered = text.lower()
    for keyword, *_ in TASK_TEMPLATES:
        if keyword in lowered:
            return Goal(type="all", of=(Goal(type="on_page", page=keyword),
                                        Goal(type="stopped")))
    return Goal(type="all", of=(Goal(type="on_page", page="nowhere"),
                               Goal(type="stopped")))


class WorldRegistry:
    """Site worlds by environment id, shared by policy and judge."""

    def __init__(self) -> None:
        self._worlds: dict[str, WorldDef] = {}

    def register(self, env_id: str, world: WorldDef) -> None:
        self._worlds[env_id] = world

    def get(self, env_id: str) -> WorldDef | None:
        return self._worlds.get(env_id)


_URL_LINE_RE = re.compile(r"^URL: (\S+)$", re.MULTILINE)
_TASK_LINE_RE = re.compile(r"^Task: (.+)$", re.MULTILINE)
_EPISODE_LINE_RE = re.compile(r"^Episode: env=(\S+) task=(\S+)$", re.MULTILINE)
_SIM_URL_RE = re.compile(r"https://[^/]+\.sim/(\S+)")


class ScriptedSiteVlm:
    """Answers the four flywheel prompts deterministically.

    A seeded fraction of URLs probe as blocked; task generation samples the
    template registry; refinement rewraps the instruction, preserving its
    goal keyword.
    """

    def __init__(self, seed: int = 0, blocked_modulus: int = 4,
                 name: str = "scripted-vlm"):
        self.seed = seed
        self.blocked_modulus = blocked_modulus
        self.name = name
        self.call_log = CallLog()

    def _reply(self, request: ChatRequest) -> str:
        text = request.text
        if "extract all useful information in detail" in text:
            url = _URL_LINE_RE.search(text).group(1)
            if derive_seed(self.seed, "blocked", url) % self.blocked_modulus == 0:
                return "blocked"
            return (f"Landing page for {url} with navigation links to the "
                    f"About, Products, Contact and News sections.")
        if "extract all useful information for task generation" in text:
            url = _URL_LINE_RE.search(text).group(1)
            return (f"Navigation site at {url}: four sections (about, "
                    f"products, contact, news) reachable from the home page; "
                    f"each section links back home.")
        if "generate 10 diverse task problems" in text:
            url = _URL_LINE_RE.search(text).group(1)
            rng = rng_for(self.seed, "taskgen", url)
            lines = []
            for i in range(10):
                _, desc, outcome, difficulty, _ = TASK_TEMPLATES[
                    int(rng.integers(len(TASK_TEMPLATES)))]
                lines.append(f"{i + 1}. {desc} | {outcome} | {difficulty}")
            return "\n".join(lines)
        if "You will be given a task instruction" in text:
            m = re.search(r"The original instruction is:\n\n(.*?)\n\n", text,
                          re.DOTALL)
            instruction = m.group(1).strip() if m else ""
            style = derive_seed(self.seed, "refine", instruction) % 3
            if style == 0:
                refined = f"Please {instruction[0].lower()}{instruction[1:]}"
            elif style == 1:
                refined = f"Could you {instruction[0].lower()}{instruction[1:]}?"
            else:
                refined = instruction
            return f"ORIGINAL: {instruction}\nREFINED: {refined}"
        return "mock-vlm: unrecognised prompt"

    def complete(self, request: ChatRequest) -> str:
        reply = self._reply(request)
        self.call_log.append(request.digest(), reply)
        return reply


class SiteBrowser:
    """Probe browser: renders the site world's landing page for any URL.

    URLs listed in timeout_urls raise NavigationTimeout.
    """

    def __init__(self, timeout_urls: Sequence[str] = ()):
        self.timeout_urls = set(timeout_urls)

    def open(self, url: str) -> bytes:
        if url in self.timeout_urls:
            raise NavigationTimeout(url)
        world = make_site_world(url, "services")
        pixels = render_page(world, WorldState(page=world.start_page))
        return encode_ppm(pixels)


class PlanPolicyClient:
    """Chat client whose replies are the next optimal action.

    It reads the task text and current page out of the request, rebuilds the
    world state, and answers with the first step of a breadth-first plan; a
    pure function of the request, so episodes are reproducible.
    """

    def __init__(self, registry: WorldRegistry, name: str = "plan-policy"):
        self.registry = registry
        self.name = name
        self.call_log = CallLog()

    def _reply(self, request: ChatRequest) -> str:
        task_m = _TASK_LINE_RE.search(request.text)
        url_m = _SIM_URL_RE.search(request.text)
        if not task_m or not url_m:
            return "WAIT"
        page = url_m.group(1)
        world_id = url_m.group(0).split("//")[1].split(".sim")[0]
        world = next((w for w in self.registry._worlds.values()
                      if w.id == world_id), None)
        if world is None:
            return "WAIT"
        goal = goal_for_task_text(task_m.group(1))
        task = SimTask(id="probe", text=task_m.group(1), expected_outcome="",
                       difficulty="easy", goal=goal)
        plan = solve_bfs(world, task, start=WorldState(page=page), max_depth=8)
        if not plan:
            return "No route to the goal from here.\nSTOP"
        return f"Heading for the goal.\n{render_action(plan[0])}"

    def complete(self, request: ChatRequest) -> str:
        reply = self._reply(request)
        self.call_log.append(request.digest(), reply)
        return reply


class ReplayJudgeClient:
    """Judge oracle: replays the episode's actions in a fresh world and
    answers from the goal predicate."""

    def __init__(self, registry: WorldRegistry, name: str = "sim-judge"):
        self.registry = registry
        self.name = name
        self.call_log = CallLog()

    def _reply(self, request: ChatRequest) -> str:
        m = _EPISODE_LINE_RE.search(request.text)
        if not m:
            return "VERDICT: failure\nno episode identifier"
        env_id, task_id = m.group(1), m.group(2)
        world = self.registry.get(env_id)
        if world is None or task_id not in world.tasks:
            return "VERDICT: failure\nunknown episode"
        state = WorldState(page=world.start_page)
        replayed = 0
        for line in request.text.splitlines():
            am = re.match(r"^\d+\.\s+(.*)$", line)
            if not am:
                continue
            try:
                action = parse_action(am.group(1))
            except (UnknownVerb, MissingArgument, MalformedLabel):
                continue
            state = apply_action(world, state, action)
            replayed += 1
        ok = eval_goal(world.tasks[task_id].goal, state)
        verdict = "success" if ok else "failure"
        return f"VERDICT: {verdict}\nreplayed {replayed} actions"

    def complete(self, request: ChatRequest) -> str:
        reply = self._reply(request)
        self.call_log.append(request.digest(), reply)
        return reply


def _site_env_factory(registry: WorldRegistry, media: MediaStore):
    def factory(env: Environment, tasks: Sequence[TaskQuery]) -> EnvAdapter:
        world = make_site_world(env.url, env.category)
        sim_tasks = {t.id: SimTask(id=t.id, text=t.text,
                                   expected_outcome=t.expected_outcome,
                                   difficulty=t.difficulty.value,
                                   goal=goal_for_task_text(t.text))
                     for t in tasks}
        world = dataclasses.replace(world, tasks=sim_tasks)
        registry.register(env.id, world)
        return SimWorld(world, media, env_id=env.id)
    return factory


# --- memory-benefit fixture -----------------------------------------------------

class MemoryGuidedPolicy:
    """Deterministic policy whose success depends on retrieval quality.

    With retrieved memories (continuous entries or text-rendered plans) it
    replays the best hit's action plan, which transfers across isomorphic
    siblings; without memories it falls back to a stable hash-derived walk,
    so memoryless behaviour is a pure function of the request and identical
    between mode=none and mode=continuous with an empty bank.
    """

    def __init__(self, plans: dict[str, list], seed: int = 0):
        self.plans = plans
        self.seed = seed
        self.name = "memory-guided"
        self._cursor = 0
        self._plan_key: tuple[str, ...] | None = None

    def _plan_from_text(self, user: str) -> list | None:
        if "Past experience 1:" not in user:
            return None
        actions = []
        in_block = False
        for line in user.splitlines():
            if line.startswith("Past experience 1:"):
                in_block = True
                continue
            if in_block:
                m = re.match(r"^\s+\d+\.\s+(.*)$", line)
                if m:
                    try:
                        actions.append(parse_action(m.group(1)))
                    except (UnknownVerb, MissingArgument, MalformedLabel):
                        pass
                elif actions:
                    break
        return actions or None

    def _vote(self, entries) -> list | None:
        """Majority plan among the retrieved memories; score breaks ties.

        Ensembling the k hits beats following the single top item when a
        hub key from the wrong family sneaks into first place.
        """
        tallies: dict[tuple[str, ...], list] = {}
        votes: dict[tuple[str, ...], float] = {}
        for rank, entry in enumerate(entries):
            plan = self.plans.get(entry.item.trajectory_id)
            if plan is None:
                continue
            key = tuple(render_action(a) for a in plan)
            tallies[key] = plan
            votes[key] = votes.get(key, 0.0) + 1.0 - rank * 1e-6
        if not votes:
            return None
        winner = max(votes, key=lambda k: votes[k])
        return tallies[winner]

    def act(self, request) -> str:
        plan = None
        if len(request.injected):
            plan = self._vote(request.injected.entries)
        else:
            plan = self._plan_from_text(request.user)
        if plan is not None:
            # cursor keyed on plan content: equal-scoring siblings share
            # identical plans, so rank flips between steps cannot restart it
            key = tuple(render_action(a) for a in plan)
            if self._plan_key != key:
                self._plan_key = key
                self._cursor = 0
            if self._cursor < len(plan):
                action = plan[self._cursor]
                self._cursor += 1
                return render_action(action)
            return "STOP"
        # memoryless fallback: stable pseudo-random click, stop on leaves
        labels = [int(m.group(1)) for m in
                  re.finditer(r"^\[(\d+)\]", request.user, re.MULTILINE)]
        url_m = _SIM_URL_RE.search(request.user)
        page = url_m.group(1) if url_m else ""
        if not labels:
            return "STOP"
        pick = labels[derive_seed(self.seed, "walk", page) % len(labels)]
        return f"CLICK [{pick}]"


def family_task_query(world: WorldDef) -> TaskQuery:
    """The TaskQuery counterpart of a family world's single task."""
    sim_task = next(iter(world.tasks.values()))
    return TaskQuery(id=f"{world.id}-{sim_task.id}", env_id=world.id,
                     text=sim_task.text, expected_outcome=sim_task.expected_outcome,
                     difficulty=Difficulty.MEDIUM,
                     provenance=Provenance.SYNTHESIZED, category=world.category)


def family_episode_env(world: WorldDef, media: MediaStore,
                       task: TaskQuery) -> SimWorld:
    """SimWorld with the TaskQuery's id registered for reset/goal_check."""
    sim_task = next(iter(world.tasks.values()))
    registered = dataclasses.replace(world, tasks={
        **world.tasks,
        task.id: dataclasses.replace(sim_task, id=task.id),
    })
    return SimWorld(registered, media, env_id=world.id)


def build_family_pool(worlds: Sequence[WorldDef], media: MediaStore
                      ) -> tuple[PoolState, dict[str, list]]:
    """Roll the oracle over every world; returns the success-only pool and
    each trajectory's plan (keyed by trajectory id = world id)."""
    tasks: dict[str, TaskQuery] = {}
    trajs = {}
    plans: dict[str, list] = {}
    for world in worlds:
        sim_task = next(iter(world.tasks.values()))
        plan = solve_bfs(world, sim_task)
        if plan is None:
            raise ValueError(f"world {world.id} task unreachable")
        task = family_task_query(world)
        env = family_episode_env(world, media, task)
        result = run_episode(env, task, ScriptedPolicy(plan), MemoryMode.NONE,
                             media, annotator=SimAnnotator(env),
                             traj_id=world.id, env_id=world.id)
        if not env.goal_check():
            raise ValueError(f"oracle failed on {world.id}")
        tasks[task.id] = task
        trajs[world.id] = replace_outcome(result.trajectory, Outcome.SUCCESS,
                                          "oracle plan reached the goal")
        plans[world.id] = plan
    return PoolState(tasks=tasks, trajs=trajs), plans


def make_mock_clients(media: MediaStore, seed: int = 0,
                      search_fixture=None,
                      timeout_urls: Sequence[str] = ()) -> FlywheelClients:
    """The full deterministic stack for `--mock` flywheel runs."""
    registry = WorldRegistry()
    plan_client = PlanPolicyClient(registry)

    def policy_factory(env: Environment, task: TaskQuery) -> Policy:
        return ChatPolicy(plan_client)

    def annotator_factory(adapter: EnvAdapter) -> Annotator:
        return SimAnnotator(adapter)  # type: ignore[arg-type]

    return FlywheelClients(
        search=FixtureSearch(fixture=search_fixture, seed=seed),
        vlm=ScriptedSiteVlm(seed=seed),
        judge=ReplayJudgeClient(registry),
        browser=SiteBrowser(timeout_urls=timeout_urls),
        env_factory=_site_env_factory(registry, media),
        policy_factory=policy_factory,
        annotator_factory=annotator_factory,
        media=media,
    )
