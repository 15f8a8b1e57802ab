"""The four-phase pool-growing loop: discover environments via search,
synthesize and refine tasks with a VLM, roll out the agent, judge success.

Only judged-success trajectories (with their tasks and environments) enter
the pools, so the pools stay monotone and every stored trajectory carries a
verdict. With seeded mock clients an entire iteration is bit-reproducible.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .agent import Annotator, EnvAdapter, EpisodeResult, MemoryMode, Policy, \
    Termination, run_episode
from .core import Environment, EnvStatus, Difficulty, EpisodeConfig, Outcome, \
    PoolState, Provenance, SEED_CATEGORIES, TaskQuery, Trajectory, \
    normalize_url, replace_outcome
from .errors import ChatClientError, InvalidUrl, NavigationTimeout, \
    SearchClientError
from .gateway import ChatClient, ChatRequest, SearchClient, render_prompt
from .store import MediaStore
from .util import digest_text, record_line, rng_for


@dataclass(frozen=True)
class FlywheelConfig:
    queries_per_iteration: int = 5
    results_per_query: int = 20   # top search hits kept per query
    tasks_per_env: int = 10       # synthesized tasks per environment
    categories: tuple[str, ...] = SEED_CATEGORIES
    max_rollout_steps: int = 15
    seed: int = 0
    probe_retries: int = 2


@dataclass
class IterationReport:
    iteration: int
    candidates: int = 0
    blocked: int = 0
    accessible: int = 0
    unresolved: int = 0           # probe retries exhausted, still candidate
    tasks_synthesized: int = 0
    task_parse_failures: int = 0
    zero_task_envs: tuple[str, ...] = ()
    refine_failures: int = 0
    rollouts: int = 0
    rollout_steps: int = 0
    crashes: int = 0
    judged: int = 0
    successes: int = 0
    search_errors: tuple[str, ...] = ()
    probe_calls: int = 0
    synthesis_calls: int = 0
    refine_calls: int = 0
    judge_calls: int = 0

    def call_budget(self) -> int:
        """Analytic bound on chat calls this iteration: two probe calls per
        candidate, one synthesis call per accessible environment, one call
        per task refinement, one per rollout step, one per judged rollout.
        Probe retries are excluded (bounded separately by probe_retries).
        """
        return (2 * self.candidates + self.accessible
                + self.refine_calls + self.rollout_steps + self.judged)

    def chat_calls_total(self) -> int:
        return (self.probe_calls + self.synthesis_calls + self.refine_calls
                + self.judge_calls + self.rollout_steps)

    def to_records(self) -> list[str]:
        rec = {k: (list(v) if isinstance(v, tuple) else v)
               for k, v in vars(self).items()}
        rec["kind"] = "iteration_report"
        return [record_line(rec)]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_records()) + "\n", encoding="utf-8")


class Browser(Protocol):
    """Minimal probe surface: open the environment's landing page and
    screenshot it."""

    def open(self, url: str) -> bytes: ...


@dataclass
class FlywheelClients:
    search: SearchClient
    vlm: ChatClient
    judge: ChatClient
    browser: Browser
    env_factory: Callable[[Environment, Sequence[TaskQuery]], EnvAdapter]
    policy_factory: Callable[[Environment, TaskQuery], Policy]
    annotator_factory: Callable[[EnvAdapter], Annotator]
    media: MediaStore


# --- phase 1: discovery ---------------------------------------------------------

def _category_of(task: TaskQuery, state: PoolState) -> str:
    if task.category:
        return task.category
    env = state.envs.get(task.env_id)
    return env.category if env else ""


def sample_queries(state: PoolState, cfg: FlywheelConfig,
                   iteration: int) -> list[TaskQuery]:
    """Seeded stratified sample: walk shuffled categories round-robin,
    picking one random task per category until the quota is filled."""
    rng = rng_for(cfg.seed, "discover", iteration)
    by_category: dict[str, list[TaskQuery]] = {}
    for tid in sorted(state.tasks):
        task = state.tasks[tid]
        by_category.setdefault(_category_of(task, state), []).append(task)
    categories = sorted(c for c in by_category if c)
    if not categories:
        return []
    order = [categories[i] for i in rng.permutation(len(categories))]
    picked: list[TaskQuery] = []
    seen: set[str] = set()
    lane = 0
    while len(picked) < cfg.queries_per_iteration and len(seen) < len(
            [t for tasks in by_category.values() for t in tasks]):
        category = order[lane % len(order)]
        lane += 1
        pool = [t for t in by_category[category] if t.id not in seen]
        if not pool:
            continue
        task = pool[int(rng.integers(len(pool)))]
        seen.add(task.id)
        picked.append(task)
    return picked


def discover_environments(state: PoolState, search: SearchClient,
                          cfg: FlywheelConfig, iteration: int
                          ) -> tuple[list[Environment], list[str]]:
    """Search with sampled task texts; normalize, dedupe, drop known URLs."""
    known = {env.url for env in state.envs.values()}
    found: dict[str, Environment] = {}
    errors: list[str] = []
    for task in sample_queries(state, cfg, iteration):
        try:
            hits = search.search(task.text)[: cfg.results_per_query]
        except SearchClientError as exc:
            errors.append(f"query {task.id}: {exc}")
            continue
        for url in hits:
            try:
                norm = normalize_url(url)
            except InvalidUrl:
                continue
            if norm in known or norm in found:
                continue
            found[norm] = Environment(
                id=f"env-{digest_text(norm)[:12]}", url=norm,
                category=_category_of(task, state) or cfg.categories[0],
                status=EnvStatus.CANDIDATE)
    return [found[url] for url in sorted(found)], errors


# --- phase 1b: stability probe -----------------------------------------------------

def probe_environment(env: Environment, browser: Browser, vlm: ChatClient,
                      cfg: FlywheelConfig) -> tuple[Environment, int]:
    """Open, screenshot, ask for page content; 'blocked' replies and
    navigation timeouts mark the environment blocked. Chat failures retry
    up to cfg.probe_retries, then leave the candidate for next time.

    Returns the updated environment and the number of chat calls made.
    """
    if env.status is not EnvStatus.CANDIDATE:
        raise ValueError(f"probe expects a candidate, got {env.status}")
    try:
        shot = browser.open(env.url)
    except NavigationTimeout:
        return replace(env, status=EnvStatus.BLOCKED), 0
    calls = 0
    content_prompt = render_prompt("page_content_extraction", {"url": env.url})
    for _ in range(cfg.probe_retries + 1):
        try:
            calls += 1
            content = vlm.complete(ChatRequest(text=content_prompt, images=(shot,)))
            break
        except ChatClientError:
            content = None
    if content is None:
        return env, calls  # still a candidate; retried next iteration
    if content.strip().lower() == "blocked":
        return replace(env, status=EnvStatus.BLOCKED), calls

    info_prompt = render_prompt("page_info_extraction", {
        "url": env.url, "category": env.category, "page_content": content})
    for _ in range(cfg.probe_retries + 1):
        try:
            calls += 1
            summary = vlm.complete(ChatRequest(text=info_prompt, images=(shot,)))
            break
        except ChatClientError:
            summary = None
    if summary is None:
        return env, calls
    return replace(env, status=EnvStatus.ACCESSIBLE, description=summary), calls


# --- phase 2: task creation ----------------------------------------------------------

_TASK_LINE_RE = re.compile(r"^\s*\d+[.)]\s*(.+)$")


def _render_examples(exemplars: Sequence[TaskQuery]) -> str:
    lines = ["Here are example tasks from the same category:", ""]
    for i, task in enumerate(exemplars, start=1):
        lines.append(f"{i}. {task.text} | {task.expected_outcome} | "
                     f"{task.difficulty.value.capitalize()}")
    return "\n".join(lines)


def sample_exemplars(state: PoolState, category: str, cfg: FlywheelConfig,
                     env_id: str, n: int = 5) -> list[TaskQuery]:
    seeds = [state.tasks[tid] for tid in sorted(state.tasks)
             if state.tasks[tid].provenance is Provenance.SEED
             and state.tasks[tid].category == category]
    if not seeds:
        seeds = [state.tasks[tid] for tid in sorted(state.tasks)
                 if state.tasks[tid].provenance is Provenance.SEED]
    rng = rng_for(cfg.seed, "exemplars", env_id)
    idx = rng.permutation(len(seeds))[:n]
    return [seeds[int(i)] for i in idx]


def parse_task_lines(reply: str) -> tuple[list[tuple[str, str, Difficulty]], int]:
    """Parse `N. description | outcome | difficulty` lines; malformed lines
    are skipped and counted."""
    parsed: list[tuple[str, str, Difficulty]] = []
    failures = 0
    for line in reply.splitlines():
        if not line.strip():
            continue
        m = _TASK_LINE_RE.match(line)
        if not m:
            failures += 1
            continue
        fields = [f.strip() for f in m.group(1).split("|")]
        if len(fields) != 3:
            failures += 1
            continue
        desc, outcome, difficulty_raw = fields
        try:
            difficulty = Difficulty(difficulty_raw.lower())
        except ValueError:
            failures += 1
            continue
        if not desc:
            failures += 1
            continue
        parsed.append((desc, outcome, difficulty))
    return parsed, failures


def synthesize_tasks(env: Environment, vlm: ChatClient, cfg: FlywheelConfig,
                     state: PoolState) -> tuple[list[TaskQuery], int]:
    """One generation call per accessible environment; returns at most
    cfg.tasks_per_env valid tasks plus the malformed-line count."""
    exemplars = sample_exemplars(state, env.category, cfg, env.id)
    prompt = render_prompt("initial_task_generation", {
        "url": env.url, "category": env.category,
        "examples_section": _render_examples(exemplars),
        "info_summary": env.description,
    })
    reply = vlm.complete(ChatRequest(text=prompt))
    parsed, failures = parse_task_lines(reply)
    tasks = []
    for i, (desc, outcome, difficulty) in enumerate(parsed[: cfg.tasks_per_env]):
        tasks.append(TaskQuery(
            id=f"{env.id}-t{i:02d}", env_id=env.id, text=desc,
            expected_outcome=outcome, difficulty=difficulty,
            provenance=Provenance.SYNTHESIZED, category=env.category))
    return tasks, failures


_REFINED_RE = re.compile(r"^\s*REFINED:\s*(.+)$", re.MULTILINE)


def refine_task(task: TaskQuery, vlm: ChatClient) -> tuple[TaskQuery, bool]:
    """Rewrite the task text via the refinement prompt; on parse failure the
    original is kept and flagged. Returns (task, refined_ok)."""
    prompt = render_prompt("task_refinement", {"instruction": task.text})
    reply = vlm.complete(ChatRequest(text=prompt))
    m = _REFINED_RE.search(reply)
    if not m or not m.group(1).strip():
        return task, False
    refined = m.group(1).strip().strip("[]")
    return replace(task, text=refined, provenance=Provenance.REFINED,
                   refined_from=task.text), True


# --- phase 3: rollout ------------------------------------------------------------------

def rollout(task: TaskQuery, adapter: EnvAdapter, policy: Policy,
            cfg: FlywheelConfig, media: MediaStore,
            annotator: Annotator | None, traj_id: str,
            env_id: str) -> EpisodeResult:
    return run_episode(adapter, task, policy, MemoryMode.NONE, media,
                       cfg=EpisodeConfig(t_max=cfg.max_rollout_steps),
                       annotator=annotator, traj_id=traj_id, env_id=env_id)


# --- phase 4: judging ------------------------------------------------------------------

_VERDICT_RE = re.compile(r"VERDICT:\s*(success|failure)", re.IGNORECASE)


def judge(task: TaskQuery, traj: Trajectory, judge_client: ChatClient,
          media: MediaStore) -> tuple[bool, str]:
    """Send the full trajectory to the judge; unparseable verdicts count as
    failure (conservative)."""
    lines = [
        "Judge whether the agent completed the task successfully.",
        f"Episode: env={traj.env_id} task={task.id}",
        f"Task: {task.text}",
        f"Expected outcome: {task.expected_outcome}",
        "Actions:",
    ]
    images = []
    for step in traj.steps:
        from .actions import render_action
        lines.append(f"{step.index + 1}. {render_action(step.action)}")
        images.append(media.get_bytes(step.observation.screenshot))
    lines.append("Reply with 'VERDICT: success' or 'VERDICT: failure'.")
    reply = judge_client.complete(ChatRequest(text="\n".join(lines),
                                              images=tuple(images)))
    m = _VERDICT_RE.search(reply)
    if not m:
        return False, f"unparseable verdict: {reply[:120]!r}"
    return m.group(1).lower() == "success", reply.strip()


# --- the full loop ------------------------------------------------------------------------

def run_iteration(state: PoolState, clients: FlywheelClients,
                  cfg: FlywheelConfig) -> tuple[PoolState, IterationReport]:
    report = IterationReport(iteration=state.iteration)
    vlm_calls_before = len(clients.vlm.call_log)

    candidates, search_errors = discover_environments(
        state, clients.search, cfg, state.iteration)
    report.candidates = len(candidates)
    report.search_errors = tuple(search_errors)

    accessible: list[Environment] = []
    probe_calls = 0
    for env in candidates:
        probed, calls = probe_environment(env, clients.browser, clients.vlm, cfg)
        probe_calls += calls
        if probed.status is EnvStatus.ACCESSIBLE:
            accessible.append(probed)
        elif probed.status is EnvStatus.BLOCKED:
            report.blocked += 1
        else:
            report.unresolved += 1
    report.accessible = len(accessible)
    report.probe_calls = probe_calls

    new_tasks: dict[str, TaskQuery] = {}
    new_envs: dict[str, Environment] = {}
    new_trajs: dict[str, Trajectory] = {}
    zero_task_envs: list[str] = []

    for env in accessible:
        tasks, parse_failures = synthesize_tasks(env, clients.vlm, cfg, state)
        report.synthesis_calls += 1
        report.task_parse_failures += parse_failures
        if not tasks:
            zero_task_envs.append(env.id)
            continue
        refined: list[TaskQuery] = []
        for task in tasks:
            out, ok = refine_task(task, clients.vlm)
            report.refine_calls += 1
            if not ok:
                report.refine_failures += 1
            refined.append(out)
        report.tasks_synthesized += len(refined)

        adapter = clients.env_factory(env, refined)
        for task in refined:
            policy = clients.policy_factory(env, task)
            traj_id = f"{task.id}-traj"
            result = rollout(task, adapter, policy, cfg, clients.media,
                             clients.annotator_factory(adapter), traj_id, env.id)
            report.rollouts += 1
            report.rollout_steps += len(result.trajectory.steps)
            if result.termination is Termination.CRASH:
                report.crashes += 1
                continue  # crash-truncated rollouts never reach the judge
            verdict, note = judge(task, result.trajectory, clients.judge,
                                  clients.media)
            report.judge_calls += 1
            report.judged += 1
            if verdict:
                report.successes += 1
                new_trajs[traj_id] = replace_outcome(result.trajectory,
                                                     Outcome.SUCCESS, note)
                new_tasks[task.id] = task
                new_envs[env.id] = env

    report.zero_task_envs = tuple(zero_task_envs)
    assert len(clients.vlm.call_log) - vlm_calls_before == (
        report.probe_calls + report.synthesis_calls + report.refine_calls)

    new_state = state.with_added(tasks=new_tasks, envs=new_envs,
                                 trajs=new_trajs, iteration=state.iteration + 1)
    return new_state, report


# --- seed pool -------------------------------------------------------------------------------

_SEED_TASK_TEXTS: dict[str, list[tuple[str, str]]] = {
    "education": [
        ("Find a beginner study guide for algebra and open it",
         "An algebra study guide page is shown"),
        ("Locate the enrolment requirements for an online course",
         "A page listing enrolment requirements is shown"),
    ],
    "tech": [
        ("Find the changelog of the latest stable release",
         "A release changelog page is shown"),
        ("Locate the documentation page describing installation",
         "An installation guide page is shown"),
    ],
    "entertainment": [
        ("Find the highest rated comedy released this year",
         "A page for a highly rated comedy is shown"),
        ("Locate the schedule of upcoming live shows",
         "A live show schedule page is shown"),
    ],
    "travel": [
        ("Find a weekend itinerary for a coastal city",
         "An itinerary page for a coastal city is shown"),
        ("Locate visa requirements for short stays",
         "A visa requirements page is shown"),
    ],
    "health": [
        ("Find stretching routines recommended for desk workers",
         "A stretching routine page is shown"),
        ("Locate a seasonal vaccination schedule",
         "A vaccination schedule page is shown"),
    ],
    "news": [
        ("Find the most recent technology headline",
         "A current technology news article is shown"),
        ("Locate the weather report for tomorrow",
         "A weather report page is shown"),
    ],
    "services": [
        ("Find the price list for standard home cleaning",
         "A cleaning price list page is shown"),
        ("Locate the booking form for a repair appointment",
         "A booking form page is shown"),
    ],
    "shopping": [
        ("Find a beginner acrylic paint set under $40",
         "A qualifying paint set product page is shown"),
        ("Locate the return policy for online orders",
         "A return policy page is shown"),
    ],
    "social": [
        ("Find the community guidelines page",
         "The community guidelines page is shown"),
        ("Locate the most followed discussion group about cooking",
         "A cooking discussion group page is shown"),
    ],
    "food": [
        ("Find a vegetarian dinner recipe using lentils",
         "A lentil recipe page is shown"),
        ("Locate the allergen information for the menu",
         "An allergen information page is shown"),
    ],
    "academic": [
        ("Find the most cited paper on graph neural networks",
         "A highly cited paper page is shown"),
        ("Locate the submission deadlines for the next conference",
         "A deadlines page is shown"),
    ],
    "government": [
        ("Find the form for renewing a passport",
         "A passport renewal form page is shown"),
        ("Locate the public holiday calendar for this year",
         "A public holiday calendar is shown"),
    ],
    "finance": [
        ("Find the current exchange rate between euros and dollars",
         "An exchange rate page is shown"),
        ("Locate the fee schedule for basic checking accounts",
         "A fee schedule page is shown"),
    ],
}


def make_seed_pool() -> PoolState:
    """The built-in seed task pool: two curated queries per category,
    environments and trajectories empty."""
    tasks: dict[str, TaskQuery] = {}
    for category, entries in _SEED_TASK_TEXTS.items():
        for i, (text, outcome) in enumerate(entries):
            tid = f"seed-{category}-{i}"
            tasks[tid] = TaskQuery(
                id=tid, env_id="", text=text, expected_outcome=outcome,
                difficulty=Difficulty.MEDIUM, provenance=Provenance.SEED,
                category=category)
    return PoolState(tasks=tasks)
