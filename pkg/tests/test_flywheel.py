import dataclasses

import pytest

from conftest import task_query_for
from guimem.core import Difficulty, Environment, EnvStatus, Outcome, \
    PoolState, Provenance, TaskQuery
from guimem.errors import ChatClientError, NavigationTimeout
from guimem.flywheel import (FlywheelConfig, discover_environments, judge,
                             make_seed_pool, parse_task_lines,
                             probe_environment, refine_task, run_iteration,
                             sample_queries, synthesize_tasks)
from guimem.gateway import CallLog, ChatRequest, FixtureSearch, MockChat
from guimem.mockstack import ReplayJudgeClient, ScriptedSiteVlm, WorldRegistry, \
    goal_for_task_text, make_mock_clients
from guimem.simenv import SimAnnotator, SimTask, SimWorld, solve_bfs
from guimem.store import MediaStore, save_pool
from guimem.worlds import make_shop_world

CFG = FlywheelConfig(seed=11, queries_per_iteration=2, results_per_query=5,
                     tasks_per_env=4)


def test_seed_pool_covers_all_categories():
    pool = make_seed_pool()
    categories = {t.category for t in pool.tasks.values()}
    assert len(categories) == 13
    assert all(t.provenance is Provenance.SEED for t in pool.tasks.values())
    assert not pool.envs and not pool.trajs


def test_sample_queries_stratified():
    pool = make_seed_pool()
    picked = sample_queries(pool, FlywheelConfig(seed=0, queries_per_iteration=5), 0)
    assert len(picked) == 5
    assert len({t.category for t in picked}) == 5  # distinct categories first


def test_discover_dedupes_and_drops_known():
    pool = make_seed_pool()
    first = sorted(pool.tasks)[0]
    fixture = {pool.tasks[t].text: ["https://Shared.example.org/a/b",
                                    "https://shared.example.org/a/zzz",
                                    "https://other.example.org/c"]
               for t in sorted(pool.tasks)}
    search = FixtureSearch(fixture=fixture)
    candidates, errors = discover_environments(pool, search, CFG, 0)
    assert not errors
    urls = [c.url for c in candidates]
    # two queries sharing hits still yield each normalized URL exactly once
    assert urls == ["https://other.example.org/c", "https://shared.example.org/a"]

    known = Environment(id="known", url="https://shared.example.org/a",
                        category="news", status=EnvStatus.ACCESSIBLE)
    pool2 = dataclasses.replace(pool, envs={"known": known})
    candidates2, _ = discover_environments(pool2, search, CFG, 0)
    assert [c.url for c in candidates2] == ["https://other.example.org/c"]


def test_discover_twenty_fixed_urls_on_empty_pool():
    pool = make_seed_pool()
    urls = [f"https://site-{i:02d}.example.org/p" for i in range(20)]
    fixture = {t.text: urls for t in pool.tasks.values()}
    cfg = FlywheelConfig(seed=0, queries_per_iteration=1, results_per_query=20)
    candidates, _ = discover_environments(pool, FixtureSearch(fixture=fixture),
                                          cfg, 0)
    assert len(candidates) == 20
    assert all(c.status is EnvStatus.CANDIDATE for c in candidates)


def test_discover_search_errors_are_non_fatal():
    pool = make_seed_pool()
    cfg = FlywheelConfig(seed=0, queries_per_iteration=3)
    sampled = sample_queries(pool, cfg, 0)
    search = FixtureSearch(n_results=2, failing_queries=[sampled[0].text])
    candidates, errors = discover_environments(pool, search, cfg, 0)
    assert len(errors) == 1
    assert candidates  # remaining queries still contributed


CANDIDATE = Environment(id="env-x", url="https://site.example.org/a",
                        category="news", status=EnvStatus.CANDIDATE)


class OneShotBrowser:
    def open(self, url):
        from guimem.store import encode_ppm
        import numpy as np
        return encode_ppm(np.zeros((8, 8, 3), dtype=np.uint8))


def test_probe_blocked_stops_after_one_call():
    vlm = MockChat(seed=0, rules=[("extract all useful information in detail",
                                   "blocked")])
    env, calls = probe_environment(CANDIDATE, OneShotBrowser(), vlm, CFG)
    assert env.status is EnvStatus.BLOCKED
    assert calls == 1


def test_probe_accessible_fills_description():
    vlm = MockChat(seed=0, rules=[
        ("extract all useful information in detail", "a news landing page"),
        ("extract all useful information for task generation", "summary text")])
    env, calls = probe_environment(CANDIDATE, OneShotBrowser(), vlm, CFG)
    assert env.status is EnvStatus.ACCESSIBLE
    assert env.description == "summary text"
    assert calls == 2


def test_probe_navigation_timeout_blocks():
    class TimeoutBrowser:
        def open(self, url):
            raise NavigationTimeout(url)

    env, calls = probe_environment(CANDIDATE, TimeoutBrowser(), MockChat(), CFG)
    assert env.status is EnvStatus.BLOCKED
    assert calls == 0


def test_probe_chat_failure_retries_then_keeps_candidate():
    class FailingVlm:
        name = "failing"

        def __init__(self):
            self.call_log = CallLog()
            self.calls = 0

        def complete(self, request):
            self.calls += 1
            raise ChatClientError("503")

    vlm = FailingVlm()
    env, calls = probe_environment(CANDIDATE, OneShotBrowser(), vlm, CFG)
    assert env.status is EnvStatus.CANDIDATE
    assert calls == CFG.probe_retries + 1


def test_parse_task_lines():
    reply = "\n".join([
        "1. Find cheapest laptop | Shows a laptop under filter | Medium",
        "2. broken line without pipes",
        "3. Too | few",
        "4. Check the news | News page open | HARD",
        "5. Mystery | Outcome | impossible-difficulty",
    ])
    parsed, failures = parse_task_lines(reply)
    assert failures == 3
    assert parsed[0] == ("Find cheapest laptop", "Shows a laptop under filter",
                         Difficulty.MEDIUM)
    assert parsed[1][2] is Difficulty.HARD


def test_synthesize_ten_well_formed_lines(media):
    env = dataclasses.replace(CANDIDATE, status=EnvStatus.ACCESSIBLE,
                              description="summary")
    lines = "\n".join(f"{i + 1}. Task {i} | Outcome {i} | easy"
                      for i in range(10))
    vlm = MockChat(seed=0, rules=[("generate 10 diverse task problems", lines)])
    cfg = FlywheelConfig(seed=0, tasks_per_env=10)
    tasks, failures = synthesize_tasks(env, vlm, cfg, make_seed_pool())
    assert len(tasks) == 10
    assert failures == 0
    assert all(t.provenance is Provenance.SYNTHESIZED for t in tasks)
    assert all(t.env_id == env.id and t.category == env.category for t in tasks)


def test_refine_replaces_text_and_keeps_link():
    task = TaskQuery(id="t", env_id="e", text="Click the Import button to import mail",
                     expected_outcome="mail imported", difficulty=Difficulty.EASY,
                     provenance=Provenance.SYNTHESIZED, category="tech")
    vlm = MockChat(seed=0, rules=[(
        "You will be given a task instruction",
        "ORIGINAL: whatever\nREFINED: Please import email messages from another program")])
    refined, ok = refine_task(task, vlm)
    assert ok
    assert refined.text == "Please import email messages from another program"
    assert refined.refined_from == task.text
    assert refined.provenance is Provenance.REFINED


def test_refine_parse_failure_keeps_original():
    task = TaskQuery(id="t", env_id="e", text="Do the thing",
                     expected_outcome="done", difficulty=Difficulty.EASY,
                     provenance=Provenance.SYNTHESIZED, category="tech")
    vlm = MockChat(seed=0, rules=[("You will be given a task instruction",
                                   "no structured reply here")])
    refined, ok = refine_task(task, vlm)
    assert not ok
    assert refined == task
    # a refinement equal to the original is accepted as a no-op
    vlm2 = MockChat(seed=0, rules=[("You will be given a task instruction",
                                    "ORIGINAL: Do the thing\nREFINED: Do the thing")])
    refined2, ok2 = refine_task(task, vlm2)
    assert ok2 and refined2.text == task.text


def test_judge_replay_oracle(media, shop_world):
    registry = WorldRegistry()
    registry.register("env-shop", shop_world)
    judge_client = ReplayJudgeClient(registry)

    from guimem.agent import MemoryMode, ScriptedPolicy, run_episode
    task = task_query_for(shop_world, "budget-paint")
    env = SimWorld(shop_world, media, env_id="env-shop")
    plan = solve_bfs(shop_world, shop_world.tasks["budget-paint"])
    good = run_episode(env, task, ScriptedPolicy(plan), MemoryMode.NONE, media,
                       annotator=SimAnnotator(env), traj_id="ok",
                       env_id="env-shop")
    verdict, note = judge(task, good.trajectory, judge_client, media)
    assert verdict and "VERDICT: success" in note

    env2 = SimWorld(shop_world, media, env_id="env-shop")
    bad = run_episode(env2, task, ScriptedPolicy(plan[:1]), MemoryMode.NONE,
                      media, annotator=SimAnnotator(env2), traj_id="bad",
                      env_id="env-shop")
    verdict2, _ = judge(task, bad.trajectory, judge_client, media)
    assert not verdict2


def test_judge_unparseable_is_failure(media, shop_world):
    from guimem.agent import MemoryMode, ScriptedPolicy, run_episode
    task = task_query_for(shop_world, "budget-paint")
    env = SimWorld(shop_world, media)
    plan = solve_bfs(shop_world, shop_world.tasks["budget-paint"])
    result = run_episode(env, task, ScriptedPolicy(plan), MemoryMode.NONE,
                         media, annotator=SimAnnotator(env), traj_id="t")
    vlm = MockChat(seed=0, rules=[("Judge whether", "hmm, hard to say")])
    verdict, note = judge(task, result.trajectory, vlm, media)
    assert not verdict
    assert "unparseable" in note


def test_goal_keywords_survive_refinement():
    for text in ("Could you locate the contact details page for the site owners?",
                 "please open the latest news section of the site"):
        goal = goal_for_task_text(text)
        assert goal.of[0].page in ("contact", "news")


def test_run_iteration_gate_dedup_budget_monotone(tmp_path):
    media = MediaStore(tmp_path / "media")
    clients = make_mock_clients(media, seed=11)
    state = make_seed_pool()
    new_state, report = run_iteration(state, clients, CFG)

    assert state.is_subset_of(new_state)
    assert new_state.iteration == 1
    # gate soundness: every pooled trajectory has a success verdict
    for traj in new_state.trajs.values():
        assert traj.outcome is Outcome.SUCCESS
        assert traj.judge_note
    # URL dedup across the whole environment pool
    urls = [env.url for env in new_state.envs.values()]
    assert len(urls) == len(set(urls))
    # budget: actual chat calls within the analytic bound
    assert report.chat_calls_total() <= report.call_budget()
    assert report.successes == len(new_state.trajs)
    assert len(clients.vlm.call_log) == (report.probe_calls
                                         + report.synthesis_calls
                                         + report.refine_calls)
    assert len(clients.judge.call_log) == report.judge_calls


def test_run_iteration_rejecting_judge_only_bumps_iteration(tmp_path):
    media = MediaStore(tmp_path / "media")
    clients = make_mock_clients(media, seed=11)

    class RejectingJudge:
        name = "reject-all"

        def __init__(self):
            self.call_log = CallLog()

        def complete(self, request):
            self.call_log.append(request.digest(), "VERDICT: failure")
            return "VERDICT: failure"

    clients.judge = RejectingJudge()
    state = make_seed_pool()
    new_state, report = run_iteration(state, clients, CFG)
    assert report.successes == 0
    assert new_state.tasks == state.tasks
    assert new_state.envs == state.envs
    assert new_state.trajs == state.trajs
    assert new_state.iteration == state.iteration + 1


def test_run_iteration_bit_reproducible(tmp_path):
    def run(tag):
        media = MediaStore(tmp_path / tag / "media")
        clients = make_mock_clients(media, seed=42)
        state = make_seed_pool()
        for _ in range(2):
            state, report = run_iteration(state, clients, CFG)
        digest = save_pool(state, tmp_path / tag / "pool", media)
        manifest = (tmp_path / tag / "pool" / "pool.manifest").read_bytes()
        return digest, manifest, report

    d1, m1, r1 = run("a")
    d2, m2, r2 = run("b")
    assert d1 == d2
    assert m1 == m2
    assert vars(r1) == vars(r2)
