import numpy as np
import pytest

from conftest import task_query_for
from guimem.agent import MemoryMode, ScriptedPolicy, run_episode
from guimem.backbone import FrozenBackbone
from guimem.bank import (MemoryBank, MemoryContext, MemoryItem, ScoredMemory,
                         build_memory_bank, inject, load_bank, load_payloads,
                         save_bank, save_payloads)
from guimem.core import Outcome, PoolState, replace_outcome
from guimem.encoder import EncoderConfig, init_encoder_params
from guimem.errors import DimensionMismatch, SchemaVersionMismatch, WidthMismatch
from guimem.retrieval import FeatureHashEmbedder, RetrievalKey
from guimem.simenv import SimAnnotator, SimWorld, solve_bfs


def _item(tid: str, m=8, h=16, seed=0) -> MemoryItem:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(4)
    key = RetrievalKey(vector=(v / np.linalg.norm(v)).astype(np.float32),
                       source_id=tid)
    return MemoryItem(trajectory_id=tid, key=key,
                      payload=rng.standard_normal((m, h)).astype(np.float32))


def _context(*scored) -> MemoryContext:
    return MemoryContext(entries=tuple(
        ScoredMemory(item=item, score=score) for item, score in scored))


def test_inject_identity_on_empty_context():
    prompt = np.random.default_rng(0).standard_normal((10, 16))
    out = inject(MemoryContext(), prompt)
    assert np.array_equal(out, prompt)
    assert out is not prompt  # never hands back the caller's buffer


def test_inject_concatenation_lengths():
    prompt = np.random.default_rng(1).standard_normal((10, 16))
    before = prompt.copy()
    out = inject(_context((_item("a"), 0.9)), prompt)
    assert out.shape == (18, 16)
    assert np.array_equal(out[8:], prompt)       # prompt rows bit-identical
    assert np.array_equal(prompt, before)        # input not mutated


def test_inject_orders_by_descending_score():
    items = [(_item("a", seed=1), 0.9), (_item("b", seed=2), 0.8),
             (_item("c", seed=3), 0.7)]
    prompt = np.zeros((2, 16))
    out = inject(_context(*items), prompt)
    assert out.shape == (26, 16)
    for i, (item, _) in enumerate(items):
        assert np.allclose(out[i * 8:(i + 1) * 8], item.payload.astype(np.float64))


def test_context_must_be_sorted():
    with pytest.raises(ValueError):
        _context((_item("a"), 0.1), (_item("b"), 0.9))


def test_inject_width_mismatch():
    with pytest.raises(WidthMismatch):
        inject(_context((_item("a", h=16), 1.0)), np.zeros((4, 32)))


def test_bank_shape_checks():
    bank = MemoryBank(m_tokens=8, hidden=16)
    bank.add(_item("a"))
    with pytest.raises(DimensionMismatch):
        bank.add(_item("b", m=4))


def test_cmem_round_trip(tmp_path):
    items = [_item(f"t{i}", seed=i) for i in range(5)]
    path = tmp_path / "bank.cmem"
    save_payloads(items, path, m_tokens=8, hidden=16)
    m, h, payloads = load_payloads(path)
    assert (m, h) == (8, 16)
    assert sorted(payloads) == [f"t{i}" for i in range(5)]
    for item in items:
        assert payloads[item.trajectory_id].tobytes() == item.payload.tobytes()


def test_bank_and_index_round_trip(tmp_path):
    bank = MemoryBank(8, 16)
    for i in range(4):
        bank.add(_item(f"t{i}", seed=i))
    save_bank(bank, tmp_path / "bank.cmem", dim=4)
    loaded = load_bank(tmp_path / "bank.cmem")
    assert len(loaded) == 4
    for item in bank.items():
        got = loaded.get(item.trajectory_id)
        assert got.payload.tobytes() == item.payload.tobytes()
        assert got.key.vector.tobytes() == item.key.vector.tobytes()


def test_bank_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.cmem"
    path.write_bytes(b"NOPE" + b"\x00" * 24)
    with pytest.raises(SchemaVersionMismatch):
        load_payloads(path)


def test_build_memory_bank_from_pool(media, shop_world):
    task = task_query_for(shop_world, "budget-paint")
    env = SimWorld(shop_world, media, env_id=shop_world.id)
    plan = solve_bfs(shop_world, shop_world.tasks["budget-paint"])
    result = run_episode(env, task, ScriptedPolicy(plan), MemoryMode.NONE,
                         media, annotator=SimAnnotator(env), traj_id="tr0")
    pool = PoolState(
        tasks={task.id: task},
        trajs={"tr0": replace_outcome(result.trajectory, Outcome.SUCCESS, "ok")})
    cfg = EncoderConfig()
    bank = build_memory_bank(pool, media, FeatureHashEmbedder(dim=32, seed=0),
                             FrozenBackbone(), cfg,
                             init_encoder_params(cfg, seed=0))
    assert len(bank) == 1
    item = bank.get("tr0")
    assert item.payload.shape == (cfg.m_tokens, cfg.hidden_dim)
    assert item.key.source_id == "tr0"


def test_compression_ratio_versus_token_rendering(media, shop_world):
    # a trajectory whose text rendering exceeds 15,000 tokens still
    # compresses to 8 vectors: sequence-length ratio >= 1875
    from guimem.actions import Action, ActionKind
    from guimem.agent import render_trajectory_text
    from guimem.backbone import tokenize
    from guimem.core import Observation, Step, Trajectory

    pixels = np.zeros((8, 8, 3), dtype=np.uint8)
    ref = media.put(pixels)
    steps = []
    for i in range(200):
        action = Action(ActionKind.TYPE, target_label=i,
                        text=f"searching for item number {i} with many words "
                             f"to make the rendering long")
        steps.append(Step(observation=Observation(screenshot=ref),
                          action=action, index=i))
    traj = Trajectory(id="long", env_id="e", task_id="q", steps=tuple(steps))
    n_tokens = len(tokenize(render_trajectory_text(traj, "a long task")))
    assert n_tokens > 15_000
    assert n_tokens / EncoderConfig().m_tokens >= 1875
