import numpy as np
import pytest

from guimem.backbone import FrozenBackbone
from guimem.core import PoolState
from guimem.encoder import EncoderConfig, init_encoder_params, trainable_names
from guimem.errors import BudgetExceeded, NonFiniteLoss, SelfLeakage
from guimem.mockstack import build_family_pool
from guimem.retrieval import ExactIndex, FeatureHashEmbedder, \
    build_trajectory_key
from guimem.store import MediaStore
from guimem.training import TrainingInstance, _instance_pass, \
    build_training_instance, build_training_set, train
from guimem.worlds import make_family_world


@pytest.fixture(scope="module")
def small_pool(tmp_path_factory):
    media = MediaStore(tmp_path_factory.mktemp("media"))
    worlds = [make_family_world(f, v, seed=9)
              for f in range(3) for v in range(3)]
    pool, _plans = build_family_pool(worlds, media)
    return pool, media


def _keys_and_index(pool, media, embedder, exclude):
    index = ExactIndex(embedder.dim)
    for tid in sorted(pool.trajs):
        if tid == exclude:
            continue
        traj = pool.trajs[tid]
        index.add(build_trajectory_key(traj, pool.tasks[traj.task_id],
                                       embedder, media))
    return index


def test_instance_count_is_min_of_k_and_pool(small_pool):
    pool, media = small_pool
    embedder = FeatureHashEmbedder(dim=32, seed=0)
    tid = sorted(pool.trajs)[0]
    traj = pool.trajs[tid]
    # pool of one other trajectory: exactly one retrieved memory
    other = sorted(pool.trajs)[1]
    index = ExactIndex(32)
    other_traj = pool.trajs[other]
    index.add(build_trajectory_key(other_traj, pool.tasks[other_traj.task_id],
                                   embedder, media))
    instance = build_training_instance(traj, 0, pool, index, embedder,
                                       FrozenBackbone(), media, k=3)
    assert len(instance.retrieved_streams) == 1


def test_self_leakage_detected(small_pool):
    pool, media = small_pool
    embedder = FeatureHashEmbedder(dim=32, seed=0)
    tid = sorted(pool.trajs)[0]
    traj = pool.trajs[tid]
    poisoned = ExactIndex(32)
    poisoned.add(build_trajectory_key(traj, pool.tasks[traj.task_id],
                                      embedder, media))
    with pytest.raises(SelfLeakage):
        build_training_instance(traj, 0, pool, poisoned, embedder,
                                FrozenBackbone(), media, k=3)
    # with self excluded, the context comes from the remaining pool
    clean = _keys_and_index(pool, media, embedder, exclude=tid)
    instance = build_training_instance(traj, 0, pool, clean, embedder,
                                       FrozenBackbone(), media, k=3)
    assert len(instance.retrieved_streams) == 3


def test_every_step_becomes_one_instance(small_pool):
    pool, media = small_pool
    embedder = FeatureHashEmbedder(dim=32, seed=0)
    instances = build_training_set(pool, embedder, FrozenBackbone(), media, k=3)
    total_steps = sum(len(t.steps) for t in pool.trajs.values())
    assert len(instances) == total_steps
    counts = {}
    for inst in instances:
        counts[inst.trajectory_id] = counts.get(inst.trajectory_id, 0) + 1
    for tid, traj in pool.trajs.items():
        assert counts[tid] == len(traj.steps)


def test_zero_steps_leaves_params_bitwise_unchanged(small_pool):
    pool, media = small_pool
    embedder = FeatureHashEmbedder(dim=32, seed=0)
    backbone = FrozenBackbone()
    instances = build_training_set(pool, embedder, backbone, media, limit=4)
    cfg = EncoderConfig()
    params = init_encoder_params(cfg, seed=1)
    result = train(instances, cfg, backbone, params, steps=0)
    for name in params:
        assert result.params[name].tobytes() == params[name].tobytes()
        assert result.params[name] is not params[name]


def test_budget_exceeded(small_pool):
    pool, media = small_pool
    cfg = EncoderConfig(trainable_fraction_budget=0.001)
    params = init_encoder_params(cfg, seed=1)
    with pytest.raises(BudgetExceeded):
        train([], cfg, FrozenBackbone(), params, steps=1)


def test_non_finite_loss_detected():
    cfg = EncoderConfig()
    params = init_encoder_params(cfg, seed=0)
    bad = TrainingInstance(trajectory_id="x", step_index=0,
                           retrieved_streams=(np.full((4, 64), np.nan),),
                           prompt_ids=(96, 40, 41), target_ids=(42, 43),
                           target_text="CLICK [1]")
    with pytest.raises(NonFiniteLoss):
        _instance_pass(bad, cfg, params, FrozenBackbone(), want_grads=False)


def test_full_chain_gradients_match_finite_differences(small_pool):
    # the strongest correctness check: loss -> backbone -> injected memory
    # -> encoder -> trainable parameters, against central differences
    pool, media = small_pool
    embedder = FeatureHashEmbedder(dim=32, seed=0)
    backbone = FrozenBackbone()
    instances = build_training_set(pool, embedder, backbone, media, limit=1)
    instance = instances[0]
    assert instance.retrieved_streams
    cfg = EncoderConfig()
    params = init_encoder_params(cfg, seed=2)
    rng = np.random.default_rng(0)
    for name in params:
        if name.startswith("lora.") and name.endswith(".B"):
            params[name] = rng.normal(0, 0.05, params[name].shape)

    _, grads = _instance_pass(instance, cfg, params, backbone, want_grads=True)
    step = 1e-5
    checked = 0
    for name in sorted(trainable_names(params)):
        flat = params[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        original = flat[idx]
        flat[idx] = original + step
        up, _ = _instance_pass(instance, cfg, params, backbone, want_grads=False)
        flat[idx] = original - step
        down, _ = _instance_pass(instance, cfg, params, backbone, want_grads=False)
        flat[idx] = original
        numeric = (up - down) / (2 * step)
        analytic = float(np.asarray(grads[name]).reshape(-1)[idx])
        assert abs(numeric - analytic) <= 1e-3 * max(1e-3, abs(numeric),
                                                     abs(analytic)), name
        checked += 1
    assert checked >= 5


def test_training_reduces_loss_smoke(small_pool):
    pool, media = small_pool
    embedder = FeatureHashEmbedder(dim=32, seed=0)
    backbone = FrozenBackbone()
    instances = build_training_set(pool, embedder, backbone, media, limit=30)
    cfg = EncoderConfig()
    params = init_encoder_params(cfg, seed=3)
    result = train(instances, cfg, backbone, params, steps=12, batch_size=10,
                   seed=0)
    assert result.final_loss < result.initial_loss
    assert result.trainable_fraction <= cfg.trainable_fraction_budget
    assert len(result.step_losses) == 12
