"""Parameter-efficient training of the memory encoder.

Each trajectory step becomes one training instance: the step's observation
retrieves its top-k memories (self excluded), the retrieved trajectories'
token streams are compressed by the encoder, the payloads are injected
ahead of the step's prompt embeddings, and the frozen backbone's next-token
cross-entropy over the target action tokens supplies the gradient. Only the
adapters, query vectors, and output projection move.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import render_action
from .backbone import BOS, SEP, FrozenBackbone, tokenize
from .bank import MemoryBank
from .core import PoolState, Trajectory
from .encoder import EncoderConfig, encode_backward, encode_with_cache, \
    trainable_fraction, trainable_names
from .errors import BudgetExceeded, NonFiniteLoss, SelfLeakage
from .nnet import Adam, masked_cross_entropy
from .retrieval import Embedder, ExactIndex, RetrievalKey, build_query_key, \
    build_trajectory_key
from .store import MediaStore
from .util import rng_for


@dataclass(frozen=True)
class TrainingInstance:
    trajectory_id: str
    step_index: int
    retrieved_streams: tuple[np.ndarray, ...]  # descending retrieval score
    prompt_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    target_text: str


@dataclass(frozen=True)
class TrainResult:
    params: dict[str, np.ndarray]
    step_losses: tuple[float, ...]
    initial_loss: float
    final_loss: float
    trainable_fraction: float


def training_prompt(task_text: str, page_url: str | None) -> str:
    return f"Task: {task_text}\nPage: {page_url or ''}\nAction:"


def build_training_instance(traj: Trajectory, step_index: int, pool: PoolState,
                            index: ExactIndex, embedder: Embedder,
                            backbone: FrozenBackbone, media: MediaStore,
                            k: int = 3,
                            stream_cache: dict[str, np.ndarray] | None = None
                            ) -> TrainingInstance:
    """One step becomes one instance, augmented with its top-k retrieved
    memories. The index must not contain the trajectory's own key; finding
    it among the candidates is a construction bug and raises SelfLeakage.
    """
    step = traj.steps[step_index]
    task = pool.tasks[traj.task_id]
    key = build_query_key(step.observation, task.text, embedder, media)
    hits = index.topk(key, k)
    if any(tid == traj.id for tid, _ in hits):
        raise SelfLeakage(f"trajectory {traj.id} retrieved itself during training")
    streams = []
    for tid, _score in hits:
        if stream_cache is not None and tid in stream_cache:
            streams.append(stream_cache[tid])
            continue
        other = pool.trajs[tid]
        other_task = pool.tasks[other.task_id]
        stream = backbone.stream_for(other, other_task.text, media)
        if stream_cache is not None:
            stream_cache[tid] = stream
        streams.append(stream)
    prompt = training_prompt(task.text, step.observation.page_url)
    target = render_action(step.action)
    return TrainingInstance(
        trajectory_id=traj.id, step_index=step_index,
        retrieved_streams=tuple(streams),
        prompt_ids=tuple([BOS] + tokenize(prompt)),
        target_ids=tuple(tokenize(" " + target) + [SEP]),
        target_text=target,
    )


def build_training_set(pool: PoolState, embedder: Embedder,
                       backbone: FrozenBackbone, media: MediaStore,
                       k: int = 3, limit: int | None = None
                       ) -> list[TrainingInstance]:
    """Instances for every step of every pooled trajectory, with per-
    trajectory self-exclusion indexes."""
    keys: dict[str, RetrievalKey] = {}
    for tid in sorted(pool.trajs):
        traj = pool.trajs[tid]
        keys[tid] = build_trajectory_key(traj, pool.tasks[traj.task_id],
                                         embedder, media)
    stream_cache: dict[str, np.ndarray] = {}
    instances: list[TrainingInstance] = []
    for tid in sorted(pool.trajs):
        index = ExactIndex(embedder.dim)
        for other_id, key in keys.items():
            if other_id != tid:
                index.add(key)
        traj = pool.trajs[tid]
        for step_index in range(len(traj.steps)):
            instances.append(build_training_instance(
                traj, step_index, pool, index, embedder, backbone, media,
                k=k, stream_cache=stream_cache))
            if limit is not None and len(instances) >= limit:
                return instances
    return instances


def _instance_pass(instance: TrainingInstance, cfg: EncoderConfig,
                   params: dict[str, np.ndarray], backbone: FrozenBackbone,
                   want_grads: bool):
    """Forward (and optionally backward) for one instance.

    Returns (loss, grads or None). The gradient dict covers the trainable
    parameter names only.
    """
    payloads = []
    caches = []
    for stream in instance.retrieved_streams:
        payload, cache = encode_with_cache(stream, cfg, params)
        payloads.append(payload)
        caches.append(cache)
    mem = np.vstack(payloads) if payloads else np.zeros((0, cfg.hidden_dim))

    tokens = list(instance.prompt_ids) + list(instance.target_ids)
    token_embeds = backbone.embed_tokens(tokens)
    embeds = np.vstack([mem, token_embeds]) if len(mem) else token_embeds

    logits, lm_cache = backbone.lm_forward(embeds)
    n_mem = mem.shape[0]
    n_tok = len(tokens)
    targets = np.zeros(len(embeds), dtype=np.intp)
    mask = np.zeros(len(embeds), dtype=bool)
    first_target = len(instance.prompt_ids)
    for j in range(n_tok - 1):
        if j + 1 >= first_target:
            targets[n_mem + j] = tokens[j + 1]
            mask[n_mem + j] = True
    loss, dlogits = masked_cross_entropy(logits, targets, mask)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"instance {instance.trajectory_id}/{instance.step_index}")
    if not want_grads:
        return loss, None

    dembeds = backbone.lm_backward_to_inputs(dlogits, lm_cache)
    grads: dict[str, np.ndarray] = {}
    names = set(trainable_names(params))
    m = cfg.m_tokens
    for i, cache in enumerate(caches):
        dpayload = dembeds[i * m:(i + 1) * m]
        enc_grads = encode_backward(dpayload, cfg, params, cache)
        for name in names:
            g = enc_grads.get(name)
            if g is None:
                continue
            grads[name] = grads.get(name, 0.0) + g
    return loss, grads


def evaluate_loss(instances, cfg: EncoderConfig, params, backbone) -> float:
    losses = [_instance_pass(inst, cfg, params, backbone, want_grads=False)[0]
              for inst in instances]
    return float(np.mean(losses))


def train(instances, cfg: EncoderConfig, backbone: FrozenBackbone,
          params: dict[str, np.ndarray], steps: int = 50, batch_size: int = 10,
          lr: float = 0.03, seed: int = 0) -> TrainResult:
    """Adam over the trainable subset. The input params are not mutated;
    zero steps returns them bit-identical."""
    fraction = trainable_fraction(cfg, params, backbone.param_total)
    if fraction > cfg.trainable_fraction_budget:
        raise BudgetExceeded(
            f"trainable fraction {fraction:.4f} over budget "
            f"{cfg.trainable_fraction_budget:.4f}")

    params = {k: v.copy() for k, v in params.items()}
    if steps == 0:
        return TrainResult(params=params, step_losses=(),
                           initial_loss=float("nan"), final_loss=float("nan"),
                           trainable_fraction=fraction)

    initial = evaluate_loss(instances, cfg, params, backbone)
    trainables = {name: params[name] for name in trainable_names(params)}
    optimiser = Adam(trainables, lr=lr)
    rng = rng_for(seed, "train-order")
    order: list[int] = []
    step_losses = []
    for _ in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(len(instances)).tolist())
        batch, order = order[:batch_size], order[batch_size:]
        total = 0.0
        grads: dict[str, np.ndarray] = {}
        for idx in batch:
            loss, g = _instance_pass(instances[idx], cfg, params, backbone,
                                     want_grads=True)
            total += loss
            for name, value in (g or {}).items():
                grads[name] = grads.get(name, 0.0) + value
        for name in grads:
            grads[name] = grads[name] / len(batch)
        optimiser.step(grads)
        step_losses.append(total / len(batch))

    final = evaluate_loss(instances, cfg, params, backbone)
    return TrainResult(params=params, step_losses=tuple(step_losses),
                       initial_loss=initial, final_loss=final,
                       trainable_fraction=fraction)
