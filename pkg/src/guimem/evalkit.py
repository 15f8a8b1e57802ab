"""Evaluation: judge protocols, success-rate accounting, scaling-law fits,
report files, and the memory-benefit sweep over the sim fixture.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .agent import EpisodeResult, MemoryMode, MemorySources, run_episode
from .bank import MemoryBank, MemoryItem
from .core import EpisodeConfig, PoolState, Trajectory
from .encoder import EncoderConfig, encode_trajectory, init_encoder_params
from .errors import DegenerateDesign
from .gateway import ChatClient, ChatRequest
from .retrieval import Embedder, ExactIndex, FeatureHashEmbedder, \
    build_trajectory_key
from .simenv import SimAnnotator, WorldDef
from .store import MediaStore
from .util import record_line, rng_for

_VERDICT_RE = re.compile(r"VERDICT:\s*(success|failure)", re.IGNORECASE)


# --- judges ------------------------------------------------------------------

def judge_answer(answer: str, ground_truth: str, judge: ChatClient) -> bool:
    """Answer-based judging: hand the model both strings and ask whether the
    response is correct. Empty answers are wrong without asking."""
    if not answer.strip():
        return False
    request = ChatRequest(text=(
        "Determine whether the response is correct given the reference "
        "answer.\n"
        f"Reference answer: {ground_truth}\n"
        f"Response: {answer}\n"
        "Reply with 'VERDICT: success' if correct, otherwise "
        "'VERDICT: failure'."))
    m = _VERDICT_RE.search(judge.complete(request))
    return bool(m) and m.group(1).lower() == "success"


def judge_trajectory(task_text: str, traj: Trajectory, judge: ChatClient,
                     media: MediaStore,
                     cfg: EpisodeConfig = EpisodeConfig()) -> bool:
    """Screenshot-based judging over the final cfg.judge_tail page states
    (all steps when the trajectory is shorter)."""
    tail = traj.steps[-cfg.judge_tail:]
    images = tuple(media.get_bytes(s.observation.screenshot) for s in tail)
    request = ChatRequest(
        text=(f"Episode: env={traj.env_id} task={traj.task_id}\n"
              f"Task: {task_text}\n"
              f"The last {len(tail)} page states are attached. Decide whether "
              "the task was completed.\n"
              "Reply with 'VERDICT: success' or 'VERDICT: failure'."),
        images=images)
    m = _VERDICT_RE.search(judge.complete(request))
    return bool(m) and m.group(1).lower() == "success"


def success_rate(results: Iterable[bool]) -> float:
    results = list(results)
    if not results:
        return 0.0
    return sum(1 for r in results if r) / len(results)


# --- scaling-law fits -----------------------------------------------------------

@dataclass(frozen=True)
class ScalingFit:
    kind: str                      # log_linear | cubic_logk
    coefficients: tuple[float, ...]
    residual: float                # sum of squared residuals
    n_points: int

    def __post_init__(self) -> None:
        if self.n_points < len(self.coefficients):
            raise DegenerateDesign(
                f"{self.n_points} points cannot fit {len(self.coefficients)} "
                "coefficients")
        if self.residual < -1e-12:
            raise ValueError("negative residual")

    def predict(self, x: float) -> float:
        logx = math.log(x)
        return sum(c * logx ** p for p, c in enumerate(self.coefficients))


def _ols(design: np.ndarray, y: np.ndarray, kind: str) -> ScalingFit:
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise DegenerateDesign(f"design matrix rank {rank} < {design.shape[1]}")
    resid = y - design @ coef
    return ScalingFit(kind=kind, coefficients=tuple(float(c) for c in coef),
                      residual=float(resid @ resid), n_points=len(y))


def fit_log_linear(points: Sequence[tuple[float, float]]) -> ScalingFit:
    """Least squares for accuracy = a + b * ln(m); natural log throughout."""
    if len(points) < 2:
        raise DegenerateDesign("need at least 2 points")
    m = np.array([p[0] for p in points], dtype=float)
    if np.any(m < 1):
        raise ValueError("memory sizes must be >= 1")
    if len(set(m.tolist())) < 2:
        raise DegenerateDesign("all memory sizes equal")
    y = np.array([p[1] for p in points], dtype=float)
    design = np.column_stack([np.ones_like(m), np.log(m)])
    return _ols(design, y, "log_linear")


def fit_cubic_logk(points: Sequence[tuple[float, float]]) -> ScalingFit:
    """Least squares for accuracy as a cubic polynomial in ln(k)."""
    distinct = {p[0] for p in points}
    if len(distinct) < 4:
        raise DegenerateDesign("need at least 4 distinct k values")
    k = np.array([p[0] for p in points], dtype=float)
    if np.any(k < 1):
        raise ValueError("retrieval depths must be >= 1")
    y = np.array([p[1] for p in points], dtype=float)
    logk = np.log(k)
    design = np.column_stack([np.ones_like(logk), logk, logk ** 2, logk ** 3])
    return _ols(design, y, "cubic_logk")


# --- report files ------------------------------------------------------------------

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RunRecord:
    domain: str
    task_id: str
    success: bool
    latency_s: float


def report(records: Sequence[RunRecord],
           fits: Sequence[ScalingFit] = ()) -> str:
    """Line-record summary plus a plot-ready CSV block; deterministic."""
    lines = [record_line({"kind": "report_header",
                          "format_version": REPORT_FORMAT_VERSION,
                          "n_records": len(records)})]
    domains = sorted({r.domain for r in records})
    for domain in domains:
        rows = [r for r in records if r.domain == domain]
        rate = success_rate([r.success for r in rows])
        lines.append(record_line({
            "kind": "domain_summary", "domain": domain, "episodes": len(rows),
            "successes": sum(1 for r in rows if r.success),
            "success_rate": f"{rate:.6f}",
            "mean_latency_s": f"{np.mean([r.latency_s for r in rows]):.6f}",
        }))
    for fit in fits:
        lines.append(record_line({
            "kind": "fit", "fit_kind": fit.kind,
            "coefficients": [f"{c:.9f}" for c in fit.coefficients],
            "residual": f"{fit.residual:.9f}", "n_points": fit.n_points,
        }))
    lines.append("#CSV domain,task_id,success,latency_s")
    for r in sorted(records, key=lambda r: (r.domain, r.task_id)):
        lines.append(f"{r.domain},{r.task_id},{int(r.success)},{r.latency_s:.6f}")
    return "\n".join(lines) + "\n"


def save_report(text: str, path: str | Path) -> None:
    Path(path).write_text(text, encoding="utf-8")


# --- memory-benefit sweep -------------------------------------------------------------

@dataclass(frozen=True)
class SweepCell:
    mode: str
    bank_size: int
    k: int
    episodes: int
    successes: int

    @property
    def rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0


@dataclass(frozen=True)
class SweepResult:
    cells: tuple[SweepCell, ...]

    def rate_of(self, mode: str, bank_size: int, k: int) -> float:
        for cell in self.cells:
            if (cell.mode, cell.bank_size, cell.k) == (mode, bank_size, k):
                return cell.rate
        raise KeyError((mode, bank_size, k))

    def to_records(self) -> list[str]:
        out = [record_line({"kind": "sweep_header",
                            "format_version": REPORT_FORMAT_VERSION,
                            "cells": len(self.cells)})]
        for c in self.cells:
            out.append(record_line({
                "kind": "sweep_cell", "mode": c.mode, "bank_size": c.bank_size,
                "k": c.k, "episodes": c.episodes, "successes": c.successes,
                "success_rate": f"{c.rate:.6f}"}))
        return out


def memory_benefit_sweep(worlds: Sequence[WorldDef], media: MediaStore,
                         bank_sizes: Sequence[int] = (10, 100, 1000),
                         ks: Sequence[int] = (3,),
                         episodes_per_cell: int = 100,
                         seed: int = 0,
                         include_none_mode: bool = True,
                         embedder: Embedder | None = None,
                         enc_cfg: EncoderConfig | None = None) -> SweepResult:
    """Success-rate grid over nested memory banks on the isomorphic-family
    fixture.

    Banks are nested prefixes of one seeded shuffle, episodes are the same
    seeded world sample in every cell, and retrieval always excludes the
    episode world's own banked trajectory, so measured gains come from
    sibling transfer alone.
    """
    from .backbone import FrozenBackbone
    from .mockstack import MemoryGuidedPolicy, build_family_pool, \
        family_episode_env, family_task_query

    if max(bank_sizes) > len(worlds):
        raise ValueError(f"largest bank {max(bank_sizes)} exceeds "
                         f"{len(worlds)} fixture worlds")
    embedder = embedder or FeatureHashEmbedder(dim=64, seed=seed)
    enc_cfg = enc_cfg or EncoderConfig()
    enc_params = init_encoder_params(enc_cfg, seed=seed)
    backbone = FrozenBackbone()

    worlds = sorted(worlds, key=lambda w: w.id)
    pool, plans = build_family_pool(worlds, media)

    items: dict[str, MemoryItem] = {}
    for world in worlds:
        traj = pool.trajs[world.id]
        task = pool.tasks[traj.task_id]
        key = build_trajectory_key(traj, task, embedder, media)
        stream = backbone.stream_for(traj, task.text, media)
        payload = encode_trajectory(stream, enc_cfg, enc_params)
        items[world.id] = MemoryItem(trajectory_id=world.id, key=key,
                                     payload=payload.astype(np.float32))

    rng = rng_for(seed, "sweep-bank-order")
    order = [worlds[int(i)].id for i in rng.permutation(len(worlds))]
    ep_rng = rng_for(seed, "sweep-episodes")
    episode_ids = [worlds[int(ep_rng.integers(len(worlds)))].id
                   for _ in range(episodes_per_cell)]
    by_id = {w.id: w for w in worlds}

    def run_cell(mode: MemoryMode, bank_size: int, k: int) -> SweepCell:
        bank = MemoryBank(enc_cfg.m_tokens, enc_cfg.hidden_dim)
        index = ExactIndex(embedder.dim)
        for wid in order[:bank_size]:
            bank.add(items[wid])
            index.add(items[wid].key)
        memory = MemorySources(embedder=embedder, index=index, bank=bank,
                               pool=pool, k=k)
        successes = 0
        for wid in episode_ids:
            world = by_id[wid]
            task = pool.tasks[pool.trajs[wid].task_id]
            env = family_episode_env(world, media, task)
            policy = MemoryGuidedPolicy(plans, seed=seed)
            run_episode(env, task, policy, mode, media,
                        memory=memory if mode is not MemoryMode.NONE else None,
                        annotator=SimAnnotator(env), traj_id=wid)
            if env.goal_check():
                successes += 1
        return SweepCell(mode=mode.value, bank_size=bank_size, k=k,
                         episodes=episodes_per_cell, successes=successes)

    cells: list[SweepCell] = []
    if include_none_mode:
        cells.append(run_cell(MemoryMode.NONE, 0, 0))
    for k in ks:
        for size in bank_sizes:
            cells.append(run_cell(MemoryMode.CONTINUOUS, size, k))
    return SweepResult(cells=tuple(cells))
