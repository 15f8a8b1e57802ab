"""guimem: continuous trajectory memory for GUI agents.

A numpy library covering the full loop: domain types and durable stores,
pooled multimodal retrieval, a cross-attention compression encoder with
hand-checked gradients, memory injection, parameter-efficient training, a
deterministic GUI simulator, the autonomous data flywheel, and evaluation
tooling with scaling-law fits.
"""

__version__ = "0.1.0"

from .actions import Action, ActionKind, Direction, parse_action, render_action
from .core import (Environment, EnvStatus, Difficulty, EpisodeConfig,
                   Observation, Outcome, PoolState, Provenance, ScreenshotRef,
                   SomLabel, Step, TaskQuery, Trajectory, normalize_url)
from .retrieval import (Embedder, ExactIndex, FeatureHashEmbedder,
                        HashEmbedder, RetrievalConfig, RetrievalKey,
                        SignHashIndex, brute_force_topk, build_query_key,
                        build_trajectory_key)
from .encoder import EncoderConfig, encode_trajectory, grad_check, \
    init_encoder_params
from .backbone import BackboneConfig, FrozenBackbone
from .bank import MemoryBank, MemoryContext, MemoryItem, inject, load_bank, \
    save_bank
from .agent import EpisodeResult, MemoryMode, MemorySources, Termination, \
    assemble_prompt, ground_fallback, run_episode, som_annotate
from .simenv import SimWorld, WorldDef, load_world, save_world, solve_bfs
from .flywheel import FlywheelConfig, make_seed_pool, run_iteration
from .evalkit import ScalingFit, fit_cubic_logk, fit_log_linear, judge_answer, \
    judge_trajectory, memory_benefit_sweep, success_rate
from .store import MediaStore, load_pool, save_pool
