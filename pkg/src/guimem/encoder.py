"""The querying encoder: M learned query vectors cross-attend over a
trajectory token stream and come out as a fixed-length payload.

Whatever the stream length, the output is exactly (m_tokens, hidden_dim):
the query vectors pass through n_layers of cross-attention + feed-forward
blocks against the stream, then a linear projection maps them into the
backbone embedding space. The base block weights are frozen; the trainable
set is the query vectors, the output projection, and one low-rank adapter
per projection role shared across all layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyStream, ShapeMismatch
from .nnet import (LORA_ROLES, TransformerConfig, init_lora_params,
                   init_transformer_params, param_count, transformer_backward,
                   transformer_forward)
from .util import rng_for


@dataclass(frozen=True)
class EncoderConfig:
    m_tokens: int = 8
    hidden_dim: int = 64          # toy default; production = backbone width
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 2
    adapter_rank: int = 16
    trainable_fraction_budget: float = 0.05

    def __post_init__(self) -> None:
        if self.m_tokens < 1:
            raise ValueError("m_tokens must be >= 1")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.adapter_rank < 1:
            raise ValueError("adapter_rank must be >= 1")

    def stack(self) -> TransformerConfig:
        return TransformerConfig(hidden=self.hidden_dim, n_layers=self.n_layers,
                                 n_heads=self.n_heads, ffn_mult=self.ffn_mult,
                                 cross=True)


def init_encoder_params(cfg: EncoderConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = rng_for(seed, "encoder-init")
    params = init_transformer_params(cfg.stack(), rng)
    params["queries"] = rng.normal(0.0, 0.02, (cfg.m_tokens, cfg.hidden_dim))
    params["out.W"] = rng.normal(0.0, 0.02, (cfg.hidden_dim, cfg.hidden_dim))
    params["out.b"] = np.zeros(cfg.hidden_dim)
    params.update(init_lora_params(cfg.stack(), cfg.adapter_rank, rng))
    return params


def trainable_names(params: dict[str, np.ndarray]) -> list[str]:
    """Queries + output projection + adapters; everything else is frozen."""
    return sorted(n for n in params
                  if n == "queries" or n.startswith("out.") or n.startswith("lora."))


def trainable_fraction(cfg: EncoderConfig, params: dict[str, np.ndarray],
                       backbone_param_count: int) -> float:
    """Trainable share of the full system (frozen backbone + encoder)."""
    trainable = sum(int(np.prod(params[n].shape)) for n in trainable_names(params))
    total = param_count(params) + backbone_param_count
    return trainable / total


def _check_stream(stream: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    stream = np.asarray(stream, dtype=np.float64)
    if stream.ndim != 2:
        raise ShapeMismatch(f"stream must be (L, H), got shape {stream.shape}")
    if stream.shape[0] < 1:
        raise EmptyStream("trajectory token stream has no rows")
    if stream.shape[1] != cfg.hidden_dim:
        raise ShapeMismatch(f"stream width {stream.shape[1]} != hidden {cfg.hidden_dim}")
    return stream


def encode_with_cache(stream: np.ndarray, cfg: EncoderConfig,
                      params: dict[str, np.ndarray]):
    stream = _check_stream(stream, cfg)
    lora = {n: params[n] for n in params if n.startswith("lora.")}
    hidden, cache = transformer_forward(params["queries"], params, cfg.stack(),
                                        kv=stream, lora=lora)
    payload = hidden @ params["out.W"] + params["out.b"]
    return payload, (cache, hidden)


def encode_trajectory(stream: np.ndarray, cfg: EncoderConfig,
                      params: dict[str, np.ndarray]) -> np.ndarray:
    """Compress a (L, hidden) stream into an (m_tokens, hidden) payload.

    Pure function of (stream, params); any L >= 1 gives the same shape out.
    """
    payload, _ = encode_with_cache(stream, cfg, params)
    if payload.shape != (cfg.m_tokens, cfg.hidden_dim):
        raise ShapeMismatch(f"payload shape {payload.shape}")  # defensive
    return payload


def encode_backward(dpayload: np.ndarray, cfg: EncoderConfig,
                    params: dict[str, np.ndarray], cache) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every encoder parameter, given the
    loss gradient at the payload."""
    stack_cache, hidden = cache
    grads: dict[str, np.ndarray] = {
        "out.W": hidden.T @ dpayload,
        "out.b": dpayload.sum(axis=0),
    }
    dhidden = dpayload @ params["out.W"].T
    dqueries, _, stack_grads = transformer_backward(dhidden, stack_cache)
    grads["queries"] = dqueries
    grads.update(stack_grads)
    return grads


def grad_check(cfg: EncoderConfig, params: dict[str, np.ndarray],
               stream: np.ndarray, seed: int = 0, n_samples: int = 50,
               step: float = 1e-4) -> float:
    """Max relative error between analytic and central finite-difference
    gradients on n_samples randomly selected parameters.

    The probe loss is a fixed random weighting of the payload so gradient
    signal reaches every output coordinate. Deterministic per seed. The
    error denominator is floored at 1e-6: below that, central differences
    at this step size measure float64 roundoff, not the gradient.
    """
    rng = rng_for(seed, "grad-check")
    weights = rng.standard_normal((cfg.m_tokens, cfg.hidden_dim))

    payload, cache = encode_with_cache(stream, cfg, params)
    grads = encode_backward(weights, cfg, params, cache)

    names = sorted(params)
    worst = 0.0
    for _ in range(n_samples):
        name = names[int(rng.integers(len(names)))]
        flat = params[name].reshape(-1)
        idx = int(rng.integers(flat.size))
        original = flat[idx]

        flat[idx] = original + step
        up = float(np.sum(weights * encode_trajectory(stream, cfg, params)))
        flat[idx] = original - step
        down = float(np.sum(weights * encode_trajectory(stream, cfg, params)))
        flat[idx] = original

        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[name].reshape(-1)[idx])
        denom = max(1e-6, abs(numeric) + abs(analytic))
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
