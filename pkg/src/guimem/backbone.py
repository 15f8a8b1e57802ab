"""A small frozen transformer standing in for a production VLM.

It plays three roles behind one frozen-embedding interface:

* turn a trajectory (screenshots + action text + task text) into the token
  stream the memory encoder compresses;
* embed prompt/target text into the input-embedding space;
* run a causal LM forward (and backward to its inputs) so training losses
  can flow through injected memory vectors into the encoder.

Weights are random, seeded, and never updated. Text is tokenized at the
character level over printable ASCII (a compact vocabulary keeps the output
head expressive at toy hidden widths); screenshots enter as per-cell
mean-colour patch embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import render_action
from .core import Trajectory
from .nnet import TransformerConfig, init_transformer_params, param_count, \
    transformer_backward, transformer_forward
from .store import MediaStore, decode_ppm
from .util import rng_for

# character tokens 0..94 cover printable ASCII 32..126
UNK = 95
BOS = 96
SEP = 97
VOCAB = 100


@dataclass(frozen=True)
class BackboneConfig:
    vocab: int = VOCAB
    hidden: int = 64
    n_layers: int = 5
    n_heads: int = 4
    ffn_mult: int = 4
    max_len: int = 768
    patch_grid: int = 4
    init_std: float = 0.08   # projection scale; keeps attention content-sensitive
    head_std: float = 0.15   # untied output head scale; allows sharp distributions

    def stack(self) -> TransformerConfig:
        return TransformerConfig(hidden=self.hidden, n_layers=self.n_layers,
                                 n_heads=self.n_heads, ffn_mult=self.ffn_mult,
                                 causal=True)


def tokenize(text: str) -> list[int]:
    """One token per character; non-printable characters map to UNK."""
    return [ord(ch) - 32 if 32 <= ord(ch) <= 126 else UNK for ch in text]


def detokenize(ids: list[int]) -> str:
    return "".join(chr(i + 32) for i in ids if 0 <= i < UNK)


class FrozenBackbone:
    def __init__(self, cfg: BackboneConfig = BackboneConfig(), seed: int = 7):
        self.cfg = cfg
        rng = rng_for(seed, "backbone-init")
        self.params = init_transformer_params(cfg.stack(), rng, std=cfg.init_std)
        self.params["tok_emb"] = rng.normal(0.0, 0.02, (cfg.vocab, cfg.hidden))
        self.params["pos_emb"] = rng.normal(0.0, 0.02, (cfg.max_len, cfg.hidden))
        self.params["patch_proj"] = rng.normal(0.0, 0.2, (3, cfg.hidden))
        self.params["lm_head"] = rng.normal(0.0, cfg.head_std, (cfg.vocab, cfg.hidden))

    @property
    def hidden(self) -> int:
        return self.cfg.hidden

    @property
    def param_total(self) -> int:
        return param_count(self.params)

    # --- embedding space -------------------------------------------------

    def embed_tokens(self, ids: list[int], pos_offset: int = 0) -> np.ndarray:
        """Token + positional embeddings for a token id sequence."""
        ids = ids[: self.cfg.max_len - pos_offset]
        tok = self.params["tok_emb"][np.asarray(ids, dtype=np.intp)]
        pos = self.params["pos_emb"][pos_offset:pos_offset + len(ids)]
        return tok + pos

    def _patch_rows(self, pixels: np.ndarray) -> np.ndarray:
        g = self.cfg.patch_grid
        h, w = pixels.shape[:2]
        feats = np.zeros((g * g, 3))
        for r in range(g):
            for c in range(g):
                block = pixels[r * h // g:(r + 1) * h // g,
                               c * w // g:(c + 1) * w // g]
                feats[r * g + c] = block.reshape(-1, 3).mean(axis=0) / 255.0
        return feats @ self.params["patch_proj"]

    # --- trajectory token stream ------------------------------------------

    def stream_for(self, traj: Trajectory, task_text: str,
                   media: MediaStore) -> np.ndarray:
        """Interleave task tokens, screenshot patches, and action tokens,
        run them through the frozen stack, and return the hidden states."""
        rows = [self.embed_tokens([BOS] + tokenize(task_text))]
        position = rows[0].shape[0]
        for step in traj.steps:
            pixels = media.get_pixels(step.observation.screenshot)
            patches = self._patch_rows(pixels)
            pos = self.params["pos_emb"][position:position + len(patches)]
            if len(pos) < len(patches):  # ran out of positions
                patches = patches[: len(pos)]
            rows.append(patches + pos)
            position += len(patches)
            act_ids = [SEP] + tokenize(render_action(step.action))
            emb = self.embed_tokens(act_ids, pos_offset=position)
            rows.append(emb)
            position += emb.shape[0]
            if position >= self.cfg.max_len:
                break
        stacked = np.vstack(rows)[: self.cfg.max_len]
        hidden, _ = transformer_forward(stacked, self.params, self.cfg.stack())
        return hidden

    # --- causal LM ----------------------------------------------------------

    def lm_forward(self, embeds: np.ndarray):
        """Logits over the vocabulary at every position."""
        hidden, cache = transformer_forward(embeds, self.params, self.cfg.stack())
        logits = hidden @ self.params["lm_head"].T
        return logits, (cache, hidden)

    def lm_backward_to_inputs(self, dlogits: np.ndarray, cache) -> np.ndarray:
        """Gradient w.r.t. the input embedding rows; parameters stay frozen."""
        stack_cache, _hidden = cache
        dhidden = dlogits @ self.params["lm_head"]
        dx, _, _ = transformer_backward(dhidden, stack_cache)
        return dx

    def decode_greedy(self, prefix: np.ndarray, token_pos_offset: int,
                      max_new: int = 24) -> list[int]:
        """Greedy character decoding from a prefix of input embeddings.

        Stops at UNK or any special token. Deterministic.
        """
        embeds = prefix
        out: list[int] = []
        for i in range(max_new):
            if embeds.shape[0] >= self.cfg.max_len:
                break
            logits, _ = self.lm_forward(embeds)
            nxt = int(np.argmax(logits[-1]))
            if nxt >= UNK:
                break
            out.append(nxt)
            row = self.embed_tokens([nxt], pos_offset=min(
                token_pos_offset + i, self.cfg.max_len - 1))
            embeds = np.vstack([embeds, row])
        return out
