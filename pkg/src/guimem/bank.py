"""The memory bank: compressed trajectory payloads plus their retrieval keys,
and the injection of retrieved payloads ahead of prompt embeddings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import FrozenBackbone
from .core import PoolState, Trajectory
from .encoder import EncoderConfig, encode_trajectory
from .errors import DimensionMismatch, SchemaVersionMismatch, WidthMismatch
from .retrieval import Embedder, ExactIndex, RetrievalKey, build_trajectory_key, \
    load_index_keys, save_index
from .store import MediaStore

CMEM_MAGIC = b"CMEM"
CMEM_VERSION = 1


@dataclass(frozen=True)
class MemoryItem:
    trajectory_id: str
    key: RetrievalKey
    payload: np.ndarray  # (m_tokens, hidden) float32

    def __post_init__(self) -> None:
        p = np.asarray(self.payload, dtype=np.float32)
        if p.ndim != 2:
            raise DimensionMismatch(f"payload must be 2-D, got {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "payload", p)


@dataclass(frozen=True)
class ScoredMemory:
    item: MemoryItem
    score: float


@dataclass(frozen=True)
class MemoryContext:
    """Memories selected for one inference step, best score first."""

    entries: tuple[ScoredMemory, ...] = ()

    def __post_init__(self) -> None:
        scores = [e.score for e in self.entries]
        if scores != sorted(scores, reverse=True):
            raise ValueError("memory context must be ordered by descending score")

    def __len__(self) -> int:
        return len(self.entries)

    def total_vectors(self) -> int:
        return sum(e.item.payload.shape[0] for e in self.entries)

    def payload_matrix(self) -> np.ndarray | None:
        if not self.entries:
            return None
        return np.vstack([e.item.payload for e in self.entries]).astype(np.float64)


def inject(memories: MemoryContext, prompt_embeddings: np.ndarray) -> np.ndarray:
    """Concatenate memory payloads (descending score) ahead of the prompt.

    The prompt rows come through bit-identical; the input is never mutated.
    """
    prompt = np.asarray(prompt_embeddings)
    if prompt.ndim != 2:
        raise WidthMismatch(f"prompt embeddings must be (T, H), got {prompt.shape}")
    block = memories.payload_matrix()
    if block is None:
        return prompt.copy()
    if block.shape[1] != prompt.shape[1]:
        raise WidthMismatch(
            f"memory width {block.shape[1]} != prompt width {prompt.shape[1]}")
    return np.vstack([block.astype(prompt.dtype), prompt])


class MemoryBank:
    """In-memory collection of MemoryItems with a paired exact index."""

    def __init__(self, m_tokens: int, hidden: int):
        self.m_tokens = m_tokens
        self.hidden = hidden
        self._items: dict[str, MemoryItem] = {}

    def add(self, item: MemoryItem) -> None:
        if item.payload.shape != (self.m_tokens, self.hidden):
            raise DimensionMismatch(
                f"payload {item.payload.shape}, bank expects {(self.m_tokens, self.hidden)}")
        self._items[item.trajectory_id] = item

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, trajectory_id: str) -> bool:
        return trajectory_id in self._items

    def get(self, trajectory_id: str) -> MemoryItem:
        return self._items[trajectory_id]

    def items(self) -> list[MemoryItem]:
        return [self._items[k] for k in self._items]

    def build_index(self, dim: int) -> ExactIndex:
        index = ExactIndex(dim)
        for item in self._items.values():
            index.add(item.key)
        return index

    def context_for(self, hits: Sequence[tuple[str, float]],
                    exclude: str | None = None) -> MemoryContext:
        entries = tuple(ScoredMemory(item=self._items[tid], score=score)
                        for tid, score in hits
                        if tid != exclude and tid in self._items)
        return MemoryContext(entries=entries)


# --- persistence (CMEM + CMIX pair) ---------------------------------------------

def save_payloads(items: Iterable[MemoryItem], path: str | Path,
                  m_tokens: int, hidden: int) -> None:
    """CMEM: magic, version u32, H u32, m_tokens u32, count u64, then per
    item a u32-length-prefixed UTF-8 id and m_tokens*H little-endian f32."""
    items = list(items)
    with open(path, "wb") as fh:
        fh.write(CMEM_MAGIC)
        fh.write(struct.pack("<IIIQ", CMEM_VERSION, hidden, m_tokens, len(items)))
        for item in items:
            raw = item.trajectory_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(item.payload.astype("<f4").tobytes())


def load_payloads(path: str | Path) -> tuple[int, int, dict[str, np.ndarray]]:
    """Returns (m_tokens, hidden, payloads by trajectory id)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CMEM_MAGIC:
            raise SchemaVersionMismatch(f"{path} is not a CMEM file")
        version, hidden, m_tokens, count = struct.unpack("<IIIQ", fh.read(20))
        if version != CMEM_VERSION:
            raise SchemaVersionMismatch(f"CMEM version {version}")
        payloads: dict[str, np.ndarray] = {}
        for _ in range(count):
            (id_len,) = struct.unpack("<I", fh.read(4))
            tid = fh.read(id_len).decode("utf-8")
            raw = fh.read(4 * m_tokens * hidden)
            payloads[tid] = np.frombuffer(raw, dtype="<f4").reshape(m_tokens, hidden)
    return m_tokens, hidden, payloads


def save_bank(bank: MemoryBank, bank_path: str | Path,
              index_path: str | Path | None = None, dim: int | None = None) -> None:
    """Write the payload file and the sibling key index (bank and index
    share trajectory ids)."""
    items = bank.items()
    save_payloads(items, bank_path, bank.m_tokens, bank.hidden)
    if index_path is None:
        index_path = str(bank_path) + ".cmix"
    if dim is None:
        dim = items[0].key.vector.shape[0] if items else 0
    save_index((item.key for item in items), index_path, dim)


def load_bank(bank_path: str | Path,
              index_path: str | Path | None = None) -> MemoryBank:
    if index_path is None:
        index_path = str(bank_path) + ".cmix"
    m_tokens, hidden, payloads = load_payloads(bank_path)
    keys = {k.source_id: k for k in load_index_keys(index_path)}
    bank = MemoryBank(m_tokens, hidden)
    for tid in payloads:
        if tid not in keys:
            raise SchemaVersionMismatch(f"bank item {tid} missing from index file")
        bank.add(MemoryItem(trajectory_id=tid, key=keys[tid], payload=payloads[tid]))
    return bank


# --- bank construction -------------------------------------------------------------

def build_memory_bank(pool: PoolState, media: MediaStore, embedder: Embedder,
                      backbone: FrozenBackbone, enc_cfg: EncoderConfig,
                      enc_params: dict[str, np.ndarray],
                      trajectory_ids: Iterable[str] | None = None) -> MemoryBank:
    """Encode pooled trajectories into payloads keyed for retrieval."""
    bank = MemoryBank(enc_cfg.m_tokens, enc_cfg.hidden_dim)
    ids = sorted(trajectory_ids if trajectory_ids is not None else pool.trajs)
    for tid in ids:
        traj = pool.trajs[tid]
        task = pool.tasks.get(traj.task_id)
        task_text = task.text if task else ""
        key = build_trajectory_key(traj, task, embedder, media) if task else None
        if key is None:
            raise KeyError(f"trajectory {tid} references unknown task {traj.task_id}")
        stream = backbone.stream_for(traj, task_text, media)
        payload = encode_trajectory(stream, enc_cfg, enc_params)
        bank.add(MemoryItem(trajectory_id=tid, key=key,
                            payload=payload.astype(np.float32)))
    return bank
