"""Pooled multimodal retrieval keys and top-k nearest-neighbour indexes.

A key is the L2-normalized arithmetic mean of the item's image and text
embeddings, so dot product equals cosine similarity. Pooling sorts the
partial embeddings by their byte representation before summing, which makes
the result bit-identical under any collection order.

Two index backends share one interface: ExactIndex (full scan over a dense
matrix, guaranteed equal to the brute-force oracle) and SignHashIndex
(random-hyperplane bucketing; recall is measured, not guaranteed).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .actions import render_action
from .core import Observation, TaskQuery, Trajectory
from .errors import DimensionMismatch, EmbedderFailure, EmptyTrajectory
from .store import MediaStore, decode_ppm
from .util import derive_seed

DEFAULT_DIM = 512
UNIT_NORM_TOL = 1e-6


class Embedder(Protocol):
    """Joint image-text embedding space, D-dimensional, deterministic."""

    @property
    def dim(self) -> int: ...

    def embed_image(self, data: bytes) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class RetrievalKey:
    vector: np.ndarray  # (D,) float32, unit L2 norm
    source_id: str

    def __post_init__(self) -> None:
        v = np.asarray(self.vector, dtype=np.float32)
        if v.ndim != 1:
            raise DimensionMismatch(f"key vector must be 1-D, got shape {v.shape}")
        norm = float(np.linalg.norm(v.astype(np.float64)))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ValueError(f"key vector norm {norm} is not 1 within {UNIT_NORM_TOL}")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = 3  # retrieval depth; ties broken by lower insertion index

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")


# --- mock embedders -----------------------------------------------------------

class HashEmbedder:
    """Deterministic pseudo-random unit vector per distinct input.

    Distinct inputs map to near-orthogonal directions; identical inputs map
    to identical vectors. Good for exactness tests, blind to semantics.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self._dim = dim
        self._seed = seed

    @property
    def dim(self) -> int:
        return self._dim

    def _vector(self, payload: bytes) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(
            derive_seed(self._seed, "hash-embed", payload.hex())))
        v = rng.standard_normal(self._dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def embed_image(self, data: bytes) -> np.ndarray:
        return self._vector(b"img:" + data)

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector(b"txt:" + text.encode("utf-8"))


class FeatureHashEmbedder:
    """Bag-of-words text hashing plus thumbnail statistics for images.

    Texts sharing words land near each other; images sharing layout land
    near each other. Stands in for a pretrained joint image-text embedder
    in deterministic tests.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0, grid: int = 8):
        self._dim = dim
        self._seed = seed
        self._grid = grid
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "feat-proj")))
        self._proj = rng.standard_normal((grid * grid * 3, dim)) / math.sqrt(grid * grid * 3)

    @property
    def dim(self) -> int:
        return self._dim

    def embed_text(self, text: str) -> np.ndarray:
        v = np.zeros(self._dim, dtype=np.float64)
        for word in text.lower().split():
            word = word.strip(".,!?\"'()[]|")
            if not word:
                continue
            h = derive_seed(self._seed, "word", word)
            v[h % self._dim] += 1.0 if (h >> 40) & 1 else -1.0
        norm = np.linalg.norm(v)
        if norm == 0.0:
            v[0] = 1.0
            norm = 1.0
        return (v / norm).astype(np.float32)

    def embed_image(self, data: bytes) -> np.ndarray:
        pixels = decode_ppm(data).astype(np.float64)
        h, w = pixels.shape[:2]
        g = self._grid
        cells = np.zeros(g * g * 3)
        for r in range(g):
            for c in range(g):
                block = pixels[r * h // g:(r + 1) * h // g,
                               c * w // g:(c + 1) * w // g]
                cells[(r * g + c) * 3:(r * g + c) * 3 + 3] = \
                    block.reshape(-1, 3).mean(axis=0) / 255.0
        cells -= cells.mean()  # drop shared-brightness mass
        v = cells @ self._proj
        norm = np.linalg.norm(v)
        if norm == 0.0:
            v[0] = 1.0
            norm = 1.0
        return (v / norm).astype(np.float32)


# --- key construction -----------------------------------------------------------

def _pool(parts: list[np.ndarray], dim: int) -> np.ndarray:
    """Mean then L2-normalize, accumulating in sorted byte order so the
    result does not depend on how the parts were collected."""
    if not parts:
        raise EmptyTrajectory("nothing to pool")
    for p in parts:
        if p.shape != (dim,):
            raise DimensionMismatch(f"embedding shape {p.shape}, expected ({dim},)")
    ordered = sorted((np.asarray(p, dtype=np.float32) for p in parts),
                     key=lambda a: a.tobytes())
    total = np.zeros(dim, dtype=np.float64)
    for p in ordered:
        total += p
    mean = total / len(ordered)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        raise EmbedderFailure("pooled embedding has zero norm")
    return (mean / norm).astype(np.float32)


def build_trajectory_key(traj: Trajectory, task: TaskQuery, emb: Embedder,
                         media: MediaStore) -> RetrievalKey:
    """Key = normalized mean of every screenshot embedding, the task text
    embedding, and one text embedding per rendered action."""
    if not traj.steps:
        raise EmptyTrajectory(traj.id)
    parts: list[np.ndarray] = []
    try:
        parts.append(emb.embed_text(task.text))
    except Exception as exc:
        raise EmbedderFailure(f"task text embedding failed: {exc}") from exc
    for step in traj.steps:
        try:
            parts.append(emb.embed_image(media.get_bytes(step.observation.screenshot)))
            parts.append(emb.embed_text(render_action(step.action)))
        except EmbedderFailure:
            raise
        except Exception as exc:
            raise EmbedderFailure(f"embedding failed at step {step.index}: {exc}",
                                  step_index=step.index) from exc
    return RetrievalKey(vector=_pool(parts, emb.dim), source_id=traj.id)


def build_query_key(obs: Observation, task_text: str, emb: Embedder,
                    media: MediaStore) -> RetrievalKey:
    """Key = normalized mean of the current screenshot and task text embeddings."""
    try:
        parts = [emb.embed_image(media.get_bytes(obs.screenshot)),
                 emb.embed_text(task_text)]
    except Exception as exc:
        raise EmbedderFailure(f"query embedding failed: {exc}") from exc
    return RetrievalKey(vector=_pool(parts, emb.dim), source_id="query")


# --- indexes ---------------------------------------------------------------------

class VectorIndex(Protocol):
    def add(self, key: RetrievalKey) -> None: ...

    def topk(self, query: RetrievalKey, k: int) -> list[tuple[str, float]]: ...

    def __len__(self) -> int: ...


class ExactIndex:
    """Dense full-scan index; results equal brute_force_topk by contract."""

    def __init__(self, dim: int):
        self.dim = dim
        self._ids: list[str] = []
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def add(self, key: RetrievalKey) -> None:
        if key.vector.shape != (self.dim,):
            raise DimensionMismatch(f"key dim {key.vector.shape[0]} != index dim {self.dim}")
        self._ids.append(key.source_id)
        self._rows.append(key.vector.astype(np.float64))
        self._matrix = None

    def __len__(self) -> int:
        return len(self._ids)

    def topk(self, query: RetrievalKey, k: int) -> list[tuple[str, float]]:
        if query.vector.shape != (self.dim,):
            raise DimensionMismatch(f"query dim {query.vector.shape[0]} != index dim {self.dim}")
        if not self._ids:
            return []  # empty index yields an empty result, not an error
        if self._matrix is None:
            self._matrix = np.vstack(self._rows)
        scores = self._matrix @ query.vector.astype(np.float64)
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        return [(self._ids[i], float(scores[i])) for i in order[:min(k, len(order))]]

    def keys(self) -> list[RetrievalKey]:
        return [RetrievalKey(vector=row.astype(np.float32), source_id=i)
                for i, row in zip(self._ids, self._rows)]


class SignHashIndex:
    """Approximate backend: random-hyperplane sign buckets, multi-probe.

    Searches the query's bucket plus all buckets at Hamming distance 1;
    recall against the oracle is reported by tests, never guaranteed.
    """

    def __init__(self, dim: int, n_bits: int = 8, seed: int = 0):
        self.dim = dim
        self.n_bits = n_bits
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "signhash")))
        self._planes = rng.standard_normal((n_bits, dim))
        self._buckets: dict[int, list[int]] = {}
        self._ids: list[str] = []
        self._vecs: list[np.ndarray] = []

    def _bucket(self, v: np.ndarray) -> int:
        bits = (self._planes @ v.astype(np.float64)) >= 0.0
        code = 0
        for b in bits:
            code = (code << 1) | int(b)
        return code

    def add(self, key: RetrievalKey) -> None:
        if key.vector.shape != (self.dim,):
            raise DimensionMismatch(f"key dim {key.vector.shape[0]} != index dim {self.dim}")
        idx = len(self._ids)
        self._ids.append(key.source_id)
        self._vecs.append(key.vector.astype(np.float64))
        self._buckets.setdefault(self._bucket(key.vector), []).append(idx)

    def __len__(self) -> int:
        return len(self._ids)

    def topk(self, query: RetrievalKey, k: int) -> list[tuple[str, float]]:
        if query.vector.shape != (self.dim,):
            raise DimensionMismatch(f"query dim {query.vector.shape[0]} != index dim {self.dim}")
        if not self._ids:
            return []
        code = self._bucket(query.vector)
        candidates: list[int] = []
        probes = [code] + [code ^ (1 << b) for b in range(self.n_bits)]
        for probe in probes:
            candidates.extend(self._buckets.get(probe, ()))
        if not candidates:
            candidates = list(range(len(self._ids)))
        candidates = sorted(set(candidates))
        q = query.vector.astype(np.float64)
        scored = [(i, float(self._vecs[i] @ q)) for i in candidates]
        scored.sort(key=lambda t: (-t[1], t[0]))
        return [(self._ids[i], s) for i, s in scored[:min(k, len(scored))]]


def brute_force_topk(keys: Sequence[RetrievalKey], query: RetrievalKey,
                     k: int) -> list[tuple[str, float]]:
    """Ground-truth linear scan: same scoring and tie rules as the index,
    computed with exact (fsum) dot products."""
    scored = []
    for i, key in enumerate(keys):
        if key.vector.shape != query.vector.shape:
            raise DimensionMismatch(f"key {key.source_id} dim mismatch")
        score = math.fsum(float(a) * float(b)
                          for a, b in zip(key.vector, query.vector))
        scored.append((i, key.source_id, score))
    scored.sort(key=lambda t: (-t[2], t[0]))
    return [(sid, score) for _, sid, score in scored[:min(k, len(scored))]]


# --- index persistence (CMIX) -----------------------------------------------------

CMIX_MAGIC = b"CMIX"
CMIX_VERSION = 1


def save_index(keys: Iterable[RetrievalKey], path: str | Path, dim: int) -> None:
    """CMIX: magic, version u32, D u32, count u64, then per key a
    u32-length-prefixed UTF-8 id followed by D little-endian float32."""
    keys = list(keys)
    with open(path, "wb") as fh:
        fh.write(CMIX_MAGIC)
        fh.write(struct.pack("<IIQ", CMIX_VERSION, dim, len(keys)))
        for key in keys:
            if key.vector.shape != (dim,):
                raise DimensionMismatch(f"key {key.source_id} has dim {key.vector.shape[0]}")
            raw = key.source_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(key.vector.astype("<f4").tobytes())


def _read_index(path: str | Path) -> tuple[int, list[RetrievalKey]]:
    from .errors import SchemaVersionMismatch
    with open(path, "rb") as fh:
        if fh.read(4) != CMIX_MAGIC:
            raise SchemaVersionMismatch(f"{path} is not a CMIX file")
        version, dim, count = struct.unpack("<IIQ", fh.read(16))
        if version != CMIX_VERSION:
            raise SchemaVersionMismatch(f"CMIX version {version}")
        keys = []
        for _ in range(count):
            (id_len,) = struct.unpack("<I", fh.read(4))
            source_id = fh.read(id_len).decode("utf-8")
            vec = np.frombuffer(fh.read(4 * dim), dtype="<f4").astype(np.float32)
            keys.append(RetrievalKey(vector=vec, source_id=source_id))
    return dim, keys


def load_index_keys(path: str | Path) -> list[RetrievalKey]:
    return _read_index(path)[1]


def load_index(path: str | Path, backend: str = "exact",
               seed: int = 0) -> VectorIndex:
    dim, keys = _read_index(path)
    index: VectorIndex
    if backend == "exact":
        index = ExactIndex(dim)
    elif backend == "approximate":
        index = SignHashIndex(dim, seed=seed)
    else:
        raise ValueError(f"unknown index backend {backend!r}")
    for key in keys:
        index.add(key)
    return index
