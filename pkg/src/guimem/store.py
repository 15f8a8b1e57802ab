"""Durable storage: screenshots, trajectory directories, pool manifests.

Layout under a pool root:

    pool.manifest            line records; first line is a header record
    pool.digest              hex sha256 of pool.manifest
    trajectories/<id>/       meta.jsonl + screenshots, one dir per trajectory

Screenshots are stored as binary PPM (P6): header plus raw RGB bytes, so
identical pixels always produce identical files on every platform. All text
records go through util.record_line, which fixes key order and separators;
saving the same state twice yields byte-identical files.

Writes are single-writer: save_pool stages trajectory directories first and
commits by atomically replacing the manifest. Readers of an older manifest
keep a consistent snapshot.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .actions import Action, ActionKind, Direction
from .core import (Environment, EnvStatus, Difficulty, Observation, Outcome,
                   PoolState, Provenance, ScreenshotRef, SomLabel, Step,
                   TaskQuery, Trajectory)
from .errors import CorruptManifest, SchemaVersionMismatch
from .util import parse_record_line, record_line, stable_digest

FORMAT_VERSION = 1


# --- lossless image codec ----------------------------------------------------

def encode_ppm(pixels: np.ndarray) -> bytes:
    """Encode an (h, w, 3) uint8 array as binary PPM."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected (h, w, 3) uint8 pixels, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(pixels).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM file")
    # header: magic, width, height, maxval, single whitespace, then raster
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":  # comment line
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        fields.append(data[start:i])
    i += 1  # single whitespace before raster
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=i)
    return raster.reshape(h, w, 3).copy()


# --- screenshot storage -------------------------------------------------------

class MediaStore:
    """Content-addressed screenshot files in one writable directory.

    File names are derived from the sha256 of the encoded bytes, so a ref's
    digest always matches its file. Read-only fallback directories (e.g.
    trajectory dirs of a loaded pool) can be attached for resolution.
    """

    def __init__(self, root: str | Path, fallbacks: Iterable[str | Path] = ()):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fallbacks = [Path(p) for p in fallbacks]

    def put(self, pixels: np.ndarray) -> ScreenshotRef:
        data = encode_ppm(pixels)
        digest = stable_digest(data)
        name = f"{digest}.ppm"
        path = self.root / name
        if not path.exists():
            path.write_bytes(data)
        h, w = pixels.shape[:2]
        return ScreenshotRef(path=name, digest=digest, size=(w, h))

    def add_fallback(self, directory: str | Path) -> None:
        self.fallbacks.append(Path(directory))

    def get_bytes(self, ref: ScreenshotRef) -> bytes:
        for base in [self.root, *self.fallbacks]:
            path = base / ref.path
            if path.exists():
                data = path.read_bytes()
                if stable_digest(data) != ref.digest:
                    raise CorruptManifest(f"screenshot {path} does not match digest")
                return data
        raise FileNotFoundError(f"no stored screenshot for {ref.path}")

    def get_pixels(self, ref: ScreenshotRef) -> np.ndarray:
        return decode_ppm(self.get_bytes(ref))


# --- record (de)serialization --------------------------------------------------

def _action_record(action: Action) -> dict:
    return {
        "kind": action.kind.value,
        "target_label": action.target_label,
        "text": action.text,
        "direction": action.direction.value if action.direction else None,
        "rationale": action.rationale,
    }


def _action_from(rec: Mapping) -> Action:
    return Action(
        kind=ActionKind(rec["kind"]),
        target_label=rec["target_label"],
        text=rec["text"],
        direction=Direction(rec["direction"]) if rec["direction"] else None,
        rationale=rec["rationale"],
    )


def _observation_record(obs: Observation) -> dict:
    som = None
    if obs.som_labels is not None:
        som = {str(k): {"bbox": list(v.bbox), "text": v.text}
               for k, v in sorted(obs.som_labels.items())}
    return {
        "screenshot": {"path": obs.screenshot.path, "digest": obs.screenshot.digest,
                       "size": list(obs.screenshot.size)},
        "som_labels": som,
        "page_url": obs.page_url,
    }


def _observation_from(rec: Mapping) -> Observation:
    shot = rec["screenshot"]
    som = rec["som_labels"]
    labels = None
    if som is not None:
        labels = {int(k): SomLabel(bbox=tuple(v["bbox"]), text=v["text"])
                  for k, v in som.items()}
    return Observation(
        screenshot=ScreenshotRef(path=shot["path"], digest=shot["digest"],
                                 size=tuple(shot["size"])),
        som_labels=labels,
        page_url=rec["page_url"],
    )


def _task_record(task: TaskQuery) -> dict:
    return {
        "kind": "task", "id": task.id, "env_id": task.env_id, "text": task.text,
        "expected_outcome": task.expected_outcome,
        "difficulty": task.difficulty.value, "provenance": task.provenance.value,
        "category": task.category, "refined_from": task.refined_from,
    }


def _task_from(rec: Mapping) -> TaskQuery:
    return TaskQuery(
        id=rec["id"], env_id=rec["env_id"], text=rec["text"],
        expected_outcome=rec["expected_outcome"],
        difficulty=Difficulty(rec["difficulty"]),
        provenance=Provenance(rec["provenance"]),
        category=rec["category"], refined_from=rec["refined_from"],
    )


def _env_record(env: Environment) -> dict:
    return {"kind": "env", "id": env.id, "url": env.url, "category": env.category,
            "description": env.description, "status": env.status.value}


def _env_from(rec: Mapping) -> Environment:
    return Environment(id=rec["id"], url=rec["url"], category=rec["category"],
                       description=rec["description"], status=EnvStatus(rec["status"]))


# --- trajectory directories -----------------------------------------------------

def save_trajectory(traj: Trajectory, directory: str | Path, media: MediaStore) -> None:
    """Write meta.jsonl plus every referenced screenshot into `directory`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [record_line({
        "format_version": FORMAT_VERSION, "kind": "trajectory", "id": traj.id,
        "env_id": traj.env_id, "task_id": traj.task_id,
        "outcome": traj.outcome.value, "judge_note": traj.judge_note,
        "n_steps": len(traj.steps),
    })]
    for step in traj.steps:
        lines.append(record_line({
            "kind": "step", "index": step.index,
            "action": _action_record(step.action),
            "observation": _observation_record(step.observation),
        }))
        ref = step.observation.screenshot
        target = directory / ref.path
        if not target.exists():
            target.write_bytes(media.get_bytes(ref))
    (directory / "meta.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trajectory(directory: str | Path, verify_media: bool = True) -> Trajectory:
    directory = Path(directory)
    text = (directory / "meta.jsonl").read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln]
    head = parse_record_line(lines[0])
    if head.get("format_version") != FORMAT_VERSION:
        raise SchemaVersionMismatch(f"trajectory format {head.get('format_version')}")
    steps = []
    for line in lines[1:]:
        rec = parse_record_line(line)
        obs = _observation_from(rec["observation"])
        if verify_media:
            data = (directory / obs.screenshot.path).read_bytes()
            if stable_digest(data) != obs.screenshot.digest:
                raise CorruptManifest(
                    f"{directory}/{obs.screenshot.path} does not match stored digest")
        steps.append(Step(observation=obs, action=_action_from(rec["action"]),
                          index=rec["index"]))
    return Trajectory(id=head["id"], env_id=head["env_id"], task_id=head["task_id"],
                      steps=tuple(steps), outcome=Outcome(head["outcome"]),
                      judge_note=head["judge_note"])


# --- pool manifest ----------------------------------------------------------------

def save_pool(state: PoolState, root: str | Path, media: MediaStore) -> str:
    """Persist a PoolState under `root`; returns the manifest digest.

    Deterministic: identical states produce byte-identical manifests.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for traj_id in sorted(state.trajs):
        save_trajectory(state.trajs[traj_id], root / "trajectories" / traj_id, media)

    records = [record_line({"kind": "header", "format_version": FORMAT_VERSION,
                            "iteration": state.iteration})]
    body = []
    for task in state.tasks.values():
        body.append(_task_record(task))
    for env in state.envs.values():
        body.append(_env_record(env))
    for traj_id in state.trajs:
        body.append({"kind": "traj", "id": traj_id})
    body.sort(key=lambda r: (r["kind"], r["id"]))
    records.extend(record_line(r) for r in body)

    manifest = ("\n".join(records) + "\n").encode("utf-8")
    digest = stable_digest(manifest)
    tmp = root / "pool.manifest.tmp"
    tmp.write_bytes(manifest)
    os.replace(tmp, root / "pool.manifest")
    (root / "pool.digest").write_text(digest + "\n", encoding="ascii")
    return digest


def load_pool(root: str | Path) -> tuple[PoolState, MediaStore]:
    """Load a pool; returns the state and a media store resolving its screenshots."""
    root = Path(root)
    manifest = (root / "pool.manifest").read_bytes()
    recorded = (root / "pool.digest").read_text(encoding="ascii").strip()
    if stable_digest(manifest) != recorded:
        raise CorruptManifest(f"manifest digest mismatch under {root}")

    lines = [ln for ln in manifest.decode("utf-8").splitlines() if ln]
    head = parse_record_line(lines[0])
    if head.get("kind") != "header" or head.get("format_version") != FORMAT_VERSION:
        raise SchemaVersionMismatch(f"pool manifest header: {lines[0]!r}")

    tasks: dict[str, TaskQuery] = {}
    envs: dict[str, Environment] = {}
    trajs: dict[str, Trajectory] = {}
    media = MediaStore(root / "media")
    for line in lines[1:]:
        rec = parse_record_line(line)
        kind = rec["kind"]
        if kind == "task":
            tasks[rec["id"]] = _task_from(rec)
        elif kind == "env":
            envs[rec["id"]] = _env_from(rec)
        elif kind == "traj":
            traj_dir = root / "trajectories" / rec["id"]
            trajs[rec["id"]] = load_trajectory(traj_dir)
            media.add_fallback(traj_dir)
        else:
            raise SchemaVersionMismatch(f"unknown record kind {kind!r}")
    state = PoolState(tasks=tasks, envs=envs, trajs=trajs, iteration=head["iteration"])
    return state, media
