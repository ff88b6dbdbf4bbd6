"""Retrieval-based expert routing.

Each learned task stores a deduplicated set of observation embeddings and of
instruction embeddings. A query is scored per task by its best cosine match;
tasks whose instruction similarity reaches ``mu`` are kept, and the ``K`` best
by observation similarity supply the experts for the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .backbone import STOP, forward
from .delora import ActiveAdapters
from .errors import ConfigurationError, InputError, RoutingError
from .linalg import cosine_rows
from .navsim import (
    EpisodeSpec,
    InstructionStyle,
    Scene,
    Task,
    Trajectory,
    encode_instruction,
    encode_observation,
    expert_actions,
    step,
)

DEDUP_THRESHOLD = 0.9


@dataclass(frozen=True)
class RouterConfig:
    K: int = 2
    mu_threshold: float = 0.5
    reduction: str = "max"  # or "mean"
    per_step: bool = True  # False freezes routing after the first step
    step_cap_factor: int = 4
    step_cap_extra: int = 10

    def __post_init__(self):
        if self.K < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.K}")
        if not 0.0 <= self.mu_threshold <= 1.0:
            raise ConfigurationError(f"mu must be in [0, 1], got {self.mu_threshold}")
        if self.reduction not in ("max", "mean"):
            raise ConfigurationError(f"unknown reduction {self.reduction!r}")


@dataclass
class IndexEntry:
    task_id: int
    expert: int
    style: str
    scene_embeddings: np.ndarray  # (m, d)
    instruction_embeddings: np.ndarray  # (k, d)


@dataclass
class RetrievalIndex:
    entries: list[IndexEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def copy(self) -> "RetrievalIndex":
        return RetrievalIndex([
            IndexEntry(e.task_id, e.expert, e.style,
                       e.scene_embeddings.copy(), e.instruction_embeddings.copy())
            for e in self.entries
        ])


class TaskSimilarity(NamedTuple):
    expert: int
    sm_obs: float
    sm_instr: float


def dedup(vectors, threshold: float = DEDUP_THRESHOLD) -> np.ndarray:
    """Greedy in-order dedup: drop a vector whose cosine with any kept one exceeds ``threshold``."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise InputError("dedup expects a 2-D array of row vectors")
    kept: list[np.ndarray] = []
    for v in vectors:
        if kept and np.max(cosine_rows(v[None, :], np.stack(kept))) > threshold:
            continue
        kept.append(v)
    if not kept:
        return np.zeros((0, vectors.shape[1]))
    return np.stack(kept)


def task_embeddings(task: Task, obs_dim: int = 16, instr_dim: int = 16):
    """Observation and instruction embeddings met along the task's training demos."""
    obs, instr = [], []
    episodes = task.train or task.test
    for ep in episodes:
        instr.append(encode_instruction(ep.instruction, task.style, instr_dim))
        pose = ep.start
        for a in expert_actions(task.scene, ep.start, ep.goal):
            obs.append(encode_observation(task.scene, pose, obs_dim))
            pose = step(task.scene, pose, a)
    return np.stack(obs), np.stack(instr)


def register_task(index: RetrievalIndex, task: Task, expert: int,
                  obs_dim: int = 16, instr_dim: int = 16, n_experts: int | None = None) -> IndexEntry:
    if n_experts is not None and not 0 <= expert < n_experts:
        raise RoutingError(f"expert {expert} does not exist")
    obs, instr = task_embeddings(task, obs_dim, instr_dim)
    entry = IndexEntry(task.task_id, expert, InstructionStyle(task.style).value, dedup(obs), dedup(instr))
    index.entries.append(entry)
    return entry


def _reduce(sims: np.ndarray, reduction: str) -> np.ndarray:
    return sims.max(axis=1) if reduction == "max" else sims.mean(axis=1)


def similarities(index: RetrievalIndex, obs_emb, instr_emb, reduction: str = "max",
                 exclude_expert: int | None = None) -> list[TaskSimilarity]:
    """Per registered task: best cosine of the query against its stored sets."""
    entries = [e for e in index.entries if e.expert != exclude_expert]
    if not entries:
        raise RoutingError("retrieval index is empty")
    obs_emb = np.asarray(obs_emb, dtype=np.float64)[None, :]
    instr_emb = np.asarray(instr_emb, dtype=np.float64)[None, :]
    out = []
    for e in entries:
        so = _reduce(cosine_rows(obs_emb, e.scene_embeddings), reduction)[0]
        si = _reduce(cosine_rows(instr_emb, e.instruction_embeddings), reduction)[0]
        out.append(TaskSimilarity(e.expert, float(so), float(si)))
    return out


def select_experts(sims, cfg: RouterConfig, k: int | None = None) -> list[int]:
    """Top-``k`` experts by instruction-masked observation similarity.

    Mask is ``sm_instr >= mu``; if no task passes the mask, rank by raw
    observation similarity instead. Ties go to the earlier-registered task.
    """
    sims = list(sims)
    if not sims:
        raise RoutingError("no similarities to select from")
    k = cfg.K if k is None else k
    mask = [1.0 if s.sm_instr >= cfg.mu_threshold else 0.0 for s in sims]
    if any(mask):
        scores = [m * s.sm_obs for m, s in zip(mask, sims)]
    else:
        scores = [s.sm_obs for s in sims]
    order = sorted(range(len(sims)), key=lambda i: (-scores[i], i))
    chosen: list[int] = []
    for i in order:
        if len(chosen) == k:
            break
        if sims[i].expert not in chosen:
            chosen.append(sims[i].expert)
    return chosen


def route(index: RetrievalIndex, obs_emb, instr_emb, cfg: RouterConfig,
          k: int | None = None, exclude_expert: int | None = None) -> list[int]:
    sims = similarities(index, obs_emb, instr_emb, cfg.reduction, exclude_expert)
    return select_experts(sims, cfg, k)


def infer_episode(model, scene: Scene, episode: EpisodeSpec, style, cfg: RouterConfig) -> Trajectory:
    """Roll out the policy without a task id.

    ``model`` needs ``backbone``, ``bank``, ``index``, ``dims`` and a
    ``routes`` flag (False means the single expert 0 is always used).
    """
    if not isinstance(episode, EpisodeSpec) or episode.optimal_length <= 0:
        raise InputError(f"malformed episode {episode!r}")
    obs_dim, instr_dim = model.dims
    instr = encode_instruction(episode.instruction, style, instr_dim)
    cap = cfg.step_cap_factor * episode.optimal_length + cfg.step_cap_extra
    pose = episode.start
    traj = Trajectory([pose], [], tuple(episode.goal), episode.optimal_length)
    active = None
    for _ in range(cap):
        obs = encode_observation(scene, pose, obs_dim)
        if not model.routes:
            active = (0,)
        elif not model.index.entries:
            active = ()  # nothing learned yet: frozen backbone only
        elif active is None or cfg.per_step:
            active = tuple(route(model.index, obs, instr, cfg))
        traj.routed.append(active)
        adapters = ActiveAdapters(model.bank, active)
        logits = forward(model.backbone, adapters, np.concatenate([obs, instr])).logits
        action = int(np.argmax(logits))
        traj.actions.append(action)
        if action == STOP:
            break
        pose = step(scene, pose, action)
        traj.poses.append(pose)
    return traj


def index_summary(index: RetrievalIndex) -> dict:
    """Set sizes and cross-task max similarities, for human inspection."""
    rows = []
    for e in index.entries:
        rows.append({
            "task_id": e.task_id,
            "expert": e.expert,
            "style": e.style,
            "scene_set": int(e.scene_embeddings.shape[0]),
            "instruction_set": int(e.instruction_embeddings.shape[0]),
        })
    n = len(index.entries)
    scene_sim = np.zeros((n, n))
    instr_sim = np.zeros((n, n))
    for i, a in enumerate(index.entries):
        for j, b in enumerate(index.entries):
            scene_sim[i, j] = cosine_rows(a.scene_embeddings, b.scene_embeddings).max()
            instr_sim[i, j] = cosine_rows(a.instruction_embeddings, b.instruction_embeddings).max()
    return {"tasks": rows, "scene_max_sim": scene_sim.round(4).tolist(),
            "instruction_max_sim": instr_sim.round(4).tolist()}
