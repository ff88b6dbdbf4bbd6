"""Binary checkpoint container.

Layout: magic ``LNCK``, u32 format version, u64 header length, a UTF-8 JSON
header (sorted keys) and then the raw little-endian float64 arrays in the
order listed by the header. Identical states give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, BackboneWeights
from .delora import AdapterBank
from .errors import InputError
from .learning import Checkpoint, FisherState, Hyperparams
from .taka import IndexEntry, RetrievalIndex

MAGIC = b"LNCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class _Arrays:
    def __init__(self):
        self.table: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, name: str, arr) -> None:
        data = np.ascontiguousarray(arr, dtype="<f8")
        raw = data.tobytes()
        self.table.append({"name": name, "shape": list(data.shape), "offset": self.offset})
        self.chunks.append(raw)
        self.offset += len(raw)

    def add_list(self, prefix: str, arrays) -> None:
        for i, a in enumerate(arrays):
            self.add(f"{prefix}/{i}", a)


def checkpoint_to_bytes(state: Checkpoint) -> bytes:
    arrays = _Arrays()
    bank = state.bank
    arrays.add_list("backbone/W", state.backbone.W)
    arrays.add_list("backbone/b", state.backbone.b)
    arrays.add_list("bank/A", bank.A)
    for k, layers in enumerate(bank.experts):
        arrays.add_list(f"bank/expert{k}", layers)
    arrays.add_list("fisher/A", state.fisher.A)
    if state.fisher.B is not None:
        arrays.add_list("fisher/B", state.fisher.B)
    arrays.add_list("snapshot/A", state.snapshot_A)
    if state.snapshot_B is not None:
        arrays.add_list("snapshot/B", state.snapshot_B)
    for j, e in enumerate(state.index.entries):
        arrays.add(f"index{j}/scene", e.scene_embeddings)
        arrays.add(f"index{j}/instruction", e.instruction_embeddings)

    meta = {
        "strategy": state.strategy,
        "hp": state.hp.to_dict(),
        "seed": state.seed,
        "dims": list(state.dims),
        "position": state.position,
        "scene_ids": list(state.scene_ids),
        "history": state.history,
        "layer_dims": list(state.backbone.spec.layer_dims),
        "rank": bank.rank,
        "n_experts": bank.n_experts,
        "expert_styles": list(bank.expert_styles),
        "trainable_expert": bank.trainable_expert,
        "fisher_tasks": state.fisher.task_count_seen,
        "fisher_B": state.fisher.B is not None,
        "snapshot_B": state.snapshot_B is not None,
        "index": [{"task_id": e.task_id, "expert": e.expert, "style": e.style}
                  for e in state.index.entries],
        "arrays": arrays.table,
    }
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(arrays.chunks)


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise InputError("checkpoint is truncated")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise InputError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise InputError(f"checkpoint format {version} is not supported (expected {FORMAT_VERSION})")
    start = _PREFIX.size
    try:
        meta = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"corrupt checkpoint header: {exc}") from None
    body = memoryview(blob)[start + hlen:]
    arrays = {}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        if off + 8 * n > len(body):
            raise InputError(f"checkpoint is truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(body[off:off + 8 * n], dtype="<f8").reshape(shape).astype(np.float64)

    def take(prefix: str, n: int) -> list[np.ndarray]:
        return [arrays[f"{prefix}/{i}"] for i in range(n)]

    spec = BackboneSpec(tuple(meta["layer_dims"]))
    L = spec.n_layers
    backbone = BackboneWeights(spec, take("backbone/W", L), take("backbone/b", L))
    bank = AdapterBank(
        rank=meta["rank"],
        A=take("bank/A", L),
        experts=[take(f"bank/expert{k}", L) for k in range(meta["n_experts"])],
        expert_styles=list(meta["expert_styles"]),
        trainable_expert=meta["trainable_expert"],
    )
    bank.check()
    fisher = FisherState(take("fisher/A", L), take("fisher/B", L) if meta["fisher_B"] else None,
                         meta["fisher_tasks"])
    index = RetrievalIndex([
        IndexEntry(e["task_id"], e["expert"], e["style"],
                   arrays[f"index{j}/scene"], arrays[f"index{j}/instruction"])
        for j, e in enumerate(meta["index"])
    ])
    return Checkpoint(
        strategy=meta["strategy"],
        hp=Hyperparams.from_dict(meta["hp"]),
        backbone=backbone,
        bank=bank,
        fisher=fisher,
        snapshot_A=take("snapshot/A", L),
        index=index,
        seed=meta["seed"],
        dims=tuple(meta["dims"]),
        position=meta["position"],
        snapshot_B=take("snapshot/B", L) if meta["snapshot_B"] else None,
        scene_ids=list(meta["scene_ids"]),
        history=meta["history"],
    )


def save_checkpoint(state: Checkpoint, path) -> str:
    """Write atomically; returns the sha256 of the written bytes."""
    path = Path(path)
    blob = checkpoint_to_bytes(state)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
