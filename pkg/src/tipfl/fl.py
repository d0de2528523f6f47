"""FedAvg simulation: partitioning, client sampling, aggregation, round loop, checkpoints."""
from __future__ import annotations

import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
import torch

from .data import Dataset, write_csv
from .defenses import DefensePolicy, apply_defense
from .interpret import select_guidance
from .model import ModelSpec, Params, TrainConfig, clone_params, evaluate, init_params, local_train
from .tensor import RngStream

log = logging.getLogger(__name__)

ROUNDS_HEADER = ("round", "client_ids", "accuracy", "loss", "wall_ms")
MAGIC = b"TIPM"
VERSION = 1


@dataclass(frozen=True)
class FLRunConfig:
    num_clients: int = 10
    participation: float = 0.3
    rounds: int = 30
    train: TrainConfig = field(default_factory=TrainConfig)
    defense: DefensePolicy = field(default_factory=DefensePolicy)
    partition: Literal["iid", "by-class"] = "iid"
    seed: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must be in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.partition not in ("iid", "by-class"):
            raise ValueError(f"unknown partition {self.partition!r}")

    @property
    def clients_per_round(self) -> int:
        return max(1, math.floor(self.num_clients * self.participation + 0.5))


@dataclass(frozen=True)
class RoundReport:
    round: int
    client_ids: tuple[int, ...]
    accuracy: float
    loss: float
    wall_ms: float = 0.0

    def row(self) -> tuple:
        return (self.round, ";".join(map(str, self.client_ids)), self.accuracy, self.loss, self.wall_ms)


def partition_dataset(dataset: Dataset, num_clients: int, mode: str, stream: RngStream) -> list[Dataset]:
    """Disjoint shards covering the dataset.

    ``iid`` splits a random permutation into near-equal parts. ``by-class``
    sorts by label, cuts 2*J contiguous chunks and deals two random chunks to
    each client, so every client sees only a few classes.
    """
    n = len(dataset)
    if n < num_clients:
        raise ValueError(f"dataset of {n} samples is too small for {num_clients} clients")
    rng = stream.child("partition").generator()
    if num_clients == 1:
        return [dataset.subset(np.arange(n))]
    if mode == "iid":
        parts = np.array_split(rng.permutation(n), num_clients)
    elif mode == "by-class":
        labels = dataset.labels.numpy()
        order = np.lexsort((rng.random(n), labels))
        per = 2 if n >= 2 * num_clients else 1
        chunks = np.array_split(order, per * num_clients)
        deal = rng.permutation(len(chunks))
        parts = [np.sort(np.concatenate([chunks[i] for i in deal[j * per : (j + 1) * per]])) for j in range(num_clients)]
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    return [dataset.subset(np.sort(p)) for p in parts]


def sample_clients(num_clients: int, n: int, round: int, stream: RngStream) -> tuple[int, ...]:
    """Size-n subset of range(num_clients), uniform without replacement, fixed per (seed, round)."""
    if not 1 <= n <= num_clients:
        raise ValueError(f"cannot sample {n} of {num_clients} clients")
    rng = stream.child("sample", round=round).generator()
    return tuple(sorted(int(i) for i in rng.choice(num_clients, size=n, replace=False)))


def aggregate(uploads: Sequence[Params]) -> Params:
    """Unweighted mean of each parameter tensor."""
    if not uploads:
        raise ValueError("nothing to aggregate")
    first = uploads[0]
    for u in uploads[1:]:
        if list(u) != list(first) or any(u[k].shape != first[k].shape for k in first):
            raise ValueError("uploads disagree on parameter names or shapes")
    out = {}
    for k in first:
        total = first[k].clone()
        for u in uploads[1:]:
            total = total + u[k]
        out[k] = total / len(uploads)
    return out


def clip_update(local: Params, reference: Params, bound: float) -> Params:
    """Scale (local - reference) down to L2 norm ``bound`` if it is larger."""
    delta = {k: local[k] - reference[k] for k in local}
    norm = math.sqrt(sum(float((d**2).sum()) for d in delta.values()))
    if norm <= bound:
        return local
    scale = bound / norm
    return {k: reference[k] + delta[k] * scale for k in local}


def client_update(
    cfg: FLRunConfig,
    spec: ModelSpec,
    global_params: Params,
    shard: Dataset,
    round: int,
    client: int,
) -> Params:
    """Noise-free local training, guidance selection and defense for one client."""
    stream = RngStream(cfg.seed, round=round, client=client)
    local = local_train(global_params, spec, shard.images, shard.labels, cfg.train, stream.child("train"))
    clip = cfg.defense.shared.clip_norm
    if clip is not None and cfg.defense.kind != "none":
        local = clip_update(local, global_params, clip)
    guidance = None
    if cfg.defense.needs_guidance:
        guidance = select_guidance(shard.images, shard.labels, stream.child("guidance"))
    return apply_defense(cfg.defense, local, spec, guidance, stream.child("defense"))


def worker_count() -> int:
    """Client-level worker cap from TIP_THREADS (0 or unset: one per CPU)."""
    raw = os.environ.get("TIP_THREADS", "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ValueError("TIP_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def run_federation(
    cfg: FLRunConfig,
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
    init: Params | None = None,
    out_dir: str | os.PathLike | None = None,
    on_round: Callable[[RoundReport], None] | None = None,
) -> tuple[list[RoundReport], Params]:
    """Run ``cfg.rounds`` FedAvg rounds; persist rounds.csv after every round when ``out_dir`` is set."""
    torch.set_num_threads(1)  # fixed reduction order; parallelism is across clients
    root = RngStream(cfg.seed)
    params = clone_params(init) if init is not None else init_params(spec, root.child("init"))
    shards = partition_dataset(train, cfg.num_clients, cfg.partition, root)
    n = cfg.clients_per_round
    reports: list[RoundReport] = []
    workers = min(worker_count(), n)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for t in range(1, cfg.rounds + 1):
            start = time.perf_counter()
            clients = sample_clients(cfg.num_clients, n, t, root)
            futures = [pool.submit(client_update, cfg, spec, params, shards[j], t, j) for j in clients]
            uploads = [f.result() for f in futures]  # raises on the first failed client
            params = aggregate(uploads)
            acc, loss = evaluate(params, spec, test.images, test.labels)
            wall = (time.perf_counter() - start) * 1000 if cfg.record_wall_time else 0.0
            rep = RoundReport(t, clients, acc, loss, wall)
            reports.append(rep)
            log.info("round %d clients=%s acc=%.4f loss=%.4f", t, clients, acc, loss)
            if out_dir is not None:
                write_csv(Path(out_dir) / "rounds.csv", [r.row() for r in reports], ROUNDS_HEADER)
            if on_round is not None:
                on_round(rep)
    return reports, params


def save_checkpoint(path: str | os.PathLike, params: Params) -> None:
    """``TIPM`` | u32 version | per tensor: u32 name length, utf-8 name, u32 rank, u32 dims, f64 payload (all LE)."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, t in params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.detach().numpy(), dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> Params:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a TIPM checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    params: Params = {}
    try:
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + nlen].decode()
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            count = math.prod(dims)
            if pos + 8 * count > len(raw):
                raise ValueError(f"{path}: truncated payload for {name} at byte {pos}")
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims)
            params[name] = torch.from_numpy(arr.astype(np.float64))
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint at byte {pos}") from exc
    return params
