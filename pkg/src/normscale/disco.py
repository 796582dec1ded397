"""Distributed Scion over a simulated in-process collective fabric.

Ranks run as threads that meet at per-collective barriers. Every payload is
framed, copied through the fabric as bytes and decoded on the receiving
side, so ranks never share array memory. Gathered lists are always in rank
order, which makes results independent of thread scheduling.

Wire frame (little-endian)::

    4s   magic b"DSCO"
    u32  source rank
    u32  collective sequence number
    u16  op code
    u8   dtype code (0 = float32, 1 = float64)
    u8   ndim
    u32  dims[ndim]
    ...  raw row-major payload
"""

import hashlib
import math
import struct
import threading
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .lmo import batched_lmo, dual_one_to_rms, dual_rms_to_inf
from .norms import NormKind
from .scion import ScionState, apply_update, check_coverage, lmo_for, momentum_update

OPS = {"all_gather": 1, "all_to_all": 2, "verify": 3}
_OP_NAMES = {v: k for k, v in OPS.items()}
_DTYPES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
_MAGIC = b"DSCO"


class CollectiveError(RuntimeError):
    """Ranks disagreed on a collective, or one of them never arrived."""


@dataclass(frozen=True)
class Message:
    src: int
    seq: int
    op: str
    payload: np.ndarray


def encode_message(msg: Message) -> bytes:
    arr = np.asarray(msg.payload)
    if arr.dtype not in _DTYPES:
        arr = arr.astype(np.float64)
    head = struct.pack("<4sIIHBB", _MAGIC, msg.src, msg.seq, OPS[msg.op], _DTYPES[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def decode_message(frame: bytes) -> Message:
    magic, src, seq, op, dcode, ndim = struct.unpack_from("<4sIIHBB", frame, 0)
    if magic != _MAGIC:
        raise ValueError("bad frame magic")
    off = struct.calcsize("<4sIIHBB")
    shape = struct.unpack_from(f"<{ndim}I", frame, off)
    off += 4 * ndim
    dtype = _DTYPE_CODES[dcode].newbyteorder("<")
    payload = np.frombuffer(frame, dtype=dtype, offset=off).reshape(shape).astype(dtype.newbyteorder("="))
    return Message(src, seq, _OP_NAMES[op], payload)


class Fabric:
    """Synchronous mailbox shared by ``world_size`` simulated ranks."""

    def __init__(self, world_size: int, timeout: float = 30.0):
        if world_size < 1:
            raise ValueError("world_size must be at least 1")
        self.world_size = world_size
        self.counts = Counter()
        self._barrier = threading.Barrier(world_size, timeout=timeout)
        # mailbox[dst][src] holds the frame src addressed to dst
        self._mailbox = [[None] * world_size for _ in range(world_size)]
        self._seq = [0] * world_size

    def communicator(self, rank: int) -> "Communicator":
        return Communicator(self, rank)

    def abort(self):
        self._barrier.abort()

    def _wait(self):
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise CollectiveError("collective abandoned: a rank failed or never arrived") from None

    def exchange(self, rank: int, op: str, outgoing):
        """Deliver ``outgoing[dst]`` to every ``dst``; return messages indexed by source."""
        seq = self._seq[rank]
        self._seq[rank] += 1
        for dst, arr in enumerate(outgoing):
            self._mailbox[dst][rank] = encode_message(Message(rank, seq, op, arr))
        self._wait()
        received = [decode_message(f) for f in self._mailbox[rank]]
        self._wait()
        if rank == 0:
            self.counts[op] += 1
        for m in received:
            if m.op != op or m.seq != seq:
                raise CollectiveError(
                    f"rank {rank} called {op}#{seq} but rank {m.src} called {m.op}#{m.seq}"
                )
        return received


class Communicator:
    def __init__(self, fabric: Fabric, rank: int):
        if not 0 <= rank < fabric.world_size:
            raise ValueError(f"rank {rank} outside world of size {fabric.world_size}")
        self.fabric = fabric
        self.rank = rank

    @property
    def world_size(self) -> int:
        return self.fabric.world_size


def all_gather(comm: Communicator, tensor, op: str = "all_gather"):
    msgs = comm.fabric.exchange(comm.rank, op, [tensor] * comm.world_size)
    return [m.payload for m in msgs]


def all_to_all(comm: Communicator, send_list):
    """``recv[j]`` on rank ``r`` is ``send_list[r]`` of rank ``j``."""
    if len(send_list) != comm.world_size:
        raise ValueError(f"all_to_all needs {comm.world_size} entries, got {len(send_list)}")
    msgs = comm.fabric.exchange(comm.rank, "all_to_all", list(send_list))
    return [m.payload for m in msgs]


def run_ranks(world_size: int, fn, *args, fabric: Fabric | None = None, **kwargs):
    """Run ``fn(comm, *args, **kwargs)`` on every rank; return results in rank order.

    ``args`` entries that are lists of length ``world_size`` wrapped in
    ``PerRank`` are split so rank ``r`` receives element ``r``.
    """
    fabric = fabric or Fabric(world_size)
    results = [None] * world_size
    errors = [None] * world_size

    def target(rank):
        rank_args = [a.values[rank] if isinstance(a, PerRank) else a for a in args]
        rank_kwargs = {k: v.values[rank] if isinstance(v, PerRank) else v for k, v in kwargs.items()}
        try:
            results[rank] = fn(fabric.communicator(rank), *rank_args, **rank_kwargs)
        except BaseException as exc:  # propagated to the caller below
            errors[rank] = exc
            fabric.abort()

    threads = [threading.Thread(target=target, args=(r,)) for r in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    # report the root cause rather than a peer's broken barrier
    primary = [e for e in errors if e is not None and not isinstance(e, CollectiveError)]
    failed = primary or [e for e in errors if e is not None]
    if failed:
        raise failed[0]
    return results


@dataclass
class PerRank:
    values: list


# -- sharding helpers --------------------------------------------------------

def split_rows(x, M: int):
    return [np.ascontiguousarray(part) for part in np.array_split(x, M, axis=0)]


def concat_rows(parts):
    parts = list(parts)
    total = sum(p.shape[0] for p in parts)
    tails = {p.shape[1:] for p in parts}
    if len(tails) != 1:
        raise ValueError(f"row shards disagree on trailing shape: {sorted(tails)}")
    expected = [len(a) for a in np.array_split(np.empty(total), len(parts))]
    got = [p.shape[0] for p in parts]
    if got != expected:
        raise ValueError(f"row shard sizes {got} do not match an even split {expected}")
    return np.concatenate(parts, axis=0)


def _fingerprint(params):
    h = hashlib.sha256()
    for name, W in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(W).tobytes())
    return np.frombuffer(h.digest(), dtype=np.uint8).astype(np.float32)


# -- Disco steps ---------------------------------------------------------------

def step_ddp(comm, params: dict, grads: dict, state: ScionState, groups: dict, lr: float,
             check_replicas: bool = True) -> dict:
    """Replicated-parameter step; parameter ``i`` is owned by rank ``i mod M``.

    Owners compute the duality map, then ``ceil(P/M)`` bucketed all-gathers
    distribute updates; ranks without a bucket member send a zero tensor.
    """
    check_coverage(params, groups)
    names = list(params)
    P, M, r = len(names), comm.world_size, comm.rank
    if check_replicas:
        prints = all_gather(comm, _fingerprint(params), op="verify")
        if any(not np.array_equal(prints[0], fp) for fp in prints[1:]):
            raise CollectiveError("parameter replicas diverged before the step")

    updates = [None] * P
    for i, name in enumerate(names):
        buf = momentum_update(state, name, grads[name])
        if i % M == r:
            updates[i] = lmo_for(buf, groups[name].norm, state.ns)

    for b in range(math.ceil(P / M)):
        start = b * M
        end = min(start + M, P)
        mine = start + r
        send = updates[mine] if mine < end else np.zeros_like(params[names[start]])
        gathered = all_gather(comm, send)
        for j in range(end - start):
            updates[start + j] = gathered[j]

    return {
        name: apply_update(params[name], updates[i], lr * groups[name].lr_scale, state.weight_decay)
        for i, name in enumerate(names)
    }


def step_fsdp(comm, shards: dict, grad_shards: dict, state: ScionState, groups: dict, lr: float) -> dict:
    """Row-sharded step: rank ``start + r`` of each bucket rebuilds the full
    momentum, runs the duality map and scatters row blocks of the update back.

    Uses exactly ``2 ceil(P/M)`` all-to-alls.
    """
    check_coverage(shards, groups)
    names = list(shards)
    P, M, r = len(names), comm.world_size, comm.rank
    local = {name: momentum_update(state, name, grad_shards[name]) for name in names}
    updates = [None] * P

    for b in range(math.ceil(P / M)):
        start = b * M
        end = min(start + M, P)
        send = [local[names[start + j]] if start + j < end else np.zeros_like(local[names[start]])
                for j in range(M)]
        recv = all_to_all(comm, send)
        mine = start + r
        if mine < end:
            g_full = concat_rows(recv)
            u_full = lmo_for(g_full, groups[names[mine]].norm, state.ns)
            send_u = split_rows(u_full, M)
        else:
            send_u = [np.zeros_like(part) for part in recv]
        recv_u = all_to_all(comm, send_u)
        for j in range(end - start):
            updates[start + j] = recv_u[j]

    return {
        name: apply_update(shards[name], updates[i], lr * groups[name].lr_scale, state.weight_decay)
        for i, name in enumerate(names)
    }


def step_embedding(shards: dict, grad_shards: dict, state: ScionState, groups: dict, lr: float,
                   layout: str = "table") -> dict:
    """Shard-local step for embedding-like parameters; no communication.

    ``RMS -> inf`` acts on rows of the ``(d_out, d_in)`` matrix, so a row shard
    is self-contained. ``1 -> RMS`` acts on columns of that matrix: with
    ``layout="table"`` shards hold the transposed ``(vocab, d_model)`` table,
    whose rows are those columns, and the map is exact. ``layout="matrix"``
    applies the column map to the local rows as written, which only matches
    the full-tensor map when a single rank holds every row.
    """
    if layout not in ("table", "matrix"):
        raise ValueError(f"unknown layout {layout!r}")
    check_coverage(shards, groups)
    out = {}
    for name, W in shards.items():
        kind = groups[name].norm
        buf = momentum_update(state, name, grad_shards[name])
        if kind is NormKind.RMS_TO_RMS:
            raise ValueError(f"{name}: RMS->RMS cannot be applied to row shards locally")
        if kind is NormKind.RMS_TO_INF:
            u = dual_rms_to_inf(buf, state.ns.eps)
        elif layout == "table":
            # a contiguous copy keeps the column reduction in the same order as the full matrix
            u = dual_one_to_rms(np.ascontiguousarray(buf.T), state.ns.eps).T
        else:
            u = dual_one_to_rms(buf, state.ns.eps)
        out[name] = apply_update(W, u, lr * groups[name].lr_scale, state.weight_decay)
    return out


def step_experts(shards: dict, grad_shards: dict, state: ScionState, groups: dict, lr: float,
                 transpose: bool = False, shard_axis: int = 0) -> dict:
    """Expert-local batched step on ``(local_experts, d_out, d_in)`` shards; no communication."""
    if shard_axis != 0:
        raise ValueError("expert parameters must be sharded along the expert axis (0)")
    check_coverage(shards, groups)
    out = {}
    for name, W in shards.items():
        if W.ndim != 3:
            raise ValueError(f"{name}: expert parameters must be rank 3, got shape {W.shape}")
        buf = momentum_update(state, name, grad_shards[name])
        u = batched_lmo(buf, groups[name].norm, state.ns, transpose_experts=transpose)
        out[name] = apply_update(W, u, lr * groups[name].lr_scale, state.weight_decay)
    return out


# -- whole-model driver ------------------------------------------------------------

class DiscoSimulator:
    """Steps a full parameter dict through ``M`` simulated ranks.

    ``mode="ddp"`` keeps replicas on every rank. ``mode="fsdp"`` row-shards
    every parameter: the input and output embeddings go through
    ``step_embedding`` (the input embedding in table layout) and all hidden
    matrices through ``step_fsdp``. Per-rank optimizer state persists across
    steps. ``step`` returns the reassembled full parameters.
    """

    def __init__(self, world_size: int, mode: str, make_state, groups: dict):
        if mode not in ("ddp", "fsdp"):
            raise ValueError(f"unknown mode {mode!r}")
        self.world_size = world_size
        self.mode = mode
        self.groups = groups
        self.states = [make_state() for _ in range(world_size)]
        self.counts = Counter()

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        M = self.world_size
        fabric = Fabric(M)
        if self.mode == "ddp":
            results = run_ranks(
                M, step_ddp,
                PerRank([{k: v.copy() for k, v in params.items()} for _ in range(M)]),
                PerRank([{k: v.copy() for k, v in grads.items()} for _ in range(M)]),
                PerRank(self.states), self.groups, lr, fabric=fabric,
            )
            for other in results[1:]:
                for k in params:
                    if not np.array_equal(other[k], results[0][k]):
                        raise CollectiveError(f"replicas diverged after step on {k!r}")
            self.counts.update(fabric.counts)
            return results[0]

        row_local = [k for k in params if self.groups[k].norm is not NormKind.RMS_TO_RMS]
        hidden = [k for k in params if k not in row_local]

        def to_storage(k, x):
            return x.T if self.groups[k].norm is NormKind.ONE_TO_RMS else x

        def shard(names, tensors):
            per = [dict() for _ in range(M)]
            for k in names:
                for r, part in enumerate(split_rows(to_storage(k, tensors[k]), M)):
                    per[r][k] = part
            return per

        def rank_step(comm, p_emb, g_emb, p_hid, g_hid, state):
            new = step_embedding(p_emb, g_emb, state, self.groups, lr, layout="table")
            new.update(step_fsdp(comm, p_hid, g_hid, state, self.groups, lr))
            return new

        results = run_ranks(
            M, rank_step,
            PerRank(shard(row_local, params)), PerRank(shard(row_local, grads)),
            PerRank(shard(hidden, params)), PerRank(shard(hidden, grads)),
            PerRank(self.states), fabric=fabric,
        )
        self.counts.update(fabric.counts)
        return {k: to_storage(k, concat_rows([res[k] for res in results])) for k in params}
