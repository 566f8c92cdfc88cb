"""Federated attention execution engine.

Participants run every block on their own tokens. At synchronization blocks
each transmitting participant broadcasts its keys and values (optionally a
sampled subset); every participant then lets its queries attend to its own
full KV plus whatever the others transmitted, ordered by global index. All
masking is causal over global token indices, so a schedule that syncs at
every block reproduces centralized attention exactly.

Blocks are numbered ``1..M``; participants and tokens from 0.
"""

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .errors import ScheduleError, ShapeError
from .model import attention, causal_mask, embed_tokens, ffn_sublayer, qkv_project
from .rng import Xoshiro256, derive_seed

SCHEDULE_KINDS = ("ShallowHalf", "DeepHalf", "Progressive", "Regressive")
TOPOLOGIES = ("all_to_all", "star")

_LOCAL_TAG = 0x10CA1
_KV_TAG = 0x0E4C


# --------------------------------------------------------------------------
# Schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyncSchedule:
    """Blocks (1-based) at which global attention with KV exchange happens."""

    M: int
    sync_blocks: tuple = ()

    def __post_init__(self):
        blocks = tuple(int(b) for b in self.sync_blocks)
        object.__setattr__(self, "sync_blocks", blocks)
        if self.M < 0:
            raise ScheduleError("M must be >= 0")
        if any(b < 1 or b > self.M for b in blocks):
            raise ScheduleError(f"sync blocks must lie in 1..{self.M}")
        if any(b2 <= b1 for b1, b2 in zip(blocks, blocks[1:])):
            raise ScheduleError("sync blocks must be strictly increasing")

    def __contains__(self, m):
        return m in self.sync_blocks

    @property
    def T(self):
        return len(self.sync_blocks)

    def round_of(self, m):
        """``(t, h)``: syncs completed before block ``m`` and offset within the round."""
        prior = [b for b in self.sync_blocks if b < m]
        start = prior[-1] if prior else 0
        return len(prior), m - start

    def union(self, other):
        return SyncSchedule(self.M, tuple(sorted(set(self.sync_blocks) | set(other.sync_blocks))))


def uniform_schedule(M, H):
    """Sync every ``H`` blocks: ``{H, 2H, ..., M}``. ``H`` must divide ``M``."""
    if H < 1 or M % H:
        raise ScheduleError(f"H={H} must be >= 1 and divide M={M}")
    return SyncSchedule(M, tuple(range(H, M + 1, H)))


def empty_schedule(M):
    return SyncSchedule(M, ())


def _spaced(start, length, T):
    return tuple(start - 1 + (k * length) // T for k in range(1, T + 1))


def _growing_gaps(M, T):
    # 1, 1 + delta, 1 + 2 delta, ... floored, remainder added to the deepest gaps
    if T == 1:
        return [M]
    delta_num, delta_den = M - T, T * (T - 1) // 2
    gaps = [1 + (k * delta_num) // delta_den for k in range(T)]
    short = M - sum(gaps)
    for k in range(T - short, T):
        gaps[k] += 1
    return gaps


def named_schedule(kind, M, T):
    """One of the four depth-placement schemes with exactly ``T`` syncs."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    half = (M + 1) // 2
    if kind == "ShallowHalf":
        if T > half:
            raise ScheduleError(f"T={T} exceeds shallow half of {half} blocks")
        return SyncSchedule(M, _spaced(1, half, T))
    if kind == "DeepHalf":
        if T > M - half:
            raise ScheduleError(f"T={T} exceeds deep half of {M - half} blocks")
        return SyncSchedule(M, _spaced(half + 1, M - half, T))
    if kind in ("Progressive", "Regressive"):
        if T > M:
            raise ScheduleError(f"T={T} exceeds M={M}")
        gaps = _growing_gaps(M, T)
        if kind == "Regressive":
            gaps = gaps[::-1]
        return SyncSchedule(M, tuple(np.cumsum(gaps).tolist()))
    raise ScheduleError(f"unknown schedule kind {kind!r}")


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


def _ratio_count(ratio, size):
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    # round() guards against 0.7 * 10 = 7.000000000000001
    return math.ceil(round(ratio * size, 9))


def sparse_sample_local(p, n, ratio, seed):
    """Tokens participant ``n`` keeps for the whole run.

    Size is ``max(1, ceil(ratio * L_n))``; returned in increasing global order.
    """
    idx = p.locals[n]
    if not idx:
        return ()
    k = max(1, _ratio_count(ratio, len(idx)))
    if k >= len(idx):
        return tuple(idx)
    rng = Xoshiro256(derive_seed(seed, _LOCAL_TAG, n))
    return tuple(rng.sample(idx, k))


def sparse_sample_kv(indices, n, t, ratio, seed):
    """Subset of participant ``n``'s tokens whose KV is sent in round ``t``.

    Drawn fresh each round; size ``ceil(ratio * len(indices))``.
    """
    indices = tuple(indices)
    k = _ratio_count(ratio, len(indices))
    if k >= len(indices):
        return indices
    rng = Xoshiro256(derive_seed(seed, _KV_TAG, n, t))
    return tuple(rng.sample(indices, k))


# --------------------------------------------------------------------------
# Messages
# --------------------------------------------------------------------------

_MSG_HEADER = struct.Struct("<HHHIIB")


@dataclass(frozen=True, eq=False)
class KVMessage:
    sender: int
    round: int
    block: int
    token_globals: np.ndarray
    k_payload: np.ndarray
    v_payload: np.ndarray
    wire_bits: int = 16

    def __post_init__(self):
        n = len(self.token_globals)
        if self.k_payload.shape[0] != n or self.v_payload.shape[0] != n:
            raise ShapeError("payload rows must match token count")

    @property
    def payload_bits(self):
        return 2 * len(self.token_globals) * self.k_payload.shape[1] * self.wire_bits

    def to_bytes(self):
        count, d = len(self.token_globals), self.k_payload.shape[1]
        return b"".join([
            _MSG_HEADER.pack(self.sender, self.round, self.block, count, d, self.wire_bits),
            np.asarray(self.token_globals, dtype="<u4").tobytes(),
            np.asarray(self.k_payload, dtype="<f4").tobytes(),
            np.asarray(self.v_payload, dtype="<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, raw):
        sender, rnd, block, count, d, wire = _MSG_HEADER.unpack_from(raw, 0)
        off = _MSG_HEADER.size
        toks = np.frombuffer(raw, "<u4", count, off).astype(np.int64)
        off += 4 * count
        k = np.frombuffer(raw, "<f4", count * d, off).astype(np.float64).reshape(count, d)
        off += 4 * count * d
        v = np.frombuffer(raw, "<f4", count * d, off).astype(np.float64).reshape(count, d)
        return cls(sender, rnd, block, toks, k, v, wire)


# --------------------------------------------------------------------------
# Engine
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FedOptions:
    local_token_ratio: float = 1.0
    kv_exchange_ratio: float = 1.0
    per_participant_schedules: dict = None  # participant -> SyncSchedule
    wire_bits: int = 16
    seed: int = 0
    topology: str = "all_to_all"
    causal: bool = True
    # mask every cross-participant logit at every block (block-diagonal attention)
    block_diagonal: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("local_token_ratio", "kv_exchange_ratio"):
            r = getattr(self, name)
            if not 0 < r <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if self.wire_bits < 1:
            raise ValueError("wire_bits must be >= 1")

    def schedule_for(self, n, default):
        if self.per_participant_schedules and n in self.per_participant_schedules:
            return self.per_participant_schedules[n]
        return default

    def union_schedule(self, default):
        sched = default
        for s in (self.per_participant_schedules or {}).values():
            sched = sched.union(s)
        return sched


@dataclass(eq=False)
class RunTrace:
    partition: object
    schedule: SyncSchedule  # union schedule actually executed
    options: FedOptions
    positions: list  # per participant: active global indices (np.int64)
    states: list  # [n][m] hidden state before block m+1; index M is the output
    attn: list  # [n][m-1] attention output used at block m
    caches: list  # [n][m-1] (K, V, key positions) attended at block m
    aggregates: dict = field(default_factory=dict)  # block -> (positions, K, V) as broadcast
    messages: list = field(default_factory=list)
    deliveries: list = field(default_factory=list)  # (message index, receiver)
    bits_sent: np.ndarray = None
    bits_received: np.ndarray = None
    relay_bits: int = 0
    flops: np.ndarray = None

    @property
    def N(self):
        return len(self.positions)

    @property
    def M(self):
        return self.schedule.M

    def active_globals(self):
        return np.sort(np.concatenate(self.positions)) if self.positions else np.zeros(0, int)

    def global_state(self, m):
        """Scattered global state before block ``m + 1`` over the active tokens."""
        glob = self.active_globals()
        d = self.states[0][0].shape[1]
        out = np.empty((len(glob), d))
        where = np.searchsorted(glob, np.concatenate(self.positions))
        out[where] = np.concatenate([s[m] for s in self.states])
        return out

    def global_states(self):
        return [self.global_state(m) for m in range(self.M + 1)]

    def global_attn(self, m):
        glob = self.active_globals()
        where = np.searchsorted(glob, np.concatenate(self.positions))
        out = np.empty((len(glob), self.states[0][0].shape[1]))
        out[where] = np.concatenate([a[m - 1] for a in self.attn])
        return out

    def summary(self):
        return {
            "N": self.N,
            "M": self.M,
            "sync_blocks": list(self.schedule.sync_blocks),
            "active_tokens": [len(p) for p in self.positions],
            "messages": len(self.messages),
            "bits_sent": [int(b) for b in self.bits_sent],
            "bits_received": [int(b) for b in self.bits_received],
            "relay_bits": int(self.relay_bits),
            "prefill_flops": [int(f) for f in self.flops],
            "options": {
                "local_token_ratio": self.options.local_token_ratio,
                "kv_exchange_ratio": self.options.kv_exchange_ratio,
                "wire_bits": self.options.wire_bits,
                "seed": self.options.seed,
                "topology": self.options.topology,
            },
        }

    def to_json(self):
        return json.dumps(self.summary(), sort_keys=True)


def _mask(q_pos, k_pos, k_owner, me, opts):
    mask = causal_mask(q_pos, k_pos) if opts.causal else np.zeros((len(q_pos), len(k_pos)), bool)
    if opts.block_diagonal:
        mask = mask | (np.asarray(k_owner) != me)[None, :]
    return mask


def run_fedattn(embeds, weights, p, sched, opts=None):
    """Execute federated prefill over ``sched`` and return a :class:`RunTrace`.

    ``embeds[n]`` holds participant ``n``'s input embeddings, one row per
    index in ``p.locals[n]``.
    """
    opts = opts or FedOptions()
    if len(embeds) != p.N:
        raise ShapeError("one embedding matrix per participant required")
    if sched.M != weights.config.M:
        raise ShapeError(f"schedule has M={sched.M}, model has M={weights.config.M}")
    cfg = weights.config
    d, d_ff, N = cfg.d, cfg.d_ff, p.N

    positions, xs = [], []
    for n in range(N):
        e = nk.as_mat(embeds[n]) if len(p.locals[n]) else np.zeros((0, d))
        if e.shape != (len(p.locals[n]), d):
            raise ShapeError(f"participant {n}: embeds {e.shape}, expected {(len(p.locals[n]), d)}")
        keep = sparse_sample_local(p, n, opts.local_token_ratio, opts.seed)
        rows = np.searchsorted(np.asarray(p.locals[n]), keep).astype(np.int64)
        positions.append(np.asarray(keep, dtype=np.int64))
        xs.append(e[rows])

    own_sched = [opts.schedule_for(n, sched) for n in range(N)]
    union = opts.union_schedule(sched)
    trace = RunTrace(p, union, opts, positions,
                     states=[[x] for x in xs], attn=[[] for _ in range(N)],
                     caches=[[] for _ in range(N)],
                     bits_sent=np.zeros(N, np.int64), bits_received=np.zeros(N, np.int64),
                     flops=np.zeros(N, np.int64))
    pool = ThreadPoolExecutor(opts.n_jobs) if opts.n_jobs > 1 else None
    pmap = (lambda f, it: list(pool.map(f, it))) if pool else (lambda f, it: [f(i) for i in it])

    try:
        for m in range(1, cfg.M + 1):
            block = weights.blocks[m - 1]
            qkv = pmap(lambda n: qkv_project(xs[n], block), range(N))
            for n in range(N):
                rows = len(xs[n])
                trace.flops[n] += 8 * rows * d + 3 * 2 * rows * d * d

            if m in union:
                t = union.sync_blocks.index(m)
                sent = []
                for n in range(N):
                    if m not in own_sched[n] or len(positions[n]) == 0:
                        continue
                    sel = sparse_sample_kv(positions[n].tolist(), n, t, opts.kv_exchange_ratio, opts.seed)
                    if not sel:
                        continue
                    rows = np.searchsorted(positions[n], sel)
                    msg = KVMessage(n, t, m, np.asarray(sel, np.int64), qkv[n][1][rows],
                                    qkv[n][2][rows], opts.wire_bits)
                    trace.messages.append(msg)
                    sent.append(len(trace.messages) - 1)
                _deliver(trace, sent, N, opts)
                trace.aggregates[m] = _assemble([trace.messages[i] for i in sent])

                def kv_for(n):
                    parts_pos = [positions[n]]
                    parts_k, parts_v = [qkv[n][1]], [qkv[n][2]]
                    owners = [np.full(len(positions[n]), n)]
                    for i in sent:
                        msg = trace.messages[i]
                        if msg.sender == n:
                            continue
                        parts_pos.append(msg.token_globals)
                        parts_k.append(msg.k_payload)
                        parts_v.append(msg.v_payload)
                        owners.append(np.full(len(msg.token_globals), msg.sender))
                    pos = np.concatenate(parts_pos)
                    order = np.argsort(pos, kind="stable")
                    return (pos[order], np.concatenate(parts_k)[order],
                            np.concatenate(parts_v)[order], np.concatenate(owners)[order])
            else:
                def kv_for(n):
                    return positions[n], qkv[n][1], qkv[n][2], np.full(len(positions[n]), n)

            def finish(n):
                k_pos, K, V, owners = kv_for(n)
                q = qkv[n][0]
                if len(q) == 0:
                    return xs[n], np.zeros((0, d)), (K, V, k_pos)
                o = attention(q, K, V, _mask(positions[n], k_pos, owners, n, opts))
                x_res = xs[n] + o
                return x_res + ffn_sublayer(x_res, block), o, (K, V, k_pos)

            results = pmap(finish, range(N))
            for n, (x_new, o, cache) in enumerate(results):
                lq, lk = len(xs[n]), len(cache[2])
                trace.flops[n] += (2 * lq * lk * d + 5 * lq * lk + 2 * lq * lk * d
                                   + 8 * lq * d + 2 * 2 * lq * d * d_ff)
                xs[n] = x_new
                trace.states[n].append(x_new)
                trace.attn[n].append(o)
                trace.caches[n].append(cache)
    finally:
        if pool:
            pool.shutdown()
    return trace


def _deliver(trace, sent, N, opts):
    for i in sent:
        msg = trace.messages[i]
        bits = msg.payload_bits
        peers = [r for r in range(N) if r != msg.sender]
        for r in peers:
            trace.deliveries.append((i, r))
            trace.bits_received[r] += bits
        if opts.topology == "all_to_all":
            trace.bits_sent[msg.sender] += bits * len(peers)
        elif peers:
            # star: one upload to the relay, which forwards to every peer
            trace.bits_sent[msg.sender] += bits
            trace.relay_bits += bits + bits * len(peers)


def _assemble(msgs):
    if not msgs:
        return np.zeros(0, np.int64), None, None
    pos = np.concatenate([m.token_globals for m in msgs])
    order = np.argsort(pos, kind="stable")
    return (pos[order], np.concatenate([m.k_payload for m in msgs])[order],
            np.concatenate([m.v_payload for m in msgs])[order])


def aggregate_kv(local_kvs, selections, p):
    """Adaptive KV aggregation: scatter each participant's selected rows.

    ``local_kvs[n] = (k_n, v_n)`` over ``p.locals[n]``; ``selections[n]`` is
    the subset of global indices participant ``n`` contributes (``None`` for
    all of them, empty to exclude it). Returns ``(positions, K, V)`` sorted
    by global index.
    """
    pos, ks, vs = [], [], []
    for n, (k, v) in enumerate(local_kvs):
        idx = np.asarray(p.locals[n], np.int64)
        sel = idx if selections[n] is None else np.asarray(selections[n], np.int64)
        rows = np.searchsorted(idx, sel)
        pos.append(sel)
        ks.append(np.asarray(k)[rows])
        vs.append(np.asarray(v)[rows])
    pos = np.concatenate(pos)
    order = np.argsort(pos, kind="stable")
    return pos[order], np.concatenate(ks)[order], np.concatenate(vs)[order]


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------


def decode_greedy(trace, weights, p=None, max_new=16, return_logits=False):
    """Publisher's greedy continuation from the end of the prompt.

    Each block's cache is whatever the publisher attended to during prefill
    (its local KV at local blocks, the aggregate at sync blocks); generated
    tokens' KV is appended to every block. Ties go to the lowest token id.
    """
    p = p or trace.partition
    pub = p.publisher
    if max_new <= 0:
        return ([], []) if return_logits else []
    if not trace.caches[pub]:
        raise ValueError("trace holds no KV cache")
    if len(trace.positions[pub]) == 0:
        raise ValueError("publisher holds no tokens")
    caches = [[K, V] for K, V, _ in trace.caches[pub]]
    x = trace.states[pub][-1][-1:]
    next_pos = p.L
    tokens, history = [], []
    while True:
        logits = weights.unembed(x)[0]
        history.append(logits)
        tok = int(np.argmax(logits))
        tokens.append(tok)
        if len(tokens) == max_new:
            break
        x = embed_tokens([tok], [next_pos], weights)
        next_pos += 1
        for m, block in enumerate(weights.blocks):
            q, k, v = qkv_project(x, block)
            caches[m][0] = np.vstack([caches[m][0], k])
            caches[m][1] = np.vstack([caches[m][1], v])
            x_res = x + attention(q, caches[m][0], caches[m][1])
            x = x_res + ffn_sublayer(x_res, block)
    return (tokens, history) if return_logits else tokens
