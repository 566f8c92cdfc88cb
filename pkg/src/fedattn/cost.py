"""Analytical communication, FLOP and memory accounting.

Counting convention, shared with the instrumented engine: a multiply-add is
2 FLOPs, softmax costs 5 ops per score entry, and each layer norm costs 8 ops
per element (two layer norms per block).
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .protocol import FedOptions, sparse_sample_kv, sparse_sample_local


def block_flops(n_queries, n_keys, d, d_ff):
    """One Pre-LN block for ``n_queries`` rows attending to ``n_keys`` keys."""
    lq, lk = int(n_queries), int(n_keys)
    return (8 * lq * d + 3 * 2 * lq * d * d  # LN1, QKV
            + 2 * lq * lk * d + 5 * lq * lk + 2 * lq * lk * d  # scores, softmax, weighted sum
            + 8 * lq * d + 2 * 2 * lq * d * d_ff)  # LN2, FFN


def flops_prefill(n_queries, d, d_ff, n_blocks, mode="local", n_keys=None):
    """Prefill FLOPs over ``n_blocks`` identical blocks.

    ``mode="local"`` attends to the participant's own ``n_queries`` keys;
    ``mode="global"`` attends to ``n_keys`` keys (the full sequence length).
    """
    if mode == "local":
        lk = n_queries
    elif mode == "global":
        if n_keys is None:
            raise ValueError("global mode needs n_keys")
        lk = n_keys
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return n_blocks * block_flops(n_queries, lk, d, d_ff)


def score_flops(n_queries, n_keys, d):
    """The quadratic attention-score term alone: ``2 * Lq * Lk * d``."""
    return 2 * int(n_queries) * int(n_keys) * d


def decode_step_flops(cache_len, d, d_ff, blocks):
    """One generated token: a single query against ``cache_len`` keys per block."""
    if cache_len < 0 or blocks < 0:
        raise ValueError("cache_len and blocks must be >= 0")
    return blocks * block_flops(1, cache_len, d, d_ff)


def _plan(p, sched, opts):
    """Per-block key counts and per-message row counts, replaying the engine's
    sampling decisions without running the model."""
    opts = opts or FedOptions()
    N = p.N
    active = [sparse_sample_local(p, n, opts.local_token_ratio, opts.seed) for n in range(N)]
    own = [opts.schedule_for(n, sched) for n in range(N)]
    union = opts.union_schedule(sched)
    keys = np.zeros((sched.M, N), np.int64)
    messages = []  # (block, sender, rows)
    for m in range(1, sched.M + 1):
        if m not in union:
            keys[m - 1] = [len(a) for a in active]
            continue
        t = union.sync_blocks.index(m)
        sent = []
        for n in range(N):
            if m not in own[n] or not active[n]:
                continue
            rows = len(sparse_sample_kv(active[n], n, t, opts.kv_exchange_ratio, opts.seed))
            if rows:
                sent.append((n, rows))
                messages.append((m, n, rows))
        for n in range(N):
            keys[m - 1, n] = len(active[n]) + sum(r for s, r in sent if s != n)
    return active, keys, messages, opts


@dataclass
class CommBits:
    sent: np.ndarray
    received: np.ndarray
    relay: int = 0

    @property
    def total_sent(self):
        return int(self.sent.sum())


def comm_bits(p, sched, opts=None, d=None):
    """Bits each participant sends and receives over the whole prefill.

    A message of ``rows`` tokens carries ``2 * rows * d * wire_bits`` bits.
    All-to-all charges the sender once per peer; star charges one upload and
    books the upload plus every forward on the relay.
    """
    if d is None:
        raise ValueError("model width d is required")
    _, _, messages, opts = _plan(p, sched, opts)
    N = p.N
    sent = np.zeros(N, np.int64)
    received = np.zeros(N, np.int64)
    relay = 0
    for _, n, rows in messages:
        bits = 2 * rows * d * opts.wire_bits
        peers = N - 1
        received[[r for r in range(N) if r != n]] += bits
        if opts.topology == "all_to_all":
            sent[n] += bits * peers
        elif peers:
            sent[n] += bits
            relay += bits + bits * peers
    return CommBits(sent, received, relay)


def participant_prefill_flops(p, sched, config, opts=None):
    """Prefill FLOPs per participant, block by block."""
    active, keys, _, _ = _plan(p, sched, opts)
    out = np.zeros(p.N, np.int64)
    for n in range(p.N):
        for m in range(sched.M):
            out[n] += block_flops(len(active[n]), keys[m, n], config.d, config.d_ff)
    return out


def participant_decode_flops(p, sched, config, opts=None):
    """First decode step per participant, run against its own prefill caches
    (each block's cache plus the new token's own key)."""
    _, keys, _, _ = _plan(p, sched, opts)
    return np.array([sum(block_flops(1, keys[m, n] + 1, config.d, config.d_ff)
                         for m in range(sched.M)) for n in range(p.N)], np.int64)


def weight_scalars(config):
    d, d_ff = config.d, config.d_ff
    return config.M * (3 * d * d + 2 * d * d_ff + 4 * d) + config.vocab * d


def activation_scalars(n_queries, n_keys, d, d_ff):
    """Live set inside one block: input, queries, score matrix, attention
    output and FFN hidden layer. Keys and values are booked as cache."""
    lq, lk = int(n_queries), int(n_keys)
    return 3 * lq * d + lq * lk + lq * d_ff


def peak_memory(p, sched, config, opts=None, storage_bytes=8):
    """Resident scalars per participant at the end of prefill's busiest block.

    Weights, plus a K and V cache for every block (own tokens at local
    blocks, everything received at sync blocks), plus the largest
    per-block activation set. Returns ``(scalars, bytes)``.
    """
    active, keys, _, _ = _plan(p, sched, opts)
    d, d_ff = config.d, config.d_ff
    scalars = np.zeros(p.N, np.int64)
    for n in range(p.N):
        lq = len(active[n])
        cache = int(sum(2 * keys[m, n] * d for m in range(sched.M)))
        act = max(activation_scalars(lq, keys[m, n], d, d_ff) for m in range(sched.M))
        scalars[n] = weight_scalars(config) + cache + act
    return scalars, scalars * storage_bytes


@dataclass
class CostReport:
    bits_sent: np.ndarray
    bits_received: np.ndarray
    prefill_flops: np.ndarray
    decode_flops_per_step: np.ndarray
    peak_memory_scalars: np.ndarray

    COLUMNS = ("participant", "bits_sent", "bits_received", "prefill_flops",
               "decode_flops_per_step", "peak_scalars")

    def __post_init__(self):
        for name in ("bits_sent", "bits_received", "prefill_flops",
                     "decode_flops_per_step", "peak_memory_scalars"):
            a = np.asarray(getattr(self, name), np.int64)
            if np.any(a < 0):
                raise ValueError(f"{name} must be nonnegative")
            setattr(self, name, a)

    @property
    def N(self):
        return len(self.bits_sent)

    def mean(self, name):
        return float(np.mean(getattr(self, name)))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for n in range(self.N):
            w.writerow([n, int(self.bits_sent[n]), int(self.bits_received[n]),
                        int(self.prefill_flops[n]), int(self.decode_flops_per_step[n]),
                        int(self.peak_memory_scalars[n])])
        return buf.getvalue()


def cost_report(p, sched, config, opts=None):
    bits = comm_bits(p, sched, opts, config.d)
    return CostReport(bits.sent, bits.received,
                      participant_prefill_flops(p, sched, config, opts),
                      participant_decode_flops(p, sched, config, opts),
                      peak_memory(p, sched, config, opts)[0])
