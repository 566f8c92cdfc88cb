"""Reference executions and deviation measurement."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .model import attention, block_forward, causal_mask, qkv_project
from .partition import Partition
from .protocol import FedOptions, SyncSchedule, run_fedattn


def run_cenattn(global_embeds, weights, causal=True, assign=None):
    """Centralized forward. Returns ``[X_0, X_1, ..., X_M]``.

    ``assign`` (participant id per token) additionally masks every
    cross-participant logit, giving block-diagonal attention.
    """
    x = nk.as_mat(global_embeds)
    L = x.shape[0]
    pos = np.arange(L)
    mask = causal_mask(pos, pos) if causal else np.zeros((L, L), bool)
    if assign is not None:
        a = np.asarray(assign)
        mask = mask | (a[:, None] != a[None, :])
    states = [x]
    for block in weights.blocks:
        x = block_forward(x, block, "self", mask)[0]
        states.append(x)
    return states


def run_locattn(embeds, weights, p, opts=None):
    """Every block local: FedAttn with an empty schedule."""
    return run_fedattn(embeds, weights, p, SyncSchedule(weights.config.M, ()), opts)


def cenattn_trace(global_embeds, weights, opts=None):
    """CenAttn expressed as a single-participant trace (for cached decoding)."""
    L = nk.as_mat(global_embeds).shape[0]
    p = Partition(L, (tuple(range(L)),), 0)
    return run_fedattn([global_embeds], weights, p, SyncSchedule(weights.config.M, ()), opts)


def local_and_global_attn(x, block, positions, owners, n, causal=True):
    """Participant ``n``'s attention output against its own KV and against all KV.

    ``x`` is the global state over tokens at ``positions`` (sorted);
    ``owners`` gives each row's participant.
    """
    q, k, v = qkv_project(x, block)
    mine = np.flatnonzero(np.asarray(owners) == n)
    pos = np.asarray(positions)
    if causal:
        m_loc = causal_mask(pos[mine], pos[mine])
        m_glob = causal_mask(pos[mine], pos)
    else:
        m_loc = m_glob = None
    o_loc = attention(q[mine], k[mine], v[mine], m_loc)
    o_glob = attention(q[mine], k, v, m_glob)
    return o_loc, o_glob


@dataclass
class DeviationReport:
    sigma: np.ndarray  # (M, N): realized local-vs-global deviation at block m
    state_dev: np.ndarray  # (M + 1,): ||X_m - X*_m|| before block m+1; last is output
    attn_dev: np.ndarray  # (M,): ||O_used - O_global|| at block m
    schedule: SyncSchedule = None

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "h", "m", "n", "sigma", "state_dev", "attn_dev"])
        M, N = self.sigma.shape
        sched = self.schedule or SyncSchedule(M, ())
        for m in range(1, M + 1):
            t, h = sched.round_of(m)
            for n in range(N):
                w.writerow([t, h, m, n, repr(float(self.sigma[m - 1, n])),
                            repr(float(self.state_dev[m - 1])), repr(float(self.attn_dev[m - 1]))])
        return buf.getvalue()


def measure_sigma(weights, trace, cen_states=None, causal=True):
    """Per-block, per-participant deviation of local from global attention.

    Both branches are evaluated at the FedAttn trajectory's realized state.
    """
    M, N = weights.config.M, trace.N
    glob = trace.active_globals()
    owners = np.empty(len(glob), np.int64)
    owners[np.searchsorted(glob, np.concatenate(trace.positions))] = np.concatenate(
        [np.full(len(p), n) for n, p in enumerate(trace.positions)])
    sigma = np.zeros((M, N))
    attn_dev = np.zeros(M)
    for m in range(1, M + 1):
        X = trace.global_state(m - 1)
        block = weights.blocks[m - 1]
        o_used = trace.global_attn(m)
        o_glob = np.empty_like(o_used)
        for n in range(N):
            if len(trace.positions[n]) == 0:
                continue
            o_loc, o_g = local_and_global_attn(X, block, glob, owners, n, causal)
            sigma[m - 1, n] = nk.frob_dist(o_loc, o_g)
            o_glob[owners == n] = o_g
        attn_dev[m - 1] = nk.frob_dist(o_used, o_glob)
    if cen_states is None:
        state_dev = np.full(M + 1, np.nan)
    else:
        state_dev = np.array([nk.frob_dist(trace.global_state(m), cen_states[m][glob])
                              for m in range(M + 1)])
    return DeviationReport(sigma, state_dev, attn_dev, trace.schedule)
