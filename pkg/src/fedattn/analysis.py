"""Error-propagation bounds evaluated with realized quantities.

The Lipschitz and bounded-deviation constants of the theory are suprema
that cannot be computed. Every quantity here is instead the ratio or gap
*realized* along one FedAttn trajectory and its centralized counterpart;
the triangle-inequality chain behind the bounds holds step by step for
these realized values, so the resulting bounds are sound for that run.

Blocks are 1-based: entry ``m - 1`` of each array belongs to block ``m``.
"""

import csv
import io
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import numkernel as nk
from .errors import ScheduleError, ShapeError
from .model import attention, causal_mask, ffn_sublayer, qkv_project
from .oracle import measure_sigma
from .protocol import SyncSchedule, uniform_schedule


@dataclass
class GainTable:
    rho: np.ndarray  # (M,) attention-path ratio
    theta: np.ndarray  # (M,) FFN-path ratio
    sigma: np.ndarray  # (M, N) local-vs-global attention deviation
    # (M,) sum over participants of ||o_used - o_global||; equals sigma.sum(1)
    # at local blocks and 0 at dense sync blocks
    injection: np.ndarray = None

    def __post_init__(self):
        self.rho = np.asarray(self.rho, float)
        self.theta = np.asarray(self.theta, float)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, float))
        if not (len(self.rho) == len(self.theta) == self.sigma.shape[0]):
            raise ShapeError("rho, theta and sigma must cover the same blocks")
        for name in ("rho", "theta", "sigma"):
            a = getattr(self, name)
            if np.any(a < 0) or not np.all(np.isfinite(a)):
                raise ValueError(f"{name} entries must be finite and >= 0")

    @property
    def M(self):
        return len(self.rho)

    @property
    def gamma(self):
        return (1 + self.theta) * (1 + self.rho)

    @property
    def sigma_sum(self):
        return self.sigma.sum(axis=1)

    @classmethod
    def uniform(cls, M, theta, rho, sigma, N=1):
        return cls(np.full(M, float(rho)), np.full(M, float(theta)), np.full((M, N), float(sigma)))


def _global_attn(x, block, causal=True):
    q, k, v = qkv_project(x, block)
    pos = np.arange(len(x))
    return attention(q, k, v, causal_mask(pos, pos) if causal else None)


def _quotient(num, den):
    return 0.0 if den == 0.0 else num / den


def realized_gains(weights, x_fed, x_cen, block, attn_fed=None, causal=True):
    """Realized ``(rho, theta)`` of one block for a pair of inputs.

    ``rho`` compares centralized attention on both inputs. ``theta``
    compares the FFN sub-layer on its actual inputs ``x + attention``;
    ``attn_fed`` is the attention output FedAttn really used (defaults to
    centralized attention of ``x_fed``). Identical inputs give 0 by
    convention. ``block`` is a block index (1-based) or its parameters.
    """
    if isinstance(block, (int, np.integer)):
        block = weights.blocks[block - 1]
    x_fed, x_cen = nk.as_mat(x_fed), nk.as_mat(x_cen)
    if x_fed.shape != x_cen.shape:
        raise ShapeError(f"{x_fed.shape} vs {x_cen.shape}")
    a_fed = _global_attn(x_fed, block, causal)
    a_cen = _global_attn(x_cen, block, causal)
    rho = _quotient(nk.frob_dist(a_fed, a_cen), nk.frob_dist(x_fed, x_cen))
    z_fed = x_fed + (a_fed if attn_fed is None else attn_fed)
    z_cen = x_cen + a_cen
    theta = _quotient(nk.frob_dist(ffn_sublayer(z_fed, block), ffn_sublayer(z_cen, block)),
                      nk.frob_dist(z_fed, z_cen))
    return rho, theta


def gain_table(weights, trace, cen_states, causal=True):
    """Realized gains, deviations and injections along one traced run."""
    if len(trace.active_globals()) != len(cen_states[0]):
        raise ValueError("bounds need every token active (local_token_ratio = 1)")
    M = weights.config.M
    report = measure_sigma(weights, trace, causal=causal)
    rho, theta = np.zeros(M), np.zeros(M)
    injection = np.zeros(M)
    for m in range(1, M + 1):
        X = trace.global_state(m - 1)
        O = trace.global_attn(m)
        rho[m - 1], theta[m - 1] = realized_gains(
            weights, X, cen_states[m - 1], m, attn_fed=O, causal=causal)
        if m in trace.schedule:
            o_glob = _global_attn(X, weights.blocks[m - 1], causal)
            injection[m - 1] = sum(
                nk.frob_dist(O[pos], o_glob[pos]) for pos in trace.positions)
        else:
            injection[m - 1] = report.sigma[m - 1].sum()
    return GainTable(rho, theta, report.sigma, injection)


@dataclass(frozen=True)
class StepVerdict:
    m: int
    kind: str  # "local" or "sync"
    lhs: float
    rhs: float

    @property
    def slack(self):
        return self.rhs - self.lhs

    def holds(self, tol=1e-9):
        return self.slack >= -tol


def _injection(gains, m, schedule):
    if m in schedule:
        return 0.0 if gains.injection is None else float(gains.injection[m - 1])
    return float(gains.sigma_sum[m - 1])


def check_recursion(trace, cen_states, gains):
    """One verdict per block for the per-step deviation recursion.

    Local blocks: ``D_m <= (1+rho)(1+theta) D_{m-1} + (1+theta) sum_n sigma``.
    Sync blocks: same with the injection term (zero for dense exchange).
    """
    M = gains.M
    if len(cen_states) != M + 1 or len(trace.states[0]) != M + 1:
        raise ValueError("traces must hold M + 1 states")
    glob = trace.active_globals()
    dev = [nk.frob_dist(trace.global_state(m), nk.as_mat(cen_states[m])[glob])
           for m in range(M + 1)]
    out = []
    for m in range(1, M + 1):
        kind = "sync" if m in trace.schedule else "local"
        rhs = gains.gamma[m - 1] * dev[m - 1] + (1 + gains.theta[m - 1]) * _injection(
            gains, m, trace.schedule)
        out.append(StepVerdict(m, kind, dev[m], rhs))
    return out


def chained_bounds(gains, schedule):
    """Cumulative bound after each block, starting from zero deviation."""
    b, out = 0.0, []
    for m in range(1, gains.M + 1):
        b = gains.gamma[m - 1] * b + (1 + gains.theta[m - 1]) * _injection(gains, m, schedule)
        out.append(b)
    return np.array(out)


def theorem1_bound(gains, H, T):
    """Uniform-interval bound: injections at the ``H - 1`` local blocks of each
    round, amplified through the rest of the round and all later rounds."""
    if H * T != gains.M:
        raise ValueError(f"table covers {gains.M} blocks, H*T = {H * T}")
    g = gains.gamma
    terms = []
    for t in range(T):
        for h in range(1, H):
            m = H * t + h
            inject = (1 + gains.theta[m - 1]) * gains.sigma_sum[m - 1]
            intra = math.prod(g[H * t + i - 1] for i in range(h + 1, H + 1))
            inter = math.prod(g[H * j + i - 1] for j in range(t + 1, T) for i in range(1, H + 1))
            terms.append(inject * intra * inter)
    return math.fsum(terms)


def geometric_sum(gamma, M):
    """``(gamma**M - 1) / (gamma - 1)``, equal to ``M`` at ``gamma = 1``."""
    eps = gamma - 1.0
    if eps == 0.0:
        return float(M)
    return math.expm1(M * math.log1p(eps)) / eps


def term_e(gamma, H):
    """``1 - (gamma - 1) / (gamma**H - 1)``, equal to ``1 - 1/H`` at ``gamma = 1``."""
    if H == 1:
        return 0.0
    eps = gamma - 1.0
    if eps == 0.0:
        return 1.0 - 1.0 / H
    return 1.0 - eps / math.expm1(H * math.log1p(eps))


def corollary1_bound(theta, rho, sigma_sum, H, M):
    if theta < 0 or rho < 0:
        raise ValueError("theta and rho must be >= 0")
    if H < 1 or M % H:
        raise ValueError(f"H={H} must divide M={M}")
    gamma = (1 + theta) * (1 + rho)
    return (1 + theta) * sigma_sum * geometric_sum(gamma, M) * term_e(gamma, H)


def uniform_maxima(gains):
    """``(theta, rho, sum_n max_m sigma)``: depth-uniform constants dominating the table."""
    return float(gains.theta.max()), float(gains.rho.max()), float(gains.sigma.max(axis=0).sum())


def gamma_reduction(gains, m, M=None):
    """Deviation removed by making block ``m`` global: its injection times the
    amplification through every later block."""
    M = gains.M if M is None else M
    if not 1 <= m <= M:
        raise ValueError(f"block {m} outside 1..{M}")
    amp = math.prod(gains.gamma[i - 1] for i in range(m + 1, M + 1))
    return (1 + gains.theta[m - 1]) * gains.sigma_sum[m - 1] * amp


def theorem3_bound(gains, schedule):
    """Fully-local error sum minus the reduction of every sync block."""
    if schedule.M != gains.M:
        raise ValueError("schedule and table disagree on M")
    full = [gamma_reduction(gains, m) for m in range(1, gains.M + 1)]
    return math.fsum(full + [-full[m - 1] for m in schedule.sync_blocks])


def marginal_comm(H):
    """Going from ``H`` to ``H + 1`` local forwards.

    Returns exact ``(communication reduction 1/(H(H+1)), error limit 1 - 1/(H+1))``.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    return Fraction(1, H * (H + 1)), 1 - Fraction(1, H + 1)


def bound_report_csv(gains, schedule):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "sigma_sum", "theta", "rho", "gamma_m", "Gamma_m", "cumulative_bound"])
    cum = chained_bounds(gains, schedule)
    for m in range(1, gains.M + 1):
        w.writerow([m, repr(float(gains.sigma_sum[m - 1])), repr(float(gains.theta[m - 1])),
                    repr(float(gains.rho[m - 1])), repr(float(gains.gamma[m - 1])),
                    repr(float(gamma_reduction(gains, m))), repr(float(cum[m - 1]))])
    return buf.getvalue()


def uniform_H(schedule):
    """``H`` if ``schedule`` is uniform, else ``None``."""
    if not schedule.sync_blocks:
        return None
    H = schedule.sync_blocks[0]
    try:
        return H if uniform_schedule(schedule.M, H) == schedule else None
    except ScheduleError:
        return None
