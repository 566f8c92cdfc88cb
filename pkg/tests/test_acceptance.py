"""Acceptance criteria, each at its stated tolerance.

A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

import oracles
from fedattn import numkernel as nk
from fedattn.analysis import (GainTable, chained_bounds, check_recursion, corollary1_bound,
                              gain_table, gamma_reduction, marginal_comm, term_e,
                              theorem1_bound, theorem3_bound, uniform_maxima)
from fedattn.cli import main
from fedattn.cost import comm_bits, flops_prefill, participant_prefill_flops, peak_memory
from fedattn.cost import score_flops
from fedattn.model import (ModelConfig, attention, block_forward, causal_mask, embed_tokens,
                           init_weights)
from fedattn.oracle import run_cenattn, run_locattn
from fedattn.partition import STRATEGIES, gather, gen_corpus, make_partition
from fedattn.protocol import FedOptions, SyncSchedule, run_fedattn, uniform_schedule

criterion = pytest.mark.criterion
HS = (1, 2, 4, 8)
SEEDS = range(10)


def instance(seed, strategy, N=4, cfg=None, shots=4, unit=(20, 32)):
    cfg = cfg or ModelConfig(seed=seed)
    w = init_weights(cfg)
    c = gen_corpus(shots, unit, cfg.vocab, seed)
    p = make_partition(c, N, strategy)
    X = embed_tokens(c.tokens, np.arange(c.L), w)
    return w, p, X, [gather(X, p, n) for n in range(N)]


@pytest.fixture(scope="module")
def matrix():
    """4 strategies x H in {1,2,4,8} x 10 seeds, with realized gain tables."""
    out = []
    for strategy in STRATEGIES:
        for seed in SEEDS:
            w, p, X, E = instance(seed, strategy)
            cen = run_cenattn(X, w)
            for H in HS:
                sched = uniform_schedule(8, H)
                tr = run_fedattn(E, w, p, sched)
                out.append(dict(strategy=strategy, seed=seed, H=H, w=w, p=p, trace=tr,
                                cen=cen, sched=sched, gains=gain_table(w, tr, cen)))
    return out


@criterion(1, "degeneracy equivalences (H=1 vs CenAttn, empty schedule vs LocAttn)")
def test_degeneracy_equivalences():
    start = time.perf_counter()
    cfg_base = dict(d=32, d_ff=64, M=8, vocab=64)
    worst = 0.0
    for seed in range(20):
        strategy = STRATEGIES[seed % 4]
        w, p, X, E = instance(seed, strategy, cfg=ModelConfig(seed=seed, **cfg_base),
                              shots=3, unit=(32, 32))
        assert p.L == 128 and p.N == 4
        fed = run_fedattn(E, w, p, uniform_schedule(8, 1))
        worst = max(worst, nk.frob_dist(fed.global_state(8), run_cenattn(X, w)[-1]))
        empty = run_fedattn(E, w, p, SyncSchedule(8, ()))
        loc = run_locattn(E, w, p)
        for n in range(4):
            assert all(a.tobytes() == b.tobytes() for a, b in zip(empty.states[n], loc.states[n]))
    assert worst <= 1e-9
    assert time.perf_counter() - start < 30


@criterion(2, "oracle equivalence on 100+ tiny instances")
def test_oracle_equivalence():
    r = np.random.default_rng(2024)
    for i in range(120):
        L, d = int(r.integers(1, 7)), int(r.integers(1, 5))
        d_ff = int(r.integers(1, 7))
        w = init_weights(ModelConfig(d=d, d_ff=d_ff, M=2, vocab=4, seed=i))
        for b in w.blocks:
            for arr in (b.W_Q, b.W_K, b.W_V, b.W_ffn1, b.W_ffn2):
                arr *= r.uniform(1, 50)
        x = r.normal(size=(L, d)) * r.uniform(0.1, 5)
        mask = causal_mask(range(L), range(L))
        q, k, v = (r.normal(size=(L, d)) for _ in range(3))
        want = oracles.attention(q.tolist(), k.tolist(), v.tolist(), mask.tolist())
        assert nk.frob_dist(attention(q, k, v, mask), np.array(want)) <= 1e-9
        ref = oracles.forward(x, w.blocks)
        one = block_forward(x, w.blocks[0], "self", mask)[0]
        assert nk.frob_dist(one, np.array(ref[1])) <= 1e-9
        assert nk.frob_dist(run_cenattn(x, w)[-1], np.array(ref[2])) <= 1e-9


@criterion(3, "bound soundness: per-step recursion and chained bound over the matrix")
def test_bound_soundness(matrix):
    for run in matrix:
        verdicts = check_recursion(run["trace"], run["cen"], run["gains"])
        assert min(v.slack for v in verdicts) >= -1e-9, (run["strategy"], run["seed"], run["H"])
        measured = nk.frob_dist(run["trace"].global_state(8), run["cen"][-1])
        assert chained_bounds(run["gains"], run["sched"])[-1] >= measured


@criterion(4, "closed-form bound dominates the uniform-interval bound; saturation-term limits")
def test_corollary_consistency(matrix):
    for run in matrix:
        g, H = run["gains"], run["H"]
        assert corollary1_bound(*uniform_maxima(g), H, 8) >= theorem1_bound(g, H, 8 // H)
    assert term_e(1.3, 1) == 0.0 and term_e(1.0, 1) == 0.0
    for H in (2, 4, 8):
        assert abs(term_e(1.001, H) - (1 - 1 / H)) <= 2e-3


@criterion(5, "marginal-gain constants")
def test_marginal_constants():
    assert marginal_comm(1) == (Fraction(1, 2), Fraction(1, 2))
    assert marginal_comm(2) == (Fraction(1, 6), Fraction(2, 3))
    assert marginal_comm(3) == (Fraction(1, 12), Fraction(3, 4))


@criterion(6, "deviation nondecreasing and bits strictly decreasing in H")
def test_trend_in_interval():
    start = time.perf_counter()
    for strategy in STRATEGIES:
        dev = {H: [] for H in HS}
        bits = {H: [] for H in HS}
        for seed in SEEDS:
            w, p, X, E = instance(seed, strategy)
            cen = run_cenattn(X, w)[-1]
            for H in HS:
                tr = run_fedattn(E, w, p, uniform_schedule(8, H))
                dev[H].append(nk.frob_dist(tr.global_state(8), cen))
                bits[H].append(int(tr.bits_sent.sum()))
        means = [np.mean(dev[H]) for H in HS]
        assert all(a <= b for a, b in zip(means, means[1:])), (strategy, means)
        for s in range(len(SEEDS)):
            seq = [bits[H][s] for H in HS]
            assert all(a > b for a, b in zip(seq, seq[1:]))
    assert time.perf_counter() - start < 120


@criterion(7, "per-participant score FLOPs scale as 1/N^2; peak memory falls with N")
def test_participant_scaling():
    cfg = ModelConfig()
    c = gen_corpus(3, (32, 32), 64, 0)
    L = c.L
    central = score_flops(L, L, cfg.d) * cfg.M
    peaks = []
    for N in (1, 2, 4):
        p = make_partition(c, N, "TokSeg_QAg")
        assert p.sizes == [L // N] * N
        local = SyncSchedule(cfg.M, ())
        assert score_flops(L // N, L // N, cfg.d) * cfg.M * N * N == central
        w = init_weights(cfg)
        X = embed_tokens(c.tokens, np.arange(L), w)
        tr = run_fedattn([gather(X, p, n) for n in range(N)], w, p, local)
        assert tr.flops.tolist() == [flops_prefill(L // N, cfg.d, cfg.d_ff, cfg.M)] * N
        peaks.append(peak_memory(p, local, cfg)[0].max())
    assert peaks[0] > peaks[1] > peaks[2]


@criterion(8, "sparse KV exchange: ratio 1 is dense, ratio 0.5 cuts bits by the predicted factor")
def test_sparse_exchange():
    for seed in SEEDS:
        w, p, X, E = instance(seed, STRATEGIES[seed % 4])
        sched = uniform_schedule(8, 2)
        dense = run_fedattn(E, w, p, sched, FedOptions(seed=seed))
        one = run_fedattn(E, w, p, sched, FedOptions(kv_exchange_ratio=1.0, seed=seed))
        assert dense.global_state(8).tobytes() == one.global_state(8).tobytes()
        assert np.array_equal(dense.bits_sent, one.bits_sent)
        half = run_fedattn(E, w, p, sched, FedOptions(kv_exchange_ratio=0.5, seed=seed))
        kept = sum(int(np.ceil(0.5 * L_n)) for L_n in p.sizes)
        factor = Fraction(kept, p.L)
        assert Fraction(int(half.bits_sent.sum()), int(dense.bits_sent.sum())) == factor
        assert half.bits_sent.sum() < dense.bits_sent.sum()


@criterion(9, "schedule bound specializes to the uniform-interval bound; per-block reduction strictly decreasing")
def test_theorem3_specialization(matrix):
    tables = [(run["gains"], run["H"]) for run in matrix]
    r = np.random.default_rng(9)
    tables += [(GainTable(r.uniform(0, 1, 8), r.uniform(0, 1, 8), r.uniform(0, 2, (8, 4))), H)
               for H in HS for _ in range(10)]
    for g, H in tables:
        assert abs(theorem3_bound(g, uniform_schedule(8, H)) - theorem1_bound(g, H, 8 // H)) <= 1e-9
    for theta, rho, sigma in ((0.1, 0.2, 1.0), (0.02, 0.0, 0.3), (1.5, 2.0, 4.0)):
        g = GainTable.uniform(8, theta, rho, sigma, N=4)
        vals = [gamma_reduction(g, m) for m in range(1, 9)]
        assert all(a > b for a, b in zip(vals, vals[1:]))


@criterion(10, "analytical bits and FLOPs equal the engine's counters on every matrix run")
def test_cost_cross_check(matrix):
    for run in matrix:
        p, tr, w = run["p"], run["trace"], run["w"]
        bits = comm_bits(p, run["sched"], tr.options, w.config.d)
        assert bits.sent.sum() == sum(m.payload_bits * (p.N - 1) for m in tr.messages)
        assert np.array_equal(bits.sent, tr.bits_sent)
        assert np.array_equal(bits.received, tr.bits_received)
        assert np.array_equal(participant_prefill_flops(p, run["sched"], w.config, tr.options),
                              tr.flops)


@criterion(11, "CLI output byte-identical with 1 and 8 threads")
def test_cli_determinism(tmp_path):
    import json
    spec = tmp_path / "matrix.json"
    spec.write_text(json.dumps({"strategies": list(STRATEGIES), "sweep": {"H": list(HS), "N": [4]},
                                "seeds": list(SEEDS), "max_new": 8}))
    for t in (1, 8):
        assert main(["bounds", str(spec), "--out", str(tmp_path / f"t{t}"),
                     "--threads", str(t)]) == 0
    for name in ("results.csv", "summary.csv", "bounds.csv"):
        a, b = (tmp_path / "t1" / name).read_bytes(), (tmp_path / "t8" / name).read_bytes()
        assert a == b and len(a) > 0
