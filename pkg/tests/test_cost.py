import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedattn.cost import (CostReport, activation_scalars, block_flops, comm_bits, cost_report,
                          decode_step_flops, flops_prefill, participant_prefill_flops,
                          peak_memory, score_flops, weight_scalars)
from fedattn.model import ModelConfig, embed_tokens, init_weights
from fedattn.partition import STRATEGIES, Partition, gather, gen_corpus, make_partition
from fedattn.protocol import FedOptions, SyncSchedule, run_fedattn, uniform_schedule

EVEN3 = Partition(24, (tuple(range(8)), tuple(range(8, 16)), tuple(range(16, 24))), 2)


class TestCommBits:
    def test_empty_schedule(self):
        assert comm_bits(EVEN3, SyncSchedule(8, ()), FedOptions(), 4).sent.sum() == 0

    def test_single_participant(self):
        p = Partition(8, (tuple(range(8)),), 0)
        b = comm_bits(p, uniform_schedule(8, 1), FedOptions(), 4)
        assert b.sent.sum() == 0 and b.received.sum() == 0

    def test_worked_example(self):
        # L_n=8, d=4, 16-bit wire, two syncs, three participants all-to-all
        b = comm_bits(EVEN3, uniform_schedule(8, 4), FedOptions(wire_bits=16), 4)
        assert b.sent.tolist() == [2 * 8 * 4 * 16 * 2 * 2] * 3 == [4096] * 3
        assert b.received.tolist() == [4096] * 3

    def test_star(self):
        b = comm_bits(EVEN3, uniform_schedule(8, 4), FedOptions(topology="star"), 4)
        assert b.sent.tolist() == [2048] * 3 and b.relay == 3 * 2048 * 3

    def test_requires_width(self):
        with pytest.raises(ValueError):
            comm_bits(EVEN3, uniform_schedule(8, 4))

    @given(st.integers(0, 10**6), st.integers(2, 5), st.sampled_from(STRATEGIES))
    def test_monotone_in_interval(self, seed, N, strategy):
        p = make_partition(gen_corpus(5, (4, 10), 64, seed), N, strategy)
        bits = [comm_bits(p, uniform_schedule(8, H), FedOptions(), 8).sent.sum()
                for H in (1, 2, 4, 8)]
        assert all(a > b for a, b in zip(bits, bits[1:]))

    def test_sparse_factor(self):
        b1 = comm_bits(EVEN3, uniform_schedule(8, 2), FedOptions(), 4).sent.sum()
        b2 = comm_bits(EVEN3, uniform_schedule(8, 2), FedOptions(kv_exchange_ratio=0.5), 4).sent.sum()
        assert b2 * 2 == b1


class TestFlops:
    def test_hand_evaluation(self):
        # LN1 16 + QKV 24 + scores 4 + softmax 5 + weighted 4 + LN2 16 + FFN 32
        assert flops_prefill(1, 2, 4, 1) == 101

    def test_global_mode(self):
        assert flops_prefill(3, 4, 8, 2, "global", n_keys=12) == 2 * block_flops(3, 12, 4, 8)
        with pytest.raises(ValueError):
            flops_prefill(3, 4, 8, 2, "global")
        with pytest.raises(ValueError):
            flops_prefill(3, 4, 8, 2, "sideways")

    @given(st.integers(1, 500), st.integers(1, 64))
    def test_score_term_quadratic(self, L, d):
        assert score_flops(2 * L, 2 * L, d) == 4 * score_flops(L, L, d)

    @pytest.mark.parametrize("N", [1, 2, 4])
    def test_local_score_fraction(self, N):
        L = 128
        assert score_flops(L // N, L // N, 32) * N * N == score_flops(L, L, 32)

    def test_decode_linear_and_edge(self):
        d, f = 4, 8
        base = decode_step_flops(0, d, f, 1)
        assert base == 8 * d + 6 * d * d + 8 * d + 4 * d * f
        a10, a20 = decode_step_flops(10, d, f, 1) - base, decode_step_flops(20, d, f, 1) - base
        assert a20 == 2 * a10
        assert decode_step_flops(5, 2, 4, 3) == 3 * (16 + 24 + 20 + 25 + 20 + 16 + 32)
        with pytest.raises(ValueError):
            decode_step_flops(-1, d, f, 1)


class TestMemory:
    CFG = ModelConfig(d=4, d_ff=8, M=2, vocab=10)

    def test_hand_inventory(self):
        p = Partition(6, ((0, 1, 2), (3, 4, 5)), 1)
        scalars, nbytes = peak_memory(p, SyncSchedule(2, (2,)), self.CFG)
        weights = 2 * (3 * 16 + 2 * 32 + 16) + 40
        cache = 2 * 3 * 4 + 2 * 6 * 4
        act = 3 * 3 * 4 + 3 * 6 + 3 * 8
        assert scalars.tolist() == [weights + cache + act] * 2
        assert nbytes.tolist() == [8 * (weights + cache + act)] * 2
        assert weight_scalars(self.CFG) == weights and activation_scalars(3, 6, 4, 8) == act

    def test_single_participant_is_centralized(self):
        p = Partition(6, (tuple(range(6)),), 0)
        a = peak_memory(p, uniform_schedule(2, 1), self.CFG)[0]
        b = peak_memory(p, SyncSchedule(2, ()), self.CFG)[0]
        central = weight_scalars(self.CFG) + 2 * 2 * 6 * 4 + activation_scalars(6, 6, 4, 8)
        assert a.tolist() == b.tolist() == [central]

    def test_sync_free_uses_less(self):
        p = Partition(6, ((0, 1, 2), (3, 4, 5)), 1)
        local = peak_memory(p, SyncSchedule(2, ()), self.CFG)[0]
        for s in ((1,), (2,), (1, 2)):
            assert np.all(local < peak_memory(p, SyncSchedule(2, s), self.CFG)[0])


class TestEngineCrossCheck:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    @pytest.mark.parametrize("opts", [
        FedOptions(), FedOptions(kv_exchange_ratio=0.5, seed=3),
        FedOptions(local_token_ratio=0.6, topology="star", seed=4),
        FedOptions(per_participant_schedules={3: uniform_schedule(8, 1)})])
    def test_bits_and_flops_match_engine(self, strategy, opts):
        cfg = ModelConfig(seed=1)
        w = init_weights(cfg)
        c = gen_corpus(4, seed=1)
        p = make_partition(c, 4, strategy)
        X = embed_tokens(c.tokens, np.arange(c.L), w)
        for H in (1, 2, 4, 8):
            s = uniform_schedule(8, H)
            tr = run_fedattn([gather(X, p, n) for n in range(4)], w, p, s, opts)
            b = comm_bits(p, s, opts, cfg.d)
            assert np.array_equal(b.sent, tr.bits_sent)
            assert np.array_equal(b.received, tr.bits_received)
            assert b.relay == tr.relay_bits
            assert np.array_equal(participant_prefill_flops(p, s, cfg, opts), tr.flops)


class TestReport:
    def test_csv(self):
        rep = cost_report(EVEN3, uniform_schedule(8, 4), ModelConfig(d=4, d_ff=8))
        rows = list(csv.reader(io.StringIO(rep.to_csv())))
        assert rows[0] == ["participant", "bits_sent", "bits_received", "prefill_flops",
                           "decode_flops_per_step", "peak_scalars"]
        assert len(rows) == 4 and rows[1][1] == "4096"

    def test_nonnegative(self):
        with pytest.raises(ValueError):
            CostReport([-1], [0], [0], [0], [0])

    def test_memory_decreases_with_participants(self):
        cfg = ModelConfig()
        c = gen_corpus(7, seed=0)
        peaks = [cost_report(make_partition(c, N, "TokSeg_QAg"), SyncSchedule(8, ()), cfg)
                 .mean("peak_memory_scalars") for N in (1, 2, 4)]
        assert peaks[0] > peaks[1] > peaks[2]
