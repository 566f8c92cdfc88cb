"""Splitting a global token sequence across participants.

Token indices and participant ids are 0-based. The publisher is always the
last participant, ``N - 1``.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import PartitionError, ShapeError
from .rng import Xoshiro256, derive_seed

STRATEGIES = ("TokSeg_QAg", "TokSeg_QEx", "SemSeg_QAg", "SemSeg_QEx")


@dataclass(frozen=True)
class Partition:
    """Disjoint, ordered index sets covering ``range(L)``."""

    L: int
    locals: tuple  # tuple of tuples of global indices, one per participant
    publisher: int

    def __post_init__(self):
        seen = np.zeros(self.L, dtype=np.int64)
        for idx in self.locals:
            arr = np.asarray(idx, dtype=np.int64)
            if arr.size and (np.any(np.diff(arr) <= 0) or arr[0] < 0 or arr[-1] >= self.L):
                raise PartitionError("local index lists must be increasing and in range")
            seen[arr] += 1
        if np.any(seen != 1):
            raise PartitionError("locals must cover every index exactly once")
        if not 0 <= self.publisher < self.N:
            raise PartitionError("publisher out of range")

    @property
    def N(self):
        return len(self.locals)

    @property
    def sizes(self):
        return [len(ix) for ix in self.locals]

    def assign(self):
        """Participant id of every global index."""
        out = np.empty(self.L, dtype=np.int64)
        for n, idx in enumerate(self.locals):
            out[list(idx)] = n
        return out

    def to_json(self):
        return json.dumps({"L": self.L, "N": self.N, "publisher": self.publisher,
                           "locals": [list(ix) for ix in self.locals]}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        p = cls(doc["L"], tuple(tuple(ix) for ix in doc["locals"]), doc["publisher"])
        if p.N != doc["N"]:
            raise PartitionError("N does not match locals")
        return p

    @classmethod
    def from_assignment(cls, assign, n_participants=None, publisher=None):
        assign = np.asarray(assign, dtype=np.int64)
        N = int(assign.max()) + 1 if n_participants is None else n_participants
        locals_ = tuple(tuple(int(i) for i in np.flatnonzero(assign == n)) for n in range(N))
        return cls(len(assign), locals_, N - 1 if publisher is None else publisher)


@dataclass(frozen=True)
class SyntheticCorpus:
    """Few-shot style token stream: ``shots`` example units then one question.

    ``units`` are half-open ``(start, stop)`` spans tiling ``range(L)``.
    """

    tokens: np.ndarray
    units: tuple
    question: int  # index into units

    @property
    def L(self):
        return len(self.tokens)

    @property
    def shots(self):
        return len(self.units) - 1

    def question_span(self):
        return self.units[self.question]


def gen_corpus(shots, unit_len_range=(20, 32), vocab=64, seed=0):
    """``shots + 1`` units with lengths uniform in the inclusive range."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    lo, hi = unit_len_range
    if not 1 <= lo <= hi:
        raise ValueError("bad unit length range")
    rng = Xoshiro256(derive_seed(seed, 0xC0))
    lengths = lo + rng.integers(hi - lo + 1, shots + 1)
    units, start = [], 0
    for n in lengths:
        units.append((start, start + int(n)))
        start += int(n)
    tokens = rng.integers(vocab, start)
    return SyntheticCorpus(tokens, tuple(units), len(units) - 1)


def _split_contiguous(indices, parts):
    """Near-equal contiguous chunks; remainder to the lowest chunk ids."""
    q, r = divmod(len(indices), parts)
    out, pos = [], 0
    for k in range(parts):
        size = q + (1 if k < r else 0)
        out.append(list(indices[pos:pos + size]))
        pos += size
    return out


def _greedy_units(units, parts):
    """Longest unit first onto the least-loaded part; ties to lower ids."""
    order = sorted(range(len(units)), key=lambda u: (-(units[u][1] - units[u][0]), u))
    load = [0] * parts
    owned = [[] for _ in range(parts)]
    for u in order:
        k = min(range(parts), key=lambda j: (load[j], j))
        owned[k].append(u)
        load[k] += units[u][1] - units[u][0]
    return owned


def _indices_of(units, unit_ids):
    return sorted(i for u in unit_ids for i in range(*units[u]))


def make_partition(corpus, n_participants, strategy, seed=0):
    """Assign the corpus tokens to ``n_participants`` per ``strategy``.

    ``seed`` is accepted for interface symmetry; every strategy is
    deterministic.
    """
    N = int(n_participants)
    L = corpus.L
    if N < 1:
        raise PartitionError("need at least one participant")
    if strategy not in STRATEGIES:
        raise PartitionError(f"unknown strategy {strategy!r}")
    if N == 1:
        return Partition(L, (tuple(range(L)),), 0)

    units = corpus.units
    q_span = corpus.question_span()
    q_idx = list(range(*q_span))
    others_units = [u for u in range(len(units)) if u != corpus.question]

    if strategy == "TokSeg_QAg":
        if L < N:
            raise PartitionError("fewer tokens than participants")
        chunks = _split_contiguous(list(range(L)), N)
    elif strategy == "TokSeg_QEx":
        rest = [i for i in range(L) if not q_span[0] <= i < q_span[1]]
        if len(rest) < N - 1:
            raise PartitionError("too few non-question tokens")
        chunks = _split_contiguous(rest, N - 1) + [q_idx]
    elif strategy == "SemSeg_QAg":
        if len(units) < N:
            raise PartitionError("fewer units than participants")
        owned = _greedy_units(units, N)
        holder = next(k for k, us in enumerate(owned) if corpus.question in us)
        # relabel so the question holder is the publisher
        owned[holder], owned[N - 1] = owned[N - 1], owned[holder]
        chunks = [_indices_of(units, us) for us in owned]
    else:  # SemSeg_QEx
        if len(others_units) < N - 1:
            raise PartitionError("fewer example units than non-publishers")
        sub = [units[u] for u in others_units]
        owned = _greedy_units(sub, N - 1)
        chunks = [_indices_of(sub, us) for us in owned] + [q_idx]
    return Partition(L, tuple(tuple(c) for c in chunks), N - 1)


def gather(global_mat, p, n):
    """Rows of ``global_mat`` owned by participant ``n``, in global order."""
    global_mat = np.asarray(global_mat)
    if global_mat.shape[0] != p.L:
        raise ShapeError(f"expected {p.L} rows, got {global_mat.shape[0]}")
    if not 0 <= n < p.N:
        raise IndexError(f"participant {n} out of range")
    return global_mat[list(p.locals[n])]


def scatter(local_mats, p):
    """Inverse of :func:`gather`: place every participant's rows globally."""
    if len(local_mats) != p.N:
        raise ShapeError("one matrix per participant required")
    cols = None
    for n, m in enumerate(local_mats):
        m = np.asarray(m)
        if m.shape[0] != len(p.locals[n]):
            raise ShapeError(f"participant {n}: {m.shape[0]} rows, owns {len(p.locals[n])}")
        cols = m.shape[1] if cols is None else cols
    out = np.empty((p.L, cols))
    for n, m in enumerate(local_mats):
        out[list(p.locals[n])] = m
    return out
