"""scikit-learn style front end over the federated forward pass.

Rows of ``X`` are token embeddings in global order; the output is the final
hidden state of every row under the selected execution mode.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import ModelConfig, init_weights
from .oracle import run_cenattn, run_locattn
from .partition import Partition, _split_contiguous, gather
from .protocol import FedOptions, run_fedattn, uniform_schedule

MODES = ("fed", "cen", "loc")


class FedAttnTransformer(TransformerMixin, BaseEstimator):
    """Map token embeddings to final hidden states.

    ``mode="fed"`` syncs every ``sync_interval`` blocks, ``"cen"`` is the
    centralized reference and ``"loc"`` never syncs. ``groups`` passed to
    :meth:`transform` assigns each row to a participant; by default rows
    are split into ``n_participants`` contiguous chunks.
    """

    def __init__(self, d=32, d_ff=64, n_blocks=8, vocab=64, seed=0, mode="fed",
                 sync_interval=1, n_participants=4, kv_exchange_ratio=1.0,
                 wire_bits=16):
        self.d = d
        self.d_ff = d_ff
        self.n_blocks = n_blocks
        self.vocab = vocab
        self.seed = seed
        self.mode = mode
        self.sync_interval = sync_interval
        self.n_participants = n_participants
        self.kv_exchange_ratio = kv_exchange_ratio
        self.wire_bits = wire_bits

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.d:
            raise ValueError(f"X has {X.shape[1]} features, expected d={self.d}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.weights_ = init_weights(ModelConfig(self.d, self.d_ff, self.n_blocks,
                                                 self.vocab, self.seed))
        self.schedule_ = uniform_schedule(self.n_blocks, self.sync_interval)
        self.n_features_in_ = X.shape[1]
        return self

    def _partition(self, L, groups):
        if groups is None:
            N = min(self.n_participants, L)
            chunks = _split_contiguous(list(range(L)), N)
            return Partition(L, tuple(tuple(c) for c in chunks), N - 1)
        groups = np.asarray(groups)
        if groups.shape != (L,):
            raise ValueError("groups must give one participant id per row")
        return Partition.from_assignment(groups)

    def transform(self, X, groups=None):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        if self.mode == "cen":
            return run_cenattn(X, self.weights_)[-1]
        p = self._partition(len(X), groups)
        opts = FedOptions(kv_exchange_ratio=self.kv_exchange_ratio,
                          wire_bits=self.wire_bits, seed=self.seed)
        embeds = [gather(X, p, n) for n in range(p.N)]
        if self.mode == "loc":
            trace = run_locattn(embeds, self.weights_, p, opts)
        else:
            trace = run_fedattn(embeds, self.weights_, p, self.schedule_, opts)
        self.trace_ = trace
        return trace.global_state(self.n_blocks)
