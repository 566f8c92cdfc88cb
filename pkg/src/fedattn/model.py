"""Desk-scale decoder-only Pre-LN transformer with a single attention head."""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ShapeError
from .rng import Xoshiro256

INIT_STD = 0.02
WEIGHT_MAGIC = b"FATW"
WEIGHT_VERSION = 1
_HEADER = struct.Struct("<4sHHHHI")  # 16 bytes


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    d_ff: int = 64
    M: int = 8
    vocab: int = 64
    seed: int = 0
    eps: float = nk.DEFAULT_EPS

    def __post_init__(self):
        for name in ("d", "d_ff", "M", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True, eq=False)
class BlockParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_ffn1: np.ndarray
    W_ffn2: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    eps: float = nk.DEFAULT_EPS

    @property
    def d(self):
        return self.W_Q.shape[0]

    @property
    def d_ff(self):
        return self.W_ffn1.shape[1]

    def arrays(self):
        return (self.W_Q, self.W_K, self.W_V, self.W_ffn1, self.W_ffn2,
                self.ln1_gamma, self.ln1_beta, self.ln2_gamma, self.ln2_beta)

    @classmethod
    def zeros(cls, d, d_ff):
        """All projections zero, LN at identity affine."""
        z = np.zeros
        return cls(z((d, d)), z((d, d)), z((d, d)), z((d, d_ff)), z((d_ff, d)),
                   np.ones(d), z(d), np.ones(d), z(d))


@dataclass(frozen=True, eq=False)
class ModelWeights:
    config: ModelConfig
    blocks: list
    embed: np.ndarray  # vocab x d; the output projection is embed.T

    def pos_encode(self, positions):
        """Sinusoidal rows for integer ``positions`` (no length limit)."""
        return sinusoidal(positions, self.config.d)

    def unembed(self, x):
        return nk.matmul_t(x, self.embed)


def sinusoidal(positions, d):
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    i = np.arange(d)
    freq = np.power(10000.0, -(2 * (i // 2)) / d)
    ang = pos * freq
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def init_weights(config):
    """Gaussian(0, 0.02) projections and embeddings; LN gamma=1, beta=0.

    Draw order: for each block ``W_Q, W_K, W_V, W_ffn1, W_ffn2`` (row-major),
    then the embedding table.
    """
    rng = Xoshiro256(config.seed)
    d, d_ff = config.d, config.d_ff
    blocks = []
    for _ in range(config.M):
        blocks.append(BlockParams(
            W_Q=rng.normal((d, d), INIT_STD),
            W_K=rng.normal((d, d), INIT_STD),
            W_V=rng.normal((d, d), INIT_STD),
            W_ffn1=rng.normal((d, d_ff), INIT_STD),
            W_ffn2=rng.normal((d_ff, d), INIT_STD),
            ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
            ln2_gamma=np.ones(d), ln2_beta=np.zeros(d),
            eps=config.eps,
        ))
    embed = rng.normal((config.vocab, d), INIT_STD)
    return ModelWeights(config, blocks, embed)


def embed_tokens(ids, global_positions, weights):
    """Token embedding plus the positional row of each token's global index."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    pos = np.asarray(global_positions, dtype=np.int64).reshape(-1)
    d = weights.config.d
    if ids.shape != pos.shape:
        raise ShapeError("ids and positions differ in length")
    if ids.size == 0:
        return np.zeros((0, d))
    if ids.min() < 0 or ids.max() >= weights.config.vocab:
        raise ValueError("token id outside vocabulary")
    if np.any(np.diff(pos) <= 0):
        raise ValueError("positions must be strictly increasing")
    return weights.embed[ids] + weights.pos_encode(pos)


def qkv_project(x, block):
    x = nk.as_mat(x)
    if x.shape[1] != block.d:
        raise ShapeError(f"x has {x.shape[1]} columns, block expects {block.d}")
    h = nk.layernorm(x, block.ln1_gamma, block.ln1_beta, block.eps)
    return nk.matmul(h, block.W_Q), nk.matmul(h, block.W_K), nk.matmul(h, block.W_V)


def causal_mask(q_positions, k_positions):
    """Boolean mask blocking keys whose global index exceeds the query's."""
    q = np.asarray(q_positions).reshape(-1, 1)
    k = np.asarray(k_positions).reshape(1, -1)
    return k > q


def attention(q, k, v, mask=None):
    """Single-head ``softmax(q k^T / sqrt(d) + mask) v``."""
    q, k, v = nk.as_mat(q), nk.as_mat(k), nk.as_mat(v)
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = nk.matmul_t(q, k) / math.sqrt(q.shape[1])
    return nk.matmul(nk.softmax_rows(scores, mask), v)


def ffn_sublayer(z, block):
    """``relu(LN(z) W1) W2``: the position-wise FFN with its layer norm."""
    h = nk.layernorm(z, block.ln2_gamma, block.ln2_beta, block.eps)
    return nk.matmul(np.maximum(nk.matmul(h, block.W_ffn1), 0.0), block.W_ffn2)


def block_forward(x_in, block, kv_source="self", mask=None):
    """One Pre-LN block. Returns ``(x_out, q, k, v)``.

    ``kv_source`` is ``"self"`` or an external ``(K, V)`` pair that the
    block's queries attend to instead of its own keys and values.
    """
    q, k, v = qkv_project(x_in, block)
    if isinstance(kv_source, str):
        if kv_source != "self":
            raise ValueError(f"unknown kv_source {kv_source!r}")
        k_used, v_used = k, v
    else:
        k_used, v_used = kv_source
    x_res = nk.as_mat(x_in) + attention(q, k_used, v_used, mask)
    return x_res + ffn_sublayer(x_res, block), q, k, v


def dump_weights(weights, path):
    """Write a little-endian float64 fixture with a 16-byte header."""
    c = weights.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, c.d, c.d_ff, c.M, c.vocab))
        for b in weights.blocks:
            for arr in b.arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(weights.embed, dtype="<f8").tobytes())


def load_weights(path, seed=0):
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, d, d_ff, M, vocab = _HEADER.unpack_from(raw, 0)
    if magic != WEIGHT_MAGIC or version != WEIGHT_VERSION:
        raise ValueError("not a weight fixture")
    off = _HEADER.size

    def take(*shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return arr.reshape(shape)

    blocks = []
    for _ in range(M):
        blocks.append(BlockParams(take(d, d), take(d, d), take(d, d), take(d, d_ff),
                                  take(d_ff, d), take(d), take(d), take(d), take(d)))
    embed = take(vocab, d)
    if off != len(raw):
        raise ValueError("trailing bytes in weight fixture")
    return ModelWeights(ModelConfig(d, d_ff, M, vocab, seed), blocks, embed)
