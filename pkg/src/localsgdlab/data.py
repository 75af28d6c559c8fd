"""Deterministic token supply: byte-level tokenizer, synthetic corpora,
token-file IO, and exact sharding of each global batch across clusters.

Token files are binary: magic b"TOK1", one uint8 giving the id width in
bytes (1, 2 or 4), uint32 vocab_size, uint64 token count, then the ids,
all little-endian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, EndOfData
from .model import TokenBatch

BYTE_VOCAB = 256
_MAGIC = b"TOK1"


def tokenize_bytes(data: bytes) -> np.ndarray:
    """Identity byte -> id mapping (vocab 256)."""
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)

def detokenize_bytes(ids: np.ndarray) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= BYTE_VOCAB):
        raise DataError("token id outside byte range")
    return ids.astype(np.uint8).tobytes()


def write_token_file(path, ids: np.ndarray, vocab_size: int):
    ids = np.asarray(ids, dtype=np.int64)
    width = 1 if vocab_size <= 256 else (2 if vocab_size <= 65536 else 4)
    dtype = {1: "<u1", 2: "<u2", 4: "<u4"}[width]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<BIQ", width, vocab_size, ids.size))
        f.write(ids.astype(dtype).tobytes())


def read_token_file(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise DataError(f"{path}: not a token file (bad magic)")
        width, vocab_size, count = struct.unpack("<BIQ", f.read(13))
        dtype = {1: "<u1", 2: "<u2", 4: "<u4"}.get(width)
        if dtype is None:
            raise DataError(f"{path}: unsupported id width {width}")
        ids = np.frombuffer(f.read(), dtype=dtype)[:count].astype(np.int64)
    if ids.size != count:
        raise DataError(f"{path}: truncated token file")
    return ids, vocab_size


@dataclass
class TokenStream:
    """A replayable token sequence with a cursor.

    The full sequence is materialized up front, so (source, seed) fully
    determines every token and replay is trivial.
    """
    tokens: np.ndarray
    vocab_size: int
    source: str = "synthetic"
    seed: int = 0
    cursor: int = 0

    def __len__(self):
        return int(self.tokens.size)

    def remaining(self) -> int:
        return int(self.tokens.size - self.cursor)

    def reset(self):
        self.cursor = 0

    def split(self, val_fraction: float) -> tuple["TokenStream", "TokenStream"]:
        """Train/validation split; the tail fraction is never trained on."""
        if not (0.0 < val_fraction < 1.0):
            raise ConfigError("val_fraction must be in (0, 1)")
        cut = int(self.tokens.size * (1.0 - val_fraction))
        mk = lambda t: TokenStream(t, self.vocab_size, self.source, self.seed)
        return mk(self.tokens[:cut]), mk(self.tokens[cut:])


def stream_from_bytes(data: bytes, seed: int = 0) -> TokenStream:
    return TokenStream(tokenize_bytes(data), BYTE_VOCAB, source="file", seed=seed)


def stream_from_file(path) -> TokenStream:
    path = Path(path)
    if path.suffix == ".tok":
        ids, vocab = read_token_file(path)
        return TokenStream(ids, vocab, source="file")
    return stream_from_bytes(path.read_bytes())


def synthetic_corpus(seed: int, kind: str, length_tokens: int,
                     entropy: float = 3.0, period: int = 16,
                     n_mixture: int = 8, vocab_size: int | None = None) -> TokenStream:
    """Deterministic synthetic corpus.

    kind="markov": first-order chain over k = round(e^entropy) symbols whose
    transition matrix is a weighted mixture of random permutations. The
    matrix is doubly stochastic, so the stationary distribution is uniform
    and the empirical unigram entropy converges to `entropy` (= ln k). The
    conditional entropy is much lower, so loss curves are non-trivial and
    capacity-limited models have something to learn.

    kind="markov-hier": a hierarchical chain over the same k symbols mixing
    deterministic structure of orders 1-3 with uniform noise. Each step picks
    the order-1 permutation (p=0.35), an unstructured order-2 table (p=0.30),
    an unstructured order-3 table (p=0.25), or a uniform token (p=0.10). All
    table rows are permutations of the previous token, so the uniform
    marginal is stationary and the noise keeps the chain irreducible. The
    order-2 table has k^2 entries and the order-3 table k^3, so successively
    larger models keep finding structure to absorb: loss scales with
    capacity across several orders of magnitude of parameter count instead
    of saturating at the size of a single k x k table.

    kind="repeated-pattern": a fixed random pattern of the given period,
    tiled; memorizable by any model with seq_len >= period.
    """
    if length_tokens <= 0:
        raise ConfigError("length_tokens must be positive")
    rng = np.random.default_rng(seed)
    if kind == "markov":
        k = max(2, int(round(math.exp(entropy))))
        if vocab_size is not None and k > vocab_size:
            raise ConfigError(f"entropy {entropy} needs {k} symbols > vocab {vocab_size}")
        # one cyclic shift guarantees irreducibility; the rest are random
        perms = [np.roll(np.arange(k), 1)]
        perms += [rng.permutation(k) for _ in range(n_mixture - 1)]
        perms = np.stack(perms)
        weights = rng.dirichlet(np.full(n_mixture, 0.4))
        choices = rng.choice(n_mixture, size=length_tokens, p=weights)
        out = np.empty(length_tokens, dtype=np.int64)
        state = int(rng.integers(0, k))
        for t in range(length_tokens):
            state = int(perms[choices[t], state])
            out[t] = state
        vocab = vocab_size if vocab_size is not None else k
    elif kind == "markov-hier":
        k = max(2, int(round(math.exp(entropy))))
        if vocab_size is not None and k > vocab_size:
            raise ConfigError(f"entropy {entropy} needs {k} symbols > vocab {vocab_size}")
        t1 = rng.permutation(k)
        t2 = np.stack([rng.permutation(k) for _ in range(k)])
        t3 = np.stack([rng.permutation(k) for _ in range(k * k)]).reshape(k, k, k)
        order_w = (0.35, 0.30, 0.25, 0.10)
        choices = rng.choice(4, size=length_tokens, p=order_w)
        noise = rng.integers(0, k, size=length_tokens)
        out = np.empty(length_tokens, dtype=np.int64)
        p1, p2, p3 = (int(x) for x in rng.integers(0, k, size=3))
        for t in range(length_tokens):
            c = choices[t]
            if c == 0:
                nxt = t1[p1]
            elif c == 1:
                nxt = t2[p2, p1]
            elif c == 2:
                nxt = t3[p3, p2, p1]
            else:
                nxt = noise[t]
            out[t] = nxt
            p3, p2, p1 = p2, p1, int(nxt)
        vocab = vocab_size if vocab_size is not None else k
    elif kind == "repeated-pattern":
        vocab = vocab_size if vocab_size is not None else BYTE_VOCAB
        pattern = rng.integers(0, vocab, size=period)
        reps = length_tokens // period + 1
        out = np.tile(pattern, reps)[:length_tokens].astype(np.int64)
    else:
        raise ConfigError(f"unknown synthetic corpus kind {kind!r}")
    return TokenStream(out, vocab, source="synthetic", seed=seed)


@dataclass(frozen=True)
class ShardPlan:
    m: int
    global_batch_tokens: int
    seq_len: int

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.global_batch_tokens % self.m != 0:
            raise ConfigError(
                f"global batch {self.global_batch_tokens} not divisible by m={self.m}"
            )
        if self.per_cluster_tokens % self.seq_len != 0:
            raise ConfigError(
                f"per-cluster tokens {self.per_cluster_tokens} not divisible by "
                f"seq_len={self.seq_len}"
            )

    @property
    def per_cluster_tokens(self) -> int:
        return self.global_batch_tokens // self.m


def next_global_batch(stream: TokenStream, plan: ShardPlan) -> list[TokenBatch]:
    """Consume the next B tokens and return m pairwise-disjoint shards.

    Shard i gets the i-th contiguous block of rows, so the assignment is a
    pure function of the stream position. Targets are the inputs shifted by
    one token (one-token lookahead past the consumed block).
    """
    B, L = plan.global_batch_tokens, plan.seq_len
    if stream.cursor + B + 1 > stream.tokens.size:
        raise EndOfData(
            f"need {B + 1} tokens at cursor {stream.cursor}, have {stream.remaining()}"
        )
    block = stream.tokens[stream.cursor:stream.cursor + B + 1]
    rows = B // L
    inputs = block[:B].reshape(rows, L)
    targets = block[1:B + 1].reshape(rows, L)
    stream.cursor += B
    rows_per = rows // plan.m
    return [
        TokenBatch(inputs[i * rows_per:(i + 1) * rows_per],
                   targets[i * rows_per:(i + 1) * rows_per])
        for i in range(plan.m)
    ]
