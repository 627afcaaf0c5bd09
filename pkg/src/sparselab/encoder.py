"""Toy max-pooled sparse encoder.

Each input token ``x_i`` yields a logit row ``w_i = E[x_i] @ P + b`` over the
whole vocabulary.  The representation keeps, per vocabulary slot, the
largest activated logit over the input positions::

    rep_j = max_i act(w_ij),   act(z) = log1p(relu(z)) or relu(z)

Gradients are exact: the max routes each slot's cotangent to the first
position attaining the maximum, and ReLU passes gradient only where ``z > 0``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ._io import PathLike, atomic_write_bytes
from .errors import ContractViolation, FormatError
from .sparse import SparseVector

DEFAULT_QUERY_HIDDEN = 4
DEFAULT_DOC_HIDDEN = 32
INIT_SCALE = 0.1


@dataclass
class EncoderParams:
    token_embedding: np.ndarray  # (V, h)
    projection: np.ndarray  # (h, V)
    bias: np.ndarray  # (V,)
    saturate: bool = True

    def __post_init__(self):
        v, h = self.token_embedding.shape
        if h < 1:
            raise ContractViolation("hidden size must be >= 1")
        if self.projection.shape != (h, v) or self.bias.shape != (v,):
            raise ContractViolation("inconsistent encoder parameter shapes")

    @classmethod
    def init(
        cls, vocab_size: int, hidden: int, rng: np.random.Generator, saturate: bool = True, tied: bool = True
    ) -> "EncoderParams":
        """Uniform(-0.1, 0.1) initialisation.

        With ``tied`` the projection starts as the transpose of the token
        embedding, as in an MLM head sharing its output layer with the input
        embeddings: every token then begins with a positive logit
        ``|E[t]|^2`` on its own vocabulary slot.  Both matrices train freely.
        """
        u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        emb = u(vocab_size, hidden)
        proj = emb.T.copy() if tied else u(hidden, vocab_size)
        return cls(emb, proj, u(vocab_size), saturate)

    @classmethod
    def zeros(cls, vocab_size: int, hidden: int, saturate: bool = True) -> "EncoderParams":
        return cls(np.zeros((vocab_size, hidden)), np.zeros((hidden, vocab_size)), np.zeros(vocab_size), saturate)

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.token_embedding.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"token_embedding": self.token_embedding, "projection": self.projection, "bias": self.bias}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.token_embedding.copy(), self.projection.copy(), self.bias.copy(), self.saturate)

    def equals(self, other: "EncoderParams") -> bool:
        return self.saturate == other.saturate and all(
            np.array_equal(a, b) for a, b in zip(self.arrays().values(), other.arrays().values())
        )


@dataclass
class EncoderGrads:
    token_embedding: np.ndarray
    projection: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "EncoderGrads":
        return cls(
            np.zeros_like(params.token_embedding), np.zeros_like(params.projection), np.zeros_like(params.bias)
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"token_embedding": self.token_embedding, "projection": self.projection, "bias": self.bias}

    def __iadd__(self, other: "EncoderGrads") -> "EncoderGrads":
        self.token_embedding += other.token_embedding
        self.projection += other.projection
        self.bias += other.bias
        return self


@dataclass
class EncoderPair:
    """Query and document encoders; when ``shared`` both names point at one object."""

    query: EncoderParams
    doc: EncoderParams
    shared: bool = False

    def __post_init__(self):
        if self.shared and self.query is not self.doc:
            raise ContractViolation("a shared pair must use the same parameters for both sides")
        if self.query.vocab_size != self.doc.vocab_size:
            raise ContractViolation("query and document encoders must share a vocabulary")

    @classmethod
    def create(
        cls,
        vocab_size: int,
        seed: int,
        *,
        shared: bool = False,
        query_hidden: int = DEFAULT_QUERY_HIDDEN,
        doc_hidden: int = DEFAULT_DOC_HIDDEN,
        saturate: bool = True,
    ) -> "EncoderPair":
        rng = np.random.default_rng(seed)
        doc = EncoderParams.init(vocab_size, doc_hidden, rng, saturate)
        if shared:
            return cls(doc, doc, True)
        query = EncoderParams.init(vocab_size, query_hidden, rng, saturate)
        return cls(query, doc, False)

    @property
    def vocab_size(self) -> int:
        return self.doc.vocab_size

    def parameters(self) -> List[EncoderParams]:
        return [self.doc] if self.shared else [self.query, self.doc]

    def equals(self, other: "EncoderPair") -> bool:
        return (
            self.shared == other.shared
            and self.query.equals(other.query)
            and self.doc.equals(other.doc)
        )


def _activate(z: np.ndarray, saturate: bool) -> np.ndarray:
    r = np.maximum(z, 0.0)
    return np.log1p(r) if saturate else r


def _activate_grad(z: np.ndarray, saturate: bool) -> np.ndarray:
    pos = z > 0
    if saturate:
        return np.where(pos, 1.0 / (1.0 + np.maximum(z, 0.0)), 0.0)
    return pos.astype(np.float64)


def _dedupe(tokens: Sequence[int]) -> List[int]:
    # First occurrence wins; duplicates have identical rows so the max is unchanged.
    return list(dict.fromkeys(int(t) for t in tokens))


@dataclass
class BatchCache:
    """Forward-pass state needed to backpropagate through :func:`encode_batch`.

    Only active slots (winning logit > 0) carry gradient, so the argmax is
    recorded for those entries alone.
    """

    unique_tokens: np.ndarray  # (U,)
    logits: np.ndarray  # (U, V)
    active_seq: np.ndarray  # sequence index of each active slot
    active_col: np.ndarray  # vocabulary slot
    active_row: np.ndarray  # winning row of ``logits``


def encode_batch(params: EncoderParams, sequences: Sequence[Sequence[int]]) -> Tuple[np.ndarray, BatchCache]:
    """Dense representations ``(n, V)`` for a batch of token sequences."""
    v = params.vocab_size
    deduped = []
    for seq in sequences:
        d = _dedupe(seq)
        if not d:
            raise ContractViolation("encode needs at least one token")
        if min(d) < 0 or max(d) >= v:
            raise ContractViolation(f"token ids must lie in [0, {v})")
        deduped.append(d)
    unique = np.unique(np.concatenate([np.asarray(d, dtype=np.int64) for d in deduped]))
    pad = unique.size
    # One fixed-shape product for the whole vocabulary keeps each token's
    # logits bit-identical whatever else is in the batch.
    table = params.token_embedding @ params.projection
    logits = np.empty((pad + 1, v))
    np.add(table[unique], params.bias, out=logits[:pad])
    logits[pad] = -np.inf
    width = max(len(d) for d in deduped)
    positions = np.full((len(deduped), width), pad, dtype=np.int64)
    for i, d in enumerate(deduped):
        positions[i, : len(d)] = np.searchsorted(unique, d)
    gathered = logits[positions]  # (n, L, V)
    # act is monotone: the max activation sits at the max logit.
    best = gathered.max(axis=1)
    rep = _activate(best, params.saturate)
    seq_idx, col_idx = np.nonzero(best > 0)
    # argmax returns the first maximal position, i.e. the lowest index on ties.
    first = gathered[seq_idx, :, col_idx].argmax(axis=1)
    rows = positions[seq_idx, first]
    return rep, BatchCache(unique, logits[:pad], seq_idx, col_idx, rows)


def backward_batch(params: EncoderParams, cache: BatchCache, upstream: np.ndarray) -> EncoderGrads:
    """Gradient of ``sum(upstream * rep)`` with respect to the parameters."""
    u, v = cache.logits.shape
    z = cache.logits[cache.active_row, cache.active_col]
    vals = upstream[cache.active_seq, cache.active_col] * _activate_grad(z, params.saturate)
    d_logits = np.bincount(
        cache.active_row * v + cache.active_col, weights=vals, minlength=u * v
    ).reshape(u, v)
    emb = params.token_embedding[cache.unique_tokens]
    grads = EncoderGrads.zeros_like(params)
    grads.projection = emb.T @ d_logits
    grads.bias = d_logits.sum(axis=0)
    grads.token_embedding[cache.unique_tokens] = d_logits @ params.projection.T
    return grads


def encode_dense(params: EncoderParams, tokens: Sequence[int]) -> np.ndarray:
    rep, _ = encode_batch(params, [tokens])
    return rep[0]


def encode(params: EncoderParams, tokens: Sequence[int]) -> SparseVector:
    """Encode one token sequence into a sparse vector (zero slots omitted)."""
    return SparseVector.from_dense(encode_dense(params, tokens))


def encode_many(params: EncoderParams, sequences: Sequence[Sequence[int]], batch_size: int = 256) -> List[SparseVector]:
    out = []
    for start in range(0, len(sequences), batch_size):
        rep, _ = encode_batch(params, sequences[start:start + batch_size])
        out.extend(SparseVector.from_dense(r) for r in rep)
    return out


def encode_gradient(params: EncoderParams, tokens: Sequence[int], upstream: np.ndarray) -> EncoderGrads:
    """Exact gradient of ``upstream . encode(tokens)`` (dense cotangent over the vocabulary)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (params.vocab_size,):
        raise ContractViolation("upstream must be a dense vector over the vocabulary")
    _, cache = encode_batch(params, [tokens])
    return backward_batch(params, cache, upstream[None, :])


class QueryEncoder:
    """Callable wrapper so a trained query encoder plugs into benchmarks."""

    def __init__(self, params: EncoderParams):
        self.params = params
        self._emb = params.token_embedding
        self._proj = params.projection
        self._bias = params.bias

    def __call__(self, tokens: Sequence[int]) -> SparseVector:
        ids = _dedupe(tokens)
        if not ids:
            raise ContractViolation("encode needs at least one token")
        logits = self._emb[ids] @ self._proj + self._bias
        rep = _activate(logits.max(axis=0), self.params.saturate)
        # act is monotone, so act(max) == max(act).
        return SparseVector.from_dense(rep)


# -- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"SPLXENC\x00"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIII")  # magic, version, flags, vocab, config bytes


def _encoder_bytes(p: EncoderParams) -> bytes:
    head = struct.pack("<II", p.hidden_size, 1 if p.saturate else 0)
    return head + b"".join(a.astype("<f8").tobytes() for a in p.arrays().values())


def checkpoint_bytes(pair: EncoderPair, config: Optional[Mapping[str, object]] = None) -> bytes:
    """Serialize an encoder pair plus the ``key=value`` config that produced it.

    Layout: header (magic, version, flags bit0=shared, vocab size, config
    length), utf-8 config text, then per stored encoder ``u32 hidden, u32
    saturate`` followed by the float64 embedding, projection and bias arrays;
    a trailing crc32 covers everything.
    """
    cfg = "".join(f"{k}={v}\n" for k, v in (config or {}).items()).encode("utf-8")
    body = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 1 if pair.shared else 0, pair.vocab_size, len(cfg)), cfg]
    for p in pair.parameters():
        body.append(_encoder_bytes(p))
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(path: PathLike, pair: EncoderPair, config: Optional[Mapping[str, object]] = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(pair, config))


def checkpoint_from_bytes(data: bytes, source: str = "<bytes>") -> Tuple[EncoderPair, Dict[str, str]]:
    expected = f"expected sparselab encoder checkpoint version {CKPT_VERSION}"
    if len(data) < _CKPT_HEADER.size + 4 or data[:8] != CKPT_MAGIC:
        raise FormatError(f"{source}: not a sparselab checkpoint (bad magic header); {expected}")
    _, version, flags, vocab, cfg_len = _CKPT_HEADER.unpack_from(data)
    if version != CKPT_VERSION:
        raise FormatError(f"{source}: checkpoint version {version}; {expected}")
    blob, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(blob) != crc:
        raise FormatError(f"{source}: checksum mismatch (truncated or corrupt checkpoint)")
    pos = _CKPT_HEADER.size
    cfg_text = blob[pos:pos + cfg_len].decode("utf-8")
    pos += cfg_len
    config = dict(line.split("=", 1) for line in cfg_text.splitlines() if "=" in line)
    encoders = []
    for _ in range(1 if flags & 1 else 2):
        if pos + 8 > len(blob):
            raise FormatError(f"{source}: truncated checkpoint")
        hidden, sat = struct.unpack_from("<II", blob, pos)
        pos += 8
        arrays = []
        for count, shape in ((vocab * hidden, (vocab, hidden)), (hidden * vocab, (hidden, vocab)), (vocab, (vocab,))):
            n = 8 * count
            if pos + n > len(blob):
                raise FormatError(f"{source}: truncated checkpoint")
            arrays.append(np.frombuffer(blob[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64))
            pos += n
        encoders.append(EncoderParams(*arrays, saturate=bool(sat)))
    if pos != len(blob):
        raise FormatError(f"{source}: trailing bytes in checkpoint")
    if flags & 1:
        pair = EncoderPair(encoders[0], encoders[0], True)
    else:
        pair = EncoderPair(encoders[0], encoders[1], False)
    return pair, config


def load_checkpoint(path: PathLike) -> Tuple[EncoderPair, Dict[str, str]]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), str(path))
