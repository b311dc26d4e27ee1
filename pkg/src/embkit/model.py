"""Hashing embedding-bag bi-encoder.

Text is split on whitespace, each token hashed (FNV-1a, 64 bit) into a fixed
number of buckets, the bucket rows are mean-pooled and projected, and the
result is L2-normalized.  An optional low-rank adapter adds
``(alpha / r) * B @ A`` on top of the projection.  Gradients are written out by
hand so the whole thing runs on numpy in float64.

Checkpoints use a small binary format::

    b"EMBKIT1\\n" | JSON header line | little-endian float32 arrays

with the arrays stored in the order listed by the header.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagic,
    DegenerateNorm,
    EmptyInput,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

NORM_EPS = 1e-12

MAGIC = b"EMBKIT1\n"
FORMAT_VERSION = 1


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 18)
def _token_hash(token: str) -> int:
    return fnv1a_64(token.encode("utf-8"))


@dataclass(frozen=True)
class TokenizerConfig:
    hash_buckets: int = 65536
    lowercase: bool = True
    max_query_tokens: int = 256
    max_doc_tokens: int = 512

    def __post_init__(self):
        if self.hash_buckets < 2:
            raise ValueError(f"hash_buckets must be >= 2, got {self.hash_buckets}")
        if self.max_query_tokens < 1 or self.max_doc_tokens < 1:
            raise ValueError("max token lengths must be positive")


def tokenize(text: str, cfg: TokenizerConfig, is_query: bool = False) -> list[int]:
    """Hash whitespace tokens of ``text`` into bucket ids, truncated to the
    query or document length limit."""
    text = unicodedata.normalize("NFC", text)
    if cfg.lowercase:
        text = text.lower()
    limit = cfg.max_query_tokens if is_query else cfg.max_doc_tokens
    tokens = text.split()[:limit]
    return [_token_hash(tok) % cfg.hash_buckets for tok in tokens]


@dataclass
class ModelParams:
    embed: np.ndarray  # [hash_buckets, d_embed]
    proj: np.ndarray  # [d_embed, d_out]
    lora_A: np.ndarray | None = None  # [r, d_embed]
    lora_B: np.ndarray | None = None  # [d_out, r]
    lora_scale: float = 16.0
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)

    def __post_init__(self):
        self.validate()

    @property
    def d_embed(self) -> int:
        return self.embed.shape[1]

    @property
    def d_out(self) -> int:
        return self.proj.shape[1]

    @property
    def lora_rank(self) -> int:
        return 0 if self.lora_A is None else self.lora_A.shape[0]

    @property
    def has_adapter(self) -> bool:
        return self.lora_A is not None

    @property
    def adapter_factor(self) -> float:
        return self.lora_scale / self.lora_rank

    def validate(self) -> None:
        if self.embed.ndim != 2 or self.proj.ndim != 2:
            raise ShapeMismatch("embed and proj must be matrices")
        if self.embed.shape[0] != self.tokenizer.hash_buckets:
            raise ShapeMismatch(
                f"embed has {self.embed.shape[0]} rows, tokenizer expects "
                f"{self.tokenizer.hash_buckets}"
            )
        if self.proj.shape[0] != self.d_embed:
            raise ShapeMismatch(f"proj shape {self.proj.shape} vs d_embed {self.d_embed}")
        if self.d_out < 2:
            raise ShapeMismatch("d_out must be >= 2")
        if (self.lora_A is None) != (self.lora_B is None):
            raise ShapeMismatch("lora_A and lora_B must both be present or both absent")
        if self.lora_A is not None:
            r = self.lora_A.shape[0]
            if r == 0:
                raise ShapeMismatch("rank-0 adapter must be absent, not empty")
            if self.lora_A.shape != (r, self.d_embed) or self.lora_B.shape != (self.d_out, r):
                raise ShapeMismatch(
                    f"adapter shapes {self.lora_A.shape}, {self.lora_B.shape} do not "
                    f"match d_embed={self.d_embed}, d_out={self.d_out}"
                )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {"embed": self.embed, "proj": self.proj}
        if self.has_adapter:
            out["lora_A"] = self.lora_A
            out["lora_B"] = self.lora_B
        return out

    def copy(self) -> "ModelParams":
        return replace(
            self,
            embed=self.embed.copy(),
            proj=self.proj.copy(),
            lora_A=None if self.lora_A is None else self.lora_A.copy(),
            lora_B=None if self.lora_B is None else self.lora_B.copy(),
        )

    def without_adapter(self) -> "ModelParams":
        return replace(self, lora_A=None, lora_B=None)


def init_params(
    tokenizer: TokenizerConfig | None = None,
    d_embed: int = 64,
    d_out: int = 64,
    lora_rank: int = 8,
    lora_scale: float = 16.0,
    seed: int = 0,
) -> ModelParams:
    """Random initialization.  Values are rounded to float32 so a freshly
    initialized model survives a checkpoint round trip unchanged."""
    tokenizer = tokenizer or TokenizerConfig()
    rng = np.random.default_rng(seed)

    def f32(a):
        return a.astype(np.float32).astype(np.float64)

    embed = f32(rng.normal(0.0, 1.0 / np.sqrt(d_embed), size=(tokenizer.hash_buckets, d_embed)))
    proj = f32(rng.normal(0.0, 1.0 / np.sqrt(d_embed), size=(d_embed, d_out)))
    lora_A = lora_B = None
    if lora_rank > 0:
        lora_A = f32(rng.normal(0.0, 0.02, size=(lora_rank, d_embed)))
        lora_B = np.zeros((d_out, lora_rank))
    return ModelParams(embed, proj, lora_A, lora_B, lora_scale, tokenizer)


@dataclass
class ForwardCache:
    flat: np.ndarray  # concatenated token ids
    lengths: np.ndarray
    pooled: np.ndarray  # [B, d_embed]
    adapter_hidden: np.ndarray | None  # [B, r]
    norms: np.ndarray  # [B]
    out: np.ndarray  # [B, d_out], unit rows


def forward_batch(
    params: ModelParams, batch_ids: Sequence[Sequence[int]]
) -> tuple[np.ndarray, ForwardCache]:
    """Embed a batch of token-id sequences; returns unit-norm rows and the
    intermediates needed by :func:`backward_batch`."""
    if len(batch_ids) == 0:
        raise EmptyInput("empty batch")
    lengths = np.array([len(ids) for ids in batch_ids], dtype=np.int64)
    if (lengths == 0).any():
        raise EmptyInput(f"sequence {int(np.argmin(lengths))} has no tokens")
    flat = np.concatenate([np.asarray(ids, dtype=np.int64) for ids in batch_ids])
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])

    sums = np.add.reduceat(params.embed[flat], offsets, axis=0)
    pooled = sums / lengths[:, None]
    z = pooled @ params.proj
    hidden = None
    if params.has_adapter:
        hidden = pooled @ params.lora_A.T
        z = z + params.adapter_factor * (hidden @ params.lora_B.T)
    norms = np.sqrt(np.sum(z * z, axis=1))
    bad = np.flatnonzero(~(norms >= NORM_EPS))
    if bad.size:
        raise DegenerateNorm(
            f"pre-normalization norm {norms[bad[0]]:.3g} below {NORM_EPS} for sequence {bad[0]}"
        )
    out = z / norms[:, None]
    return out, ForwardCache(flat, lengths, pooled, hidden, norms, out)


def embed_text(params: ModelParams, ids: Sequence[int]) -> np.ndarray:
    if len(ids) == 0:
        raise EmptyInput("cannot embed an empty token sequence")
    out, _ = forward_batch(params, [ids])
    return out[0]


def encode(params: ModelParams, texts: Sequence[str], is_query: bool = False) -> np.ndarray:
    """Tokenize and embed a list of texts into an ``[len(texts), d_out]`` array."""
    if len(texts) == 0:
        return np.zeros((0, params.d_out))
    ids = [tokenize(t, params.tokenizer, is_query) for t in texts]
    return forward_batch(params, ids)[0]


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


@dataclass
class Gradients:
    """Parameter gradients.  The embedding gradient is row-sparse:
    ``embed[i]`` is the gradient of table row ``embed_rows[i]``."""

    embed_rows: np.ndarray
    embed: np.ndarray
    proj: np.ndarray
    lora_A: np.ndarray | None = None
    lora_B: np.ndarray | None = None
    frozen: frozenset[str] = frozenset()

    def dense_embed(self, hash_buckets: int) -> np.ndarray:
        out = np.zeros((hash_buckets, self.embed.shape[1]))
        out[self.embed_rows] = self.embed
        return out

    def items(self):
        yield "embed", self.embed
        yield "proj", self.proj
        if self.lora_A is not None:
            yield "lora_A", self.lora_A
            yield "lora_B", self.lora_B

    def __add__(self, other: "Gradients") -> "Gradients":
        rows = np.union1d(self.embed_rows, other.embed_rows)
        embed = np.zeros((rows.size, self.embed.shape[1]))
        embed[np.searchsorted(rows, self.embed_rows)] += self.embed
        embed[np.searchsorted(rows, other.embed_rows)] += other.embed
        return Gradients(
            rows,
            embed,
            self.proj + other.proj,
            None if self.lora_A is None else self.lora_A + other.lora_A,
            None if self.lora_B is None else self.lora_B + other.lora_B,
            self.frozen | other.frozen,
        )


def backward_batch(
    params: ModelParams,
    batch_ids: Sequence[Sequence[int]],
    upstream: np.ndarray,
    cache: ForwardCache | None = None,
    adapter_only: bool = False,
) -> Gradients:
    """Chain rule from dL/d(output rows) back to every parameter tensor."""
    if cache is None:
        _, cache = forward_batch(params, batch_ids)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != cache.out.shape:
        raise ShapeMismatch(
            f"upstream gradient shape {upstream.shape} != output shape {cache.out.shape}"
        )
    v = cache.out
    # d normalize(z) / dz = (I - v v^T) / |z|
    dz = (upstream - v * np.sum(v * upstream, axis=1, keepdims=True)) / cache.norms[:, None]

    g_proj = cache.pooled.T @ dz
    d_pooled = dz @ params.proj.T
    g_A = g_B = None
    if params.has_adapter:
        s = params.adapter_factor
        g_B = s * (dz.T @ cache.adapter_hidden)
        d_hidden = s * (dz @ params.lora_B)
        g_A = d_hidden.T @ cache.pooled
        d_pooled = d_pooled + d_hidden @ params.lora_A

    per_token = np.repeat(d_pooled / cache.lengths[:, None], cache.lengths, axis=0)
    rows, inverse = np.unique(cache.flat, return_inverse=True)
    g_embed = np.zeros((rows.size, params.d_embed))
    np.add.at(g_embed, inverse, per_token)

    frozen = frozenset({"embed", "proj"}) if adapter_only and params.has_adapter else frozenset()
    return Gradients(rows, g_embed, g_proj, g_A, g_B, frozen)


# ---------------------------------------------------------------------------
# checkpoints


def _header(params: ModelParams) -> dict:
    arrays = [[name, list(t.shape)] for name, t in params.tensors().items()]
    return {
        "format_version": FORMAT_VERSION,
        "hash_buckets": params.tokenizer.hash_buckets,
        "d_embed": params.d_embed,
        "d_out": params.d_out,
        "lora_rank": params.lora_rank,
        "lora_scale": params.lora_scale,
        "tokenizer": asdict(params.tokenizer),
        "arrays": arrays,
    }


def checkpoint_bytes(params: ModelParams) -> bytes:
    header = json.dumps(_header(params), sort_keys=True, separators=(",", ":"))
    parts = [MAGIC, header.encode("utf-8"), b"\n"]
    for t in params.tensors().values():
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> ModelParams:
    if not data.startswith(MAGIC):
        raise BadMagic("not an embkit checkpoint (bad magic)")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise TruncatedFile("checkpoint header line is incomplete")
    try:
        header = json.loads(data[len(MAGIC) : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedFile(f"unreadable checkpoint header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")

    payload = memoryview(data)[end + 1 :]
    expected = sum(4 * int(np.prod(shape)) for _, shape in header["arrays"])
    if len(payload) != expected:
        raise TruncatedFile(
            f"header declares {expected} payload bytes, file holds {len(payload)}"
        )
    tensors = {}
    offset = 0
    for name, shape in header["arrays"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        tensors[name] = arr.astype(np.float64).reshape(shape)
        offset += 4 * n
    return ModelParams(
        embed=tensors["embed"],
        proj=tensors["proj"],
        lora_A=tensors.get("lora_A"),
        lora_B=tensors.get("lora_B"),
        lora_scale=float(header["lora_scale"]),
        tokenizer=TokenizerConfig(**header["tokenizer"]),
    )
