"""Desk-scale trainable text encoders and scoring heads.

Texts are mapped to hashed sparse features (word unigrams plus character
n-grams), pooled into a small dense vector through one tanh layer.  Pair
scoring is either a biaffine form over two independent encodings or an MLP
over a joint encoding that additionally sees hashed word-pair conjunctions,
so the joint path models interaction the independent path cannot.

Everything is float64 and deterministic: the feature hash is declared
(BLAKE2b-64 with the config seed as salt) and frozen by tests.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Union

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Var
from .core import normalize_text

CROSS_PAIR_CAP = 256
CHECKPOINT_VERSION = 1


def sigmoid(x):
    """Numerically stable logistic function for scalars or arrays."""
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    hash_buckets: int = 2 ** 16
    ngram_orders: tuple[int, ...] = (3, 4)
    mlp_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim <= 0 or self.hash_buckets <= 0 or self.mlp_hidden <= 0:
            raise ValueError("embed_dim, hash_buckets and mlp_hidden must be positive")
        object.__setattr__(self, "ngram_orders", tuple(int(n) for n in self.ngram_orders))
        if any(n <= 0 for n in self.ngram_orders):
            raise ValueError("ngram orders must be positive")


def stable_bucket(feature: str, seed: int, buckets: int) -> int:
    """Platform-independent bucket for a feature string.

    BLAKE2b with an 8-byte digest, salted with the seed; the same
    (feature, seed, buckets) always maps to the same bucket.
    """
    salt = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, salt=salt).digest()
    return int.from_bytes(digest, "little") % buckets


def text_features(text: str, cfg: EncoderConfig) -> list[str]:
    """Word unigrams plus per-token character n-grams, in reading order."""
    tokens = normalize_text(text).split()
    feats: list[str] = []
    for token in tokens:
        feats.append("w=" + token)
        for n in cfg.ngram_orders:
            if len(token) >= n:
                feats.extend(f"c{n}={token[i:i + n]}" for i in range(len(token) - n + 1))
    return feats


def cross_pair_features(a: str, b: str, cap: int = CROSS_PAIR_CAP) -> list[str]:
    """Hashed word-pair conjunctions of the two sides, truncated by token order."""
    ta = normalize_text(a).split()
    tb = normalize_text(b).split()
    feats: list[str] = []
    for wa in ta:
        for wb in tb:
            feats.append(f"x={wa}|{wb}")
            if len(feats) >= cap:
                return feats
    return feats


_EMPTY_IDX = np.empty(0, dtype=np.int64)


class FeatureExtractor:
    """Memoizing bucket-index extractor bound to one EncoderConfig.

    Memoization can be disabled per feature family: cross-pair memos grow
    without reuse on streams of mostly unique pairs, and a scorer that is
    supposed to process every pair from scratch should cache nothing.
    """

    def __init__(self, cfg: EncoderConfig, cache_cross: bool = True,
                 cache_singles: bool = True):
        self.cfg = cfg
        self.cache_cross = cache_cross
        self.cache_singles = cache_singles
        self._single: dict[str, np.ndarray] = {}
        self._cross: dict[tuple[str, str], np.ndarray] = {}

    def _bucketize(self, feats: list[str]) -> np.ndarray:
        if not feats:
            return _EMPTY_IDX
        cfg = self.cfg
        return np.fromiter(
            (stable_bucket(f, cfg.seed, cfg.hash_buckets) for f in feats),
            dtype=np.int64,
            count=len(feats),
        )

    def features(self, text: str) -> np.ndarray:
        if not self.cache_singles:
            return self._bucketize(text_features(text, self.cfg))
        idx = self._single.get(text)
        if idx is None:
            idx = self._bucketize(text_features(text, self.cfg))
            self._single[text] = idx
        return idx

    def cross(self, a: str, b: str) -> np.ndarray:
        if not self.cache_cross:
            return self._bucketize(cross_pair_features(a, b))
        key = (a, b)
        idx = self._cross.get(key)
        if idx is None:
            idx = self._bucketize(cross_pair_features(a, b))
            self._cross[key] = idx
        return idx


@dataclass
class ScorerParams:
    """All learnable parameters of the encoders and scoring heads."""

    emb: np.ndarray        # (hash_buckets, embed_dim) text-feature embeddings
    cross_emb: np.ndarray  # (hash_buckets, embed_dim) word-pair conjunction embeddings
    seg: np.ndarray        # (2, embed_dim) segment embeddings
    w1: np.ndarray         # (mlp_hidden, embed_dim)
    b1: np.ndarray         # (mlp_hidden,)
    w2: np.ndarray         # (mlp_hidden,)
    b2: np.ndarray         # ()
    bw: np.ndarray         # (embed_dim, embed_dim) biaffine form
    bb: np.ndarray         # ()

    NAMES = ("emb", "cross_emb", "seg", "w1", "b1", "w2", "b2", "bw", "bb")

    @staticmethod
    def shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
        d, h = cfg.embed_dim, cfg.mlp_hidden
        return {
            "emb": (cfg.hash_buckets, d),
            "cross_emb": (cfg.hash_buckets, d),
            "seg": (2, d),
            "w1": (h, d),
            "b1": (h,),
            "w2": (h,),
            "b2": (),
            "bw": (d, d),
            "bb": (),
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    def copy(self) -> "ScorerParams":
        return ScorerParams(**{k: np.array(v) for k, v in self.arrays().items()})

    def validate(self, cfg: EncoderConfig) -> None:
        for name, shape in self.shapes(cfg).items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @classmethod
    def zeros(cls, cfg: EncoderConfig) -> "ScorerParams":
        return cls(**{k: np.zeros(s) for k, s in cls.shapes(cfg).items()})

    @classmethod
    def init(cls, cfg: EncoderConfig) -> "ScorerParams":
        """Seeded initialization.

        Embeddings are uniform in [-0.05, 0.05]; the MLP and biaffine weight
        matrices use Glorot-style uniform ranges so gradients flow at the
        right scale from the first step; biases start at zero.
        """
        rng = np.random.default_rng(cfg.seed)
        shapes = cls.shapes(cfg)

        def glorot(shape):
            fan = sum(shape) if len(shape) > 1 else shape[0] + 1
            bound = np.sqrt(6.0 / fan)
            return rng.uniform(-bound, bound, size=shape)

        out: dict[str, np.ndarray] = {}
        for name in cls.NAMES:
            shape = shapes[name]
            if name in ("b1", "b2", "bb"):
                out[name] = np.zeros(shape)
            elif name in ("emb", "cross_emb", "seg"):
                out[name] = rng.uniform(-0.05, 0.05, size=shape)
            else:
                out[name] = glorot(shape)
        return cls(**out)


# ---------------------------------------------------------------------------
# plain (inference) forward passes
# ---------------------------------------------------------------------------

def _pre_single(idx: np.ndarray, segment: int, p: ScorerParams) -> np.ndarray:
    pooled = p.emb[idx].mean(axis=0) if len(idx) else 0.0
    return pooled + p.seg[segment]


def encode_single(
    text: str,
    segment: int,
    p: ScorerParams,
    cfg: EncoderConfig,
    fx: FeatureExtractor | None = None,
) -> np.ndarray:
    """tanh(mean of feature embeddings + segment embedding).

    Empty text reduces to the segment embedding alone through the tanh.
    """
    fx = fx or FeatureExtractor(cfg)
    return np.tanh(_pre_single(fx.features(text), segment, p))


def _pre_joint(
    idx_a: np.ndarray, idx_b: np.ndarray, idx_x: np.ndarray, p: ScorerParams
) -> np.ndarray:
    # operation order mirrors the taped pass exactly, so both paths produce
    # bit-identical values
    na, nb = len(idx_a), len(idx_b)
    n = na + nb
    if n:
        both = np.concatenate([idx_a, idx_b])
        pooled = p.emb[both].mean(axis=0)
        segpart = p.seg[0] * (na / n) + p.seg[1] * (nb / n)
        pre = pooled + segpart
    else:
        pre = np.zeros(p.seg.shape[1])
    if len(idx_x):
        pre = pre + p.cross_emb[idx_x].mean(axis=0)
    return pre


def encode_joint(
    a: str,
    b: str,
    p: ScorerParams,
    cfg: EncoderConfig,
    fx: FeatureExtractor | None = None,
) -> np.ndarray:
    """Joint encoding of a query-side text (segment 0) and another text (segment 1).

    Each side's features carry its segment embedding, and hashed word-pair
    conjunctions contribute through a separate embedding table, so the joint
    encoding is not a pure pooled union of the two sides.
    """
    fx = fx or FeatureExtractor(cfg)
    return np.tanh(_pre_joint(fx.features(a), fx.features(b), fx.cross(a, b), p))


def score_biaffine(hq: np.ndarray, hi: np.ndarray, p: ScorerParams) -> float:
    """hq @ W @ hi + b."""
    if hq.shape != hi.shape or hq.shape[0] != p.bw.shape[0]:
        raise ValueError("embedding dimensions do not match the biaffine form")
    # associate as hq . (W @ hi) to match the taped pass bit for bit
    return float(hq @ (p.bw @ hi) + p.bb)


def score_mlp(h: np.ndarray, p: ScorerParams) -> float:
    """Two-layer MLP with tanh hidden activation, scalar output."""
    if h.shape[0] != p.w1.shape[1]:
        raise ValueError("embedding dimension does not match the MLP input")
    return float(p.w2 @ np.tanh(p.w1 @ h + p.b1) + p.b2)


# ---------------------------------------------------------------------------
# taped forward passes (training / gradients); values match the plain passes
# bit for bit because they perform the same float64 operations
# ---------------------------------------------------------------------------

def lift_params(p: ScorerParams) -> dict[str, Var]:
    return {name: Var(arr) for name, arr in p.arrays().items()}


def encode_single_t(
    text: str, segment: int, vp: Mapping[str, Var], cfg: EncoderConfig, fx: FeatureExtractor
) -> Var:
    idx = fx.features(text)
    segrow = ag.gather_row(vp["seg"], segment)
    if len(idx):
        pre = ag.add(ag.gather_mean(vp["emb"], idx), segrow)
    else:
        pre = segrow
    return ag.tanh(pre)


def encode_joint_t(
    a: str, b: str, vp: Mapping[str, Var], cfg: EncoderConfig, fx: FeatureExtractor
) -> Var:
    idx_a, idx_b = fx.features(a), fx.features(b)
    idx_x = fx.cross(a, b)
    na, nb = len(idx_a), len(idx_b)
    n = na + nb
    if n:
        both = np.concatenate([idx_a, idx_b])
        pooled = ag.gather_mean(vp["emb"], both)
        seg0 = ag.scale(ag.gather_row(vp["seg"], 0), na / n)
        seg1 = ag.scale(ag.gather_row(vp["seg"], 1), nb / n)
        pre = ag.add(pooled, ag.add(seg0, seg1))
    else:
        pre = ag.lift(np.zeros(cfg.embed_dim))
    if len(idx_x):
        pre = ag.add(pre, ag.gather_mean(vp["cross_emb"], idx_x))
    return ag.tanh(pre)


def score_mlp_t(h: Var, vp: Mapping[str, Var]) -> Var:
    hidden = ag.tanh(ag.add(ag.matvec(vp["w1"], h), vp["b1"]))
    return ag.add(ag.dot(vp["w2"], hidden), vp["b2"])


def score_biaffine_t(hq: Var, hi: Var, vp: Mapping[str, Var]) -> Var:
    return ag.add(ag.dot(hq, ag.matvec(vp["bw"], hi)), vp["bb"])


def gradients(
    loss_fn: Callable[[Mapping[str, Var]], Var],
    p: ScorerParams,
) -> dict[str, np.ndarray]:
    """Exact analytic gradients of a scalar loss built from the taped ops.

    Parameters that do not participate in the computation get zero
    gradients.  Non-finite values anywhere are reported as errors.
    """
    vp = lift_params(p)
    loss = loss_fn(vp)
    ag.backward(loss)
    grads = {name: var.dense_grad() for name, var in vp.items()}
    bad = sorted(name for name, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        raise NonFiniteError(f"non-finite gradients for parameters: {bad}")
    return grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    """A checkpoint file is missing, corrupt or inconsistent with its config."""


def save_checkpoint(
    path: Union[str, Path],
    params: ScorerParams,
    cfg: EncoderConfig,
    kind: str = "entity",
    extra: dict | None = None,
) -> None:
    """Write a versioned .npz checkpoint with the config echoed in metadata."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": {
            "embed_dim": cfg.embed_dim,
            "hash_buckets": cfg.hash_buckets,
            "ngram_orders": list(cfg.ngram_orders),
            "mlp_hidden": cfg.mlp_hidden,
            "seed": cfg.seed,
        },
        "extra": extra or {},
    }
    meta_bytes = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as handle:
        np.savez_compressed(handle, __meta__=meta_bytes, **params.arrays())


@dataclass(frozen=True)
class Checkpoint:
    params: ScorerParams
    config: EncoderConfig
    kind: str
    extra: dict


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        with np.load(str(path)) as payload:
            if "__meta__" not in payload:
                raise CheckpointError(f"{path}: missing metadata")
            meta = json.loads(bytes(payload["__meta__"]).decode("utf-8"))
            arrays = {k: payload[k] for k in payload.files if k != "__meta__"}
    except (OSError, ValueError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {meta.get('format_version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    try:
        cfg = EncoderConfig(
            embed_dim=meta["config"]["embed_dim"],
            hash_buckets=meta["config"]["hash_buckets"],
            ngram_orders=tuple(meta["config"]["ngram_orders"]),
            mlp_hidden=meta["config"]["mlp_hidden"],
            seed=meta["config"]["seed"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config metadata ({exc})") from None
    missing = [n for n in ScorerParams.NAMES if n not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing parameter arrays {missing}")
    params = ScorerParams(**{n: np.asarray(arrays[n], dtype=np.float64) for n in ScorerParams.NAMES})
    try:
        params.validate(cfg)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return Checkpoint(params, cfg, str(meta.get("kind", "entity")), dict(meta.get("extra", {})))
