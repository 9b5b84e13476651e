"""Frame tokenizers: random-projection codebooks (BEST-RQ style) and FSQ."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .features import FeatureMatrix, as_rate, resample_frames


class QuantizerError(ValueError):
    pass


_CODEBOOK_STRUCT = struct.Struct("<QQQQQ")
_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Codebook:
    seed: int
    input_dims: int
    proj_dims: int
    num_codewords: int
    projection: np.ndarray
    codewords: np.ndarray

    def to_bytes(self) -> bytes:
        """40-byte description; :meth:`from_bytes` regenerates the tables."""
        return _CODEBOOK_STRUCT.pack(self.seed, self.input_dims, self.proj_dims, self.num_codewords, 0)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Codebook":
        seed, input_dims, proj_dims, num_codewords, _ = _CODEBOOK_STRUCT.unpack(raw)
        return build_codebook(seed, input_dims, proj_dims, num_codewords)


def build_codebook(seed: int, input_dims: int, proj_dims: int = 16, num_codewords: int = 8192) -> Codebook:
    """Frozen random projection (standard normal) and unit-norm codewords.

    Codeword entries are drawn uniformly from (-1, 1) and each row is then
    L2-normalized. Both tables come from one PCG64 stream seeded by ``seed``,
    projection first.
    """
    if min(input_dims, proj_dims, num_codewords) <= 0:
        raise QuantizerError("codebook dimensions must be positive")
    if not 0 <= seed < 2**64:
        raise QuantizerError("seed must fit in 64 unsigned bits")
    rng = np.random.default_rng(seed)
    projection = rng.standard_normal((input_dims, proj_dims))
    codewords = rng.uniform(-1.0, 1.0, size=(num_codewords, proj_dims))
    codewords /= np.linalg.norm(codewords, axis=1, keepdims=True)
    projection.flags.writeable = False
    codewords.flags.writeable = False
    return Codebook(seed, input_dims, proj_dims, num_codewords, projection, codewords)


def _rows(feat) -> np.ndarray:
    return feat.data if isinstance(feat, FeatureMatrix) else np.atleast_2d(np.asarray(feat, dtype=np.float64))


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm > _EPS, norm, 1.0)


def project(feat, cb: Codebook, normalize_input: bool = True, stats=None) -> np.ndarray:
    """``projection^T x`` per frame, after optional global standardization
    (``stats = (mean, std)``) and per-frame L2 normalization."""
    x = _rows(feat)
    if x.shape[1] != cb.input_dims:
        raise QuantizerError(f"feature dims {x.shape[1]} != codebook input dims {cb.input_dims}")
    if stats is not None:
        mean, std = stats
        x = (x - mean) / np.maximum(std, _EPS)
    if normalize_input:
        x = _l2_normalize(x)
    return x @ cb.projection


def tokenize(feat, cb: Codebook, normalize_input: bool = True, stats=None, chunk: int = 512) -> np.ndarray:
    """Nearest unit codeword to each L2-normalized projected frame.

    Ties resolve to the lowest codeword index.
    """
    z = _l2_normalize(project(feat, cb, normalize_input, stats))
    c = cb.codewords
    c_sq = np.einsum("ij,ij->i", c, c)
    labels = np.empty(len(z), dtype=np.int64)
    for start in range(0, len(z), chunk):
        zc = z[start:start + chunk]
        d = np.einsum("ij,ij->i", zc, zc)[:, None] - 2.0 * zc @ c.T + c_sq[None, :]
        labels[start:start + chunk] = np.argmin(d, axis=1)
    return labels


# -- FSQ ---------------------------------------------------------------------


@dataclass(frozen=True)
class FsqConfig:
    channels: int = 5
    levels: int = 6

    @property
    def half(self) -> int:
        return self.levels // 2

    @property
    def base(self) -> int:
        """Attainable integer values per channel: ``2 * floor(L/2) + 1``."""
        return 2 * self.half + 1

    @property
    def vocab_size(self) -> int:
        return self.base**self.channels


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def fsq_codes(z: np.ndarray, cfg: FsqConfig) -> np.ndarray:
    """Vectorized ``round(floor(L/2) * tanh(z))`` over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cfg.channels:
        raise QuantizerError(f"expected {cfg.channels} channels, got {z.shape[-1]}")
    return _round_half_away(cfg.half * np.tanh(z)).astype(np.int64)


def fsq_index(codes: np.ndarray, cfg: FsqConfig) -> np.ndarray:
    """Little-endian base-``cfg.base`` packing of shifted codes."""
    weights = cfg.base ** np.arange(cfg.channels, dtype=np.int64)
    return (np.asarray(codes, dtype=np.int64) + cfg.half) @ weights


def fsq_decode(index, cfg: FsqConfig) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if np.any((index < 0) | (index >= cfg.vocab_size)):
        raise QuantizerError("FSQ index out of range")
    digits = (index[..., None] // cfg.base ** np.arange(cfg.channels, dtype=np.int64)) % cfg.base
    return digits - cfg.half


def fsq_quantize(z, cfg: FsqConfig) -> tuple[np.ndarray, int]:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or not np.all(np.isfinite(z)):
        raise QuantizerError("fsq_quantize expects one finite vector")
    code = fsq_codes(z, cfg)
    return code, int(fsq_index(code, cfg))


def fsq_tokenize(feat, cb: Codebook, cfg: FsqConfig, normalize_input: bool = True, stats=None) -> np.ndarray:
    if cb.proj_dims != cfg.channels:
        raise QuantizerError("FSQ projection width must equal the channel count")
    return fsq_index(fsq_codes(project(feat, cb, normalize_input, stats), cfg), cfg)


# -- banks and targets -------------------------------------------------------


@dataclass
class QuantizerHead:
    feature_name: str
    codebook: Codebook
    fsq: FsqConfig | None = None

    @property
    def vocab_size(self) -> int:
        return self.fsq.vocab_size if self.fsq else self.codebook.num_codewords

    def tokenize(self, feat, normalize_input: bool = True, stats=None) -> np.ndarray:
        if self.fsq:
            return fsq_tokenize(feat, self.codebook, self.fsq, normalize_input, stats)
        return tokenize(feat, self.codebook, normalize_input, stats)


@dataclass
class QuantizerBank:
    heads: list[QuantizerHead]
    frame_rate: Fraction
    normalize_input: bool = True

    def __post_init__(self):
        self.frame_rate = as_rate(self.frame_rate)
        seeds = [h.codebook.seed for h in self.heads]
        if len(set(seeds)) != len(seeds):
            raise QuantizerError("head seeds must be pairwise distinct")
        if not self.heads:
            raise QuantizerError("a bank needs at least one head")

    @property
    def vocab_sizes(self) -> list[int]:
        return [h.vocab_size for h in self.heads]

    @property
    def feature_names(self) -> list[str]:
        return [h.feature_name for h in self.heads]


def build_bank(feature_names, input_dims: dict, seeds, frame_rate, *, proj_dims: int = 16,
               num_codewords: int = 8192, fsq: FsqConfig | None = None,
               normalize_input: bool = True) -> QuantizerBank:
    heads = []
    for name, seed in zip(feature_names, seeds):
        if fsq is not None:
            cb = build_codebook(seed, input_dims[name], fsq.channels, 1)
        else:
            cb = build_codebook(seed, input_dims[name], proj_dims, num_codewords)
        heads.append(QuantizerHead(name, cb, fsq))
    return QuantizerBank(heads, frame_rate, normalize_input)


@dataclass
class TargetTensor:
    labels: np.ndarray
    head_vocab_sizes: list[int]
    head_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2 or self.labels.shape[1] != len(self.head_vocab_sizes):
            raise QuantizerError("labels must be frames x heads")
        vocab = np.asarray(self.head_vocab_sizes)
        if np.any(self.labels < 0) or np.any(self.labels >= vocab[None, :]):
            raise QuantizerError("label outside head vocabulary")

    @property
    def frames(self) -> int:
        return self.labels.shape[0]

    @property
    def heads(self) -> int:
        return self.labels.shape[1]

    def crop(self, start: int, length: int) -> "TargetTensor":
        return TargetTensor(self.labels[start:start + length], self.head_vocab_sizes, self.head_names)


def tokenize_multi(feats: dict, bank: QuantizerBank, stats: dict | None = None) -> TargetTensor:
    """One label column per bank head, on the bank's frame grid.

    Features are resampled to ``bank.frame_rate`` and truncated to the
    shortest; frame counts may differ by at most one before truncation.
    """
    aligned = {}
    for head in bank.heads:
        if head.feature_name not in feats:
            raise QuantizerError(f"missing feature {head.feature_name!r} for quantizer head")
        if head.feature_name not in aligned:
            feat = feats[head.feature_name]
            if feat.frame_rate != bank.frame_rate:
                feat = resample_frames(feat, bank.frame_rate)
            aligned[head.feature_name] = feat
    counts = [f.frames for f in aligned.values()]
    if max(counts) - min(counts) > 1:
        raise QuantizerError(f"frame counts diverge after resampling: {counts}")
    n = min(counts)
    columns = []
    for head in bank.heads:
        head_stats = stats.get(head.feature_name) if stats else None
        columns.append(head.tokenize(aligned[head.feature_name].data[:n], bank.normalize_input, head_stats))
    return TargetTensor(np.stack(columns, axis=1), bank.vocab_sizes, bank.feature_names)


# -- usage statistics --------------------------------------------------------


@dataclass
class HeadStats:
    usage_fraction: float
    perplexity: float
    histogram: np.ndarray


def codebook_stats(targets: TargetTensor) -> list[HeadStats]:
    """Per-head codeword usage fraction and perplexity (exp of entropy, nats)."""
    if targets.frames == 0:
        raise QuantizerError("no frames to measure")
    out = []
    for h, vocab in enumerate(targets.head_vocab_sizes):
        hist = np.bincount(targets.labels[:, h], minlength=vocab)
        p = hist[hist > 0] / targets.frames
        entropy = float(-(p * np.log(p)).sum())
        out.append(HeadStats(np.count_nonzero(hist) / vocab, float(np.exp(entropy)), hist))
    return out
