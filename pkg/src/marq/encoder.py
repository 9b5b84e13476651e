"""Toy-scale Conformer encoder with rotary attention and DeepNorm residuals.

Block layout (post-norm, DeepNorm residual scaling ``alpha``)::

    x = LN(alpha * x + 0.5 * FFN(x))
    x = LN(alpha * x + MHSA_rope(x))
    x = LN(alpha * x + Conv(x))
    x = LN(alpha * x + 0.5 * FFN(x))

``Conv`` is pointwise (D -> 2D) -> GLU -> depthwise (kernel K) -> LN -> swish
-> pointwise (D -> D). The usual batch norm inside the convolution module is
replaced by layer norm so that batch items never interact.

Checkpoint format ``MARQCK01`` (little-endian)::

    magic      8 bytes b"MARQCK01"
    header_len u32
    header     JSON: encoder config, parameter/buffer names and shapes,
               optimizer flag, free-form "extra" (train config, metrics state)
    params     P float64 (flat parameter vector)
    buffers    float64 (input standardization mean and std)
    optimizer  optional: u64 step, then first and second moments, P float64 each
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .features import FeatureMatrix

CHECKPOINT_MAGIC = b"MARQCK01"


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_dims: int = 64
    layers: int = 2
    model_dims: int = 64
    heads: int = 4
    conv_kernel: int = 15
    ffn_expansion: float = 4.0
    dropout: float = 0.2
    deepnorm_alpha: float = 2.632
    deepnorm_beta: float = 0.022
    vocab_sizes: list = field(default_factory=lambda: [8192])
    init_std: float = 0.02
    zero_init_heads: bool = False
    rope_base: float = 10000.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.model_dims % self.heads:
            raise EncoderError("model_dims must be divisible by heads")
        if (self.model_dims // self.heads) % 2:
            raise EncoderError("per-head dims must be even for rotary embedding")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError("dropout must lie in [0, 1)")
        if self.conv_kernel % 2 == 0:
            raise EncoderError("conv_kernel must be odd")
        self.vocab_sizes = [int(v) for v in self.vocab_sizes]

    @property
    def ffn_dims(self) -> int:
        return int(round(self.model_dims * self.ffn_expansion))


# -- parameters --------------------------------------------------------------


def param_specs(cfg: EncoderConfig) -> list[tuple[str, tuple, str]]:
    """``(name, shape, kind)`` in canonical order.

    kind: ``w`` plain weight, ``r`` residual-branch weight (DeepNorm scaled),
    ``h`` classifier weight, ``zero`` bias / LN shift, ``one`` LN gain.
    """
    D, F, K = cfg.model_dims, cfg.ffn_dims, cfg.conv_kernel
    specs = [("input.w", (cfg.input_dims, D), "w"), ("input.b", (D,), "zero")]

    def ffn(prefix):
        return [(f"{prefix}.w1", (D, F), "r"), (f"{prefix}.b1", (F,), "zero"),
                (f"{prefix}.w2", (F, D), "r"), (f"{prefix}.b2", (D,), "zero")]

    def norm(prefix):
        return [(f"{prefix}.g", (D,), "one"), (f"{prefix}.b", (D,), "zero")]

    for i in range(cfg.layers):
        p = f"layer{i}"
        specs += ffn(f"{p}.ffn1") + norm(f"{p}.ffn1_norm")
        for m in "qkvo":
            specs += [(f"{p}.attn.w{m}", (D, D), "r"), (f"{p}.attn.b{m}", (D,), "zero")]
        specs += norm(f"{p}.attn_norm")
        specs += [(f"{p}.conv.pw1.w", (D, 2 * D), "r"), (f"{p}.conv.pw1.b", (2 * D,), "zero"),
                  (f"{p}.conv.dw.w", (K, D), "r"), (f"{p}.conv.dw.b", (D,), "zero")]
        specs += norm(f"{p}.conv.inner_norm")
        specs += [(f"{p}.conv.pw2.w", (D, D), "r"), (f"{p}.conv.pw2.b", (D,), "zero")]
        specs += norm(f"{p}.conv_norm")
        specs += ffn(f"{p}.ffn2") + norm(f"{p}.ffn2_norm")
    for h, v in enumerate(cfg.vocab_sizes):
        specs += [(f"head{h}.w", (D, v), "h"), (f"head{h}.b", (v,), "zero")]
    return specs


class EncoderParams:
    """Named parameter tensors with a flat-vector view, plus input-standardization buffers."""

    def __init__(self, cfg: EncoderConfig, tensors: dict, input_mean=None, input_std=None):
        self.cfg = cfg
        self.specs = param_specs(cfg)
        self.tensors = tensors
        for name, shape, _ in self.specs:
            if tensors[name].shape != shape:
                raise EncoderError(f"{name}: expected {shape}, got {tensors[name].shape}")
        self.input_mean = np.zeros(cfg.input_dims) if input_mean is None else np.asarray(input_mean, float)
        self.input_std = np.ones(cfg.input_dims) if input_std is None else np.asarray(input_std, float)

    @property
    def names(self) -> list[str]:
        return [s[0] for s in self.specs]

    @property
    def size(self) -> int:
        return sum(int(np.prod(s[1])) for s in self.specs)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in self.names])

    def with_flat(self, vec: np.ndarray) -> "EncoderParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise EncoderError(f"flat vector has length {vec.shape}, expected {self.size}")
        tensors, pos = {}, 0
        for name, shape, _ in self.specs:
            n = int(np.prod(shape))
            tensors[name] = vec[pos:pos + n].reshape(shape).copy()
            pos += n
        return EncoderParams(self.cfg, tensors, self.input_mean.copy(), self.input_std.copy())

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.input_mean) / self.input_std


def init_params(cfg: EncoderConfig, seed: int) -> EncoderParams:
    """Gaussian(0, init_std) weights; residual-branch weights multiplied by ``deepnorm_beta``.

    Every weight is drawn from the same stream in canonical order regardless
    of kind, so the unscaled draw can be regenerated with ``deepnorm_beta=1``.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind in param_specs(cfg):
        if kind in ("w", "r", "h"):
            draw = rng.standard_normal(shape) * cfg.init_std
            if kind == "r":
                draw *= cfg.deepnorm_beta
            elif kind == "h" and cfg.zero_init_heads:
                draw = np.zeros(shape)
            tensors[name] = draw
        elif kind == "one":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return EncoderParams(cfg, tensors)


# -- rotary embedding --------------------------------------------------------


def rope_tables(positions, head_dims: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    if head_dims % 2:
        raise EncoderError("rotary embedding needs an even head dimension")
    theta = base ** (-np.arange(0, head_dims, 2) / head_dims)
    angles = np.outer(np.asarray(positions, dtype=np.float64), theta)
    angles = np.repeat(angles, 2, axis=1)
    return np.cos(angles), np.sin(angles)


def rope_rotate(x: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate pairs ``(x[2i], x[2i+1])`` of each row by ``position * base**(-2i/d)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cos, sin = rope_tables(positions, x.shape[-1], base)
    return ad.rope(ad.Tensor(x), cos, sin).data


# -- forward -----------------------------------------------------------------


@dataclass
class ForwardTrace:
    layer_outputs: list
    logits: list
    dropout_masks: list
    per_head_losses: list = field(default_factory=list)

    @property
    def embeddings(self) -> np.ndarray:
        return self.layer_outputs[-1]


class _Dropper:
    def __init__(self, p: float, seed):
        self.p = p
        self.rng = np.random.default_rng(seed) if seed is not None and p > 0 else None
        self.masks = []

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        if self.rng is None:
            return x
        keep = self.rng.random(x.shape) >= self.p
        self.masks.append(keep)
        return ad.dropout(x, keep, self.p)


def _linear(x, P, prefix):
    return x @ P[f"{prefix}.w"] + P[f"{prefix}.b"]


def _ffn(x, P, prefix, drop):
    h = drop(ad.swish(x @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"]))
    return drop(h @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"])


def _attention(x, P, prefix, cfg, cos, sin, drop):
    B, T, D = x.shape
    H = cfg.heads
    dh = D // H

    def split(t):
        return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q = ad.rope(split(x @ P[f"{prefix}.wq"] + P[f"{prefix}.bq"]), cos, sin)
    k = ad.rope(split(x @ P[f"{prefix}.wk"] + P[f"{prefix}.bk"]), cos, sin)
    v = split(x @ P[f"{prefix}.wv"] + P[f"{prefix}.bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    ctx = ad.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, T, D)
    return drop(ctx @ P[f"{prefix}.wo"] + P[f"{prefix}.bo"])


def _conv(x, P, prefix, cfg, drop):
    h = ad.glu(_linear(x, P, f"{prefix}.pw1"), axis=-1)
    h = ad.depthwise_conv1d(h, P[f"{prefix}.dw.w"], P[f"{prefix}.dw.b"])
    h = ad.swish(ad.layer_norm(h, P[f"{prefix}.inner_norm.g"], P[f"{prefix}.inner_norm.b"], cfg.ln_eps))
    return drop(_linear(h, P, f"{prefix}.pw2"))


def _residual(x, branch, P, norm, cfg, scale=1.0):
    if scale != 1.0:
        branch = branch * scale
    return ad.layer_norm(x * cfg.deepnorm_alpha + branch, P[f"{norm}.g"], P[f"{norm}.b"], cfg.ln_eps)


def _forward(x: np.ndarray, P: dict, cfg: EncoderConfig, drop: _Dropper, upto_layer: int | None = None):
    B, T, _ = x.shape
    cos, sin = rope_tables(np.arange(T), cfg.model_dims // cfg.heads, cfg.rope_base)
    h = _linear(ad.Tensor(x), P, "input")
    outputs = [h]
    last = cfg.layers if upto_layer is None else upto_layer
    for i in range(last):
        p = f"layer{i}"
        h = _residual(h, _ffn(h, P, f"{p}.ffn1", drop), P, f"{p}.ffn1_norm", cfg, 0.5)
        h = _residual(h, _attention(h, P, f"{p}.attn", cfg, cos, sin, drop), P, f"{p}.attn_norm", cfg)
        h = _residual(h, _conv(h, P, f"{p}.conv", cfg, drop), P, f"{p}.conv_norm", cfg)
        h = _residual(h, _ffn(h, P, f"{p}.ffn2", drop), P, f"{p}.ffn2_norm", cfg, 0.5)
        outputs.append(h)
    logits = []
    if upto_layer is None:
        logits = [h @ P[f"head{j}.w"] + P[f"head{j}.b"] for j in range(len(cfg.vocab_sizes))]
    return outputs, logits


def _as_batch(feat, cfg: EncoderConfig) -> np.ndarray:
    x = feat.data if isinstance(feat, FeatureMatrix) else np.asarray(feat, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != cfg.input_dims:
        raise EncoderError(f"expected (..., T, {cfg.input_dims}) input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise EncoderError("non-finite encoder input")
    return x


def encode(feat, params: EncoderParams, cfg: EncoderConfig | None = None, train_mode: bool = False,
           dropout_seed=None) -> ForwardTrace:
    """Run the encoder on already standardized (and possibly masked) frames.

    ``feat`` is a FeatureMatrix, a ``(T, dims)`` or a ``(B, T, dims)`` array.
    Dropout is active only with ``train_mode`` and a ``dropout_seed``.
    """
    cfg = cfg or params.cfg
    x = _as_batch(feat, cfg)
    P = {n: ad.Tensor(v) for n, v in params.tensors.items()}
    drop = _Dropper(cfg.dropout if train_mode else 0.0, dropout_seed)
    outputs, logits = _forward(x, P, cfg, drop)
    return ForwardTrace([o.data for o in outputs], [lg.data for lg in logits], drop.masks)


def embeddings_for_probe(feat, params: EncoderParams, cfg: EncoderConfig | None = None,
                         layer_index: int | None = None) -> np.ndarray:
    """Inference-mode activations after ``layer_index`` blocks (0 = input projection).

    ``feat`` holds clean, unstandardized frames; returns ``frames x model_dims``.
    """
    cfg = cfg or params.cfg
    layer_index = cfg.layers if layer_index is None else layer_index
    if not 0 <= layer_index <= cfg.layers:
        raise EncoderError(f"layer_index {layer_index} outside [0, {cfg.layers}]")
    x = _as_batch(feat, cfg)
    if x.shape[0] != 1:
        raise EncoderError("embeddings_for_probe takes one clip")
    P = {n: ad.Tensor(v) for n, v in params.tensors.items()}
    outputs, _ = _forward(params.standardize(x), P, cfg, _Dropper(0.0, None), upto_layer=layer_index)
    return outputs[layer_index].data[0]


@dataclass
class Batch:
    """Corrupted standardized inputs ``(B, T, dims)``, labels ``(B, T, heads)``, mask ``(B, T)``."""

    inputs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray


def loss_and_gradient(batch: Batch, params: EncoderParams, cfg: EncoderConfig | None = None, seed=None,
                      train_mode: bool = True, return_trace: bool = False):
    """Mean over heads of the mean masked-frame cross-entropy, and its gradient.

    Returns ``(loss, flat_grad)`` or ``(loss, flat_grad, trace)``.
    """
    cfg = cfg or params.cfg
    weights = np.asarray(batch.mask, dtype=np.float64)
    if weights.sum() == 0:
        raise EncoderError("batch has no masked frames")
    labels = np.asarray(batch.labels)
    if labels.shape[-1] != len(cfg.vocab_sizes):
        raise EncoderError("label columns do not match classifier heads")
    x = _as_batch(batch.inputs, cfg)
    P = {n: ad.Tensor(v, requires_grad=True) for n, v in params.tensors.items()}
    drop = _Dropper(cfg.dropout if train_mode else 0.0, seed)
    outputs, logits = _forward(x, P, cfg, drop)
    head_losses = [ad.masked_cross_entropy(lg, labels[..., j], weights) for j, lg in enumerate(logits)]
    total = head_losses[0]
    for hl in head_losses[1:]:
        total = total + hl
    total = total * (1.0 / len(head_losses))
    ad.backward(total)
    grad = np.concatenate([
        (P[n].grad if P[n].grad is not None else np.zeros(P[n].shape)).ravel() for n in params.names
    ])
    loss = float(total.data)
    if not return_trace:
        return loss, grad
    trace = ForwardTrace([o.data for o in outputs], [lg.data for lg in logits], drop.masks,
                         [float(hl.data) for hl in head_losses])
    return loss, grad, trace


# -- checkpoints -------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int
    m: np.ndarray
    v: np.ndarray


def save_checkpoint(path, params: EncoderParams, optimizer: OptimizerState | None = None,
                    extra: dict | None = None) -> None:
    header = {
        "encoder": asdict(params.cfg),
        "params": [[n, list(s)] for n, s, _ in params.specs],
        "buffers": ["input_mean", "input_std"],
        "optimizer": optimizer is not None,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(raw)), raw,
             params.flatten().astype("<f8").tobytes(),
             params.input_mean.astype("<f8").tobytes(), params.input_std.astype("<f8").tobytes()]
    if optimizer is not None:
        parts += [struct.pack("<Q", optimizer.step), optimizer.m.astype("<f8").tobytes(),
                  optimizer.v.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[EncoderParams, OptimizerState | None, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise EncoderError(f"{path}: not a MARQCK01 checkpoint")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    header = json.loads(buf[12:12 + hlen])
    cfg = EncoderConfig(**header["encoder"])
    template = init_params(cfg, 0)
    pos = 12 + hlen
    P, D = template.size, cfg.input_dims

    def take(n):
        nonlocal pos
        if pos + 8 * n > len(buf):
            raise EncoderError(f"{path}: truncated checkpoint")
        out = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        return out

    params = template.with_flat(take(P))
    params.input_mean = take(D)
    params.input_std = take(D)
    optimizer = None
    if header["optimizer"]:
        (step,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        optimizer = OptimizerState(int(step), take(P), take(P))
    return params, optimizer, header["extra"]
