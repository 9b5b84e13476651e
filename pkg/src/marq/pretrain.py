"""Masked-token pre-training loop: batching, AdamW, warm-up + cosine schedule, checkpoints.

All per-step randomness (batch choice, crops, masks, noise, dropout) is
derived from ``(seed, step, item)``, so a run resumed from a checkpoint
replays exactly the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import (Batch, EncoderConfig, EncoderParams, OptimizerState, encode, init_params,
                      load_checkpoint, loss_and_gradient, save_checkpoint)
from .features import FeatureMatrix, round_half_up
from .masking import apply_mask_array, make_mask
from .quantizers import TargetTensor
from .seeding import derive_seed

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    warmup_steps: int = 100
    max_lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 8
    segment_seconds: float = 4.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_grad: bool = False
    clip_threshold: float = 1.0
    ema_decay: float = 0.98

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.steps:
            raise TrainingError("need 0 <= warmup_steps < steps")
        if self.max_lr <= 0:
            raise TrainingError("max_lr must be positive")


@dataclass
class MaskConfig:
    chunk_seconds: float = 0.4
    target_fraction: float = 0.6
    strategy: str = "gaussian_noise"
    noise_std: float = 1.0


@dataclass
class ClipData:
    """Encoder input frames and their targets on a shared frame grid."""

    clip_id: str
    inputs: FeatureMatrix
    targets: TargetTensor

    def __post_init__(self):
        n = min(self.inputs.frames, self.targets.frames)
        if abs(self.inputs.frames - self.targets.frames) > 1:
            raise TrainingError(f"{self.clip_id}: inputs and targets differ in length")
        self.inputs = self.inputs.crop(0, n)
        self.targets = self.targets.crop(0, n)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``max_lr``, then half-cosine decay to zero at ``steps``."""
    if step < cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.max_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def decay_mask(params: EncoderParams) -> np.ndarray:
    """1 for matrix weights, 0 for biases and norm parameters."""
    return np.concatenate([
        np.full(int(np.prod(shape)), 1.0 if len(shape) >= 2 else 0.0) for _, shape, _ in params.specs
    ])


def adamw_update(theta: np.ndarray, grad: np.ndarray, opt: OptimizerState, lr: float, cfg: TrainConfig,
                 wd_mask: np.ndarray) -> np.ndarray:
    """One decoupled-weight-decay Adam step; mutates ``opt`` and returns new parameters."""
    opt.step += 1
    opt.m = cfg.beta1 * opt.m + (1.0 - cfg.beta1) * grad
    opt.v = cfg.beta2 * opt.v + (1.0 - cfg.beta2) * grad * grad
    m_hat = opt.m / (1.0 - cfg.beta1**opt.step)
    v_hat = opt.v / (1.0 - cfg.beta2**opt.step)
    return theta - lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * wd_mask * theta)


@dataclass
class TrainState:
    step: int
    params: EncoderParams
    optimizer: OptimizerState
    loss_ema: float | None = None
    acc_ema: list | None = None
    log: list = field(default_factory=list)

    def save(self, path, extra: dict | None = None) -> None:
        meta = dict(extra or {})
        meta["state"] = {"step": self.step, "loss_ema": self.loss_ema, "acc_ema": self.acc_ema}
        save_checkpoint(path, self.params, self.optimizer, meta)

    @classmethod
    def load(cls, path) -> tuple["TrainState", dict]:
        params, opt, extra = load_checkpoint(path)
        if opt is None:
            raise TrainingError(f"{path} carries no optimizer state")
        st = extra.get("state", {})
        return cls(opt.step, params, opt, st.get("loss_ema"), st.get("acc_ema")), extra


def input_statistics(clips) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([c.inputs.data for c in clips])
    std = x.std(axis=0)
    return x.mean(axis=0), np.where(std > 1e-8, std, 1.0)


def segment_frames(clips, cfg: TrainConfig) -> int:
    rate = clips[0].inputs.frame_rate
    want = max(1, round_half_up(rate * cfg.segment_seconds))
    return min(want, min(c.inputs.frames for c in clips))


def make_batch(clips, step: int, params: EncoderParams, train_cfg: TrainConfig, mask_cfg: MaskConfig,
               seg: int) -> Batch:
    """Seeded batch for optimizer step ``step`` (0-based): crops, masks and corruption."""
    seed = train_cfg.seed
    rng = np.random.default_rng(derive_seed(seed, f"batch/{step}"))
    picks = rng.integers(0, len(clips), size=train_cfg.batch_size)
    xs, ys, ms = [], [], []
    for i, ci in enumerate(picks):
        clip = clips[ci]
        start = int(rng.integers(0, clip.inputs.frames - seg + 1))
        x = params.standardize(clip.inputs.data[start:start + seg])
        plan = make_mask(seg, clip.inputs.frame_rate, mask_cfg.chunk_seconds, mask_cfg.target_fraction,
                         derive_seed(seed, f"mask/{step}/{i}"))
        xs.append(apply_mask_array(x, plan.mask, mask_cfg.strategy, mask_cfg.noise_std,
                                   derive_seed(seed, f"noise/{step}/{i}")))
        ys.append(clip.targets.labels[start:start + seg])
        ms.append(plan.mask)
    return Batch(np.stack(xs), np.stack(ys), np.stack(ms))


def masked_accuracy(logits: list, labels: np.ndarray, mask: np.ndarray) -> list[float]:
    sel = np.asarray(mask, dtype=bool)
    return [float((lg.argmax(axis=-1)[sel] == labels[..., j][sel]).mean()) for j, lg in enumerate(logits)]


def init_state(clips, enc_cfg: EncoderConfig, train_cfg: TrainConfig) -> TrainState:
    params = init_params(enc_cfg, derive_seed(train_cfg.seed, "init"))
    params.input_mean, params.input_std = input_statistics(clips)
    opt = OptimizerState(0, np.zeros(params.size), np.zeros(params.size))
    return TrainState(0, params, opt)


def train(clips, enc_cfg: EncoderConfig, train_cfg: TrainConfig, mask_cfg: MaskConfig | None = None,
          state: TrainState | None = None, stop_at: int | None = None, log_path=None) -> TrainState:
    """Run optimizer steps ``state.step + 1 .. stop_at`` (default ``train_cfg.steps``).

    Each step appends ``{"step", "lr", "loss", "acc"}`` to ``state.log`` and,
    when ``log_path`` is given, to that JSON-lines file. ``loss`` and ``acc``
    are measured on the step's batch before the update.
    """
    if not clips:
        raise TrainingError("no training clips")
    mask_cfg = mask_cfg or MaskConfig()
    if state is None:
        state = init_state(clips, enc_cfg, train_cfg)
    stop_at = train_cfg.steps if stop_at is None else min(stop_at, train_cfg.steps)
    seg = segment_frames(clips, train_cfg)
    wd_mask = decay_mask(state.params)
    theta = state.params.flatten()
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.step < stop_at:
            s = state.step
            batch = make_batch(clips, s, state.params, train_cfg, mask_cfg, seg)
            loss, grad, trace = loss_and_gradient(batch, state.params, enc_cfg,
                                                  seed=derive_seed(train_cfg.seed, f"dropout/{s}"),
                                                  return_trace=True)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingError(f"non-finite loss {loss} at step {s + 1}; "
                                    f"grad norm {np.linalg.norm(grad):.3g}")
            if train_cfg.clip_grad:
                norm = np.linalg.norm(grad)
                if norm > train_cfg.clip_threshold:
                    grad = grad * (train_cfg.clip_threshold / norm)
            lr = lr_at(s + 1, train_cfg)
            theta = adamw_update(theta, grad, state.optimizer, lr, train_cfg, wd_mask)
            new_params = state.params.with_flat(theta)
            new_params.input_mean, new_params.input_std = state.params.input_mean, state.params.input_std
            state.params = new_params
            state.step = s + 1
            acc = masked_accuracy(trace.logits, batch.labels, batch.mask)
            d = train_cfg.ema_decay
            state.loss_ema = loss if state.loss_ema is None else d * state.loss_ema + (1 - d) * loss
            state.acc_ema = acc if state.acc_ema is None else [d * a + (1 - d) * b
                                                               for a, b in zip(state.acc_ema, acc)]
            record = {"step": state.step, "lr": lr, "loss": loss, "acc": acc}
            state.log.append(record)
            if fh:
                fh.write(json.dumps(record) + "\n")
            if state.step % 100 == 0:
                log.info("step %d lr %.3g loss %.4f acc %s", state.step, lr, loss,
                         " ".join(f"{a:.3f}" for a in acc))
    finally:
        if fh:
            fh.close()
    return state


def validate(params: EncoderParams, clips, mask_cfg: MaskConfig | None = None, seed: int = 0) -> dict:
    """Inference-mode masked-token accuracy per head (and their mean) on full clips."""
    mask_cfg = mask_cfg or MaskConfig()
    if not clips:
        raise TrainingError("no validation clips")
    heads = len(params.cfg.vocab_sizes)
    hits = np.zeros(heads)
    total = 0
    for i, clip in enumerate(clips):
        x = params.standardize(clip.inputs.data)
        plan = make_mask(clip.inputs.frames, clip.inputs.frame_rate, mask_cfg.chunk_seconds,
                         mask_cfg.target_fraction, derive_seed(seed, f"valid-mask/{i}"))
        if not plan.mask.any():
            continue
        x = apply_mask_array(x, plan.mask, mask_cfg.strategy, mask_cfg.noise_std,
                             derive_seed(seed, f"valid-noise/{i}"))
        trace = encode(x, params)
        labels = clip.targets.labels
        for j, lg in enumerate(trace.logits):
            hits[j] += np.count_nonzero(lg[0].argmax(axis=-1)[plan.mask] == labels[plan.mask, j])
        total += int(plan.mask.sum())
    per_head = (hits / max(total, 1)).tolist()
    return {"per_head": per_head, "mean": float(np.mean(per_head)), "masked_frames": total}


def write_metrics(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def train_config_echo(train_cfg: TrainConfig, mask_cfg: MaskConfig) -> dict:
    return {"train": asdict(train_cfg), "mask": asdict(mask_cfg)}
