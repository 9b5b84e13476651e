"""MLP probes over frozen embeddings and the downstream metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .pretrain import TrainConfig, adamw_update
from .encoder import OptimizerState

log = logging.getLogger(__name__)

TASK_KINDS = ("track_multilabel", "track_multiclass", "track_regression", "frame_multiclass",
              "frame_binary_events")


class ProbeError(ValueError):
    pass


@dataclass
class ProbeConfig:
    task_kind: str = "track_multiclass"
    hidden_units: int = 512
    layer_index: int | None = None
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    frame_rate: float = 15.625
    threshold: float = 0.5
    min_gap: float = 0.3
    tolerance: float = 0.07

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ProbeError(f"unknown probe task kind {self.task_kind!r}")
        if self.hidden_units <= 0:
            raise ProbeError("hidden_units must be positive")


@dataclass
class ProbeResult:
    metric_name: str
    value: float
    per_class: dict = field(default_factory=dict)

    def report(self, task: str, cfg: ProbeConfig, seed: int) -> dict:
        return {"task": task, "metric": self.metric_name, "value": self.value,
                "per_class": self.per_class, "config": asdict(cfg), "seed": seed}


# -- metrics -----------------------------------------------------------------


def pool_track(embeddings) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ProbeError("pool_track needs a non-empty frames x dims matrix")
    return x.mean(axis=0)


def average_precision(scores, truth) -> float:
    """Mean of precision@k over the ranks of positives.

    Items are ranked by descending score; equal scores keep their input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    order = np.argsort(-scores, kind="stable")
    hits = truth[order]
    if not hits.any():
        raise ProbeError("average precision undefined without positives")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(scores, truths, return_details: bool = False):
    """Macro mAP over classes that have at least one positive."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if scores.size == 0:
        raise ProbeError("empty input")
    if scores.ndim == 1:
        scores, truths = scores[:, None], truths[:, None]
    per_class, skipped = {}, []
    for c in range(scores.shape[1]):
        if not truths[:, c].any():
            skipped.append(c)
            continue
        per_class[c] = average_precision(scores[:, c], truths[:, c])
    if skipped:
        log.warning("mAP: skipped %d class(es) without positives: %s", len(skipped), skipped)
    if not per_class:
        raise ProbeError("no class has a positive example")
    value = float(np.mean(list(per_class.values())))
    return (value, per_class, skipped) if return_details else value


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.size == 0:
        raise ProbeError("empty input")
    return float((pred == truth).mean())


def event_f_measure(predicted_times, reference_times, tolerance: float = 0.07) -> float:
    """F1 of a one-to-one matching within ``+-tolerance`` seconds.

    Walks the sorted lists in time order, pairing each reference with the
    earliest unmatched prediction inside its window. On sorted inputs this
    greedy pass yields a maximum matching.
    """
    pred = np.sort(np.asarray(predicted_times, dtype=np.float64))
    ref = np.sort(np.asarray(reference_times, dtype=np.float64))
    if len(pred) == 0 and len(ref) == 0:
        return 1.0
    if len(pred) == 0 or len(ref) == 0:
        return 0.0
    matched, j = 0, 0
    for r in ref:
        while j < len(pred) and r - pred[j] > tolerance:
            j += 1
        if j < len(pred) and abs(pred[j] - r) <= tolerance:
            matched += 1
            j += 1
    if matched == 0:
        return 0.0
    precision, recall = matched / len(pred), matched / len(ref)
    return 2 * precision * recall / (precision + recall)


def frame_events_to_times(probabilities, frame_rate, threshold: float = 0.5, min_gap: float = 0.3) -> list:
    """Peak picking: local maxima above ``threshold``, greedily keeping the
    highest peaks and dropping any closer than ``min_gap`` seconds to a kept one.

    A plateau counts once, at its first frame.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.size == 0:
        return []
    left = np.concatenate([[-np.inf], p[:-1]])
    right = np.concatenate([p[1:], [-np.inf]])
    peaks = np.flatnonzero((p > threshold) & (p > left) & (p >= right))
    order = peaks[np.argsort(-p[peaks], kind="stable")]
    gap_frames = min_gap * float(frame_rate)
    kept: list[int] = []
    for t in order:
        if all(abs(t - k) >= gap_frames for k in kept):
            kept.append(int(t))
    return [t / float(frame_rate) for t in sorted(kept)]


def events_to_frame_targets(times, n_frames: int, frame_rate) -> np.ndarray:
    y = np.zeros(n_frames)
    for t in times:
        i = int(math.floor(t * float(frame_rate) + 0.5))
        if 0 <= i < n_frames:
            y[i] = 1.0
    return y


# -- MLP probe ---------------------------------------------------------------


@dataclass
class ProbeModel:
    cfg: ProbeConfig
    weights: dict
    mean: np.ndarray
    std: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(0.0, ((x - self.mean) / self.std) @ self.weights["w1"] + self.weights["b1"])
        return h @ self.weights["w2"] + self.weights["b2"]


def _init_mlp(d_in: int, hidden: int, d_out: int, rng: np.random.Generator) -> dict:
    a1 = math.sqrt(6.0 / d_in)
    a2 = math.sqrt(6.0 / hidden)
    return {"w1": rng.uniform(-a1, a1, (d_in, hidden)), "b1": np.zeros(hidden),
            "w2": rng.uniform(-a2, a2, (hidden, d_out)) * 0.1, "b2": np.zeros(d_out)}


_ORDER = ("w1", "b1", "w2", "b2")


def _stack_inputs(X, cfg: ProbeConfig):
    if cfg.task_kind.startswith("track"):
        return np.stack([pool_track(x) if np.ndim(x) == 2 else np.asarray(x, float) for x in X])
    return np.concatenate([np.asarray(x, dtype=np.float64) for x in X])


def _stack_targets(X, y, cfg: ProbeConfig):
    kind = cfg.task_kind
    if kind == "track_multilabel":
        return np.asarray(y, dtype=np.float64)
    if kind == "track_regression":
        t = np.asarray(y, dtype=np.float64)
        return t[:, None] if t.ndim == 1 else t
    if kind == "track_multiclass":
        return np.asarray(y, dtype=np.int64)
    if kind == "frame_multiclass":
        return np.concatenate([np.asarray(v, dtype=np.int64) for v in y])
    return np.concatenate([events_to_frame_targets(times, len(x), cfg.frame_rate) for x, times in zip(X, y)])


def _output_dims(targets: np.ndarray, cfg: ProbeConfig, n_classes: int | None) -> int:
    if cfg.task_kind in ("track_multiclass", "frame_multiclass"):
        return n_classes or int(targets.max()) + 1
    if cfg.task_kind == "frame_binary_events":
        return 1
    return targets.shape[1]


def _loss(out: ad.Tensor, t: np.ndarray, kind: str) -> ad.Tensor:
    if kind in ("track_multiclass", "frame_multiclass"):
        return ad.masked_cross_entropy(out, t, np.ones(len(t)))
    if kind == "track_multilabel":
        return ad.binary_cross_entropy_with_logits(out, t)
    if kind == "frame_binary_events":
        return ad.binary_cross_entropy_with_logits(out, t[:, None])
    return ad.mse(out, t)


def fit_probe(X, y, cfg: ProbeConfig, seed: int, n_classes: int | None = None) -> ProbeModel:
    """Train ``linear -> ReLU -> linear`` with AdamW at a constant learning rate."""
    if len(X) != len(y):
        raise ProbeError(f"{len(X)} embeddings but {len(y)} labels")
    if len(X) == 0:
        raise ProbeError("empty training split")
    inputs = _stack_inputs(X, cfg)
    targets = _stack_targets(X, y, cfg)
    if len(inputs) != len(targets):
        raise ProbeError("frame labels do not match embedding frames")
    rng = np.random.default_rng(seed)
    mean = inputs.mean(axis=0)
    std = inputs.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    xs = (inputs - mean) / std
    weights = _init_mlp(xs.shape[1], cfg.hidden_units, _output_dims(targets, cfg, n_classes), rng)
    shapes = [weights[k].shape for k in _ORDER]
    theta = np.concatenate([weights[k].ravel() for k in _ORDER])
    opt = OptimizerState(0, np.zeros_like(theta), np.zeros_like(theta))
    steps_per_epoch = -(-len(xs) // cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    tcfg = TrainConfig(steps=total + 1, warmup_steps=0, max_lr=cfg.lr, weight_decay=cfg.weight_decay)
    wd_mask = np.concatenate([np.full(int(np.prod(s)), float(len(s) == 2)) for s in shapes])
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(xs))
        for b in range(steps_per_epoch):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            P, pos = {}, 0
            for k, s in zip(_ORDER, shapes):
                n = int(np.prod(s))
                P[k] = ad.Tensor(theta[pos:pos + n].reshape(s), requires_grad=True)
                pos += n
            h = ad.relu(ad.Tensor(xs[idx]) @ P["w1"] + P["b1"])
            loss = _loss(h @ P["w2"] + P["b2"], targets[idx], cfg.task_kind)
            ad.backward(loss)
            grad = np.concatenate([P[k].grad.ravel() for k in _ORDER])
            theta = adamw_update(theta, grad, opt, cfg.lr, tcfg, wd_mask)
    final, pos = {}, 0
    for k, s in zip(_ORDER, shapes):
        n = int(np.prod(s))
        final[k] = theta[pos:pos + n].reshape(s)
        pos += n
    return ProbeModel(cfg, final, mean, std)


def evaluate_probe(model: ProbeModel, X, y) -> ProbeResult:
    cfg = model.cfg
    kind = cfg.task_kind
    if len(X) != len(y) or len(X) == 0:
        raise ProbeError("test split empty or label/embedding count mismatch")
    if kind == "frame_binary_events":
        scores = []
        for x, times in zip(X, y):
            lg = model.logits(np.asarray(x, dtype=np.float64))[:, 0]
            probs = np.exp(-np.logaddexp(0.0, -lg))
            pred = frame_events_to_times(probs, cfg.frame_rate, cfg.threshold, cfg.min_gap)
            scores.append(event_f_measure(pred, times, cfg.tolerance))
        return ProbeResult("f_measure", float(np.mean(scores)))
    inputs = _stack_inputs(X, cfg)
    targets = _stack_targets(X, y, cfg)
    out = model.logits(inputs)
    if kind in ("track_multiclass", "frame_multiclass"):
        return ProbeResult("accuracy", accuracy(out.argmax(axis=1), targets))
    if kind == "track_multilabel":
        value, per_class, _ = mean_average_precision(out, targets, return_details=True)
        return ProbeResult("mAP", value, {str(k): v for k, v in per_class.items()})
    return ProbeResult("mse", float(((out - targets) ** 2).mean()))


def train_probe(train, test, cfg: ProbeConfig, seed: int = 0,
                n_classes: int | None = None) -> tuple[ProbeModel, ProbeResult]:
    """Fit on ``train = (X, y)`` and score on ``test = (X, y)``.

    ``X`` holds per-clip ``frames x dims`` embeddings (track tasks pool them;
    already pooled vectors are accepted). Labels: class indices
    (multiclass), multi-hot rows (multilabel), scalars or vectors
    (regression), per-frame class arrays (frame multiclass) or event-time
    lists (frame events).
    """
    model = fit_probe(train[0], train[1], cfg, seed, n_classes)
    return model, evaluate_probe(model, test[0], test[1])
