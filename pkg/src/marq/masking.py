"""Chunked span masking on a fixed chunk grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureMatrix, as_rate, round_half_up


class MaskError(ValueError):
    pass


@dataclass
class MaskPlan:
    frames: int
    chunk_frames: int
    mask: np.ndarray
    target_fraction: float
    rng_seed: int

    @property
    def masked_fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def num_chunks(self) -> int:
        return -(-self.frames // self.chunk_frames)

    def chunk_bounds(self) -> list[tuple[int, int]]:
        """``(start, stop)`` of every masked chunk, in order."""
        out = []
        for c in range(self.num_chunks):
            start = c * self.chunk_frames
            if self.mask[start]:
                out.append((start, min(start + self.chunk_frames, self.frames)))
        return out


def chunk_frames_for(frame_rate, chunk_seconds: float = 0.4) -> int:
    return max(1, round_half_up(as_rate(frame_rate) * as_rate(chunk_seconds)))


def make_mask(frames: int, frame_rate, chunk_seconds: float = 0.4, target_fraction: float = 0.6,
              seed: int = 0) -> MaskPlan:
    """Mask ``round(target_fraction * num_chunks)`` grid chunks chosen without replacement.

    The sequence is tiled into ``ceil(frames / chunk_frames)`` chunks, where
    ``chunk_frames = round(chunk_seconds * frame_rate)`` (halves round up);
    the final chunk may be short.
    """
    if frames < 1:
        raise MaskError("frames must be >= 1")
    if not 0.0 < target_fraction < 1.0:
        raise MaskError(f"target_fraction must lie in (0, 1), got {target_fraction}")
    chunk = chunk_frames_for(frame_rate, chunk_seconds)
    n_chunks = -(-frames // chunk)
    n_masked = round_half_up(target_fraction * n_chunks)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n_chunks, size=n_masked, replace=False)
    chunk_mask = np.zeros(n_chunks, dtype=bool)
    chunk_mask[chosen] = True
    mask = np.repeat(chunk_mask, chunk)[:frames]
    return MaskPlan(frames, chunk, mask, target_fraction, seed)


def apply_mask_array(x: np.ndarray, mask: np.ndarray, strategy: str = "gaussian_noise",
                     noise_std: float = 1.0, seed: int = 0) -> np.ndarray:
    if x.shape[0] != mask.shape[0]:
        raise MaskError(f"feature has {x.shape[0]} frames, mask has {mask.shape[0]}")
    out = x.copy()
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return out
    rng = np.random.default_rng(seed)
    if strategy == "gaussian_noise":
        out[idx] = rng.normal(0.0, noise_std, size=(idx.size, x.shape[1]))
    elif strategy == "waveform_shuffle":
        # distinct source rows, drawn from the whole matrix
        out[idx] = x[rng.permutation(x.shape[0])[:idx.size]]
    else:
        raise MaskError(f"unknown masking strategy {strategy!r}")
    return out


def apply_mask(feat: FeatureMatrix, plan: MaskPlan, strategy: str = "gaussian_noise",
               noise_std: float = 1.0, seed: int = 0) -> FeatureMatrix:
    if feat.frames != plan.frames:
        raise MaskError(f"feature has {feat.frames} frames, plan has {plan.frames}")
    return FeatureMatrix(feat.feature_name, feat.frame_rate,
                         apply_mask_array(feat.data, plan.mask, strategy, noise_std, seed))
