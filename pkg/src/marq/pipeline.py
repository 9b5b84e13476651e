"""Assembly of features, tokenizers and encoder configs from a PipelineConfig."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import numpy as np

from .audio_io import FeatureCacheRecord, load_audio
from .config import PipelineConfig
from .encoder import EncoderConfig
from .features import FeatureError, FeatureMatrix, check_dims, extract_feature, load_external_features, \
    resample_frames
from .pretrain import ClipData
from .quantizers import QuantizerBank, TargetTensor, build_bank, tokenize_multi
from .seeding import derive_seed

log = logging.getLogger(__name__)


def feature_dims(cfg: PipelineConfig, name: str) -> int:
    fc = cfg.features[name]
    if name == "mel":
        return fc.n_mels
    if name == "cqt":
        return fc.n_bins
    if name == "audio":
        return fc.patch_len
    return fc.dims


def extract_clip_features(audio, cfg: PipelineConfig, clip_id: str | None = None) -> dict:
    """Every feature the pipeline needs for one clip, at native frame rates."""
    out = {}
    for name in cfg.feature_names:
        if name == "enc":
            enc = cfg.features["enc"]
            if not enc.cache:
                raise FeatureError("pipeline uses 'enc' features but [features.enc] cache is unset")
            feat = load_external_features(enc.cache, clip_id, "enc")
        else:
            feat = extract_feature(audio, name, cfg.features[name])
        out[name] = check_dims(feat, feature_dims(cfg, name))
    return out


def extract_manifest_features(entries, cfg: PipelineConfig, jobs: int = 1) -> list[dict]:
    """Features for each manifest entry, in manifest order, optionally in parallel."""
    def one(entry):
        try:
            audio = load_audio(entry.audio_path, cfg.audio.sample_rate)
            return extract_clip_features(audio, cfg, entry.clip_id)
        except Exception as exc:
            raise RuntimeError(f"clip {entry.clip_id!r}: {exc}") from exc

    if jobs <= 1:
        return [one(e) for e in entries]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, entries))


def features_to_records(clip_id: str, feats: dict) -> list[FeatureCacheRecord]:
    return [FeatureCacheRecord(clip_id, f.feature_name, f.frame_rate, f.data) for f in feats.values()]


def records_by_clip(records) -> dict:
    """``clip_id -> {feature_name: FeatureMatrix}`` preserving first-seen clip order."""
    out: dict = {}
    for rec in records:
        if rec.payload.dtype.kind != "f":
            continue
        out.setdefault(rec.clip_id, {})[rec.feature_name] = FeatureMatrix(
            rec.feature_name, rec.frame_rate, rec.payload.astype(np.float64))
    return out


def make_bank(cfg: PipelineConfig, seed: int) -> QuantizerBank:
    q = cfg.quantizer
    heads = cfg.head_features
    dims = {name: feature_dims(cfg, name) for name in set(heads)}
    seeds = [derive_seed(seed, f"codebook/{h}") for h in range(len(heads))]
    return build_bank(heads, dims, seeds, cfg.pipeline.rate, proj_dims=q.proj_dims,
                      num_codewords=q.num_codewords, fsq=q.fsq, normalize_input=q.normalize != "none")


def global_stats(clip_feats: list[dict], names) -> dict:
    stats = {}
    for name in names:
        x = np.concatenate([f[name].data for f in clip_feats])
        std = x.std(axis=0)
        stats[name] = (x.mean(axis=0), np.where(std > 1e-8, std, 1.0))
    return stats


def tokenize_clips(clip_feats: list[dict], cfg: PipelineConfig, bank: QuantizerBank) -> list[TargetTensor]:
    stats = global_stats(clip_feats, set(bank.feature_names)) if cfg.quantizer.normalize == "global" else None
    return [tokenize_multi(f, bank, stats) for f in clip_feats]


def encoder_config(cfg: PipelineConfig, vocab_sizes) -> EncoderConfig:
    e = cfg.encoder
    return EncoderConfig(
        input_dims=feature_dims(cfg, cfg.pipeline.input), layers=e.layers, model_dims=e.model_dims,
        heads=e.heads, conv_kernel=e.conv_kernel, ffn_expansion=e.ffn_expansion, dropout=e.dropout,
        deepnorm_alpha=e.deepnorm_alpha, deepnorm_beta=e.deepnorm_beta, vocab_sizes=list(vocab_sizes),
        init_std=e.init_std, zero_init_heads=e.zero_init_heads)


def input_on_grid(feats: dict, cfg: PipelineConfig) -> FeatureMatrix:
    feat = feats[cfg.pipeline.input]
    rate: Fraction = cfg.pipeline.rate
    return feat if feat.frame_rate == rate else resample_frames(feat, rate)


def make_clips(ids, clip_feats: list[dict], targets: list[TargetTensor], cfg: PipelineConfig) -> list[ClipData]:
    return [ClipData(cid, input_on_grid(f, cfg), t) for cid, f, t in zip(ids, clip_feats, targets)]


def prepare_clips(ids, clip_feats: list[dict], cfg: PipelineConfig, seed: int):
    """Tokenize and align; returns ``(clips, bank)``."""
    bank = make_bank(cfg, seed)
    return make_clips(ids, clip_feats, tokenize_clips(clip_feats, cfg, bank), cfg), bank
