"""``marq`` command-line entry point.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .audio_io import FeatureCacheRecord, load_manifest, read_feature_cache_with_meta, write_feature_cache
from .config import ConfigError, PipelineConfig, load_config
from .encoder import embeddings_for_probe, load_checkpoint
from .pipeline import (encoder_config, extract_manifest_features, features_to_records,
                       input_on_grid, make_bank, make_clips, records_by_clip, tokenize_clips)
from .pretrain import TrainState, read_metrics, train, validate, write_metrics
from .probes import ProbeConfig, train_probe
from .quantizers import TargetTensor, codebook_stats

log = logging.getLogger("marq")

STATS_HEADER = ["num_codebooks", "codewords", "usage_pct", "perplexity"]


class UsageError(Exception):
    pass


def cache_dir() -> Path:
    return Path(os.environ.get("MARQ_CACHE_DIR", ".marq_cache"))


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config, getattr(args, "preset", None))
    cfg.train.seed = args.seed
    return cfg


def _echo(cfg: PipelineConfig, **extra) -> dict:
    return {"config": cfg.to_dict(), **extra}


def _load_features(args, cfg: PipelineConfig, entries) -> list[dict]:
    """Features for ``entries`` from ``--cache`` when given, else extracted from audio."""
    if getattr(args, "cache", None):
        records, _ = read_feature_cache_with_meta(args.cache)
        by_clip = records_by_clip(records)
        out = []
        for e in entries:
            feats = by_clip.get(e.clip_id)
            if feats is None or any(n not in feats for n in cfg.feature_names):
                raise RuntimeError(f"clip {e.clip_id!r}: features missing from {args.cache}")
            out.append({n: feats[n] for n in cfg.feature_names})
        return out
    return extract_manifest_features(entries, cfg, args.jobs)


# -- commands ----------------------------------------------------------------


def cmd_features(args) -> int:
    cfg = _config(args)
    manifest = load_manifest(args.manifest)
    out = Path(args.out) if args.out else cache_dir() / "features.marqfc"
    existing: list[FeatureCacheRecord] = []
    if out.exists() and not args.force:
        existing, _ = read_feature_cache_with_meta(out)
    have = {(r.clip_id, r.feature_name) for r in existing}
    todo = [e for e in manifest.entries if any((e.clip_id, n) not in have for n in cfg.feature_names)]
    if not todo and existing:
        print(f"{out}: all {len(manifest)} clips present, nothing to do")
        return 0
    feats = extract_manifest_features(todo, cfg, args.jobs)
    fresh = {e.clip_id: features_to_records(e.clip_id, f) for e, f in zip(todo, feats)}
    records = [r for r in existing if r.clip_id not in fresh]
    for e in manifest.entries:
        records.extend(fresh.get(e.clip_id, []))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_feature_cache(records, out, _echo(cfg, seed=args.seed))
    print(f"{out}: wrote {len(records)} records for {len(manifest)} clips")
    return 0


def cmd_tokenize(args) -> int:
    cfg = _config(args)
    records, _ = read_feature_cache_with_meta(args.cache)
    by_clip = records_by_clip(records)
    ids = list(by_clip)
    clip_feats = [by_clip[c] for c in ids]
    bank = make_bank(cfg, args.seed)
    targets = tokenize_clips(clip_feats, cfg, bank)
    out = Path(args.out) if args.out else cache_dir() / "tokens.marqfc"
    out.parent.mkdir(parents=True, exist_ok=True)
    recs = [FeatureCacheRecord(cid, "tokens", bank.frame_rate, t.labels.astype(np.int32))
            for cid, t in zip(ids, targets)]
    meta = _echo(cfg, seed=args.seed, heads=bank.feature_names, vocab_sizes=bank.vocab_sizes)
    write_feature_cache(recs, out, meta)
    print(f"{out}: {len(recs)} clips, {len(bank.heads)} heads")
    return 0


def read_tokens(path) -> TargetTensor:
    records, meta = read_feature_cache_with_meta(path)
    if "vocab_sizes" not in meta:
        raise RuntimeError(f"{path}: not a token file (no vocab sizes in header)")
    labels = np.concatenate([r.payload for r in records if r.feature_name == "tokens"])
    return TargetTensor(labels, meta["vocab_sizes"], meta.get("heads", []))


def stats_row(targets: TargetTensor) -> list:
    stats = codebook_stats(targets)
    vocab = targets.head_vocab_sizes
    codewords = vocab[0] if len(set(vocab)) == 1 else "/".join(map(str, vocab))
    usage = 100.0 * float(np.mean([s.usage_fraction for s in stats]))
    ppl = float(np.mean([s.perplexity for s in stats]))
    return [targets.heads, codewords, f"{usage:.2f}", f"{ppl:.2f}"]


def cmd_codebook_stats(args) -> int:
    rows = [stats_row(read_tokens(p)) for p in args.tokens]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(STATS_HEADER)
    writer.writerows(rows)
    if args.csv:
        Path(args.csv).write_text(buf.getvalue())
    table = [STATS_HEADER] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(STATS_HEADER))]
    for r in table:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    if not args.csv:
        print()
        print(buf.getvalue(), end="")
    return 0


def _training_clips(args, cfg, split: str):
    manifest = load_manifest(args.manifest)
    entries = manifest.split(split)
    if not entries:
        raise RuntimeError(f"manifest has no {split!r} clips")
    feats = _load_features(args, cfg, entries)
    bank = make_bank(cfg, args.seed)
    clips = make_clips([e.clip_id for e in entries], feats, tokenize_clips(feats, cfg, bank), cfg)
    return clips, bank


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
        cfg.train.warmup_steps = min(cfg.train.warmup_steps, args.steps - 1)
    clips, bank = _training_clips(args, cfg, "train")
    enc_cfg = encoder_config(cfg, bank.vocab_sizes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.jsonl"
    state = None
    if args.resume:
        state, extra = TrainState.load(args.resume)
        if extra.get("config") != cfg.to_dict():
            raise UsageError("resumed checkpoint was written with a different configuration")
        kept = [r for r in read_metrics(metrics) if r["step"] <= state.step] if metrics.exists() else []
        write_metrics(kept, metrics)
    elif metrics.exists():
        metrics.unlink()
    state = train(clips, enc_cfg, cfg.train, cfg.masking, state=state, stop_at=args.stop_at, log_path=metrics)
    (out / "metrics.config.json").write_text(json.dumps(_echo(cfg, seed=args.seed), sort_keys=True, indent=1))
    state.save(out / "checkpoint.marqck", _echo(cfg, seed=args.seed))
    print(f"{out}: step {state.step}, last loss {state.log[-1]['loss'] if state.log else float('nan'):.4f}")
    return 0


def cmd_validate(args) -> int:
    cfg = _config(args)
    params, _, _ = load_checkpoint(args.checkpoint)
    clips, _ = _training_clips(args, cfg, args.split)
    result = validate(params, clips, cfg.masking, seed=args.seed)
    print(json.dumps(result, indent=1))
    return 0


def _probe_labels(entries, kind: str, vocab=None):
    if kind in ("track_multiclass",):
        vocab = vocab or sorted({e.labels[0] for e in entries})
        return [vocab.index(e.labels[0]) for e in entries], vocab
    if kind == "track_multilabel":
        vocab = vocab or sorted({t for e in entries for t in e.labels})
        return [[float(t in e.labels) for t in vocab] for e in entries], vocab
    return [e.labels for e in entries], vocab


def _segments_to_frames(segments, n_frames: int, rate: float, vocab: list) -> np.ndarray:
    out = np.full(n_frames, vocab.index("none") if "none" in vocab else 0)
    times = np.arange(n_frames) / rate
    for start, end, label in segments:
        out[(times >= start) & (times < end)] = vocab.index(label)
    return out


def cmd_probe(args) -> int:
    cfg = _config(args)
    if args.task not in cfg.probes:
        raise UsageError(f"no [probes.{args.task}] section in the config")
    section = cfg.probes[args.task]
    manifest = load_manifest(args.manifest, section.label_kind)
    rate = float(cfg.pipeline.rate)
    if args.embeddings:
        records, _ = read_feature_cache_with_meta(args.embeddings)
        emb = {r.clip_id: r.payload.astype(np.float64) for r in records if r.feature_name == "emb"}
        rate = float(next(r.frame_rate for r in records if r.feature_name == "emb"))
    else:
        if not args.checkpoint:
            raise UsageError("probe needs --checkpoint or --embeddings")
        params, _, _ = load_checkpoint(args.checkpoint)
        layer = None if section.layer_index < 0 else section.layer_index
        feats = extract_manifest_features(manifest.entries, cfg, args.jobs)
        emb = {e.clip_id: embeddings_for_probe(input_on_grid(f, cfg), params, layer_index=layer)
               for e, f in zip(manifest.entries, feats)}
        if args.export_embeddings:
            write_feature_cache([FeatureCacheRecord(cid, "emb", cfg.pipeline.rate, x) for cid, x in emb.items()],
                                args.export_embeddings, _echo(cfg, seed=args.seed, task=args.task))
    pcfg = ProbeConfig(task_kind=section.kind, hidden_units=section.hidden_units,
                       layer_index=None if section.layer_index < 0 else section.layer_index,
                       epochs=section.epochs, lr=section.lr, batch_size=section.batch_size,
                       weight_decay=section.weight_decay, frame_rate=rate, threshold=section.threshold,
                       min_gap=section.min_gap, tolerance=section.tolerance)
    train_e, test_e = manifest.split("train"), manifest.split("test")
    if not train_e or not test_e:
        raise RuntimeError("probing needs train and test clips")
    missing = [e.clip_id for e in train_e + test_e if e.clip_id not in emb]
    if missing:
        raise RuntimeError(f"no embeddings for clip(s) {', '.join(missing[:5])}")
    ytr, vocab = _probe_labels(train_e, section.kind)
    yte, _ = _probe_labels(test_e, section.kind, vocab)
    if section.kind == "frame_multiclass":
        vocab = sorted({s[2] for e in train_e for s in e.labels} | {"none"})
        ytr = [_segments_to_frames(e.labels, len(emb[e.clip_id]), rate, vocab) for e in train_e]
        yte = [_segments_to_frames(e.labels, len(emb[e.clip_id]), rate, vocab) for e in test_e]
    n_classes = len(vocab) if vocab and section.kind.endswith("multiclass") else None
    _, result = train_probe(([emb[e.clip_id] for e in train_e], ytr), ([emb[e.clip_id] for e in test_e], yte),
                            pcfg, seed=args.seed, n_classes=n_classes)
    report = result.report(args.task, pcfg, args.seed)
    report["pipeline"] = cfg.to_dict()
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True):
        p.add_argument("--config", help="TOML pipeline config")
        p.add_argument("--preset", help="named preset, overrides the config's preset key")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=1)
        if manifest:
            p.add_argument("--manifest", required=True)
        return p

    p = common(sub.add_parser("features", help="extract features into a MARQFC01 cache"))
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_features)

    p = common(sub.add_parser("tokenize", help="tokenize cached features"), manifest=False)
    p.add_argument("--cache", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("codebook-stats", help="codeword usage and perplexity of token files")
    p.add_argument("tokens", nargs="+")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_codebook_stats)

    p = common(sub.add_parser("pretrain", help="masked-token pre-training"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cache")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--stop-at", type=int, help="stop after this step (schedule still spans train.steps)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("validate", help="masked-token accuracy on a split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache")
    p.add_argument("--split", default="valid", choices=["train", "valid", "test"])
    p.set_defaults(func=cmd_validate)

    p = common(sub.add_parser("probe", help="train and score an MLP probe"))
    p.add_argument("--task", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--embeddings", help="MARQFC01 cache of precomputed 'emb' records")
    p.add_argument("--export-embeddings")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"marq: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- surface every runtime failure as exit 1
        if args.verbose:
            log.exception("command failed")
        print(f"marq: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
