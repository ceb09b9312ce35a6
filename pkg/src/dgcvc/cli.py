"""Command-line entry point: ``dgcvc <command> ...``.

Every command echoes the configuration it resolved to stdout. Failures print a
single machine-parsable line to stderr::

    dgcvc-error kind=<usage|integrity|runtime> message="..."

and exit with 2 (usage), 3 (integrity) or 1 (anything else). Relative output
paths are placed under ``$DGCVC_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import asv as asv_mod
from . import features as F
from .checkpoint import check_architecture, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .corpus import (load_corpus, make_splits, split_utterances,
                     synth_toy_corpus, synth_voice_pool)
from .errors import ConfigError, IntegrityError
from .evaluation import (EmbeddingTable, EvalReport, PairResult, export_embeddings, project_2d,
                         similarity_ratio, similarity_stats)
from .pipeline import convert_utterance, reference_embedding, score_conversion
from .speaker_encoder import needs_asv
from .training import classifier_accuracy, load_models, train_vc

log = logging.getLogger("dgcvc")

EXIT_RUNTIME, EXIT_USAGE, EXIT_INTEGRITY = 1, 2, 3
PAIR_COLUMNS = ("source_utt_path", "target_speaker_id", "reference_utt_path", "gender_tag")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def output_path(p) -> Path:
    p = Path(p)
    root = os.environ.get("DGCVC_OUTPUT_ROOT")
    return Path(root) / p if root and not p.is_absolute() else p


def _input_file(p, what) -> Path:
    p = Path(p)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _echo_config(cfg: RunConfig, source: str) -> None:
    print(f"# resolved config ({source}) hash={cfg.hash}")
    print(cfg.to_ini().rstrip())
    print("# end config", flush=True)


def _load_cfg(path) -> RunConfig:
    return load_config(_input_file(path, "config"))


def _corpus(root, what="corpus"):
    if not root:
        raise UsageError(f"no {what} path configured (set [paths] {what})")
    if not Path(root).is_dir():
        raise UsageError(f"{what} directory {root} does not exist")
    return load_corpus(root)


def _heldout_split(corpus, ids):
    """Training/held-out utterance split; held-out is dropped if too small for a GE2E batch."""
    train, held = split_utterances(corpus, ids, 0.2)
    counts = {}
    for sid, _ in held:
        counts[sid] = counts.get(sid, 0) + 1
    if min(counts.values(), default=0) < 2:
        return corpus.utterances(ids), []
    return train, held


def _group_mels(pairs, cfg):
    from .corpus import load_mels

    out = {}
    for (sid, _), mel in zip(pairs, load_mels(pairs, cfg)):
        out.setdefault(sid, []).append(mel)
    return out


def _load_asv(path, cfg: RunConfig | None = None):
    """ASV model and its checkpoint payload from an asv or vc checkpoint."""
    payload = load_checkpoint(_input_file(path, "ASV checkpoint"))
    if "asv" not in payload["blobs"]:
        raise IntegrityError(f"{path}: checkpoint holds no ASV parameters")
    if cfg is not None:
        check_architecture(payload["run_config"], cfg, path, sections=("asv",))
    a = payload["run_config"].asv
    model = asv_mod.ASVModel(payload["run_config"].features.n_mels, a.hidden, a.layers)
    model.load_state_dict(payload["blobs"]["asv"])
    model.freeze()
    return model, payload


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    out = output_path(args.out)
    if args.pool:
        corpus = synth_voice_pool(args.speakers, args.utts, args.seed, out)
    else:
        corpus = synth_toy_corpus(args.speakers, args.utts, args.seed, out)
    print(f"corpus: {out} speakers={len(corpus.speakers)} utterances={len(corpus.utterances())}")
    return 0


def cmd_train_asv(args) -> int:
    cfg = _load_cfg(args.config)
    _echo_config(cfg, args.config)
    if cfg.paths.asv_corpus:
        corpus = _corpus(cfg.paths.asv_corpus, "asv_corpus")
        ids = corpus.speaker_ids
    else:
        corpus = make_splits(_corpus(cfg.paths.corpus), cfg.paths.n_train_speakers, cfg.paths.split_seed)
        ids = list(corpus.train_speakers)
    train, held = _heldout_split(corpus, ids)
    steps = cfg.asv.steps if args.steps is None else args.steps
    out = output_path(args.out or Path(cfg.paths.out_dir) / "asv.ckpt")

    def snapshot(model, state):
        step = state["step"]
        save_checkpoint(out.with_name(f"{out.stem}_step{step}.ckpt"), "asv",
                        {"asv": model.state_dict()}, cfg, step)

    model, state, hist = asv_mod.train_asv(_group_mels(train, cfg.features), cfg.asv,
                                           heldout=_group_mels(held, cfg.features) or None,
                                           steps=steps, on_checkpoint=snapshot)
    extra = {"speakers": list(ids), "checksum": asv_mod.parameter_checksum(model),
             "heldout_initial": hist.get("heldout_initial"), "heldout_final": hist.get("heldout_final")}
    save_checkpoint(out, "asv", {"asv": model.state_dict()}, cfg, state["step"], extra)
    print(f"asv: steps={state['step']} final_loss={hist['loss'][-1] if hist['loss'] else float('nan'):.6f} "
          f"heldout_initial={extra['heldout_initial']} heldout_final={extra['heldout_final']} "
          f"checkpoint={out}")
    return 0


def _require_asv(variant, asv_arg):
    if needs_asv(variant) and not asv_arg:
        raise UsageError(f"variant {variant} requires --asv (a pretrained ASV checkpoint from train-asv)")


def cmd_train_vc(args) -> int:
    if args.variant:
        _require_asv(args.variant, args.asv)
    cfg = _load_cfg(args.config)
    variant = args.variant or cfg.variant
    cfg = cfg.replace(speaker_encoder={"variant": variant})
    if args.steps is not None:
        cfg = cfg.replace(training={"steps": args.steps})
    _require_asv(variant, args.asv)
    _echo_config(cfg, args.config)

    asv, extra = None, {}
    if needs_asv(variant):
        asv, asv_payload = _load_asv(args.asv, cfg)
        extra["asv_config_hash"] = asv_payload["config_hash"]
    corpus = make_splits(_corpus(cfg.paths.corpus), cfg.paths.n_train_speakers, cfg.paths.split_seed)
    train, held = split_utterances(corpus, corpus.train_speakers, 0.2)
    out_dir = output_path(args.out or cfg.paths.out_dir)
    models, history = train_vc(_group_mels(train, cfg.features), asv, cfg, out_dir=out_dir, extra=extra)

    held_mels = _group_mels(held, cfg.features)
    emb, labels = [], []
    for sid, mels in held_mels.items():
        for m in mels:
            emb.append(reference_embedding(models, m))
            labels.append(models.speakers.index(sid))
    acc = classifier_accuracy(models.classifier, torch.stack(emb), labels) if emb else float("nan")
    if args.figure:
        from .plotting import loss_figure

        loss_figure(history, output_path(args.figure), f"{variant} training loss")
    first = np.mean([r[1] for r in history[:10]]) if history else float("nan")
    last = np.mean([r[1] for r in history[-10:]]) if history else float("nan")
    print(f"vc[{variant}]: steps={len(history)} l_rec_first10={first:.6f} l_rec_last10={last:.6f} "
          f"heldout_classifier_accuracy={acc:.4f} checkpoint={out_dir / f'vc_{variant}.ckpt'}")
    return 0


def _load_vc(path):
    payload = load_checkpoint(_input_file(path, "checkpoint"), kind="vc")
    return load_models(payload), payload


def cmd_convert(args) -> int:
    models, payload = _load_vc(args.ckpt)
    cfg = payload["run_config"]
    _echo_config(cfg, args.ckpt)
    fc = cfg.features
    src = F.compute_mel(F.load_wav(_input_file(args.src, "source"), fc.sample_rate), fc)
    ref = F.compute_mel(F.load_wav(_input_file(args.ref, "reference"), fc.sample_rate), fc)
    mel = convert_utterance(models, src, ref)
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    F.save_wav(out, F.mel_to_waveform(mel, cfg=fc, seed=args.seed), fc.sample_rate)
    mel_path = output_path(args.mel) if args.mel else out.with_suffix(".npy")
    np.save(mel_path, mel.astype(np.float32))
    print(f"converted: frames={mel.shape[0]} wav={out} mel={mel_path}")
    return 0


def read_pairs(path) -> list[dict]:
    """Pairs manifest rows; a header row is optional and relative paths follow the manifest."""
    path = _input_file(path, "pairs manifest")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and tuple(c.strip() for c in rows[0]) == PAIR_COLUMNS:
        rows = rows[1:]
    pairs = []
    for n, r in enumerate(rows, 1):
        if len(r) not in (3, 4):
            raise UsageError(f"{path}: row {n} needs {len(PAIR_COLUMNS)} columns")
        rec = dict(zip(PAIR_COLUMNS, [c.strip() for c in r] + [""] * (4 - len(r))))
        for key in ("source_utt_path", "reference_utt_path"):
            p = Path(rec[key])
            rec[key + "_resolved"] = _input_file(p if p.is_absolute() else path.parent / p, key)
        pairs.append(rec)
    if not pairs:
        raise UsageError(f"{path}: no conversion pairs")
    return pairs


def cmd_evaluate(args) -> int:
    models, payload = _load_vc(args.ckpt)
    cfg = payload["run_config"]
    _echo_config(cfg, args.ckpt)
    fc = cfg.features
    pairs = read_pairs(args.pairs)

    seen = sorted({p["target_speaker_id"] for p in pairs} & set(models.speakers))
    if seen and not args.allow_seen:
        raise UsageError(f"targets {seen} were training speakers; pass --allow-seen for seen-speaker runs")

    asv = models.asv
    asv_hash = payload["extra"].get("asv_config_hash")
    if args.asv:
        asv, asv_payload = _load_asv(args.asv)
        stored = payload["extra"].get("asv_checksum")
        mixed = (stored is not None and stored != asv_mod.parameter_checksum(asv)) or \
            (asv_hash is not None and asv_hash != asv_payload["config_hash"])
        if mixed and not args.force:
            raise IntegrityError(f"{args.asv} is not the ASV model {args.ckpt} was trained with "
                                 "(mixed config hashes; use --force to override)")
        asv_hash = asv_payload["config_hash"]

    results, items, refs_done = [], [], set()
    wav_cache, mel_cache = {}, {}

    def audio(p):
        if p not in wav_cache:
            wav_cache[p] = F.load_wav(p, fc.sample_rate)
            mel_cache[p] = F.compute_mel(wav_cache[p], fc)
        return wav_cache[p], mel_cache[p]

    for rec in pairs:
        _, src_mel = audio(rec["source_utt_path_resolved"])
        ref_wav, ref_mel = audio(rec["reference_utt_path_resolved"])
        mel = convert_utterance(models, src_mel, ref_mel)
        _, mcd, err = score_conversion(mel, ref_wav, fc, seed=args.seed)
        source = rec["source_utt_path"]
        target = rec["target_speaker_id"]
        tag = rec["gender_tag"] or None
        results.append(PairResult(source, target, rec["reference_utt_path"], tag, mcd, err))
        items.append((f"{source}->{target}", target, True, mel))
        if rec["reference_utt_path"] not in refs_done:
            refs_done.add(rec["reference_utt_path"])
            items.append((rec["reference_utt_path"], target, False, ref_mel))

    meta = {"variant": cfg.variant, "config_hash": cfg.hash, "checkpoint_hash": payload["content_hash"],
            "asv_config_hash": asv_hash, "n_pairs": len(results), "version": __version__}
    table = None
    if asv is not None:
        table = export_embeddings(items, asv, cfg.asv.dvector_window, cfg.hash)
        stats = similarity_stats(table)
        meta["similarity"] = {
            "groups": {g: {"intra": s.intra, "inter": s.inter, "closer_to_own": s.closer_to_own}
                       for g, s in stats.items()},
            "ratio": similarity_ratio(stats),
        }
    report = EvalReport(results, meta)
    out = output_path(args.out)
    report.write(out, output_path(args.csv) if args.csv else None)
    if table is not None:
        table.write_csv(out.with_name(out.stem + "_embeddings.csv"))
    if args.figure:
        from .plotting import metrics_figure, scatter_figure

        fig = output_path(args.figure)
        metrics_figure(report, fig.with_name(fig.stem + "_metrics.png"))
        if table is not None and len(table) >= 3:
            scatter_figure(project_2d(table, "pca"), fig.with_name(fig.stem + "_scatter.png"),
                           "D-vector space (PCA)")
    agg = report.aggregates()
    print("report: " + json.dumps({"pairs": len(results), "aggregates": agg, "path": str(out)}, sort_keys=True))
    return 0


def read_utterances(path) -> list[tuple[str, str, bool, Path]]:
    """Utterance manifest: ``path,group[,converted]`` rows with an optional header."""
    path = _input_file(path, "utterance manifest")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and rows[0][0].strip() == "path":
        rows = rows[1:]
    out = []
    for n, r in enumerate(rows, 1):
        if len(r) < 2:
            raise UsageError(f"{path}: row {n} needs at least path and group")
        p = Path(r[0].strip())
        resolved = _input_file(p if p.is_absolute() else path.parent / p, "utterance")
        conv = len(r) > 2 and r[2].strip().lower() in ("1", "true", "yes")
        out.append((r[0].strip(), r[1].strip(), conv, resolved))
    if not out:
        raise UsageError(f"{path}: no utterances")
    return out


def cmd_embed(args) -> int:
    asv, payload = _load_asv(args.asv)
    cfg = payload["run_config"]
    _echo_config(cfg, args.asv)
    fc = cfg.features
    rows = read_utterances(args.utts)
    items = [(uid, g, c, F.compute_mel(F.load_wav(p, fc.sample_rate), fc)) for uid, g, c, p in rows]
    table = export_embeddings(items, asv, cfg.asv.dvector_window, cfg.hash)
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out)
    print(f"embeddings: rows={len(table)} out={out}")
    return 0


def cmd_project(args) -> int:
    table = EmbeddingTable.read_csv(_input_file(args.input, "embedding table"))
    print(f"# resolved config (embedding table) hash={table.config_hash}")
    print(f"# projection method={args.method} seed={args.seed} perplexity={args.perplexity}")
    try:
        scatter = project_2d(table, args.method, args.seed, args.perplexity)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scatter.write_csv(out)
    if args.figure:
        from .plotting import scatter_figure

        scatter_figure(scatter, output_path(args.figure), f"D-vector space ({args.method})")
    stats = similarity_stats(scatter)
    print(f"scatter: rows={len(scatter)} out={out} ratio={similarity_ratio(stats)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dgcvc", description="Zero-shot voice conversion with D-sequence GST speaker embeddings.")
    p.add_argument("--version", action="version", version=f"dgcvc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-toy", help="write a synthetic toy-speaker corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=4)
    s.add_argument("--utts", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pool", action="store_true", help="continuous random voices instead of the fixed slots")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-asv", help="pretrain the speaker-verification model")
    s.add_argument("config")
    s.add_argument("--out", help="checkpoint path (default <out_dir>/asv.ckpt)")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_asv)

    s = sub.add_parser("train-vc", help="train the conversion model")
    s.add_argument("config")
    s.add_argument("--variant", choices=("d", "g", "dg", "dgc"))
    s.add_argument("--asv", help="pretrained ASV checkpoint (needed by d, dg, dgc)")
    s.add_argument("--out", help="output directory (default <out_dir>)")
    s.add_argument("--steps", type=int)
    s.add_argument("--figure", help="write a loss-curve PNG here")
    s.set_defaults(func=cmd_train_vc)

    s = sub.add_parser("convert", help="convert one utterance")
    s.add_argument("--src", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help="output wav")
    s.add_argument("--mel", help="mel dump path (default: --out with .npy)")
    s.add_argument("--seed", type=int, default=0, help="Griffin-Lim phase seed")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("evaluate", help="DTW-MCD and F0 MAE over a pairs manifest")
    s.add_argument("--pairs", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True, help="report JSON")
    s.add_argument("--csv", help="per-pair CSV (default: --out with .csv)")
    s.add_argument("--asv", help="ASV checkpoint for the D-vector similarity analysis")
    s.add_argument("--force", action="store_true", help="accept mixed config hashes")
    s.add_argument("--allow-seen", action="store_true", help="allow targets that were training speakers")
    s.add_argument("--figure", help="PNG path prefix for metric and scatter figures")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("embed", help="export D-vectors for an utterance manifest")
    s.add_argument("--utts", required=True)
    s.add_argument("--asv", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("project", help="2-D projection of an embedding table")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--method", choices=("pca", "tsne"), default="pca")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--perplexity", type=float, default=10.0)
    s.add_argument("--figure", help="write a scatter PNG here")
    s.set_defaults(func=cmd_project)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(f"dgcvc-error kind={kind} message={json.dumps(message)}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    torch.set_num_threads(int(os.environ.get("DGCVC_THREADS", "1")))
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except IntegrityError as exc:
        return _fail("integrity", str(exc), EXIT_INTEGRITY)
    except Exception as exc:  # noqa: BLE001
        return _fail("runtime", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
