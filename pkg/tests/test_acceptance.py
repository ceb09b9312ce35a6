"""Acceptance criteria, one test per criterion.

The terminal summary prints one PASS/FAIL line per criterion (see conftest).
Criteria 4 and 5 train real toy models and take most of the runtime.
"""
import csv
import json
import statistics
import time

import numpy as np
import pytest
import torch

from dgcvc import asv as A
from dgcvc.checkpoint import load_checkpoint
from dgcvc.cli import main
from dgcvc.config import RunConfig
from dgcvc.conversion import Generator
from dgcvc.corpus import mels_by_speaker, synth_toy_corpus, synth_voice_pool
from dgcvc.evaluation import (dtw_mcd, export_embeddings, f0_mae, similarity_ratio,
                              similarity_stats)
from dgcvc.features import F0Track, load_wav
from dgcvc.pipeline import convert_utterance, reference_embedding, score_conversion
from dgcvc.speaker_encoder import SpeakerEncoder, StyleTokenLayer, style_attention
from dgcvc.training import (AuxClassifier, classification_loss, classifier_accuracy,
                            reconstruction_loss, total_loss, train_vc)
from oracles import brute_force_mcd, max_relative_error, numeric_gradient

torch.set_num_threads(1)


def tiny_config(variant="dgc", **training):
    return RunConfig.toy().replace(
        asv={"hidden": 16, "layers": 1},
        speaker_encoder={"variant": variant, "conv_channels": (4, 8, 8), "gru_hidden": 32},
        conversion={"enc_channels": 16, "dec_pre_lstm": 16, "dec_channels": 16, "dec_lstm": 24,
                    "dec_lstm_layers": 1, "postnet_channels": 16},
        training={"batch_size": 2, "log_every": 0, "checkpoint_every": 0, **training},
    )


# -- 1: metric oracles --------------------------------------------------------

def test_criterion_1_metric_oracles(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        n, m = rng.integers(1, 7, size=2)
        a, b = rng.normal(size=(n, 25)), rng.normal(size=(m, 25))
        worst = max(worst, abs(dtw_mcd(a, b) - brute_force_mcd(a, b)))
    assert worst < 1e-9

    for _ in range(20):
        a = rng.normal(size=(rng.integers(1, 40), 25))
        assert dtw_mcd(a, a) == 0.0

    def track(values):
        v = np.asarray(values, dtype=float)
        return F0Track(v, v > 0)

    diag = [(i, i) for i in range(4)]
    assert f0_mae(track([100, 0, 120, 130]), track([110, 0, 130, 140]), diag) == 10.0
    assert f0_mae(track([100, 0, 150, 0]), track([0, 90, 140, 0]), diag) == 10.0
    assert f0_mae(track([100, 200]), track([100, 200]), diag[:2]) == 0.0
    assert f0_mae(track([100, 0]), track([0, 90]), diag[:2]) is None
    # many-to-one alignment: both source frames compare against the same target frame
    assert f0_mae(track([100, 104]), track([110]), [(0, 0), (1, 0)]) == 8.0

    elapsed = time.perf_counter() - start
    record_property("detail", f"max |dtw_mcd - enumeration| = {worst:.2e}, {elapsed:.1f} s")
    assert elapsed < 30


# -- 2: gradients ---------------------------------------------------------------

def _check(fn, x0, worst):
    """fn maps a float64 tensor to a scalar; compares autograd with central differences."""
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    fn(x).backward()
    num = numeric_gradient(lambda v: fn(torch.tensor(v, dtype=torch.float64)).item(), x0, h=1e-4)
    err = max_relative_error(x.grad.numpy(), num)
    worst.append(err)
    return err


def test_criterion_2_gradients(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = {k: [] for k in ("rec", "class", "total", "ge2e", "attention")}
    for _ in range(20):
        t, d, k, c = (int(v) for v in rng.integers(2, 6, size=4))
        x = torch.tensor(rng.normal(size=(t, d)))
        x2 = torch.tensor(rng.normal(size=(t, d)))
        codes = torch.tensor(rng.normal(size=(k, c)))
        # decoder output and re-encoded codes both carry gradient
        x1_0 = rng.normal(size=(t, d))
        c2_0 = rng.normal(size=(k, c)) + 0.05  # keep away from the |.| kink
        _check(lambda v: reconstruction_loss(x, v, x2, codes, torch.tensor(c2_0)), x1_0, worst["rec"])
        _check(lambda v: reconstruction_loss(x, torch.tensor(x1_0), x2, codes, v), c2_0, worst["rec"])

        n_cls, batch = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        labels = rng.integers(0, n_cls, size=batch).tolist()
        _check(lambda v: classification_loss(v, labels), rng.normal(size=(batch, n_cls)), worst["class"])
        clf = AuxClassifier(n_cls, emb_dim=8).double()
        _check(lambda v: classification_loss(clf(v), labels), rng.normal(size=(batch, 8)), worst["class"])

        # total loss as a function of decoder output and logits together
        lam_r, lam_c = rng.uniform(0.1, 2.0, size=2)
        split = t * d

        def composed(v, lam_r=lam_r, lam_c=lam_c):
            l_rec = reconstruction_loss(x, v[:split].reshape(t, d), x2, codes, torch.tensor(c2_0))
            l_class = classification_loss(v[split:].reshape(batch, n_cls), labels)
            return total_loss(l_rec, l_class, lam_r, lam_c)

        _check(composed, np.concatenate([x1_0.ravel(), rng.normal(size=batch * n_cls)]), worst["total"])

        n, m, e = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(3, 7))
        w, b = torch.tensor(rng.uniform(5, 15), dtype=torch.float64), torch.tensor(rng.uniform(-8, -2),
                                                                                 dtype=torch.float64)
        _check(lambda v: A.ge2e_loss(v, w, b), rng.normal(size=(n, m, e)), worst["ge2e"])
        emb0 = rng.normal(size=(n, m, e))
        _check(lambda v: A.ge2e_loss(torch.tensor(emb0), v[0], v[1]),
               np.array([w.item(), b.item()]), worst["ge2e"])

        heads = int(rng.choice([1, 2, 4]))
        torch.manual_seed(int(rng.integers(1 << 30)))
        layer = StyleTokenLayer(n_tokens=int(rng.integers(1, 6)), token_dim=4 * heads, heads=heads,
                                query_dim=6, out_dim=4 * heads).double()
        _check(lambda v: (style_attention(v, layer) ** 2).sum(), rng.normal(size=6), worst["attention"])
        _check(lambda v: (style_attention(v, layer) * torch.arange(4.0 * heads, dtype=torch.float64)).sum(),
               rng.normal(size=(3, 6)), worst["attention"])

    summary = {k: max(v) for k, v in worst.items()}
    elapsed = time.perf_counter() - start
    record_property("detail", "max rel err " + " ".join(f"{k}={v:.1e}" for k, v in summary.items())
                    + f", {elapsed:.1f} s")
    assert all(v < 1e-4 for v in summary.values()), summary
    assert elapsed < 120


# -- 3: structural invariants ---------------------------------------------------

def test_criterion_3_structure(record_property, toy_corpus):
    torch.manual_seed(0)
    layer = StyleTokenLayer()
    _, weights = style_attention(torch.randn(16, 256), layer, return_weights=True)
    assert weights.shape == (16, 4, 10)
    assert (weights.sum(-1) - 1).abs().max().item() <= 1e-6

    asv = A.ASVModel(hidden=16, num_layers=1).freeze()
    mel = torch.randn(2, 160, 80)
    for variant in ("d", "g", "dg", "dgc"):
        enc = SpeakerEncoder(variant, (4, 8, 8), 32)
        assert enc(mel, asv).shape == (2, 256), variant

    gen = Generator(enc_channels=16, dec_pre_lstm=16, dec_channels=16, dec_lstm=24,
                    dec_lstm_layers=1, postnet_channels=16).eval()
    x, e = torch.randn(1, 160, 80), torch.randn(1, 256)
    codes = gen.encode(x, e)
    per_direction = torch.stack([codes[0, :, :32], codes[0, :, 32:]])
    assert per_direction.shape == (2, 5, 32)
    with torch.no_grad():
        x1, x2, _ = gen(x, e, e)
        residual = gen.postnet(x1)
        assert torch.equal(x2, x1 + residual)
        # subtracting back re-rounds once; bound that by float32 spacing
        assert ((x2 - x1) - residual).abs().max().item() <= torch.finfo(torch.float32).eps * x2.abs().max().item()

    mels = mels_by_speaker(toy_corpus)
    before = A.parameter_checksum(asv)
    train_vc(mels, asv, tiny_config(steps=100))
    assert A.parameter_checksum(asv) == before
    record_property("detail", "attention sums, 256-dim embeddings, 2x5x32 codes, postnet residual, "
                              "ASV checksum stable over 100 steps")



# -- 4: toy end to end ------------------------------------------------------------
# The ASV is pretrained on a pool of random synthetic voices; conversion training
# uses four fixed toy speakers and keeps two more toy speakers out entirely.

POOL_VOICES, POOL_UTTS, ASV_STEPS = 32, 8, 2000
E2E_STEPS = 2000


def _embed_all(models, mels):
    return torch.stack([reference_embedding(models, m) for m in mels])


@pytest.fixture(scope="module")
def voice_pool(tmp_path_factory):
    pool = synth_voice_pool(POOL_VOICES, POOL_UTTS, 0, tmp_path_factory.mktemp("pool"))
    return mels_by_speaker(pool)


@pytest.fixture(scope="module")
def e2e(tmp_path_factory, voice_pool):
    start = time.perf_counter()
    corpus = synth_toy_corpus(6, 10, seed=0, out_dir=tmp_path_factory.mktemp("toy6"))
    mels = mels_by_speaker(corpus)
    train_ids, heldout_ids = corpus.speaker_ids[:4], corpus.speaker_ids[4:]
    cfg = RunConfig.toy().replace(asv={"steps": ASV_STEPS},
                                  training={"steps": E2E_STEPS, "log_every": 0, "checkpoint_every": 0})
    asv, _, asv_hist = A.train_asv(voice_pool, cfg.asv, heldout=mels)
    asv.freeze()
    vc_train = {s: mels[s][:7] for s in train_ids}
    models, history = train_vc(vc_train, asv, cfg)
    return dict(start=start, mels=mels, train_ids=train_ids, heldout_ids=heldout_ids, asv=asv,
                asv_hist=asv_hist, models=models, history=history, corpus=corpus)


def test_criterion_4_toy_end_to_end(record_property, e2e):
    mels, models, corpus = e2e["mels"], e2e["models"], e2e["corpus"]

    # (a) GE2E on utterances of speakers the ASV never saw
    ratio_a = e2e["asv_hist"]["heldout_final"] / e2e["asv_hist"]["heldout_initial"]

    # (b) reconstruction loss, last 50 steps against the first 50
    l_rec = [row[1] for row in e2e["history"]]
    ratio_b = float(np.mean(l_rec[-50:]) / np.mean(l_rec[:50]))

    # (c) classifier on held-out utterances of the training speakers
    emb, labels = [], []
    for s in e2e["train_ids"]:
        emb.append(_embed_all(models, mels[s][7:]))
        labels += [models.speakers.index(s)] * len(mels[s][7:])
    acc = classifier_accuracy(models.classifier, torch.cat(emb), labels)

    # (d) parallel corpus: utterance k carries the same content for every speaker,
    # so the target speaker's own utterance k is the ground truth of a conversion
    speakers = corpus.speaker_ids
    wav = {(s, k): load_wav(corpus.speaker(s).utterances[k]) for s in speakers for k in (7, 8, 9)}
    self_mcd, cross_mcd = [], []
    # speakers 4 and 5 are the held-out ones
    for i, (a, b) in enumerate([(0, 1), (1, 2), (2, 3), (3, 0), (4, 0), (5, 1), (0, 4), (2, 5)]):
        s, t = speakers[a], speakers[b]
        k, ref_k = 7 + i % 3, 7 + (i + 1) % 3
        conv = convert_utterance(models, mels[s][k], mels[s][ref_k])
        self_mcd.append(score_conversion(conv, wav[s, k])[1])
        conv = convert_utterance(models, mels[s][k], mels[t][ref_k])
        cross_mcd.append(score_conversion(conv, wav[t, k])[1])
    elapsed = time.perf_counter() - e2e["start"]

    checks = {"a": ratio_a <= 0.5, "b": ratio_b <= 0.4, "c": acc > 0.9,
              "d": np.mean(self_mcd) < np.mean(cross_mcd), "time": elapsed <= 900}
    record_property("detail", f"(a) GE2E held-out {ratio_a:.2f}x initial; (b) l_rec {ratio_b:.2f}x early; "
                              f"(c) held-out accuracy {acc:.3f}; (d) MCD self {np.mean(self_mcd):.2f} < "
                              f"cross {np.mean(cross_mcd):.2f} dB; {elapsed / 60:.1f} min")
    assert all(checks.values()), checks



# -- 5: zero-shot similarity trend ----------------------------------------------

ZS_STEPS, ZS_SEEDS = 3000, (0, 1, 2)
ZS_TARGETS = ("spk00", "spk01", "spk02", "spk04")
ZS_SOURCES = ("spk08", "spk09", "spk10", "spk11")


@pytest.fixture(scope="module")
def zero_shot_corpus(tmp_path_factory):
    corpus = synth_toy_corpus(12, 8, seed=1, out_dir=tmp_path_factory.mktemp("toy12"))
    return mels_by_speaker(corpus)


def _zero_shot_ratio(models, asv, mels):
    """Similarity stats for 8 conversions into each of the four zero-shot targets."""
    items = [(f"{t}/{k}", t, False, mels[t][k]) for t in ZS_TARGETS for k in range(4)]
    for t in ZS_TARGETS:
        for s in ZS_SOURCES:
            for k in range(2):
                items.append((f"{s}->{t}/{k}", t, True, convert_utterance(models, mels[s][4 + k], mels[t][k])))
    stats = similarity_stats(export_embeddings(items, asv))
    return sum(bool(v.closer_to_own) for v in stats.values()), similarity_ratio(stats)


def test_criterion_5_zero_shot_trend(record_property, e2e, voice_pool, zero_shot_corpus):
    """Conversion models are trained on the voice pool, so all twelve toy voices are unseen.

    Expected to be flaky at toy scale; three seeds, majority wins, and the loop stops
    once the majority is decided.
    """
    asv = e2e["asv"]
    train = {s: m[:7] for s, m in voice_pool.items()}
    verdicts, notes = [], []
    for seed in ZS_SEEDS:
        result = {}
        for variant in ("dgc", "dg"):
            cfg = RunConfig.toy().replace(speaker_encoder={"variant": variant},
                                          training={"steps": ZS_STEPS, "seed": seed, "log_every": 0,
                                                    "checkpoint_every": 0})
            models, _ = train_vc(train, asv, cfg)
            result[variant] = _zero_shot_ratio(models, asv, zero_shot_corpus)
        closer, ratio_dgc = result["dgc"]
        ratio_dg = result["dg"][1]
        verdicts.append(closer >= 3 and ratio_dgc <= ratio_dg)
        notes.append(f"seed {seed}: DGC {closer}/4 closer, ratio DGC {ratio_dgc:.3f} vs DG {ratio_dg:.3f}")
        if max(sum(verdicts), len(verdicts) - sum(verdicts)) * 2 > len(ZS_SEEDS):
            break
    record_property("detail", "; ".join(notes))
    assert sum(verdicts) * 2 > len(ZS_SEEDS), notes


# -- 6: dg == dgc without the classification term --------------------------------

def test_criterion_6_dg_equals_dgc(record_property, toy_corpus):
    mels = mels_by_speaker(toy_corpus)
    torch.manual_seed(0)
    asv = A.ASVModel(hidden=16, num_layers=1).freeze()
    _, h_dg = train_vc(mels, asv, tiny_config("dg", steps=50, seed=3))
    _, h_dgc = train_vc(mels, asv, tiny_config("dgc", steps=50, seed=3, lambda_class=0.0))
    assert len(h_dg) == len(h_dgc) == 50
    same = [a == b for a, b in zip(h_dg, h_dgc)]
    record_property("detail", f"{sum(same)}/50 identical (step, l_rec, l_class, total) rows")
    assert all(same)


# -- 7: CLI round trip ----------------------------------------------------------

CLI_CONFIG = """\
[preset]
name = toy

[asv]
hidden = 16
layers = 1
steps = 20

[speaker_encoder]
conv_channels = 4,8,8
gru_hidden = 32

[conversion]
enc_channels = 16
dec_pre_lstm = 16
dec_channels = 16
dec_lstm = 24
dec_lstm_layers = 1
postnet_channels = 16

[training]
steps = 10
batch_size = 2
checkpoint_every = 0

[paths]
corpus = {corpus}
out_dir = {out}
n_train_speakers = 4
"""


def test_criterion_7_cli_round_trip(record_property, tmp_path):
    corpus, runs = tmp_path / "corpus", tmp_path / "runs"
    cfg = tmp_path / "toy.ini"
    assert main(["synth-toy", "--out", str(corpus), "--speakers", "12", "--utts", "3"]) == 0
    cfg.write_text(CLI_CONFIG.format(corpus=corpus, out=runs))

    assert main(["train-asv", str(cfg)]) == 0
    assert main(["train-vc", str(cfg), "--variant", "dgc", "--asv", str(runs / "asv.ckpt")]) == 0
    ckpt = runs / "vc_dgc.ckpt"
    seen = set(load_checkpoint(ckpt)["extra"]["speakers"])
    unseen = sorted(p.name for p in corpus.iterdir() if p.is_dir() and p.name not in seen)
    sources, targets = unseen[:4], unseen[4:8]

    out_wav = tmp_path / "conv" / "x.wav"
    assert main(["convert", "--src", str(corpus / sources[0] / "utt000.wav"),
                 "--ref", str(corpus / targets[0] / "utt000.wav"), "--ckpt", str(ckpt),
                 "--out", str(out_wav)]) == 0
    assert len(load_wav(out_wav)) > 0

    pairs = tmp_path / "pairs.csv"
    with open(pairs, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_utt_path", "target_speaker_id", "reference_utt_path", "gender_tag"])
        for s in sources:
            for t in targets:
                g = {sid: (corpus / sid / "meta").read_text().strip() for sid in (s, t)}
                w.writerow([corpus / s / "utt001.wav", t, corpus / t / "utt000.wav", f"{g[s]}2{g[t]}"])
    report = tmp_path / "eval" / "report.json"
    assert main(["evaluate", "--pairs", str(pairs), "--ckpt", str(ckpt), "--out", str(report)]) == 0

    utts = tmp_path / "utts.csv"
    rows = ["path,group,converted"] + [f"{corpus / t / f'utt00{k}.wav'},{t},0" for t in targets for k in range(3)]
    utts.write_text("\n".join(rows) + "\n")
    assert main(["embed", "--utts", str(utts), "--asv", str(runs / "asv.ckpt"),
                 "--out", str(tmp_path / "emb.csv")]) == 0
    assert main(["project", "--in", str(tmp_path / "emb.csv"), "--method", "tsne",
                 "--out", str(tmp_path / "scatter.csv")]) == 0

    data = json.loads(report.read_text())
    assert len(data["pairs"]) == 16
    agg = data["aggregates"]
    for metric in ("mcd", "f0_mae"):
        values = [p[metric] for p in data["pairs"] if p[metric] is not None]
        # undefined everywhere (nothing voiced) is reported as null, never as 0
        assert agg[metric]["avg"] == (statistics.fmean(values) if values else None)
    record_property("detail", f"16 pairs, MCD avg {agg['mcd']['avg']:.3f} dB equals per-pair mean exactly")
