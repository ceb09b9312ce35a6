"""Objective metrics and embedding-similarity analysis.

* DTW-aligned mel-cepstral distortion (c0 excluded) in dB.
* F0 mean absolute error over mutually voiced frames of the same alignment.
* D-vector tables, 2-D projections and per-group centroid distances.
"""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import F0Track

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)
INTRA_TAGS = ("F2F", "M2M")
INTER_TAGS = ("F2M", "M2F")


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise ValueError("DTW needs two non-empty (T, order+1) mel-cepstral sequences")
    if a.shape[1] != b.shape[1]:
        raise ValueError("mel-cepstral orders differ")
    return a, b


def local_costs(a, b) -> np.ndarray:
    """Euclidean distance over c1..cN for every frame pair."""
    a, b = _check(a, b)
    diff = a[:, None, 1:] - b[None, :, 1:]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def dtw_align(a, b) -> list[tuple[int, int]]:
    """Minimum-cost monotonic path with unit steps (diagonal, i, or j).

    Ties in the backtrace prefer the diagonal, then the i-step.
    """
    cost = local_costs(a, b)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev, c = acc[i], acc[i - 1], cost[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = c[j - 1] + best

    i, j = n, m
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
        if diag <= up and diag <= left:
            i, j = i - 1, j - 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    path.reverse()
    return path


def path_cost(a, b, path) -> float:
    cost = local_costs(a, b)
    return float(sum(cost[i, j] for i, j in path))


def mcd_along(a, b, path) -> float:
    """Mean per-frame MCD (dB) over the pairs of ``path``."""
    a, b = _check(a, b)
    idx_a = np.array([p[0] for p in path])
    idx_b = np.array([p[1] for p in path])
    d = a[idx_a, 1:] - b[idx_b, 1:]
    return float(MCD_CONST * np.mean(np.sqrt(np.sum(d * d, axis=1))))


def dtw_mcd(a, b, return_path=False):
    path = dtw_align(a, b)
    value = mcd_along(a, b, path)
    return (value, path) if return_path else value


def f0_mae(fa: F0Track, fb: F0Track, path) -> float | None:
    """Mean |F0 difference| over aligned pairs voiced on both sides.

    Returns ``None`` when no aligned pair is voiced on both sides.
    """
    ia = np.array([p[0] for p in path])
    ib = np.array([p[1] for p in path])
    if ia.max() >= len(fa.f0_hz) or ib.max() >= len(fb.f0_hz):
        raise ValueError("alignment path indexes past the end of an F0 track")
    both = fa.voiced[ia] & fb.voiced[ib]
    if not np.any(both):
        return None
    return float(np.mean(np.abs(fa.f0_hz[ia[both]] - fb.f0_hz[ib[both]])))


# -- reports ----------------------------------------------------------------

@dataclass
class PairResult:
    source: str
    target: str
    reference: str
    tag: str | None
    mcd: float
    f0_mae: float | None


def _mean(values):
    vals = [v for v in values if v is not None]
    return statistics.fmean(vals) if vals else None


@dataclass
class EvalReport:
    pairs: list[PairResult]
    metadata: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        out = {}
        for metric in ("mcd", "f0_mae"):
            vals = {"avg": [getattr(p, metric) for p in self.pairs]}
            if all(p.tag for p in self.pairs):
                vals["inter"] = [getattr(p, metric) for p in self.pairs if p.tag in INTER_TAGS]
                vals["intra"] = [getattr(p, metric) for p in self.pairs if p.tag in INTRA_TAGS]
            out[metric] = {k: _mean(v) for k, v in vals.items()}
        return out

    def to_dict(self) -> dict:
        return {"metadata": self.metadata,
                "aggregates": self.aggregates(),
                "pairs": [p.__dict__ for p in self.pairs]}

    def write(self, json_path, csv_path=None) -> None:
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# config_hash: {self.metadata.get('config_hash', '')}\n")
            w = csv.writer(fh)
            w.writerow(["source", "target", "reference", "tag", "mcd", "f0_mae"])
            for p in self.pairs:
                w.writerow([p.source, p.target, p.reference, p.tag or "", repr(p.mcd),
                            "" if p.f0_mae is None else repr(p.f0_mae)])


# -- embeddings -------------------------------------------------------------

@dataclass
class EmbeddingTable:
    ids: list[str]
    groups: list[str]
    converted: list[bool]
    vectors: np.ndarray
    config_hash: str = ""

    def __len__(self):
        return len(self.ids)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash: {self.config_hash}\n")
            w = csv.writer(fh)
            w.writerow(["id", "group", "converted"] + [f"e{k}" for k in range(self.vectors.shape[1])])
            for i, g, c, v in zip(self.ids, self.groups, self.converted, self.vectors):
                w.writerow([i, g, int(c)] + [repr(float(x)) for x in v])

    @classmethod
    def read_csv(cls, path) -> "EmbeddingTable":
        config_hash, rows = _read_commented_csv(path)
        ids = [r["id"] for r in rows]
        groups = [r["group"] for r in rows]
        conv = [r["converted"] in ("1", "true", "True") for r in rows]
        keys = [k for k in rows[0] if k.startswith("e") and k[1:].isdigit()] if rows else []
        vecs = np.array([[float(r[k]) for k in keys] for r in rows], dtype=np.float64)
        return cls(ids, groups, conv, vecs.reshape(len(rows), len(keys)), config_hash)


def _read_commented_csv(path):
    config_hash = ""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            if "config_hash:" in line:
                config_hash = line.split("config_hash:", 1)[1].strip()
            continue
        body.append(line)
    return config_hash, list(csv.DictReader(body))


def export_embeddings(items, asv, dvector_window=160, config_hash="") -> EmbeddingTable:
    """D-vector table for ``items`` = iterable of ``(id, group, converted, mel)``.

    Similarity is always measured in the ASV's D-vector space, whatever
    speaker-embedding variant produced the converted utterances.
    """
    from .asv import dvector

    if asv is None:
        raise ValueError("exporting D-vector embeddings needs an ASV model")
    ids, groups, conv, vecs = [], [], [], []
    for uid, group, converted, mel in items:
        ids.append(str(uid))
        groups.append(str(group))
        conv.append(bool(converted))
        vecs.append(dvector(asv, mel, dvector_window).numpy().astype(np.float64))
    vectors = np.stack(vecs) if vecs else np.zeros((0, 256))
    return EmbeddingTable(ids, groups, conv, vectors, config_hash)


@dataclass
class EmbeddingScatter:
    ids: list[str]
    groups: list[str]
    converted: list[bool]
    xy: np.ndarray
    config_hash: str = ""

    def __len__(self):
        return len(self.ids)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash: {self.config_hash}\n")
            w = csv.writer(fh)
            w.writerow(["id", "group", "converted", "x", "y"])
            for i, g, c, (x, y) in zip(self.ids, self.groups, self.converted, self.xy):
                w.writerow([i, g, int(c), repr(float(x)), repr(float(y))])

    @classmethod
    def read_csv(cls, path) -> "EmbeddingScatter":
        config_hash, rows = _read_commented_csv(path)
        xy = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(len(rows), 2)
        return cls([r["id"] for r in rows], [r["group"] for r in rows],
                   [r["converted"] == "1" for r in rows], xy, config_hash)


def pca_2d(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    centred = x - x.mean(axis=0)
    if not np.any(np.abs(centred) > 1e-12):
        return np.zeros((len(x), 2))
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:2]
    # sign convention: largest-magnitude loading of each component is positive
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    out = centred @ comps.T
    if out.shape[1] < 2:
        out = np.pad(out, ((0, 0), (0, 2 - out.shape[1])))
    return out


def project_2d(table: EmbeddingTable, method="pca", seed=0, perplexity=10.0) -> EmbeddingScatter:
    if len(table) < 3:
        raise ValueError("projection needs at least 3 embeddings")
    if method == "pca":
        xy = pca_2d(table.vectors)
    elif method == "tsne":
        if not np.any(np.abs(table.vectors - table.vectors[0]) > 1e-12):
            xy = np.zeros((len(table), 2))
        else:
            from sklearn.manifold import TSNE
            xy = TSNE(n_components=2, perplexity=min(perplexity, len(table) - 1.0),
                      init="pca", random_state=seed).fit_transform(table.vectors)
    else:
        raise ValueError(f"unknown projection method {method!r}")
    return EmbeddingScatter(list(table.ids), list(table.groups), list(table.converted),
                            np.asarray(xy, dtype=np.float64), table.config_hash)


@dataclass
class GroupStats:
    group: str
    n_converted: int
    intra: float
    inter: float | None

    @property
    def closer_to_own(self) -> bool | None:
        return None if self.inter is None else self.intra < self.inter


def similarity_stats(data) -> dict[str, GroupStats]:
    """Per conversion group: converted-to-own-target-centroid distance vs nearest other target.

    ``data`` is an :class:`EmbeddingTable` or :class:`EmbeddingScatter`;
    ground-truth (non-converted) rows define the target centroids.
    """
    pts = data.vectors if isinstance(data, EmbeddingTable) else data.xy
    groups = np.array(data.groups)
    conv = np.array(data.converted, dtype=bool)
    names = sorted(set(groups[~conv]))
    centroids = {g: pts[(groups == g) & ~conv].mean(axis=0) for g in names}
    out = {}
    for g in names:
        rows = pts[(groups == g) & conv]
        if len(rows) == 0:
            continue
        intra = float(np.mean(np.linalg.norm(rows - centroids[g], axis=1)))
        others = [centroids[h] for h in names if h != g]
        inter = None
        if others:
            d = np.stack([np.linalg.norm(rows - c, axis=1) for c in others])
            inter = float(np.mean(d.min(axis=0)))
        out[g] = GroupStats(g, len(rows), intra, inter)
    return out


def similarity_ratio(stats: dict[str, GroupStats]) -> float | None:
    """Mean intra distance over mean inter distance (lower is better)."""
    pairs = [(s.intra, s.inter) for s in stats.values() if s.inter is not None]
    if not pairs:
        return None
    return statistics.fmean(p[0] for p in pairs) / statistics.fmean(p[1] for p in pairs)
