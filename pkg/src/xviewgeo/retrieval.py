"""Cosine-similarity ranking and retrieval metrics."""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels


@dataclass
class RankedResult:
    """Gallery ids ordered by descending similarity for one query.

    ``rank_of_truth`` is the 0-based rank of the first ground-truth item.
    """

    query_id: object
    order: list
    similarities: list
    rank_of_truth: int
    positive_ranks: list = field(default_factory=list)

    @property
    def n_gallery(self):
        return len(self.order)


@dataclass
class MetricsReport:
    r_at: dict
    r_at_1pct: float
    n_queries: int
    n_gallery: int
    ap: float = None

    def to_dict(self):
        out = {
            "n_queries": self.n_queries,
            "n_gallery": self.n_gallery,
            **{f"R@{k}": v for k, v in sorted(self.r_at.items())},
            "R@1%": self.r_at_1pct,
        }
        if self.ap is not None:
            out["AP"] = self.ap
        return out


def _tie_keys(ids):
    """Integer keys that order ``ids`` ascending (ties in similarity use them)."""
    ids = list(ids)
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    keys = np.empty(len(ids), dtype=np.int64)
    keys[order] = np.arange(len(ids))
    return keys


def _normalize(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def cosine_matrix(queries, gallery, chunk=64):
    """Cosine similarities with one fixed reduction order per pair.

    BLAS matrix products may accumulate different rows in different orders, so
    two identical gallery rows can come out an ulp apart and break the id
    tie rule.  An elementwise product summed along the last axis does not.
    """
    q = _normalize(np.atleast_2d(queries))
    g = _normalize(gallery)
    out = np.empty((q.shape[0], g.shape[0]))
    for i in range(0, q.shape[0], chunk):
        out[i : i + chunk] = (q[i : i + chunk, None, :] * g[None, :, :]).sum(axis=-1)
    return out


def rank_gallery(q, gallery, gallery_ids=None, positives=None, query_id=None):
    """Rank ``gallery`` rows by cosine similarity to ``q``.

    ``positives`` is the id (or collection of ids) of the ground truth.
    Equal similarities are broken by ascending gallery id.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise ValueError("gallery must be a non-empty N x D matrix")
    if gallery_ids is None:
        gallery_ids = list(range(gallery.shape[0]))
    gallery_ids = list(gallery_ids)
    sims = cosine_matrix(q, gallery)[0]
    keys = _tie_keys(gallery_ids)
    order = np.lexsort((keys, -sims))
    ordered_ids = [gallery_ids[i] for i in order]
    pos_ranks = []
    if positives is not None:
        pos = set(positives) if isinstance(positives, (set, frozenset, list, tuple)) else {positives}
        pos_ranks = [r for r, gid in enumerate(ordered_ids) if gid in pos]
        if not pos_ranks:
            raise ValueError(f"none of the positives {sorted(pos)} is in the gallery")
    return RankedResult(
        query_id=query_id,
        order=ordered_ids,
        similarities=sims[order].tolist(),
        rank_of_truth=pos_ranks[0] if pos_ranks else -1,
        positive_ranks=pos_ranks,
    )


def truth_ranks(queries, gallery, truth, gallery_ids=None):
    """Vectorised ranks of one ground-truth gallery row per query.

    Same ordering rule as :func:`rank_gallery`; used by the evaluation loop.
    """
    sims = cosine_matrix(queries, gallery)
    if gallery_ids is None:
        keys = np.arange(sims.shape[1], dtype=np.int64)
    else:
        keys = _tie_keys(gallery_ids)
    return kernels.truth_ranks(sims, np.asarray(truth, dtype=np.int64), keys)


def _ranks_and_size(results, n_gallery=None):
    if len(results) and isinstance(results[0], RankedResult):
        return np.array([r.rank_of_truth for r in results]), results[0].n_gallery
    ranks = np.asarray(results, dtype=np.int64)
    if n_gallery is None:
        raise ValueError("n_gallery is required when passing raw ranks")
    return ranks, n_gallery


def recall_at_k(results, k, n_gallery=None):
    """Fraction of queries whose first ground truth is within the top ``k``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ranks, size = _ranks_and_size(results, n_gallery)
    if ranks.size == 0:
        return 0.0
    k = min(k, size)
    return float(np.count_nonzero(ranks < k)) / ranks.size


def one_percent_k(n_gallery):
    return max(1, -(-n_gallery // 100))


def recall_at_1pct(results, n_gallery=None):
    _, size = _ranks_and_size(results, n_gallery)
    return recall_at_k(results, one_percent_k(size), n_gallery)


def query_average_precision(positive_ranks):
    ranks = np.sort(np.asarray(positive_ranks, dtype=np.int64))
    if ranks.size == 0:
        raise ValueError("query has no positives")
    hits = np.arange(1, ranks.size + 1)
    return float(np.mean(hits / (ranks + 1)))


def average_precision(results, positives=None):
    """Mean over queries of the precision at each positive's rank.

    ``positives`` gives the positive id set per query; when omitted the
    ``positive_ranks`` stored on each result are used.
    """
    aps = []
    for i, res in enumerate(results):
        if positives is None:
            ranks = res.positive_ranks
        else:
            pos = set(positives[i])
            if not pos:
                raise ValueError(f"query {res.query_id!r} has an empty positive set")
            ranks = [r for r, gid in enumerate(res.order) if gid in pos]
        if not ranks:
            raise ValueError(f"query {res.query_id!r} has an empty positive set")
        aps.append(query_average_precision(ranks))
    return float(np.mean(aps)) if aps else 0.0


def rank_distribution(results, bins, n_gallery=None):
    """Histogram of ground-truth ranks.

    ``bins`` is either a number of equal-width bins over ``[0, n_gallery)`` or
    a sequence of bin edges (last bin closed).
    """
    ranks, size = _ranks_and_size(results, n_gallery)
    if np.isscalar(bins):
        nb = int(bins)
        idx = ranks * nb // size
        return np.bincount(idx, minlength=nb)[:nb]
    edges = np.asarray(bins)
    idx = np.searchsorted(edges, ranks, side="right") - 1
    idx[ranks == edges[-1]] = len(edges) - 2
    if (idx < 0).any() or (idx > len(edges) - 2).any():
        raise ValueError("bin edges do not cover every rank")
    return np.bincount(idx, minlength=len(edges) - 1)


def metrics_from_ranks(ranks, n_gallery, ks=(1, 5, 10), ap=None):
    ranks = np.asarray(ranks, dtype=np.int64)
    return MetricsReport(
        r_at={k: recall_at_k(ranks, k, n_gallery) for k in ks},
        r_at_1pct=recall_at_1pct(ranks, n_gallery),
        n_queries=int(ranks.size),
        n_gallery=int(n_gallery),
        ap=ap,
    )


def export_results_json(path, results):
    rows = [
        {"query_id": r.query_id, "rank_of_truth": r.rank_of_truth, "top": r.order[:10]}
        for r in results
    ]
    Path(path).write_text(json.dumps(rows, indent=1))


def export_summary_csv(path, reports):
    """``reports`` maps a setting name to a :class:`MetricsReport`."""
    names = list(reports)
    keys = list(reports[names[0]].to_dict()) if names else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", *keys])
        for name in names:
            d = reports[name].to_dict()
            w.writerow([name, *[d.get(k, "") for k in keys]])


def save_embeddings(path, emb, ids=None):
    """Raw row-major float32 N x D plus a ``.json`` sidecar."""
    emb = np.ascontiguousarray(emb, dtype="<f4")
    path = Path(path)
    path.write_bytes(emb.tobytes())
    meta = {"n": int(emb.shape[0]), "d": int(emb.shape[1]), "dtype": "float32", "ids": ids}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))


def load_embeddings(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    emb = np.frombuffer(path.read_bytes(), dtype="<f4")
    if emb.size != meta["n"] * meta["d"]:
        raise ValueError(f"{path}: expected {meta['n']}x{meta['d']} floats, found {emb.size}")
    return emb.reshape(meta["n"], meta["d"]).copy(), meta.get("ids")

