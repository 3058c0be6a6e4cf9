"""Evaluation suite: retrieval, zero-shot classification, similarity
matrices, per-language z-scores, and projection/search timing.

Everything here is read-only over projected embeddings.  Rankings use
cosine similarity with ties broken toward the lower candidate index.
Report files follow one flat record schema {metric, direction, k,
value}; metrics without a rank cutoff use k = 0.
"""

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import unit_rows
from .projector import ProjectionHead, forward


def project_rows(head: ProjectionHead, rows: np.ndarray) -> np.ndarray:
    """Inference-mode projection of raw encoder rows into the shared space."""
    if head.mode != "inference":
        raise ValueError("projection for evaluation requires an inference-mode head")
    out, _ = forward(head, np.asarray(rows, dtype=np.float64))
    return out


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, rows of a vs rows of b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    return np.clip(unit_rows(a) @ unit_rows(b).T, -1.0, 1.0)


def retrieve_topk(queries: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most-similar candidates per query row.

    Ties break toward the lower index (stable sort on descending
    similarity).  Returns an int array of shape (n_queries, k).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = cosine_matrix(queries, candidates)
    if k > sims.shape[1]:
        raise ValueError(f"k={k} exceeds candidate count {sims.shape[1]}")
    return np.argsort(-sims, axis=1, kind="stable")[:, :k]


def recall_at_k(rankings: np.ndarray, ground_truth, k: int) -> float:
    """Percentage of queries with any correct candidate in the top k.

    ground_truth maps query index -> set of correct candidate indices;
    an image with several captions counts as hit if any caption lands
    in the top k.
    """
    rankings = np.asarray(rankings)
    if k < 1 or k > rankings.shape[1]:
        raise ValueError(f"k={k} outside ranking width {rankings.shape[1]}")
    hits = 0
    for q in range(rankings.shape[0]):
        truth = set(int(t) for t in ground_truth[q])
        if not truth:
            raise ValueError(f"query {q} has empty ground truth")
        if truth.intersection(int(c) for c in rankings[q, :k]):
            hits += 1
    return 100.0 * hits / rankings.shape[0]


@dataclass
class RetrievalReport:
    """Bidirectional recall percentages keyed [direction][k]."""

    recalls: dict
    query_count: int
    candidate_count: int

    def records(self):
        return [
            {"metric": "recall", "direction": direction, "k": int(k), "value": float(v)}
            for direction, per_k in sorted(self.recalls.items())
            for k, v in sorted(per_k.items())
        ]


def index_paired_truth(n: int):
    """Ground truth where query i matches candidate i only."""
    return {i: {i} for i in range(n)}


def caption_group_truth(labels: np.ndarray):
    """i2t/t2i ground truth from caption-group labels.

    labels[j] is the image (group) index described by caption j.
    Returns (i2t, t2i) maps.
    """
    labels = np.asarray(labels, dtype=np.int64)
    i2t = {}
    for j, g in enumerate(labels):
        i2t.setdefault(int(g), set()).add(j)
    t2i = {j: {int(g)} for j, g in enumerate(labels)}
    return i2t, t2i


def retrieval_report(image_rows, text_rows, ks=(1, 5, 10), ground_truth=None,
                     direction="both") -> RetrievalReport:
    """Bidirectional R@k over projected rows.

    With no explicit ground truth, rows are index-paired.  ground_truth,
    when given, is a pair (i2t, t2i) of query->set maps.
    """
    ks = sorted(set(int(k) for k in ks))
    if ground_truth is None:
        n = min(len(image_rows), len(text_rows))
        if len(image_rows) != len(text_rows):
            raise ValueError("index-paired evaluation needs equally many images and texts")
        gt_i2t = index_paired_truth(n)
        gt_t2i = index_paired_truth(n)
    else:
        gt_i2t, gt_t2i = ground_truth

    recalls = {}
    kmax = max(ks)
    if direction in ("both", "i2t"):
        rank = retrieve_topk(image_rows, text_rows, min(kmax, len(text_rows)))
        recalls["i2t"] = {k: recall_at_k(rank, gt_i2t, k) for k in ks if k <= rank.shape[1]}
    if direction in ("both", "t2i"):
        rank = retrieve_topk(text_rows, image_rows, min(kmax, len(image_rows)))
        recalls["t2i"] = {k: recall_at_k(rank, gt_t2i, k) for k in ks if k <= rank.shape[1]}
    if not recalls:
        raise ValueError(f"unknown direction {direction!r}")
    return RetrievalReport(
        recalls=recalls, query_count=len(image_rows), candidate_count=len(text_rows)
    )


@dataclass
class ClassifyReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    confusion: np.ndarray = field(repr=False, default=None)

    def records(self):
        recs = [{"metric": "macro_f1", "direction": "zero_shot", "k": 0,
                 "value": float(self.macro_f1)}]
        for c in range(len(self.f1)):
            for metric, arr in (("precision", self.precision), ("recall", self.recall),
                                ("f1", self.f1)):
                recs.append({"metric": metric, "direction": f"class:{c}", "k": 0,
                             "value": float(arr[c])})
        return recs


def classify_zero_shot(image_rows: np.ndarray, class_rows: np.ndarray,
                       labels: np.ndarray) -> ClassifyReport:
    """Nearest-class-by-cosine prediction with macro-averaged F1.

    class_rows holds one projected embedding per class, row order equal
    to class id.  Per-class F1 is 0 where precision + recall is 0.
    """
    n_classes = len(class_rows)
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != len(image_rows):
        raise ValueError("labels length must equal image count")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label id outside class range")

    sims = cosine_matrix(image_rows, class_rows)
    preds = np.argmax(sims, axis=1)  # argmax takes the lowest index on ties

    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)

    tp = np.diag(confusion).astype(np.float64)
    pred_count = confusion.sum(axis=0).astype(np.float64)
    true_count = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_count > 0, tp / pred_count, 0.0)
        recall = np.where(true_count > 0, tp / true_count, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return ClassifyReport(
        precision=precision, recall=recall, f1=f1,
        macro_f1=float(f1.mean()), confusion=confusion,
    )


def similarity_matrix(rows_a: np.ndarray, rows_b: np.ndarray,
                      csv_path=None, pgm_path=None) -> np.ndarray:
    """Dense cosine matrix with optional CSV / binary-PGM export.

    The PGM maps [-1, 1] linearly onto [0, 255], so a bright diagonal
    against a dark field reads as good alignment.
    """
    mat = cosine_matrix(rows_a, rows_b)
    if csv_path is not None:
        with open(str(csv_path), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for row in mat:
                writer.writerow([f"{v:.8f}" for v in row])
    if pgm_path is not None:
        gray = np.clip(np.rint((mat + 1.0) * 127.5), 0, 255).astype(np.uint8)
        with open(str(pgm_path), "wb") as fh:
            fh.write(f"P5\n{mat.shape[1]} {mat.shape[0]}\n255\n".encode("ascii"))
            fh.write(gray.tobytes(order="C"))
    return mat


def zscore_per_language(scores: dict) -> dict:
    """Average per-language z-score across models.

    scores maps model -> language -> value.  For each model, z-scores
    standardize its languages with the population standard deviation;
    the output averages those z-scores per language across the models
    that cover it.
    """
    per_language = {}
    for model, lang_scores in scores.items():
        if len(lang_scores) < 2:
            raise ValueError(f"model {model!r} needs >= 2 languages")
        values = np.array(list(lang_scores.values()), dtype=np.float64)
        mean = values.mean()
        std = values.std()  # population std
        if std == 0:
            raise ValueError(f"zero std for model {model!r}")
        for lang, value in lang_scores.items():
            per_language.setdefault(lang, []).append((value - mean) / std)
    return {lang: float(np.mean(zs)) for lang, zs in sorted(per_language.items())}


@dataclass
class BenchReport:
    """Per-sample milliseconds for projection and top-k search."""

    projection_ms_median: float
    projection_ms_mean: float
    search_ms_median: float
    search_ms_mean: float
    rows: int
    repeats: int

    @property
    def total_ms_median(self) -> float:
        return self.projection_ms_median + self.search_ms_median

    @property
    def total_ms_mean(self) -> float:
        return self.projection_ms_mean + self.search_ms_mean


def bench_inference(head: ProjectionHead, rows: np.ndarray, repeats: int,
                    k: int = 10) -> BenchReport:
    """Wall time per sample for projecting rows and searching top-k.

    The first 3 repeats warm caches and are excluded from the stats.
    """
    if repeats < 10:
        raise ValueError(f"repeats must be >= 10, got {repeats}")
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[0]
    proj_ms, search_ms = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        projected = project_rows(head, rows)
        t1 = time.perf_counter()
        retrieve_topk(projected, projected, min(k, n))
        t2 = time.perf_counter()
        proj_ms.append((t1 - t0) * 1e3 / n)
        search_ms.append((t2 - t1) * 1e3 / n)
    proj = np.array(proj_ms[3:])
    search = np.array(search_ms[3:])
    return BenchReport(
        projection_ms_median=float(np.median(proj)),
        projection_ms_mean=float(proj.mean()),
        search_ms_median=float(np.median(search)),
        search_ms_mean=float(search.mean()),
        rows=n,
        repeats=repeats,
    )


def write_records_json(records, path) -> None:
    """Write a report as the flat {metric, direction, k, value} record list."""
    for rec in records:
        if set(rec) != {"metric", "direction", "k", "value"}:
            raise ValueError(f"record does not match report schema: {rec}")
    with open(str(path), "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
