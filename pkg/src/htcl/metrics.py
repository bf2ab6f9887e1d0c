"""Scene-graph recall metrics: R@K, mR@K, F@K, M@K and per-class recall."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class PredictedTriplet:
    subj: int
    obj: int
    predicate: int
    score: float


def rank_triplets(scores: np.ndarray, pairs: Sequence[tuple[int, int]],
                  graph_constraint: bool = True) -> list[PredictedTriplet]:
    """Order (pair, predicate) candidates by score.

    ``scores`` is (P, C), one row per ordered object pair in ``pairs``. With the
    graph constraint only the best predicate of each pair survives (lowest id
    on ties). Ties in score break by subject, object, predicate ascending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or len(scores) != len(pairs):
        raise ValueError(f"rank_triplets: scores {scores.shape} vs {len(pairs)} pairs")
    if not np.isfinite(scores).all():
        raise ValueError("rank_triplets: non-finite scores")
    out = []
    for (s, o), row in zip(pairs, scores):
        if graph_constraint:
            k = int(np.argmax(row))
            out.append(PredictedTriplet(int(s), int(o), k, float(row[k])))
        else:
            out.extend(PredictedTriplet(int(s), int(o), k, float(v)) for k, v in enumerate(row))
    out.sort(key=lambda t: (-t.score, t.subj, t.obj, t.predicate))
    return out


def image_hits(ranked: Sequence[PredictedTriplet], gt: np.ndarray, K: int) -> np.ndarray:
    """Boolean per GT triplet: found among the top-K predictions."""
    top = {(t.subj, t.obj, t.predicate) for t in ranked[:max(K, 0)]}
    return np.array([(int(s), int(o), int(p)) in top for s, o, p in gt], dtype=bool)


def f_at_k(R: float, mR: float) -> float:
    """Harmonic mean of R and mR (0 when both are 0)."""
    if R < 0 or mR < 0:
        raise ValueError(f"f_at_k: expects non-negative inputs, got {R}, {mR}")
    lo, hi = min(R, mR), max(R, mR)
    if hi == 0:
        return 0.0
    # 2 * lo * hi / (lo + hi), arranged so small inputs do not underflow
    return 2 * lo * (hi / (lo + hi))


def m_at_k(R: float, mR: float) -> float:
    if R < 0 or mR < 0:
        raise ValueError(f"m_at_k: expects non-negative inputs, got {R}, {mR}")
    return (R + mR) / 2


@dataclass
class RecallCounts:
    """Exact tallies at one K, kept as integers so results can be compared as rationals."""

    K: int
    C: int
    image_hits: list[tuple[int, int]] = field(default_factory=list)   # (hits, gt) per image
    class_hits: np.ndarray | None = None
    class_total: np.ndarray | None = None

    def __post_init__(self):
        if self.class_hits is None:
            self.class_hits = np.zeros(self.C, dtype=np.int64)
            self.class_total = np.zeros(self.C, dtype=np.int64)

    def add(self, hits: np.ndarray, gt: np.ndarray) -> None:
        if len(gt) == 0:
            return
        self.image_hits.append((int(hits.sum()), len(gt)))
        preds = gt[:, 2].astype(np.int64)
        np.add.at(self.class_total, preds, 1)
        np.add.at(self.class_hits, preds[hits], 1)

    def recall_fraction(self) -> Fraction:
        if not self.image_hits:
            return Fraction(0)
        return sum((Fraction(h, n) for h, n in self.image_hits), Fraction(0)) / len(self.image_hits)

    def per_class_fraction(self) -> dict[int, Fraction]:
        return {c: Fraction(int(self.class_hits[c]), int(self.class_total[c]))
                for c in range(self.C) if self.class_total[c] > 0}

    def mean_recall_fraction(self) -> Fraction:
        pc = self.per_class_fraction()
        if not pc:
            return Fraction(0)
        return sum(pc.values(), Fraction(0)) / len(pc)

    def recall(self) -> float:
        return float(self.recall_fraction())

    def mean_recall(self) -> float:
        return float(self.mean_recall_fraction())

    def per_class_recall(self) -> np.ndarray:
        """NaN for classes without GT instances."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.class_total > 0,
                            self.class_hits / np.maximum(self.class_total, 1), np.nan)


@dataclass
class MetricsReport:
    task: str
    Ks: list[int]
    R: dict[int, float]
    mR: dict[int, float]
    F: dict[int, float]
    M: dict[int, float]
    per_class: dict[int, list[float]]
    num_images: int
    graph_constraint: bool = True

    def __eq__(self, other: object) -> bool:
        # per-class recall is NaN for classes absent from the split; compare those as equal
        if not isinstance(other, MetricsReport):
            return NotImplemented
        return self.to_json() == other.to_json()

    def rows(self) -> list[tuple[str, int, float]]:
        out = []
        for k in self.Ks:
            out += [("R", k, self.R[k]), ("mR", k, self.mR[k]),
                    ("F", k, self.F[k]), ("M", k, self.M[k])]
        return out

    def to_json(self) -> dict:
        return {"task": self.task, "Ks": self.Ks, "graph_constraint": self.graph_constraint,
                "num_images": self.num_images,
                "R": {str(k): v for k, v in self.R.items()},
                "mR": {str(k): v for k, v in self.mR.items()},
                "F": {str(k): v for k, v in self.F.items()},
                "M": {str(k): v for k, v in self.M.items()},
                "per_class": {str(k): [None if np.isnan(x) else x for x in v]
                              for k, v in self.per_class.items()}}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "K", "value"])
            for row in self.rows():
                w.writerow([row[0], row[1], repr(row[2])])


def recall_counts(ranked_per_image: Iterable[Sequence[PredictedTriplet]],
                  gt_per_image: Iterable[np.ndarray], K: int, C: int) -> RecallCounts:
    counts = RecallCounts(K, C)
    for ranked, gt in zip(ranked_per_image, gt_per_image):
        gt = np.asarray(gt, dtype=np.int64).reshape(-1, 3)
        counts.add(image_hits(ranked, gt, K), gt)
    return counts


def recall_at_k(ranked_per_image, gt_per_image, K: int, C: int) -> float:
    """Mean over images (with at least one GT) of the fraction of GT found in the top K."""
    return recall_counts(ranked_per_image, gt_per_image, K, C).recall()


def mean_recall_at_k(ranked_per_image, gt_per_image, K: int, C: int) -> float:
    """Per-class recall pooled over the split, averaged over classes present in GT."""
    counts = recall_counts(ranked_per_image, gt_per_image, K, C)
    absent = [c for c in range(C) if counts.class_total[c] == 0]
    if absent:
        logger.info("mean_recall_at_k: classes absent from GT excluded: %s", absent)
    return counts.mean_recall()


def evaluate_ranked(ranked_per_image: list[Sequence[PredictedTriplet]],
                    gt_per_image: list[np.ndarray], C: int, Ks=(20, 50),
                    task: str = "predcls", graph_constraint: bool = True) -> MetricsReport:
    R, mR, F, M, per_class = {}, {}, {}, {}, {}
    n_images = 0
    for K in Ks:
        counts = recall_counts(ranked_per_image, gt_per_image, K, C)
        n_images = len(counts.image_hits)
        R[K], mR[K] = counts.recall(), counts.mean_recall()
        F[K], M[K] = f_at_k(R[K], mR[K]), m_at_k(R[K], mR[K])
        per_class[K] = counts.per_class_recall().tolist()
    return MetricsReport(task, list(Ks), R, mR, F, M, per_class, n_images, graph_constraint)


# ---------------------------------------------------------------------------
# prediction interchange

def triplets_to_json(image_id: int, ranked: Sequence[PredictedTriplet]) -> dict:
    return {"image_id": int(image_id),
            "triplets": [{"subj": t.subj, "obj": t.obj, "predicate": t.predicate,
                          "score": t.score} for t in ranked]}


def triplets_from_json(doc: dict) -> tuple[int, list[PredictedTriplet]]:
    if "image_id" not in doc or "triplets" not in doc:
        raise ValueError("prediction record needs 'image_id' and 'triplets'")
    out = []
    for i, t in enumerate(doc["triplets"]):
        try:
            trip = PredictedTriplet(int(t["subj"]), int(t["obj"]), int(t["predicate"]),
                                    float(t["score"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"triplets[{i}]: {e}") from None
        if not np.isfinite(trip.score):
            raise ValueError(f"triplets[{i}].score: not finite")
        out.append(trip)
    return int(doc["image_id"]), out


def save_predictions(path: str | Path, image_ids, ranked_per_image) -> None:
    docs = [triplets_to_json(i, r) for i, r in zip(image_ids, ranked_per_image)]
    Path(path).write_text(json.dumps(docs), encoding="utf-8")


def load_predictions(path: str | Path) -> dict[int, list[PredictedTriplet]]:
    docs = json.loads(Path(path).read_text(encoding="utf-8"))
    return dict(triplets_from_json(d) for d in docs)


# ---------------------------------------------------------------------------
# bias comparison

@dataclass
class BiasReport:
    K: int
    order: list[int]                 # classes by descending training frequency
    counts: list[int]
    recalls: dict[str, list[float]]  # model name -> per-class recall in ``order``
    reports: dict[str, MetricsReport]
    gate: list[float]

    def deltas(self, a: str, b: str) -> dict[str, float]:
        """Metric differences ``b - a`` at this report's K."""
        ra, rb = self.reports[a], self.reports[b]
        return {"dR": rb.R[self.K] - ra.R[self.K], "dmR": rb.mR[self.K] - ra.mR[self.K],
                "dF": rb.F[self.K] - ra.F[self.K], "dM": rb.M[self.K] - ra.M[self.K]}

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        names = list(self.reports)
        comparison = out_dir / "bias_comparison.csv"
        with open(comparison, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "metric", "K", "value"])
            for name in names:
                for metric, k, v in self.reports[name].rows():
                    w.writerow([name, metric, k, repr(v)])
            for a, b in (("baseline", "ft"), ("baseline", "htcl"), ("ft", "htcl")):
                if a in self.reports and b in self.reports:
                    for key, v in self.deltas(a, b).items():
                        w.writerow([f"{b}-{a}", key, self.K, repr(v)])
        plot = out_dir / "per_class_recall.csv"
        with open(plot, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "frequency_rank", "recall_baseline", "recall_ft",
                        "recall_htcl", "gate"])
            for rank, c in enumerate(self.order):
                w.writerow([c, rank] + [repr(self.recalls[n][rank]) for n in
                                        ("baseline", "ft", "htcl")] + [repr(self.gate[c])])
        paths = [comparison, plot]
        for name in names:
            p = out_dir / f"report_{name}.csv"
            self.reports[name].write_csv(p)
            paths.append(p)
        return paths


def bias_report(reports: dict[str, MetricsReport], counts: Sequence[int], gate: Sequence[float],
                K: int) -> BiasReport:
    """Compare models ``baseline``, ``ft`` and ``htcl`` evaluated on one split."""
    sizes = {name: len(r.per_class[K]) for name, r in reports.items()}
    if len(set(sizes.values()) | {len(counts)}) != 1:
        raise ValueError(f"bias_report: class counts differ between models: {sizes}, "
                         f"training counts {len(counts)}")
    counts = np.asarray(counts, dtype=np.int64)
    order = np.argsort(-counts, kind="stable").tolist()
    recalls = {name: [r.per_class[K][c] for c in order] for name, r in reports.items()}
    return BiasReport(K, order, counts.tolist(), recalls, reports, [float(x) for x in gate])
