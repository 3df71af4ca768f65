"""Ranking and matching metrics for relationship predictions.

Predictions are ranked per image with a total, deterministic order:
descending score, then subject id, object id, predicate id. Recall@N
walks the top N in rank order and greedily consumes at most one
unmatched GT relation per prediction (lowest GT index first), with the
localization rule set by the task:

* ``predicate`` / ``predcls`` / ``phrcls``: boxes are the GT boxes, so
  localization is exact box identity;
* ``phrase``: IoU of the two union boxes at or above the threshold;
* ``relationship`` / ``sggen``: both subject and object IoU at or above
  the threshold.

Retrieval mAP ranks candidates dataset-wide per query and uses
non-interpolated AP: the sum of precision at each positive rank divided
by the number of GT instances. Per-predicate detection AP works the
same way with positives grouped by predicate. Aggregates are
micro-averaged; images or queries with zero GT are excluded.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, iou, union_box
from .util import canonical_json

RECALL_TASKS = ("predicate", "predcls", "phrcls", "phrase", "relationship", "sggen")
IDENTITY_TASKS = ("predicate", "predcls", "phrcls")
RETRIEVAL_MODES = ("with_gt", "union", "subj", "subj_obj")


@dataclass(frozen=True)
class ScoredTriplet:
    """One ranked relationship prediction."""

    image_id: str
    subject_id: int
    subject_box: Box
    subject_class: int
    object_id: int
    object_box: Box
    object_class: int
    predicate_id: int
    score: float


@dataclass(frozen=True)
class GroundTruthTriplet:
    subject_box: Box
    subject_class: int
    object_box: Box
    object_class: int
    predicate_id: int


@dataclass(frozen=True)
class RetrievalCandidate:
    """A scored box pair proposed for one retrieval query."""

    image_id: str
    subject_id: int
    object_id: int
    subject_box: Box
    object_box: Box
    score: float


@dataclass(frozen=True)
class GroundTruthPair:
    """A GT instance of a retrieval query in some image."""

    image_id: str
    subject_box: Box
    object_box: Box


def _rank_key(t: ScoredTriplet):
    return (-t.score, t.subject_id, t.object_id, t.predicate_id)


def rank_predictions(
    image_id: str,
    pair_scores: Iterable[tuple],
    k_per_pair: int = 1,
) -> list[ScoredTriplet]:
    """Turn per-pair predicate scores into one ranked per-image list.

    Args:
        image_id: image the pairs belong to.
        pair_scores: iterables of (subject, object, scores) where
            subject/object expose object_id, box, class_id and `scores`
            holds one score per real predicate (background already
            removed).
        k_per_pair: how many top predicates each pair may contribute.

    Returns:
        All kept triplets sorted by (-score, subject_id, object_id,
        predicate_id); the tie-break makes the order total, so any
        permutation of equal-score inputs ranks identically.
    """
    if k_per_pair < 1:
        raise ValueError(f"k_per_pair must be >= 1, got {k_per_pair}")
    kept: list[ScoredTriplet] = []
    for subject, obj, scores in pair_scores:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 1 or scores.size == 0:
            raise ValueError(f"pair score vector must be non-empty 1-D, got shape {scores.shape}")
        # Stable argsort of -scores: ties come out in ascending predicate id.
        order = np.argsort(-scores, kind="stable")[: min(k_per_pair, scores.size)]
        for p in order:
            kept.append(
                ScoredTriplet(
                    image_id=image_id,
                    subject_id=subject.object_id,
                    subject_box=subject.box,
                    subject_class=subject.class_id,
                    object_id=obj.object_id,
                    object_box=obj.box,
                    object_class=obj.class_id,
                    predicate_id=int(p),
                    score=float(scores[p]),
                )
            )
    kept.sort(key=_rank_key)
    return kept


def prediction_matches(
    pred: ScoredTriplet, gt: GroundTruthTriplet, task: str, iou_threshold: float
) -> bool:
    """Label plus task-specific localization test for a single pair."""
    if task not in RECALL_TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {RECALL_TASKS}")
    if (
        pred.subject_class != gt.subject_class
        or pred.object_class != gt.object_class
        or pred.predicate_id != gt.predicate_id
    ):
        return False
    if task in IDENTITY_TASKS:
        return pred.subject_box == gt.subject_box and pred.object_box == gt.object_box
    if task == "phrase":
        pred_u = union_box(pred.subject_box, pred.object_box)
        gt_u = union_box(gt.subject_box, gt.object_box)
        return iou(pred_u, gt_u) >= iou_threshold
    return (
        iou(pred.subject_box, gt.subject_box) >= iou_threshold
        and iou(pred.object_box, gt.object_box) >= iou_threshold
    )


def match_count(
    ranked: Sequence[ScoredTriplet],
    gts: Sequence[GroundTruthTriplet],
    task: str,
    n: int,
    iou_threshold: float = 0.5,
) -> int:
    """Greedy top-N matching: each GT is consumed at most once.

    Predictions are walked in rank order; each one consumes the first
    (lowest-index) unmatched GT it matches.
    """
    consumed = [False] * len(gts)
    matched = 0
    for pred in ranked[:n]:
        for gi, gt in enumerate(gts):
            if consumed[gi]:
                continue
            if prediction_matches(pred, gt, task, iou_threshold):
                consumed[gi] = True
                matched += 1
                break
    return matched


def match_and_recall(
    preds_by_image: Mapping[str, Sequence[ScoredTriplet]],
    gt_by_image: Mapping[str, Sequence[GroundTruthTriplet]],
    task: str,
    n: int,
    iou_threshold: float = 0.5,
) -> float:
    """Micro-averaged recall@N over a dataset.

    Total matched over total GT across all images; images with zero GT
    contribute nothing (recall is undefined there). Raises if no image
    has any GT at all.
    """
    total_matched = 0
    total_gt = 0
    for image_id, gts in gt_by_image.items():
        if not gts:
            continue
        ranked = preds_by_image.get(image_id, ())
        total_matched += match_count(ranked, gts, task, n, iou_threshold)
        total_gt += len(gts)
    if total_gt == 0:
        raise ValueError("recall is undefined: no image has GT relations")
    return total_matched / total_gt


def recall_counts(
    preds_by_image: Mapping[str, Sequence[ScoredTriplet]],
    gt_by_image: Mapping[str, Sequence[GroundTruthTriplet]],
    task: str,
    n: int,
    iou_threshold: float = 0.5,
) -> tuple[int, int]:
    """(matched, total GT) behind `match_and_recall`, for reporting."""
    matched = 0
    total = 0
    for image_id, gts in gt_by_image.items():
        if not gts:
            continue
        matched += match_count(preds_by_image.get(image_id, ()), gts, task, n, iou_threshold)
        total += len(gts)
    return matched, total


# ---------------------------------------------------------------------------
# Retrieval-style average precision
# ---------------------------------------------------------------------------


def _retrieval_key(c: RetrievalCandidate):
    return (-c.score, c.image_id, c.subject_id, c.object_id)


def _pair_matches(cand: RetrievalCandidate, gt: GroundTruthPair, mode: str, thr: float) -> bool:
    if cand.image_id != gt.image_id:
        return False
    if mode == "union":
        return iou(union_box(cand.subject_box, cand.object_box),
                   union_box(gt.subject_box, gt.object_box)) >= thr
    if mode == "subj":
        return iou(cand.subject_box, gt.subject_box) >= thr
    # with_gt candidates are GT pairs themselves, so the strict rule
    # (both boxes) is also the right degenerate test for them.
    return (
        iou(cand.subject_box, gt.subject_box) >= thr
        and iou(cand.object_box, gt.object_box) >= thr
    )


def retrieval_ap(
    candidates: Sequence[RetrievalCandidate],
    gt_instances: Sequence[GroundTruthPair],
    mode: str,
    iou_threshold: float = 0.3,
) -> float:
    """Non-interpolated AP of one query over dataset-wide candidates.

    Candidates are ranked by (-score, image_id, subject_id, object_id);
    walking down the ranking, a candidate is a true positive when it
    localizes an unconsumed GT instance in its image under `mode`
    (lowest GT index consumed first). AP is the sum of precision at
    each true-positive rank divided by the number of GT instances.
    """
    if mode not in RETRIEVAL_MODES:
        raise ValueError(f"mode must be one of {RETRIEVAL_MODES}, got {mode!r}")
    if not gt_instances:
        raise ValueError("AP is undefined for a query with zero GT instances")
    ranked = sorted(candidates, key=_retrieval_key)
    consumed = [False] * len(gt_instances)
    true_pos = 0
    precision_sum = 0.0
    for rank, cand in enumerate(ranked, start=1):
        for gi, gt in enumerate(gt_instances):
            if consumed[gi]:
                continue
            if _pair_matches(cand, gt, mode, iou_threshold):
                consumed[gi] = True
                true_pos += 1
                precision_sum += true_pos / rank
                break
    return precision_sum / len(gt_instances)


def unrel_map(
    queries: Sequence[tuple[int, int, int]],
    candidates_by_query: Sequence[Sequence[RetrievalCandidate]],
    gt_by_query: Sequence[Sequence[GroundTruthPair]],
    mode: str,
    iou_threshold: float = 0.3,
) -> tuple[float, list[float | None]]:
    """Mean AP over retrieval queries.

    Queries with zero GT instances are excluded from the mean with a
    warning and reported as None. Returns (mAP, per-query APs aligned
    with `queries`).
    """
    if not (len(queries) == len(candidates_by_query) == len(gt_by_query)):
        raise ValueError("queries, candidates, and GT lists must align")
    per_query: list[float | None] = []
    kept: list[float] = []
    for query, cands, gts in zip(queries, candidates_by_query, gt_by_query):
        if not gts:
            warnings.warn(f"query {query} has no GT instances; excluded from mAP")
            per_query.append(None)
            continue
        ap = retrieval_ap(cands, gts, mode, iou_threshold)
        per_query.append(ap)
        kept.append(ap)
    if not kept:
        raise ValueError("every query has zero GT instances")
    return float(np.mean(kept)), per_query


# ---------------------------------------------------------------------------
# Per-predicate detection AP (phrase and relationship flavors)
# ---------------------------------------------------------------------------


def per_predicate_ap(
    predictions: Sequence[ScoredTriplet],
    gt_by_image: Mapping[str, Sequence[GroundTruthTriplet]],
    box_mode: str = "both",
    iou_threshold: float = 0.5,
) -> dict[int, float]:
    """AP per predicate over dataset-wide rankings.

    `box_mode="both"` requires subject and object IoU at the threshold;
    `"union"` tests the union boxes instead. Class labels must match in
    either mode. Only predicates with at least one GT get an AP.
    """
    if box_mode not in ("both", "union"):
        raise ValueError(f"box_mode must be 'both' or 'union', got {box_mode!r}")
    task = "relationship" if box_mode == "both" else "phrase"

    gt_index: dict[int, dict[str, list[GroundTruthTriplet]]] = {}
    for image_id, gts in gt_by_image.items():
        for gt in gts:
            gt_index.setdefault(gt.predicate_id, {}).setdefault(image_id, []).append(gt)

    result: dict[int, float] = {}
    for predicate_id, by_image in sorted(gt_index.items()):
        n_gt = sum(len(v) for v in by_image.values())
        cands = sorted(
            (t for t in predictions if t.predicate_id == predicate_id),
            key=lambda t: (-t.score, t.image_id, t.subject_id, t.object_id),
        )
        consumed = {img: [False] * len(gts) for img, gts in by_image.items()}
        true_pos = 0
        precision_sum = 0.0
        for rank, pred in enumerate(cands, start=1):
            gts = by_image.get(pred.image_id)
            if gts is None:
                continue
            flags = consumed[pred.image_id]
            for gi, gt in enumerate(gts):
                if flags[gi]:
                    continue
                if prediction_matches(pred, gt, task, iou_threshold):
                    flags[gi] = True
                    true_pos += 1
                    precision_sum += true_pos / rank
                    break
        result[predicate_id] = precision_sum / n_gt
    return result


def mean_ap(per_predicate: Mapping[int, float]) -> float:
    if not per_predicate:
        raise ValueError("mAP is undefined with no predicates")
    return float(np.mean(list(per_predicate.values())))


# ---------------------------------------------------------------------------
# Composite and pointwise scores
# ---------------------------------------------------------------------------


def open_images_score(recall_rel: float, map_rel: float, map_phr: float) -> float:
    """Weighted composite 0.2 * R@N + 0.4 * mAP_rel + 0.4 * mAP_phr."""
    for name, v in (("recall_rel", recall_rel), ("map_rel", map_rel), ("map_phr", map_phr)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {v}")
    return 0.2 * recall_rel + 0.4 * map_rel + 0.4 * map_phr


def attribute_score(z_subject: float, z_attribute: float) -> float:
    """Score of an (object, is, attribute) triplet: detection times attribute."""
    return z_subject * z_attribute


# ---------------------------------------------------------------------------
# Scene-graph documents and metric reports
# ---------------------------------------------------------------------------


def emit_scene_graph(
    record,
    ranked: Sequence[ScoredTriplet],
    top_n: int = 20,
    vocab=None,
) -> dict:
    """Serializable scene graph: all detections as nodes, top-N edges.

    Node and edge order is deterministic (object id; rank). Class and
    predicate fields carry names when a vocab is given, ids otherwise.
    """

    def class_label(class_id: int):
        return vocab.classes[class_id] if vocab is not None else class_id

    def predicate_label(predicate_id: int):
        return vocab.predicates[predicate_id] if vocab is not None else predicate_id

    nodes = [
        {
            "object_id": obj.object_id,
            "class": class_label(obj.class_id),
            "box": [obj.box.x, obj.box.y, obj.box.w, obj.box.h],
            "score": obj.score,
        }
        for obj in sorted(record.objects, key=lambda o: o.object_id)
    ]
    edges = [
        {
            "s": t.subject_id,
            "o": t.object_id,
            "predicate": predicate_label(t.predicate_id),
            "score": t.score,
        }
        for t in ranked[:top_n]
    ]
    return {"image_id": record.image_id, "nodes": nodes, "edges": edges}


@dataclass
class MetricsReport:
    """Everything one evaluation run reports, as a canonical document."""

    task: str
    metrics: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_document(self) -> dict:
        return {
            "task": self.task,
            "metrics": self.metrics,
            "counts": self.counts,
            "config": self.config,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_document())
