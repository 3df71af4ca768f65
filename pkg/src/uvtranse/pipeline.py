"""Wiring between dataset records, trained models, and the metric suite.

Scoring is per image and read-only on the models, so a worker pool can
fan out over images; results are aggregated by image id, which makes
the output independent of completion order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Mapping, Sequence

import numpy as np

from .data import ImageRecord, Vocab, build_triplet_features, label_triples, split_zero_shot
from .evaluation import (
    GroundTruthPair,
    GroundTruthTriplet,
    MetricsReport,
    RetrievalCandidate,
    ScoredTriplet,
    emit_scene_graph,
    mean_ap,
    open_images_score,
    per_predicate_ap,
    rank_predictions,
    recall_counts,
    retrieval_ap,
    unrel_map,
)
from .language import LanguageModel, WordTable
from .model import FeatureBatch, VisualModel

GT_BOX_TASKS = ("predicate", "predcls")


def gt_triplets(record: ImageRecord) -> list[GroundTruthTriplet]:
    objs = record.object_map()
    return [
        GroundTruthTriplet(
            subject_box=objs[s_id].box,
            subject_class=objs[s_id].class_id,
            object_box=objs[o_id].box,
            object_class=objs[o_id].class_id,
            predicate_id=p_id,
        )
        for s_id, p_id, o_id in record.gt_relations
    ]


def candidate_objects(record: ImageRecord, task: str, top_proposals: int | None = None):
    """Which objects propose pairs for a task.

    GT-box tasks use only objects referenced by GT relations; detection
    tasks use all objects, keeping the `top_proposals` highest-scoring
    (ties broken by object id).
    """
    if task in GT_BOX_TASKS:
        objs = record.object_map()
        referenced: list[int] = []
        for s_id, _, o_id in record.gt_relations:
            for oid in (s_id, o_id):
                if oid not in referenced:
                    referenced.append(oid)
        return [objs[oid] for oid in sorted(referenced)]
    ranked = sorted(record.objects, key=lambda o: (-o.score, o.object_id))
    if top_proposals is not None:
        ranked = ranked[:top_proposals]
    return sorted(ranked, key=lambda o: o.object_id)


def pair_predicate_scores(
    visual: VisualModel,
    record: ImageRecord,
    objects: Sequence,
    language: LanguageModel | None = None,
    words: WordTable | None = None,
    vocab: Vocab | None = None,
    alpha: float = 0.5,
) -> list[tuple]:
    """Score every ordered pair of distinct candidate objects.

    Returns (subject, object, per-predicate score vector) per pair. The
    background column is dropped after the softmax, and when a language
    model is given the vector is the per-predicate rank score
    combination for the configured score mode.
    """
    pairs = [(s, o) for s in objects for o in objects if s.object_id != o.object_id]
    if not pairs:
        return []
    feats = [build_triplet_features(record, s, o)[0] for s, o in pairs]
    batch = FeatureBatch.from_triplets(feats)
    z_p, phat = visual.apply_scores(batch)
    n_pred = visual.config.n_predicates
    z_p = z_p[:, :n_pred]

    z_l = None
    if language is not None:
        if words is None or vocab is None:
            raise ValueError("language scoring requires a word table and a vocab")
        subj_vecs = words.lookup_many([vocab.classes[s.class_id] for s, _ in pairs])
        obj_vecs = words.lookup_many([vocab.classes[o.class_id] for _, o in pairs])
        z_l = language.apply_scores(phat, subj_vecs, obj_vecs)[:, :n_pred]

    mode = visual.config.score_mode
    out = []
    for i, (s, o) in enumerate(pairs):
        z_pair = z_p[i] if z_l is None else alpha * z_p[i] + (1.0 - alpha) * z_l[i]
        if mode == "sum":
            vec = s.score + o.score + z_pair
        else:
            vec = s.score * o.score * z_pair
        out.append((s, o, vec))
    return out


def score_record(
    visual: VisualModel,
    record: ImageRecord,
    task: str,
    k_per_pair: int = 1,
    top_proposals: int | None = None,
    language: LanguageModel | None = None,
    words: WordTable | None = None,
    vocab: Vocab | None = None,
    alpha: float = 0.5,
) -> list[ScoredTriplet]:
    """Ranked triplet predictions for one image."""
    objects = candidate_objects(record, task, top_proposals)
    pair_scores = pair_predicate_scores(
        visual, record, objects, language=language, words=words, vocab=vocab, alpha=alpha
    )
    return rank_predictions(record.image_id, pair_scores, k_per_pair)


def score_dataset(
    visual: VisualModel,
    records: Sequence[ImageRecord],
    task: str,
    k_per_pair: int = 1,
    top_proposals: int | None = None,
    language: LanguageModel | None = None,
    words: WordTable | None = None,
    vocab: Vocab | None = None,
    alpha: float = 0.5,
    threads: int = 1,
) -> dict[str, list[ScoredTriplet]]:
    """Per-image ranked predictions, optionally scored by a worker pool."""

    def one(record: ImageRecord) -> tuple[str, list[ScoredTriplet]]:
        return record.image_id, score_record(
            visual, record, task, k_per_pair, top_proposals,
            language=language, words=words, vocab=vocab, alpha=alpha,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]
    return dict(results)


def evaluate_recall(
    visual: VisualModel,
    records: Sequence[ImageRecord],
    task: str,
    recall_at: Sequence[int] = (50, 100),
    k_per_pair: int = 1,
    iou_threshold: float = 0.5,
    top_proposals: int | None = None,
    language: LanguageModel | None = None,
    words: WordTable | None = None,
    vocab: Vocab | None = None,
    alpha: float = 0.5,
    threads: int = 1,
    train_records: Sequence[ImageRecord] | None = None,
) -> MetricsReport:
    """Recall@N for one task, with a zero-shot breakdown when train data is given."""
    preds = score_dataset(
        visual, records, task, k_per_pair, top_proposals,
        language=language, words=words, vocab=vocab, alpha=alpha, threads=threads,
    )
    gt_by_image = {r.image_id: gt_triplets(r) for r in records}

    metrics: dict = {}
    counts: dict = {"gt_total": sum(len(v) for v in gt_by_image.values())}
    for n in recall_at:
        matched, total = recall_counts(preds, gt_by_image, task, n, iou_threshold)
        metrics[f"recall@{n}"] = matched / total if total else 0.0
        counts[f"matched@{n}"] = matched

    if train_records is not None:
        seen, zero_shot = split_zero_shot(train_records, records)
        for name, subset in (("seen", seen), ("zero_shot", zero_shot)):
            sub_gt = {r.image_id: gt_triplets(r) for r in subset}
            total = sum(len(v) for v in sub_gt.values())
            counts[f"{name}_gt_total"] = total
            for n in recall_at:
                matched, _ = recall_counts(preds, sub_gt, task, n, iou_threshold)
                metrics[f"{name}_recall@{n}"] = matched / total if total else 0.0
    return MetricsReport(task=task, metrics=metrics, counts=counts)


def predicate_accuracy(
    visual: VisualModel,
    records: Sequence[ImageRecord],
    restrict_to: set[tuple[int, int, int]] | None = None,
) -> tuple[float, int]:
    """Top-1 predicate accuracy over GT pairs (optionally only some triples).

    For every GT relation (restricted to label triples in `restrict_to`
    when given), the model scores the GT subject/object pair and the
    argmax over real predicates is compared with the annotation.
    Returns (accuracy, number of relations evaluated).
    """
    correct = 0
    total = 0
    n_pred = visual.config.n_predicates
    for record in records:
        objs = record.object_map()
        rels = record.gt_relations
        if restrict_to is not None:
            rels = [
                r for r in rels
                if (objs[r[0]].class_id, r[1], objs[r[2]].class_id) in restrict_to
            ]
        if not rels:
            continue
        feats = [
            build_triplet_features(record, objs[s_id], objs[o_id])[0]
            for s_id, _, o_id in rels
        ]
        scores, _ = visual.apply_scores(FeatureBatch.from_triplets(feats))
        picks = np.argmax(scores[:, :n_pred], axis=1)
        for (_, p_id, _), pick in zip(rels, picks):
            correct += int(pick == p_id)
            total += 1
    if total == 0:
        raise ValueError("no GT relations to evaluate")
    return correct / total, total


# ---------------------------------------------------------------------------
# Retrieval evaluation
# ---------------------------------------------------------------------------


def evaluate_retrieval(
    visual: VisualModel,
    records: Sequence[ImageRecord],
    mode: str,
    iou_threshold: float = 0.3,
    alpha: float = 0.5,
    language: LanguageModel | None = None,
    words: WordTable | None = None,
    vocab: Vocab | None = None,
) -> MetricsReport:
    """Query-by-triple retrieval mAP over the whole dataset.

    Queries are the distinct GT label triples. In `with_gt` mode the
    candidates are the annotated GT pairs whose classes match the query,
    ranked purely by the predicate score; in the detection modes every
    ordered detection pair with matching classes is a candidate, ranked
    by the full triplet score.
    """
    queries = sorted(
        {
            (r.object_map()[s].class_id, p, r.object_map()[o].class_id)
            for r in records
            for s, p, o in r.gt_relations
        }
    )
    with_gt = mode == "with_gt"

    # Precompute per-record predicate score matrices for candidate pairs.
    per_record: list[tuple[ImageRecord, list, np.ndarray]] = []
    for record in records:
        if with_gt:
            objs = record.object_map()
            pairs = sorted({(s, o) for s, _, o in record.gt_relations})
            pair_objs = [(objs[s], objs[o]) for s, o in pairs]
        else:
            objects = candidate_objects(record, "relationship")
            pair_objs = [
                (s, o) for s in objects for o in objects if s.object_id != o.object_id
            ]
        if not pair_objs:
            per_record.append((record, [], np.zeros((0, visual.config.n_predicates))))
            continue
        feats = [build_triplet_features(record, s, o)[0] for s, o in pair_objs]
        z_p, phat = visual.apply_scores(FeatureBatch.from_triplets(feats))
        z_p = z_p[:, : visual.config.n_predicates]
        if language is not None:
            subj_vecs = words.lookup_many([vocab.classes[s.class_id] for s, _ in pair_objs])
            obj_vecs = words.lookup_many([vocab.classes[o.class_id] for _, o in pair_objs])
            z_l = language.apply_scores(phat, subj_vecs, obj_vecs)[:, : visual.config.n_predicates]
            z_p = alpha * z_p + (1.0 - alpha) * z_l
        per_record.append((record, pair_objs, z_p))

    candidates_by_query: list[list[RetrievalCandidate]] = []
    gt_by_query: list[list[GroundTruthPair]] = []
    score_mode = visual.config.score_mode
    for cs, p, co in queries:
        cands: list[RetrievalCandidate] = []
        gts: list[GroundTruthPair] = []
        for record, pair_objs, z_p in per_record:
            objs = record.object_map()
            for s_id, p_id, o_id in record.gt_relations:
                if (objs[s_id].class_id, p_id, objs[o_id].class_id) == (cs, p, co):
                    gts.append(
                        GroundTruthPair(record.image_id, objs[s_id].box, objs[o_id].box)
                    )
            for (s, o), z_vec in zip(pair_objs, z_p):
                if s.class_id != cs or o.class_id != co:
                    continue
                if with_gt:
                    score = float(z_vec[p])
                elif score_mode == "sum":
                    score = s.score + o.score + float(z_vec[p])
                else:
                    score = s.score * o.score * float(z_vec[p])
                cands.append(
                    RetrievalCandidate(
                        image_id=record.image_id,
                        subject_id=s.object_id,
                        object_id=o.object_id,
                        subject_box=s.box,
                        object_box=o.box,
                        score=score,
                    )
                )
        candidates_by_query.append(cands)
        gt_by_query.append(gts)

    map_value, per_query = unrel_map(
        queries, candidates_by_query, gt_by_query, mode, iou_threshold
    )
    return MetricsReport(
        task="unrel",
        metrics={
            "mAP": map_value,
            "per_query": {
                f"{cs},{p},{co}": ap for (cs, p, co), ap in zip(queries, per_query)
            },
        },
        counts={"n_queries": len(queries),
                "n_queries_scored": sum(ap is not None for ap in per_query)},
    )


def evaluate_open_images(
    visual: VisualModel,
    records: Sequence[ImageRecord],
    recall_n: int = 50,
    iou_threshold: float = 0.5,
    k_per_pair: int = 1,
    top_proposals: int | None = None,
    language: LanguageModel | None = None,
    words: WordTable | None = None,
    vocab: Vocab | None = None,
    alpha: float = 0.5,
    threads: int = 1,
) -> MetricsReport:
    """Relationship recall plus the two detection mAPs and their composite."""
    preds = score_dataset(
        visual, records, "relationship", k_per_pair, top_proposals,
        language=language, words=words, vocab=vocab, alpha=alpha, threads=threads,
    )
    gt_by_image = {r.image_id: gt_triplets(r) for r in records}
    matched, total = recall_counts(preds, gt_by_image, "relationship", recall_n, iou_threshold)
    recall_rel = matched / total if total else 0.0

    flat = [t for ranked in preds.values() for t in ranked]
    map_rel = mean_ap(per_predicate_ap(flat, gt_by_image, "both", iou_threshold))
    map_phr = mean_ap(per_predicate_ap(flat, gt_by_image, "union", iou_threshold))
    return MetricsReport(
        task="openimages",
        metrics={
            f"recall@{recall_n}": recall_rel,
            "mAP_rel": map_rel,
            "mAP_phr": map_phr,
            "score": open_images_score(recall_rel, map_rel, map_phr),
        },
        counts={"gt_total": total, f"matched@{recall_n}": matched},
    )


def predict_scene_graphs(
    visual: VisualModel,
    records: Sequence[ImageRecord],
    top_n: int = 20,
    k_per_pair: int = 1,
    top_proposals: int | None = None,
    language: LanguageModel | None = None,
    words: WordTable | None = None,
    vocab: Vocab | None = None,
    alpha: float = 0.5,
    threads: int = 1,
) -> list[dict]:
    """Scene-graph documents for every record, in input order."""
    preds = score_dataset(
        visual, records, "sggen", k_per_pair, top_proposals,
        language=language, words=words, vocab=vocab, alpha=alpha, threads=threads,
    )
    return [
        emit_scene_graph(record, preds[record.image_id], top_n, vocab=vocab)
        for record in records
    ]
