"""Dataset records, the JSONL wire format, sampling, and synthetic data.

The on-disk format is line-delimited JSON: line 1 is a header object
carrying the format name and schema version, every following line is
one image record with exact field names `image_id`, `width`, `height`,
`objects` (each `{object_id, class_id, box: [x, y, w, h], score,
feature: [..]}`), `relations` (`[subject_id, predicate_id, object_id]`
triples), optional `attributes` (`[object_id, attribute_id]` pairs),
and optional `union_features` (map from `"s_id,o_id"` to a vector).
Records are validated on load with the offending line / image / field
named in the error.

Training triplets are sampled per image from an RNG seeded by
`seed XOR hash(image_id)`, so parallel or reordered traversal cannot
change what a run sees. When a pair has no stored union feature, the
elementwise max of the two appearance vectors stands in and the sample
is flagged so runs can report it.

The synthetic generator plants an exactly additive structure: each
class gets a prototype vector, each predicate a translation vector, and
every generated union feature is `subject + object + translation` plus
Gaussian noise. Held-out label triples appear only in the test split,
which is what the zero-shot acceptance experiment trains against.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, ImageDims, iou, triplet_location_vector, union_box
from .util import canonical_json, per_image_seed, stable_hash64

SCHEMA_FORMAT = "vrd-dataset"
SCHEMA_VERSION = 1

LabelTriple = tuple[int, int, int]


class DatasetError(ValueError):
    """A dataset, vocab, or synthetic spec violates its schema."""


@dataclass
class Vocab:
    """Category names for object classes, predicates, and attributes."""

    classes: list[str]
    predicates: list[str]
    attributes: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.classes or not self.predicates:
            raise DatasetError("vocab needs at least one class and one predicate")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_predicates(self) -> int:
        return len(self.predicates)

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "predicates": list(self.predicates),
            "attributes": list(self.attributes),
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(canonical_json(self.to_dict()))
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"vocab file {path!r} is not valid JSON: {exc}") from exc
        for key in ("classes", "predicates"):
            if key not in doc or not isinstance(doc[key], list):
                raise DatasetError(f"vocab file {path!r} is missing list field {key!r}")
        return cls(
            classes=[str(c) for c in doc["classes"]],
            predicates=[str(p) for p in doc["predicates"]],
            attributes=[str(a) for a in doc.get("attributes", [])],
        )


@dataclass(eq=False)
class ObjectInstance:
    """One detected or annotated object inside an image."""

    object_id: int
    class_id: int
    box: Box
    score: float
    feature: np.ndarray


@dataclass(eq=False)
class ImageRecord:
    """All objects, relations, and optional extras for one image."""

    image_id: str
    dims: ImageDims
    objects: list[ObjectInstance]
    gt_relations: list[LabelTriple] = field(default_factory=list)
    gt_attributes: list[tuple[int, int]] | None = None
    union_features: dict[tuple[int, int], np.ndarray] | None = None

    def object_map(self) -> dict[int, ObjectInstance]:
        return {obj.object_id: obj for obj in self.objects}

    def union_feature(self, s_id: int, o_id: int) -> tuple[np.ndarray, bool]:
        """Union-box appearance for a pair; returns (vector, from_file).

        Falls back to the elementwise max of the two object features
        when the pair has no stored union feature.
        """
        if self.union_features is not None and (s_id, o_id) in self.union_features:
            return self.union_features[(s_id, o_id)], True
        objs = self.object_map()
        return np.maximum(objs[s_id].feature, objs[o_id].feature), False


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise DatasetError(message)


def validate_record(record: ImageRecord, vocab: Vocab | None = None, n_app: int | None = None) -> int:
    """Check every record invariant; returns the feature dimension.

    Verifies box validity (via construction), unique object ids,
    relation and attribute endpoints, slot-wise distinct subject and
    object, id ranges against the vocab when given, score range, and
    uniform feature dimensions (against `n_app` when given).
    """
    where = f"image {record.image_id!r}"
    ids = [obj.object_id for obj in record.objects]
    _require(len(ids) == len(set(ids)), f"{where}: duplicate object_id")
    dim = n_app
    for obj in record.objects:
        _require(
            0.0 <= obj.score <= 1.0,
            f"{where}: object {obj.object_id} score {obj.score} outside [0, 1]",
        )
        if vocab is not None:
            _require(
                0 <= obj.class_id < vocab.n_classes,
                f"{where}: object {obj.object_id} class_id {obj.class_id} "
                f"outside vocab ({vocab.n_classes} classes)",
            )
        _require(
            obj.feature.ndim == 1 and obj.feature.size > 0,
            f"{where}: object {obj.object_id} feature must be a non-empty vector",
        )
        if dim is None:
            dim = obj.feature.shape[0]
        _require(
            obj.feature.shape[0] == dim,
            f"{where}: object {obj.object_id} feature dim {obj.feature.shape[0]} != {dim}",
        )
    id_set = set(ids)
    for s_id, p_id, o_id in record.gt_relations:
        _require(s_id in id_set, f"{where}: relation subject_id {s_id} does not exist")
        _require(o_id in id_set, f"{where}: relation object_id {o_id} does not exist")
        _require(s_id != o_id, f"{where}: relation has subject_id == object_id == {s_id}")
        if vocab is not None:
            _require(
                0 <= p_id < vocab.n_predicates,
                f"{where}: predicate_id {p_id} outside vocab ({vocab.n_predicates} predicates)",
            )
    if record.gt_attributes is not None:
        for o_id, a_id in record.gt_attributes:
            _require(o_id in id_set, f"{where}: attribute object_id {o_id} does not exist")
            if vocab is not None:
                _require(
                    0 <= a_id < len(vocab.attributes),
                    f"{where}: attribute_id {a_id} outside vocab "
                    f"({len(vocab.attributes)} attributes)",
                )
    if record.union_features is not None:
        for (s_id, o_id), vec in record.union_features.items():
            _require(
                s_id in id_set and o_id in id_set,
                f"{where}: union_features key ({s_id},{o_id}) references a missing object",
            )
            _require(
                dim is not None and vec.shape == (dim,),
                f"{where}: union feature for ({s_id},{o_id}) has dim "
                f"{vec.shape[0] if vec.ndim == 1 else vec.shape} != {dim}",
            )
    return dim if dim is not None else 0


def record_to_json(record: ImageRecord) -> dict:
    doc = {
        "image_id": record.image_id,
        "width": record.dims.width,
        "height": record.dims.height,
        "objects": [
            {
                "object_id": obj.object_id,
                "class_id": obj.class_id,
                "box": [obj.box.x, obj.box.y, obj.box.w, obj.box.h],
                "score": obj.score,
                "feature": obj.feature.tolist(),
            }
            for obj in record.objects
        ],
        "relations": [list(rel) for rel in record.gt_relations],
    }
    if record.gt_attributes is not None:
        doc["attributes"] = [list(pair) for pair in record.gt_attributes]
    if record.union_features is not None:
        doc["union_features"] = {
            f"{s_id},{o_id}": vec.tolist() for (s_id, o_id), vec in record.union_features.items()
        }
    return doc


def record_from_json(doc: dict, line_no: int) -> ImageRecord:
    where = f"line {line_no}"

    def need(key: str):
        if key not in doc:
            raise DatasetError(f"{where}: record is missing field {key!r}")
        return doc[key]

    image_id = str(need("image_id"))
    where = f"line {line_no} (image {image_id!r})"
    try:
        dims = ImageDims(float(need("width")), float(need("height")))
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from exc

    objects = []
    for entry in need("objects"):
        for key in ("object_id", "class_id", "box", "score", "feature"):
            if key not in entry:
                raise DatasetError(f"{where}: object is missing field {key!r}")
        box_vals = entry["box"]
        if not isinstance(box_vals, list) or len(box_vals) != 4:
            raise DatasetError(f"{where}: object {entry['object_id']} box must be [x, y, w, h]")
        try:
            box = Box(*[float(v) for v in box_vals])
        except ValueError as exc:
            raise DatasetError(f"{where}: object {entry['object_id']}: {exc}") from exc
        objects.append(
            ObjectInstance(
                object_id=int(entry["object_id"]),
                class_id=int(entry["class_id"]),
                box=box,
                score=float(entry["score"]),
                feature=np.asarray(entry["feature"], dtype=np.float64),
            )
        )

    relations = []
    for rel in need("relations"):
        if not isinstance(rel, list) or len(rel) != 3:
            raise DatasetError(f"{where}: relation {rel!r} must be [subject_id, predicate_id, object_id]")
        relations.append((int(rel[0]), int(rel[1]), int(rel[2])))

    attributes = None
    if "attributes" in doc:
        attributes = []
        for pair in doc["attributes"]:
            if not isinstance(pair, list) or len(pair) != 2:
                raise DatasetError(f"{where}: attribute {pair!r} must be [object_id, attribute_id]")
            attributes.append((int(pair[0]), int(pair[1])))

    union_features = None
    if "union_features" in doc:
        union_features = {}
        for key, vec in doc["union_features"].items():
            parts = key.split(",")
            if len(parts) != 2:
                raise DatasetError(f"{where}: union_features key {key!r} is not 's_id,o_id'")
            union_features[(int(parts[0]), int(parts[1]))] = np.asarray(vec, dtype=np.float64)

    return ImageRecord(
        image_id=image_id,
        dims=dims,
        objects=objects,
        gt_relations=relations,
        gt_attributes=attributes,
        union_features=union_features,
    )


def load_dataset(path: str, vocab: Vocab | None = None) -> list[ImageRecord]:
    """Read and validate a JSONL dataset; an empty file is an empty dataset."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not any(line.strip() for line in lines):
        return []

    def parse(line: str, line_no: int) -> dict:
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {line_no}: malformed JSON: {exc}") from exc

    header = parse(lines[0], 1)
    if not isinstance(header, dict) or header.get("format") != SCHEMA_FORMAT:
        raise DatasetError(f"line 1: expected a header with format={SCHEMA_FORMAT!r}")
    if header.get("version") != SCHEMA_VERSION:
        raise DatasetError(f"line 1: unsupported schema version {header.get('version')!r}")

    records = []
    n_app: int | None = None
    seen_ids: set[str] = set()
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        doc = parse(line, line_no)
        record = record_from_json(doc, line_no)
        if record.image_id in seen_ids:
            raise DatasetError(f"line {line_no}: duplicate image_id {record.image_id!r}")
        seen_ids.add(record.image_id)
        dim = validate_record(record, vocab=vocab, n_app=n_app)
        if record.objects:
            n_app = dim
        records.append(record)
    return records


def save_dataset(records: Sequence[ImageRecord], path: str, header_extra: dict | None = None) -> None:
    """Write JSONL with a version header; output is byte-deterministic."""
    header = {"format": SCHEMA_FORMAT, "version": SCHEMA_VERSION}
    if header_extra:
        header.update(header_extra)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(canonical_json(header))
        fh.write("\n")
        for record in records:
            fh.write(canonical_json(record_to_json(record)))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Training-triplet sampling
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TripletFeatures:
    """Model inputs for one (subject, object) pair."""

    app_s: np.ndarray
    app_o: np.ndarray
    app_u: np.ndarray
    loc: np.ndarray


@dataclass(eq=False)
class TrainingSample:
    features: TripletFeatures
    target: int
    subject_id: int
    object_id: int
    subject_class: int
    object_class: int
    union_from_file: bool


def build_triplet_features(
    record: ImageRecord, subject: ObjectInstance, obj: ObjectInstance
) -> tuple[TripletFeatures, bool]:
    """Appearance + spatial inputs for a pair; returns (features, union_from_file)."""
    app_u, from_file = record.union_feature(subject.object_id, obj.object_id)
    feats = TripletFeatures(
        app_s=subject.feature,
        app_o=obj.feature,
        app_u=app_u,
        loc=triplet_location_vector(subject.box, obj.box, record.dims),
    )
    return feats, from_file


def _make_sample(record, objs, s_id, o_id, target) -> TrainingSample:
    feats, from_file = build_triplet_features(record, objs[s_id], objs[o_id])
    return TrainingSample(
        features=feats,
        target=target,
        subject_id=s_id,
        object_id=o_id,
        subject_class=objs[s_id].class_id,
        object_class=objs[o_id].class_id,
        union_from_file=from_file,
    )


def _choose(items: list, count: int, rng: np.random.Generator) -> list:
    if count >= len(items):
        return list(items)
    idx = np.sort(rng.choice(len(items), size=count, replace=False))
    return [items[int(i)] for i in idx]


def sample_training_triplets(
    record: ImageRecord,
    rng: np.random.Generator,
    neg_ratio: float = 3.0,
    budget: int | None = 32,
    iou_match: float = 0.5,
    background_class: int | None = None,
) -> list[TrainingSample]:
    """Sample positive (and optionally background) training pairs.

    Positives are every GT relation plus every other ordered detection
    pair whose subject and object boxes each reach `iou_match` IoU with
    some GT relation's boxes in the correct roles; such a pair takes the
    predicate of the best match (largest IoU sum, ties to the lowest GT
    index). With `background_class=None` only positives are returned
    (up to `budget`). Otherwise the remaining pairs are background
    candidates, and the budget is split so at most
    `budget / (1 + neg_ratio)` slots go to positives and the rest to
    uniformly sampled negatives.
    """
    objs = record.object_map()
    positives: list[TrainingSample] = []
    for s_id, p_id, o_id in record.gt_relations:
        positives.append(_make_sample(record, objs, s_id, o_id, p_id))

    gt_boxes = [
        (objs[s_id].box, objs[o_id].box, p_id) for s_id, p_id, o_id in record.gt_relations
    ]
    gt_pairs = {(s_id, o_id) for s_id, _, o_id in record.gt_relations}
    negative_pairs: list[tuple[int, int]] = []
    ids = [obj.object_id for obj in record.objects]
    for i in ids:
        for j in ids:
            if i == j or (i, j) in gt_pairs:
                continue
            best_quality, best_pred = -1.0, None
            for s_box, o_box, p_id in gt_boxes:
                iou_s = iou(objs[i].box, s_box)
                if iou_s < iou_match:
                    continue
                iou_o = iou(objs[j].box, o_box)
                if iou_o < iou_match:
                    continue
                quality = iou_s + iou_o
                if quality > best_quality:
                    best_quality, best_pred = quality, p_id
            if best_pred is not None:
                positives.append(_make_sample(record, objs, i, j, best_pred))
            else:
                negative_pairs.append((i, j))

    if background_class is None:
        if budget is not None and len(positives) > budget:
            return _choose(positives, budget, rng)
        return positives

    if budget is None:
        raise ValueError("background sampling requires a budget")
    pos_quota = budget if neg_ratio <= 0 else int(round(budget / (1.0 + neg_ratio)))
    neg_quota = budget - pos_quota
    chosen = _choose(positives, pos_quota, rng)
    for i, j in _choose(negative_pairs, neg_quota, rng):
        chosen.append(_make_sample(record, objs, i, j, background_class))
    return chosen


def sampling_rng(seed: int, image_id: str, epoch: int = 0) -> np.random.Generator:
    """Per-image RNG; traversal order and worker count cannot affect it."""
    return np.random.default_rng(per_image_seed(seed + 0x9E3779B9 * epoch, image_id))


# ---------------------------------------------------------------------------
# Zero-shot splitting
# ---------------------------------------------------------------------------


def label_triples(records: Iterable[ImageRecord]) -> set[LabelTriple]:
    """All (subject class, predicate, object class) label triples with GT."""
    triples: set[LabelTriple] = set()
    for record in records:
        objs = record.object_map()
        for s_id, p_id, o_id in record.gt_relations:
            triples.add((objs[s_id].class_id, p_id, objs[o_id].class_id))
    return triples


def relation_triple(record: ImageRecord, relation: LabelTriple) -> LabelTriple:
    objs = record.object_map()
    s_id, p_id, o_id = relation
    return (objs[s_id].class_id, p_id, objs[o_id].class_id)


def split_zero_shot(
    train_records: Sequence[ImageRecord], test_records: Sequence[ImageRecord]
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """Partition test GT relations by whether their label triple was trained on.

    Returns (seen, zero_shot): copies of the test records whose
    `gt_relations` keep only the seen / only the unseen relations. Every
    test relation lands in exactly one side.
    """
    seen_triples = label_triples(train_records)
    seen_out, zs_out = [], []
    for record in test_records:
        seen_rels = [r for r in record.gt_relations if relation_triple(record, r) in seen_triples]
        zs_rels = [r for r in record.gt_relations if relation_triple(record, r) not in seen_triples]
        seen_out.append(dataclasses.replace(record, gt_relations=seen_rels))
        zs_out.append(dataclasses.replace(record, gt_relations=zs_rels))
    return seen_out, zs_out


# ---------------------------------------------------------------------------
# Synthetic data with additive ground truth
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic generator (all sizes are exact counts)."""

    n_classes: int
    n_predicates: int
    n_app: int
    noise_sigma: float
    train_images: int
    test_images: int
    objects_per_image: int
    relations_per_image: int
    holdout_pairs: list[LabelTriple]
    seed: int = 0
    holdout_rate: float = 0.5
    image_width: float = 640.0
    image_height: float = 480.0

    def __post_init__(self):
        for name in ("n_classes", "n_predicates", "n_app"):
            if getattr(self, name) < 1:
                raise DatasetError(f"{name} must be >= 1")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be >= 0")
        if self.objects_per_image < 2 * self.relations_per_image:
            raise DatasetError(
                "objects_per_image must be at least twice relations_per_image "
                f"({self.objects_per_image} < 2 * {self.relations_per_image})"
            )
        if not 0.0 <= self.holdout_rate <= 1.0:
            raise DatasetError("holdout_rate must be in [0, 1]")
        self.holdout_pairs = [tuple(int(v) for v in t) for t in self.holdout_pairs]
        for cs, p, co in self.holdout_pairs:
            if not (0 <= cs < self.n_classes and 0 <= co < self.n_classes):
                raise DatasetError(f"holdout pair ({cs},{p},{co}) has a class outside the vocab")
            if not 0 <= p < self.n_predicates:
                raise DatasetError(f"holdout pair ({cs},{p},{co}) has a predicate outside the vocab")
        total = self.n_classes * self.n_classes * self.n_predicates
        if len(set(self.holdout_pairs)) >= total:
            raise DatasetError("holdout covers every possible label triple")

    def to_dict(self) -> dict:
        return {
            f.name: (getattr(self, f.name) if f.name != "holdout_pairs" else
                     [list(t) for t in self.holdout_pairs])
            for f in dataclasses.fields(self)
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise DatasetError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str) -> "SyntheticSpec":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"synthetic spec {path!r} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


@dataclass(eq=False)
class SyntheticTruth:
    """The planted generative model behind a synthetic dataset."""

    prototypes: np.ndarray  # (n_classes, n_app)
    translations: np.ndarray  # (n_predicates, n_app)
    noise_sigma: float
    holdout_pairs: list[LabelTriple]
    vocab: Vocab

    def to_document(self) -> dict:
        return {
            "prototypes": self.prototypes.tolist(),
            "translations": self.translations.tolist(),
            "noise_sigma": self.noise_sigma,
            "holdout_pairs": [list(t) for t in self.holdout_pairs],
            "vocab": self.vocab.to_dict(),
        }


def choose_holdout_pairs(
    n_classes: int, n_predicates: int, count: int, rng: np.random.Generator
) -> list[LabelTriple]:
    """Deterministically pick distinct label triples to hold out."""
    total = n_classes * n_classes * n_predicates
    if count >= total:
        raise DatasetError(f"cannot hold out {count} of {total} possible triples")
    chosen: set[LabelTriple] = set()
    while len(chosen) < count:
        triple = (
            int(rng.integers(n_classes)),
            int(rng.integers(n_predicates)),
            int(rng.integers(n_classes)),
        )
        chosen.add(triple)
    return sorted(chosen)


def _random_box(rng: np.random.Generator, width: float, height: float) -> Box:
    w = float(rng.uniform(0.08, 0.45) * width)
    h = float(rng.uniform(0.08, 0.45) * height)
    x = float(rng.uniform(0.0, width - w))
    y = float(rng.uniform(0.0, height - h))
    return Box(x, y, w, h)


def _draw_triple(
    rng: np.random.Generator,
    spec: SyntheticSpec,
    holdout: set[LabelTriple],
    from_holdout: bool,
) -> LabelTriple:
    if from_holdout:
        ordered = sorted(holdout)
        return ordered[int(rng.integers(len(ordered)))]
    for _ in range(1000):
        triple = (
            int(rng.integers(spec.n_classes)),
            int(rng.integers(spec.n_predicates)),
            int(rng.integers(spec.n_classes)),
        )
        if triple not in holdout:
            return triple
    raise DatasetError("could not draw a non-holdout label triple")


def _synthesize_image(
    image_id: str,
    spec: SyntheticSpec,
    truth: SyntheticTruth,
    rng: np.random.Generator,
    allow_holdout: bool,
) -> ImageRecord:
    holdout = set(spec.holdout_pairs)
    dims = ImageDims(spec.image_width, spec.image_height)
    objects: list[ObjectInstance] = []
    relations: list[LabelTriple] = []
    union_features: dict[tuple[int, int], np.ndarray] = {}

    def add_object(class_id: int) -> ObjectInstance:
        feature = truth.prototypes[class_id] + rng.normal(0.0, spec.noise_sigma, spec.n_app)
        obj = ObjectInstance(
            object_id=len(objects),
            class_id=class_id,
            box=_random_box(rng, spec.image_width, spec.image_height),
            score=1.0,
            feature=feature,
        )
        objects.append(obj)
        return obj

    for _ in range(spec.relations_per_image):
        use_holdout = allow_holdout and bool(holdout) and rng.uniform() < spec.holdout_rate
        cs, p, co = _draw_triple(rng, spec, holdout, use_holdout)
        subj = add_object(cs)
        obj = add_object(co)
        relations.append((subj.object_id, p, obj.object_id))
        noise = rng.normal(0.0, spec.noise_sigma, spec.n_app)
        union_features[(subj.object_id, obj.object_id)] = (
            subj.feature + obj.feature + truth.translations[p] + noise
        )

    while len(objects) < spec.objects_per_image:
        add_object(int(rng.integers(spec.n_classes)))

    return ImageRecord(
        image_id=image_id,
        dims=dims,
        objects=objects,
        gt_relations=relations,
        union_features=union_features,
    )


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[list[ImageRecord], list[ImageRecord], SyntheticTruth]:
    """Build (train records, test records, truth) from a synthetic spec.

    Subject/object features are class prototypes plus Gaussian noise and
    every stored union feature is exactly `subject + object +
    translation(predicate)` plus noise, so with zero noise the additive
    structure is bit-recoverable. Train relations never use a held-out
    label triple; test relations draw one with probability
    `holdout_rate`. The same seed always regenerates identical bits.
    """
    rng = np.random.default_rng(spec.seed)
    vocab = Vocab(
        classes=[f"class_{i}" for i in range(spec.n_classes)],
        predicates=[f"predicate_{i}" for i in range(spec.n_predicates)],
    )
    truth = SyntheticTruth(
        prototypes=rng.normal(0.0, 1.0, (spec.n_classes, spec.n_app)),
        translations=rng.normal(0.0, 1.0, (spec.n_predicates, spec.n_app)),
        noise_sigma=spec.noise_sigma,
        holdout_pairs=list(spec.holdout_pairs),
        vocab=vocab,
    )
    train = [
        _synthesize_image(f"train_{i:05d}", spec, truth, rng, allow_holdout=False)
        for i in range(spec.train_images)
    ]
    test = [
        _synthesize_image(f"test_{i:05d}", spec, truth, rng, allow_holdout=True)
        for i in range(spec.test_images)
    ]
    return train, test, truth
