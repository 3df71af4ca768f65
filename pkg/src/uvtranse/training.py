"""Minibatch SGD training for the visual and joint models, plus checkpoints.

The joint loss is alpha * (visual cross-entropy + hinge penalty) +
(1 - alpha) * language cross-entropy; the language gradient flows back
through the projection into the visual MLPs unless stopped. All
randomness is derived from the run seed (per-image sampling seeds plus
a per-epoch shuffle), so two runs with the same inputs produce
bit-identical parameters and byte-identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .data import ImageRecord, TrainingSample, Vocab, sample_training_triplets, sampling_rng
from .language import LanguageConfig, LanguageModel, WordTable
from .model import FeatureBatch, LossBreakdown, UVTransEConfig, VisualModel, visual_loss
from .nn import Param, TrainingError, sgd_step, softmax_cross_entropy_batch
from .util import canonical_json

CHECKPOINT_FORMAT = "uvtranse-ckpt"
CHECKPOINT_VERSION = 1


@dataclass
class JointLossBreakdown:
    total: float
    visual_ce: float
    penalty: float
    language_ce: float


def joint_loss(
    visual: VisualModel,
    language: LanguageModel,
    words: WordTable,
    batch: FeatureBatch,
    targets: np.ndarray,
    subject_names: Sequence[str],
    object_names: Sequence[str],
    alpha: float,
    stop_language_grad: bool = False,
) -> JointLossBreakdown:
    """Mixed loss over one minibatch; fills exact gradients in both models.

    With alpha = 1 the language term receives zero gradient (its
    parameters stay put under SGD); `stop_language_grad` additionally
    keeps the language loss from reaching the visual parameters.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    visual.zero_grad()
    language.zero_grad()

    logits_v = visual.forward(batch)
    ce_v, dlogits_v = softmax_cross_entropy_batch(logits_v, targets)
    penalty = visual.penalty_value()

    subj_vecs = words.lookup_many(subject_names)
    obj_vecs = words.lookup_many(object_names)
    logits_l = language.forward(visual.last_phat, subj_vecs, obj_vecs)
    ce_l, dlogits_l = softmax_cross_entropy_batch(logits_l, targets)

    dphat_lang = language.backward((1.0 - alpha) * dlogits_l)
    extra = None if stop_language_grad else dphat_lang
    visual.backward(alpha * dlogits_v, penalty_coef=alpha, extra_phat_grad=extra)

    total = alpha * (ce_v + penalty) + (1.0 - alpha) * ce_l
    if not np.isfinite(total):
        raise TrainingError(
            f"non-finite loss: visual_ce={ce_v}, penalty={penalty}, language_ce={ce_l}"
        )
    return JointLossBreakdown(total=total, visual_ce=ce_v, penalty=penalty, language_ce=ce_l)


class _FrozenObjective:
    """A deterministic loss over a frozen batch, for gradient checking."""

    def __init__(self, loss_fn, params: list[Param]):
        self._loss_fn = loss_fn
        self._params = params

    def loss_and_grad(self) -> float:
        return self._loss_fn()

    def named_parameters(self) -> list[Param]:
        return self._params


def visual_objective(model: VisualModel, batch: FeatureBatch, targets: np.ndarray):
    return _FrozenObjective(
        lambda: visual_loss(model, batch, targets).total,
        list(model.named_parameters()),
    )


def joint_objective(
    visual: VisualModel,
    language: LanguageModel,
    words: WordTable,
    batch: FeatureBatch,
    targets: np.ndarray,
    subject_names: Sequence[str],
    object_names: Sequence[str],
    alpha: float,
    stop_language_grad: bool = False,
):
    params = list(visual.named_parameters()) + [
        (f"lang/{name}", p, g) for name, p, g in language.named_parameters()
    ]
    return _FrozenObjective(
        lambda: joint_loss(
            visual, language, words, batch, targets,
            subject_names, object_names, alpha, stop_language_grad,
        ).total,
        params,
    )


@dataclass
class TrainSettings:
    """Everything the epoch loop needs beyond the models themselves."""

    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    alpha: float = 0.5
    neg_ratio: float = 3.0
    budget: int | None = 32
    iou_match: float = 0.5
    seed: int = 1
    stop_language_grad: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    n_samples_per_epoch: list[int] = field(default_factory=list)
    union_fallback_used: bool = False


class Trainer:
    """Epoch loop over per-image sampled triplets with plain SGD."""

    def __init__(
        self,
        visual: VisualModel,
        settings: TrainSettings,
        language: LanguageModel | None = None,
        words: WordTable | None = None,
        vocab: Vocab | None = None,
    ):
        if language is not None:
            if words is None or vocab is None:
                raise ValueError("language training requires a word table and a vocab")
            if not visual.config.uses_translation:
                raise ValueError(
                    f"variant {visual.config.variant!r} has no predicate embedding "
                    "for the language module to consume"
                )
        self.visual = visual
        self.language = language
        self.words = words
        self.vocab = vocab
        self.settings = settings

    def named_parameters(self) -> Iterator[Param]:
        yield from self.visual.named_parameters()
        if self.language is not None:
            for name, p, g in self.language.named_parameters():
                yield f"lang/{name}", p, g

    def _gather_samples(self, records: Sequence[ImageRecord], epoch: int) -> list[TrainingSample]:
        s = self.settings
        background = self.visual.config.background_class
        samples: list[TrainingSample] = []
        for record in records:
            rng = sampling_rng(s.seed, record.image_id, epoch)
            if background is None:
                samples.extend(
                    sample_training_triplets(
                        record, rng, neg_ratio=0.0, budget=None,
                        iou_match=s.iou_match, background_class=None,
                    )
                )
            else:
                samples.extend(
                    sample_training_triplets(
                        record, rng, neg_ratio=s.neg_ratio, budget=s.budget,
                        iou_match=s.iou_match, background_class=background,
                    )
                )
        return samples

    def _step(self, batch_samples: list[TrainingSample]) -> float:
        batch = FeatureBatch.from_triplets([s.features for s in batch_samples])
        targets = np.array([s.target for s in batch_samples])
        if self.language is None:
            breakdown: LossBreakdown = visual_loss(self.visual, batch, targets)
            loss = breakdown.total
        else:
            subject_names = [self.vocab.classes[s.subject_class] for s in batch_samples]
            object_names = [self.vocab.classes[s.object_class] for s in batch_samples]
            loss = joint_loss(
                self.visual, self.language, self.words, batch, targets,
                subject_names, object_names,
                alpha=self.settings.alpha,
                stop_language_grad=self.settings.stop_language_grad,
            ).total
        sgd_step(self.named_parameters(), self.settings.lr)
        return loss

    def run(self, records: Sequence[ImageRecord], on_epoch=None) -> TrainResult:
        """Train for the configured number of epochs.

        Raises TrainingError on a non-finite loss or gradient; the bad
        update is never applied, so the model keeps its last good
        parameters when that happens.
        """
        s = self.settings
        result = TrainResult()
        for epoch in range(s.epochs):
            samples = self._gather_samples(records, epoch)
            if not samples:
                raise TrainingError("no training samples were produced from the dataset")
            order = np.random.default_rng(
                np.random.SeedSequence([s.seed, 7919, epoch])
            ).permutation(len(samples))
            losses = []
            for start in range(0, len(samples), s.batch_size):
                batch = [samples[int(i)] for i in order[start : start + s.batch_size]]
                losses.append(self._step(batch))
            epoch_loss = float(np.mean(losses))
            result.epoch_losses.append(epoch_loss)
            result.n_samples_per_epoch.append(len(samples))
            if not result.union_fallback_used and any(not x.union_from_file for x in samples):
                result.union_fallback_used = True
            if on_epoch is not None:
                on_epoch(epoch, epoch_loss)
        return result


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _params_document(named: Iterator[Param]) -> dict:
    return {
        name: {"shape": list(p.shape), "data": p.ravel().tolist()} for name, p, _ in named
    }


def save_checkpoint(
    path: str,
    visual: VisualModel,
    language: LanguageModel | None = None,
    words: WordTable | None = None,
    run_config: dict | None = None,
) -> None:
    """Write a single canonical-JSON checkpoint document.

    The parameter map stores row-major float64 data at 17 significant
    digits, which round-trips bit-exactly; saving a loaded checkpoint
    reproduces the original file byte for byte.
    """
    config = visual.config.to_dict()
    if language is not None:
        config["language"] = language.config.to_dict()
    params = _params_document(visual.named_parameters())
    if language is not None:
        params.update(_params_document(
            (f"lang/{name}", p, g) for name, p, g in language.named_parameters()
        ))
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "params": params,
    }
    if words is not None:
        doc["words"] = {
            "dim": words.dim,
            "vectors": {token: vec.tolist() for token, vec in words.vectors.items()},
            "fallback": words.fallback.tolist(),
        }
    if run_config is not None:
        doc["run_config"] = run_config
    with open(path, "w", encoding="ascii") as fh:
        fh.write(canonical_json(doc))
        fh.write("\n")


@dataclass(eq=False)
class Checkpoint:
    visual: VisualModel
    language: LanguageModel | None
    words: WordTable | None
    run_config: dict | None


def _load_params(named: Iterator[Param], stored: dict, prefix: str = "") -> None:
    for name, p, _ in named:
        key = f"{prefix}{name}"
        if key not in stored:
            raise ValueError(f"checkpoint is missing parameter {key!r}")
        entry = stored[key]
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != p.shape:
            raise ValueError(
                f"checkpoint parameter {key!r} has shape {arr.shape}, expected {p.shape}"
            )
        p[...] = arr


def load_checkpoint(path: str) -> Checkpoint:
    """Rebuild models bit-exactly from a checkpoint document."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: format={doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    config_doc = dict(doc["config"])
    language_doc = config_doc.pop("language", None)

    visual = VisualModel(UVTransEConfig.from_dict(config_doc), rng=None)
    _load_params(visual.named_parameters(), doc["params"])

    language = None
    if language_doc is not None:
        language = LanguageModel(LanguageConfig.from_dict(language_doc), rng=None)
        _load_params(language.named_parameters(), doc["params"], prefix="lang/")

    words = None
    if "words" in doc:
        w = doc["words"]
        words = WordTable(
            dim=int(w["dim"]),
            vectors={tok: np.asarray(v, dtype=np.float64) for tok, v in w["vectors"].items()},
            fallback=np.asarray(w["fallback"], dtype=np.float64),
        )
    return Checkpoint(
        visual=visual,
        language=language,
        words=words,
        run_config=doc.get("run_config"),
    )
