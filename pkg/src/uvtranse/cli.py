"""Command-line interface: train, eval, predict, synth, gradcheck.

Every command resolves one effective `RunConfig` (defaults, then
profile, then config file, then explicit flags), echoes it into its
outputs, and derives all randomness from `--seed`, so a repeated
invocation writes byte-identical files.

Exit codes: 0 success, 1 usage or config error, 2 data validation
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from .data import (
    DatasetError,
    SyntheticSpec,
    Vocab,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .evaluation import RETRIEVAL_MODES
from .geometry import Box, ImageDims
from .language import LanguageConfig, LanguageModel, WordTable
from .model import (
    SCORE_MODES,
    VARIANTS,
    FeatureBatch,
    UVTransEConfig,
    VisualModel,
)
from .nn import GradReport, TrainingError, gradient_check
from .pipeline import (
    evaluate_open_images,
    evaluate_recall,
    evaluate_retrieval,
    predict_scene_graphs,
)
from .training import (
    TrainSettings,
    Trainer,
    joint_objective,
    load_checkpoint,
    save_checkpoint,
    visual_objective,
)
from .util import canonical_json, write_canonical

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

RECALL_TASK_CHOICES = ("predicate", "predcls", "phrcls", "phrase", "relationship", "sggen")
EVAL_TASK_CHOICES = RECALL_TASK_CHOICES + ("unrel", "openimages")


class UsageError(Exception):
    """Bad flags or flag combinations."""


class ConfigError(Exception):
    """A config file or resolved configuration is invalid."""


@dataclass
class RunConfig:
    """Every tunable a run can see, with its default."""

    seed: int = 1
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    C: float = 1.0
    alpha: float = 0.5
    neg_ratio: float = 3.0
    budget: int = 32
    k_per_pair: int = 1
    score_mode: str = "sum"
    use_language: bool = True
    use_background: bool = False
    stop_language_grad: bool = False
    variant: str = "uvtranse"
    d_emb: int = 256
    hidden_app: int = 512
    loc_hidden: int = 32
    loc_dim: int = 16
    word_dim: int = 100
    lang_hidden: int = 100
    head_hidden_relu: bool = True
    task: str = "predicate"
    recall_at: list[int] = field(default_factory=lambda: [50, 100])
    iou_threshold: float = 0.5
    mode: str = "with_gt"
    top_proposals: int | None = None
    top_n: int = 20
    threads: int = 1
    data: str | None = None
    vocab: str | None = None
    words: str | None = None
    checkpoint: str | None = None
    output: str | None = None
    log: str | None = None
    zero_shot_against: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Hyperparameter bundles for the three benchmark protocols.
PROFILES: dict[str, dict] = {
    "vrd": {
        "C": 1.0, "lr": 1e-3, "score_mode": "sum", "use_background": False,
        "top_proposals": 30, "k_per_pair": 1, "neg_ratio": 0.0,
    },
    "vg": {
        "C": 0.1, "lr": 1e-2, "score_mode": "product", "use_background": True,
        "top_proposals": 50, "neg_ratio": 3.0, "budget": 32,
    },
    "openimages": {
        "C": 0.1, "lr": 1e-2, "score_mode": "product", "use_background": True,
        "top_proposals": 50, "neg_ratio": 3.0, "budget": 32, "task": "openimages",
    },
}

_CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults <- profile <- config file <- explicit flags."""
    values: dict = {}
    profile = getattr(args, "profile", None)
    if profile is not None:
        values.update(PROFILES[profile])
    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path!r}: {exc}") from exc
        unknown = set(doc) - _CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        values.update(doc)
    for name in _CONFIG_FIELDS:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def echo_config(cfg: RunConfig) -> None:
    print(f"config: {canonical_json(cfg.to_dict())}")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); keep our codes
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uvtranse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--words", help="word-vector text file (random table if omitted)")
    p.add_argument("--log", help="training log path (default: <checkpoint>.log.json)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--C", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--neg-ratio", dest="neg_ratio", type=float)
    p.add_argument("--budget", type=int)
    p.add_argument("--score-mode", dest="score_mode", choices=SCORE_MODES)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--no-language", dest="use_language", action="store_const", const=False)
    p.add_argument("--language", dest="use_language", action="store_const", const=True)
    p.add_argument("--background", dest="use_background", action="store_const", const=True)
    p.add_argument("--no-background", dest="use_background", action="store_const", const=False)
    p.add_argument("--stop-language-grad", dest="stop_language_grad",
                   action="store_const", const=True)
    p.add_argument("--no-head-relu", dest="head_hidden_relu", action="store_const", const=False)
    p.add_argument("--d-emb", dest="d_emb", type=int)
    p.add_argument("--hidden-app", dest="hidden_app", type=int)
    p.add_argument("--loc-hidden", dest="loc_hidden", type=int)
    p.add_argument("--loc-dim", dest="loc_dim", type=int)
    p.add_argument("--word-dim", dest="word_dim", type=int)
    p.add_argument("--lang-hidden", dest="lang_hidden", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute metrics from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--task", choices=EVAL_TASK_CHOICES)
    p.add_argument("--k", dest="k_per_pair", type=int,
                   help="predicates kept per object pair before ranking")
    p.add_argument("--recall-at", dest="recall_at", type=int, action="append")
    p.add_argument("--iou", dest="iou_threshold", type=float)
    p.add_argument("--mode", choices=RETRIEVAL_MODES, help="retrieval localization mode")
    p.add_argument("--zero-shot-against", dest="zero_shot_against",
                   help="train JSONL whose label triples define 'seen'")
    p.add_argument("--top-proposals", dest="top_proposals", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--no-language", dest="use_language", action="store_const", const=False)
    p.add_argument("--output", help="write the metrics report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="emit ranked triplets as scene graphs")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--top-proposals", dest="top_proposals", type=int)
    p.add_argument("--top-n", dest="top_n", type=int, help="edges kept per image")
    p.add_argument("--k", dest="k_per_pair", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--no-language", dest="use_language", action="store_const", const=False)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a synthetic dataset from a spec file")
    p.add_argument("--spec", required=True, help="JSON synthetic spec")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference checks on fresh models")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--output", help="write the report table as JSON")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _infer_n_app(records) -> int:
    for record in records:
        if record.objects:
            return record.objects[0].feature.shape[0]
    raise DatasetError("cannot infer the appearance dimension: no objects in the dataset")


def _model_config(cfg: RunConfig, n_app: int, n_predicates: int) -> UVTransEConfig:
    try:
        return UVTransEConfig(
            n_app=n_app,
            n_predicates=n_predicates,
            d_emb=cfg.d_emb,
            hidden_app=cfg.hidden_app,
            loc_hidden=cfg.loc_hidden,
            loc_dim=cfg.loc_dim,
            C=cfg.C,
            use_background=cfg.use_background,
            score_mode=cfg.score_mode,
            variant=cfg.variant,
            head_hidden_relu=cfg.head_hidden_relu,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    vocab = Vocab.load(cfg.vocab)
    records = load_dataset(cfg.data, vocab)
    if not records:
        raise DatasetError(f"training dataset {cfg.data!r} is empty")
    n_app = _infer_n_app(records)

    rng = np.random.default_rng(cfg.seed)
    visual = VisualModel(_model_config(cfg, n_app, vocab.n_predicates), rng)
    language = None
    words = None
    if cfg.use_language:
        if not visual.config.uses_translation:
            raise ConfigError(
                f"variant {cfg.variant!r} cannot train with the language module; "
                "pass --no-language"
            )
        if cfg.words is not None:
            words = WordTable.load(cfg.words)
        else:
            words = WordTable.random(vocab.classes, cfg.word_dim, rng)
        language = LanguageModel(
            LanguageConfig(
                d_emb=cfg.d_emb,
                n_outputs=visual.config.n_outputs,
                word_dim=words.dim,
                hidden_dim=cfg.lang_hidden,
            ),
            rng,
        )

    settings = TrainSettings(
        epochs=cfg.epochs,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        alpha=cfg.alpha,
        neg_ratio=cfg.neg_ratio,
        budget=cfg.budget,
        seed=cfg.seed,
        stop_language_grad=cfg.stop_language_grad,
    )
    trainer = Trainer(visual, settings, language=language, words=words, vocab=vocab)

    log_path = cfg.log if cfg.log is not None else cfg.checkpoint + ".log.json"
    epochs_logged: list[dict] = []

    def on_epoch(epoch: int, loss: float) -> None:
        print(f"epoch {epoch}: loss {loss:.6f}")
        epochs_logged.append({"epoch": epoch, "loss": loss})

    aborted = False
    try:
        result = trainer.run(records, on_epoch=on_epoch)
    except TrainingError:
        # The offending update was never applied; keep the last good state.
        aborted = True
        save_checkpoint(cfg.checkpoint, visual, language, words, run_config=cfg.to_dict())
        write_canonical(log_path, {
            "config": cfg.to_dict(), "epochs": epochs_logged, "aborted": True,
        })
        print(f"aborted; last-good checkpoint retained at {cfg.checkpoint}", file=sys.stderr)
        raise
    finally:
        if not aborted:
            save_checkpoint(cfg.checkpoint, visual, language, words, run_config=cfg.to_dict())
            write_canonical(log_path, {
                "config": cfg.to_dict(),
                "epochs": epochs_logged,
                "aborted": False,
                "union_feature_fallback": result.union_fallback_used,
            })
    print(f"checkpoint: {cfg.checkpoint}")
    print(f"log: {log_path}")
    return EXIT_OK


def _load_models(cfg: RunConfig):
    ckpt = load_checkpoint(cfg.checkpoint)
    language = ckpt.language
    words = ckpt.words
    if not cfg.use_language:
        language = None
        words = None
    elif ckpt.language is None:
        # A visual-only checkpoint simply evaluates without the language
        # term rather than failing; a missing word table with a language
        # model present is a real mismatch.
        language = None
        words = None
    if language is not None and words is None:
        raise ConfigError("checkpoint has a language model but no word table")
    return ckpt, language, words


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    vocab = Vocab.load(cfg.vocab)
    ckpt, language, words = _load_models(cfg)
    records = load_dataset(cfg.data, vocab)
    if ckpt.visual.config.n_predicates != vocab.n_predicates:
        raise ConfigError(
            f"checkpoint was trained with {ckpt.visual.config.n_predicates} predicates "
            f"but the vocab has {vocab.n_predicates}"
        )

    if cfg.task == "unrel":
        report = evaluate_retrieval(
            ckpt.visual, records, mode=cfg.mode,
            iou_threshold=cfg.iou_threshold if args.iou_threshold is not None else 0.3,
            alpha=cfg.alpha, language=language, words=words, vocab=vocab,
        )
    elif cfg.task == "openimages":
        report = evaluate_open_images(
            ckpt.visual, records,
            recall_n=cfg.recall_at[0],
            iou_threshold=cfg.iou_threshold,
            k_per_pair=cfg.k_per_pair,
            top_proposals=cfg.top_proposals,
            language=language, words=words, vocab=vocab,
            alpha=cfg.alpha, threads=cfg.threads,
        )
    else:
        train_records = None
        if cfg.zero_shot_against is not None:
            train_records = load_dataset(cfg.zero_shot_against, vocab)
        report = evaluate_recall(
            ckpt.visual, records, cfg.task,
            recall_at=cfg.recall_at,
            k_per_pair=cfg.k_per_pair,
            iou_threshold=cfg.iou_threshold,
            top_proposals=cfg.top_proposals,
            language=language, words=words, vocab=vocab,
            alpha=cfg.alpha, threads=cfg.threads,
            train_records=train_records,
        )
    report.config = cfg.to_dict()
    print(report.to_json())
    if cfg.output is not None:
        write_canonical(cfg.output, report.to_document())
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    echo_config(cfg)
    vocab = Vocab.load(cfg.vocab)
    ckpt, language, words = _load_models(cfg)
    records = load_dataset(cfg.data, vocab)
    graphs = predict_scene_graphs(
        ckpt.visual, records,
        top_n=cfg.top_n,
        k_per_pair=cfg.k_per_pair,
        top_proposals=cfg.top_proposals,
        language=language, words=words, vocab=vocab,
        alpha=cfg.alpha, threads=cfg.threads,
    )
    write_canonical(cfg.output, {"config": cfg.to_dict(), "graphs": graphs})
    print(f"wrote {len(graphs)} scene graphs to {cfg.output}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec.load(args.spec)
    train, test, truth = generate_synthetic(spec)
    import os

    os.makedirs(args.out_dir, exist_ok=True)
    train_path = os.path.join(args.out_dir, "train.jsonl")
    test_path = os.path.join(args.out_dir, "test.jsonl")
    vocab_path = os.path.join(args.out_dir, "vocab.json")
    truth_path = os.path.join(args.out_dir, "truth.json")
    header = {"n_app": spec.n_app, "synthetic": True}
    save_dataset(train, train_path, header_extra=header)
    save_dataset(test, test_path, header_extra=header)
    truth.vocab.save(vocab_path)
    write_canonical(truth_path, truth.to_document())
    print(f"config: {canonical_json(spec.to_dict())}")
    n_train = sum(len(r.gt_relations) for r in train)
    n_test = sum(len(r.gt_relations) for r in test)
    print(f"train: {len(train)} images, {n_train} relations -> {train_path}")
    print(f"test: {len(test)} images, {n_test} relations -> {test_path}")
    return EXIT_OK


def _gradcheck_fixture(seed: int, n: int = 5, n_app: int = 16):
    """A small random batch with honest location vectors."""
    from .geometry import triplet_location_vector

    rng = np.random.default_rng(seed)
    dims = ImageDims(640.0, 480.0)

    def random_box() -> Box:
        w = float(rng.uniform(30, 200))
        h = float(rng.uniform(30, 200))
        return Box(float(rng.uniform(0, 640 - w)), float(rng.uniform(0, 480 - h)), w, h)

    locs = np.stack([
        triplet_location_vector(random_box(), random_box(), dims) for _ in range(n)
    ])
    # Scaled up so some embeddings start outside the unit ball, which
    # keeps the hinge penalty active under the check.
    batch = FeatureBatch(
        app_s=3.0 * rng.standard_normal((n, n_app)),
        app_o=3.0 * rng.standard_normal((n, n_app)),
        app_u=3.0 * rng.standard_normal((n, n_app)),
        loc=locs,
    )
    targets = rng.integers(0, 7, size=n)
    return batch, targets, rng


def gradcheck_table(seed: int) -> list[tuple[str, GradReport]]:
    """Finite-difference reports for every trainable configuration."""
    n_pred = 7
    batch, targets, rng = _gradcheck_fixture(seed)
    n_app = batch.app_s.shape[1]
    rows: list[tuple[str, GradReport]] = []

    def small_cfg(**kw) -> UVTransEConfig:
        return UVTransEConfig(
            n_app=n_app, n_predicates=n_pred, d_emb=24, hidden_app=32,
            loc_hidden=12, loc_dim=8, **kw,
        )

    variants = [
        ("visual C=0", small_cfg(C=0.0)),
        ("visual C=1", small_cfg(C=1.0)),
        ("visual C=1 background", small_cfg(C=1.0, use_background=True)),
        ("summation", small_cfg(C=1.0, variant="summation")),
        ("vtranse", small_cfg(C=1.0, variant="vtranse")),
        ("appearance", small_cfg(C=0.5, variant="appearance")),
        ("appearance_spatial", small_cfg(C=0.5, variant="appearance_spatial")),
    ]
    for name, mcfg in variants:
        model = VisualModel(mcfg, np.random.default_rng(seed + 101))
        t = targets if not mcfg.use_background else np.where(
            targets % 2 == 0, targets, mcfg.background_class
        )
        rows.append((name, gradient_check(visual_objective(model, batch, t), seed)))

    # Joint model: language loss gradients must flow into the visual MLPs.
    mcfg = small_cfg(C=1.0)
    model = VisualModel(mcfg, np.random.default_rng(seed + 202))
    names = [f"thing_{i}" for i in range(10)]
    words = WordTable.random(names, dim=12, rng=np.random.default_rng(seed + 303))
    language = LanguageModel(
        LanguageConfig(d_emb=24, n_outputs=n_pred, word_dim=12, hidden_dim=10, head_hidden=16),
        np.random.default_rng(seed + 404),
    )
    subject_names = [names[int(i)] for i in rng.integers(0, len(names), len(batch))]
    object_names = [names[int(i)] for i in rng.integers(0, len(names), len(batch))]
    rows.append((
        "joint alpha=0.5",
        gradient_check(
            joint_objective(model, language, words, batch, targets,
                            subject_names, object_names, alpha=0.5),
            seed,
        ),
    ))
    return rows


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rows = gradcheck_table(args.seed)
    print(f"config: {canonical_json({'seed': args.seed})}")
    width = max(len(name) for name, _ in rows)
    ok = True
    for name, report in rows:
        status = "ok" if report.passed else "FAIL"
        print(
            f"{name:<{width}}  max_rel_error={report.max_rel_error:.3e}  "
            f"worst={report.param_name}  analytic={report.analytic:.6e}  "
            f"numeric={report.numeric:.6e}  [{status}]"
        )
        ok = ok and report.passed
    if args.output is not None:
        write_canonical(args.output, {
            "seed": args.seed,
            "rows": [
                {
                    "name": name,
                    "max_rel_error": r.max_rel_error,
                    "param": r.param_name,
                    "analytic": r.analytic,
                    "numeric": r.numeric,
                    "passed": r.passed,
                }
                for name, r in rows
            ],
        })
    return EXIT_OK if ok else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
