"""Visual relationship scoring via union-box translation embeddings.

Subject, object, and union-box appearance vectors are projected into a
shared space by separate two-layer MLPs, and the predicate embedding is
the translation left over when the subject and object embeddings are
subtracted from the union embedding. That translation, concatenated
with a compact spatial embedding of the box pair, feeds a two-layer
classification head. A hinge penalty keeps each projected embedding
near or inside the unit ball so the translation structure, not raw
norm, carries the signal.

Baseline variants share the machinery for ablation runs:

* ``summation``: combines embeddings by addition instead of subtraction.
* ``vtranse``: object-minus-subject translation, no union feature.
* ``appearance`` / ``appearance_spatial``: one projection of the
  concatenated appearance vectors, without / with the spatial embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator, Sequence

import numpy as np

from .nn import (
    MLP,
    Param,
    TrainingError,
    softmax,
    softmax_cross_entropy_batch,
)

VARIANTS = ("uvtranse", "summation", "vtranse", "appearance", "appearance_spatial")
SCORE_MODES = ("sum", "product")
LOC_DIM_IN = 19


@dataclass
class UVTransEConfig:
    """Architecture and loss settings for the visual model.

    `n_predicates` counts real predicates only; when `use_background` is
    set, one extra logit (index `n_predicates`) absorbs unrelated pairs
    and is excluded from ranked output but kept in the softmax.
    """

    n_app: int
    n_predicates: int
    d_emb: int = 256
    hidden_app: int = 512
    loc_hidden: int = 32
    loc_dim: int = 16
    C: float = 1.0
    use_background: bool = False
    score_mode: str = "sum"
    variant: str = "uvtranse"
    head_hidden_relu: bool = True

    def __post_init__(self):
        for name in ("n_app", "n_predicates", "d_emb", "hidden_app", "loc_hidden", "loc_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.C < 0:
            raise ValueError(f"C must be >= 0, got {self.C}")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def n_outputs(self) -> int:
        return self.n_predicates + (1 if self.use_background else 0)

    @property
    def background_class(self) -> int | None:
        return self.n_predicates if self.use_background else None

    @property
    def uses_location(self) -> bool:
        return self.variant != "appearance"

    @property
    def uses_translation(self) -> bool:
        return self.variant in ("uvtranse", "summation", "vtranse")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "UVTransEConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass(eq=False)
class FeatureBatch:
    """Stacked appearance and spatial inputs for n triplets."""

    app_s: np.ndarray  # (n, n_app)
    app_o: np.ndarray  # (n, n_app)
    app_u: np.ndarray  # (n, n_app)
    loc: np.ndarray  # (n, 19)

    def __post_init__(self):
        n = self.app_s.shape[0]
        if not (self.app_o.shape[0] == self.app_u.shape[0] == self.loc.shape[0] == n):
            raise ValueError("feature arrays disagree on batch size")
        if self.loc.shape[1] != LOC_DIM_IN:
            raise ValueError(f"spatial input must be {LOC_DIM_IN}-d, got {self.loc.shape[1]}")

    def __len__(self) -> int:
        return self.app_s.shape[0]

    @classmethod
    def from_triplets(cls, triplets: Sequence) -> "FeatureBatch":
        """Stack objects exposing app_s / app_o / app_u / loc attributes."""
        if not triplets:
            raise ValueError("cannot build a batch from zero triplets")
        return cls(
            app_s=np.stack([np.asarray(t.app_s, dtype=np.float64) for t in triplets]),
            app_o=np.stack([np.asarray(t.app_o, dtype=np.float64) for t in triplets]),
            app_u=np.stack([np.asarray(t.app_u, dtype=np.float64) for t in triplets]),
            loc=np.stack([np.asarray(t.loc, dtype=np.float64) for t in triplets]),
        )


@dataclass(eq=False)
class Embeddings:
    """Projected embeddings from one forward pass (None where unused)."""

    e_s: np.ndarray | None
    e_o: np.ndarray | None
    e_u: np.ndarray | None
    e_all: np.ndarray | None
    e_loc: np.ndarray | None


@dataclass
class LossBreakdown:
    total: float
    cross_entropy: float
    penalty: float


def predicate_embedding(
    e_s: np.ndarray, e_o: np.ndarray, e_u: np.ndarray | None, mode: str = "subtract"
) -> np.ndarray:
    """Combine projected embeddings into the predicate embedding.

    `subtract` is the union-minus-parts translation; `sum` is the
    additive ablation; `vtranse` is object minus subject and ignores
    the union embedding entirely.
    """
    if mode == "subtract":
        return e_u - e_s - e_o
    if mode == "sum":
        return e_u + e_s + e_o
    if mode == "vtranse":
        return e_o - e_s
    raise ValueError(f"unknown combiner mode {mode!r}")


_COMBINER_FOR_VARIANT = {"uvtranse": "subtract", "summation": "sum", "vtranse": "vtranse"}


class VisualModel:
    """The translation-embedding predicate classifier.

    Parameters are plain float64 arrays with gradient buffers; forward
    caches everything backward needs. Construction with rng=None
    zero-initializes all weights (checkpoint loading overwrites them).
    """

    def __init__(self, config: UVTransEConfig, rng: np.random.Generator | None = None):
        self.config = config
        c = config
        self.f_s: MLP | None = None
        self.f_o: MLP | None = None
        self.f_u: MLP | None = None
        self.f_all: MLP | None = None
        self.loc_mlp: MLP | None = None
        if c.variant in ("uvtranse", "summation"):
            self.f_s = MLP([c.n_app, c.hidden_app, c.d_emb], rng)
            self.f_o = MLP([c.n_app, c.hidden_app, c.d_emb], rng)
            self.f_u = MLP([c.n_app, c.hidden_app, c.d_emb], rng)
        elif c.variant == "vtranse":
            self.f_s = MLP([c.n_app, c.hidden_app, c.d_emb], rng)
            self.f_o = MLP([c.n_app, c.hidden_app, c.d_emb], rng)
        else:
            self.f_all = MLP([3 * c.n_app, c.hidden_app, c.d_emb], rng)
        if c.uses_location:
            self.loc_mlp = MLP([LOC_DIM_IN, c.loc_hidden, c.loc_dim], rng)
        head_in = c.d_emb + (c.loc_dim if c.uses_location else 0)
        self.head = MLP([head_in, c.d_emb, c.n_outputs], rng, hidden_relu=c.head_hidden_relu)
        self._cache: dict | None = None

    def _mlps(self) -> Iterator[tuple[str, MLP]]:
        for name in ("f_s", "f_o", "f_u", "f_all", "loc_mlp"):
            mlp = getattr(self, name)
            if mlp is not None:
                yield name, mlp
        yield "head", self.head

    def named_parameters(self) -> Iterator[Param]:
        for name, mlp in self._mlps():
            yield from mlp.named_parameters(f"{name}/")

    def zero_grad(self) -> None:
        for _, mlp in self._mlps():
            mlp.zero_grad()

    def embed(self, batch: FeatureBatch) -> Embeddings:
        """Project a batch into the embedding space (caches nothing extra)."""
        c = self.config
        if batch.app_s.shape[1] != c.n_app:
            raise ValueError(
                f"appearance dim {batch.app_s.shape[1]} does not match n_app={c.n_app}"
            )
        e_s = e_o = e_u = e_all = e_loc = None
        if c.uses_translation:
            e_s = self.f_s.forward(batch.app_s)
            e_o = self.f_o.forward(batch.app_o)
            if self.f_u is not None:
                e_u = self.f_u.forward(batch.app_u)
        else:
            joined = np.concatenate([batch.app_s, batch.app_o, batch.app_u], axis=1)
            e_all = self.f_all.forward(joined)
        if c.uses_location:
            e_loc = self.loc_mlp.forward(batch.loc)
        return Embeddings(e_s, e_o, e_u, e_all, e_loc)

    def predicate_logits(self, phat: np.ndarray, e_loc: np.ndarray | None) -> np.ndarray:
        """Head logits for a precomputed predicate embedding."""
        if self.config.uses_location:
            if e_loc is None:
                raise ValueError("this variant requires the spatial embedding")
            head_in = np.concatenate([phat, e_loc], axis=-1)
        else:
            head_in = phat
        return self.head.forward(head_in)

    def forward(self, batch: FeatureBatch) -> np.ndarray:
        """Logits of shape (n, n_outputs); caches activations for backward."""
        emb = self.embed(batch)
        if self.config.uses_translation:
            phat = predicate_embedding(
                emb.e_s, emb.e_o, emb.e_u, _COMBINER_FOR_VARIANT[self.config.variant]
            )
        else:
            phat = emb.e_all
        logits = self.predicate_logits(phat, emb.e_loc)
        self._cache = {"emb": emb, "phat": phat, "n": len(batch)}
        return logits

    @property
    def last_phat(self) -> np.ndarray:
        """Predicate embedding from the most recent forward pass."""
        if self._cache is None:
            raise RuntimeError("no forward pass cached")
        return self._cache["phat"]

    def _penalty_embeddings(self, emb: Embeddings) -> list[np.ndarray]:
        if self.config.uses_translation:
            return [e for e in (emb.e_s, emb.e_o, emb.e_u) if e is not None]
        return [emb.e_all]

    def penalty_value(self) -> float:
        """C times the batch-mean hinge penalty sum([||e||^2 - 1]_+)."""
        if self._cache is None:
            raise RuntimeError("no forward pass cached")
        if self.config.C == 0.0:
            return 0.0
        emb: Embeddings = self._cache["emb"]
        total = 0.0
        for e in self._penalty_embeddings(emb):
            total += np.maximum(np.sum(e * e, axis=1) - 1.0, 0.0).sum()
        return self.config.C * total / self._cache["n"]

    def backward(
        self,
        dlogits: np.ndarray,
        penalty_coef: float = 1.0,
        extra_phat_grad: np.ndarray | None = None,
    ) -> None:
        """Backpropagate a logit gradient plus the scaled hinge penalty.

        `penalty_coef` scales the penalty term's contribution (joint
        training weighs the whole visual loss by alpha); an optional
        `extra_phat_grad` injects the language module's gradient on the
        predicate embedding.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        emb: Embeddings = self._cache["emb"]
        n = self._cache["n"]
        c = self.config

        dhead_in = self.head.backward(dlogits)
        if c.uses_location:
            dphat = dhead_in[:, : c.d_emb]
            dloc = dhead_in[:, c.d_emb :]
        else:
            dphat = dhead_in
            dloc = None
        if extra_phat_grad is not None:
            dphat = dphat + extra_phat_grad

        def hinge_grad(e: np.ndarray) -> np.ndarray:
            if c.C == 0.0 or penalty_coef == 0.0:
                return np.zeros_like(e)
            active = (np.sum(e * e, axis=1) > 1.0)[:, None]
            return (penalty_coef * c.C * 2.0 / n) * e * active

        if c.variant == "uvtranse":
            self.f_u.backward(dphat + hinge_grad(emb.e_u))
            self.f_s.backward(-dphat + hinge_grad(emb.e_s))
            self.f_o.backward(-dphat + hinge_grad(emb.e_o))
        elif c.variant == "summation":
            self.f_u.backward(dphat + hinge_grad(emb.e_u))
            self.f_s.backward(dphat + hinge_grad(emb.e_s))
            self.f_o.backward(dphat + hinge_grad(emb.e_o))
        elif c.variant == "vtranse":
            self.f_o.backward(dphat + hinge_grad(emb.e_o))
            self.f_s.backward(-dphat + hinge_grad(emb.e_s))
        else:
            self.f_all.backward(dphat + hinge_grad(emb.e_all))
        if dloc is not None:
            self.loc_mlp.backward(dloc)

    def predicate_scores(self, batch: FeatureBatch) -> np.ndarray:
        """Softmax over the logits, shape (n, n_outputs).

        The background column (if any) stays in the normalization;
        callers slice it off before ranking.
        """
        return softmax(self.forward(batch))

    def apply_logits(self, batch: FeatureBatch) -> tuple[np.ndarray, np.ndarray]:
        """Cache-free forward for inference: (logits, predicate embedding).

        Writes nothing on the model, so worker threads can score
        different images concurrently.
        """
        c = self.config
        if c.uses_translation:
            e_s = self.f_s.apply(batch.app_s)
            e_o = self.f_o.apply(batch.app_o)
            e_u = self.f_u.apply(batch.app_u) if self.f_u is not None else None
            phat = predicate_embedding(e_s, e_o, e_u, _COMBINER_FOR_VARIANT[c.variant])
        else:
            joined = np.concatenate([batch.app_s, batch.app_o, batch.app_u], axis=1)
            phat = self.f_all.apply(joined)
        if c.uses_location:
            head_in = np.concatenate([phat, self.loc_mlp.apply(batch.loc)], axis=-1)
        else:
            head_in = phat
        return self.head.apply(head_in), phat

    def apply_scores(self, batch: FeatureBatch) -> tuple[np.ndarray, np.ndarray]:
        """Cache-free softmax scores plus the predicate embedding."""
        logits, phat = self.apply_logits(batch)
        return softmax(logits), phat


def visual_loss(model: VisualModel, batch: FeatureBatch, targets: np.ndarray) -> LossBreakdown:
    """Regularized training loss on one minibatch; fills exact gradients.

    Mean softmax cross-entropy of the predicate logits plus C times the
    batch-mean hinge penalty over the projected appearance embeddings.
    Gradients are zeroed first, so the buffers hold exactly this batch's
    gradient on return.
    """
    model.zero_grad()
    logits = model.forward(batch)
    ce, dlogits = softmax_cross_entropy_batch(logits, targets)
    penalty = model.penalty_value()
    model.backward(dlogits, penalty_coef=1.0)
    total = ce + penalty
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss: ce={ce}, penalty={penalty}")
    return LossBreakdown(total=total, cross_entropy=ce, penalty=penalty)


def triplet_score(z_s: float, z_o: float, z_p: float, mode: str = "sum") -> float:
    """Rank score of a (subject, predicate, object) triplet.

    `sum` adds the detection scores to the predicate score; `product`
    multiplies all three.
    """
    if mode == "sum":
        return z_s + z_p + z_o
    if mode == "product":
        return z_s * z_p * z_o
    raise ValueError(f"score mode must be one of {SCORE_MODES}, got {mode!r}")
