"""Recurrent language scoring over (subject, predicate, object) encodings.

Class names are looked up in a word-vector table (multi-word names are
averaged, unknown tokens fall back to a fixed vector), the visual
predicate embedding is projected into the same space, and the resulting
three-step sequence runs through a bidirectional GRU. The six hidden
states, concatenated in the fixed order (fwd1, fwd2, fwd3, bwd3, bwd2,
bwd1), feed a two-layer classification head. Training gradients flow
back through the projection into the visual model unless the caller
stops them; the word vectors themselves are never trained.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Sequence

import numpy as np

from .nn import MLP, LinearLayer, Param, sigmoid, softmax, xavier_uniform


@dataclass
class LanguageConfig:
    """Dimensions of the language scorer.

    `d_emb` must match the visual model's embedding size and
    `n_outputs` its logit count (background included, when used).
    """

    d_emb: int
    n_outputs: int
    word_dim: int = 100
    hidden_dim: int = 100
    head_hidden: int = 256

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1, got {getattr(self, f.name)}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "LanguageConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})


class WordTable:
    """Immutable token-to-vector lookup with a fallback for unknowns."""

    def __init__(
        self,
        dim: int,
        vectors: dict[str, np.ndarray],
        fallback: np.ndarray | None = None,
    ):
        if dim < 1:
            raise ValueError(f"word dim must be >= 1, got {dim}")
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = {}
        for token, vec in vectors.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (dim,):
                raise ValueError(f"vector for {token!r} has shape {arr.shape}, expected ({dim},)")
            self.vectors[token] = arr
        self.fallback = (
            np.zeros(dim) if fallback is None else np.asarray(fallback, dtype=np.float64)
        )
        if self.fallback.shape != (dim,):
            raise ValueError(f"fallback vector must be {dim}-d")

    def lookup(self, class_name: str) -> np.ndarray:
        """Vector for a class name; multi-word names average per token."""
        tokens = class_name.split()
        if not tokens:
            return self.fallback.copy()
        vecs = [self.vectors.get(tok, self.fallback) for tok in tokens]
        return np.mean(vecs, axis=0)

    def lookup_many(self, class_names: Sequence[str]) -> np.ndarray:
        return np.stack([self.lookup(name) for name in class_names])

    @classmethod
    def load(cls, path: str) -> "WordTable":
        """Parse a whitespace text table: one `token v1 .. vdim` per line."""
        vectors: dict[str, np.ndarray] = {}
        dim: int | None = None
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                token, values = parts[0], parts[1:]
                if dim is None:
                    dim = len(values)
                    if dim == 0:
                        raise ValueError(f"line {line_no}: token {token!r} has no values")
                elif len(values) != dim:
                    raise ValueError(
                        f"line {line_no}: expected {dim} values for {token!r}, got {len(values)}"
                    )
                vectors[token] = np.array([float(v) for v in values])
        if dim is None:
            raise ValueError(f"word-vector file {path!r} is empty")
        return cls(dim, vectors)

    @classmethod
    def random(cls, class_names: Sequence[str], dim: int, rng: np.random.Generator) -> "WordTable":
        """Deterministic stand-in table covering every token in the names."""
        vectors: dict[str, np.ndarray] = {}
        for name in class_names:
            for token in name.split():
                if token not in vectors:
                    vectors[token] = rng.standard_normal(dim) / np.sqrt(dim)
        return cls(dim, vectors)


class GRUCell:
    """Single GRU cell with a hand-written backward pass.

    Standard gate equations: sigmoid reset and update gates, a tanh
    candidate with the reset gate applied to the recurrent term, and
    the new state h' = (1 - z) * candidate + z * h. With zero state the
    output lives strictly inside (-1, 1).
    """

    GATES = ("r", "z", "c")

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None):
        if input_dim < 1 or hidden_dim < 1:
            raise ValueError(f"invalid GRU dims {input_dim}, {hidden_dim}")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for gate in self.GATES:
            if rng is None:
                w = np.zeros((hidden_dim, input_dim))
                u = np.zeros((hidden_dim, hidden_dim))
            else:
                w = xavier_uniform(hidden_dim, input_dim, rng)
                u = xavier_uniform(hidden_dim, hidden_dim, rng)
            self.params[f"w_{gate}"] = w
            self.params[f"u_{gate}"] = u
            self.params[f"b_{gate}"] = np.zeros(hidden_dim)
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def named_parameters(self, prefix: str = "") -> Iterator[Param]:
        for name in sorted(self.params):
            yield f"{prefix}{name}", self.params[name], self.grads[name]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def step(self, x: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, dict]:
        """One timestep over a batch; returns (new state, cache)."""
        p = self.params
        r = sigmoid(x @ p["w_r"].T + h @ p["u_r"].T + p["b_r"])
        z = sigmoid(x @ p["w_z"].T + h @ p["u_z"].T + p["b_z"])
        rh = r * h
        c = np.tanh(x @ p["w_c"].T + rh @ p["u_c"].T + p["b_c"])
        h_new = (1.0 - z) * c + z * h
        cache = {"x": x, "h": h, "r": r, "z": z, "c": c, "rh": rh}
        return h_new, cache

    def apply(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        """One timestep without caching; safe for worker threads."""
        p = self.params
        r = sigmoid(x @ p["w_r"].T + h @ p["u_r"].T + p["b_r"])
        z = sigmoid(x @ p["w_z"].T + h @ p["u_z"].T + p["b_z"])
        c = np.tanh(x @ p["w_c"].T + (r * h) @ p["u_c"].T + p["b_c"])
        return (1.0 - z) * c + z * h

    def backward_step(self, cache: dict, dh_new: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Backward through one timestep; accumulates parameter gradients.

        Returns (grad w.r.t. x, grad w.r.t. the previous state).
        """
        p, g = self.params, self.grads
        x, h, r, z, c, rh = (cache[k] for k in ("x", "h", "r", "z", "c", "rh"))

        dz = dh_new * (h - c)
        dc = dh_new * (1.0 - z)
        dh_prev = dh_new * z

        da_c = dc * (1.0 - c * c)
        g["w_c"] += da_c.T @ x
        g["u_c"] += da_c.T @ rh
        g["b_c"] += da_c.sum(axis=0)
        drh = da_c @ p["u_c"]
        dr = drh * h
        dh_prev = dh_prev + drh * r

        da_r = dr * r * (1.0 - r)
        g["w_r"] += da_r.T @ x
        g["u_r"] += da_r.T @ h
        g["b_r"] += da_r.sum(axis=0)
        dh_prev = dh_prev + da_r @ p["u_r"]

        da_z = dz * z * (1.0 - z)
        g["w_z"] += da_z.T @ x
        g["u_z"] += da_z.T @ h
        g["b_z"] += da_z.sum(axis=0)
        dh_prev = dh_prev + da_z @ p["u_z"]

        dx = da_c @ p["w_c"] + da_r @ p["w_r"] + da_z @ p["w_z"]
        return dx, dh_prev


class LanguageModel:
    """Bi-GRU scorer over the (subject word, projected p-hat, object word) sequence."""

    SEQ_LEN = 3

    def __init__(self, config: LanguageConfig, rng: np.random.Generator | None = None):
        self.config = config
        c = config
        self.proj = LinearLayer(c.d_emb, c.word_dim, rng)
        self.fwd_cell = GRUCell(c.word_dim, c.hidden_dim, rng)
        self.bwd_cell = GRUCell(c.word_dim, c.hidden_dim, rng)
        self.head = MLP([2 * self.SEQ_LEN * c.hidden_dim, c.head_hidden, c.n_outputs], rng)
        self._cache: dict | None = None

    def named_parameters(self) -> Iterator[Param]:
        yield from self.proj.named_parameters("proj/")
        yield from self.fwd_cell.named_parameters("fwd/")
        yield from self.bwd_cell.named_parameters("bwd/")
        yield from self.head.named_parameters("head/")

    def zero_grad(self) -> None:
        self.proj.zero_grad()
        self.fwd_cell.zero_grad()
        self.bwd_cell.zero_grad()
        self.head.zero_grad()

    def encode_sequence(
        self,
        words: WordTable,
        subject_class: str,
        phat: np.ndarray,
        object_class: str,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """The three GRU inputs for one triplet (subject, projection, object)."""
        return words.lookup(subject_class), self.proj.forward(phat), words.lookup(object_class)

    def bigru_forward(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        """Run both directions over a 3-step batch sequence.

        Each input has shape (n, word_dim); both directions start from a
        zero state. Output is (n, 6 * hidden_dim) in the order
        (fwd1, fwd2, fwd3, bwd3, bwd2, bwd1).
        """
        if len(inputs) != self.SEQ_LEN:
            raise ValueError(f"expected {self.SEQ_LEN} sequence steps, got {len(inputs)}")
        n = inputs[0].shape[0]
        h0 = np.zeros((n, self.config.hidden_dim))

        fwd_states, fwd_caches = [], []
        h = h0
        for x in inputs:
            h, cache = self.fwd_cell.step(x, h)
            fwd_states.append(h)
            fwd_caches.append(cache)

        bwd_states, bwd_caches = [], []
        h = h0
        for x in reversed(inputs):
            h, cache = self.bwd_cell.step(x, h)
            bwd_states.append(h)
            bwd_caches.append(cache)

        self._cache = {"fwd_caches": fwd_caches, "bwd_caches": bwd_caches}
        return np.concatenate(fwd_states + bwd_states, axis=1)

    def forward(
        self, phat: np.ndarray, subj_vecs: np.ndarray, obj_vecs: np.ndarray
    ) -> np.ndarray:
        """Language logits (n, n_outputs) for a batch of triplets."""
        projected = self.proj.forward(phat)
        states = self.bigru_forward([subj_vecs, projected, obj_vecs])
        return self.head.forward(states)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Backprop to the visual predicate embedding.

        Word-vector inputs receive no gradient (the table is fixed);
        the returned array is the gradient w.r.t. p-hat, which joint
        training feeds back into the visual model.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        h = self.config.hidden_dim
        dstates = self.head.backward(dlogits)
        parts = [dstates[:, i * h : (i + 1) * h] for i in range(2 * self.SEQ_LEN)]
        d_fwd, d_bwd = parts[: self.SEQ_LEN], parts[self.SEQ_LEN :]

        dx = [None] * self.SEQ_LEN
        carried = np.zeros_like(parts[0])
        for t in reversed(range(self.SEQ_LEN)):
            dx_t, carried = self.fwd_cell.backward_step(
                self._cache["fwd_caches"][t], d_fwd[t] + carried
            )
            dx[t] = dx_t
        carried = np.zeros_like(parts[0])
        for t in reversed(range(self.SEQ_LEN)):
            dx_t, carried = self.bwd_cell.backward_step(
                self._cache["bwd_caches"][t], d_bwd[t] + carried
            )
            # The backward direction consumed inputs reversed: its step t
            # read input position SEQ_LEN - 1 - t.
            dx[self.SEQ_LEN - 1 - t] = dx[self.SEQ_LEN - 1 - t] + dx_t
        return self.proj.backward(dx[1])

    def language_scores(
        self, phat: np.ndarray, subj_vecs: np.ndarray, obj_vecs: np.ndarray
    ) -> np.ndarray:
        """Softmax over the language logits, background column included."""
        return softmax(self.forward(phat, subj_vecs, obj_vecs))

    def apply_scores(
        self, phat: np.ndarray, subj_vecs: np.ndarray, obj_vecs: np.ndarray
    ) -> np.ndarray:
        """Cache-free language scores; safe for worker threads."""
        inputs = [subj_vecs, self.proj.apply(phat), obj_vecs]
        n = inputs[0].shape[0]
        h0 = np.zeros((n, self.config.hidden_dim))
        fwd_states, bwd_states = [], []
        h = h0
        for x in inputs:
            h = self.fwd_cell.apply(x, h)
            fwd_states.append(h)
        h = h0
        for x in reversed(inputs):
            h = self.bwd_cell.apply(x, h)
            bwd_states.append(h)
        states = np.concatenate(fwd_states + bwd_states, axis=1)
        return softmax(self.head.apply(states))


def combined_loss(loss_visual: float, loss_language: float, alpha: float) -> float:
    """Convex mix alpha * visual + (1 - alpha) * language."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * loss_visual + (1.0 - alpha) * loss_language

def combined_score(
    z_s: float, z_o: float, z_p: float, z_l: float, alpha: float, mode: str = "sum"
) -> float:
    """Triplet rank score when visual and language predicate scores mix.

    `sum` adds the detection scores to the mixed predicate score;
    `product` multiplies the mixed predicate score by both detections.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    mixed = alpha * z_p + (1.0 - alpha) * z_l
    if mode == "sum":
        return z_s + z_o + mixed
    if mode == "product":
        return mixed * z_s * z_o
    raise ValueError(f"score mode must be 'sum' or 'product', got {mode!r}")
