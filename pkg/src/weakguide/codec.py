"""Synthetic text encoder and the condition-embedding edits built on top of it.

Each token maps to a fixed unit vector drawn from a seeded hash of its name.
An encoded prompt is an ``L x d`` matrix laid out as::

    [context][qualifier][extra tokens...][EOS][pad][pad]...

Prefix rows are the raw token vectors. The EOS row and every padding row
also carry a summary of the prefix (the mean prefix vector, scaled by
``context_mixing``). This mirrors a causal text encoder, where positions
after EOS still attend to the whole prompt. Without that summary an
attribute direction would be zero from EOS onward, and an EOS-masked edit
could not steer anything.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

EOS = "<eos>"
PAD = "<pad>"

EOS_MASKED = "eos_masked"
EVERY_POSITION = "every_position"
MASK_MODES = (EOS_MASKED, EVERY_POSITION)


class VocabularyError(KeyError):
    """Raised for a token that is not in the codec vocabulary."""


class DegenerateRowError(ValueError):
    """Raised when a row cannot be renormalized (zero norm before or after the edit)."""


@dataclass(frozen=True)
class PromptSpec:
    """Structured prompt: a context token, an optional qualifier, then filler tokens."""

    context: str | None = None
    qualifier: str | None = None
    extra_tokens: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "extra_tokens", tuple(self.extra_tokens))

    def tokens(self) -> tuple[str, ...]:
        out = []
        if self.context:
            out.append(self.context)
        if self.qualifier:
            out.append(self.qualifier)
        out.extend(self.extra_tokens)
        return tuple(out)

    def with_qualifier(self, attribute: str | None) -> "PromptSpec":
        return PromptSpec(self.context, attribute, self.extra_tokens)

    def appended(self, token: str) -> "PromptSpec":
        """The same prompt with ``token`` as the last prefix token."""
        return PromptSpec(self.context, self.qualifier, self.extra_tokens + (token,))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CondEmbedding:
    matrix: np.ndarray
    eos_index: int
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))
        if self.matrix.ndim != 2:
            raise ValueError(f"embedding must be 2-D, got shape {self.matrix.shape}")
        if not 0 <= self.eos_index < self.matrix.shape[0]:
            raise ValueError(f"eos_index {self.eos_index} out of range")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embedding has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.matrix, axis=1)

    def equals(self, other: "CondEmbedding") -> bool:
        return self.eos_index == other.eos_index and np.array_equal(self.matrix, other.matrix)


@dataclass(frozen=True, eq=False)
class AttributeDirection:
    attribute: str
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))

    def __add__(self, other: "AttributeDirection") -> "AttributeDirection":
        return AttributeDirection(f"{self.attribute}+{other.attribute}", self.matrix + other.matrix)


@dataclass(frozen=True)
class CadsParams:
    s: float = 0.25
    tau1: float = 0.6
    tau2: float = 0.9

    def __post_init__(self):
        if not np.isfinite(self.s) or self.s < 0:
            raise ValueError(f"CADS noise scale must be finite and >= 0, got {self.s}")
        if not 0.0 <= self.tau1 < self.tau2 <= 1.0:
            raise ValueError(f"need 0 <= tau1 < tau2 <= 1, got {self.tau1}, {self.tau2}")


def cads_gamma(t: float, tau1: float, tau2: float) -> float:
    """Annealing coefficient: 1 up to tau1, linear down to 0 at tau2."""
    if t <= tau1:
        return 1.0
    if t >= tau2:
        return 0.0
    return (tau2 - t) / (tau2 - tau1)


def _cads_check(t: float, params: CadsParams) -> float:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time must lie in [0, 1], got {t}")
    return cads_gamma(t, params.tau1, params.tau2)


def cads_rescale(matrix: np.ndarray, gamma: float, s: float, noise: np.ndarray) -> np.ndarray:
    """Batched CADS mix of one clean (L, d) matrix with noise (B, L, d).

    Each noisy copy is affinely rescaled to the clean matrix's global mean
    and std. A copy with zero spread (s = 0 at gamma = 0) returns the clean
    matrix, which is the gamma -> 0+ limit of the rescaled sqrt(gamma) * c.
    """
    raw = np.sqrt(gamma) * matrix[None] + s * np.sqrt(1.0 - gamma) * noise
    mean = raw.mean(axis=(1, 2), keepdims=True)
    spread = raw.std(axis=(1, 2), keepdims=True)
    flat = spread == 0.0
    out = (raw - mean) / np.where(flat, 1.0, spread) * matrix.std() + matrix.mean()
    return np.where(flat, matrix[None], out)


@dataclass(frozen=True, eq=False)
class CadsReadoutBasis:
    """Everything the readout of a CADS-perturbed matrix depends on.

    For noise N with iid N(0, 1) entries, the readout of the renormalized
    matrix is a function of ``y = Q^T vec(N)`` and ``||N||^2`` only, where Q
    is an orthonormal basis of the span of the readout directions, the
    all-ones vector and the clean matrix. Sampling ``y ~ N(0, I_k)`` and the
    remainder ``||N||^2 - ||y||^2 ~ chi^2(M - k)`` is therefore exact.
    """

    clean: np.ndarray  # (L, d)
    readout: np.ndarray  # (d,) readout of the clean matrix
    f: np.ndarray  # (k, d): Q^T of each readout direction
    g: np.ndarray  # (k,): Q^T of the all-ones vector
    h: np.ndarray  # (k,): Q^T of the clean matrix
    q: np.ndarray  # (M, k) orthonormal basis

    @property
    def k(self) -> int:
        return self.f.shape[0]

    @property
    def size(self) -> int:
        return self.clean.size

    @classmethod
    def build(cls, clean: np.ndarray, weights: np.ndarray) -> "CadsReadoutBasis":
        dim = clean.shape[1]
        dirs = [np.outer(weights, np.eye(dim)[j]).ravel() for j in range(dim)]
        span = np.stack(dirs + [np.ones(clean.size), clean.ravel()], axis=1)
        u, sv, _ = np.linalg.svd(span, full_matrices=False)
        q = u[:, sv > sv.max() * 1e-10]
        return cls(clean, weights @ clean, q.T @ span[:, :dim], q.T @ span[:, dim], q.T @ span[:, dim + 1], q)

    def project(self, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Sufficient statistics ``(y, rest)`` of explicit noise matrices (B, L, d)."""
        flat = noise.reshape(len(noise), -1)
        y = flat @ self.q
        return y, np.einsum("bm,bm->b", flat, flat) - np.einsum("bk,bk->b", y, y)

    def readouts(self, gamma: float, s: float, y: np.ndarray, rest: np.ndarray) -> np.ndarray:
        """Readouts (B, d) of the renormalized CADS matrices for statistics ``y`` (B, k), ``rest`` (B,)."""
        c = self.clean
        m = self.size
        a = np.sqrt(gamma)
        b = s * np.sqrt(1.0 - gamma)
        r_noise = y @ self.f
        n_mean = y @ self.g / m
        cn_mean = y @ self.h / m
        sq_mean = (np.einsum("bk,bk->b", y, y) + rest) / m
        mean = a * c.mean() + b * n_mean
        var = a * a * np.mean(c * c) + 2 * a * b * cn_mean + b * b * sq_mean - mean**2
        raw = a * self.readout[None] + b * r_noise
        flat = ~(var > 0.0)
        sd = np.sqrt(np.where(flat, 1.0, var))
        out = (raw - mean[:, None]) / sd[:, None] * c.std() + c.mean()
        return np.where(flat[:, None], self.readout[None], out)


def hashed_unit_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True, eq=False)
class Codec:
    """Deterministic token-structured encoder.

    ``post_eos_weight`` is the readout weight of each row from EOS onward
    (prefix rows weigh 1). ``context_mixing`` scales the prefix summary
    that is folded into the EOS and padding rows.
    """

    vocabulary: tuple[str, ...]
    length: int = 16
    dim: int = 32
    post_eos_weight: float = 0.1
    context_mixing: float = 1.0
    seed: int = 0
    _table: dict = field(init=False, repr=False)

    def __post_init__(self):
        vocab = [EOS, PAD] + [t for t in dict.fromkeys(self.vocabulary) if t not in (EOS, PAD)]
        if any(not t for t in vocab):
            raise VocabularyError("empty token in vocabulary")
        if self.length < 2 or self.dim < 1:
            raise ValueError("codec needs length >= 2 and dim >= 1")
        if not 0.0 < self.post_eos_weight <= 1.0:
            raise ValueError(f"post_eos_weight must lie in (0, 1], got {self.post_eos_weight}")
        object.__setattr__(self, "vocabulary", tuple(vocab))
        table = {t: _frozen(hashed_unit_vector(t, self.dim, self.seed)) for t in vocab}
        object.__setattr__(self, "_table", table)

    def token_vector(self, token: str) -> np.ndarray:
        try:
            return self._table[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def token_matrix(self) -> np.ndarray:
        return np.stack([self._table[t] for t in self.vocabulary])

    def attribute_axes(self, attributes: Sequence[str]) -> np.ndarray:
        """Dual-basis read-out axes: ``<token_j, axis_k> = 1 if j == k else 0``.

        Exact when the vocabulary vectors are linearly independent
        (vocabulary size <= dim); otherwise a least-squares dual.
        """
        dual = np.linalg.pinv(self.token_matrix()).T
        idx = [self._index(a) for a in attributes]
        return dual[idx]

    def vocabulary_rank(self) -> int:
        return int(np.linalg.matrix_rank(self.token_matrix()))

    def _index(self, token: str) -> int:
        try:
            return self.vocabulary.index(token)
        except ValueError:
            raise VocabularyError(f"unknown token {token!r}") from None

    # -- encoding -----------------------------------------------------------

    def encode_tokens(self, tokens: Sequence[str]) -> CondEmbedding:
        tokens = tuple(tokens)
        if len(tokens) > self.length - 1:
            raise ValueError(f"prompt of {len(tokens)} tokens leaves no room for EOS (L={self.length})")
        for t in tokens:
            if t in (EOS, PAD):
                raise VocabularyError(f"special token {t!r} cannot appear in a prompt")
        vecs = [self.token_vector(t) for t in tokens]
        eos = len(tokens)
        m = np.empty((self.length, self.dim))
        if vecs:
            m[:eos] = vecs
            summary = self.context_mixing * np.mean(vecs, axis=0)
        else:
            summary = np.zeros(self.dim)
        for i in range(eos, self.length):
            row = (self._table[EOS] if i == eos else self._table[PAD]) + summary
            m[i] = row / np.linalg.norm(row)
        return CondEmbedding(m, eos, tokens)

    def encode(self, prompt: PromptSpec) -> CondEmbedding:
        return self.encode_tokens(prompt.tokens())

    def empty(self) -> CondEmbedding:
        return self.encode_tokens(())

    # -- edits ----------------------------------------------------------------

    def attribute_direction(self, attribute: str) -> AttributeDirection:
        """``encode(attribute) - encode("")`` over the full sequence."""
        if attribute == "":
            return AttributeDirection("", np.zeros((self.length, self.dim)))
        if attribute not in self._table or attribute in (EOS, PAD):
            raise VocabularyError(f"unknown attribute {attribute!r}")
        diff = self.encode_tokens((attribute,)).matrix - self.empty().matrix
        return AttributeDirection(attribute, diff)

    @staticmethod
    def eos_mask(c: CondEmbedding) -> np.ndarray:
        return (np.arange(c.matrix.shape[0]) >= c.eos_index).astype(np.float64)

    @staticmethod
    def apply_weak(c: CondEmbedding, a: AttributeDirection, mode: str = EOS_MASKED) -> CondEmbedding:
        """Add ``a`` row by row (absolute positions), then restore each edited row's norm.

        ``eos_masked`` edits rows from EOS onward and leaves the prefix
        untouched; ``every_position`` edits every row.
        """
        if mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {mode!r}")
        if a.matrix.shape != c.matrix.shape:
            raise ValueError(f"shape mismatch {a.matrix.shape} vs {c.matrix.shape}")
        start = c.eos_index if mode == EOS_MASKED else 0
        out = np.array(c.matrix)
        for i in range(start, out.shape[0]):
            edit = a.matrix[i]
            if not np.any(edit):
                continue
            norm = np.linalg.norm(c.matrix[i])
            row = c.matrix[i] + edit
            new = np.linalg.norm(row)
            if norm == 0.0 or new == 0.0:
                raise DegenerateRowError(f"row {i} cannot be renormalized")
            out[i] = row * (norm / new)
        return CondEmbedding(out, c.eos_index, c.tokens)

    @staticmethod
    def cads_perturb(c: CondEmbedding, t: float, params: CadsParams, rng: np.random.Generator) -> CondEmbedding:
        """Noisy condition, rescaled to the mean and std of the clean entries.

        Noise is drawn only where the schedule actually perturbs (gamma < 1).
        """
        gamma = _cads_check(t, params)
        if gamma == 1.0:
            return c
        noise = rng.standard_normal((1, *c.matrix.shape))
        return CondEmbedding(cads_rescale(c.matrix, gamma, params.s, noise)[0], c.eos_index, c.tokens)

    # -- readout ------------------------------------------------------------

    def readout_weights(self, eos_index: int) -> np.ndarray:
        rho = np.where(np.arange(self.length) < eos_index, 1.0, self.post_eos_weight)
        return rho / rho.sum()

    def readout(self, c: CondEmbedding) -> np.ndarray:
        return self.readout_weights(c.eos_index) @ c.matrix

    def readout_many(self, matrices: np.ndarray, eos: np.ndarray) -> np.ndarray:
        """Batched readout: ``matrices`` is (B, L, d), ``eos`` is (B,)."""
        eos = np.asarray(eos)
        rho = np.where(np.arange(self.length)[None, :] < eos[:, None], 1.0, self.post_eos_weight)
        rho = rho / rho.sum(axis=1, keepdims=True)
        return np.einsum("bl,bld->bd", rho, matrices)


def embedding_to_csv(c: CondEmbedding, out: IO[str]) -> None:
    """Write the embedding as ``position,dim,value`` rows for debugging."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["position", "dim", "value"])
    for i, row in enumerate(c.matrix):
        for j, v in enumerate(row):
            w.writerow([i, j, repr(float(v))])


def codec_from_config(vocabulary: Iterable[str], cfg: dict | None = None) -> Codec:
    cfg = dict(cfg or {})
    return Codec(
        vocabulary=tuple(vocabulary) + tuple(cfg.pop("fillers", ())),
        length=int(cfg.pop("length", 16)),
        dim=int(cfg.pop("dim", 32)),
        post_eos_weight=float(cfg.pop("post_eos_weight", 0.1)),
        context_mixing=float(cfg.pop("context_mixing", 1.0)),
        seed=int(cfg.pop("seed", 0)),
    )
