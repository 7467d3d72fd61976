"""Ground-truth conditional Gaussian-mixture world with closed-form diffused scores.

The world stands in for a pretrained conditional denoiser. A context
("ceo", "nurse", ...) owns one Gaussian component per attribute combination
(the product of the attribute families). Its mixture weights come from the
biased prior log-weights, shifted by how strongly the condition embedding
reads out along each attribute's axis::

    w_k  ∝  exp(b_k + coupling * <readout(c), u_k>)

Object contexts ("car", "tree") have a single component and ignore the
condition. An empty prompt is the unconditional model: the pooled mixture
of every context at its prior weights.

Attribute component means are shared by all attribute contexts, so the
pooled model is roughly attribute-balanced while each context is skewed.
That gap is what lets classifier-free guidance amplify a context's bias.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from weakguide.codec import Codec, CondEmbedding, PromptSpec, codec_from_config

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class WorldError(ValueError):
    """Malformed world definition or a query the world cannot answer."""


@dataclass(frozen=True)
class ContextSpec:
    name: str
    prior: Mapping[str, float] | None = None  # attribute -> probability (attribute contexts)
    mean: tuple[float, ...] | None = None  # object contexts

    @property
    def is_object(self) -> bool:
        return self.prior is None


@dataclass(frozen=True)
class WorldSpec:
    """Immutable description of the world, usually loaded from TOML."""

    dim: int
    sigma: float
    coupling: float
    families: Mapping[str, tuple[str, ...]]
    attribute_means: Mapping[str, tuple[float, ...]]
    contexts: Mapping[str, ContextSpec]

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(a for fam in self.families.values() for a in fam)

    def family_of(self, attribute: str) -> str:
        for name, members in self.families.items():
            if attribute in members:
                return name
        raise WorldError(f"unknown attribute {attribute!r}")

    def digest(self) -> str:
        payload = {
            "dim": self.dim,
            "sigma": self.sigma,
            "coupling": self.coupling,
            "families": {k: list(v) for k, v in self.families.items()},
            "attribute_means": {k: list(v) for k, v in self.attribute_means.items()},
            "contexts": {
                k: {"prior": dict(c.prior) if c.prior else None, "mean": list(c.mean) if c.mean else None}
                for k, c in self.contexts.items()
            },
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class MixtureParams:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    covs: np.ndarray  # (K, D, D)
    labels: tuple = ()  # per component: tuple of attributes, or () for object components

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise WorldError("mixture weights must lie on the simplex")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means


@dataclass(frozen=True, eq=False)
class BayesLabel:
    attribute: str
    posterior: dict[str, float]


# -- world file parsing ---------------------------------------------------------


def _vector(value, dim: int, where: str) -> tuple[float, ...]:
    try:
        v = tuple(float(x) for x in value)
    except TypeError:
        raise WorldError(f"{where}: expected a list of {dim} numbers") from None
    if len(v) != dim:
        raise WorldError(f"{where}: expected {dim} components, got {len(v)}")
    return v


def world_spec_from_dict(raw: Mapping) -> WorldSpec:
    known = {"dim", "sigma", "coupling", "families", "attribute_means", "contexts"}
    for key in raw:
        if key not in known:
            raise WorldError(f"world.{key}: unknown key")
    try:
        dim = int(raw.get("dim", 2))
        sigma = float(raw.get("sigma", 0.5))
        coupling = float(raw["coupling"])
        families = {str(k): tuple(str(a) for a in v) for k, v in raw["families"].items()}
        contexts_raw = raw["contexts"]
    except KeyError as exc:
        raise WorldError(f"world.{exc.args[0]}: missing required key") from None
    if sigma <= 0:
        raise WorldError("world.sigma: must be > 0")
    if coupling <= 0:
        raise WorldError("world.coupling: must be > 0")
    attrs = [a for fam in families.values() for a in fam]
    if len(set(attrs)) != len(attrs):
        raise WorldError("world.families: attributes must be unique across families")
    if any(len(f) < 2 for f in families.values()):
        raise WorldError("world.families: every family needs at least two attributes")
    means_raw = raw.get("attribute_means", {})
    attribute_means = {}
    for a in attrs:
        if a not in means_raw:
            raise WorldError(f"world.attribute_means.{a}: missing")
        attribute_means[a] = _vector(means_raw[a], dim, f"world.attribute_means.{a}")
    contexts = {}
    for name, body in contexts_raw.items():
        where = f"world.contexts.{name}"
        if "prior" in body and "mean" in body:
            raise WorldError(f"{where}: give either prior or mean, not both")
        if "mean" in body:
            contexts[name] = ContextSpec(name, None, _vector(body["mean"], dim, f"{where}.mean"))
            continue
        if "prior" not in body:
            raise WorldError(f"{where}.prior: missing")
        prior = {str(k): float(v) for k, v in body["prior"].items()}
        for a in prior:
            if a not in attrs:
                raise WorldError(f"{where}.prior.{a}: unknown attribute")
        for fam, members in families.items():
            vals = [prior.get(a) for a in members]
            if any(v is None for v in vals):
                raise WorldError(f"{where}.prior: family {fam!r} needs a probability for every attribute")
            if any(v <= 0 for v in vals):
                raise WorldError(f"{where}.prior: probabilities must be > 0")
            total = sum(vals)
            for a in members:
                prior[a] /= total
        contexts[name] = ContextSpec(name, prior, None)
    if not contexts:
        raise WorldError("world.contexts: at least one context is required")
    return WorldSpec(dim, sigma, coupling, families, attribute_means, contexts)


def load_world_spec(path: str | Path) -> WorldSpec:
    with open(path, "rb") as fh:
        return world_spec_from_dict(tomllib.load(fh))


def default_world_path() -> Path:
    return Path(__file__).with_name("data") / "default_world.toml"


# -- the world --------------------------------------------------------------------


def gaussian_logpdf(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(x; means_k, covs_k) for x of shape (B, D); returns (B, K)."""
    chol = np.linalg.cholesky(covs)
    diff = x[:, None, :] - means[None, :, :]  # (B, K, D)
    sol = np.stack([np.linalg.solve(chol[k], diff[:, k, :].T).T for k in range(len(means))], axis=1)
    maha = np.einsum("bkd,bkd->bk", sol, sol)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    d = x.shape[1]
    return -0.5 * (maha + logdet[None, :] + d * math.log(2.0 * math.pi))


def diffused_mixture(m: MixtureParams, abar: float) -> MixtureParams:
    """Mixture of ``sqrt(abar) x0 + sqrt(1 - abar) eps``."""
    if not 0.0 < abar <= 1.0:
        raise WorldError(f"abar must lie in (0, 1], got {abar}")
    if abar == 1.0:
        return m
    eye = np.eye(m.means.shape[1])
    return MixtureParams(m.weights, np.sqrt(abar) * m.means, abar * m.covs + (1.0 - abar) * eye, m.labels)


def mixture_logpdf(x: np.ndarray, weights: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Log density for x (B, D); ``weights`` is (K,) or per-row (B, K)."""
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logsumexp(logw + gaussian_logpdf(x, means, covs), axis=-1)


def mixture_score(x: np.ndarray, weights: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Gradient of the mixture log density at x (B, D)."""
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    logr = logw + gaussian_logpdf(x, means, covs)
    resp = np.exp(logr - logsumexp(logr, axis=-1, keepdims=True))  # (B, K)
    prec = np.linalg.inv(covs)  # (K, D, D)
    diff = means[None, :, :] - x[:, None, :]
    comp = np.einsum("kij,bkj->bki", prec, diff)
    return np.einsum("bk,bki->bi", resp, comp)


@dataclass(frozen=True, eq=False)
class World:
    """A ``WorldSpec`` bound to the codec whose embeddings it reads."""

    spec: WorldSpec
    codec: Codec
    _axes: np.ndarray = field(init=False, repr=False)
    _labels: tuple = field(init=False, repr=False)
    _means: np.ndarray = field(init=False, repr=False)
    _bias: dict = field(init=False, repr=False)
    _uncond: MixtureParams = field(init=False, repr=False)
    _incidence: np.ndarray = field(init=False, repr=False)  # (n_attributes, K): attribute a in label k

    def __post_init__(self):
        spec = self.spec
        for token in list(spec.contexts) + list(spec.attributes):
            self.codec.token_vector(token)
        set_ = object.__setattr__
        set_(self, "_axes", self.codec.attribute_axes(spec.attributes))
        labels = tuple(itertools.product(*spec.families.values()))
        set_(self, "_labels", labels)
        inc = np.zeros((len(spec.attributes), len(labels)))
        for k, lab in enumerate(labels):
            for a in lab:
                inc[spec.attributes.index(a), k] = 1.0
        set_(self, "_incidence", inc)
        set_(self, "_means", np.array([np.sum([spec.attribute_means[a] for a in lab], axis=0) for lab in labels]))
        bias = {}
        for name, ctx in spec.contexts.items():
            if not ctx.is_object:
                bias[name] = np.array([sum(math.log(ctx.prior[a]) for a in lab) for lab in labels])
        set_(self, "_bias", bias)
        set_(self, "_uncond", self._pooled())

    # -- structure ------------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def labels(self) -> tuple:
        return self._labels

    @property
    def attribute_contexts(self) -> tuple[str, ...]:
        return tuple(n for n, c in self.spec.contexts.items() if not c.is_object)

    @property
    def object_contexts(self) -> tuple[str, ...]:
        return tuple(n for n, c in self.spec.contexts.items() if c.is_object)

    def context(self, name: str) -> ContextSpec:
        try:
            return self.spec.contexts[name]
        except KeyError:
            raise WorldError(f"unknown context {name!r}") from None

    def attribute_axis(self, attribute: str) -> np.ndarray:
        return self._axes[self.spec.attributes.index(attribute)]

    def prior_weights(self, context: str) -> np.ndarray:
        b = self._bias_for(context)
        return np.exp(b - logsumexp(b))

    def minor_attribute(self, context: str, family: str | None = None) -> str:
        fam = family or next(iter(self.spec.families))
        prior = self._attr_context(context).prior
        return min(self.spec.families[fam], key=lambda a: prior[a])

    def major_attribute(self, context: str, family: str | None = None) -> str:
        fam = family or next(iter(self.spec.families))
        prior = self._attr_context(context).prior
        return max(self.spec.families[fam], key=lambda a: prior[a])

    def covs(self, k: int) -> np.ndarray:
        return np.repeat((self.spec.sigma**2 * np.eye(self.dim))[None], k, axis=0)

    def _attr_context(self, name: str) -> ContextSpec:
        ctx = self.context(name)
        if ctx.is_object:
            raise WorldError(f"context {name!r} has no attribute components")
        return ctx

    def _bias_for(self, context: str) -> np.ndarray:
        self._attr_context(context)
        return self._bias[context]

    def _pooled(self) -> MixtureParams:
        n_ctx = len(self.spec.contexts)
        weights, means, labels = [], [], []
        attr_w = np.zeros(len(self._labels))
        for name in self.attribute_contexts:
            attr_w += self.prior_weights(name) / n_ctx
        if self.attribute_contexts:
            weights.extend(attr_w)
            means.extend(self._means)
            labels.extend(self._labels)
        for name in self.object_contexts:
            weights.append(1.0 / n_ctx)
            means.append(self.context(name).mean)
            labels.append(())
        w = np.array(weights)
        return MixtureParams(w / w.sum(), np.array(means), self.covs(len(w)), tuple(labels))

    # -- conditional weights --------------------------------------------------

    def logits_from_readout(self, readout: np.ndarray, context: str) -> np.ndarray:
        """Unnormalized log-weights for readouts of shape (B, d); returns (B, K)."""
        proj = np.atleast_2d(readout) @ self._axes.T  # (B, n_attributes)
        return self._bias_for(context)[None, :] + self.spec.coupling * (proj @ self._incidence)

    def weights_many(self, conds: Sequence[CondEmbedding], context: str) -> np.ndarray:
        """Per-row mixture weights for a batch of non-empty conditions; (B, K)."""
        if self.context(context).is_object:
            return np.ones((len(conds), 1))
        uniq: dict[int, int] = {}
        first: list[CondEmbedding] = []
        rows = []
        for c in conds:
            key = id(c)
            if key not in uniq:
                if c.eos_index == 0:
                    raise WorldError("empty condition has no context; use the unconditional mixture")
                uniq[key] = len(first)
                first.append(c)
            rows.append(uniq[key])
        mats = np.stack([c.matrix for c in first])
        eos = np.array([c.eos_index for c in first])
        logits = self.logits_from_readout(self.codec.readout_many(mats, eos), context)
        w = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        return w[np.array(rows)]

    def components(self, context: str) -> MixtureParams:
        """Component geometry of a context with its prior weights."""
        ctx = self.context(context)
        if ctx.is_object:
            return MixtureParams(np.ones(1), np.array([ctx.mean]), self.covs(1), ((),))
        return MixtureParams(self.prior_weights(context), self._means, self.covs(len(self._labels)), self._labels)

    def unconditional(self) -> MixtureParams:
        return self._uncond

    def mixture_for(self, c: CondEmbedding, context: str) -> MixtureParams:
        ctx = self.context(context)
        if c.eos_index == 0:
            return self._uncond
        base = self.components(context)
        if ctx.is_object:
            return base
        logits = self.logits_from_readout(self.codec.readout(c), context)[0]
        w = np.exp(logits - logsumexp(logits))
        return MixtureParams(w / w.sum(), base.means, base.covs, base.labels)

    # -- densities and scores -----------------------------------------------------

    def score(self, z: np.ndarray, abar: float, c: CondEmbedding, context: str) -> np.ndarray:
        """Exact gradient of log p_t(z | c) at noise level ``abar``."""
        z = np.asarray(z, dtype=np.float64)
        if not np.all(np.isfinite(z)):
            raise WorldError("score requested at a non-finite point")
        m = diffused_mixture(self.mixture_for(c, context), abar)
        single = z.ndim == 1
        out = mixture_score(np.atleast_2d(z), m.weights, m.means, m.covs)
        return out[0] if single else out

    def eps_pred(self, z: np.ndarray, abar: float, c: CondEmbedding, context: str) -> np.ndarray:
        return -np.sqrt(1.0 - abar) * self.score(z, abar, c, context)

    def log_density(self, x: np.ndarray, c: CondEmbedding, context: str, abar: float = 1.0) -> np.ndarray | float:
        x = np.asarray(x, dtype=np.float64)
        m = diffused_mixture(self.mixture_for(c, context), abar)
        out = mixture_logpdf(np.atleast_2d(x), m.weights, m.means, m.covs)
        return float(out[0]) if x.ndim == 1 else out

    # -- sampling and classification --------------------------------------------

    def draw(self, m: MixtureParams, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Ancestral draws from a mixture; returns (points, component indices)."""
        comp = rng.choice(m.n_components, size=n, p=m.weights)
        chol = np.linalg.cholesky(m.covs)
        eps = rng.standard_normal((n, self.dim))
        x = m.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)
        return x, comp

    def sample_oracle(
        self, context: str, qualifier: str | None, n: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, list]:
        """Ground-truth samples for ``context`` (optionally with a qualifier) and their true labels."""
        if n < 1:
            raise WorldError("n must be >= 1")
        m = self.mixture_for(self.codec.encode(PromptSpec(context, qualifier)), context)
        x, comp = self.draw(m, n, rng)
        labels = [m.labels[k] for k in comp]
        return x, labels

    def posterior_many(self, x: np.ndarray, context: str, family: str | None = None) -> np.ndarray:
        """Uniform-prior posterior over one family's attributes; (B, |family|)."""
        self._attr_context(context)
        fam = family or next(iter(self.spec.families))
        members = self.spec.families[fam]
        pos = list(self.spec.families).index(fam)
        loglik = gaussian_logpdf(np.atleast_2d(x), self._means, self.covs(len(self._labels)))
        post = np.exp(loglik - logsumexp(loglik, axis=1, keepdims=True))
        out = np.zeros((post.shape[0], len(members)))
        for k, lab in enumerate(self._labels):
            out[:, members.index(lab[pos])] += post[:, k]
        return out

    def classify_many(self, x: np.ndarray, context: str, family: str | None = None) -> np.ndarray:
        """Index (into the family) of the Bayes label for each row."""
        return np.argmax(self.posterior_many(x, context, family), axis=1)

    def classify(self, x: np.ndarray, context: str, family: str | None = None) -> BayesLabel:
        fam = family or next(iter(self.spec.families))
        members = self.spec.families[fam]
        post = self.posterior_many(np.asarray(x, dtype=np.float64)[None, :], context, fam)[0]
        return BayesLabel(members[int(np.argmax(post))], dict(zip(members, post.tolist())))


def build_world(spec: WorldSpec, codec_cfg: Mapping | None = None) -> World:
    vocab = list(spec.contexts) + list(spec.attributes)
    return World(spec, codec_from_config(vocab, codec_cfg))


def load_world(path: str | Path | None = None, codec_cfg: Mapping | None = None) -> World:
    return build_world(load_world_spec(path or default_world_path()), codec_cfg)
