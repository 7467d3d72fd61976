"""Per-step condition selection for each guidance scheme.

A ``GuidanceSpec`` is one of the frozen dataclasses below. ``make_driver``
resolves it against a prompt once per chain, drawing whatever the chain
needs up front (the Weak target attribute, for instance). The driver then
answers ``condition_at(t, N, rng)`` with ``(cond, uncond, alpha)`` for every
reverse step, t = N first.

Step numbering: reverse step ``j = N - t + 1`` runs from 1 (noisiest) to N.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from weakguide.codec import (
    EOS_MASKED,
    MASK_MODES,
    CadsParams,
    Codec,
    CondEmbedding,
    PromptSpec,
    CadsReadoutBasis,
    _cads_check,
)


def _check_alpha(alpha: float) -> None:
    if not alpha >= 0:
        raise ValueError(f"guidance scale must be >= 0, got {alpha}")


def _attribute_groups(attributes) -> tuple[tuple[str, ...], ...]:
    if isinstance(attributes, str):
        return ((attributes,),)
    attributes = tuple(attributes)
    if not attributes:
        raise ValueError("attribute set must be nonempty")
    if all(isinstance(a, str) for a in attributes):
        return (attributes,)
    groups = tuple(tuple(g) for g in attributes)
    if any(not g for g in groups):
        raise ValueError("attribute set must be nonempty")
    return groups


@dataclass(frozen=True)
class Vanilla:
    alpha: float = 0.0
    name = "vanilla"

    def __post_init__(self):
        _check_alpha(self.alpha)


@dataclass(frozen=True)
class CFG:
    alpha: float = 6.0
    name = "cfg"

    def __post_init__(self):
        _check_alpha(self.alpha)


@dataclass(frozen=True)
class CADS:
    alpha: float = 6.0
    params: CadsParams = field(default_factory=CadsParams)
    name = "cads"

    def __post_init__(self):
        _check_alpha(self.alpha)


@dataclass(frozen=True)
class Swap:
    """Attribute-specified prompt for the first ``ceil(fraction * N)`` steps, then the neutral one."""

    alpha: float = 0.0
    fraction: float = 0.5
    attribute: str = "female"
    name = "swap"

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"swap fraction must lie in [0, 1], got {self.fraction}")


@dataclass(frozen=True)
class PromptAppend:
    """Append an attribute token (drawn uniformly per chain) to the prompt prefix."""

    alpha: float = 0.0
    attributes: tuple = ("male", "female")
    name = "prompt_append"

    def __post_init__(self):
        _check_alpha(self.alpha)
        object.__setattr__(self, "attributes", _attribute_groups(self.attributes))


@dataclass(frozen=True)
class Weak:
    """Attribute direction added from EOS onward (or everywhere), scheduled by ``tau``.

    ``attributes`` is one attribute set, or several sets for simultaneous
    de-biasing (one target per set, directions summed).
    """

    alpha: float = 0.0
    tau: float = 0.9
    attributes: tuple = ("male", "female")
    mask_mode: str = EOS_MASKED
    name = "weak"

    def __post_init__(self):
        _check_alpha(self.alpha)
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask mode {self.mask_mode!r}")
        object.__setattr__(self, "attributes", _attribute_groups(self.attributes))


GuidanceSpec = Union[Vanilla, CFG, CADS, Swap, PromptAppend, Weak]
_KINDS = {cls.name: cls for cls in (Vanilla, CFG, CADS, Swap, PromptAppend, Weak)}


def guidance_to_dict(spec: GuidanceSpec) -> dict:
    d = asdict(spec)
    if isinstance(spec, CADS):
        d["params"] = asdict(spec.params)
    if "attributes" in d:
        d["attributes"] = [list(g) for g in spec.attributes]
    return {"kind": spec.name, **d}


def guidance_from_dict(raw: dict) -> GuidanceSpec:
    raw = dict(raw)
    kind = raw.pop("kind", None)
    if kind == "every_position":
        kind = "weak"
        raw["mask_mode"] = "every_position"
    if kind not in _KINDS:
        raise ValueError(f"unknown guidance kind {kind!r}")
    if kind == "cads":
        params = raw.pop("params", {})
        params = {k: raw.pop(k) for k in ("s", "tau1", "tau2") if k in raw} | dict(params)
        return CADS(alpha=float(raw.pop("alpha", 6.0)), params=CadsParams(**params), **raw)
    return _KINDS[kind](**raw)


def ceil_steps(fraction: float, n_steps: int) -> int:
    # round first so 0.6 * 50 does not become 31
    return math.ceil(round(fraction * n_steps, 9))


@dataclass(eq=False)
class GuidanceDriver:
    spec: GuidanceSpec
    base: CondEmbedding
    uncond: CondEmbedding
    edited: CondEmbedding | None = None  # c-hat, the attribute prompt, or the appended prompt
    target: tuple[str, ...] = ()
    codec: Codec | None = None

    def condition_at(self, t: int, n_steps: int, rng: np.random.Generator | None = None):
        if not 1 <= t <= n_steps:
            raise ValueError(f"step {t} outside 1..{n_steps}")
        spec = self.spec
        j = n_steps - t + 1
        cond = self.base
        if isinstance(spec, Weak):
            exclusive = ceil_steps(spec.tau, n_steps)
            if j <= exclusive or (j - exclusive - 1) % 2 == 0:
                cond = self.edited
        elif isinstance(spec, Swap):
            if j <= ceil_steps(spec.fraction, n_steps):
                cond = self.edited
        elif isinstance(spec, PromptAppend):
            cond = self.edited
        elif isinstance(spec, CADS):
            cond = self.codec.cads_perturb(self.base, t / n_steps, spec.params, rng)
        return cond, self.uncond, spec.alpha

    @property
    def is_stochastic(self) -> bool:
        """True when the condition depends on fresh per-chain noise (CADS)."""
        return isinstance(self.spec, CADS)

    def batch_sampler(self, rngs) -> "CadsBatch":
        """Stateful batched CADS readouts for chains sharing this driver's prompt, one rng each."""
        return CadsBatch(self, list(rngs))


class CadsBatch:
    """Readouts of CADS conditions for a batch of chains, drawn from each chain's own stream.

    Each chain draws its noise statistics in fixed-size chunks of perturbed
    steps, so a chain's values never depend on which other chains share
    the batch.
    """

    chunk = 100

    def __init__(self, driver: GuidanceDriver, rngs: list):
        self.driver = driver
        self.rngs = rngs
        codec = driver.codec
        self.basis = CadsReadoutBasis.build(driver.base.matrix, codec.readout_weights(driver.base.eos_index))
        self._y = None
        self._rest = None
        self._pos = self.chunk
        self.clean_readouts = np.broadcast_to(self.basis.readout, (len(rngs), self.basis.readout.shape[0]))

    def _next(self) -> tuple[np.ndarray, np.ndarray]:
        if self._pos == self.chunk:
            k, dof = self.basis.k, self.basis.size - self.basis.k
            ys, rests = [], []
            for rng in self.rngs:
                ys.append(rng.standard_normal((self.chunk, k)))
                rests.append(rng.chisquare(dof, self.chunk))
            self._y = np.stack(ys, axis=1)  # (chunk, B, k)
            self._rest = np.stack(rests, axis=1)
            self._pos = 0
        i = self._pos
        self._pos += 1
        return self._y[i], self._rest[i]

    def readouts_at(self, t: int, n_steps: int) -> tuple[np.ndarray, float]:
        spec = self.driver.spec
        gamma = _cads_check(t / n_steps, spec.params)
        if gamma == 1.0:
            return self.clean_readouts, spec.alpha
        y, rest = self._next()
        return self.basis.readouts(gamma, spec.params.s, y, rest), spec.alpha


def make_driver(
    spec: GuidanceSpec, prompt: PromptSpec, codec: Codec, rng: np.random.Generator, cache: dict | None = None
) -> GuidanceDriver:
    """Resolve ``spec`` for one chain.

    Weak and PromptAppend draw their target uniformly from each attribute
    set using ``rng``. ``cache`` lets chains that share a target share the
    same embedding objects.
    """
    cache = {} if cache is None else cache

    def memo(key, build):
        if key not in cache:
            cache[key] = build()
        return cache[key]

    base = memo(("base", prompt), lambda: codec.encode(prompt))
    uncond = memo(("uncond",), codec.empty)
    target: tuple[str, ...] = ()
    edited = None
    if isinstance(spec, (Weak, PromptAppend)):
        target = tuple(str(g[int(rng.integers(len(g)))]) for g in spec.attributes)
    if isinstance(spec, Weak):

        def build_weak():
            direction = codec.attribute_direction(target[0])
            for k in target[1:]:
                direction = direction + codec.attribute_direction(k)
            return codec.apply_weak(base, direction, spec.mask_mode)

        edited = memo(("weak", prompt, target, spec.mask_mode), build_weak)
    elif isinstance(spec, PromptAppend):

        def build_append():
            p = prompt
            for k in target:
                p = p.appended(k)
            return codec.encode(p)

        edited = memo(("append", prompt, target), build_append)
    elif isinstance(spec, Swap):
        codec.token_vector(spec.attribute)
        target = (spec.attribute,)
        edited = memo(("swap", prompt, spec.attribute), lambda: codec.encode(prompt.with_qualifier(spec.attribute)))
    else:
        edited = base
    return GuidanceDriver(spec, base, uncond, edited, target, codec)
