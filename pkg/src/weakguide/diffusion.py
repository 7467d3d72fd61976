"""Discrete variance-preserving diffusion: schedule, forward noising, reverse steps, CFG."""

from __future__ import annotations

import csv
import hashlib
import zlib
from dataclasses import dataclass
from typing import IO, Protocol, Sequence

import numpy as np

from scipy.special import logsumexp

from weakguide.world import mixture_score

ANCESTRAL = "ancestral"
DETERMINISTIC = "deterministic"


class StepUnderflowError(ValueError):
    """A reverse step was requested at t = 0."""


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """``betas[t]`` and ``abar[t]`` for t = 0..N, with ``betas[0] = 0`` and ``abar[0] = 1``."""

    betas: np.ndarray
    abar: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        a = np.asarray(self.abar, dtype=np.float64)
        if b.shape != a.shape or b.ndim != 1 or len(b) < 2:
            raise ValueError("betas and abar must be 1-D arrays of equal length N + 1")
        if not (np.all(b[1:] > 0) and np.all(b[1:] < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        if a[0] != 1.0 or not np.all(np.diff(a) < 0):
            raise ValueError("abar must start at 1 and strictly decrease")
        b.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "abar", a)

    @classmethod
    def linear(cls, n_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        """Linear ramp; betas scale by ``1000 / n_steps`` so short chains still reach pure noise."""
        scale = 1000.0 / n_steps
        betas = np.concatenate([[0.0], np.linspace(beta_start * scale, beta_end * scale, n_steps)])
        return cls(betas, np.cumprod(1.0 - betas))

    @property
    def n_steps(self) -> int:
        return len(self.betas) - 1

    def sigma(self, t: int) -> float:
        """Ancestral noise std for the step t -> t-1."""
        return float(np.sqrt(self.betas[t] * (1.0 - self.abar[t - 1]) / (1.0 - self.abar[t])))

    def time(self, t: int) -> float:
        return t / self.n_steps

    def digest(self) -> str:
        return hashlib.sha256(self.betas.tobytes()).hexdigest()[:16]


@dataclass
class ChainState:
    z: np.ndarray
    t: int


def forward_noise(schedule: DiffusionSchedule, x0: np.ndarray, t: int, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= t <= schedule.n_steps:
        raise ValueError(f"step {t} outside 0..{schedule.n_steps}")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    a = schedule.abar[t]
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def cfg_combine(eps_c: np.ndarray, eps_u: np.ndarray, alpha: float) -> np.ndarray:
    """Classifier-free guidance: ``(1 + alpha) eps_c - alpha eps_u``."""
    eps_c = np.asarray(eps_c, dtype=np.float64)
    if alpha == 0:
        return eps_c
    return (1.0 + alpha) * eps_c - alpha * np.asarray(eps_u, dtype=np.float64)


def reverse_update(
    schedule: DiffusionSchedule, z: np.ndarray, t: int, eps: np.ndarray, xi: np.ndarray | None, mode: str = ANCESTRAL
) -> np.ndarray:
    if t < 1:
        raise StepUnderflowError("cannot step below t = 0")
    beta = schedule.betas[t]
    mean = (z - beta / np.sqrt(1.0 - schedule.abar[t]) * eps) / np.sqrt(1.0 - beta)
    if mode == DETERMINISTIC:
        return mean
    if mode != ANCESTRAL:
        raise ValueError(f"unknown reverse mode {mode!r}")
    return mean + schedule.sigma(t) * xi


def reverse_step(
    schedule: DiffusionSchedule,
    state: ChainState,
    eps: np.ndarray,
    mode: str = ANCESTRAL,
    rng: np.random.Generator | None = None,
) -> ChainState:
    if state.t < 1:
        raise StepUnderflowError("cannot step below t = 0")
    xi = None
    if mode == ANCESTRAL:
        if rng is None:
            raise ValueError("ancestral steps need an rng")
        xi = rng.standard_normal(np.shape(state.z))
    return ChainState(reverse_update(schedule, state.z, state.t, eps, xi, mode), state.t - 1)


# -- per-chain random streams ---------------------------------------------------------


def stream_key(*parts: str | int) -> tuple[int, ...]:
    """Stable integer key for naming a family of chains (e.g. by context)."""
    return tuple(p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts)


@dataclass
class ChainRngs:
    noise: np.random.Generator  # start latent + ancestral noise
    driver: np.random.Generator  # attribute draws, CADS noise
    data: np.random.Generator  # oracle draws and forward noising


def chain_rngs(seed: int, key: tuple[int, ...], chain: int) -> ChainRngs:
    """Independent streams for one chain, fixed by (seed, key, chain index) alone.

    Chains with equal keys and indices share their start latent and step
    noise; callers put whatever must differ (method, cell) into the key.
    """
    ss = np.random.SeedSequence(seed, spawn_key=(*key, chain))
    noise, driver, data = (np.random.default_rng(s) for s in ss.spawn(3))
    return ChainRngs(noise, driver, data)


class Driver(Protocol):
    def condition_at(self, t: int, n_steps: int, rng: np.random.Generator | None = None): ...


def _iso_score(z: np.ndarray, logw: np.ndarray, means: np.ndarray, var: float) -> np.ndarray:
    """Mixture score when every component is N(mean_k, var * I).

    ``logw`` is (K,) or (K, B): log-weights laid out component-major so the
    reductions over components run across rows, which is fast for small K.
    """
    logw = np.asarray(logw)
    if logw.ndim == 1:
        logw = logw[:, None]
    logr = logw + (means @ z.T - 0.5 * np.einsum("kd,kd->k", means, means)[:, None]) / var
    logr -= logr.max(axis=0)
    r = np.exp(logr)
    r /= r.sum(axis=0)
    return (r.T @ means - z) / var


def _iso_var(m) -> float | None:
    """Common per-dimension variance if every component covariance is ``v * I``, else None."""
    v = m.covs[0, 0, 0]
    return float(v) if np.all(m.covs == v * np.eye(m.covs.shape[1])[None]) else None


def _score_fn(m, abar: float, iso: float | None = None):
    """Score of the diffused mixture ``m`` at level ``abar``; call as ``f(z, logw)`` with (K,) or (K, B) logw.

    ``iso`` is the result of ``_iso_var(m)``; pass it to skip the isotropy check.
    """
    means = np.sqrt(abar) * m.means
    if iso is None:
        iso = _iso_var(m)
    if iso is not None:
        v = abar * iso + (1.0 - abar)
        return lambda z, logw: _iso_score(z, logw, means, v)
    covs = abar * m.covs + (1.0 - abar) * np.eye(m.means.shape[1])

    def general(z, logw):
        logw = np.asarray(logw)
        w = np.exp(logw - logw.max(axis=0))
        w = (w / w.sum(axis=0)).T
        return mixture_score(z, w, means, covs)

    return general


def _log(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def _group_drivers(drivers):
    """Chains whose drivers always return the same condition share a group."""
    groups: dict = {}
    for i, d in enumerate(drivers):
        if getattr(d, "is_stochastic", False):
            key = ("stochastic", id(d.base), d.spec)
        else:
            key = ("fixed", id(d.base), id(d.edited), d.spec)
        groups.setdefault(key, []).append(i)
    return list(groups.values())


def run_chains(
    schedule: DiffusionSchedule,
    world,
    context: str,
    drivers: Sequence[Driver],
    rngs: Sequence[ChainRngs],
    z_start: np.ndarray | None = None,
    t_start: int | None = None,
    mode: str = ANCESTRAL,
    record: bool = False,
):
    """Run a batch of reverse chains to t = 0 and return the final samples (B, D).

    With ``z_start`` the chains resume from those latents at ``t_start``
    (default N); otherwise they start from fresh standard-normal noise.
    With ``record=True`` also returns the list of latents after each step.
    """
    n = schedule.n_steps
    b = len(drivers)
    dim = world.dim
    noise = np.stack([r.noise.standard_normal((n + 1, dim)) for r in rngs])
    if z_start is None:
        z = noise[:, 0, :].copy()
        t_start = n
    else:
        z = np.array(z_start, dtype=np.float64).reshape(b, dim)
        t_start = n if t_start is None else t_start
    if not 0 <= t_start <= n:
        raise ValueError(f"start step {t_start} outside 0..{n}")
    groups = [np.array(g) for g in _group_drivers(drivers)]
    comps = world.components(context)
    uncond = world.unconditional()
    log_uncond = _log(uncond.weights)
    is_object = world.context(context).is_object
    n_comp = comps.n_components
    iso_c, iso_u = _iso_var(comps), _iso_var(uncond)
    samplers = {
        int(g[0]): drivers[g[0]].batch_sampler([rngs[i].driver for i in g])
        for g in groups
        if getattr(drivers[g[0]], "is_stochastic", False)
    }
    fixed_logw: dict[int, np.ndarray] = {}
    logw = np.zeros((n_comp, b))
    alphas = np.zeros(b)
    trace = [z.copy()] if record else None
    for t in range(t_start, 0, -1):
        abar = schedule.abar[t]
        for idx in groups:
            head = drivers[idx[0]]
            if head.is_stochastic:
                sampler = samplers[int(idx[0])]
                readouts, alpha = sampler.readouts_at(t, n)
                if not is_object:
                    if readouts is sampler.clean_readouts:
                        key = id(head.base)
                        if key not in fixed_logw:
                            lg = world.logits_from_readout(readouts[0], context)[0]
                            fixed_logw[key] = lg - logsumexp(lg)
                        logw[:, idx] = fixed_logw[key][:, None]
                    else:
                        lg = world.logits_from_readout(readouts, context)
                        logw[:, idx] = (lg - logsumexp(lg, axis=1, keepdims=True)).T
            else:
                cond, _, alpha = head.condition_at(t, n)
                if not is_object:
                    key = id(cond)
                    if key not in fixed_logw:
                        lg = world.logits_from_readout(world.codec.readout(cond), context)[0]
                        fixed_logw[key] = lg - logsumexp(lg)
                    logw[:, idx] = fixed_logw[key][:, None]
            alphas[idx] = alpha
        eps = -np.sqrt(1.0 - abar) * _score_fn(comps, abar, iso_c)(z, logw)
        if np.any(alphas != 0):
            eps_u = -np.sqrt(1.0 - abar) * _score_fn(uncond, abar, iso_u)(z, log_uncond)
            eps = (1.0 + alphas[:, None]) * eps - alphas[:, None] * eps_u
        z = reverse_update(schedule, z, t, eps, noise[:, t, :], mode)
        if record:
            trace.append(z.copy())
    return (z, trace) if record else z


def run_chain(schedule, world, context, driver, rngs: ChainRngs, start=None, mode: str = ANCESTRAL) -> np.ndarray:
    """Single chain; ``start`` is None for a fresh start or ``(z, t)`` to resume a latent."""
    if start is None:
        return run_chains(schedule, world, context, [driver], [rngs], mode=mode)[0]
    z, t = start
    return run_chains(schedule, world, context, [driver], [rngs], np.asarray(z)[None], t, mode)[0]


def latents_to_csv(trace: Sequence[np.ndarray], out: IO[str], t_start: int, chain_ids: Sequence[int] | None = None) -> None:
    """Write a ``run_chains(..., record=True)`` trace as ``chain_id,step,z0,z1,...`` rows.

    ``trace[j]`` holds the latents at step ``t_start - j``.
    """
    dim = trace[0].shape[1]
    ids = range(trace[0].shape[0]) if chain_ids is None else chain_ids
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["chain_id", "step"] + [f"z{i}" for i in range(dim)])
    for j, z in enumerate(trace):
        for cid, row in zip(ids, z):
            w.writerow([cid, t_start - j] + [repr(float(v)) for v in row])
