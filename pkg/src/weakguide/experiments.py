"""Desk-scale experiments: mode test, guidance sweeps, de-biasing, compliance, world validation.

Each ``run_*`` function returns an ``ExperimentResult``: long-format result
rows (one number each) plus one ``RunRecord`` per sampled cell. Statistical
tests are computed here as well, so the emitted table carries its own
p-values.

Chains are grouped into fixed-size blocks. A chain's random streams depend
only on (seed, experiment, context, cell, chain index), and a block's
contents depend only on its position, so results are identical for any
worker count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from weakguide import metrics
from weakguide.codec import EVERY_POSITION, CadsParams, PromptSpec
from weakguide.config import ExperimentConfig
from weakguide.diffusion import chain_rngs, forward_noise, run_chains, stream_key
from weakguide.guidance import (
    CADS,
    CFG,
    GuidanceSpec,
    PromptAppend,
    Swap,
    Vanilla,
    Weak,
    guidance_to_dict,
    make_driver,
)
from weakguide.world import World

SCHEMA = "weakguide.results/1"
CSV_COLUMNS = ("schema", "experiment", "context", "method", "cell", "metric", "value", "n")
ALL = "*"  # context column for rows that aggregate over contexts


@dataclass(frozen=True)
class ResultRow:
    experiment: str
    context: str
    method: str
    cell: str
    metric: str
    value: float
    n: int

    def as_csv(self) -> list[str]:
        return [SCHEMA, self.experiment, self.context, self.method, self.cell, self.metric, repr(float(self.value)), str(self.n)]


@dataclass
class RunRecord:
    experiment: str
    context: str
    method: str
    cell: str
    seed: int
    guidance: dict
    prompt: dict
    n: int
    stream_key: list  # chain i of this cell uses chain_rngs(seed, stream_key, i)
    targets: list = field(default_factory=list)  # per-chain resolved target attributes (Weak / PromptAppend)
    start_step: int | None = None
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0


@dataclass
class ExperimentResult:
    experiment: str
    rows: list[ResultRow] = field(default_factory=list)
    records: list[RunRecord] = field(default_factory=list)
    checks: list[tuple[str, bool, str]] = field(default_factory=list)  # validate-world only

    def add(self, context, method, cell, metric, value, n):
        self.rows.append(ResultRow(self.experiment, context, method, cell, metric, float(value), int(n)))

    def value(self, context: str, method: str, cell: str, metric: str) -> float:
        for r in self.rows:
            if (r.context, r.method, r.cell, r.metric) == (context, method, cell, metric):
                return r.value
        raise KeyError((context, method, cell, metric))

    def select(self, **where) -> list[ResultRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in where.items())]


# -- sampling ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Block:
    context: str
    prompt: PromptSpec
    spec: GuidanceSpec
    key: tuple[int, ...]
    start: int
    count: int
    depth: int | None = None  # resume from forward-noised oracle draws at this step
    oracle_prompt: PromptSpec | None = None


_STATE: dict = {}


def _init_worker(world, schedule, mode, seed):
    _STATE.update(world=world, schedule=schedule, mode=mode, seed=seed)


def _run_block(block: Block):
    return run_block(_STATE["world"], _STATE["schedule"], _STATE["mode"], _STATE["seed"], block)


def run_block(world: World, schedule, mode: str, seed: int, block: Block):
    """Sample one block of chains; returns (samples (count, D), per-chain targets)."""
    idx = range(block.start, block.start + block.count)
    rngs = [chain_rngs(seed, block.key, i) for i in idx]
    cache: dict = {}
    drivers = [make_driver(block.spec, block.prompt, world.codec, r.driver, cache) for r in rngs]
    z_start = t_start = None
    if block.depth is not None:
        m = world.mixture_for(world.codec.encode(block.oracle_prompt), block.context)
        x0 = np.concatenate([world.draw(m, 1, r.data)[0] for r in rngs])
        z_start = np.stack([forward_noise(schedule, x, block.depth, r.data) for x, r in zip(x0, rngs)])
        t_start = block.depth
    x = run_chains(schedule, world, block.context, drivers, rngs, z_start, t_start, mode)
    return x, ["+".join(d.target) for d in drivers]


class Sampler:
    """Runs cells of chains for one world, inline or on a process pool."""

    def __init__(self, config: ExperimentConfig, world: World | None = None, workers: int = 1):
        self.config = config
        self.world = world or config.world
        self.workers = max(1, int(workers))
        self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _map(self, blocks: list[Block]):
        cfg = self.config
        if self.workers == 1:
            return [run_block(self.world, cfg.schedule, cfg.mode, cfg.seed, b) for b in blocks]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(
                self.workers, initializer=_init_worker, initargs=(self.world, cfg.schedule, cfg.mode, cfg.seed)
            )
        return list(self._pool.map(_run_block, blocks))

    def sample(
        self,
        experiment: str,
        context: str,
        cell: str,
        spec: GuidanceSpec,
        prompt: PromptSpec | None = None,
        n: int | None = None,
        depth: int | None = None,
        oracle_prompt: PromptSpec | None = None,
    ):
        """Sample ``n`` chains for one cell; returns (samples, per-chain targets, wall time, stream key)."""
        n = n or self.config.n
        prompt = prompt or PromptSpec(context)
        key = stream_key(experiment, context, cell)
        size = self.config.block
        blocks = [
            Block(context, prompt, spec, key, s, min(size, n - s), depth, oracle_prompt) for s in range(0, n, size)
        ]
        t0 = time.perf_counter()
        parts = self._map(blocks)
        wall = time.perf_counter() - t0
        x = np.concatenate([p[0] for p in parts])
        targets = [t for p in parts for t in p[1]]
        return x, targets, wall, key


def _prompt_dict(p: PromptSpec) -> dict:
    return {"context": p.context, "qualifier": p.qualifier, "extra_tokens": list(p.extra_tokens)}


def _record(res: ExperimentResult, sampler: Sampler, context, method, cell, spec, prompt, n, targets, wall, key, metrics_, start=None):
    keep = targets if any(targets) else []
    res.records.append(
        RunRecord(
            res.experiment, context, method, cell, sampler.config.seed, guidance_to_dict(spec),
            _prompt_dict(prompt), n, list(key), keep, start, metrics_, round(wall, 4),
        )
    )


def _family(world: World) -> str:
    return next(iter(world.spec.families))


def _ratio_metrics(world: World, x, context: str, prompt: PromptSpec) -> tuple[metrics.RatioReport, dict]:
    fam = _family(world)
    report = metrics.attribute_ratio(world, x, context, fam)
    minor = world.minor_attribute(context, fam)
    major = world.major_attribute(context, fam)
    k = report.counts[report.attributes.index(minor)]
    low, high = metrics.binomial_ci(k, report.n)
    align = metrics.alignment_score(world, x, world.codec.encode(prompt), context)
    out = {
        "minor_ratio": report.ratio(minor),
        "major_ratio": report.ratio(major),
        "minor_ci_low": low,
        "minor_ci_high": high,
        "alignment": align,
    }
    return report, out


def _emit(res: ExperimentResult, context, method, cell, values: dict, n: int):
    for metric, v in values.items():
        res.add(context, method, cell, metric, v, n)


def _minor_indicator(world: World, x, context: str) -> np.ndarray:
    fam = _family(world)
    minor = world.spec.families[fam].index(world.minor_attribute(context, fam))
    return (world.classify_many(x, context, fam) == minor).astype(np.float64)


def _test_rng(config: ExperimentConfig, *parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(*stream_key("test", *parts),)))


# -- experiments ---------------------------------------------------------------------------


def run_mode_test(config: ExperimentConfig, sampler: Sampler) -> ExperimentResult:
    """Forward-noise oracle minority samples to each depth and re-denoise with the neutral prompt."""
    res = ExperimentResult("mode_test")
    world, n_steps, n = sampler.world, config.schedule.n_steps, config.n
    for ctx in config.params("mode_test")["contexts"]:
        prompt = PromptSpec(ctx)
        minor = world.minor_attribute(ctx)
        x, tg, wall, key = sampler.sample("mode_test", ctx, "vanilla", Vanilla(), prompt)
        _, base = _ratio_metrics(world, x, ctx, prompt)
        _emit(res, ctx, "vanilla", "", base, n)
        _record(res, sampler, ctx, "vanilla", "", Vanilla(), prompt, n, tg, wall, key, base)
        k_van = round(base["minor_ratio"] * n)
        for frac in config.params("mode_test")["depths"]:
            depth = int(round(frac * n_steps))
            cell = f"depth={frac:g}"
            x, tg, wall, key = sampler.sample(
                "mode_test", ctx, cell, Vanilla(), prompt, depth=depth, oracle_prompt=PromptSpec(ctx, minor)
            )
            _, vals = _ratio_metrics(world, x, ctx, prompt)
            k = round(vals["minor_ratio"] * n)
            vals["t_step"] = depth
            vals["p_greater_than_vanilla"] = metrics.proportion_test(k, n, k_van, n, "greater")
            vals["p_differs_from_vanilla"] = metrics.proportion_test(k, n, k_van, n, "two-sided")
            _emit(res, ctx, "mode_test", cell, vals, n)
            _record(res, sampler, ctx, "mode_test", cell, Vanilla(), prompt, n, tg, wall, key, vals, depth)
    return res


def _trend_rows(res, config, ctx, method, groups_ratio, groups_align, n):
    rng = _test_rng(config, res.experiment, ctx)
    for name, groups in (("major_ratio", groups_ratio), ("alignment", groups_align)):
        if groups is None:
            continue
        tr = metrics.isotonic_trend_test(groups, rng)
        res.add(ctx, method, "trend", f"{name}_trend_p", tr.p_value, n)
        res.add(ctx, method, "trend", f"{name}_worst_drop_p", tr.worst_drop_p, n)


def run_sweep_cfg(config: ExperimentConfig, sampler: Sampler) -> ExperimentResult:
    """Major-attribute ratio and alignment across guidance scales."""
    res = ExperimentResult("sweep_cfg")
    world, n = sampler.world, config.n
    for ctx in config.params("sweep_cfg")["contexts"]:
        prompt = PromptSpec(ctx)
        enc = world.codec.encode(prompt)
        ratios, aligns = [], []
        for alpha in config.params("sweep_cfg")["grid"]:
            spec = CFG(float(alpha))
            cell = f"alpha={float(alpha):g}"
            x, tg, wall, key = sampler.sample("sweep_cfg", ctx, cell, spec, prompt)
            _, vals = _ratio_metrics(world, x, ctx, prompt)
            ratios.append(1.0 - _minor_indicator(world, x, ctx))
            aligns.append(metrics.alignment_values(world, x, enc, ctx))
            _emit(res, ctx, "cfg", cell, vals, n)
            _record(res, sampler, ctx, "cfg", cell, spec, prompt, n, tg, wall, key, vals)
        if len(ratios) >= 2:
            _trend_rows(res, config, ctx, "cfg", ratios, aligns, n)
    return res


def run_sweep_cads(config: ExperimentConfig, sampler: Sampler) -> ExperimentResult:
    """CADS cells over (s, tau1) against plain CFG at the same scale."""
    res = ExperimentResult("sweep_cads")
    world, n = sampler.world, config.n
    p = config.params("sweep_cads")
    alpha = float(p["alpha"])
    for ctx in p["contexts"]:
        prompt = PromptSpec(ctx)
        enc = world.codec.encode(prompt)
        base_spec = CFG(alpha)
        x, tg, wall, key = sampler.sample("sweep_cads", ctx, "baseline", base_spec, prompt)
        _, base = _ratio_metrics(world, x, ctx, prompt)
        base_major = 1.0 - _minor_indicator(world, x, ctx)
        base_align = metrics.alignment_values(world, x, enc, ctx)
        _emit(res, ctx, "cfg", f"alpha={alpha:g}", base, n)
        _record(res, sampler, ctx, "cfg", f"alpha={alpha:g}", base_spec, prompt, n, tg, wall, key, base)
        k_base = int(base_major.sum())
        for s, tau1 in p["grid"]:
            spec = CADS(alpha, CadsParams(float(s), float(tau1), float(p["tau2"])))
            cell = f"s={float(s):g},tau1={float(tau1):g}"
            x, tg, wall, key = sampler.sample("sweep_cads", ctx, cell, spec, prompt)
            _, vals = _ratio_metrics(world, x, ctx, prompt)
            major = 1.0 - _minor_indicator(world, x, ctx)
            align = metrics.alignment_values(world, x, enc, ctx)
            k = int(major.sum())
            vals["p_major_below_baseline"] = metrics.proportion_test(k, n, k_base, n, "less")
            vals["p_major_differs"] = metrics.proportion_test(k, n, k_base, n, "two-sided")
            vals["p_alignment_below_baseline"] = metrics.mean_diff_test(align, base_align, "less")
            vals["p_alignment_differs"] = (
                1.0 if np.array_equal(align, base_align) else metrics.mean_diff_test(align, base_align, "two-sided")
            )
            _emit(res, ctx, "cads", cell, vals, n)
            _record(res, sampler, ctx, "cads", cell, spec, prompt, n, tg, wall, key, vals)
    return res


def run_sweep_swap(config: ExperimentConfig, sampler: Sampler) -> ExperimentResult:
    """Minor-attribute ratio when the minor-qualified prompt drives the first fraction of steps."""
    res = ExperimentResult("sweep_swap")
    world, n = sampler.world, config.n
    for ctx in config.params("sweep_swap")["contexts"]:
        prompt = PromptSpec(ctx)
        minor = world.minor_attribute(ctx)
        x, tg, wall, key = sampler.sample("sweep_swap", ctx, "vanilla", Vanilla(), prompt)
        _, base = _ratio_metrics(world, x, ctx, prompt)
        _emit(res, ctx, "vanilla", "", base, n)
        _record(res, sampler, ctx, "vanilla", "", Vanilla(), prompt, n, tg, wall, key, base)
        groups = []
        for frac in config.params("sweep_swap")["grid"]:
            spec = Swap(fraction=float(frac), attribute=minor)
            cell = f"fraction={float(frac):g}"
            x, tg, wall, key = sampler.sample("sweep_swap", ctx, cell, spec, prompt)
            _, vals = _ratio_metrics(world, x, ctx, prompt)
            groups.append(_minor_indicator(world, x, ctx))
            _emit(res, ctx, "swap", cell, vals, n)
            _record(res, sampler, ctx, "swap", cell, spec, prompt, n, tg, wall, key, vals)
        if len(groups) >= 2:
            tr = metrics.isotonic_trend_test(groups, _test_rng(config, "sweep_swap", ctx))
            res.add(ctx, "swap", "trend", "minor_ratio_trend_p", tr.p_value, n)
            res.add(ctx, "swap", "trend", "minor_ratio_worst_drop_p", tr.worst_drop_p, n)
    return res


def debias_spec(method: str, attributes, tau: float) -> GuidanceSpec:
    if method == "vanilla":
        return Vanilla()
    if method == "weak":
        return Weak(tau=tau, attributes=attributes)
    if method == "every_position":
        return Weak(tau=tau, attributes=attributes, mask_mode=EVERY_POSITION)
    if method == "prompt_append":
        return PromptAppend(attributes=attributes)
    raise ValueError(f"unknown method {method!r}")


def run_debias(config: ExperimentConfig, sampler: Sampler, multi_sampler: Sampler | None = None) -> ExperimentResult:
    """Ratios, Avg delta and discrepancy per method; object parity; simultaneous two-family de-biasing."""
    res = ExperimentResult("debias")
    world, n = sampler.world, config.n
    p = config.params("debias")
    fam = _family(world)
    attrs = world.spec.families[fam]
    for method in p["methods"]:
        spec = debias_spec(method, attrs, float(p["tau"]))
        reports, minors, ds = [], [], []
        for ctx in p["contexts"]:
            prompt = PromptSpec(ctx)
            x, tg, wall, key = sampler.sample("debias", ctx, method, spec, prompt)
            report, vals = _ratio_metrics(world, x, ctx, prompt)
            vals["discrepancy"] = metrics.discrepancy(report).value
            reports.append(report)
            minors.append(world.minor_attribute(ctx, fam))
            ds.append(vals["discrepancy"])
            _emit(res, ctx, method, "", vals, n)
            _record(res, sampler, ctx, method, "", spec, prompt, n, tg, wall, key, vals)
        res.add(ALL, method, "", "avg_delta", metrics.avg_delta(reports, minors), n)
        res.add(ALL, method, "", "mean_discrepancy", float(np.mean(ds)), n)

    # attribute-free contexts: guided samples should match vanilla ones
    for ctx in p["objects"]:
        prompt = PromptSpec(ctx)
        enc = world.codec.encode(prompt)
        x_v, tg, wall, key = sampler.sample("debias", ctx, "vanilla", Vanilla(), prompt)
        a_v = metrics.alignment_score(world, x_v, enc, ctx)
        _emit(res, ctx, "vanilla", "", {"alignment": a_v}, n)
        _record(res, sampler, ctx, "vanilla", "", Vanilla(), prompt, n, tg, wall, key, {"alignment": a_v})
        for method in p["methods"]:
            if method == "vanilla":
                continue
            spec = debias_spec(method, attrs, float(p["tau"]))
            x, tg, wall, key = sampler.sample("debias", ctx, method, spec, prompt)
            m = min(n, 2000)
            test = metrics.energy_test(x[:m], x_v[:m], _test_rng(config, "debias", ctx, method))
            a = metrics.alignment_score(world, x, enc, ctx)
            vals = {
                "alignment": a,
                "alignment_rel_diff": abs(a - a_v) / abs(a_v),
                "energy": test.statistic,
                "energy_threshold": test.threshold,
                "energy_p": test.p_value,
            }
            _emit(res, ctx, method, "", vals, n)
            _record(res, sampler, ctx, method, "", spec, prompt, n, tg, wall, key, vals)

    if multi_sampler is not None:
        _multi_axis(res, config, multi_sampler)
    return res


def _multi_axis(res: ExperimentResult, config: ExperimentConfig, sampler: Sampler) -> None:
    world, n = sampler.world, config.n
    p = config.params("debias")
    families = world.spec.families
    groups = tuple(tuple(members) for members in families.values())
    for method, spec in (("vanilla", Vanilla()), ("weak", Weak(tau=float(p["tau"]), attributes=groups))):
        per_family: dict[str, list[float]] = {f: [] for f in families}
        for ctx in p["multi_axis_contexts"]:
            prompt = PromptSpec(ctx)
            x, tg, wall, key = sampler.sample("debias_multi_axis", ctx, method, spec, prompt)
            vals = {}
            for f in families:
                d = metrics.discrepancy(metrics.attribute_ratio(world, x, ctx, f)).value
                vals[f"discrepancy_{f}"] = d
                per_family[f].append(d)
            _emit(res, ctx, method, "multi_axis", vals, n)
            _record(res, sampler, ctx, method, "multi_axis", spec, prompt, n, tg, wall, key, vals)
        for f, ds in per_family.items():
            res.add(ALL, method, "multi_axis", f"mean_discrepancy_{f}", float(np.mean(ds)), n)


def run_compliance(config: ExperimentConfig, sampler: Sampler) -> ExperimentResult:
    """Prompts name an attribute explicitly; Weak and every_position steer toward the other one."""
    res = ExperimentResult("compliance")
    world, n = sampler.world, config.n
    p = config.params("compliance")
    fam = _family(world)
    members = world.spec.families[fam]
    for ctx in p["contexts"]:
        for specified in members:
            prompt = PromptSpec(ctx, specified)
            others = tuple(a for a in members if a != specified)
            for method in p["methods"]:
                spec = debias_spec(method, others, float(p["tau"]))
                cell = f"specified={specified}"
                x, tg, wall, key = sampler.sample("compliance", ctx, f"{method}/{cell}", spec, prompt)
                c = metrics.compliance(world, x, ctx, specified)
                k = round(c * n)
                low, high = metrics.binomial_ci(k, n)
                vals = {"compliance": c, "ci_low": low, "ci_high": high}
                _emit(res, ctx, method, cell, vals, n)
                _record(res, sampler, ctx, method, cell, spec, prompt, n, tg, wall, key, vals)
    return res


# -- world validation ------------------------------------------------------------------


def validate_world(config: ExperimentConfig, world: World | None = None, n: int = 10000) -> ExperimentResult:
    """Check the world invariants every experiment relies on."""
    world = world or config.world
    res = ExperimentResult("validate_world")
    spec = world.spec
    rng = _test_rng(config, "validate_world")

    def check(name: str, ok: bool, detail: str):
        res.checks.append((name, bool(ok), detail))
        res.add(ALL, "check", name, "passed", 1.0 if ok else 0.0, 0)

    rank = world.codec.vocabulary_rank()
    check("vocabulary_rank", rank == len(world.codec.vocabulary), f"rank {rank} of {len(world.codec.vocabulary)} tokens")

    means = np.array([spec.attribute_means[a] for a in spec.attributes])
    comp = world.components(world.attribute_contexts[0]).means if world.attribute_contexts else means
    d = np.linalg.norm(comp[:, None] - comp[None], axis=-1)
    sep = d[np.triu_indices(len(comp), 1)].min() if len(comp) > 1 else math.inf
    check("component_separation", sep >= 4 * spec.sigma, f"min distance {sep:.3f} vs 4 sigma = {4 * spec.sigma:.3f}")

    ok_simplex = all(abs(world.prior_weights(c).sum() - 1.0) < 1e-12 for c in world.attribute_contexts)
    check("priors_on_simplex", ok_simplex, "softmax of every context prior sums to 1")

    abar_n = config.schedule.abar[-1]
    check("terminal_noise_level", abar_n < 1e-4, f"abar_N = {abar_n:.3e}")
    kl = _terminal_kl(world, abar_n)
    check("terminal_kl", kl < 1e-3, f"max KL to N(0, I) over contexts <= {kl:.2e}")

    neutral = max(
        float(np.max(np.abs(world.mixture_for(world.codec.encode(PromptSpec(c)), c).weights - world.prior_weights(c))))
        for c in world.attribute_contexts
    )
    check("neutral_prompt_gives_prior", neutral < 1e-9, f"max |w - softmax(b)| = {neutral:.2e}")

    worst_q = 1.0
    for c in world.attribute_contexts:
        for fam, members in spec.families.items():
            for a in members:
                m = world.mixture_for(world.codec.encode(PromptSpec(c, a)), c)
                pos = list(spec.families).index(fam)
                w = sum(wk for wk, lab in zip(m.weights, m.labels) if lab[pos] == a)
                worst_q = min(worst_q, w)
    check("qualifier_compliance", worst_q >= 0.99, f"min qualified weight {worst_q:.4f}")

    worst_acc = 1.0
    for c in world.attribute_contexts:
        for fam in spec.families:
            x, labels = world.sample_oracle(c, None, n, rng)
            pos = list(spec.families).index(fam)
            truth = np.array([spec.families[fam].index(lab[pos]) for lab in labels])
            worst_acc = min(worst_acc, float(np.mean(world.classify_many(x, c, fam) == truth)))
    check("classifier_accuracy", worst_acc >= 0.99, f"min oracle accuracy {worst_acc:.4f} (n = {n})")
    return res


def _terminal_kl(world: World, abar: float) -> float:
    """Upper bound on KL(diffused mixture || N(0, I)) by convexity over components."""
    worst = 0.0
    mixtures = [world.components(c) for c in world.spec.contexts] + [world.unconditional()]
    for m in mixtures:
        for mu, cov, w in zip(m.means, m.covs, m.weights):
            mean = np.sqrt(abar) * mu
            s = abar * cov + (1.0 - abar) * np.eye(len(mu))
            kl = 0.5 * (np.trace(s) + mean @ mean - len(mu) - np.linalg.slogdet(s)[1])
            worst = max(worst, float(kl))
    return worst


RUNNERS = {
    "mode-test": run_mode_test,
    "sweep-cfg": run_sweep_cfg,
    "sweep-cads": run_sweep_cads,
    "sweep-swap": run_sweep_swap,
    "compliance": run_compliance,
}


def run_experiment(kind: str, config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Run one experiment subcommand end to end."""
    if kind == "validate-world":
        return validate_world(config)
    with Sampler(config, workers=workers) as sampler:
        if kind == "debias":
            multi = config.load_world(config.params("debias")["multi_axis_world"])
            with Sampler(config, multi, workers) as ms:
                return run_debias(config, sampler, ms)
        if kind not in RUNNERS:
            raise ValueError(f"unknown experiment {kind!r}")
        return RUNNERS[kind](config, sampler)


def record_dicts(res: ExperimentResult, config: ExperimentConfig, world: World) -> list[dict]:
    head = {
        "config_digest": config.digest(),
        "world_digest": world.spec.digest(),
        "schedule_digest": config.schedule.digest(),
    }
    return [{**head, **asdict(r)} for r in res.records]


def summarize(res: ExperimentResult, rows: Sequence[ResultRow] | None = None) -> str:
    """Human-readable summary: one line per (context, method, cell)."""
    lines = [f"experiment: {res.experiment}"]
    if res.checks:
        for name, ok, detail in res.checks:
            lines.append(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return "\n".join(lines) + "\n"
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows or res.rows:
        groups.setdefault((r.context, r.method, r.cell), []).append(r)
    for (ctx, method, cell), rs in groups.items():
        vals = ", ".join(f"{r.metric}={r.value:.4g}" for r in rs)
        label = " ".join(x for x in (ctx, method, cell) if x)
        lines.append(f"  {label}: {vals}")
    return "\n".join(lines) + "\n"
