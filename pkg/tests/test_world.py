"""Closed-form world: weights, diffused mixtures, scores, densities, oracle draws and the classifier."""

import numpy as np
import pytest
from scipy import integrate, stats

from weakguide.codec import Codec, PromptSpec
from weakguide.world import (
    MixtureParams,
    WorldError,
    build_world,
    diffused_mixture,
    mixture_score,
    world_spec_from_dict,
)


def oracle_log_density(z, weights, means, sigma, abar):
    """Independent evaluation of the diffused isotropic mixture density with scipy."""
    var = abar * sigma**2 + (1.0 - abar)
    dens = sum(
        w * stats.multivariate_normal(np.sqrt(abar) * m, var * np.eye(len(z))).pdf(z) for w, m in zip(weights, means)
    )
    return np.log(dens)


def random_condition(world, rng):
    codec = world.codec
    ctx = str(rng.choice(world.attribute_contexts + world.object_contexts))
    roll = rng.random()
    if roll < 0.1:
        return codec.empty(), ctx
    if roll < 0.3 and ctx in world.attribute_contexts:
        return codec.encode(PromptSpec(ctx, str(rng.choice(world.spec.attributes)))), ctx
    c = codec.encode(PromptSpec(ctx))
    if roll < 0.6:
        c = Codec.apply_weak(c, codec.attribute_direction(str(rng.choice(world.spec.attributes))))
    return c, ctx


def test_score_matches_finite_differences(world, schedule):
    """Analytic score vs central differences of an independently evaluated log density (1000 probes)."""
    rng = np.random.default_rng(11)
    h = 1e-5
    worst = 0.0
    for _ in range(1000):
        c, ctx = random_condition(world, rng)
        t = int(rng.integers(1, schedule.n_steps + 1))
        abar = schedule.abar[t]
        z = rng.normal(0.0, 4.0, size=world.dim)
        m = world.mixture_for(c, ctx)
        f = lambda p: oracle_log_density(p, m.weights, m.means, world.spec.sigma, abar)  # noqa: E731
        fd = np.array([(f(z + h * e) - f(z - h * e)) / (2 * h) for e in np.eye(world.dim)])
        s = world.score(z, abar, c, ctx)
        worst = max(worst, np.linalg.norm(s - fd) / max(np.linalg.norm(fd), 1e-3))
    assert worst < 1e-4


def test_score_single_standard_normal_is_minus_z():
    m = MixtureParams(np.ones(1), np.zeros((1, 3)), np.eye(3)[None])
    z = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_allclose(mixture_score(z, m.weights, m.means, m.covs), -z, atol=1e-12)


def test_score_symmetric_mixture_zero_at_origin():
    means = np.array([[2.0, 0.0], [-2.0, 0.0]])
    covs = np.repeat(np.eye(2)[None], 2, axis=0)
    np.testing.assert_allclose(mixture_score(np.zeros((1, 2)), np.array([0.5, 0.5]), means, covs), 0.0, atol=1e-12)


def test_diffused_mixture_examples():
    m = MixtureParams(np.array([0.3, 0.7]), np.array([[2.0], [-1.0]]), np.array([[[0.25]], [[0.25]]]))
    assert diffused_mixture(m, 1.0) is m
    d = diffused_mixture(m, 0.64)
    np.testing.assert_allclose(d.means, [[1.6], [-0.8]])
    np.testing.assert_allclose(d.covs[:, 0, 0], 0.64 * 0.25 + 0.36)
    np.testing.assert_array_equal(d.weights, m.weights)
    with pytest.raises(WorldError):
        diffused_mixture(m, 0.0)


def test_log_density_integrates_to_one_in_one_dimension():
    spec = world_spec_from_dict(
        {
            "dim": 1,
            "sigma": 0.7,
            "coupling": 5.0,
            "families": {"g": ["a", "b"]},
            "attribute_means": {"a": [1.5], "b": [-2.0]},
            "contexts": {"x": {"prior": {"a": 0.8, "b": 0.2}}},
        }
    )
    w = build_world(spec)
    c = w.codec.encode(PromptSpec("x"))
    for abar in (1.0, 0.5, 0.01):
        total, _ = integrate.quad(lambda v: np.exp(w.log_density(np.array([v]), c, "x", abar)), -30, 30, limit=200)
        assert total == pytest.approx(1.0, abs=1e-8)


def test_log_density_at_component_mean(world):
    """Far-apart components: density at a mean is the weighted peak of that component."""
    c = world.codec.encode(PromptSpec("car"))
    x = np.array(world.context("car").mean)
    expected = -np.log(2 * np.pi * world.spec.sigma**2)
    assert world.log_density(x, c, "car") == pytest.approx(expected, abs=1e-9)


def test_neutral_prompt_weights_match_prior(world):
    for ctx in world.attribute_contexts:
        w = world.mixture_for(world.codec.encode(PromptSpec(ctx)), ctx).weights
        np.testing.assert_allclose(w, world.prior_weights(ctx), atol=1e-9)


def test_qualifier_weights(world):
    for ctx in world.attribute_contexts:
        for attr in world.spec.attributes:
            m = world.mixture_for(world.codec.encode(PromptSpec(ctx, attr)), ctx)
            k = [i for i, lab in enumerate(m.labels) if attr in lab]
            assert m.weights[k].sum() >= 0.99


def test_weak_edit_raises_target_weight_monotonically(world):
    codec = world.codec
    for ctx in world.attribute_contexts:
        c = codec.encode(PromptSpec(ctx))
        d = codec.attribute_direction("female")
        prev = world.mixture_for(c, ctx).weights[1]
        for scale in (0.25, 0.5, 1.0):
            edited = Codec.apply_weak(c, type(d)("female", scale * d.matrix))
            w = world.mixture_for(edited, ctx).weights[1]
            assert w > prev
            prev = w


def test_empty_prompt_is_pooled_unconditional(world):
    m = world.mixture_for(world.codec.empty(), "ceo")
    assert m is world.unconditional()
    assert m.weights.sum() == pytest.approx(1.0)


def test_object_context_ignores_condition(world):
    a = world.mixture_for(world.codec.encode(PromptSpec("tree")), "tree")
    b = world.mixture_for(Codec.apply_weak(world.codec.encode(PromptSpec("tree")), world.codec.attribute_direction("male")), "tree")
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.n_components == 1


def test_oracle_frequencies_and_labels(world):
    rng = np.random.default_rng(2)
    n = 20000
    x, labels = world.sample_oracle("teacher", None, n, rng)
    frac = np.mean([lab == ("female",) for lab in labels])
    p = world.context("teacher").prior["female"]
    assert abs(frac - p) < 4 * np.sqrt(p * (1 - p) / n)
    x, labels = world.sample_oracle("nurse", "male", 2000, rng)
    assert np.mean([lab == ("male",) for lab in labels]) >= 0.99


def test_object_oracle_mean(world):
    rng = np.random.default_rng(3)
    x, _ = world.sample_oracle("house", None, 4000, rng)
    se = world.spec.sigma / np.sqrt(4000)
    assert np.all(np.abs(x.mean(axis=0) - np.array(world.context("house").mean)) < 4 * se)


def test_classifier(world):
    male = np.array(world.spec.attribute_means["male"])
    assert world.classify(male, "nurse").attribute == "male"  # prior-free: skewed context does not matter
    label = world.classify(np.zeros(2), "ceo")
    assert label.posterior["male"] == pytest.approx(0.5)
    rng = np.random.default_rng(4)
    x, labels = world.sample_oracle("pilot", None, 5000, rng)
    pred = world.classify_many(x, "pilot")
    truth = np.array([world.spec.families["gender"].index(lab[0]) for lab in labels])
    assert np.mean(pred == truth) > 0.999


def test_classifier_rejects_object_context(world):
    with pytest.raises(WorldError):
        world.classify(np.zeros(2), "car")


def test_minor_major(world):
    assert world.minor_attribute("ceo") == "female"
    assert world.major_attribute("nurse") == "female"


@pytest.mark.parametrize(
    "patch, key",
    [
        ({"coupling": 0.0}, "world.coupling"),
        ({"sigma": -1.0}, "world.sigma"),
        ({"bogus": 1}, "world.bogus"),
        ({"attribute_means": {"a": [0.0, 0.0]}}, "world.attribute_means.b"),
    ],
)
def test_world_spec_errors_name_the_key(patch, key):
    raw = {
        "dim": 2,
        "coupling": 1.0,
        "families": {"g": ["a", "b"]},
        "attribute_means": {"a": [1.0, 0.0], "b": [-1.0, 0.0]},
        "contexts": {"x": {"prior": {"a": 0.5, "b": 0.5}}},
    }
    raw.update(patch)
    with pytest.raises(WorldError, match=key.replace(".", r"\.")):
        world_spec_from_dict(raw)
