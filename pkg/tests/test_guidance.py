"""Per-step condition schedules and per-chain target draws."""

import numpy as np
import pytest
from scipy import stats

from weakguide.codec import CadsParams, PromptSpec
from weakguide.guidance import (
    CADS,
    CFG,
    PromptAppend,
    Swap,
    Vanilla,
    Weak,
    ceil_steps,
    guidance_from_dict,
    guidance_to_dict,
    make_driver,
)


def schedule_of(driver, n):
    return [driver.condition_at(t, n)[0] is driver.edited for t in range(n, 0, -1)]


@pytest.mark.parametrize("n", [10, 50, 51, 1000])
@pytest.mark.parametrize("tau", [0.0, 0.3, 0.9, 1.0])
def test_weak_schedule_counts(codec, n, tau):
    d = make_driver(Weak(tau=tau), PromptSpec("ceo"), codec, np.random.default_rng(0))
    uses = schedule_of(d, n)
    exclusive = ceil_steps(tau, n)
    assert all(uses[:exclusive])
    tail = uses[exclusive:]
    assert tail == [i % 2 == 0 for i in range(len(tail))]  # alternation starts with the edited condition
    assert sum(uses) == exclusive + (n - exclusive + 1) // 2


def test_ceil_steps_rounding():
    assert ceil_steps(0.6, 50) == 30
    assert ceil_steps(0.9, 1000) == 900
    assert ceil_steps(0.001, 50) == 1


@pytest.mark.parametrize("fraction", [0.0, 0.2, 0.5, 1.0])
def test_swap_boundary(codec, fraction):
    n = 50
    d = make_driver(Swap(fraction=fraction, attribute="female"), PromptSpec("ceo"), codec, np.random.default_rng(0))
    uses = schedule_of(d, n)
    k = ceil_steps(fraction, n)
    assert uses == [True] * k + [False] * (n - k)
    assert d.edited.equals(codec.encode(PromptSpec("ceo", "female")))


def test_weak_preserves_prefix_and_targets_attribute(codec):
    d = make_driver(Weak(attributes=("female",)), PromptSpec("nurse"), codec, np.random.default_rng(0))
    assert d.target == ("female",)
    e = d.edited.eos_index
    np.testing.assert_array_equal(d.edited.matrix[:e], d.base.matrix[:e])
    assert not np.array_equal(d.edited.matrix[e:], d.base.matrix[e:])


def test_vanilla_and_cfg_use_base(codec):
    for spec in (Vanilla(), CFG(4.0)):
        d = make_driver(spec, PromptSpec("ceo"), codec, np.random.default_rng(0))
        cond, uncond, alpha = d.condition_at(10, 50)
        assert cond is d.base and uncond.eos_index == 0 and alpha == spec.alpha


def test_prompt_append_appends_token(codec):
    d = make_driver(PromptAppend(attributes=("male",)), PromptSpec("nurse"), codec, np.random.default_rng(0))
    assert d.edited.tokens == ("nurse", "male")


def test_target_draws_are_uniform(codec):
    rng = np.random.default_rng(1)
    spec = Weak(attributes=("male", "female"))
    cache = {}
    targets = [make_driver(spec, PromptSpec("ceo"), codec, rng, cache).target[0] for _ in range(4000)]
    counts = [targets.count("male"), targets.count("female")]
    assert stats.chisquare(counts).pvalue > 0.001


def test_multi_family_targets(codec):
    spec = Weak(attributes=(("male", "female"), ("ceo", "nurse")))
    d = make_driver(spec, PromptSpec("teacher"), codec, np.random.default_rng(2))
    assert len(d.target) == 2


def test_cads_condition_only_perturbed_late(codec):
    d = make_driver(CADS(1.0, CadsParams(0.25, 0.6, 0.9)), PromptSpec("ceo"), codec, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    assert d.condition_at(30, 100, rng)[0] is d.base
    assert not d.condition_at(80, 100, rng)[0].equals(d.base)
    assert d.is_stochastic


def test_condition_at_bounds(codec):
    d = make_driver(Vanilla(), PromptSpec("ceo"), codec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        d.condition_at(0, 50)


@pytest.mark.parametrize(
    "spec",
    [Vanilla(), CFG(2.0), CADS(6.0, CadsParams(0.1, 0.5, 0.8)), Swap(0.0, 0.4, "male"), PromptAppend(), Weak(tau=0.5)],
)
def test_spec_dict_roundtrip(spec):
    assert guidance_from_dict(guidance_to_dict(spec)) == spec


def test_spec_validation():
    with pytest.raises(ValueError):
        CFG(-1.0)
    with pytest.raises(ValueError):
        Weak(tau=1.5)
    with pytest.raises(ValueError):
        Swap(fraction=2.0)
    with pytest.raises(ValueError):
        Weak(attributes=())
    with pytest.raises(ValueError):
        guidance_from_dict({"kind": "nope"})
