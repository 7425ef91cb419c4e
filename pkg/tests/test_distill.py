import numpy as np
import pytest
from hypothesis import given, strategies as st

from gdprune import autograd as ag
from gdprune.codec import CodecConfig, build_topology
from gdprune.distill import (Stage, StagePlan, active_set, default_plan, distill_loss, full_plan,
                             lambda3_schedule, parse_plan)
from gdprune.errors import ConfigError, MissingLayerError

TOPO = build_topology(CodecConfig(base_width=4, latent_channels=4, num_downsamples=2))


def feats(rng, b=2):
    return {"a": rng.normal(size=(b, 3, 4, 4)), "b": rng.normal(size=(b, 5))}


def nodes(d, requires_grad=False):
    return {k: ag.tensor(v, requires_grad=requires_grad, dtype=np.float64) for k, v in d.items()}


def test_identical_features_zero():
    f = feats(np.random.default_rng(0))
    assert distill_loss(nodes(f), nodes(f), {"a", "b"}).item() == 0.0


@pytest.mark.parametrize("c", [1e-3, 1.0, 1e3])
def test_positive_scale_invariance(c):
    f = feats(np.random.default_rng(1))
    g = feats(np.random.default_rng(2))
    base = distill_loss(nodes(f), nodes(g), {"a", "b"}).item()
    scaled_s = distill_loss(nodes({k: c * v for k, v in f.items()}), nodes(g), {"a", "b"}).item()
    scaled_t = distill_loss(nodes(f), nodes({k: c * v for k, v in g.items()}), {"a", "b"}).item()
    assert abs(scaled_s - base) / base < 1e-6
    assert abs(scaled_t - base) / base < 1e-6
    assert distill_loss(nodes({k: c * v for k, v in f.items()}), nodes(f), {"a", "b"}).item() < 1e-12


def test_antipodal_is_four_per_layer():
    f = feats(np.random.default_rng(3), b=3)
    neg = {k: -v for k, v in f.items()}
    assert distill_loss(nodes(neg), nodes(f), {"a", "b"}).item() == pytest.approx(8.0, abs=1e-5)
    assert distill_loss(nodes(neg), nodes(f), {"a"}).item() == pytest.approx(4.0, abs=1e-5)


def test_zero_features_use_floor():
    z = {"a": np.zeros((2, 3))}
    assert distill_loss(nodes(z), nodes(z), {"a"}).item() == 0.0


def test_missing_layer_named():
    f = nodes(feats(np.random.default_rng(4)))
    with pytest.raises(MissingLayerError) as exc:
        distill_loss(f, {"a": f["a"]}, {"a", "b"})
    assert exc.value.layer_id == "b" and exc.value.side == "teacher"
    with pytest.raises(MissingLayerError):
        distill_loss({"a": f["a"]}, f, {"b"})


def test_teacher_receives_no_gradient():
    rng = np.random.default_rng(5)
    s = nodes(feats(rng), requires_grad=True)
    t = nodes(feats(rng), requires_grad=True)
    ag.backward(distill_loss(s, t, {"a", "b"}))
    assert all(v.grad is None for v in t.values())
    assert all(v.grad is not None for v in s.values())


def test_per_channel_variant_invariant_to_channel_scaling():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(2, 3, 4, 4))
    scales = np.array([1e-2, 1.0, 1e2])[None, :, None, None]
    a = distill_loss(nodes({"a": f * scales}), nodes({"a": f}), {"a"}, per_channel=True).item()
    assert a < 1e-10


@given(st.integers(1, 4), st.floats(1e-3, 1e3), st.integers(0, 2 ** 31))
def test_loss_bounds(b, c, seed):
    rng = np.random.default_rng(seed)
    f, g = feats(rng, b), feats(rng, b)
    val = distill_loss(nodes({k: c * v for k, v in f.items()}), nodes(g), {"a", "b"}).item()
    assert 0.0 <= val <= 4 * 2 + 1e-9


def test_lambda3_schedule():
    assert lambda3_schedule(500, 1000, 1.0) == 0.5
    assert lambda3_schedule(0, 1000, 1.0) == pytest.approx(0.99753, abs=1e-5)
    assert all(lambda3_schedule(k, 1000, 0.0) == 0.0 for k in range(0, 1001, 100))
    vals = [lambda3_schedule(k, 1000, 1.0) for k in range(0, 1001, 10)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_default_plan_stages():
    plan = default_plan(TOPO)
    pred, res, all_ = (s.layers for s in plan.stages)
    assert active_set(100, plan, 1000) == pred
    assert active_set(299, plan, 1000) == pred
    assert active_set(300, plan, 1000) == res  # boundary goes to the later stage
    assert active_set(600, plan, 1000) == all_
    assert active_set(950, plan, 1000) == frozenset(TOPO.prunable_ids())
    assert pred | res == all_ and not pred & res


def test_single_stage_plan_is_constant():
    plan = full_plan(TOPO)
    assert {active_set(k, plan, 100) for k in range(101)} == {frozenset(TOPO.prunable_ids())}


def test_parse_plan():
    plan = parse_plan("pred:0.3, res:0.3, all:0.4", TOPO)
    assert plan == default_plan(TOPO)
    custom = parse_plan("pred.dec0+res.dec0:0.5, all:0.5", TOPO)
    assert custom.stages[0].layers == {"pred.dec0", "res.dec0"}


@pytest.mark.parametrize("text", ["pred:0.5, all:0.6", "pred:0.5, res:0.5", "pred, all:1", "bogus.layer:0.5, all:0.5",
                                  "pred:x, all:1"])
def test_bad_plans(text):
    with pytest.raises(ConfigError):
        parse_plan(text, TOPO)


def test_plan_rejects_nonpositive_fraction():
    with pytest.raises(ConfigError):
        StagePlan((Stage("a", frozenset(), 0.0), Stage("b", frozenset(), 1.0)))
