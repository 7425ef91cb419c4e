"""Randomised finite-difference checks of the differentiable pieces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gdprune import autograd as ag
from gdprune.autograd import GradcheckReport, Node, finite_diff_check
from gdprune.codec import rate_estimate
from gdprune.distill import distill_loss
from gdprune.pruning import PrunableLayerState, soft_sparsity

F64 = np.float64


def _p(rng: np.random.Generator, shape, name: str, scale: float = 1.0) -> Node:
    return ag.parameter(rng.normal(scale=scale, size=shape), dtype=F64, name=name)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin * 2, v)


def case_rate(rng: np.random.Generator):
    c = int(rng.integers(1, 4))
    y = ag.parameter(rng.normal(scale=2.0, size=(2, c, 3, 3)), dtype=F64, name="y")
    loc = _p(rng, (c,), "loc", 0.5)
    scale = ag.parameter(rng.uniform(0.0, 1.5, size=(c,)), dtype=F64, name="scale_raw")
    return (lambda: rate_estimate(y, loc, scale)), [y, loc, scale]


def case_distill(rng: np.random.Generator):
    b = int(rng.integers(1, 4))
    shapes = {"a": (b, 3, 4, 4), "b": (b, 2, 2, 2)}
    student = {k: _p(rng, s, f"student.{k}") for k, s in shapes.items()}
    teacher = {k: ag.tensor(rng.normal(size=s), dtype=F64) for k, s in shapes.items()}
    per_channel = bool(rng.integers(2))
    return (lambda: distill_loss(student, teacher, {"a", "b"}, per_channel)), list(student.values())


def case_soft_sparsity(rng: np.random.Generator, tau: float = 20.0):
    layers = []
    for i in range(int(rng.integers(1, 4))):
        d_out = int(rng.integers(2, 6))
        w = ag.tensor(rng.normal(scale=0.3, size=(d_out, 3, 3, 3)), dtype=F64)
        norms = np.sqrt((w.value.reshape(d_out, -1) ** 2).sum(axis=1))
        # threshold near the middle of the norms keeps the sigmoids in their active band
        t = ag.parameter(np.float64(np.median(norms) + rng.normal(scale=0.05)), dtype=F64, name=f"T{i}")
        layers.append(PrunableLayerState(f"l{i}", w, None, t))
    return (lambda: soft_sparsity(layers, tau)), [l.threshold for l in layers]


def case_conv(rng: np.random.Generator):
    stride = int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    x = _p(rng, (2, 2, 5, 5), "x")
    w = _p(rng, (3, 2, k, k), "w", 0.5)
    b = _p(rng, (3,), "b")
    r = ag.tensor(rng.normal(size=(2, 3) + ag.conv2d(x, w, b, stride, k // 2).shape[2:]), dtype=F64)
    return (lambda: ag.sum_(ag.mul(ag.conv2d(x, w, b, stride, k // 2), r))), [x, w, b]


def case_deconv(rng: np.random.Generator):
    x = _p(rng, (2, 2, 3, 3), "x")
    w = _p(rng, (3, 2, 3, 3), "w", 0.5)
    b = _p(rng, (3,), "b")
    out_shape = ag.conv_transpose2d(x, w, b, 2, 1, 1).shape
    r = ag.tensor(rng.normal(size=out_shape), dtype=F64)
    return (lambda: ag.sum_(ag.mul(ag.conv_transpose2d(x, w, b, 2, 1, 1), r))), [x, w, b]


def case_elementwise(rng: np.random.Generator):
    a = ag.parameter(_away_from_zero(rng, (3, 4)), dtype=F64, name="a")
    b = ag.parameter(rng.uniform(0.5, 2.0, size=(4,)), dtype=F64, name="b")
    m = _p(rng, (4, 2), "m")

    def f():
        h = ag.leaky_relu(a, 0.1)
        h = ag.add(ag.mul(ag.sigmoid(h), ag.softplus(a)), ag.div(h, b))
        h = ag.add(h, ag.log(ag.add(ag.square(a), 1.0)))
        h = ag.add(h, ag.sqrt(b))
        h = ag.mul(ag.exp(ag.mul(h, 0.1)), ag.sub(h, ag.abs_(a)))
        h = ag.concat([h, ag.slice_(h, (slice(None), slice(0, 2)))], axis=1)
        return ag.mean(ag.matmul(ag.slice_(h, (slice(None), slice(0, 4))), m))

    return f, [a, b, m]


CASES: dict[str, Callable] = {
    "rate": case_rate,
    "distill": case_distill,
    "soft_sparsity": case_soft_sparsity,
    "conv2d": case_conv,
    "conv_transpose2d": case_deconv,
    "elementwise": case_elementwise,
}


@dataclass
class SuiteResult:
    trials: int
    worst: dict[str, float] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not any(self.failures.values())

    def lines(self) -> list[str]:
        return [f"{name:18s} worst_rel_err={self.worst[name]:.3e} failed={self.failures[name]}/{self.trials}"
                for name in self.worst]


def run_suite(trials: int = 20, seed: int = 0, h: float = 1e-3, tol: float = 1e-3,
              cases: dict[str, Callable] | None = None) -> SuiteResult:
    result = SuiteResult(trials)
    for name, make in (cases or CASES).items():
        worst, failed = 0.0, 0
        for t in range(trials):
            rng = np.random.default_rng([seed, t, len(name)])
            f, params = make(rng)
            rep: GradcheckReport = finite_diff_check(f, params, h=h, tol=tol)
            worst = max(worst, rep.worst())
            failed += not rep.passed
        result.worst[name] = worst
        result.failures[name] = failed
    return result
