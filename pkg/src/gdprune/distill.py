"""Staged layer-wise feature distillation against a frozen dense teacher."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from gdprune import autograd as ag
from gdprune.autograd import Node
from gdprune.errors import ConfigError, MissingLayerError
from gdprune.pruning import decay_schedule
from gdprune.topology import Topology

FEATURE_NORM_FLOOR = 1e-12
DISTILL_MODES = ("none", "full", "adaptive")


@dataclass(frozen=True)
class Stage:
    name: str
    layers: frozenset[str]
    fraction: float


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("stage plan needs at least one stage")
        total = math.fsum(s.fraction for s in self.stages)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"stage budget fractions sum to {total}, expected 1")
        if any(s.fraction <= 0 for s in self.stages):
            raise ConfigError("stage budget fractions must be positive")

    def validate(self, topology: Topology) -> None:
        ids = set(topology.ids)
        for stage in self.stages:
            unknown = stage.layers - ids
            if unknown:
                raise ConfigError(f"stage {stage.name!r} names unknown layers {sorted(unknown)}")
        final = self.stages[-1].layers
        missing = set(topology.prunable_ids()) - final
        if missing:
            raise ConfigError(f"final stage must cover every prunable layer; missing {sorted(missing)}")

    def stage_index(self, k: int, K: int) -> int:
        frac = k / K
        edge = 0.0
        for i, stage in enumerate(self.stages[:-1]):
            edge += stage.fraction
            # boundaries belong to the later stage
            if frac < edge:
                return i
        return len(self.stages) - 1

    def describe(self) -> str:
        return ", ".join(f"{s.name}:{s.fraction:g}" for s in self.stages)


def prunable_groups(topology: Topology) -> dict[str, frozenset[str]]:
    prunable = topology.prunable_ids()
    return {
        "pred": frozenset(l for l in prunable if l.startswith("pred.")),
        "res": frozenset(l for l in prunable if l.startswith("res.")),
        "all": frozenset(prunable),
    }


def default_plan(topology: Topology) -> StagePlan:
    g = prunable_groups(topology)
    return StagePlan((Stage("pred", g["pred"], 0.3), Stage("res", g["res"], 0.3), Stage("all", g["all"], 0.4)))


def full_plan(topology: Topology) -> StagePlan:
    return StagePlan((Stage("all", prunable_groups(topology)["all"], 1.0),))


def parse_plan(text: str, topology: Topology) -> StagePlan:
    """Parse ``"pred:0.3, res:0.3, all:0.4"``.

    A stage name is a group (``pred``, ``res``, ``all``) or a ``+``-joined list
    of layer-ids.
    """
    groups = prunable_groups(topology)
    stages = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, sep, frac = item.rpartition(":")
        if not sep:
            raise ConfigError(f"stage {item!r} must look like name:fraction")
        try:
            fraction = float(frac)
        except ValueError:
            raise ConfigError(f"stage {item!r} has a non-numeric fraction") from None
        name = name.strip()
        layers = groups.get(name) or frozenset(p.strip() for p in name.split("+"))
        stages.append(Stage(name, layers, fraction))
    plan = StagePlan(tuple(stages))
    plan.validate(topology)
    return plan


def active_set(k: int, plan: StagePlan, K: int) -> frozenset[str]:
    return plan.stages[plan.stage_index(k, K)].layers


def lambda3_schedule(k: int, K: int, lambda3_init: float, L0: float = -6.0, L1: float = 6.0) -> float:
    return lambda3_init * decay_schedule(k, K, L0, L1)


def _unit(h: Node, per_channel: bool) -> Node:
    b = h.shape[0]
    if per_channel and h.value.ndim == 4:
        flat = ag.reshape(h, (b, h.shape[1], -1))
    else:
        flat = ag.reshape(h, (b, -1))
    norm = ag.sqrt(ag.maximum(ag.sum_(ag.square(flat), axis=-1, keepdims=True), FEATURE_NORM_FLOOR ** 2))
    return ag.div(flat, norm)


def distill_loss(student_hidden: dict[str, Node], teacher_hidden: dict[str, Node], P, per_channel: bool = False
                 ) -> Node:
    """Batch mean of summed squared distances between L2-normalised features."""
    total = None
    for lid in sorted(P):
        if lid not in student_hidden:
            raise MissingLayerError(lid, "student")
        if lid not in teacher_hidden:
            raise MissingLayerError(lid, "teacher")
        hs = student_hidden[lid]
        ht = ag.stop_gradient(teacher_hidden[lid])
        if hs.shape != ht.shape:
            raise ConfigError(f"layer {lid!r}: student {hs.shape} vs teacher {ht.shape}")
        diff = ag.sub(_unit(hs, per_channel), _unit(ht, per_channel))
        per_sample = ag.sum_(ag.reshape(ag.square(diff), (hs.shape[0], -1)), axis=1)
        total = per_sample if total is None else ag.add(total, per_sample)
    if total is None:
        return Node(np.zeros((), dtype=np.float32))
    return ag.mean(total)
