"""Structured filter pruning with learnable per-layer thresholds.

Each prunable conv keeps a threshold ``T``.  A filter (row of the weight
viewed as ``(d_out, d_in*k*k)``) is kept while its L2 norm exceeds ``T``.
The masked weight is produced by a custom op whose backward scales the
gradient of pruned rows by ``beta`` instead of differentiating the mask, and
``beta`` is annealed from ~1 to ~0 over training.  A sigmoid relaxation of
the pruned fraction carries gradient into the thresholds.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from gdprune import autograd as ag
from gdprune.autograd import Node
from gdprune.errors import ConfigError, DegenerateNetworkError
from gdprune.topology import Topology

SCHEDULE_MODES = ("corrected-cubic", "as-written")
NORM_FLOOR = 1e-12


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class ScheduleSet:
    L0: float = -6.0
    L1: float = 6.0
    tau: float = 20.0
    s_tar: float = 0.5
    K: int = 5000
    schedule_mode: str = "corrected-cubic"

    def __post_init__(self):
        if not self.L1 > self.L0:
            raise ConfigError("L1 must exceed L0")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not 0.0 <= self.s_tar < 1.0:
            raise ConfigError("s_tar must lie in [0, 1)")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ConfigError(f"schedule_mode must be one of {SCHEDULE_MODES}")


def decay_schedule(k: float, K: float, L0: float, L1: float) -> float:
    return 1.0 - _sigmoid(L0 + (L1 - L0) * k / K)


def beta_schedule(k: int, sched: ScheduleSet) -> float:
    """Gradient scale for pruned rows at step ``k``; decays from ~1 to ~0."""
    return decay_schedule(k, sched.K, sched.L0, sched.L1)


def target_sparsity(k: int, sched: ScheduleSet) -> float:
    """Cubic ramp of the sparsity target, flat at ``s_tar`` from 70% of training."""
    knee = 0.7 * sched.K
    if k >= knee:
        return sched.s_tar
    cube = (1.0 - k / knee) ** 3
    if sched.schedule_mode == "as-written":
        return sched.s_tar + (1.0 - sched.s_tar) * cube
    return sched.s_tar * (1.0 - cube)


def row_norms(weight: np.ndarray) -> np.ndarray:
    rows = np.asarray(weight).reshape(weight.shape[0], -1)
    return np.sqrt(np.sum(rows * rows, axis=1))


@dataclass
class PrunableLayerState:
    layer_id: str
    weight: Node
    bias: Node | None
    threshold: Node
    norms: np.ndarray = field(init=False)
    keep_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.refresh()

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def refresh(self) -> None:
        self.norms = row_norms(self.weight.value)
        self.keep_mask = (self.norms - float(self.threshold.value.reshape(-1)[0])) > 0


def _mask_op(node: Node, keep: np.ndarray, beta: float, tag: str) -> Node:
    shape = (-1,) + (1,) * (node.value.ndim - 1)
    fmask = keep.astype(node.dtype).reshape(shape)
    gscale = np.where(keep, 1.0, beta).astype(node.dtype).reshape(shape)
    return ag.custom_grad_op(lambda v: v * fmask, lambda g, v: (g * gscale,), [node], op=tag)


def pruned_forward(layer: PrunableLayerState, beta: float) -> tuple[Node, Node | None]:
    """Masked (weight, bias): forward zeroes pruned rows, backward scales them by ``beta``."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    w = _mask_op(layer.weight, layer.keep_mask, beta, "prune_weight")
    b = None if layer.bias is None else _mask_op(layer.bias, layer.keep_mask, beta, "prune_bias")
    return w, b


def _norm_node(layer: PrunableLayerState, with_grad: bool) -> Node:
    if not with_grad:
        return Node(layer.norms.astype(layer.threshold.dtype))
    rows = ag.reshape(layer.weight, (layer.d_out, -1))
    return ag.sqrt(ag.maximum(ag.sum_(ag.square(rows), axis=1), NORM_FLOOR))


def soft_sparsity(layers: list[PrunableLayerState], tau: float, norm_grad: bool = False) -> Node:
    """Sigmoid estimate of the global pruned-filter fraction."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    total = sum(l.d_out for l in layers)
    alive = None
    for layer in layers:
        gap = ag.sub(_norm_node(layer, norm_grad), layer.threshold)
        s = ag.sum_(ag.sigmoid(ag.mul(gap, tau)))
        alive = s if alive is None else ag.add(alive, s)
    return ag.sub(1.0, ag.mul(alive, 1.0 / total))


def hard_sparsity(layers: list[PrunableLayerState]) -> float:
    total = sum(l.d_out for l in layers)
    pruned = sum(int(np.count_nonzero(~l.keep_mask)) for l in layers)
    return pruned / total


class Sparsifier:
    """Pruning state for every prunable layer of a model."""

    def __init__(self, params: dict[str, Node], layer_ids: list[str], shared_threshold: bool = False,
                 norm_grad: bool = False, thresholds: dict[str, np.ndarray] | None = None):
        self.shared_threshold = shared_threshold
        self.norm_grad = norm_grad
        self.layer_ids = list(layer_ids)
        if shared_threshold:
            init = 0.0 if thresholds is None else thresholds["shared"]
            shared = ag.parameter(np.array(init).reshape(()), name="threshold.shared")
            self.thresholds = {"shared": shared}
        else:
            self.thresholds = {
                lid: ag.parameter(np.array(0.0 if thresholds is None else thresholds[lid]).reshape(()),
                                  name=f"{lid}.threshold")
                for lid in self.layer_ids
            }
        self.layers: dict[str, PrunableLayerState] = {}
        for lid in self.layer_ids:
            t = self.thresholds["shared" if shared_threshold else lid]
            self.layers[lid] = PrunableLayerState(lid, params[f"{lid}.weight"], params.get(f"{lid}.bias"), t)

    def parameters(self) -> list[Node]:
        return list(self.thresholds.values())

    def states(self) -> list[PrunableLayerState]:
        return [self.layers[lid] for lid in self.layer_ids]

    def refresh(self) -> None:
        for layer in self.layers.values():
            layer.refresh()

    def clamp_thresholds(self) -> None:
        for t in self.thresholds.values():
            np.maximum(t.value, 0.0, out=t.value)

    def weight_fn(self, beta: float):
        def fn(layer_id: str, w: Node, b: Node):
            if layer_id not in self.layers:
                return w, b
            return pruned_forward(self.layers[layer_id], beta)
        return fn

    def soft_sparsity(self, tau: float) -> Node:
        return soft_sparsity(self.states(), tau, self.norm_grad)

    def hard_sparsity(self) -> float:
        return hard_sparsity(self.states())

    def sparsity_estimate(self, tau: float, mode: str = "soft") -> Node:
        """Sparsity value fed to the loss.

        ``soft`` is the sigmoid estimate.  ``hard-st`` takes its forward value
        from the keep-masks and its gradient from the sigmoid estimate, so the
        gap term measures the sparsity that compaction will actually deliver.
        """
        s = self.soft_sparsity(tau)
        if mode == "soft":
            return s
        if mode != "hard-st":
            raise ValueError(f"unknown sparsity estimate {mode!r}")
        return ag.add(s, float(self.hard_sparsity() - s.item()))

    def masks(self) -> dict[str, np.ndarray]:
        return {lid: self.layers[lid].keep_mask.copy() for lid in self.layer_ids}

    def threshold_values(self) -> dict[str, float]:
        return {k: float(v.value) for k, v in self.thresholds.items()}

    def diagnostics(self) -> dict:
        return {
            lid: {
                "threshold": float(layer.threshold.value),
                "norm_min": float(layer.norms.min()),
                "norm_max": float(layer.norms.max()),
                "kept": int(layer.keep_mask.sum()),
                "finite_weights": bool(np.isfinite(layer.weight.value).all()),
            }
            for lid, layer in self.layers.items()
        }


# ---------------------------------------------------------------------------
# compaction


@dataclass
class LayerChannels:
    out_keep: list[int]
    in_keep: list[int]


def compaction_plan(topology: Topology, masks: dict[str, np.ndarray]) -> dict[str, LayerChannels]:
    """Kept output/input channel indices per layer after removing masked filters.

    Consumers lose the input slices of removed producer channels; sources
    concatenated on the channel axis are remapped by their offsets.
    """
    out_keep: dict[str, list[int]] = {}
    plan: dict[str, LayerChannels] = {}
    for layer in topology.layers:
        in_keep: list[int] = []
        offset = 0
        for src in layer.sources:
            n = topology.source_channels(src)
            kept = out_keep.get(src, list(range(n)))
            in_keep.extend(offset + i for i in kept)
            offset += n
        if layer.id in masks:
            mask = np.asarray(masks[layer.id], dtype=bool)
            if mask.shape != (layer.out_channels,):
                raise ValueError(f"mask for {layer.id!r} has shape {mask.shape}, expected ({layer.out_channels},)")
            keep = [int(i) for i in np.flatnonzero(mask)]
            if not keep:
                raise DegenerateNetworkError(layer.id)
        else:
            keep = list(range(layer.out_channels))
        out_keep[layer.id] = keep
        plan[layer.id] = LayerChannels(keep, in_keep)
    return plan


def is_identity_plan(topology: Topology, plan: dict[str, LayerChannels]) -> bool:
    return all(
        plan[l.id].out_keep == list(range(l.out_channels)) and plan[l.id].in_keep == list(range(l.in_channels))
        for l in topology.layers
    )


def plan_to_json(plan: dict[str, LayerChannels]) -> str:
    return json.dumps({lid: {"out": ch.out_keep, "in": ch.in_keep} for lid, ch in plan.items()}, indent=2)
