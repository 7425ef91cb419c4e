"""Parameter/MAC accounting, physical compaction and Bjontegaard deltas."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gdprune.autograd import Node
from gdprune.codec import ToyCodec
from gdprune.errors import BDError, ShapeError
from gdprune.pruning import LayerChannels, compaction_plan
from gdprune.topology import LayerSpec, Topology

BD_SAMPLES = 2001


@dataclass
class LayerComplexity:
    layer_id: str
    params: int
    params_after: int
    macs: int
    macs_after: int


@dataclass
class ComplexityReport:
    params_total: int
    params_after_prune: int
    macs_total: int
    macs_after_prune: int
    resolution: tuple[int, int]
    layers: list[LayerComplexity] = field(default_factory=list)

    @property
    def mac_reduction(self) -> float:
        return 1.0 - self.macs_after_prune / self.macs_total if self.macs_total else 0.0

    @property
    def param_reduction(self) -> float:
        return 1.0 - self.params_after_prune / self.params_total if self.params_total else 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["mac_reduction"] = self.mac_reduction
        d["param_reduction"] = self.param_reduction
        return json.dumps(d, indent=2)


def _layer_macs(layer: LayerSpec, in_hw, out_hw, cin: int, cout: int) -> int:
    k2 = layer.kernel * layer.kernel
    if layer.kind == "deconv":
        # scatter form: every input pixel touches k*k outputs per channel pair
        return in_hw[0] * in_hw[1] * k2 * cin * cout
    return out_hw[0] * out_hw[1] * k2 * cin * cout


def complexity_report(topology: Topology, masks: dict[str, np.ndarray] | None, height: int, width: int,
                      decoder_only: bool = True, extra_params: int = 0) -> ComplexityReport:
    if height <= 0 or width <= 0:
        raise ShapeError("count_macs", (height, width), detail="resolution must be positive")
    plan = compaction_plan(topology, masks or {})
    sizes = topology.spatial_sizes(height, width)
    rows = []
    for layer in topology.layers:
        if decoder_only and not layer.decoder:
            continue
        in_hw, out_hw = sizes[layer.id]
        if min(out_hw) <= 0:
            raise ShapeError("count_macs", (height, width), detail=f"layer {layer.id!r} has empty output")
        ch = plan[layer.id]
        k2 = layer.kernel * layer.kernel
        cin, cout = len(ch.in_keep), len(ch.out_keep)
        rows.append(LayerComplexity(
            layer.id,
            params=layer.in_channels * layer.out_channels * k2 + layer.out_channels,
            params_after=cin * cout * k2 + cout,
            macs=_layer_macs(layer, in_hw, out_hw, layer.in_channels, layer.out_channels),
            macs_after=_layer_macs(layer, in_hw, out_hw, cin, cout),
        ))
    return ComplexityReport(
        params_total=sum(r.params for r in rows) + extra_params,
        params_after_prune=sum(r.params_after for r in rows) + extra_params,
        macs_total=sum(r.macs for r in rows),
        macs_after_prune=sum(r.macs_after for r in rows),
        resolution=(height, width),
        layers=rows,
    )


def count_macs(topology: Topology, masks: dict[str, np.ndarray] | None, resolution: tuple[int, int],
               decoder_only: bool = True) -> ComplexityReport:
    return complexity_report(topology, masks, resolution[0], resolution[1], decoder_only)


def count_params(topology: Topology, masks: dict[str, np.ndarray] | None, decoder_only: bool = False,
                 extra_params: int = 0) -> tuple[int, int]:
    """(dense, compacted) parameter counts including biases."""
    plan = compaction_plan(topology, masks or {})
    dense = after = extra_params
    for layer in topology.layers:
        if decoder_only and not layer.decoder:
            continue
        k2 = layer.kernel * layer.kernel
        ch = plan[layer.id]
        dense += layer.in_channels * layer.out_channels * k2 + layer.out_channels
        after += len(ch.in_keep) * len(ch.out_keep) * k2 + len(ch.out_keep)
    return dense, after


def entropy_param_count(model: ToyCodec) -> int:
    return sum(v.value.size for k, v in model.params.items() if ".entropy." in k)


def compact_model(model: ToyCodec, plan: dict[str, LayerChannels]) -> ToyCodec:
    """Physically remove pruned filters and the matching consumer input slices."""
    layers = []
    params: dict[str, Node] = {}
    for layer in model.topology.layers:
        ch = plan[layer.id]
        w = model.params[f"{layer.id}.weight"].value
        b = model.params[f"{layer.id}.bias"].value
        w_small = np.ascontiguousarray(w[np.asarray(ch.out_keep)][:, np.asarray(ch.in_keep)])
        b_small = np.ascontiguousarray(b[np.asarray(ch.out_keep)])
        params[f"{layer.id}.weight"] = Node(w_small, requires_grad=True, name=f"{layer.id}.weight")
        params[f"{layer.id}.bias"] = Node(b_small, requires_grad=True, name=f"{layer.id}.bias")
        layers.append(LayerSpec(**{**layer.to_dict(), "sources": layer.sources,
                                   "in_channels": len(ch.in_keep), "out_channels": len(ch.out_keep)}))
    for k, v in model.params.items():
        if ".entropy." in k:
            params[k] = Node(v.value.copy(), requires_grad=True, name=k)
    return ToyCodec(model.config, model.topology.with_layers(layers), params)


def masked_copy(model: ToyCodec, masks: dict[str, np.ndarray]) -> ToyCodec:
    """Dense-shaped copy with masked filters and biases zeroed."""
    clone = model.clone()
    for lid, mask in masks.items():
        keep = np.asarray(mask, dtype=clone.params[f"{lid}.weight"].dtype)
        clone.params[f"{lid}.weight"].value *= keep[:, None, None, None]
        clone.params[f"{lid}.bias"].value *= keep
    return clone


# ---------------------------------------------------------------------------
# Bjontegaard deltas


@dataclass
class BDResult:
    bd_rate_percent: float
    bd_psnr_db: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _check_curve(rate, quality, name: str) -> tuple[np.ndarray, np.ndarray]:
    rate = np.asarray(rate, dtype=np.float64)
    quality = np.asarray(quality, dtype=np.float64)
    if rate.shape != quality.shape or rate.ndim != 1:
        raise BDError(f"{name}: rate and quality must be equal-length vectors")
    if rate.size < 4:
        raise BDError(f"{name}: need at least 4 RD points, got {rate.size}")
    if np.any(rate <= 0) or not np.all(np.isfinite(rate)) or not np.all(np.isfinite(quality)):
        raise BDError(f"{name}: rates must be positive and all values finite")
    order = np.argsort(rate)
    rate, quality = rate[order], quality[order]
    if np.any(np.diff(rate) <= 0):
        raise BDError(f"{name}: rates must be distinct")
    if np.any(np.diff(quality) <= 0):
        raise BDError(f"{name}: quality must increase with rate")
    return rate, quality


def _mean_over(poly_a: np.ndarray, poly_b: np.ndarray, lo: float, hi: float, samples: int) -> float:
    t = np.linspace(lo, hi, samples)
    diff = np.polyval(poly_b, t) - np.polyval(poly_a, t)
    return float(np.trapezoid(diff, t) / (hi - lo))


def bd_metrics(ref_rate, ref_psnr, test_rate, test_psnr, samples: int = BD_SAMPLES) -> BDResult:
    """BD-rate (%) and BD-PSNR (dB) of ``test`` relative to ``ref``.

    Cubic fits of PSNR over log-rate and of log-rate over PSNR are compared on
    the overlapping interval by trapezoidal integration.
    """
    r1, q1 = _check_curve(ref_rate, ref_psnr, "reference")
    r2, q2 = _check_curve(test_rate, test_psnr, "test")
    lr1, lr2 = np.log(r1), np.log(r2)

    lo, hi = max(lr1.min(), lr2.min()), min(lr1.max(), lr2.max())
    if not hi > lo:
        raise BDError("curves share no rate range")
    dpsnr = _mean_over(np.polyfit(lr1, q1, 3), np.polyfit(lr2, q2, 3), lo, hi, samples)

    lo, hi = max(q1.min(), q2.min()), min(q1.max(), q2.max())
    if not hi > lo:
        raise BDError("curves share no quality range")
    dlog = _mean_over(np.polyfit(q1, lr1, 3), np.polyfit(q2, lr2, 3), lo, hi, samples)
    return BDResult(bd_rate_percent=(math.exp(dlog) - 1.0) * 100.0, bd_psnr_db=dpsnr)


def read_rd_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    rates, psnrs = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"rate_bpp", "psnr_db"} <= set(reader.fieldnames):
            raise BDError(f"{path}: expected columns rate_bpp,psnr_db")
        for row in reader:
            rates.append(float(row["rate_bpp"]))
            psnrs.append(float(row["psnr_db"]))
    return np.array(rates), np.array(psnrs)


def write_rd_csv(path: str | Path, rates, psnrs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rate_bpp", "psnr_db"])
        for r, q in sorted(zip(rates, psnrs)):
            w.writerow([repr(float(r)), repr(float(q))])
