"""Toy two-branch P-frame codec.

The prediction branch codes a latent from ``[x_t, x_ref]`` and decodes it,
together with the reference, into a predicted frame.  The residual branch
autoencodes ``x_t - prediction``.  Each latent goes through a uniform
quantizer and a per-channel logistic entropy model that yields its bit cost.
Every conv on the decoder side of either branch that produces hidden
channels is prunable; the final image-producing convs are decoder layers
whose output width is fixed by the pixel format.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from gdprune import autograd as ag
from gdprune.autograd import Node
from gdprune.errors import ConfigError, ShapeError
from gdprune.topology import LayerSpec, Topology

LIKELIHOOD_FLOOR = 1e-9
SCALE_FLOOR = 1e-4
_LN2 = math.log(2.0)

WeightFn = Callable[[str, Node, Node], "tuple[Node, Node]"]


@dataclass(frozen=True)
class CodecConfig:
    input_channels: int = 1
    base_width: int = 32
    latent_channels: int = 48
    num_downsamples: int = 3
    branch_widths: tuple[float, float] = (1.0, 1.0)  # prediction, residual
    init_gain: float = 0.5
    leaky_slope: float = 0.1
    zero_init_output: bool = False

    def __post_init__(self):
        if self.input_channels not in (1, 3):
            raise ConfigError("input_channels must be 1 or 3")
        for name in ("base_width", "latent_channels", "num_downsamples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if len(self.branch_widths) != 2 or min(self.branch_widths) <= 0:
            raise ConfigError("branch_widths needs two positive multipliers")

    def width(self, branch: str) -> int:
        mult = self.branch_widths[0 if branch == "pred" else 1]
        return max(1, int(round(self.base_width * mult)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_widths"] = list(self.branch_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        d["branch_widths"] = tuple(d.get("branch_widths", (1.0, 1.0)))
        return cls(**d)


@dataclass
class LatentCode:
    values: Node
    rate_bits: Node


@dataclass
class FrameContext:
    current: np.ndarray  # (B, C, H, W) in [0, 1]
    reference: np.ndarray

    def __post_init__(self):
        if self.current.shape != self.reference.shape:
            raise ShapeError("FrameContext", self.current.shape, self.reference.shape)
        if self.current.ndim != 4:
            raise ShapeError("FrameContext", self.current.shape, detail="expected (batch, channels, height, width)")


@dataclass
class CodeResult:
    reconstruction: Node
    rate_motion: Node
    rate_residual: Node
    hidden: dict[str, Node] = field(default_factory=dict)
    motion_latent: LatentCode | None = None
    residual_latent: LatentCode | None = None
    prediction: Node | None = None


def build_topology(cfg: CodecConfig) -> Topology:
    c, lat, nd = cfg.input_channels, cfg.latent_channels, cfg.num_downsamples
    layers: list[LayerSpec] = []

    def encoder(branch: str, first_sources: tuple[str, ...], in_ch: int) -> str:
        width = cfg.width(branch)
        src, ch = first_sources, in_ch
        for i in range(nd):
            out = lat if i == nd - 1 else width
            act = "none" if i == nd - 1 else "lrelu"
            layers.append(LayerSpec(f"{branch}.enc{i}", "conv", ch, out, 3, 2, 1, sources=src, activation=act))
            src, ch = (f"{branch}.enc{i}",), out
        return src[0]

    def decoder(branch: str, latent_id: str) -> str:
        width = cfg.width(branch)
        src, ch = (latent_id,), lat
        for i in range(nd):
            layers.append(LayerSpec(f"{branch}.dec{i}", "deconv", ch, width, 3, 2, 1, 1, sources=src,
                                    activation="lrelu", decoder=True, prunable=True))
            src, ch = (f"{branch}.dec{i}",), width
        return src[0]

    pred_latent = encoder("pred", ("x", "ref"), 2 * c)
    pred_feat = decoder("pred", pred_latent)
    wp = cfg.width("pred")
    layers.append(LayerSpec("pred.fuse", "conv", wp + c, wp, 3, 1, 1, sources=(pred_feat, "ref"),
                            activation="lrelu", decoder=True, prunable=True))
    layers.append(LayerSpec("pred.out", "conv", wp, c, 3, 1, 1, sources=("pred.fuse",), decoder=True))
    res_latent = encoder("res", ("residual",), c)
    res_feat = decoder("res", res_latent)
    layers.append(LayerSpec("res.out", "conv", cfg.width("res"), c, 3, 1, 1, sources=(res_feat,), decoder=True))
    return Topology(tuple(layers), (("x", c), ("ref", c), ("residual", c)))


def quantize(y: Node, mode: str, rng: np.random.Generator | None = None) -> Node:
    """Additive uniform noise in training, round-half-away-from-zero in eval."""
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs a seeded generator")
        noise = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype)
        return ag.add(y, noise)
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    def fwd(v):
        return np.sign(v) * np.floor(np.abs(v) + 0.5)

    return ag.custom_grad_op(fwd, lambda g, v: (g,), [y], op="round")


def rate_estimate(y: Node, loc: Node, scale_raw: Node) -> Node:
    """Total bits of ``y`` under a per-channel (axis 1) discretized logistic."""
    shape = (1, -1) + (1,) * (y.value.ndim - 2)
    mu = ag.reshape(loc, shape)
    scale = ag.maximum(ag.softplus(ag.reshape(scale_raw, shape)), SCALE_FLOOR)
    centered = ag.div(ag.sub(y, mu), scale)
    half = ag.div(0.5, scale)
    # evaluate on the lower tail so the difference never cancels to zero
    sign = np.where(centered.value > 0, -1.0, 1.0).astype(y.dtype)
    upper = ag.sigmoid(ag.mul(sign, ag.add(centered, half)))
    lower = ag.sigmoid(ag.mul(sign, ag.sub(centered, half)))
    lik = ag.maximum(ag.mul(sign, ag.sub(upper, lower)), LIKELIHOOD_FLOOR)
    return ag.mul(ag.sum_(ag.log(lik)), -1.0 / _LN2)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("psnr", a.shape, b.shape)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


class ToyCodec:
    """Parameters plus forward pass over a :class:`Topology`."""

    def __init__(self, config: CodecConfig, topology: Topology | None = None,
                 params: dict[str, Node] | None = None, seed: int = 0):
        self.config = config
        self.topology = topology or build_topology(config)
        self.params: dict[str, Node] = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> dict[str, Node]:
        rng = np.random.default_rng(seed)
        params: dict[str, Node] = {}
        for layer in self.topology.layers:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            std = self.config.init_gain / math.sqrt(fan_in)
            w = rng.normal(0.0, std, size=shape)
            if self.config.zero_init_output and layer.id.endswith(".out"):
                w = np.zeros(shape)
            params[f"{layer.id}.weight"] = ag.parameter(w, name=f"{layer.id}.weight")
            params[f"{layer.id}.bias"] = ag.parameter(np.zeros(layer.out_channels), name=f"{layer.id}.bias")
        for branch in ("pred", "res"):
            lat = self.config.latent_channels
            params[f"{branch}.entropy.loc"] = ag.parameter(np.zeros(lat), name=f"{branch}.entropy.loc")
            # softplus(raw) == 1
            raw = np.full(lat, math.log(math.e - 1.0))
            params[f"{branch}.entropy.scale"] = ag.parameter(raw, name=f"{branch}.entropy.scale")
        return params

    # -- layers ---------------------------------------------------------

    def layer(self, layer_id: str, inputs: list[Node], weight_fn: WeightFn | None = None) -> Node:
        spec = self.topology[layer_id]
        w = self.params[f"{layer_id}.weight"]
        b = self.params[f"{layer_id}.bias"]
        if weight_fn is not None:
            w, b = weight_fn(layer_id, w, b)
        x = ag.concat(inputs, axis=1)
        if spec.kind == "deconv":
            out = ag.conv_transpose2d(x, w, b, spec.stride, spec.padding, spec.output_padding)
        else:
            out = ag.conv2d(x, w, b, spec.stride, spec.padding)
        if spec.activation == "lrelu":
            out = ag.leaky_relu(out, self.config.leaky_slope)
        return out

    def _encode(self, branch: str, inputs: list[Node], hidden: dict, weight_fn) -> Node:
        h = inputs
        for i in range(self.config.num_downsamples):
            lid = f"{branch}.enc{i}"
            out = self.layer(lid, h, weight_fn)
            hidden[lid] = out
            h = [out]
        return h[0]

    def _decode(self, branch: str, latent: Node, hidden: dict, weight_fn) -> Node:
        h = latent
        for i in range(self.config.num_downsamples):
            lid = f"{branch}.dec{i}"
            h = self.layer(lid, [h], weight_fn)
            hidden[lid] = h
        return h

    def _latent(self, branch: str, y: Node, mode: str, rng) -> LatentCode:
        yq = quantize(y, mode, rng)
        bits = rate_estimate(yq, self.params[f"{branch}.entropy.loc"], self.params[f"{branch}.entropy.scale"])
        return LatentCode(yq, bits)

    # -- branches -------------------------------------------------------

    def _check_frames(self, x: np.ndarray) -> None:
        c = self.config.input_channels
        factor = 2 ** self.config.num_downsamples
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeError("code_frame", x.shape, detail=f"expected (B, {c}, H, W)")
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError("code_frame", x.shape, detail=f"spatial dims must be divisible by {factor}")

    def predict_branch(self, ctx: FrameContext, mode: str = "eval", rng=None, weight_fn: WeightFn | None = None):
        self._check_frames(ctx.current)
        x = ag.tensor(ctx.current)
        ref = ag.tensor(ctx.reference)
        hidden: dict[str, Node] = {}
        y = self._encode("pred", [x, ref], hidden, weight_fn)
        code = self._latent("pred", y, mode, rng)
        feat = self._decode("pred", code.values, hidden, weight_fn)
        fused = self.layer("pred.fuse", [feat, ref], weight_fn)
        hidden["pred.fuse"] = fused
        delta = self.layer("pred.out", [fused], weight_fn)
        hidden["pred.out"] = delta
        return ag.add(ref, delta), code, hidden

    def residual_branch(self, residual: Node, mode: str = "eval", rng=None, weight_fn: WeightFn | None = None):
        self._check_frames(residual.value)
        hidden: dict[str, Node] = {}
        y = self._encode("res", [residual], hidden, weight_fn)
        code = self._latent("res", y, mode, rng)
        feat = self._decode("res", code.values, hidden, weight_fn)
        recon = self.layer("res.out", [feat], weight_fn)
        hidden["res.out"] = recon
        return recon, code, hidden

    def code_frame(self, ctx: FrameContext, mode: str = "eval", rng: np.random.Generator | None = None,
                   weight_fn: WeightFn | None = None) -> CodeResult:
        prediction, motion, hidden = self.predict_branch(ctx, mode, rng, weight_fn)
        residual = ag.sub(ag.tensor(ctx.current), prediction)
        res_hat, res_code, res_hidden = self.residual_branch(residual, mode, rng, weight_fn)
        hidden.update(res_hidden)
        xhat = ag.add(prediction, res_hat)
        if mode == "eval":
            xhat = Node(np.clip(xhat.value, 0.0, 1.0))
        return CodeResult(xhat, motion.rate_bits, res_code.rate_bits, hidden, motion, res_code, prediction)

    # -- bookkeeping ----------------------------------------------------

    def parameters(self) -> list[Node]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if v.shape != self.params[k].shape:
                raise ShapeError("load", v.shape, self.params[k].shape, detail=k)
            self.params[k].value = np.array(v, dtype=np.float32)

    def clone(self, requires_grad: bool = True) -> "ToyCodec":
        params = {k: Node(v.value.copy(), requires_grad=requires_grad, name=k) for k, v in self.params.items()}
        return ToyCodec(self.config, self.topology, params)
