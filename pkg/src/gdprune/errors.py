"""Exception types shared across the package."""

from __future__ import annotations


class GdPruneError(Exception):
    """Base class for all package errors."""


class ShapeError(GdPruneError, ValueError):
    """An op received operands whose dimensions it cannot combine."""

    def __init__(self, op: str, *dims, detail: str = ""):
        self.op = op
        self.dims = tuple(tuple(d) for d in dims)
        msg = f"{op}: incompatible shapes {', '.join(str(d) for d in self.dims)}" if dims else f"{op}: shape error"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericFault(GdPruneError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class GraphError(GdPruneError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, reuse, cycles)."""


class DegenerateNetworkError(GdPruneError, ValueError):
    """A layer lost every output channel."""

    def __init__(self, layer_id: str):
        self.layer_id = layer_id
        super().__init__(f"layer {layer_id!r} has zero kept channels; the network would be disconnected")


class ConfigError(GdPruneError, ValueError):
    """Invalid or unknown configuration entry."""


class FormatError(GdPruneError, ValueError):
    """A file on disk does not match its declared binary layout."""


class MissingLayerError(GdPruneError, KeyError):
    """A layer-id requested for distillation is absent from a feature map."""

    def __init__(self, layer_id: str, side: str):
        self.layer_id = layer_id
        self.side = side
        super().__init__(f"layer {layer_id!r} missing from {side} hidden states")


class BDError(GdPruneError, ValueError):
    """RD curves unsuitable for Bjontegaard integration."""
