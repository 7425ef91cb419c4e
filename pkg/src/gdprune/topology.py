"""Static description of a convolutional network as a DAG of layers.

Pruning, compaction and MAC counting only need to know which layer feeds
which, how many channels flow along each edge and the spatial geometry of
every conv.  Layer inputs are a list of sources concatenated on the channel
axis; a source is either another layer-id or an external input name.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Iterable


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str  # "conv" or "deconv"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    output_padding: int = 0
    sources: tuple[str, ...] = ()
    activation: str = "none"  # "none" or "lrelu"
    decoder: bool = False
    prunable: bool = False

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        if self.kind == "deconv":
            return (h - 1) * s - 2 * p + k + self.output_padding, (w - 1) * s - 2 * p + k + self.output_padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sources"] = list(self.sources)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["sources"] = tuple(d.get("sources", ()))
        return cls(**d)


@dataclass(frozen=True)
class Topology:
    layers: tuple[LayerSpec, ...]
    # (external input name, channels); externals share the frame resolution
    externals: tuple[tuple[str, int], ...]

    def __post_init__(self):
        ids = [l.id for l in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError("layer ids must be unique")
        known = {name for name, _ in self.externals}
        for layer in self.layers:
            for src in layer.sources:
                if src not in known:
                    raise ValueError(f"layer {layer.id!r} reads {src!r} before it is defined")
            if sum(self.source_channels(s) for s in layer.sources) != layer.in_channels:
                raise ValueError(f"layer {layer.id!r}: source channels do not sum to in_channels")
            known.add(layer.id)

    def __getitem__(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    @property
    def ids(self) -> list[str]:
        return [l.id for l in self.layers]

    def prunable_ids(self) -> list[str]:
        return [l.id for l in self.layers if l.prunable]

    def decoder_ids(self) -> list[str]:
        return [l.id for l in self.layers if l.decoder]

    def external_channels(self, name: str) -> int | None:
        for ext, ch in self.externals:
            if ext == name:
                return ch
        return None

    def source_channels(self, src: str) -> int:
        ch = self.external_channels(src)
        if ch is not None:
            return ch
        return self[src].out_channels

    def consumers(self, layer_id: str) -> list[str]:
        return [l.id for l in self.layers if layer_id in l.sources]

    def with_layers(self, layers: Iterable[LayerSpec]) -> "Topology":
        return replace(self, layers=tuple(layers))

    def spatial_sizes(self, height: int, width: int, external_sizes: dict[str, tuple[int, int]] | None = None
                      ) -> dict[str, tuple[tuple[int, int], tuple[int, int]]]:
        """Map layer-id -> ((in_h, in_w), (out_h, out_w)) for a frame of the given size."""
        sizes: dict[str, tuple[int, int]] = {}
        for name, _ in self.externals:
            sizes[name] = (external_sizes or {}).get(name, (height, width))
        result = {}
        for layer in self.layers:
            in_sizes = {sizes[s] for s in layer.sources}
            if len(in_sizes) != 1:
                raise ValueError(f"layer {layer.id!r} concatenates sources of different spatial size {in_sizes}")
            hin, win = in_sizes.pop()
            out = layer.output_size(hin, win)
            sizes[layer.id] = out
            result[layer.id] = ((hin, win), out)
        return result

    def to_list(self) -> list[dict]:
        return [l.to_dict() for l in self.layers]
