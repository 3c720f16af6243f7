"""Declarative architecture specs and the DeepCaps model built from them."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from deepcaps.autodiff import Tensor
from deepcaps.capsules import flatten_caps
from deepcaps.decoder import DeconvDecoder, FCDecoder, mask_winner
from deepcaps.errors import ConfigError, ShapeError
from deepcaps.layers import CapsuleCell, ClassCaps, ConvCaps2D, Module, RoutedConvCaps, Stem
from deepcaps.routing import CHILDREN, PARENTS


@dataclass
class LayerSpec:
    types: int
    dim: int
    kernel: int = 3
    stride: int = 1


@dataclass
class CellSpec:
    layers: list
    skip_from: int | None = None
    routed: bool = False
    iterations: int = 3


@dataclass
class StemSpec:
    filters: int = 128
    kernel: int = 3


@dataclass
class ClassCapsSpec:
    classes: int = 10
    dim: int = 32
    iterations: int = 3
    sources: list = field(default_factory=lambda: [-1])
    share_types: bool = False


@dataclass
class DecoderSpec:
    kind: str = "fc"
    hidden: list = field(default_factory=lambda: [512, 1024])
    base: int = 4
    channels: list = field(default_factory=lambda: [64, 32, 16, 8])
    kernel: int = 3


@dataclass
class ArchSpec:
    input_shape: list
    cells: list
    class_caps: ClassCapsSpec = field(default_factory=ClassCapsSpec)
    stem: StemSpec | None = field(default_factory=StemSpec)
    decoder: DecoderSpec | None = field(default_factory=DecoderSpec)
    batchnorm: bool = True
    coupling_axis: str = PARENTS
    full_grad_routing: bool = False
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        try:
            cells = [CellSpec(layers=[LayerSpec(**ly) for ly in c["layers"]],
                              **{k: v for k, v in c.items() if k != "layers"}) for c in d.pop("cells")]
            cc = ClassCapsSpec(**d.pop("class_caps", {}))
            stem = d.pop("stem", {})
            dec = d.pop("decoder", {})
            return cls(cells=cells, class_caps=cc,
                       stem=None if stem is None else StemSpec(**stem),
                       decoder=None if dec is None else DecoderSpec(**dec), **d)
        except (TypeError, KeyError) as e:
            raise ConfigError(f"bad architecture spec: {e}") from None

    def to_dict(self) -> dict:
        # JSON round trip so tuples compare equal to lists read back from files
        return json.loads(json.dumps(asdict(self)))


class DeepCaps(Module):
    def __init__(self, spec: ArchSpec, seed: int = 0):
        self.spec = spec
        self.dtype = np.dtype(spec.dtype).type
        rng = np.random.default_rng(seed)
        h, w, c = spec.input_shape
        if spec.coupling_axis not in (PARENTS, CHILDREN):
            raise ConfigError(f"coupling_axis must be {PARENTS!r} or {CHILDREN!r}")
        if spec.stem is not None:
            self.stem = Stem(c, spec.stem.filters, spec.stem.kernel, rng, self.dtype, spec.batchnorm)
            shape = (h, w, spec.stem.filters, 1)
        else:
            self.stem = None
            shape = (h, w, c, 1)
        self.cells = []
        self.cell_shapes = []
        for ci, cs in enumerate(spec.cells):
            layers, shapes = [], []
            if not cs.layers:
                raise ShapeError(f"cell {ci} has no layers")
            for li, ls in enumerate(cs.layers):
                hh, ww, t, d = shape
                last = li == len(cs.layers) - 1
                if min(ls.types, ls.dim, ls.kernel, ls.stride) < 1:
                    raise ShapeError(f"cell {ci} layer {li}: invalid layer spec {ls}")
                if last and cs.routed:
                    layer = RoutedConvCaps(t, d, ls.types, ls.dim, ls.kernel, ls.stride, rng, self.dtype,
                                           cs.iterations, spec.coupling_axis, spec.full_grad_routing)
                else:
                    layer = ConvCaps2D(t, d, ls.types, ls.dim, ls.kernel, ls.stride, rng, self.dtype,
                                       use_bn=spec.batchnorm)
                shape = layer.output_shape(hh, ww)
                layers.append(layer)
                shapes.append(shape)
            if cs.skip_from is not None:
                if not 0 <= cs.skip_from < len(layers) - 1:
                    raise ShapeError(f"cell {ci}: skip_from={cs.skip_from} must index a non-final layer "
                                     f"(0..{len(layers) - 2})")
                if shapes[cs.skip_from] != shape:
                    raise ShapeError(f"cell {ci}: skip source layer {cs.skip_from} has shape "
                                     f"{shapes[cs.skip_from]}, cell output has shape {shape}")
            self.cells.append(CapsuleCell(layers, cs.skip_from))
            self.cell_shapes.append(shape)
        cc = spec.class_caps
        if not self.cells:
            raise ShapeError("architecture needs at least one capsule cell")
        try:
            src_shapes = [self.cell_shapes[i] for i in cc.sources]
        except IndexError:
            raise ShapeError(f"class_caps sources {cc.sources} out of range for {len(self.cells)} cells") from None
        dims = {s[3] for s in src_shapes}
        if len(dims) != 1:
            raise ShapeError(f"class_caps sources have different capsule dims {sorted(dims)}")
        in_dim = dims.pop()
        in_caps = sum(s[0] * s[1] * s[2] for s in src_shapes)
        types = [s[2] for s in src_shapes] if cc.share_types else None
        self.class_caps = ClassCaps(in_caps, in_dim, cc.classes, cc.dim, rng, self.dtype, cc.iterations,
                                    types, spec.coupling_axis, spec.full_grad_routing)
        if spec.decoder is None:
            self.decoder = None
        elif spec.decoder.kind == "fc":
            self.decoder = FCDecoder(cc.dim, (h, w, c), spec.decoder.hidden, rng, self.dtype)
        elif spec.decoder.kind == "deconv":
            self.decoder = DeconvDecoder(cc.dim, (h, w, c), spec.decoder.base, spec.decoder.channels,
                                         spec.decoder.kernel, rng, self.dtype)
        else:
            raise ConfigError(f"unknown decoder kind {spec.decoder.kind!r}")

    def capsule_grids(self, x: Tensor) -> list:
        """Outputs of every capsule cell."""
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError(f"model expects images of shape {tuple(self.spec.input_shape)}, got {x.shape[1:]}")
        h = self.stem(x) if self.stem is not None else x.reshape(*x.shape, 1)
        outs = []
        for cell in self.cells:
            h = cell(h)
            outs.append(h)
        return outs

    def class_capsules(self, x: Tensor) -> Tensor:
        grids = self.capsule_grids(x)
        srcs = [grids[i] for i in self.spec.class_caps.sources]
        if self.class_caps.types is None:
            return self.class_caps(srcs if len(srcs) > 1 else flatten_caps(srcs[0]))
        return self.class_caps(srcs)

    def forward(self, x: Tensor, labels=None):
        """Return ``(class capsules [N, C, d], reconstruction or None)``.

        The decoder input is masked by ``labels`` when given, otherwise by the
        longest capsule.
        """
        caps = self.class_capsules(x)
        recon = None
        if self.decoder is not None:
            recon = self.decoder(mask_winner(caps, labels).values)
        return caps, recon

    def layer_table(self):
        """Rows of ``(name, shape, parameter count)`` for every parameter tensor."""
        return [(name, tuple(p.shape), p.size) for name, p in self.named_parameters()]


def build_model(spec, seed: int = 0) -> DeepCaps:
    if isinstance(spec, dict):
        spec = ArchSpec.from_dict(spec)
    return DeepCaps(spec, seed)


def count_parameters(spec) -> int:
    return build_model(spec).num_parameters()
