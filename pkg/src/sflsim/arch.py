"""Declarative architecture specs, cut-layer splitting, and size arithmetic.

Architecture text format (one directive per line, ``#`` starts a comment):

    name toy
    input 1 16 16          # channels height width
    conv 8 k3 s2           # out-channels, kernel, stride; padding defaults k//2 (p0.. to override)
    relu
    avgpool k2 s2          # stride defaults to the kernel size
    flatten
    dense 32
    projector 64 32        # hidden width, embedding width (2-layer MLP head)

The backbone is everything between ``input`` and ``projector``.  Cut
indices are 1-based over backbone layers only: cut L gives the client
layers [1..L] and the server the rest plus the projector head, which is
never split.  The projector head appended to the server part is
dense(hidden) -> relu -> dense(out) -> l2norm, so server outputs are
unit-norm embeddings ready for the contrastive loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError

_BUILTIN_ARCHS = ("toy", "toy3")


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


@dataclass
class LayerSpec:
    kind: str
    args: dict
    line: int = 0

    def instantiate(self, in_shape: tuple[int, ...]) -> nn.Layer:
        if self.kind == "conv2d":
            if len(in_shape) != 3:
                raise ConfigError(f"conv needs (c, h, w) input, got {in_shape}")
            return nn.Conv2d(in_shape[0], self.args["out_channels"],
                             self.args["kernel"], self.args["stride"],
                             self.args.get("padding"))
        if self.kind == "dense":
            return nn.Dense(int(np.prod(in_shape)), self.args["out_features"])
        if self.kind == "relu":
            return nn.Relu()
        if self.kind == "avgpool2d":
            return nn.AvgPool2d(self.args["kernel"], self.args.get("stride"))
        if self.kind == "flatten":
            return nn.Flatten()
        if self.kind == "l2norm":
            return nn.L2Norm()
        if self.kind == "upsample2d":
            return nn.Upsample2d(self.args["factor"])
        if self.kind == "reshape":
            return nn.Reshape(self.args["shape"])
        raise ConfigError(f"unknown layer kind {self.kind!r}")


@dataclass
class ArchitectureSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    projector: tuple[int, int]  # (hidden width, embedding width)

    @property
    def backbone_depth(self) -> int:
        return len(self.layers)


def _parse_kv_token(token: str, line_no: int, source: str) -> tuple[str, int]:
    key = token[0]
    if key not in "ksp" or not token[1:].isdigit():
        raise ConfigError(f"bad token {token!r}", f"{source}:{line_no}")
    return key, int(token[1:])


def parse_architecture(text: str, source: str = "<arch>") -> ArchitectureSpec:
    """Parse the plain-text format; errors carry ``source:line`` positions."""
    name = "arch"
    input_shape: tuple[int, int, int] | None = None
    layers: list[LayerSpec] = []
    projector: tuple[int, int] | None = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head, rest = tokens[0], tokens[1:]
        where = f"{source}:{line_no}"
        if head == "name":
            if len(rest) != 1:
                raise ConfigError("name takes one identifier", where)
            name = rest[0]
        elif head == "input":
            if len(rest) != 3 or not all(t.isdigit() for t in rest):
                raise ConfigError("input takes: channels height width", where)
            input_shape = (int(rest[0]), int(rest[1]), int(rest[2]))
        elif head == "projector":
            if len(rest) != 2 or not all(t.isdigit() for t in rest):
                raise ConfigError("projector takes: hidden_width out_width", where)
            projector = (int(rest[0]), int(rest[1]))
        elif head == "conv":
            if not rest or not rest[0].isdigit():
                raise ConfigError("conv takes: out_channels k<k> [s<s>] [p<p>]", where)
            args = {"out_channels": int(rest[0]), "kernel": 3, "stride": 1}
            for token in rest[1:]:
                key, value = _parse_kv_token(token, line_no, source)
                args[{"k": "kernel", "s": "stride", "p": "padding"}[key]] = value
            layers.append(LayerSpec("conv2d", args, line_no))
        elif head == "avgpool":
            args = {"kernel": 2}
            for token in rest:
                key, value = _parse_kv_token(token, line_no, source)
                if key == "p":
                    raise ConfigError("avgpool has no padding", where)
                args[{"k": "kernel", "s": "stride"}[key]] = value
            layers.append(LayerSpec("avgpool2d", args, line_no))
        elif head == "dense":
            if len(rest) != 1 or not rest[0].isdigit():
                raise ConfigError("dense takes: out_features", where)
            layers.append(LayerSpec("dense", {"out_features": int(rest[0])}, line_no))
        elif head in ("relu", "flatten", "l2norm"):
            if rest:
                raise ConfigError(f"{head} takes no arguments", where)
            layers.append(LayerSpec(head if head != "relu" else "relu", {}, line_no))
        else:
            raise ConfigError(f"unknown directive {head!r}", where)

    if input_shape is None:
        raise ConfigError("missing 'input' directive", source)
    if not layers:
        raise ConfigError("architecture has no backbone layers", source)
    if projector is None:
        raise ConfigError("missing 'projector' directive", source)
    spec = ArchitectureSpec(name, input_shape, layers, projector)
    infer_backbone_shapes(spec)  # validate eagerly
    return spec


def load_architecture(path: str) -> ArchitectureSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_architecture(fh.read(), source=path)


def load_builtin(name: str) -> ArchitectureSpec:
    from importlib import resources

    if name not in _BUILTIN_ARCHS:
        raise ConfigError(f"unknown builtin architecture {name!r}; have {_BUILTIN_ARCHS}")
    text = resources.files("sflsim").joinpath(f"archs/{name}.arch").read_text()
    return parse_architecture(text, source=f"builtin:{name}")


# --------------------------------------------------------------------------
# Shape inference and building
# --------------------------------------------------------------------------


def infer_backbone_shapes(spec: ArchitectureSpec) -> list[tuple[int, ...]]:
    """Output shape of every backbone layer, validating the whole chain."""
    shapes = []
    shape: tuple[int, ...] = spec.input_shape
    for idx, lspec in enumerate(spec.layers):
        try:
            layer = lspec.instantiate(shape)
            shape = layer.out_shape(shape)
        except (ConfigError, nn.ShapeError) as exc:
            raise ConfigError(
                f"backbone layer {idx + 1} ({lspec.kind}): {exc}",
                f"{spec.name}:{lspec.line}" if lspec.line else spec.name,
            ) from exc
        shapes.append(shape)
    return shapes


def _init_layer(layer: nn.Layer, rng: np.random.Generator) -> None:
    """Fan-in-scaled uniform init, the same rule for every parametric kind."""
    if isinstance(layer, nn.Dense):
        fan_in = layer.in_features
    elif isinstance(layer, nn.Conv2d):
        fan_in = layer.in_channels * layer.kernel_size ** 2
    else:
        return
    limit = 1.0 / np.sqrt(fan_in)
    for _, p in layer.param_items():
        p[:] = rng.uniform(-limit, limit, size=p.shape).astype(nn.DTYPE)


def build_stack(layer_specs: list[LayerSpec], input_shape: tuple[int, ...],
                rng: np.random.Generator) -> list[nn.Layer]:
    stack: list[nn.Layer] = []
    shape = tuple(input_shape)
    for lspec in layer_specs:
        layer = lspec.instantiate(shape)
        shape = layer.out_shape(shape)
        _init_layer(layer, rng)
        stack.append(layer)
    return stack


@dataclass
class BuiltModel:
    spec: ArchitectureSpec
    backbone: list[nn.Layer]
    head: list[nn.Layer]  # projector MLP + l2norm, appended server-side
    backbone_shapes: list[tuple[int, ...]] = field(default_factory=list)

    def full_stack(self) -> list[nn.Layer]:
        return self.backbone + self.head


def build(spec: ArchitectureSpec, seed: int) -> BuiltModel:
    """Initialize all parameters from one seed.

    Every client copy must be cloned from the same build so all parties
    start from identical parameters.
    """
    shapes = infer_backbone_shapes(spec)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA5C1]))
    backbone = build_stack(spec.layers, spec.input_shape, rng)
    feat_width = int(np.prod(shapes[-1]))
    hidden, out = spec.projector
    head_specs = [
        LayerSpec("dense", {"out_features": hidden}),
        LayerSpec("relu", {}),
        LayerSpec("dense", {"out_features": out}),
        LayerSpec("l2norm", {}),
    ]
    head = build_stack(head_specs, (feat_width,), rng)
    return BuiltModel(spec, backbone, head, shapes)


# --------------------------------------------------------------------------
# Splitting and size arithmetic
# --------------------------------------------------------------------------


@dataclass
class SplitArchitecture:
    spec: ArchitectureSpec
    cut_layer: int
    client_part: list[nn.Layer]
    server_part: list[nn.Layer]
    server_backbone_len: int  # leading server_part layers that are backbone
    boundary_shape: tuple[int, ...]


def valid_cut_range(spec: ArchitectureSpec) -> tuple[int, int]:
    return (1, spec.backbone_depth)


def split(built: BuiltModel, cut_layer: int) -> SplitArchitecture:
    """Divide the backbone at a 1-based cut; the projector head stays server-side."""
    lo, hi = valid_cut_range(built.spec)
    if not (lo <= cut_layer <= hi):
        raise ConfigError(
            f"cut_layer {cut_layer} out of range; valid cuts are {lo}..{hi}"
        )
    client = built.backbone[:cut_layer]
    server = built.backbone[cut_layer:] + built.head
    return SplitArchitecture(
        spec=built.spec,
        cut_layer=cut_layer,
        client_part=client,
        server_part=server,
        server_backbone_len=len(built.backbone) - cut_layer,
        boundary_shape=built.backbone_shapes[cut_layer - 1],
    )


def activation_size(spec: ArchitectureSpec, cut_layer: int, batch: int) -> int:
    """Element count crossing the split boundary for one batch."""
    shapes = infer_backbone_shapes(spec)
    lo, hi = valid_cut_range(spec)
    if not (lo <= cut_layer <= hi):
        raise ConfigError(f"cut_layer {cut_layer} out of range; valid cuts are {lo}..{hi}")
    return int(batch) * int(np.prod(shapes[cut_layer - 1]))


def param_count(part: list[nn.Layer]) -> int:
    return nn.param_count(part)


# --------------------------------------------------------------------------
# Parameter sets
# --------------------------------------------------------------------------


class ParamSet:
    """Ordered, named view over the parameter arrays of a layer stack."""

    def __init__(self, names: list[str], arrays: list[np.ndarray]):
        if len(names) != len(arrays):
            raise ConfigError("ParamSet: names/arrays length mismatch")
        self.names = list(names)
        self.arrays = list(arrays)

    @classmethod
    def from_stack(cls, stack: list[nn.Layer]) -> "ParamSet":
        named = nn.named_params(stack)
        return cls([n for n, _ in named], [p for _, p in named])

    @property
    def dim(self) -> int:
        return sum(p.size for p in self.arrays)

    def flatten(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0, dtype=nn.DTYPE)
        return np.concatenate([p.ravel() for p in self.arrays])

    def load_flat(self, vec: np.ndarray) -> None:
        if vec.size != self.dim:
            raise ConfigError(f"flat vector has {vec.size} elements, expected {self.dim}")
        offset = 0
        for p in self.arrays:
            p[:] = vec[offset : offset + p.size].reshape(p.shape).astype(nn.DTYPE)
            offset += p.size

    def copy_values(self) -> list[np.ndarray]:
        return [p.copy() for p in self.arrays]

    def set_values(self, values: list[np.ndarray]) -> None:
        if len(values) != len(self.arrays):
            raise ConfigError("ParamSet: value list length mismatch")
        for p, v in zip(self.arrays, values):
            if p.shape != v.shape:
                raise ConfigError(f"ParamSet: shape mismatch {p.shape} vs {v.shape}")
            np.copyto(p, v)

    def congruent_with(self, other: "ParamSet") -> bool:
        return self.names == other.names and all(
            a.shape == b.shape for a, b in zip(self.arrays, other.arrays)
        )


def mean_values(sets: list[ParamSet]) -> list[np.ndarray]:
    """Uniform per-array average across congruent parameter sets."""
    if not sets:
        raise ConfigError("mean over empty parameter set list")
    first = sets[0]
    for other in sets[1:]:
        if not first.congruent_with(other):
            raise ConfigError("parameter sets are not structurally congruent")
    out = []
    for arrays in zip(*(s.arrays for s in sets)):
        acc = np.zeros_like(arrays[0], dtype=np.float64)
        for a in arrays:
            acc += a
        out.append((acc / len(arrays)).astype(nn.DTYPE))
    return out
