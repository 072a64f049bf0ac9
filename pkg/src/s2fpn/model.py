"""Spherical feature pyramid networks over icosahedral meshes.

The network has three stages.  The encoder starts from the finest mesh with
a stem mesh convolution and halves the mesh level per residual down block
while doubling channels (capped).  The pyramid adds a fixed-width top-down
pathway: the coarsest encoder map enters through a 1x1 lateral, is repeatedly
upsampled and merged (by addition) with the lateral of the next finer level,
and every merged map passes through its own mesh convolution.  The head
carries each pyramid map back to the finest level through repeated
[upsample + mesh convolution] stages at a second fixed width, sums the
resulting maps and applies a final mesh convolution to produce per-vertex
class logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, ShapeError
from .icomesh import IcoMesh, build_mesh, compute_geometry
from .nn import (BatchNorm, Conv1x1, DownBlock, Layer, LevelOps, MeshConv,
                 ReLU, Resample, _apply_vf as apply_vf)
from .resample import ResampleSpec, assemble_downsample, assemble_upsample
from .signal import MeshSignal
from .sphops import (SparseOperator, assemble_gradients, assemble_laplacian,
                     tangent_frames)


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``base_channels`` is the encoder width at the finest level; it doubles on
    every transition down to ``min_level`` and is capped at ``channel_cap``.
    ``width_divisor`` shrinks every learned width (encoder, pyramid, head) by
    a common factor for parameter-matched small variants.
    ``bottleneck_divisor`` sets the residual blocks' inner width as
    ``C_out // bottleneck_divisor``.  ``pyramid_conv`` toggles the per-level
    mesh convolution on merged pyramid maps.
    """

    min_level: int = 3
    max_level: int = 5
    in_channels: int = 4
    n_classes: int = 13
    base_channels: int = 32
    channel_cap: int = 512
    pyramid_channels: int = 256
    head_channels: int = 128
    resample: ResampleSpec = field(default_factory=ResampleSpec)
    width_divisor: int = 1
    bottleneck_divisor: int = 1
    pyramid_conv: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if not 0 <= self.min_level < self.max_level:
            raise ConfigError(f"need 0 <= min_level < max_level, got "
                              f"{self.min_level}..{self.max_level}")
        if self.in_channels < 1 or self.n_classes < 2:
            raise ConfigError("need at least 1 input channel and 2 classes")
        if self.width_divisor < 1 or self.bottleneck_divisor < 1:
            raise ConfigError("divisors must be >= 1")

    def encoder_channels(self, level: int) -> int:
        raw = min(self.base_channels * 2 ** (self.max_level - level),
                  self.channel_cap)
        return max(raw // self.width_divisor, 1)

    @property
    def pyramid_width(self) -> int:
        return max(self.pyramid_channels // self.width_divisor, 1)

    @property
    def head_width(self) -> int:
        return max(self.head_channels // self.width_divisor, 1)

    def mid_channels(self, out_channels: int) -> int:
        return max(out_channels // self.bottleneck_divisor, 1)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resample"] = asdict(self.resample)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        if isinstance(d.get("resample"), dict):
            d["resample"] = ResampleSpec(**d["resample"])
        return cls(**d)


def build_level_ops(mesh: IcoMesh) -> LevelOps:
    """Assemble the gradient pair and Laplacian bound to one mesh."""
    geometry = compute_geometry(mesh)
    frames = tangent_frames(mesh)
    gx, gy = assemble_gradients(mesh, geometry, frames)
    lap = assemble_laplacian(mesh, geometry)
    return LevelOps(gx=gx, gy=gy, lap=lap)


class _HeadStage(Layer):
    """One [upsample +] mesh-convolution stage of the segmentation head."""

    def __init__(self, conv, bn, act, up=None):
        self.up = up
        self.conv = conv
        self.bn = bn
        self.act = act

    def children(self):
        return [("conv", self.conv), ("bn", self.bn), ("act", self.act)]

    def forward(self, x, training=False):
        if self.up is not None:
            x = self.up.forward(x)
        return self.act.forward(self.bn.forward(self.conv.forward(x),
                                                training))

    def backward(self, grad_out):
        g = self.conv.backward(self.bn.backward(self.act.backward(grad_out)))
        if self.up is not None:
            g = self.up.backward(g)
        return g


class Model(Layer):
    """Built network: layers plus the per-level sparse operators they use."""

    def __init__(self, spec: ModelSpec, meshes: dict[int, IcoMesh],
                 seed: int = 0):
        lo, hi = spec.min_level, spec.max_level
        for level in range(lo, hi + 1):
            if level not in meshes:
                raise ConfigError(f"missing mesh for level {level}")
            if meshes[level].level != level:
                raise ConfigError(f"mesh under key {level} has level "
                                  f"{meshes[level].level}")
        self.spec = spec
        self.meshes = {l: meshes[l] for l in range(lo, hi + 1)}
        # bind RMS-normalized operator copies: same function class, but the
        # derivative branches train at the same step-size scale as identity
        self.ops = {l: build_level_ops(self.meshes[l]).normalized()
                    for l in self.meshes}
        # Transition operators are keyed by the finer level.
        self.down_ops = {l: assemble_downsample(self.meshes[l],
                                                spec.resample.down_mode)
                         for l in range(lo + 1, hi + 1)}
        self.up_ops = {l: assemble_upsample(self.meshes[l],
                                            spec.resample.up_mode)
                       for l in range(lo + 1, hi + 1)}
        if spec.np_dtype != np.float64:
            self.ops = {l: ops.astype(spec.np_dtype)
                        for l, ops in self.ops.items()}
            self.down_ops = {l: op.astype(spec.np_dtype)
                             for l, op in self.down_ops.items()}
            self.up_ops = {l: op.astype(spec.np_dtype)
                           for l, op in self.up_ops.items()}

        rng = np.random.default_rng(seed)
        dt = spec.np_dtype
        pw, hw = spec.pyramid_width, spec.head_width

        self.stem_conv = MeshConv(spec.in_channels, spec.encoder_channels(hi),
                                  self.ops[hi], rng, dt)
        self.stem_bn = BatchNorm(spec.encoder_channels(hi), dtype=dt)
        self.stem_act = ReLU()

        self.blocks = {}  # fine level -> DownBlock to (fine level - 1)
        for l in range(hi, lo, -1):
            c_in = spec.encoder_channels(l)
            c_out = spec.encoder_channels(l - 1)
            self.blocks[l] = DownBlock(
                c_in, c_out, spec.mid_channels(c_out),
                fine_ops=self.ops[l], coarse_ops=self.ops[l - 1],
                down_op=self.down_ops[l], swapped=spec.resample.swapped,
                rng=rng, dtype=dt)

        self.laterals = {l: Conv1x1(spec.encoder_channels(l), pw, rng, dt)
                         for l in range(lo, hi + 1)}
        self.merge_convs = {}
        if spec.pyramid_conv:
            for l in range(lo, hi + 1):
                self.merge_convs[l] = _HeadStage(
                    MeshConv(pw, pw, self.ops[l], rng, dt),
                    BatchNorm(pw, dtype=dt), ReLU())

        self.head_paths = {}
        for l in range(lo, hi + 1):
            stages = []
            if l == hi:
                stages.append(_HeadStage(MeshConv(pw, hw, self.ops[hi], rng,
                                                  dt),
                                         BatchNorm(hw, dtype=dt), ReLU()))
            else:
                for j in range(hi - l):
                    src = pw if j == 0 else hw
                    level = l + j + 1
                    stages.append(_HeadStage(
                        MeshConv(src, hw, self.ops[level], rng, dt),
                        BatchNorm(hw, dtype=dt), ReLU(),
                        up=Resample(self.up_ops[level])))
            self.head_paths[l] = stages

        self.final_conv = MeshConv(hw, spec.n_classes, self.ops[hi], rng, dt)

    # -- layer-tree plumbing -------------------------------------------------

    def children(self):
        out = [("stem_conv", self.stem_conv), ("stem_bn", self.stem_bn),
               ("stem_act", self.stem_act)]
        for l in sorted(self.blocks, reverse=True):
            out.append((f"down_{l}to{l - 1}", self.blocks[l]))
        for l in sorted(self.laterals):
            out.append((f"lateral_{l}", self.laterals[l]))
        for l in sorted(self.merge_convs):
            out.append((f"pyramid_{l}", self.merge_convs[l]))
        for l in sorted(self.head_paths):
            for j, stage in enumerate(self.head_paths[l]):
                out.append((f"head_{l}_{j}", stage))
        out.append(("final_conv", self.final_conv))
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"checkpoint missing parameters: {sorted(missing)[:4]} ...")
        for name, arr in params.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ConfigError(f"parameter {name} has shape {arr.shape}, "
                                  f"checkpoint has {src.shape}")
            arr[...] = src

    # -- forward / backward --------------------------------------------------

    def forward(self, x, training: bool = False):
        """Input at the finest level -> logits at the finest level.

        Accepts a ``MeshSignal`` or a raw ``(batch, channels, n_v)`` array
        and returns the same kind.
        """
        wrapped = isinstance(x, MeshSignal)
        values = x.values if wrapped else np.asarray(x)
        spec = self.spec
        lo, hi = spec.min_level, spec.max_level
        if wrapped and x.level != hi:
            raise ShapeError(f"model consumes level-{hi} signals, got level "
                             f"{x.level}")
        if values.ndim != 3 or values.shape[1] != spec.in_channels:
            raise ShapeError(f"expected (batch, {spec.in_channels}, n_v) "
                             f"input, got {tuple(values.shape)}")
        # layers run vertex-major: (n_v, batch, channels)
        values = np.ascontiguousarray(values.transpose(2, 0, 1),
                                      dtype=spec.np_dtype)

        feats = {}
        h = self.stem_act.forward(self.stem_bn.forward(
            self.stem_conv.forward(values), training))
        feats[hi] = h
        for l in range(hi, lo, -1):
            feats[l - 1] = self.blocks[l].forward(feats[l], training)

        merged = {lo: self.laterals[lo].forward(feats[lo])}
        for l in range(lo + 1, hi + 1):
            merged[l] = (apply_vf(self.up_ops[l], merged[l - 1])
                         + self.laterals[l].forward(feats[l]))
        pyramid = {}
        for l in range(lo, hi + 1):
            if spec.pyramid_conv:
                pyramid[l] = self.merge_convs[l].forward(merged[l], training)
            else:
                pyramid[l] = merged[l]

        head_sum = None
        for l in range(lo, hi + 1):
            h = pyramid[l]
            for stage in self.head_paths[l]:
                h = stage.forward(h, training)
            head_sum = h if head_sum is None else head_sum + h
        logits = self.final_conv.forward(head_sum)

        if training:
            self._debug_level_check(feats, merged)
        logits = np.ascontiguousarray(logits.transpose(1, 2, 0))
        return MeshSignal(level=hi, values=logits) if wrapped else logits

    def backward(self, grad_logits):
        """Adjoint of :meth:`forward`; returns the input gradient array
        in the public ``(batch, channels, n_v)`` layout."""
        if isinstance(grad_logits, MeshSignal):
            grad_logits = grad_logits.values
        spec = self.spec
        lo, hi = spec.min_level, spec.max_level
        grad_logits = np.ascontiguousarray(grad_logits.transpose(2, 0, 1))

        dsum = self.final_conv.backward(grad_logits)
        dpyramid = {}
        for l in range(lo, hi + 1):
            g = dsum
            for stage in reversed(self.head_paths[l]):
                g = stage.backward(g)
            dpyramid[l] = g

        dmerged = {}
        for l in range(lo, hi + 1):
            if spec.pyramid_conv:
                dmerged[l] = self.merge_convs[l].backward(dpyramid[l])
            else:
                dmerged[l] = dpyramid[l]

        dfeats = {}
        for l in range(hi, lo, -1):
            dfeats[l] = self.laterals[l].backward(dmerged[l])
            dmerged[l - 1] = (dmerged[l - 1]
                              + apply_vf(self.up_ops[l].transpose, dmerged[l]))
        dfeats[lo] = self.laterals[lo].backward(dmerged[lo])

        for l in range(lo, hi):
            grad = self.blocks[l + 1].backward(dfeats[l])
            dfeats[l + 1] = dfeats[l + 1] + grad

        g = self.stem_bn.backward(self.stem_act.backward(dfeats[hi]))
        dx = self.stem_conv.backward(g)
        return np.ascontiguousarray(dx.transpose(1, 2, 0))

    def _debug_level_check(self, feats, merged):
        from .icomesh import vertex_count

        for l, arr in feats.items():
            if arr.shape[0] != vertex_count(l):
                raise ShapeError(f"encoder level {l} produced "
                                 f"{arr.shape[0]} vertices")
        for l, arr in merged.items():
            if arr.shape[0] != vertex_count(l):
                raise ShapeError(f"pyramid level {l} produced "
                                 f"{arr.shape[0]} vertices")


def build_model(spec: ModelSpec, meshes: dict[int, IcoMesh] | None = None,
                seed: int = 0) -> Model:
    """Construct a model; meshes are built on demand when not supplied."""
    if meshes is None:
        meshes = {l: build_mesh(l)
                  for l in range(spec.min_level, spec.max_level + 1)}
    return Model(spec, meshes, seed=seed)


def parameter_count(model: Model) -> int:
    return model.parameter_count()
