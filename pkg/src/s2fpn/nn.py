"""Differentiable layers on mesh signals with hand-written adjoints.

Every layer caches what its reverse pass needs during ``forward`` and
releases the cache in ``backward`` (calling ``backward`` twice, or before any
forward, raises :class:`~s2fpn.errors.TapeError`).  Parameter gradients
accumulate into per-layer buffers until ``zero_grad``.

Layers operate on vertex-major ``(n_vertices, batch, channels)`` float
arrays: with the vertex axis leading, a sparse operator application is a
single CSR-times-dense product and a 1x1 convolution is a single GEMM, with
no transpose copies on the hot path.  The model module converts from the
public ``(batch, channels, n_vertices)`` signal layout at its boundary.
All math is float64 by default; pass ``dtype=np.float32`` for 32-bit
execution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ShapeError, TapeError
from .icomesh import IcoMesh, graph_distances
from .sphops import SparseOperator


@dataclass(frozen=True)
class LevelOps:
    """The three differential operators bound to one mesh level."""

    gx: SparseOperator
    gy: SparseOperator
    lap: SparseOperator

    @property
    def n_vertices(self) -> int:
        return self.gx.rows

    @cached_property
    def branch_scales(self) -> np.ndarray:
        """Root-mean-square row magnitude of [identity, gx, gy, lap].

        The derivative operators grow like 1/h and 1/h^2 with mesh
        refinement; initialization divides each coefficient group by its
        operator's scale so all four branch responses start at comparable
        magnitude.
        """
        def rms(op: SparseOperator) -> float:
            return float(np.sqrt(np.square(op.values).sum() / op.rows))

        return np.array([1.0, rms(self.gx), rms(self.gy), rms(self.lap)])

    def normalized(self) -> "LevelOps":
        """Copy with each operator divided by its RMS row magnitude.

        A pure reparameterization of the convolution (coefficients absorb
        the scale) that equalizes loss curvature across the four branches;
        without it the Laplacian branch's curvature is larger by the squared
        operator magnitude and first-order optimizers oscillate there,
        burying the signal under high-frequency noise.
        """
        scales = np.maximum(self.branch_scales, 1.0)

        def rescale(op: SparseOperator, s: float) -> SparseOperator:
            return SparseOperator((op.matrix * (1.0 / s)).tocsr())

        return LevelOps(gx=rescale(self.gx, scales[1]),
                        gy=rescale(self.gy, scales[2]),
                        lap=rescale(self.lap, scales[3]))

    def astype(self, dtype) -> "LevelOps":
        return LevelOps(gx=self.gx.astype(dtype), gy=self.gy.astype(dtype),
                        lap=self.lap.astype(dtype))


def _apply_vf(op: SparseOperator, x: np.ndarray) -> np.ndarray:
    """Apply a sparse operator along the leading (vertex) axis."""
    lead = x.shape
    out = op.matrix @ x.reshape(lead[0], -1)
    return out.reshape((op.rows,) + lead[1:])


class Layer:
    """Base class: parameter registry plus the forward/backward contract."""

    def parameters(self) -> dict[str, np.ndarray]:
        return {}

    def gradients(self) -> dict[str, np.ndarray]:
        return {}

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def named_parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.parameters().items():
            out[prefix + name] = arr
        for child_name, child in self.children():
            out.update(child.named_parameters(prefix + child_name + "."))
        return out

    def named_gradients(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.gradients().items():
            out[prefix + name] = arr
        for child_name, child in self.children():
            out.update(child.named_gradients(prefix + child_name + "."))
        return out

    def zero_grad(self) -> None:
        for grad in self.gradients().values():
            grad[...] = 0.0
        for _, child in self.children():
            child.zero_grad()

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise TapeError(f"{type(self).__name__}.backward without a "
                            "matching forward (stale tape)")
        self._cache = None
        return cache


def _check_channels(x: np.ndarray, expected: int, who: str) -> None:
    if x.ndim != 3 or x.shape[2] != expected:
        raise ShapeError(f"{who} expects (n_v, batch, {expected}) input, "
                         f"got shape {tuple(x.shape)}")


class MeshConv(Layer):
    """Convolution parameterized by the fixed PDO set {I, d/dx, d/dy, Lap}.

    Output channel ``o`` mixes, per input channel ``i``, the signal itself and
    its three derivative fields with learned coefficients ``theta[o, i, :]``
    plus a per-channel bias: ``4 * C_in * C_out + C_out`` parameters.
    """

    def __init__(self, in_channels: int, out_channels: int, ops: LevelOps,
                 rng: np.random.Generator, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ops = ops
        bound = 1.0 / math.sqrt(4.0 * in_channels)
        self.theta = rng.uniform(-bound, bound,
                                 (out_channels, in_channels, 4)).astype(dtype)
        self.theta /= np.maximum(ops.branch_scales, 1.0).astype(dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.grad_theta = np.zeros_like(self.theta)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def parameters(self):
        return {"theta": self.theta, "bias": self.bias}

    def gradients(self):
        return {"theta": self.grad_theta, "bias": self.grad_bias}

    def _theta2(self) -> np.ndarray:
        # (4 * C_in, C_out) with operator-major rows, matching the cache
        return self.theta.transpose(2, 1, 0).reshape(4 * self.in_channels,
                                                     self.out_channels)

    def forward(self, x, training=False):
        _check_channels(x, self.in_channels, "MeshConv")
        if x.shape[0] != self.ops.n_vertices:
            raise ShapeError(f"MeshConv bound to level with "
                             f"{self.ops.n_vertices} vertices, signal has "
                             f"{x.shape[0]}")
        n_v, batch, c_in = x.shape
        work = np.empty((n_v, batch, 4, c_in), dtype=x.dtype)
        work[:, :, 0, :] = x
        work[:, :, 1, :] = _apply_vf(self.ops.gx, x)
        work[:, :, 2, :] = _apply_vf(self.ops.gy, x)
        work[:, :, 3, :] = _apply_vf(self.ops.lap, x)
        flat = work.reshape(n_v * batch, 4 * c_in)
        self._cache = flat
        y = flat @ self._theta2()
        y += self.bias
        return y.reshape(n_v, batch, self.out_channels)

    def backward(self, grad_out):
        flat = self._take_cache()
        n_v, batch, c_out = grad_out.shape
        g2 = grad_out.reshape(n_v * batch, c_out)
        gt = flat.T @ g2  # (4 * C_in, C_out)
        self.grad_theta += gt.reshape(4, self.in_channels,
                                      c_out).transpose(2, 1, 0)
        self.grad_bias += g2.sum(axis=0)
        # one contiguous (n_v, batch, C_in) product per operator branch
        dx = (g2 @ self.theta[:, :, 0]).reshape(n_v, batch, self.in_channels)
        for k, op in ((1, self.ops.gx), (2, self.ops.gy), (3, self.ops.lap)):
            branch = (g2 @ self.theta[:, :, k]).reshape(n_v, batch,
                                                        self.in_channels)
            dx += _apply_vf(op.transpose, branch)
        return dx


class Conv1x1(Layer):
    """Per-vertex linear channel mixing."""

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        bound = 1.0 / math.sqrt(in_channels)
        self.weight = rng.uniform(-bound, bound,
                                  (out_channels, in_channels)).astype(dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def gradients(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def forward(self, x, training=False):
        _check_channels(x, self.in_channels, "Conv1x1")
        self._cache = x
        shape = x.shape
        y = x.reshape(-1, self.in_channels) @ self.weight.T
        y += self.bias
        return y.reshape(shape[0], shape[1], self.out_channels)

    def backward(self, grad_out):
        x = self._take_cache()
        g2 = grad_out.reshape(-1, self.out_channels)
        x2 = x.reshape(-1, self.in_channels)
        self.grad_weight += g2.T @ x2
        self.grad_bias += g2.sum(axis=0)
        return (g2 @ self.weight).reshape(x.shape)


class BatchNorm(Layer):
    """Per-channel normalization over batch and vertices jointly.

    Training mode normalizes with the biased batch variance and folds the
    batch statistics into running estimates with
    ``running = (1 - momentum) * running + momentum * batch``; inference mode
    normalizes with the running estimates.  ``bypass`` turns the layer into
    an identity (used by receptive-field measurements on the linearized
    network).
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float64):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.scale = np.ones(channels, dtype=dtype)
        self.shift = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.grad_scale = np.zeros_like(self.scale)
        self.grad_shift = np.zeros_like(self.shift)
        self.bypass = False
        self._cache = None

    def parameters(self):
        return {"scale": self.scale, "shift": self.shift}

    def gradients(self):
        return {"scale": self.grad_scale, "shift": self.grad_shift}

    def forward(self, x, training=False):
        if self.bypass:
            self._cache = ("bypass",)
            return x
        _check_channels(x, self.channels, "BatchNorm")
        if x.shape[1] == 0:
            raise ShapeError("BatchNorm on an empty batch")
        if training:
            mean = x.mean(axis=(0, 1))
            var = x.var(axis=(0, 1))
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mean
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        # y = scale * (x - mean) * inv_std + shift, folded to one a*x + b pass
        a = self.scale * inv_std
        self._cache = ("norm", x, mean, inv_std, training)
        return x * a + (self.shift - mean * a)

    def backward(self, grad_out):
        cache = self._take_cache()
        if cache[0] == "bypass":
            return grad_out
        _, x, mean, inv_std, training = cache
        xhat = (x - mean) * inv_std
        sum_gx = (grad_out * xhat).sum(axis=(0, 1))
        sum_g = grad_out.sum(axis=(0, 1))
        self.grad_scale += sum_gx
        self.grad_shift += sum_g
        if not training:
            return grad_out * (self.scale * inv_std)
        m = x.shape[0] * x.shape[1]
        # batch statistics depend on x: subtract the projections onto the
        # constant and xhat directions before rescaling
        coef = self.scale * inv_std
        return (grad_out - sum_g / m - xhat * (sum_gx / m)) * coef


class ReLU(Layer):
    """Elementwise ``max(0, x)``; ``bypass`` makes it the identity."""

    def __init__(self):
        self.bypass = False
        self._cache = None

    def forward(self, x, training=False):
        if self.bypass:
            self._cache = ("bypass",)
            return x
        y = np.maximum(x, 0.0)
        self._cache = ("relu", y)
        return y

    def backward(self, grad_out):
        cache = self._take_cache()
        if cache[0] == "bypass":
            return grad_out
        return np.where(cache[1] > 0, grad_out, 0.0)


class Resample(Layer):
    """Stateless level transition; the adjoint is the transposed operator."""

    def __init__(self, op: SparseOperator):
        self.op = op
        self._cache = None

    def forward(self, x, training=False):
        self._cache = True
        return _apply_vf(self.op, x)

    def backward(self, grad_out):
        self._take_cache()
        return _apply_vf(self.op.transpose, grad_out)


class ResBlock(Layer):
    """Residual block: MeshConv between two 1x1 convolutions.

    Main path 1x1 -> BN -> ReLU -> MeshConv -> BN -> ReLU -> 1x1 -> BN; the
    skip is the identity when channel counts match and a projected
    1x1 -> BN otherwise; the output activation is ReLU(main + skip).
    """

    def __init__(self, in_channels: int, out_channels: int, mid_channels: int,
                 ops: LevelOps, rng: np.random.Generator, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.mid_channels = mid_channels
        self.conv_in = Conv1x1(in_channels, mid_channels, rng, dtype)
        self.bn_in = BatchNorm(mid_channels, dtype=dtype)
        self.act_in = ReLU()
        self.conv_mesh = MeshConv(mid_channels, mid_channels, ops, rng, dtype)
        self.bn_mesh = BatchNorm(mid_channels, dtype=dtype)
        self.act_mesh = ReLU()
        self.conv_out = Conv1x1(mid_channels, out_channels, rng, dtype)
        self.bn_out = BatchNorm(out_channels, dtype=dtype)
        if in_channels != out_channels:
            self.conv_skip = Conv1x1(in_channels, out_channels, rng, dtype)
            self.bn_skip = BatchNorm(out_channels, dtype=dtype)
        else:
            self.conv_skip = None
            self.bn_skip = None
        self.act_out = ReLU()

    def children(self):
        out = [("conv_in", self.conv_in), ("bn_in", self.bn_in),
               ("act_in", self.act_in),
               ("conv_mesh", self.conv_mesh), ("bn_mesh", self.bn_mesh),
               ("act_mesh", self.act_mesh),
               ("conv_out", self.conv_out), ("bn_out", self.bn_out),
               ("act_out", self.act_out)]
        if self.conv_skip is not None:
            out += [("conv_skip", self.conv_skip), ("bn_skip", self.bn_skip)]
        return out

    def forward(self, x, training=False):
        h = self.act_in.forward(self.bn_in.forward(
            self.conv_in.forward(x), training))
        h = self.act_mesh.forward(self.bn_mesh.forward(
            self.conv_mesh.forward(h), training))
        h = self.bn_out.forward(self.conv_out.forward(h), training)
        if self.conv_skip is not None:
            skip = self.bn_skip.forward(self.conv_skip.forward(x), training)
        else:
            skip = x
        return self.act_out.forward(h + skip)

    def backward(self, grad_out):
        g = self.act_out.backward(grad_out)
        gh = self.conv_out.backward(self.bn_out.backward(g))
        gh = self.bn_mesh.backward(self.act_mesh.backward(gh))
        gh = self.conv_mesh.backward(gh)
        gh = self.bn_in.backward(self.act_in.backward(gh))
        gx = self.conv_in.backward(gh)
        if self.conv_skip is not None:
            gx = gx + self.conv_skip.backward(self.bn_skip.backward(g))
        else:
            gx = gx + g
        return gx


class DownBlock(Layer):
    """Residual block combined with a one-level down transition.

    ``swapped=True`` convolves on the fine mesh and then pools;
    ``swapped=False`` pools first and convolves on the coarse mesh.  The
    choice, together with the pooling mode, sets how many fine-mesh rings a
    coarse output vertex sees.
    """

    def __init__(self, in_channels: int, out_channels: int, mid_channels: int,
                 fine_ops: LevelOps, coarse_ops: LevelOps,
                 down_op: SparseOperator, swapped: bool,
                 rng: np.random.Generator, dtype=np.float64):
        self.swapped = swapped
        self.down = Resample(down_op)
        ops = fine_ops if swapped else coarse_ops
        self.block = ResBlock(in_channels, out_channels, mid_channels, ops,
                              rng, dtype)

    def children(self):
        return [("block", self.block)]

    def forward(self, x, training=False):
        if self.swapped:
            return self.down.forward(self.block.forward(x, training))
        return self.block.forward(self.down.forward(x), training)

    def backward(self, grad_out):
        if self.swapped:
            return self.block.backward(self.down.backward(grad_out))
        return self.down.backward(self.block.backward(grad_out))


def set_linear_bypass(layer: Layer, bypass: bool = True) -> None:
    """Toggle every BatchNorm/ReLU under ``layer`` into identity mode."""
    if isinstance(layer, (BatchNorm, ReLU)):
        layer.bypass = bypass
    for _, child in layer.children():
        set_linear_bypass(child, bypass)


def receptive_ring(block: Layer, mesh_fine: IcoMesh, vertex: int,
                   in_channels: int, seed: int = 0) -> int:
    """Fine-mesh ring count of a block's dependence at one output vertex.

    Runs the block with BatchNorm and ReLU bypassed (ring support is a claim
    about the linear dependency pattern), pushes a one-hot cotangent through
    the adjoint, and reports the largest fine-graph distance at which the
    input gradient is nonzero.  The output vertex must be a shared (coarse)
    vertex so it has the same index on both meshes.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((mesh_fine.n_vertices, 1, in_channels))
    set_linear_bypass(block, True)
    try:
        y = block.forward(x, training=False)
        grad = np.zeros_like(y)
        grad[vertex, 0, 0] = 1.0
        block.zero_grad()
        gin = block.backward(grad)
    finally:
        set_linear_bypass(block, False)
    mag = np.abs(gin[:, 0, :]).max(axis=1)
    support = mag > 1e-12 * mag.max()
    dist = graph_distances(mesh_fine, vertex)
    return int(dist[support].max())
