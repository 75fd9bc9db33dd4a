"""Signed-distance and occupancy fields and the SDF-to-density map."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Array, FormatError, ShapeError
from .neural import (
    ConfigurationError,
    Layer,
    MlpWeights,
    PriorOracle,
    _sigmoid,
    active_features,
    mlp_backward,
    mlp_backward_tangent,
    mlp_eval,
    mlp_forward,
    mlp_forward_tangent,
)

SDF_WIDTHS = (273, 128, 32, 1)


def _as_points(X) -> Array:
    X = np.asarray(X)
    return X if X.dtype.kind == "f" else X.astype(np.float64)


def _tiebreak_dir(v: Array) -> Array:
    """Unit ``v``, or +x where ``v`` vanishes."""
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    fallback = np.zeros_like(v)
    fallback[..., 0] = 1.0
    return np.where(n > 0, v / np.where(n > 0, n, 1), fallback)


class SdfField:
    kind = "abstract"

    def eval(self, X: Array) -> Array:
        raise NotImplementedError

    def gradient(self, X: Array) -> Array:
        raise NotImplementedError


@dataclass
class Sphere(SdfField):
    radius: float = 1.0
    center: Sequence[float] = (0.0, 0.0, 0.0)
    kind = "sphere"

    def eval(self, X):
        X = _as_points(X)
        return np.linalg.norm(X - np.asarray(self.center, X.dtype), axis=-1) - X.dtype.type(self.radius)

    def gradient(self, X):
        X = _as_points(X)
        return _tiebreak_dir(X - np.asarray(self.center, X.dtype))


@dataclass
class Box(SdfField):
    half_extents: Sequence[float] = (1.0, 1.0, 1.0)
    center: Sequence[float] = (0.0, 0.0, 0.0)
    kind = "box"

    def eval(self, X):
        X = _as_points(X)
        q = np.abs(X - np.asarray(self.center, X.dtype)) - np.asarray(self.half_extents, X.dtype)
        return np.linalg.norm(np.maximum(q, 0), axis=-1) + np.minimum(q.max(axis=-1), 0)

    def gradient(self, X):
        X = _as_points(X)
        p = X - np.asarray(self.center, X.dtype)
        sign = np.where(p < 0, -1.0, 1.0).astype(X.dtype)
        q = np.abs(p) - np.asarray(self.half_extents, X.dtype)
        outside = np.maximum(q, 0)
        n_out = np.linalg.norm(outside, axis=-1, keepdims=True)
        # inside (or on a face): the face of largest q; argmax keeps x before y before z
        axis = np.argmax(q, axis=-1)
        inner = np.zeros_like(p)
        np.put_along_axis(inner, axis[..., None], 1.0, axis=-1)
        g = np.where(n_out > 0, outside / np.where(n_out > 0, n_out, 1), inner)
        return g * sign


@dataclass
class Capsule(SdfField):
    a: Sequence[float] = (0.0, -0.5, 0.0)
    b: Sequence[float] = (0.0, 0.5, 0.0)
    radius: float = 0.4
    kind = "capsule"

    def _offset(self, X):
        a = np.asarray(self.a, X.dtype)
        ba = np.asarray(self.b, X.dtype) - a
        pa = X - a
        h = np.clip((pa @ ba) / (ba @ ba), 0, 1)
        return pa - h[..., None] * ba

    def eval(self, X):
        X = _as_points(X)
        return np.linalg.norm(self._offset(X), axis=-1) - X.dtype.type(self.radius)

    def gradient(self, X):
        X = _as_points(X)
        return _tiebreak_dir(self._offset(X))


@dataclass
class Union(SdfField):
    """Minimum of several primitives (exact outside, a bound inside overlaps)."""

    children: list[SdfField] = field(default_factory=list)
    kind = "union"

    def __post_init__(self):
        if not self.children:
            raise ValueError("union needs at least one primitive")

    def eval(self, X):
        return np.min(np.stack([c.eval(X) for c in self.children]), axis=0)

    def gradient(self, X):
        X = _as_points(X)
        vals = np.stack([c.eval(X) for c in self.children])
        grads = np.stack([c.gradient(X) for c in self.children])
        idx = np.argmin(vals, axis=0)
        return np.take_along_axis(grads, idx[None, ..., None], axis=0)[0]


@dataclass
class Affine(SdfField):
    """``scale * s(X) + offset`` of another field (a test utility)."""

    base: SdfField
    scale: float = 1.0
    offset: float = 0.0
    kind = "affine"

    def eval(self, X):
        return self.scale * self.base.eval(X) + self.offset

    def gradient(self, X):
        return self.scale * self.base.gradient(X)


def geometric_init(rng: np.random.Generator, widths: Sequence[int] = SDF_WIDTHS, radius: float = 0.5,
                   n_position: int = 3) -> MlpWeights:
    """Weights for which the network starts close to ``|X| - radius``.

    Only the position entries of the first layer are non-zero, hidden layers
    use softplus with beta 100, the output is linear.
    """
    layers = []
    n = len(widths) - 1
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        if i == n - 1:
            w = rng.normal(math.sqrt(math.pi) / math.sqrt(n_in), 1e-4, (n_in, n_out))
            b = np.full(n_out, -radius)
            act = "none"
        else:
            w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(n_out), (n_in, n_out))
            if i == 0:
                w[n_position:] = 0.0
            b = np.zeros(n_out)
            act = "softplus100"
        layers.append(Layer(w, b, act))
    return MlpWeights(layers)


@dataclass
class NeuralSdf(SdfField):
    """``F_sdf(X, f(X))`` with input layout ``[X, f, zero spare]``.

    Padding entries of the input are always zero, so evaluation only
    multiplies the leading ``3 + oracle.active_dim`` rows of the first layer;
    the result is identical to running on the full padded vector.
    """

    weights: MlpWeights
    oracle: PriorOracle | None = None
    kind = "neural"

    def __post_init__(self):
        if self.weights.out_dim != 1:
            raise ShapeError("SDF network must have a scalar output")

    def _require_oracle(self, oracle):
        oracle = oracle if oracle is not None else self.oracle
        if oracle is None:
            raise ConfigurationError("neural SDF needs a prior oracle to supply features")
        if 3 + oracle.feature_dim > self.weights.in_dim:
            raise ShapeError(f"position + feature dim {3 + oracle.feature_dim} exceeds "
                             f"network input {self.weights.in_dim}")
        return oracle

    def _active(self, oracle) -> tuple[int, MlpWeights]:
        n = 3 + oracle.active_dim
        first = self.weights.layers[0]
        trunc = MlpWeights([Layer(first.weight[:n], first.bias, first.activation)] + self.weights.layers[1:])
        return n, trunc

    def _inputs(self, X, oracle):
        return np.concatenate([X, active_features(oracle, X)], axis=-1)

    def full_input(self, X, oracle=None) -> Array:
        """The padded network input (for tests and diagnostics)."""
        oracle = self._require_oracle(oracle)
        X = _as_points(X)
        u = self._inputs(X, oracle)
        pad = self.weights.in_dim - u.shape[-1]
        return np.concatenate([u, np.zeros(u.shape[:-1] + (pad,), u.dtype)], axis=-1)

    def eval(self, X, oracle=None):
        oracle = self._require_oracle(oracle)
        X = _as_points(X)
        _, net = self._active(oracle)
        return mlp_eval(net, self._inputs(X, oracle))[..., 0]

    def _input_tangent(self, X, oracle):
        """``d input / dX`` as ``(B, 3, n_active)``."""
        B = X.shape[0]
        jac = np.asarray(oracle.feature_jacobian(X), X.dtype).reshape(B, 3, -1)
        eye = np.broadcast_to(np.eye(3, dtype=X.dtype), (B, 3, 3))
        return np.concatenate([eye, jac], axis=-1)

    def gradient(self, X, oracle=None):
        oracle = self._require_oracle(oracle)
        X = _as_points(X)
        lead = X.shape[:-1]
        Xf = X.reshape(-1, 3)
        _, net = self._active(oracle)
        _, T, _ = mlp_forward_tangent(net, self._inputs(Xf, oracle), self._input_tangent(Xf, oracle))
        return T[:, :, 0].reshape(lead + (3,))

    # -- training support --------------------------------------------------

    def _pad_grads(self, grads, n):
        dW0, db0 = grads[0]
        full = np.zeros_like(self.weights.layers[0].weight, dtype=np.float64)
        full[:n] = dW0
        return [(full, db0)] + list(grads[1:])

    def value_and_param_grad(self, X, cotangent, oracle=None):
        """Values and the weight gradient of ``sum(cotangent * s(X))``."""
        oracle = self._require_oracle(oracle)
        X = _as_points(X).reshape(-1, 3)
        n, net = self._active(oracle)
        out, tape = mlp_forward(net, self._inputs(X, oracle))
        cot = np.asarray(cotangent(out[:, 0]) if callable(cotangent) else cotangent).reshape(-1, 1)
        _, grads = mlp_backward(net, tape, cot, input_grad=False)
        return out[:, 0], self._pad_grads(grads, n)

    def gradient_and_param_grad(self, X, grad_cotangent, oracle=None):
        """Spatial gradients ``g`` and the weight gradient of ``L(g)``.

        ``grad_cotangent(g)`` returns ``dL/dg`` with the shape of ``g``.
        """
        oracle = self._require_oracle(oracle)
        X = _as_points(X).reshape(-1, 3)
        n, net = self._active(oracle)
        _, T, tape = mlp_forward_tangent(net, self._inputs(X, oracle), self._input_tangent(X, oracle))
        g = T[:, :, 0]
        gbar = np.asarray(grad_cotangent(g), g.dtype)
        _, grads = mlp_backward_tangent(net, tape, None, gbar[:, :, None])
        return g, self._pad_grads(grads, n)


def sdf_eval(field: SdfField, X, oracle: PriorOracle | None = None) -> Array:
    if isinstance(field, NeuralSdf):
        return field.eval(X, oracle)
    return field.eval(X)


def sdf_gradient(field: SdfField, X, oracle: PriorOracle | None = None) -> Array:
    if isinstance(field, NeuralSdf):
        return field.gradient(X, oracle)
    return field.gradient(X)


@dataclass(frozen=True)
class DensityParams:
    alpha: float = 0.02

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("density alpha must be positive")


def sdf_to_density(s, params: DensityParams | float) -> Array:
    """``sigmoid(-s / alpha) / alpha``."""
    alpha = params.alpha if isinstance(params, DensityParams) else float(params)
    if not alpha > 0:
        raise ValueError("density alpha must be positive")
    s = np.asarray(s)
    if s.dtype.kind != "f":
        s = s.astype(np.float64)
    return _sigmoid(-s / s.dtype.type(alpha)) / s.dtype.type(alpha)


# -- occupancy -----------------------------------------------------------------


class OccupancyOracle:
    soft = False

    def eval(self, X) -> Array:
        raise NotImplementedError

    def gradient(self, X) -> Array:
        return np.zeros_like(_as_points(X))


@dataclass
class SdfOccupancy(OccupancyOracle):
    """Occupancy of an analytic shape: hard ``s < 0`` or soft ``sigmoid(-s/tau)``."""

    sdf: SdfField
    tau: float | None = None

    @property
    def soft(self) -> bool:
        return self.tau is not None

    def eval(self, X):
        s = self.sdf.eval(_as_points(X))
        if self.tau is None:
            return (s < 0).astype(s.dtype)
        return _sigmoid(-s / s.dtype.type(self.tau))

    def gradient(self, X):
        X = _as_points(X)
        if self.tau is None:
            return np.zeros_like(X)
        o = self.eval(X)
        return (-(o * (1 - o)) / self.tau)[..., None] * self.sdf.gradient(X)


@dataclass
class ConstantOccupancy(OccupancyOracle):
    value: float = 0.0

    def eval(self, X):
        X = _as_points(X)
        return np.full(X.shape[:-1], self.value, X.dtype)


GRID_HEADER = struct.Struct("<III6f")


@dataclass
class GridOccupancy(OccupancyOracle):
    """Trilinear occupancy on a node grid spanning ``bbox``; zero outside."""

    data: Array  # (Nx, Ny, Nz)
    bbox: tuple[float, float, float, float, float, float] = (-1, -1, -1, 1, 1, 1)
    soft = True

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 2:
            raise ShapeError(f"occupancy grid must be 3-D with >= 2 nodes per axis, got {self.data.shape}")

    def _locate(self, X):
        lo = np.asarray(self.bbox[:3], X.dtype)
        hi = np.asarray(self.bbox[3:], X.dtype)
        n = np.asarray(self.data.shape, X.dtype)
        g = (X - lo) / (hi - lo) * (n - 1)
        inside = np.all((X >= lo) & (X <= hi), axis=-1)
        i0 = np.clip(np.floor(g).astype(np.intp), 0, np.asarray(self.data.shape) - 2)
        frac = np.clip(g - i0, 0, 1)
        return i0, frac, inside, (n - 1) / (hi - lo)

    def _corners(self, i0):
        d = self.data
        out = {}
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    out[cx, cy, cz] = d[i0[..., 0] + cx, i0[..., 1] + cy, i0[..., 2] + cz]
        return out

    def eval(self, X):
        X = _as_points(X)
        i0, f, inside, _ = self._locate(X)
        c = self._corners(i0)
        fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
        val = 0.0
        for (cx, cy, cz), v in c.items():
            wx = fx if cx else 1 - fx
            wy = fy if cy else 1 - fy
            wz = fz if cz else 1 - fz
            val = val + wx * wy * wz * v
        return np.where(inside, val, 0.0).astype(X.dtype)

    def gradient(self, X):
        X = _as_points(X)
        i0, f, inside, scale = self._locate(X)
        c = self._corners(i0)
        fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
        gx = gy = gz = 0.0
        for (cx, cy, cz), v in c.items():
            wx, dx = (fx, 1.0) if cx else (1 - fx, -1.0)
            wy, dy = (fy, 1.0) if cy else (1 - fy, -1.0)
            wz, dz = (fz, 1.0) if cz else (1 - fz, -1.0)
            gx = gx + dx * wy * wz * v
            gy = gy + wx * dy * wz * v
            gz = gz + wx * wy * dz * v
        g = np.stack([gx, gy, gz], axis=-1) * scale
        return np.where(inside[..., None], g, 0.0).astype(X.dtype)

    def save(self, path) -> None:
        nx, ny, nz = self.data.shape
        Path(path).write_bytes(GRID_HEADER.pack(nx, ny, nz, *self.bbox)
                               + np.ascontiguousarray(self.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "GridOccupancy":
        raw = Path(path).read_bytes()
        if len(raw) < GRID_HEADER.size:
            raise FormatError(f"truncated grid header: {len(raw)} bytes, expected {GRID_HEADER.size}", len(raw))
        nx, ny, nz, *bbox = GRID_HEADER.unpack_from(raw)
        expected = GRID_HEADER.size + 4 * nx * ny * nz
        if len(raw) != expected:
            raise FormatError(f"grid payload length {len(raw)} != expected {expected}", GRID_HEADER.size)
        data = np.frombuffer(raw, "<f4", offset=GRID_HEADER.size).reshape(nx, ny, nz)
        return cls(data, tuple(bbox))

    @classmethod
    def from_occupancy(cls, oracle: OccupancyOracle, n: int = 64,
                       bbox=(-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)) -> "GridOccupancy":
        axes = [np.linspace(bbox[i], bbox[i + 3], n) for i in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return cls(oracle.eval(pts), tuple(bbox))


def occupancy_eval(oracle: OccupancyOracle, X) -> Array:
    return oracle.eval(X)
