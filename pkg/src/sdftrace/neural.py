"""Small MLPs with hand-written reverse-mode gradients, tri-plane features,
the colour/blend decoder and the prior-oracle interface.

Weights use the ``x @ W + b`` convention, so ``W`` has shape ``(in, out)``.
Every evaluation runs in the dtype of its input: float64 for gradient checks,
float32 on the hot rendering and fitting paths.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Array, FormatError, ShapeError, _bilinear_array

MAGIC = b"MLPW"
VERSION = 1

ACTIVATION_CODES = {"none": 0, "relu": 1, "sigmoid": 2, "softplus": 3, "softplus100": 4}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_CODES.items()}


# Tails of exp(-u) beyond these cutoffs are flushed to exactly zero. Without
# the flush, products of tiny sigmoid tails with small cotangents land in the
# subnormal range, where float32 arithmetic runs several times slower.
_EXP_CUTOFF = {np.dtype(np.float32): 30.0, np.dtype(np.float64): 80.0}


def _flushed_exp_(u: Array) -> Array:
    """In place ``exp(u)`` for ``u <= 0``, zero where ``u`` is below the cutoff."""
    cut = u.dtype.type(-_EXP_CUTOFF.get(u.dtype, 80.0))
    keep = u >= cut
    np.maximum(u, cut, out=u)
    np.exp(u, out=u)
    u *= keep
    return u


def _neg_abs_exp(x: Array, scale: float = 1.0) -> Array:
    """``exp(-scale |x|)`` with far tails flushed to zero."""
    e = np.abs(x)
    e *= x.dtype.type(-scale)
    return _flushed_exp_(e)


def _sigmoid_parts(x: Array, e: Array) -> Array:
    """``sigmoid(x)`` given ``e = exp(-|x|)``, without a data-dependent select.

    ``exp(min(x, 0))`` is 1 for positive ``x`` and ``e`` otherwise, so the
    numerator needs no branch (selects on random signs mispredict badly).
    """
    num = np.minimum(x, x.dtype.type(0))
    _flushed_exp_(num)
    num /= 1.0 + e
    return num


def _sigmoid(x: Array) -> Array:
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if x.ndim == 0:
        return _sigmoid(x.reshape(1))[0]
    return _sigmoid_parts(x, _neg_abs_exp(x))


def _softplus(x: Array, beta: float) -> Array:
    tail = _neg_abs_exp(x, beta)
    np.log1p(tail, out=tail)
    tail *= x.dtype.type(1.0 / beta)
    out = np.maximum(x, x.dtype.type(0))
    out += tail
    return out


def _softplus_with_sigmoid(z: Array, beta: float) -> tuple[Array, Array]:
    """``softplus_beta(z)`` and ``sigmoid(beta z)`` sharing one ``exp``."""
    e = _neg_abs_exp(z, beta)
    sig = _sigmoid_parts(z * z.dtype.type(beta), e)
    np.log1p(e, out=e)
    e *= z.dtype.type(1.0 / beta)
    out = np.maximum(z, z.dtype.type(0))
    out += e
    return out, sig


def activate(name: str, z: Array, order: int = 2) -> tuple[Array, Array, Array | None]:
    """Return ``(phi(z), phi'(z), phi''(z))``; ``phi''`` is None when ``order < 2``."""
    if name == "none":
        return z, np.ones_like(z), (np.zeros_like(z) if order >= 2 else None)
    if name == "relu":
        d1 = (z > 0).astype(z.dtype)
        return z * d1, d1, (np.zeros_like(z) if order >= 2 else None)
    if name == "sigmoid":
        s = _sigmoid(z)
        d1 = s * (1 - s)
        return s, d1, (d1 * (1 - 2 * s) if order >= 2 else None)
    if name in ("softplus", "softplus100"):
        beta = 100.0 if name == "softplus100" else 1.0
        val, s = _softplus_with_sigmoid(z, beta)
        return val, s, (z.dtype.type(beta) * s * (1 - s) if order >= 2 else None)
    raise ValueError(f"unknown activation {name!r}")


def activate_value(name: str, z: Array) -> Array:
    if name == "none":
        return z
    if name == "relu":
        return np.maximum(z, 0)
    if name == "sigmoid":
        return _sigmoid(z)
    if name == "softplus":
        return _softplus(z, 1.0)
    if name == "softplus100":
        return _softplus(z, 100.0)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: Array  # (in, out)
    bias: Array  # (out,)
    activation: str = "none"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpWeights:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_dim,):
                raise ShapeError(f"layer {i}: weight {layer.weight.shape} / bias {layer.bias.shape} mismatch")
            if layer.activation not in ACTIVATION_CODES:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if i and self.layers[i - 1].out_dim != layer.in_dim:
                raise ShapeError(f"layer {i}: in_dim {layer.in_dim} != previous out_dim "
                                 f"{self.layers[i - 1].out_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_dim,) + tuple(l.out_dim for l in self.layers)

    def params(self) -> list[Array]:
        """Flat list ``[W0, b0, W1, b1, ...]`` referencing the live arrays."""
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "MlpWeights":
        return MlpWeights([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def astype(self, dtype) -> "MlpWeights":
        return MlpWeights([Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation)
                           for l in self.layers])

    @classmethod
    def random(cls, widths: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
               scale: float = 1.0) -> "MlpWeights":
        """He-style normal initialization; values are float32-representable."""
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for n_in, n_out, act in zip(widths[:-1], widths[1:], activations):
            w = rng.normal(0.0, scale * math.sqrt(2.0 / n_in), (n_in, n_out))
            b = rng.normal(0.0, 0.1 * scale, n_out)
            layers.append(Layer(w.astype(np.float32).astype(np.float64),
                                b.astype(np.float32).astype(np.float64), act))
        return cls(layers)


@dataclass
class Tape:
    """Per-call activation record: layer inputs, pre-activations, derivatives."""

    inputs: list[Array]
    d1: list[Array]
    weights: MlpWeights
    batch_shape: tuple[int, ...]


def _flatten_input(w: MlpWeights, x: Array) -> tuple[Array, tuple[int, ...]]:
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if x.shape[-1] != w.in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != network input dim {w.in_dim}")
    return x.reshape(-1, w.in_dim), x.shape[:-1]


def mlp_forward(w: MlpWeights, x: Array) -> tuple[Array, Tape]:
    """Evaluate the network on ``x`` of shape ``(..., in_dim)``."""
    a, batch_shape = _flatten_input(w, x)
    dt = a.dtype
    inputs, d1s = [], []
    for layer in w.layers:
        inputs.append(a)
        z = a @ layer.weight.astype(dt, copy=False) + layer.bias.astype(dt, copy=False)
        a, d1, _ = activate(layer.activation, z, order=1)
        d1s.append(d1)
    return a.reshape(batch_shape + (w.out_dim,)), Tape(inputs, d1s, w, batch_shape)


def mlp_eval(w: MlpWeights, x: Array) -> Array:
    """Forward pass without recording a tape."""
    a, batch_shape = _flatten_input(w, x)
    dt = a.dtype
    for layer in w.layers:
        a = activate_value(layer.activation, a @ layer.weight.astype(dt, copy=False)
                           + layer.bias.astype(dt, copy=False))
    return a.reshape(batch_shape + (w.out_dim,))


def mlp_backward(w: MlpWeights, tape: Tape, cotangent: Array,
                 input_grad: bool = True) -> tuple[Array | None, list[tuple[Array, Array]]]:
    """Reverse pass: gradient of ``sum(cotangent * output)``.

    Returns the input gradient (None if ``input_grad`` is false) and
    ``[(dW, db), ...]`` per layer. Weight gradients accumulate in float64
    regardless of the tape dtype.
    """
    if tape.weights is not w or len(tape.inputs) != len(w.layers):
        raise ShapeError("tape was recorded for a different network")
    g = np.asarray(cotangent).reshape(-1, w.out_dim)
    if g.shape[0] != tape.inputs[0].shape[0]:
        raise ShapeError(f"cotangent batch {g.shape[0]} != tape batch {tape.inputs[0].shape[0]}")
    dt = tape.inputs[0].dtype
    g = g.astype(dt, copy=False)
    grads: list[tuple[Array, Array]] = [None] * len(w.layers)  # type: ignore[list-item]
    for i in reversed(range(len(w.layers))):
        layer = w.layers[i]
        gz = g * tape.d1[i]
        a = tape.inputs[i]
        grads[i] = ((a.T @ gz).astype(np.float64), gz.sum(axis=0, dtype=np.float64))
        if i == 0 and not input_grad:
            return None, grads
        g = gz @ layer.weight.astype(dt, copy=False).T
    return g.reshape(tape.batch_shape + (w.in_dim,)), grads


# -- forward-mode tangents and their reverse ---------------------------------
# The input gradient of a scalar network is needed inside the Eikonal loss,
# whose own weight gradient requires differentiating through that gradient.
# We push k tangent directions forward alongside the values and write the
# reverse of that combined pass by hand.


@dataclass
class TangentTape:
    inputs: list[Array]  # a_{l-1}, (B, n)
    tangents: list[Array]  # T_{l-1}, (B, k, n)
    pre_tangents: list[Array]  # Z_l = T_{l-1} W, (B, k, n_out)
    d1: list[Array]
    d2: list[Array]
    weights: MlpWeights


def mlp_forward_tangent(w: MlpWeights, x: Array, tangent: Array) -> tuple[Array, Array, TangentTape]:
    """Values and directional derivatives.

    ``x`` is ``(B, in)``; ``tangent`` is ``(B, k, in)`` holding ``dx/dp_j`` for
    ``k`` parameters ``p``. Returns output ``(B, out)`` and output tangents
    ``(B, k, out)``.
    """
    a = np.asarray(x)
    T = np.asarray(tangent)
    if a.ndim != 2 or a.shape[1] != w.in_dim or T.shape[0] != a.shape[0] or T.shape[2] != w.in_dim:
        raise ShapeError(f"bad shapes for tangent forward: x {a.shape}, tangent {T.shape}")
    dt = a.dtype
    tape = TangentTape([], [], [], [], [], w)
    for layer in w.layers:
        W = layer.weight.astype(dt, copy=False)
        tape.inputs.append(a)
        tape.tangents.append(T)
        z = a @ W + layer.bias.astype(dt, copy=False)
        Z = T @ W
        a, d1, d2 = activate(layer.activation, z)
        T = d1[:, None, :] * Z
        tape.pre_tangents.append(Z)
        tape.d1.append(d1)
        tape.d2.append(d2)
    return a, T, tape


def mlp_backward_tangent(
    w: MlpWeights, tape: TangentTape, out_cot: Array | None, tangent_cot: Array
) -> tuple[Array, list[tuple[Array, Array]]]:
    """Reverse of :func:`mlp_forward_tangent`.

    Returns the gradient with respect to ``x`` and per-layer ``(dW, db)``;
    tangents at the input are treated as constants.
    """
    if tape.weights is not w:
        raise ShapeError("tape was recorded for a different network")
    dt = tape.inputs[0].dtype
    B = tape.inputs[0].shape[0]
    ga = np.zeros((B, w.out_dim), dt) if out_cot is None else np.asarray(out_cot, dt).reshape(B, w.out_dim)
    gT = np.asarray(tangent_cot, dt)
    grads: list[tuple[Array, Array]] = [None] * len(w.layers)  # type: ignore[list-item]
    for i in reversed(range(len(w.layers))):
        W = w.layers[i].weight.astype(dt, copy=False)
        d1, d2, Z = tape.d1[i], tape.d2[i], tape.pre_tangents[i]
        gZ = d1[:, None, :] * gT
        gz = ga * d1 + d2 * np.einsum("bkn,bkn->bn", gT, Z)
        a_in, T_in = tape.inputs[i], tape.tangents[i]
        k = T_in.shape[1]
        dW = a_in.T @ gz + T_in.reshape(B * k, -1).T @ gZ.reshape(B * k, -1)
        grads[i] = (dW.astype(np.float64), gz.sum(axis=0, dtype=np.float64))
        ga = gz @ W.T
        gT = gZ @ W.T
    return ga, grads


# -- tri-plane ---------------------------------------------------------------

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # xy, xz, yz


def splitmix64_uniform(seed: int, n: int, low: float = -0.1, high: float = 0.1) -> Array:
    """``n`` uniforms from the counter-based splitmix64 stream seeded by ``seed``.

    Output ``k`` is ``mix(seed + (k + 1) * 0x9E3779B97F4A7C15)``; the top 53
    bits form a double in ``[0, 1)``.
    """
    with np.errstate(over="ignore"):
        state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + (
            np.arange(1, n + 1, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15))
        z = state
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    u = (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return low + (high - low) * u


@dataclass
class TriPlane:
    """Three axis-aligned feature planes, stored as ``(3, R, R, C)``.

    Plane order is xy, xz, yz. For a plane spanning axes ``(a, b)``, the
    first axis maps to the column coordinate ``u`` and the second to ``v``.
    """

    planes: Array
    bbox: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 4 or p.shape[0] != 3 or p.shape[1] != p.shape[2]:
            raise ShapeError(f"tri-plane must be (3, R, R, C), got {p.shape}")
        self.planes = p

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    @classmethod
    def from_seed(cls, seed: int, resolution: int = 256, channels: int = 32) -> "TriPlane":
        vals = splitmix64_uniform(seed, 3 * resolution * resolution * channels)
        return cls(vals.reshape(3, resolution, resolution, channels).astype(np.float32))

    def save(self, path) -> None:
        r, c = self.resolution, self.channels
        Path(path).write_bytes(struct.pack("<II", r, c)
                               + np.ascontiguousarray(self.planes, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "TriPlane":
        raw = Path(path).read_bytes()
        if len(raw) < 8:
            raise FormatError("truncated tri-plane header", len(raw))
        r, c = struct.unpack_from("<II", raw)
        expected = 8 + 4 * 3 * r * r * c
        if len(raw) != expected:
            raise FormatError(f"tri-plane payload length {len(raw)} != expected {expected}", 8)
        return cls(np.frombuffer(raw, dtype="<f4", offset=8).reshape(3, r, r, c).copy())


def triplane_sample(tp: TriPlane, X: Array) -> Array:
    """Mean of the three bilinear plane samples at ``X``; shape ``(..., C)``."""
    X = np.asarray(X)
    lo, hi = tp.bbox
    unit = (X - lo) / (hi - lo)
    planes = tp.planes
    if X.dtype == np.float64 and planes.dtype != np.float64:
        planes = planes.astype(np.float64)
    acc = None
    for p, (a, b) in enumerate(PLANE_AXES):
        s = _bilinear_array(planes[p], unit[..., [a, b]])
        acc = s if acc is None else acc + s
    return acc / 3.0


# -- prior oracle ------------------------------------------------------------


@dataclass
class PositionalFeatures:
    """Deterministic stand-in for pixel-aligned reconstructor features.

    Layout: ``[sin(w_k x_i), cos(w_k x_i)]`` for ``n_freqs`` frequencies,
    then the occupancy value, then zero padding up to ``dim``. Frequencies
    are ``pi * 2**linspace(0, max_log2, n_freqs)``.
    """

    occupancy: object | None = None
    dim: int = 257
    n_freqs: int = 8
    max_log2: float = 3.0
    freqs: Array = field(init=False, repr=False)

    def __post_init__(self):
        self.freqs = math.pi * 2.0 ** np.linspace(0.0, self.max_log2, self.n_freqs)
        if self.active_dim > self.dim:
            raise ValueError(f"feature dim {self.dim} too small for {self.active_dim} encoded values")

    @property
    def active_dim(self) -> int:
        """Leading entries that can be non-zero; the rest is padding."""
        return 6 * self.n_freqs + (1 if self.occupancy is not None else 0)

    def encode(self, X: Array) -> Array:
        X = np.asarray(X)
        ang = X[..., None, :] * self.freqs.astype(X.dtype)[:, None]  # (..., F, 3)
        parts = [np.sin(ang).reshape(X.shape[:-1] + (-1,)), np.cos(ang).reshape(X.shape[:-1] + (-1,))]
        if self.occupancy is not None:
            parts.append(np.asarray(self.occupancy.eval(X), dtype=X.dtype)[..., None])
        return np.concatenate(parts, axis=-1)

    def __call__(self, X: Array) -> Array:
        enc = self.encode(X)
        pad = self.dim - enc.shape[-1]
        if pad:
            enc = np.concatenate([enc, np.zeros(enc.shape[:-1] + (pad,), enc.dtype)], axis=-1)
        return enc

    def jacobian(self, X: Array) -> Array:
        """``d feature / dX`` for the active entries, shape ``(..., 3, active_dim)``."""
        X = np.asarray(X)
        w = self.freqs.astype(X.dtype)
        ang = X[..., None, :] * w[:, None]  # (..., F, 3)
        eye = np.eye(3, dtype=X.dtype)
        # d sin(w_k x_i)/dx_j = w_k cos(w_k x_i) delta_ij; flattened index is k*3 + i
        dsin = (w[:, None] * np.cos(ang))[..., None, :, :] * eye[:, None, :]
        dcos = (-w[:, None] * np.sin(ang))[..., None, :, :] * eye[:, None, :]
        lead = X.shape[:-1]
        parts = [dsin.reshape(lead + (3, -1)), dcos.reshape(lead + (3, -1))]
        if self.occupancy is not None:
            parts.append(np.asarray(self.occupancy.gradient(X), dtype=X.dtype)[..., :, None])
        return np.concatenate(parts, axis=-1)


class ConfigurationError(RuntimeError):
    """A component was asked to run without something it depends on."""


@dataclass
class PriorOracle:
    """Pluggable supplier of occupancy, features and predicted colour."""

    feature_fn: Callable[[Array], Array]
    occupancy: object | None = None
    color_fn: Callable[[Array], Array] | None = None
    feature_dim: int | None = None

    def __post_init__(self):
        if self.feature_dim is None:
            self.feature_dim = int(getattr(self.feature_fn, "dim"))

    def features(self, X: Array) -> Array:
        f = np.asarray(self.feature_fn(X))
        if f.shape[-1] != self.feature_dim:
            raise ShapeError(f"feature_fn returned dim {f.shape[-1]}, expected {self.feature_dim}")
        return f

    @property
    def active_dim(self) -> int:
        return int(getattr(self.feature_fn, "active_dim", self.feature_dim))

    def feature_jacobian(self, X: Array, h: float = 1e-6) -> Array:
        """``(..., 3, active_dim)``; central differences if the feature source has no jacobian."""
        jac = getattr(self.feature_fn, "jacobian", None)
        if jac is not None:
            return jac(X)
        X = np.asarray(X, dtype=np.float64)
        cols = []
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            cols.append((self.features(X + e) - self.features(X - e))[..., : self.active_dim] / (2 * h))
        return np.stack(cols, axis=-2)

    def color(self, X: Array) -> Array:
        if self.color_fn is None:
            raise ConfigurationError("prior oracle has no colour predictor")
        return np.asarray(self.color_fn(X))


@dataclass
class DecoderOutput:
    c: Array  # (..., 3)
    b: Array  # (...,)


def make_decoder(feature_dim: int, rng: np.random.Generator, channels: int = 32, hidden: int = 64,
                 scale: float = 1.0) -> MlpWeights:
    return MlpWeights.random([channels + feature_dim, hidden, 4], ["softplus", "sigmoid"], rng, scale)


def active_features(oracle: PriorOracle, X: Array) -> Array:
    """The leading ``oracle.active_dim`` feature entries; the rest are zero."""
    enc = getattr(oracle.feature_fn, "encode", None)
    f = enc(X) if enc is not None else oracle.features(X)[..., : oracle.active_dim]
    return np.asarray(f, X.dtype)


def decode(tp: TriPlane, dec: MlpWeights, X: Array, oracle: PriorOracle) -> DecoderOutput:
    """Colour and blend weight at ``X`` from ``[E(tri-plane), f(X)]``.

    Zero padding at the end of ``f`` is skipped by truncating the first
    decoder layer, which leaves the result unchanged.
    """
    if dec.in_dim != tp.channels + oracle.feature_dim:
        raise ShapeError(f"decoder input dim {dec.in_dim} != {tp.channels} + {oracle.feature_dim}")
    if dec.out_dim != 4 or dec.layers[-1].activation != "sigmoid":
        raise ShapeError("decoder must end in a 4-wide sigmoid layer")
    X = np.asarray(X)
    if X.dtype.kind != "f":
        X = X.astype(np.float64)
    feat = np.concatenate([triplane_sample(tp, X).astype(X.dtype, copy=False),
                           active_features(oracle, X)], axis=-1)
    first = dec.layers[0]
    net = MlpWeights([Layer(first.weight[: feat.shape[-1]], first.bias, first.activation)] + dec.layers[1:])
    out = mlp_eval(net, feat)
    return DecoderOutput(out[..., :3], out[..., 3])


# -- weight files --------------------------------------------------------------


def save_weights(w: MlpWeights, path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(w.layers))]
    for layer in w.layers:
        chunks.append(struct.pack("<IIB", layer.in_dim, layer.out_dim, ACTIVATION_CODES[layer.activation]))
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path) -> MlpWeights:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if len(raw) < 12:
        raise FormatError(f"truncated header: {len(raw)} bytes, expected 12", len(raw))
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = 12
    layers = []
    prev_out = None
    for i in range(n_layers):
        if len(raw) < off + 9:
            raise FormatError(f"layer {i}: truncated layer header, expected {off + 9} bytes, "
                              f"got {len(raw)}", off)
        n_in, n_out, code = struct.unpack_from("<IIB", raw, off)
        if code not in ACTIVATION_NAMES:
            raise FormatError(f"layer {i}: unknown activation code {code}", off + 8)
        if prev_out is not None and n_in != prev_out:
            raise FormatError(f"layer {i}: in_dim {n_in} != previous out_dim {prev_out}", off)
        off += 9
        need = 4 * (n_in * n_out + n_out)
        if len(raw) < off + need:
            raise FormatError(f"layer {i}: truncated payload, expected {need} bytes, "
                              f"got {len(raw) - off}", off)
        wt = np.frombuffer(raw, "<f4", n_in * n_out, off).reshape(n_in, n_out)
        off += 4 * n_in * n_out
        b = np.frombuffer(raw, "<f4", n_out, off)
        off += 4 * n_out
        layers.append(Layer(wt.astype(np.float64), b.astype(np.float64), ACTIVATION_NAMES[code]))
        prev_out = n_out
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes after last layer", off)
    return MlpWeights(layers)
