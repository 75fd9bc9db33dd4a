"""Geometry losses (mask, surface SDF, Eikonal) and consistency losses.

Every squared norm is a batch mean, so the default weights do not depend on
batch size or render resolution. The ``*_grad`` variants return the weight
gradient of a :class:`~sdftrace.fields.NeuralSdf` alongside the value.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .core import Array, ImageBuffer, OrthoCamera, ShapeError, bilinear_sample
from .fields import DensityParams, NeuralSdf, OccupancyOracle, SdfField, sdf_eval, sdf_gradient
from .neural import ConfigurationError, PriorOracle, _sigmoid, decode
from .renderer import (
    RenderSettings,
    Scene,
    fetch_anchor_color,
    interval_samples,
    render_alpha_map,
    render_view,
    trace_frame,
)
from .tracer import TraceSettings, box_interval


@dataclass(frozen=True)
class GeoLossWeights:
    lambda_mask: float = 1.0
    lambda_3d_sdf: float = 1.0
    lambda_eik: float = 0.1

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class CsLossWeights:
    lambda_2d_front: float = 1.0
    lambda_3d_rgb: float = 8.0
    lambda_b: float = 1e-2
    lambda_2d_back: float = 8.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be nonnegative")


def _nonempty(points) -> Array:
    points = np.asarray(points)
    if points.size == 0:
        raise ValueError("loss needs a non-empty point batch")
    return points.reshape(-1, 3)


# -- geometry ----------------------------------------------------------------------


def loss_3d_sdf(field: SdfField, surface_points, oracle: PriorOracle | None = None) -> float:
    """Mean of ``s(X)^2`` over points on the occupancy 0.5 level set."""
    s = sdf_eval(field, _nonempty(surface_points), oracle)
    return float(np.mean(np.asarray(s, np.float64) ** 2))


def loss_3d_sdf_grad(field: NeuralSdf, surface_points, oracle: PriorOracle | None = None):
    X = _nonempty(surface_points)
    n = X.shape[0]
    s, grads = field.value_and_param_grad(X, lambda s: 2.0 * s / n, oracle)
    return float(np.mean(np.asarray(s, np.float64) ** 2)), grads


def loss_eikonal(field: SdfField, points, oracle: PriorOracle | None = None) -> float:
    """Mean of ``(|grad s| - 1)^2``."""
    g = sdf_gradient(field, _nonempty(points), oracle)
    norm = np.linalg.norm(np.asarray(g, np.float64), axis=-1)
    return float(np.mean((norm - 1.0) ** 2))


def loss_eikonal_grad(field: NeuralSdf, points, oracle: PriorOracle | None = None):
    X = _nonempty(points)
    n = X.shape[0]

    def cot(g):
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        return 2.0 * (norm - 1.0) * g / np.maximum(norm, 1e-12) / n

    g, grads = field.gradient_and_param_grad(X, cot, oracle)
    norm = np.linalg.norm(np.asarray(g, np.float64), axis=-1)
    return float(np.mean((norm - 1.0) ** 2)), grads


def loss_mask(M_o: ImageBuffer, M_s: ImageBuffer) -> float:
    """Mean squared pixel difference of two masks."""
    if M_o.shape != M_s.shape:
        raise ShapeError(f"mask shapes differ: {M_o.shape} vs {M_s.shape}")
    return float(np.mean((M_o.data - M_s.data) ** 2))


def mask_iou(a: ImageBuffer | Array, b: ImageBuffer | Array, threshold: float = 0.5) -> float:
    a, b = ((m.data if isinstance(m, ImageBuffer) else np.asarray(m)) for m in (a, b))
    # single-channel buffers carry a trailing axis that plain masks lack
    a = (a[..., 0] if a.ndim == 3 else a) > threshold
    b = (b[..., 0] if b.ndim == 3 else b) > threshold
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def loss_mask_grad(field: NeuralSdf, oracle: PriorOracle, camera: OrthoCamera, M_o: ImageBuffer,
                   alpha: float, trace: TraceSettings = TraceSettings(), n_samples: int = 6,
                   interval_k: float = 3.0, dtype="float32", silhouette_samples: int = 32,
                   stall_budget: int = RenderSettings.stall_budget):
    """Mask loss against ``M_o`` and its gradient in the weights and ``log alpha``.

    The traced hit distances are held fixed. For the weights the gradient
    flows through the densities at the samples. For ``log alpha`` it also
    follows the interval, whose half-width and cell size scale with alpha;
    the change of ``s`` as the samples spread comes from one extra forward
    pass at offsets stretched by 1%.

    Rays inside the oracle mask that the tracer misses would otherwise carry
    no gradient, so only the shrinking pull of the opposite case would act on
    the silhouette. Those rays are centred on the minimum of ``s`` over
    ``silhouette_samples`` points in the scene box instead (0 disables this).
    Tracing matches :func:`~sdftrace.renderer.render_view`, including the
    stall continuation.
    Returns ``(value, grads, d_log_alpha, M_s)``.
    """
    h, w = camera.height, camera.width
    if M_o.shape[:2] != (h, w):
        raise ShapeError("occupancy mask resolution differs from the camera")
    origins, dirs = camera.all_rays()
    # the oracle is empty outside the scene box, so rays missing it keep A = 0
    t0, t1 = box_interval(origins, dirs)
    in_box = np.flatnonzero((t1 >= t0) & (t1 >= 0.0))
    tr = trace_frame(field, origins[in_box], dirs[in_box], trace, RenderSettings(stall_budget=stall_budget),
                     oracle, np.dtype(dtype))
    surf = tr.surface
    idx = in_box[surf]
    t_hit = tr.t[surf]
    target = M_o.data.reshape(-1).astype(np.float64)
    lost = in_box[~surf & (target[in_box] > 0.5)]
    if silhouette_samples > 0 and lost.size:
        u = (np.arange(silhouette_samples) + 0.5) / silhouette_samples
        lo = np.maximum(t0[lost], 0.0)
        tc = lo[:, None] + u * (t1[lost] - lo)[:, None]
        pc = origins[lost, None, :] + tc[..., None] * dirs[lost, None, :]
        sc = sdf_eval(field, pc.reshape(-1, 3).astype(dtype), oracle).reshape(tc.shape)
        idx = np.concatenate([idx, lost])
        t_hit = np.concatenate([t_hit, tc[np.arange(lost.size), np.argmin(sc, axis=1)]])
    A = np.zeros(h * w)
    n_pix = h * w
    grads = None
    d_log_alpha = 0.0
    if idx.size:
        ts, delta = interval_samples(t_hit, interval_k * alpha, n_samples)
        pts = origins[idx, None, :] + ts[..., None] * dirs[idx, None, :]
        flat = pts.reshape(-1, 3).astype(dtype)
        cache = {}

        def cot(s):
            s = np.asarray(s, np.float64).reshape(ts.shape)
            sig = _sigmoid(-s / alpha)
            sigma = sig / alpha
            A_r = -np.expm1(-(sigma * delta).sum(axis=-1))
            dA = -2.0 * (target[idx] - A_r) / n_pix
            dtau = np.broadcast_to((dA * (1.0 - A_r))[:, None], ts.shape)
            cache.update(A=A_r, dtau=dtau, sig=sig, s=s)
            return (dtau * delta * (-sig * (1 - sig) / alpha ** 2)).reshape(-1)

        _, grads = field.value_and_param_grad(flat, cot, oracle)
        A[idx] = cache["A"]
        sig, s = cache["sig"], cache["s"]
        # tau_i = sigmoid(-u_i) * 2k/n with u_i = s(t_hit + offset_i) / alpha and offset_i proportional
        # to alpha; d offset_i / d log(alpha) = offset_i, so stretch the offsets by 1 + eps
        eps = 1e-2
        ts_h = t_hit[:, None] + (1.0 + eps) * (ts - t_hit[:, None])
        pts_h = origins[idx, None, :] + ts_h[..., None] * dirs[idx, None, :]
        s_h = np.asarray(sdf_eval(field, pts_h.reshape(-1, 3).astype(dtype), oracle), np.float64).reshape(ts.shape)
        du = ((s_h - s) / eps - s) / alpha
        dtau_dlog = -sig * (1 - sig) * (delta / alpha) * du
        d_log_alpha = float((cache["dtau"] * dtau_dlog).sum())
    value = float(np.mean((target - A) ** 2))
    return value, grads, d_log_alpha, ImageBuffer.scalar(A.reshape(h, w, 1))


def random_view_sampler(width: int = 64, height: int = 128, **camera_kw) -> Callable[[np.random.Generator], OrthoCamera]:
    """Orthographic views with directions uniform on the sphere."""

    def sample(rng: np.random.Generator) -> OrthoCamera:
        yaw = rng.uniform(0.0, 2 * math.pi)
        pitch = math.asin(rng.uniform(-0.98, 0.98))
        return OrthoCamera.from_yaw_pitch(yaw, pitch, width=width, height=height, **camera_kw)

    return sample


def eikonal_points(surface: Array, rng: np.random.Generator, n_uniform: int | None = None,
                   sigma: float = 0.05) -> Array:
    """Half uniform in the scene box, half surface points jittered by ``N(0, sigma^2)``."""
    surface = np.asarray(surface)
    n_uniform = surface.shape[0] if n_uniform is None else n_uniform
    uniform = rng.uniform(-1.0, 1.0, (n_uniform, 3))
    return np.concatenate([uniform, surface + rng.normal(0.0, sigma, surface.shape)])


def loss_geo(field: SdfField, oracle: PriorOracle, camera_sampler, weights: GeoLossWeights = GeoLossWeights(),
             *, seed: int = 0, density: DensityParams = DensityParams(), n_surface: int = 512,
             n_eik: int = 1024, trace: TraceSettings = TraceSettings(), interval_k: float = 3.0,
             n_samples: int = 6, march_step: float = 0.01) -> tuple[float, dict[str, float]]:
    """Weighted geometry loss for one random view and fresh point batches."""
    from .fitting import sample_surface_points

    if oracle is None or oracle.occupancy is None:
        raise ConfigurationError("geometry loss needs an occupancy oracle")
    rng = np.random.default_rng(seed)
    camera = camera_sampler(rng)
    settings = RenderSettings(n_samples=n_samples, interval_k=interval_k, threads=1)
    M_o = render_alpha_map(oracle.occupancy, camera, settings, step=march_step, trace=trace)
    M_s = render_alpha_map(field, camera, settings, density=density, trace=trace, oracle=oracle)
    surface = sample_surface_points(oracle.occupancy, n_surface, rng)
    eik = eikonal_points(surface, rng, n_uniform=n_eik - n_surface)
    comps = {
        "mask": loss_mask(M_o, M_s),
        "3d_sdf": loss_3d_sdf(field, surface, oracle),
        "eik": loss_eikonal(field, eik, oracle),
    }
    return combine_geo(comps, weights), comps


def combine_geo(components: dict[str, float], weights: GeoLossWeights) -> float:
    return (weights.lambda_mask * components["mask"] + weights.lambda_3d_sdf * components["3d_sdf"]
            + weights.lambda_eik * components["eik"])


# -- consistency ----------------------------------------------------------------------


def _masked_mse(a: Array, b: Array, mask: Array) -> float:
    if not mask.any():
        return 0.0
    return float(np.mean((a[mask] - b[mask]) ** 2))


def anchor_at_camera(anchor: ImageBuffer, camera: OrthoCamera) -> Array:
    """Anchor resampled at the pixel centres of ``camera`` (which it is aligned with)."""
    rows, cols = np.divmod(np.arange(camera.width * camera.height), camera.width)
    uv = camera.pixel_uv(cols, rows)
    return bilinear_sample(anchor, uv).reshape(camera.height, camera.width, -1)


def loss_front_cs(scene: Scene, anchor: ImageBuffer, frontal: OrthoCamera,
                  weights: CsLossWeights = CsLossWeights(),
                  settings: RenderSettings = RenderSettings()) -> tuple[float, dict[str, float]]:
    """Frontal photometric, 3D RGB and blend-weight regularization terms."""
    front_scene = Scene(**{**scene.__dict__, "anchor": anchor, "frontal": frontal})
    prod = render_view(front_scene, frontal, settings)
    target = anchor_at_camera(anchor, frontal)
    mask = (prod.M_s.data[..., 0] > 0.5) | prod.surface
    l2d = _masked_mse(prod.I_v.data, target, mask)
    X = prod.x_inter[prod.surface]
    if X.shape[0]:
        dec = decode(scene.triplane, scene.decoder, X, scene.oracle)
        c_uv = fetch_anchor_color(anchor, X, frontal)
        l3d = float(np.mean((np.asarray(dec.c, np.float64) - c_uv) ** 2))
        lreg = float(np.mean((1.0 - np.asarray(dec.b, np.float64)) ** 2))
    else:
        l3d = lreg = 0.0
    comps = {"2d_front": l2d, "3d_rgb": l3d, "reg_b": lreg}
    return combine_front(comps, weights), comps


def combine_front(components: dict[str, float], weights: CsLossWeights) -> float:
    return (weights.lambda_2d_front * components["2d_front"] + weights.lambda_3d_rgb * components["3d_rgb"]
            + weights.lambda_b * components["reg_b"])


def back_view(frontal: OrthoCamera, rng_seed: int) -> OrthoCamera:
    """The view opposite ``frontal`` with ``N(0, 1)`` radians added to yaw and pitch."""
    rng = np.random.default_rng(rng_seed)
    dyaw, dpitch = rng.normal(0.0, 1.0, 2)
    limit = math.pi / 2 - 1e-3
    pitch = float(np.clip(dpitch, -limit, limit))
    return OrthoCamera.from_yaw_pitch(
        math.pi + float(dyaw), pitch, distance=float(np.linalg.norm(frontal.center)),
        half_width=frontal.half_width, half_height=frontal.half_height,
        width=frontal.width, height=frontal.height)


def loss_back_cs(scene: Scene, frontal: OrthoCamera, weights: CsLossWeights = CsLossWeights(),
                 rng_seed: int = 0, settings: RenderSettings = RenderSettings()) -> float:
    """``lambda_2d_back`` times the photometric error against the predicted-colour image."""
    if scene.oracle is None or scene.oracle.color_fn is None:
        raise ConfigurationError("back-view consistency needs a colour predictor in the oracle")
    cam = back_view(frontal, rng_seed)
    prod = render_view(scene, cam, settings)
    bg = np.asarray(settings.background, np.float64)
    pred = np.broadcast_to(bg, prod.I_v.shape).copy()
    surf = prod.surface
    if surf.any():
        pred[surf] = np.clip(scene.oracle.color(prod.x_inter[surf]), 0.0, 1.0)
    mask = (prod.M_s.data[..., 0] > 0.5) | surf
    return weights.lambda_2d_back * _masked_mse(prod.I_v.data, pred, mask)
