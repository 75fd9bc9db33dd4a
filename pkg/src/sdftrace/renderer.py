"""Interval volume rendering around sphere-traced hits and two-stage blending.

Per pixel: sphere trace to the surface, place ``n_samples`` midpoints in
``[t_hit - k*alpha, t_hit + k*alpha]``, blend decoded colour with the
anchor colour at every sample, then integrate colour, blend weight and
opacity with emission-absorption quadrature. The frame is finished by
blending the raw render with the anchor image warped into the view.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import Array, ImageBuffer, OrthoCamera, ShapeError, _bilinear_array, project_ortho
from .fields import DensityParams, NeuralSdf, OccupancyOracle, SdfField, sdf_to_density
from .neural import MlpWeights, PriorOracle, TriPlane, decode
from .tracer import TraceResult, TraceSettings, continue_stalled, ray_march_occupancy, sphere_trace


class ContractError(RuntimeError):
    """An operation was called outside its precondition."""


@dataclass(frozen=True)
class RenderSettings:
    n_samples: int = 6
    interval_k: float = 3.0
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    width: int = 256
    height: int = 512
    jitter: tuple[float, float] = (0.5, 0.5)
    jitter_seed: int | None = None
    tile: int = 4096
    threads: int | None = None
    cull_backfacing: bool = False
    dtype: str = "float32"
    stall_budget: int = 84  # extra steps for max_iter rays before they count as hits

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if not self.interval_k > 0:
            raise ValueError("interval_k must be positive")
        if self.stall_budget < 0:
            raise ValueError("stall_budget must be >= 0")

    def halfwidth(self, alpha: float) -> float:
        return self.interval_k * alpha


@dataclass
class Scene:
    field: SdfField
    oracle: PriorOracle | None = None
    triplane: TriPlane | None = None
    decoder: MlpWeights | None = None
    density: DensityParams = DensityParams()
    anchor: ImageBuffer | None = None
    frontal: OrthoCamera | None = None
    trace: TraceSettings = TraceSettings()
    meta: dict = field(default_factory=dict)


@dataclass
class RenderProduct:
    I_raw: ImageBuffer
    I_map: ImageBuffer
    M_s: ImageBuffer
    depth: ImageBuffer
    I_v: ImageBuffer
    x_inter: Array | None = None  # (H, W, 3) traced surface points
    surface: Array | None = None  # (H, W) rays treated as surface hits
    anchor_warp: ImageBuffer | None = None

    def write(self, out_dir) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        names = {"I_v.png": self.I_v, "I_raw.png": self.I_raw}
        for name, img in names.items():
            img.save_png(os.path.join(out_dir, name))
        for name, img in {"I_map.f32img": self.I_map, "alpha.f32img": self.M_s,
                          "depth.f32img": self.depth}.items():
            img.save_f32(os.path.join(out_dir, name))
        return ["I_v.png", "I_raw.png", "I_map.f32img", "alpha.f32img", "depth.f32img"]


def default_threads() -> int:
    env = os.environ.get("SDFTRACE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# -- quadrature ------------------------------------------------------------------


def interval_samples(t_hit: Array, halfwidth: float, n: int) -> tuple[Array, float]:
    """Cell midpoints ``(N, n)`` covering ``[t - hw, t + hw]`` and the cell width."""
    delta = 2.0 * halfwidth / n
    offsets = -halfwidth + (np.arange(n) + 0.5) * delta
    return np.asarray(t_hit)[..., None] + offsets, delta


def composite_weights(sigma: Array, delta) -> Array:
    """``w_i = T_i (1 - exp(-sigma_i delta_i))`` along the last axis."""
    tau = sigma * delta
    trans = np.exp(-(np.cumsum(tau, axis=-1) - tau))
    return trans * -np.expm1(-tau)


def point_blend(c: Array, b: Array, c_uv: Array) -> Array:
    """``c * (1 - b) + c_uv * b`` per channel."""
    b = np.asarray(b)[..., None]
    return np.asarray(c) * (1 - b) + np.asarray(c_uv) * b


def fetch_anchor_color(anchor: ImageBuffer, X: Array, frontal: OrthoCamera) -> Array:
    """Anchor colour at the frontal projection of ``X`` (depth is ignored)."""
    uv, _ = project_ortho(frontal, X)
    data = anchor.data
    if np.asarray(X).dtype == np.float32 and data.dtype != np.float32:
        data = data.astype(np.float32)
        uv = uv.astype(np.float32)
    return _bilinear_array(data, uv)


def render_interval(origins: Array, dirs: Array, trace: TraceResult, scene: Scene,
                    settings: RenderSettings = RenderSettings(), anchor: ImageBuffer | None = None,
                    shade: bool = True) -> dict[str, Array]:
    """Integrate colour ``C``, blend weight ``B``, opacity ``A`` and depth.

    Every ray in the batch must be a surface hit (``hit`` or ``max_iter``).
    With ``shade=False`` only ``A`` and depth are computed.
    """
    if np.any(np.asarray(trace.status) == 1):
        raise ContractError("render_interval called on a ray that missed")
    alpha = scene.density.alpha
    hw = settings.halfwidth(alpha)
    ts, delta = interval_samples(np.atleast_1d(trace.t), hw, settings.n_samples)
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    dt = np.dtype(settings.dtype)
    flat = pts.reshape(-1, 3).astype(dt, copy=False)
    if isinstance(scene.field, NeuralSdf):
        s = scene.field.eval(flat, scene.oracle)
    else:
        s = scene.field.eval(flat)
    sigma = sdf_to_density(np.asarray(s, np.float64), alpha).reshape(ts.shape)
    w = composite_weights(sigma, delta)
    A = w.sum(axis=-1)
    depth = (w * ts).sum(axis=-1) / np.maximum(A, 1e-8)
    out = {"A": A, "depth": depth, "weights": w}
    if not shade:
        return out
    dec = decode(scene.triplane, scene.decoder, flat, scene.oracle)
    c = dec.c.astype(np.float64).reshape(ts.shape + (3,))
    b = dec.b.astype(np.float64).reshape(ts.shape)
    if anchor is not None:
        if scene.frontal is None:
            raise ContractError("anchor blending needs the frontal camera")
        c_uv = fetch_anchor_color(anchor, flat, scene.frontal).astype(np.float64).reshape(ts.shape + (3,))
        c = point_blend(c, b, c_uv)
    out["C"] = np.einsum("rn,rnc->rc", w, c)
    out["B"] = (w * b).sum(axis=-1)
    return out


# -- image-level blending ------------------------------------------------------------


def warp_anchor(anchor: ImageBuffer, frontal: OrthoCamera, render_cam: OrthoCamera, depth: ImageBuffer,
                M_s: ImageBuffer, background=(1.0, 1.0, 1.0), normals: Array | None = None) -> ImageBuffer:
    """Resample the frontal anchor into ``render_cam`` using the rendered depth.

    Pixels with ``M_s <= 0.5`` get the background. If ``normals`` (H, W, 3)
    are given, points whose normal does not face the frontal camera are
    also set to the background.
    """
    h, w = depth.height, depth.width
    if (M_s.height, M_s.width) != (h, w) or (render_cam.height, render_cam.width) != (h, w):
        raise ShapeError("depth, mask and camera resolution must agree")
    bg = np.asarray(background, np.float64)
    out = np.broadcast_to(bg, (h, w, 3)).copy()
    mask = M_s.data[..., 0] > 0.5
    if normals is not None:
        mask &= (np.asarray(normals) @ frontal.forward) < 0
    rows, cols = np.nonzero(mask)
    if rows.size:
        plane = render_cam.plane_point(render_cam.pixel_uv(cols, rows))
        X = plane + depth.data[rows, cols, 0][:, None] * render_cam.forward
        out[rows, cols] = fetch_anchor_color(anchor, X, frontal)
    return ImageBuffer.rgb(out)


def image_blend(I_raw: ImageBuffer, I_map: ImageBuffer, I_anchor: ImageBuffer) -> ImageBuffer:
    """``I_raw * (1 - I_map) + I_anchor * I_map``."""
    if not (I_raw.shape[:2] == I_map.shape[:2] == I_anchor.shape[:2]):
        raise ShapeError(f"resolution mismatch: {I_raw.shape[:2]}, {I_map.shape[:2]}, {I_anchor.shape[:2]}")
    m = I_map.data
    return ImageBuffer.rgb(I_raw.data * (1 - m) + I_anchor.data * m)


# -- frames ----------------------------------------------------------------------------


def _tile_ranges(n: int, tile: int):
    return [(i, min(i + tile, n)) for i in range(0, n, tile)]


def _run_tiles(fn, n: int, settings: RenderSettings):
    """Apply ``fn(lo, hi)`` to fixed pixel tiles; results in tile order."""
    ranges = _tile_ranges(n, settings.tile)
    threads = settings.threads or default_threads()
    if threads <= 1 or len(ranges) == 1:
        return [fn(lo, hi) for lo, hi in ranges]
    from threadpoolctl import threadpool_limits

    # BLAS stays single-threaded inside workers so a tile's arithmetic never
    # depends on the worker count
    with threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: fn(*r), ranges))


def _jitter(camera: OrthoCamera, settings: RenderSettings):
    if settings.jitter_seed is None:
        return settings.jitter
    rng = np.random.default_rng(settings.jitter_seed)
    n = camera.width * camera.height
    return rng.random(n), rng.random(n)


def _frame_rays(camera: OrthoCamera, settings: RenderSettings):
    origins, dirs = camera.all_rays(_jitter(camera, settings))
    return origins, dirs


def trace_frame(field: SdfField, origins: Array, dirs: Array, trace: TraceSettings, settings: RenderSettings,
                oracle: PriorOracle | None = None, dtype=None) -> TraceResult:
    """Sphere trace plus the stall continuation used by every renderer."""
    tr = sphere_trace(field, origins, dirs, settings=trace, oracle=oracle, dtype=dtype)
    return continue_stalled(field, origins, dirs, tr, trace, settings.stall_budget, oracle, dtype)


def render_view(scene: Scene, camera: OrthoCamera, settings: RenderSettings = RenderSettings()) -> RenderProduct:
    """Trace, integrate and blend a full frame."""
    for name in ("oracle", "triplane", "decoder"):
        if getattr(scene, name) is None:
            from .neural import ConfigurationError

            raise ConfigurationError(f"scene has no {name}")
    h, w = camera.height, camera.width
    n = h * w
    origins, dirs = _frame_rays(camera, settings)
    bg = np.asarray(settings.background, np.float64)
    eval_dtype = np.dtype(settings.dtype) if isinstance(scene.field, NeuralSdf) else None

    def tile(lo, hi):
        o, d = origins[lo:hi], dirs[lo:hi]
        tr = trace_frame(scene.field, o, d, scene.trace, settings, scene.oracle, eval_dtype)
        m = hi - lo
        C = np.zeros((m, 3))
        B = np.zeros(m)
        A = np.zeros(m)
        depth = np.zeros(m)
        idx = np.flatnonzero(tr.surface)
        if idx.size:
            res = render_interval(o[idx], d[idx], tr[idx], scene, settings, anchor=scene.anchor)
            C[idx], B[idx], A[idx], depth[idx] = res["C"], res["B"], res["A"], res["depth"]
        return C, B, A, depth, tr.X, tr.surface

    parts = _run_tiles(tile, n, settings)
    C, B, A, depth, X, surf = (np.concatenate(p) for p in zip(*parts))
    raw = C + (1 - A)[:, None] * bg
    I_raw = ImageBuffer.rgb(raw.reshape(h, w, 3))
    I_map = ImageBuffer.scalar(np.clip(B, 0, 1).reshape(h, w, 1))
    M_s = ImageBuffer.scalar(np.clip(A, 0, 1).reshape(h, w, 1))
    depth_img = ImageBuffer.scalar(depth.reshape(h, w, 1))
    if scene.anchor is not None and scene.frontal is not None:
        normals = None
        if settings.cull_backfacing:
            from .fields import sdf_gradient

            normals = np.zeros((n, 3))
            normals[surf] = sdf_gradient(scene.field, X[surf], scene.oracle)
            normals = normals.reshape(h, w, 3)
        warped = warp_anchor(scene.anchor, scene.frontal, camera, depth_img, M_s, bg, normals)
        I_v = image_blend(I_raw, I_map, warped)
    else:
        warped = None
        I_v = I_raw
    return RenderProduct(I_raw, I_map, M_s, depth_img, I_v, X.reshape(h, w, 3), surf.reshape(h, w), warped)


def render_alpha_map(source, camera: OrthoCamera, settings: RenderSettings = RenderSettings(), *,
                     density: DensityParams | None = None, trace: TraceSettings = TraceSettings(),
                     oracle: PriorOracle | None = None, step: float = 0.01) -> ImageBuffer:
    """Silhouette of an occupancy oracle (binary, ray marched) or an SDF's opacity."""
    h, w = camera.height, camera.width
    origins, dirs = _frame_rays(camera, settings)
    if isinstance(source, OccupancyOracle):
        def tile(lo, hi):
            hit, _ = ray_march_occupancy(source, origins[lo:hi], dirs[lo:hi], step=step, t_max=trace.t_max)
            return hit.astype(np.float64)
    else:
        if density is None:
            raise ValueError("an SDF alpha map needs density parameters")
        scene = Scene(field=source, oracle=oracle, density=density, trace=trace)
        eval_dtype = np.dtype(settings.dtype) if isinstance(source, NeuralSdf) else None

        def tile(lo, hi):
            o, d = origins[lo:hi], dirs[lo:hi]
            tr = trace_frame(source, o, d, trace, settings, oracle, eval_dtype)
            A = np.zeros(hi - lo)
            idx = np.flatnonzero(tr.surface)
            if idx.size:
                A[idx] = render_interval(o[idx], d[idx], tr[idx], scene, settings, shade=False)["A"]
            return A

    A = np.concatenate(_run_tiles(tile, h * w, settings))
    return ImageBuffer.scalar(A.reshape(h, w, 1))
