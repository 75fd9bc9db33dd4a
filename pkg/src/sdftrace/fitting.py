"""Fit a neural SDF and its density sharpness to an occupancy oracle."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Array, OrthoCamera
from .fields import DensityParams, NeuralSdf, OccupancyOracle, occupancy_eval
from .losses import (
    GeoLossWeights,
    combine_geo,
    eikonal_points,
    loss_3d_sdf_grad,
    loss_eikonal_grad,
    loss_mask_grad,
    mask_iou,
    random_view_sampler,
)
from .neural import PriorOracle
from .renderer import RenderSettings, render_alpha_map
from .tracer import SCENE_BOUNDS, TraceSettings


class SamplingError(RuntimeError):
    """No level-set crossing could be found."""


class FitDivergedError(FloatingPointError):
    def __init__(self, step: int, components: dict[str, float]):
        detail = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step
        self.components = components


def _line_box(p: Array, d: Array, bounds) -> tuple[Array, Array]:
    """Parameter range where the full line ``p + t d`` lies in the box."""
    lo, hi = bounds
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - p) / d
        tb = (hi - p) / d
    t0 = np.nanmax(np.minimum(ta, tb), axis=-1)
    t1 = np.nanmin(np.maximum(ta, tb), axis=-1)
    return t0, t1


def sample_surface_points(oracle: OccupancyOracle, n: int, seed: int | np.random.Generator = 0, *,
                          bounds=None, step: float = 0.02, iterations: int = 24,
                          max_attempts: int = 64) -> Array:
    """``n`` points on the occupancy 0.5 level set.

    Random lines through the box are sampled at spacing <= ``step``; each
    bracketed crossing is refined by bisection. Deterministic per seed.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bounds = bounds or getattr(oracle, "bbox", None) or SCENE_BOUNDS
    lo = np.asarray(bounds[:3], np.float64)
    hi = np.asarray(bounds[3:], np.float64)
    K = int(math.ceil(np.linalg.norm(hi - lo) / step)) + 1
    lines = max(64, n)
    found: list[Array] = []
    total = 0
    for _ in range(max_attempts):
        p = rng.uniform(lo, hi, (lines, 3))
        d = rng.normal(size=(lines, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        t0, t1 = _line_box(p, d, (lo, hi))
        ts = t0[:, None] + (t1 - t0)[:, None] * np.linspace(0.0, 1.0, K)
        o = occupancy_eval(oracle, p[:, None, :] + ts[..., None] * d[:, None, :]) - 0.5
        inside = o >= 0.0
        r, k = np.nonzero(inside[:, 1:] != inside[:, :-1])
        if r.size:
            a, b = ts[r, k], ts[r, k + 1]
            sa = inside[r, k]
            for _ in range(iterations):
                m = 0.5 * (a + b)
                sm = occupancy_eval(oracle, p[r] + m[:, None] * d[r]) >= 0.5
                same = sm == sa
                a = np.where(same, m, a)
                b = np.where(same, b, m)
            found.append(p[r] + (0.5 * (a + b))[:, None] * d[r])
            total += r.size
        if total >= n:
            pts = np.concatenate(found)
            return pts[rng.permutation(pts.shape[0])[:n]]
    raise SamplingError(f"found {total} of {n} surface points after {max_attempts} attempts")


@dataclass(frozen=True)
class FitConfig:
    steps: int = 1600
    batch_surface: int = 512
    batch_eik: int = 1024
    learning_rate: float = 1e-3
    lr_schedule: str = "cosine"
    lr_final_ratio: float = 0.01
    alpha_learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_height: int = 128
    mask_width: int = 64
    seed: int = 0
    alpha_init: float = 0.1
    mask_interval_k: float = 6.0
    perturb_sigma: float = 0.05
    march_step: float = 0.01
    eval_points: int = 4096
    eval_height: int = 512
    eval_width: int = 256
    eval_views: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k in ("seed", "beta1", "beta2") or isinstance(v, str):
                continue
            if not v > 0:
                raise ValueError(f"FitConfig.{k} must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r} (constant or cosine)")
        if self.batch_eik <= self.batch_surface:
            raise ValueError("batch_eik must exceed batch_surface (it includes the perturbed surface batch)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def learning_rate_at(config: FitConfig, step: int) -> float:
    """Step size for ``step``; cosine decays from the base rate to ``lr_final_ratio`` of it."""
    if config.lr_schedule == "constant" or config.steps == 1:
        return config.learning_rate
    frac = step / (config.steps - 1)
    r = config.lr_final_ratio + (1.0 - config.lr_final_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac))
    return config.learning_rate * r


@dataclass
class FitReport:
    losses: list[dict[str, float]] = field(default_factory=list)
    surface_abs_mean: float = math.nan
    surface_abs_max: float = math.nan
    eik_abs_mean: float = math.nan
    eik_abs_max: float = math.nan
    mask_iou: float = math.nan
    alpha: float = math.nan
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


class Adam:
    """Bias-corrected adaptive moments; updates the arrays in place."""

    def __init__(self, params: list[Array], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self, grads: list[Array]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def _flatten(grads) -> list[Array]:
    return [a for pair in grads for a in pair]


def _accumulate(total: list[Array], grads, weight: float) -> None:
    if grads is None or weight == 0.0:
        return
    for acc, g in zip(total, _flatten(grads)):
        acc += weight * g


def geo_step(field: NeuralSdf, oracle: PriorOracle, camera: OrthoCamera, alpha: float,
             weights: GeoLossWeights, config: FitConfig, rng: np.random.Generator,
             M_o=None) -> tuple[float, dict[str, float], list[Array], float]:
    """Loss components, weight gradient and ``d/d log(alpha)`` for one batch."""
    surface = sample_surface_points(oracle.occupancy, config.batch_surface, rng)
    eik_pts = eikonal_points(surface, rng, config.batch_eik - config.batch_surface, config.perturb_sigma)
    dt = np.dtype(config.dtype)
    if M_o is None:
        M_o = render_alpha_map(oracle.occupancy, camera, RenderSettings(threads=1), step=config.march_step)
    l_sdf, g_sdf = loss_3d_sdf_grad(field, surface.astype(dt), oracle)
    l_eik, g_eik = loss_eikonal_grad(field, eik_pts.astype(dt), oracle)
    l_mask, g_mask, d_log_alpha, _ = loss_mask_grad(field, oracle, camera, M_o, alpha,
                                                     interval_k=config.mask_interval_k, dtype=dt)
    comps = {"mask": l_mask, "3d_sdf": l_sdf, "eik": l_eik}
    total = [np.zeros(p.shape) for p in field.weights.params()]
    _accumulate(total, g_mask, weights.lambda_mask)
    _accumulate(total, g_sdf, weights.lambda_3d_sdf)
    _accumulate(total, g_eik, weights.lambda_eik)
    return combine_geo(comps, weights), comps, total, weights.lambda_mask * d_log_alpha


def evaluate_fit(field: NeuralSdf, oracle: PriorOracle, alpha: float, config: FitConfig,
                 seed: int) -> dict[str, float]:
    """Held-out surface, Eikonal and mask statistics."""
    rng = np.random.default_rng([seed, 1])
    surface = sample_surface_points(oracle.occupancy, config.eval_points, rng)
    s = np.abs(np.asarray(field.eval(surface, oracle), np.float64))
    pts = eikonal_points(surface, rng, config.eval_points, config.perturb_sigma)
    g = np.linalg.norm(np.asarray(field.gradient(pts, oracle), np.float64), axis=-1)
    eik = np.abs(g - 1.0)
    settings = RenderSettings(width=config.eval_width, height=config.eval_height)
    density = DensityParams(alpha)
    ious = []
    for k in range(config.eval_views):
        yaw = 2 * math.pi * k / config.eval_views
        cam = OrthoCamera.from_yaw_pitch(yaw, 0.0, width=config.eval_width, height=config.eval_height)
        M_o = render_alpha_map(oracle.occupancy, cam, settings, step=config.march_step)
        M_s = render_alpha_map(field, cam, settings, density=density, oracle=oracle)
        ious.append(mask_iou(M_o, M_s))
    return {
        "surface_abs_mean": float(s.mean()), "surface_abs_max": float(s.max()),
        "eik_abs_mean": float(eik.mean()), "eik_abs_max": float(eik.max()),
        "mask_iou": float(min(ious)),
    }


def fit_sdf(field: NeuralSdf, oracle: PriorOracle, config: FitConfig = FitConfig(),
            weights: GeoLossWeights = GeoLossWeights(), *, evaluate: bool = True,
            progress=None) -> FitReport:
    """Adam on the weighted geometry loss; updates ``field.weights`` in place.

    The fitted density sharpness is returned in ``report.alpha``.
    """
    if oracle is None or oracle.occupancy is None:
        raise ValueError("fitting needs an oracle with occupancy")
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    sampler = random_view_sampler(config.mask_width, config.mask_height)
    params = field.weights.params()
    log_alpha = np.array([math.log(config.alpha_init)])
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    opt_alpha = Adam([log_alpha], config.alpha_learning_rate, config.beta1, config.beta2, config.adam_eps)
    report = FitReport()
    for step in range(config.steps):
        alpha = float(math.exp(log_alpha[0]))
        camera = sampler(rng)
        total, comps, grads, d_log_alpha = geo_step(field, oracle, camera, alpha, weights, config, rng)
        if not (math.isfinite(total) and all(np.isfinite(g).all() for g in grads) and math.isfinite(d_log_alpha)):
            raise FitDivergedError(step, {**comps, "alpha": alpha})
        report.losses.append({"step": step, "total": total, **comps, "alpha": alpha})
        decay = learning_rate_at(config, step) / config.learning_rate
        opt.lr = config.learning_rate * decay
        opt_alpha.lr = config.alpha_learning_rate * decay
        opt.step(grads)
        opt_alpha.step([np.array([d_log_alpha])])
        if progress is not None:
            progress(step, report.losses[-1])
    report.alpha = float(math.exp(log_alpha[0]))
    if evaluate:
        for k, v in evaluate_fit(field, oracle, report.alpha, config, config.seed).items():
            setattr(report, k, v)
    report.wall_time = time.perf_counter() - start
    return report


def fit_color_stub(oracle: PriorOracle, target_fn) -> PriorOracle:
    """Copy of ``oracle`` whose colour predictor is ``target_fn``."""
    return PriorOracle(oracle.feature_fn, oracle.occupancy, target_fn, oracle.feature_dim)
