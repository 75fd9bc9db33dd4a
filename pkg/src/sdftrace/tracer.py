"""Sphere tracing of SDF fields and ray marching of occupancy oracles.

Both work on batches of rays: ``origins`` and ``directions`` of shape
``(N, 3)``. Passing a single :class:`~sdftrace.core.Ray` returns 0-d results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Array, Ray
from .fields import NeuralSdf, SdfField

HIT, MISS, MAX_ITER = 0, 1, 2
STATUS_NAMES = {HIT: "hit", MISS: "miss", MAX_ITER: "max_iter"}

SCENE_BOUNDS = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)


@dataclass(frozen=True)
class TraceSettings:
    t_start: float = 0.0
    n_max: int = 12
    eps: float = 1e-3
    t_max: float = 4.0

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.t_max > self.t_start:
            raise ValueError("t_max must exceed t_start")


@dataclass
class TraceResult:
    status: Array  # int8 codes HIT / MISS / MAX_ITER
    X: Array  # last evaluated point
    t: Array
    iterations: Array
    final_s: Array
    started_inside: Array

    @property
    def hit(self) -> Array:
        return self.status == HIT

    @property
    def surface(self) -> Array:
        """Rays treated as surface hits when rendering (hit or max_iter)."""
        return self.status != MISS

    def status_name(self, i=None) -> str:
        code = self.status if i is None else self.status[i]
        return STATUS_NAMES[int(code)]

    def __getitem__(self, idx) -> "TraceResult":
        return TraceResult(self.status[idx], self.X[idx], self.t[idx], self.iterations[idx],
                           self.final_s[idx], self.started_inside[idx])


def _eval(field: SdfField, X: Array, oracle, dtype=None) -> Array:
    if dtype is not None:
        X = X.astype(dtype, copy=False)
    if isinstance(field, NeuralSdf):
        return field.eval(X, oracle)
    return field.eval(X)


def _as_batch(ray_or_origins, directions):
    if isinstance(ray_or_origins, Ray):
        return ray_or_origins.origin[None], ray_or_origins.direction[None], True
    return np.asarray(ray_or_origins), np.asarray(directions), False


def sphere_trace(field: SdfField, rays, directions=None, settings: TraceSettings = TraceSettings(),
                 oracle=None, record: list | None = None, dtype=None) -> TraceResult:
    """March ``X_n = o + (t_start + sum_{i<n} s(X_i)) d``.

    A ray is a hit once ``|s| <= eps``, a miss once the accumulated ``t``
    passes ``t_max``, and ``max_iter`` after ``n_max`` steps (reporting the
    last point). Rays whose first sample is inside are hits at ``t_start``
    with ``started_inside`` set. Backward steps never go before ``t_start``.

    ``record`` (single ray only) collects the ``(t, s)`` sequence.
    ``dtype`` sets the precision of field evaluations; positions stay in the
    precision of ``origins``.
    """
    origins, dirs, single = _as_batch(rays, directions)
    dtype_eval = dtype
    dtype = origins.dtype if origins.dtype.kind == "f" else np.dtype(np.float64)
    n = origins.shape[0]
    t = np.full(n, settings.t_start, dtype)
    X = origins + t[:, None] * dirs
    s = np.asarray(_eval(field, X, oracle, dtype_eval), dtype)
    status = np.full(n, MAX_ITER, np.int8)
    iters = np.zeros(n, np.int32)
    inside = s < 0
    status[inside] = HIT
    if record is not None:
        record.append((float(t[0]), float(s[0])))

    active = np.flatnonzero(~inside)
    eps = settings.eps
    for _ in range(settings.n_max):
        if active.size == 0:
            break
        sa = s[active]
        conv = np.abs(sa) <= eps
        status[active[conv]] = HIT
        active = active[~conv]
        if active.size == 0:
            break
        t_new = np.maximum(t[active] + s[active], settings.t_start)
        escaped = t_new > settings.t_max
        status[active[escaped]] = MISS
        active = active[~escaped]
        t_new = t_new[~escaped]
        if active.size == 0:
            break
        t[active] = t_new
        X[active] = origins[active] + t_new[:, None] * dirs[active]
        s[active] = _eval(field, X[active], oracle, dtype_eval)
        iters[active] += 1
        if record is not None:
            record.append((float(t[0]), float(s[0])))
    if active.size:
        conv = np.abs(s[active]) <= eps
        status[active[conv]] = HIT

    result = TraceResult(status, X, t, iters, s, inside)
    return result[0] if single else result


def continue_stalled(field: SdfField, origins: Array, dirs: Array, result: TraceResult, settings: TraceSettings,
                     extra: int, oracle=None, dtype=None) -> TraceResult:
    """Give ``max_iter`` rays up to ``extra`` further steps from their last point.

    Grazing rays that stall just inside a silhouette usually converge and
    rays passing just outside it usually escape; whatever is still stalled
    keeps ``max_iter``. Iteration counts include the extra steps.
    """
    idx = np.flatnonzero(result.status == MAX_ITER)
    if extra <= 0 or idx.size == 0:
        return result
    o = np.asarray(origins)[idx]
    d = np.asarray(dirs)[idx]
    more = sphere_trace(field, result.X[idx], d, TraceSettings(0.0, extra, settings.eps, settings.t_max),
                        oracle=oracle, dtype=dtype)
    status, X, t = result.status.copy(), result.X.copy(), result.t.copy()
    iters, s = result.iterations.copy(), result.final_s.copy()
    t_new = t[idx] + more.t
    st = more.status.copy()
    st[t_new > settings.t_max] = MISS
    status[idx] = st
    t[idx] = t_new
    X[idx] = o + t_new[:, None] * d
    iters[idx] += more.iterations
    s[idx] = more.final_s
    return TraceResult(status, X, t, iters, s, result.started_inside)


def box_interval(origins: Array, dirs: Array, bounds=SCENE_BOUNDS) -> tuple[Array, Array]:
    """Entry/exit parameters of each ray with an axis-aligned box (``t0 > t1`` if none)."""
    lo = np.asarray(bounds[:3], np.float64)
    hi = np.asarray(bounds[3:], np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.where(np.isnan(ta), -np.inf, np.minimum(ta, tb))
    tmax = np.where(np.isnan(ta), np.inf, np.maximum(ta, tb))
    # parallel rays outside a slab never enter
    par = dirs == 0
    out_slab = par & ((origins < lo) | (origins > hi))
    tmin = np.where(par, -np.inf, tmin)
    tmax = np.where(par, np.inf, tmax)
    t0 = tmin.max(axis=-1)
    t1 = tmax.min(axis=-1)
    t1 = np.where(out_slab.any(axis=-1), -np.inf, t1)
    return t0, t1


def ray_march_occupancy(oracle, rays, directions=None, step: float = 0.01, t_max: float = 4.0,
                        bounds=None, block: int = 32) -> tuple[Array, Array]:
    """First sample ``t = k * step`` (``k >= 0``) with occupancy >= 0.5.

    Only samples inside ``bounds`` (the oracle's, else the scene box) are
    evaluated; the oracle is taken to be empty outside. With a soft oracle
    the hit is refined linearly between the bracketing samples. Objects
    thinner than ``step`` can fall between samples and be missed.
    Returns ``(hit, t_hit)`` with ``t_hit = nan`` for misses.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    origins, dirs, single = _as_batch(rays, directions)
    origins = np.asarray(origins, np.float64)
    dirs = np.asarray(dirs, np.float64)
    n = origins.shape[0]
    bounds = bounds or getattr(oracle, "bbox", None) or SCENE_BOUNDS
    t0, t1 = box_interval(origins, dirs, bounds)
    t1 = np.minimum(t1, t_max)
    k0 = np.maximum(np.ceil(np.maximum(t0, 0.0) / step), 0)
    k1 = np.floor(t1 / step)
    hit = np.zeros(n, bool)
    t_hit = np.full(n, np.nan)
    soft = bool(getattr(oracle, "soft", False))

    active = np.flatnonzero(k1 >= k0)
    k_cur = k0.copy()
    prev_o = np.zeros(n)
    first = np.ones(n, bool)
    while active.size:
        ks = k_cur[active, None] + np.arange(block)[None, :]
        valid = ks <= k1[active, None]
        ts = ks * step
        pts = origins[active, None, :] + ts[..., None] * dirs[active, None, :]
        o = np.where(valid, oracle.eval(pts), 0.0)
        occ = (o >= 0.5) & valid
        any_hit = occ.any(axis=1)
        j = np.argmax(occ, axis=1)
        rows = np.flatnonzero(any_hit)
        idx = active[rows]
        jj = j[rows]
        th = ts[rows, jj]
        if soft:
            o_hit = o[rows, jj]
            o_prev = np.where(jj > 0, o[rows, np.maximum(jj - 1, 0)], prev_o[idx])
            has_prev = (jj > 0) | ~first[idx]
            denom = o_hit - o_prev
            frac = np.where(has_prev & (denom > 0), (0.5 - o_prev) / np.where(denom > 0, denom, 1), 1.0)
            th = th - step * (1.0 - np.clip(frac, 0.0, 1.0))
        hit[idx] = True
        t_hit[idx] = th
        rest = np.flatnonzero(~any_hit)
        last_valid = valid[rest].sum(axis=1) - 1
        prev_o[active[rest]] = o[rest, np.maximum(last_valid, 0)]
        first[active[rest]] = False
        k_cur[active] += block
        active = active[rest]
        active = active[k_cur[active] <= k1[active]]
    if single:
        return hit[0], t_hit[0]
    return hit, t_hit
