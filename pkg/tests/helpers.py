import numpy as np

from sdftrace.fields import NeuralSdf, SdfOccupancy, Sphere, geometric_init
from sdftrace.neural import PositionalFeatures, PriorOracle


def sphere_oracle(radius=1.0, tau=None, n_freqs=8, dim=257, color_fn=None):
    occ = SdfOccupancy(Sphere(radius), tau)
    return PriorOracle(PositionalFeatures(occ, dim=dim, n_freqs=n_freqs), occ, color_fn)


def small_neural_sdf(seed=0, widths=(24, 16, 8, 1), n_freqs=2, radius=0.5, tau=0.1, dtype=np.float64):
    """A small neural SDF (position + 2-frequency encoding + soft occupancy)."""
    oracle = sphere_oracle(radius=radius, tau=tau, n_freqs=n_freqs, dim=widths[0] - 3)
    w = geometric_init(np.random.default_rng(seed), widths, radius=radius)
    # perturb so inactive rows and all layers carry non-trivial values
    r = np.random.default_rng(seed + 1)
    for layer in w.layers:
        layer.weight += 0.05 * r.standard_normal(layer.weight.shape)
        layer.bias += 0.05 * r.standard_normal(layer.bias.shape)
    return NeuralSdf(w.astype(dtype), oracle), oracle


def central_diff(fn, x, h=1e-4):
    """Richardson-extrapolated central difference of ``fn`` along each axis of ``x``'s last dim.

    Plain central differences at ``h`` carry an ``O(h^2)`` truncation error that
    is large for softplus(beta=100) networks; combining steps ``h`` and ``h/2``
    cancels it to ``O(h^4)``.
    """
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for e in np.eye(x.shape[-1]):
        d1 = (fn(x + h * e) - fn(x - h * e)) / (2 * h)
        d2 = (fn(x + 0.5 * h * e) - fn(x - 0.5 * h * e)) / h
        cols.append((4 * d2 - d1) / 3)
    return np.stack(cols, -1)


# -- closed-form ray intersections (first entry t >= 0, nan if none) -----------------


def hit_sphere(o, d, center, radius):
    oc = np.asarray(o, float) - np.asarray(center, float)
    b = oc @ d
    c = oc @ oc - radius * radius
    disc = b * b - c
    if disc < 0:
        return np.nan
    t = -b - np.sqrt(disc)
    return t if t >= 0 else np.nan


def hit_box(o, d, half, center=(0.0, 0.0, 0.0)):
    o = np.asarray(o, float) - np.asarray(center, float)
    t_near, t_far = -np.inf, np.inf
    for i in range(3):
        if d[i] == 0.0:
            if abs(o[i]) > half[i]:
                return np.nan
            continue
        t1 = (-half[i] - o[i]) / d[i]
        t2 = (half[i] - o[i]) / d[i]
        t_near = max(t_near, min(t1, t2))
        t_far = min(t_far, max(t1, t2))
    if t_near > t_far or t_near < 0:
        return np.nan
    return t_near


def hit_capsule(o, d, a, b, r):
    """Cylinder body first, then the nearer end cap sphere."""
    o, d, a, b = (np.asarray(v, float) for v in (o, d, a, b))
    ba, oa = b - a, o - a
    baba, bard, baoa = ba @ ba, ba @ d, ba @ oa
    rdoa, oaoa = d @ oa, oa @ oa
    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - r * r * baba
    h = qb * qb - qa * qc
    if h < 0:
        return np.nan
    if qa > 0:
        t = (-qb - np.sqrt(h)) / qa
        y = baoa + t * bard
        if 0 < y < baba and t >= 0:
            return t
    ts = [hit_sphere(o, d, a, r), hit_sphere(o, d, b, r)]
    ts = [t for t in ts if np.isfinite(t)]
    return min(ts) if ts else np.nan


def analytic_hit(shape, o, d):
    from sdftrace.fields import Box, Capsule, Sphere

    if isinstance(shape, Sphere):
        return hit_sphere(o, d, shape.center, shape.radius)
    if isinstance(shape, Box):
        return hit_box(o, d, shape.half_extents, shape.center)
    if isinstance(shape, Capsule):
        return hit_capsule(o, d, shape.a, shape.b, shape.radius)
    raise TypeError(type(shape))


def random_hitting_rays(shape, n, rng, distance=3.0, extent=1.2):
    """Parallel-projection style rays from random directions that hit ``shape``.

    Origins lie on a plane ``distance`` from the origin, uniformly over a
    square of half-size ``extent``; rays that miss are rejected.
    """
    origins, dirs, ts = [], [], []
    while len(ts) < n:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        e1 = np.cross(d, [0.0, 1.0, 0.0] if abs(d[1]) < 0.9 else [1.0, 0.0, 0.0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(d, e1)
        u, v = rng.uniform(-extent, extent, 2)
        o = -distance * d + u * e1 + v * e2
        t = analytic_hit(shape, o, d)
        if np.isfinite(t):
            origins.append(o)
            dirs.append(d)
            ts.append(t)
    return np.array(origins), np.array(dirs), np.array(ts)


# -- scenes ---------------------------------------------------------------------------


def constant_decoder(feature_dim, channels=4, rgb=None, b=None, rng=None, hidden=8):
    """Decoder whose sigmoid outputs are pinned by saturated biases (``None`` keeps a random output)."""
    from sdftrace.neural import Layer, MlpWeights, make_decoder

    rng = rng or np.random.default_rng(0)
    dec = make_decoder(feature_dim, rng, channels=channels, hidden=hidden)
    last = dec.layers[-1]
    pins = list(rgb) if rgb is not None else [None] * 3
    pins.append(b)
    for j, v in enumerate(pins):
        if v is None:
            continue
        last.weight[:, j] = 0.0
        last.bias[j] = 100.0 if v == 1 else (-100.0 if v == 0 else float(np.log(v / (1 - v))))
    return MlpWeights([dec.layers[0], last])


def make_scene(field, *, rgb=None, b=None, anchor=None, frontal=None, alpha=0.02, seed=0,
               feature_dim=16, channels=4, tp_res=8, color_fn=None, tau=None):
    from sdftrace.fields import DensityParams, SdfOccupancy
    from sdftrace.neural import PositionalFeatures, TriPlane
    from sdftrace.renderer import Scene

    occ = SdfOccupancy(field, tau)
    oracle = PriorOracle(PositionalFeatures(occ, dim=feature_dim, n_freqs=2), occ, color_fn)
    dec = constant_decoder(feature_dim, channels, rgb, b, np.random.default_rng([seed, 1]))
    tp = TriPlane.from_seed(seed, tp_res, channels)
    return Scene(field=field, oracle=oracle, triplane=tp, decoder=dec, density=DensityParams(alpha),
                 anchor=anchor, frontal=frontal)


def dense_interval_reference(o, d, t_hit, scene, halfwidth, n=512):
    """Per-ray loop over ``n`` midpoint cells: (C, B, A) with T_i = prod_{j<i} exp(-sigma_j delta)."""
    from sdftrace.neural import decode

    alpha = scene.density.alpha
    delta = 2 * halfwidth / n
    out = []
    for oi, di, th in zip(o, d, t_hit):
        ts = th - halfwidth + (np.arange(n) + 0.5) * delta
        X = oi + ts[:, None] * di
        s = scene.field.eval(X)
        sigma = 1.0 / (1.0 + np.exp(s / alpha)) / alpha
        dec = decode(scene.triplane, scene.decoder, X, scene.oracle)
        T, C, B, A = 1.0, np.zeros(3), 0.0, 0.0
        for k in range(n):
            w = T * (1.0 - np.exp(-sigma[k] * delta))
            C += w * dec.c[k]
            B += w * dec.b[k]
            A += w
            T *= np.exp(-sigma[k] * delta)
        out.append((C, B, A))
    C, B, A = zip(*out)
    return np.array(C), np.array(B), np.array(A)
