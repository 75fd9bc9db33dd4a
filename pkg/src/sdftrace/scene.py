"""YAML scene configuration: parsing, validation and assembly.

Schema (all keys optional unless noted; paths are relative to the file)::

    field:     {type: sphere|box|capsule|neural, radius, center, half_extents, a, b, weights}
    density:   {alpha}
    oracle:
      features:  {dim, n_freqs, max_log2}
      occupancy: {shape: <field mapping>, tau} | {grid: path}   (default: the analytic field)
      color:     {type: constant, value: [r, g, b]} | {type: normal}
    triplane:  {path} | {seed, resolution, channels}
    decoder:   {path} | {seed, hidden}
    anchor:    path to a PNG
    frontal:   {yaw, pitch, half_width, half_height, distance}   (degrees)
    cameras:   [{yaw, pitch}, ...]                                 (degrees)
    render:    {width, height, n_samples, interval_k, background, cull_backfacing, tile}
    trace:     {t_start, n_max, eps, t_max}
    seed:      integer
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .core import FormatError, ImageBuffer, OrthoCamera, normalize
from .fields import (
    Box,
    Capsule,
    DensityParams,
    GridOccupancy,
    NeuralSdf,
    SdfField,
    SdfOccupancy,
    Sphere,
)
from .neural import (
    MlpWeights,
    PositionalFeatures,
    PriorOracle,
    TriPlane,
    load_weights,
    make_decoder,
)
from .renderer import RenderSettings, Scene
from .tracer import TraceSettings


class SceneError(ValueError):
    """A scene file failed validation; the message names the key path."""


_MISSING = object()


class _Node:
    """Typed access to a mapping, remembering the key path for diagnostics."""

    def __init__(self, data: Any, path: str, source: str):
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise SceneError(f"{source}: {path or '<root>'}: expected a mapping, got {type(data).__name__}")
        self.data, self.path, self.source = data, path, source

    def _key(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def fail(self, key: str, msg: str):
        raise SceneError(f"{self.source}: {self._key(key)}: {msg}")

    def has(self, key: str) -> bool:
        return key in self.data

    def raw(self, key: str, default=_MISSING):
        if key not in self.data:
            if default is _MISSING:
                self.fail(key, "missing required key")
            return default
        return self.data[key]

    def child(self, key: str) -> "_Node":
        return _Node(self.data.get(key), self._key(key), self.source)

    def number(self, key: str, default=_MISSING, *, positive=False, nonneg=False) -> float:
        v = self.raw(key, default)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(key, f"expected a number, got {v!r}")
        v = float(v)
        if not math.isfinite(v):
            self.fail(key, "must be finite")
        if positive and not v > 0:
            self.fail(key, f"must be positive, got {v}")
        if nonneg and v < 0:
            self.fail(key, f"must be nonnegative, got {v}")
        return v

    def integer(self, key: str, default=_MISSING, *, minimum: int | None = None) -> int:
        v = self.raw(key, default)
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(key, f"expected an integer, got {v!r}")
        if minimum is not None and v < minimum:
            self.fail(key, f"must be >= {minimum}, got {v}")
        return v

    def boolean(self, key: str, default=_MISSING) -> bool:
        v = self.raw(key, default)
        if not isinstance(v, bool):
            self.fail(key, f"expected true or false, got {v!r}")
        return v

    def string(self, key: str, default=_MISSING, choices=None) -> str:
        v = self.raw(key, default)
        if not isinstance(v, str):
            self.fail(key, f"expected a string, got {v!r}")
        if choices is not None and v not in choices:
            self.fail(key, f"must be one of {sorted(choices)}, got {v!r}")
        return v

    def vector(self, key: str, default=_MISSING, n: int = 3) -> tuple[float, ...]:
        v = self.raw(key, default)
        if (not isinstance(v, (list, tuple)) or len(v) != n
                or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in v)):
            self.fail(key, f"expected a list of {n} numbers, got {v!r}")
        return tuple(float(x) for x in v)

    def file(self, key: str, base: Path) -> Path:
        p = base / self.string(key)
        if not p.is_file():
            self.fail(key, f"file not found: {p}")
        return p

    def check_keys(self, allowed) -> None:
        for k in self.data:
            if k not in allowed:
                self.fail(str(k), f"unknown key (allowed: {', '.join(sorted(allowed))})")


@dataclass
class CameraSpec:
    yaw: float = 0.0  # degrees
    pitch: float = 0.0
    half_width: float = 1.2
    half_height: float = 2.4
    distance: float = 2.0

    def camera(self, width: int, height: int) -> OrthoCamera:
        return OrthoCamera.from_yaw_pitch(math.radians(self.yaw), math.radians(self.pitch),
                                          distance=self.distance, half_width=self.half_width,
                                          half_height=self.half_height, width=width, height=height)


@dataclass
class SceneConfig:
    source: Path
    field: SdfField
    density: DensityParams
    oracle: PriorOracle
    triplane: TriPlane
    decoder: MlpWeights
    anchor: ImageBuffer | None
    frontal: CameraSpec
    cameras: list[CameraSpec]
    render: RenderSettings
    trace: TraceSettings
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def scene(self) -> Scene:
        frontal = self.frontal.camera(self.render.width, self.render.height)
        return Scene(field=self.field, oracle=self.oracle, triplane=self.triplane, decoder=self.decoder,
                     density=self.density, anchor=self.anchor, frontal=frontal if self.anchor else None,
                     trace=self.trace, meta={"source": str(self.source)})

    def frontal_camera(self) -> OrthoCamera:
        return self.frontal.camera(self.render.width, self.render.height)


_SHAPES = {"sphere", "box", "capsule"}


def _analytic(node: _Node) -> SdfField:
    kind = node.string("type", choices=_SHAPES)
    center = node.vector("center", (0.0, 0.0, 0.0))
    if kind == "sphere":
        node.check_keys({"type", "radius", "center"})
        return Sphere(node.number("radius", 0.5, positive=True), np.array(center))
    if kind == "box":
        node.check_keys({"type", "half_extents", "center"})
        he = node.vector("half_extents", (0.4, 0.6, 0.3))
        if min(he) <= 0:
            node.fail("half_extents", "all entries must be positive")
        return Box(np.array(he), np.array(center))
    node.check_keys({"type", "a", "b", "radius"})
    return Capsule(np.array(node.vector("a", (0.0, -0.5, 0.0))), np.array(node.vector("b", (0.0, 0.5, 0.0))),
                   node.number("radius", 0.3, positive=True))


def _camera(node: _Node, default: CameraSpec) -> CameraSpec:
    node.check_keys({"yaw", "pitch", "half_width", "half_height", "distance"})
    return CameraSpec(node.number("yaw", default.yaw), node.number("pitch", default.pitch),
                      node.number("half_width", default.half_width, positive=True),
                      node.number("half_height", default.half_height, positive=True),
                      node.number("distance", default.distance, positive=True))


def _color_fn(node: _Node, occupancy_field: SdfField | None):
    kind = node.string("type", choices={"constant", "normal"})
    if kind == "constant":
        node.check_keys({"type", "value"})
        value = np.clip(np.array(node.vector("value", (0.5, 0.5, 0.5))), 0.0, 1.0)
        return lambda X: np.broadcast_to(value, np.shape(X)[:-1] + (3,)).copy()
    node.check_keys({"type"})
    if occupancy_field is None:
        node.fail("type", "normal colouring needs an analytic occupancy shape")
    return lambda X: 0.5 * (normalize(occupancy_field.gradient(np.asarray(X, np.float64))) + 1.0)


def parse_scene(path) -> SceneConfig:
    """Load and validate a scene file; every problem raises :class:`SceneError`."""
    try:
        return _parse_scene(Path(path))
    except SceneError:
        raise
    except (ValueError, OSError, TypeError) as exc:
        raise SceneError(f"{path}: {exc}") from exc


def _parse_scene(path: Path) -> SceneConfig:
    src = str(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise SceneError(f"{src}: cannot read scene file: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SceneError(f"{src}: invalid YAML: {exc}") from exc
    root = _Node(data, "", src)
    root.check_keys({"field", "density", "oracle", "triplane", "decoder", "anchor", "frontal", "cameras",
                     "render", "trace", "seed"})
    base = path.parent
    seed = root.integer("seed", 0, minimum=0)

    fnode = root.child("field")
    if not root.has("field"):
        root.fail("field", "missing required key")
    kind = fnode.string("type", choices=_SHAPES | {"neural"})
    neural_weights = None
    if kind == "neural":
        fnode.check_keys({"type", "weights"})
        wpath = fnode.file("weights", base)
        try:
            neural_weights = load_weights(wpath)
        except FormatError as exc:
            fnode.fail("weights", str(exc))
        analytic = None
    else:
        analytic = _analytic(fnode)

    dnode = root.child("density")
    dnode.check_keys({"alpha"})
    density = DensityParams(dnode.number("alpha", 0.02, positive=True))

    onode = root.child("oracle")
    onode.check_keys({"features", "occupancy", "color"})
    feat = onode.child("features")
    feat.check_keys({"dim", "n_freqs", "max_log2"})
    occ_node = onode.child("occupancy")
    occ_node.check_keys({"shape", "grid", "tau"})
    occ_shape = None
    if occ_node.has("grid"):
        gpath = occ_node.file("grid", base)
        try:
            occupancy = GridOccupancy.load(gpath)
        except FormatError as exc:
            occ_node.fail("grid", str(exc))
    else:
        if occ_node.has("shape"):
            occ_shape = _analytic(occ_node.child("shape"))
        elif analytic is not None:
            occ_shape = analytic
        else:
            onode.fail("occupancy", "a neural field needs an explicit occupancy shape or grid")
        tau = occ_node.raw("tau", None)
        tau = None if tau is None else occ_node.number("tau", positive=True)
        occupancy = SdfOccupancy(occ_shape, tau)
    dim = feat.integer("dim", 257, minimum=1)
    try:
        features = PositionalFeatures(occupancy, dim=dim, n_freqs=feat.integer("n_freqs", 8, minimum=1),
                                      max_log2=feat.number("max_log2", 3.0))
    except ValueError as exc:
        feat.fail("dim", str(exc))
    color_fn = _color_fn(onode.child("color"), occ_shape) if onode.has("color") else None
    oracle = PriorOracle(features, occupancy, color_fn, dim)

    if neural_weights is not None:
        if neural_weights.in_dim < 3 + dim:
            fnode.fail("weights", f"network input dim {neural_weights.in_dim} < 3 + feature dim {dim}")
        field_obj: SdfField = NeuralSdf(neural_weights, oracle)
    else:
        field_obj = analytic

    tnode = root.child("triplane")
    tnode.check_keys({"path", "seed", "resolution", "channels"})
    if tnode.has("path"):
        try:
            triplane = TriPlane.load(tnode.file("path", base))
        except FormatError as exc:
            tnode.fail("path", str(exc))
    else:
        triplane = TriPlane.from_seed(tnode.integer("seed", seed, minimum=0),
                                      tnode.integer("resolution", 256, minimum=2),
                                      tnode.integer("channels", 32, minimum=1))

    cnode = root.child("decoder")
    cnode.check_keys({"path", "seed", "hidden"})
    if cnode.has("path"):
        try:
            decoder = load_weights(cnode.file("path", base))
        except FormatError as exc:
            cnode.fail("path", str(exc))
    else:
        decoder = make_decoder(dim, np.random.default_rng(cnode.integer("seed", seed, minimum=0)),
                               channels=triplane.channels, hidden=cnode.integer("hidden", 64, minimum=1))
    expected = triplane.channels + dim
    if decoder.in_dim != expected:
        cnode.fail("path" if cnode.has("path") else "hidden",
                   f"decoder input dim {decoder.in_dim} != tri-plane channels {triplane.channels} "
                   f"+ feature dim {dim} = {expected}")
    if decoder.out_dim != 4:
        cnode.fail("path", f"decoder output dim {decoder.out_dim} != 4")

    anchor = None
    if root.has("anchor"):
        apath = root.file("anchor", base)
        try:
            anchor = ImageBuffer.load_png(apath)
        except Exception as exc:  # Pillow raises several unrelated types
            root.fail("anchor", f"cannot read image {apath}: {exc}")
        if anchor.channels != 3:
            root.fail("anchor", "anchor image must be RGB")

    frontal = _camera(root.child("frontal"), CameraSpec())
    cams_raw = root.raw("cameras", [{"yaw": 0.0, "pitch": 0.0}])
    if not isinstance(cams_raw, list) or not cams_raw:
        root.fail("cameras", "expected a non-empty list")
    cameras = [_camera(_Node(c, f"cameras[{i}]", src), frontal) for i, c in enumerate(cams_raw)]

    rnode = root.child("render")
    rnode.check_keys({"width", "height", "n_samples", "interval_k", "background", "cull_backfacing", "tile"})
    bg = rnode.vector("background", (1.0, 1.0, 1.0))
    if min(bg) < 0 or max(bg) > 1:
        rnode.fail("background", "entries must lie in [0, 1]")
    render = RenderSettings(
        n_samples=rnode.integer("n_samples", 6, minimum=2),
        interval_k=rnode.number("interval_k", 3.0, positive=True),
        background=bg,
        width=rnode.integer("width", 256, minimum=1),
        height=rnode.integer("height", 512, minimum=1),
        cull_backfacing=rnode.boolean("cull_backfacing", False),
        tile=rnode.integer("tile", 4096, minimum=1),
    )

    trnode = root.child("trace")
    trnode.check_keys({"t_start", "n_max", "eps", "t_max"})
    t_start = trnode.number("t_start", 0.0, nonneg=True)
    t_max = trnode.number("t_max", 4.0, positive=True)
    if t_max <= t_start:
        trnode.fail("t_max", f"must exceed t_start ({t_start})")
    trace = TraceSettings(t_start=t_start, n_max=trnode.integer("n_max", 12, minimum=1),
                          eps=trnode.number("eps", 1e-3, positive=True), t_max=t_max)

    return SceneConfig(path, field_obj, density, oracle, triplane, decoder, anchor, frontal, cameras,
                       render, trace, seed, data or {})
