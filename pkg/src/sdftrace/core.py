"""Geometric primitives, the orthographic camera, image buffers and sampling.

Points and directions are plain ``numpy`` arrays with a trailing axis of
size 3; every function broadcasts over leading batch dimensions. Scene
geometry is normalized to the box ``[-1, 1]^3`` with the subject facing +z.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import numpy.typing as npt

Array = npt.NDArray[np.floating]

F32IMG_HEADER = struct.Struct("<III")


class BoundsError(IndexError):
    """Pixel index outside the camera resolution."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class FormatError(ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def vec3(x: float, y: float, z: float) -> Array:
    return np.array([x, y, z], dtype=np.float64)


def normalize(v: Array, axis: int = -1) -> Array:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.where(n > 0.0, n, 1.0)


@dataclass(frozen=True)
class Ray:
    origin: Array
    direction: Array

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must have unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> Array:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class OrthoCamera:
    """Orthographic camera; the image plane passes through ``center``.

    Pixel ``(col, row)`` has row 0 at the top of the image, so the normalized
    image coordinate ``v`` grows along ``-up``.
    """

    center: Array
    forward: Array
    up: Array
    right: Array
    half_width: float
    half_height: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("center", "forward", "up", "right"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        f, u, r = self.forward, self.up, self.right
        if max(abs(f @ u), abs(f @ r), abs(u @ r)) > 1e-9:
            raise ValueError("camera axes must be pairwise orthogonal")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be at least 1x1")
        if self.half_width <= 0 or self.half_height <= 0:
            raise ValueError("camera half extents must be positive")

    @classmethod
    def from_yaw_pitch(
        cls,
        yaw: float,
        pitch: float,
        *,
        distance: float = 2.0,
        half_width: float = 1.2,
        half_height: float = 2.4,
        width: int = 256,
        height: int = 512,
        target: Array | None = None,
    ) -> "OrthoCamera":
        """Camera orbiting ``target``; angles in radians.

        ``yaw`` rotates about +y and ``pitch`` about the camera right axis.
        ``(0, 0)`` is the frontal view looking along -z; ``(pi, 0)`` the back.
        """
        target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
        cp, sp = math.cos(pitch), math.sin(pitch)
        cy, sy = math.cos(yaw), math.sin(yaw)
        view = np.array([sy * cp, sp, cy * cp])
        right = np.array([cy, 0.0, -sy])
        forward = -view
        up = np.cross(right, forward)
        return cls(
            center=target + distance * view,
            forward=forward,
            up=up,
            right=right,
            half_width=half_width,
            half_height=half_height,
            width=width,
            height=height,
        )

    @property
    def resolution(self) -> tuple[int, int]:
        return self.width, self.height

    def with_resolution(self, width: int, height: int) -> "OrthoCamera":
        return OrthoCamera(self.center, self.forward, self.up, self.right,
                           self.half_width, self.half_height, width, height)

    def plane_point(self, uv: Array) -> Array:
        """Point on the image plane at normalized image coordinates ``uv``."""
        uv = np.asarray(uv, dtype=np.float64)
        sx = (2.0 * uv[..., 0:1] - 1.0) * self.half_width
        sy = (1.0 - 2.0 * uv[..., 1:2]) * self.half_height
        return self.center + sx * self.right + sy * self.up

    def pixel_uv(self, cols: Array, rows: Array, jitter=(0.5, 0.5)) -> Array:
        cols = np.asarray(cols, dtype=np.float64)
        rows = np.asarray(rows, dtype=np.float64)
        ju, jv = np.broadcast_arrays(*(np.asarray(j, dtype=np.float64) for j in jitter))
        return np.stack([(cols + ju) / self.width, (rows + jv) / self.height], axis=-1)

    def ray_batch(self, cols: Array, rows: Array, jitter=(0.5, 0.5)) -> tuple[Array, Array]:
        """Origins and directions for many pixels; no bounds check."""
        origins = self.plane_point(self.pixel_uv(cols, rows, jitter))
        directions = np.broadcast_to(self.forward, origins.shape).copy()
        return origins, directions

    def all_rays(self, jitter=(0.5, 0.5)) -> tuple[Array, Array]:
        """Row-major rays for the whole frame, shape ``(H*W, 3)`` each."""
        rows, cols = np.divmod(np.arange(self.width * self.height), self.width)
        return self.ray_batch(cols, rows, jitter)


def camera_ray(camera: OrthoCamera, pixel: tuple[int, int], jitter=(0.5, 0.5)) -> Ray:
    col, row = pixel
    if not (0 <= col < camera.width and 0 <= row < camera.height):
        raise BoundsError(f"pixel {pixel} outside resolution {camera.width}x{camera.height}")
    u, v = jitter
    if not (0.0 <= u < 1.0 and 0.0 <= v < 1.0):
        raise ValueError("jitter must lie in [0, 1)^2")
    origin = camera.plane_point(camera.pixel_uv(col, row, jitter))
    return Ray(origin, camera.forward.copy())


def project_ortho(camera: OrthoCamera, X: Array) -> tuple[Array, Array]:
    """Normalized image coordinates and forward depth of ``X``."""
    d = np.asarray(X, dtype=np.float64) - camera.center
    u = 0.5 * (d @ camera.right / camera.half_width + 1.0)
    v = 0.5 * (1.0 - d @ camera.up / camera.half_height)
    return np.stack([u, v], axis=-1), d @ camera.forward


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major image of shape ``(height, width, channels)``."""

    data: Array = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ShapeError(f"image data must be (H, W, 1|3), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ShapeError("image must be non-empty")
        object.__setattr__(self, "data", data)

    @classmethod
    def rgb(cls, data: Array) -> "ImageBuffer":
        return cls(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0))

    @classmethod
    def scalar(cls, data: Array) -> "ImageBuffer":
        return cls(np.asarray(data, dtype=np.float64))

    @classmethod
    def filled(cls, width: int, height: int, value) -> "ImageBuffer":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(np.broadcast_to(value, (height, width, value.size)).copy())

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def save_png(self, path) -> None:
        from PIL import Image

        q = np.floor(np.clip(self.data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        mode = "L" if self.channels == 1 else "RGB"
        Image.fromarray(q[..., 0] if self.channels == 1 else q, mode=mode).save(path)

    @classmethod
    def load_png(cls, path) -> "ImageBuffer":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("L" if im.mode in ("L", "I", "F") else "RGB"))
        return cls(arr.astype(np.float64) / 255.0)

    def save_f32(self, path) -> None:
        h, w, c = self.shape
        payload = np.ascontiguousarray(self.data, dtype="<f4").tobytes()
        Path(path).write_bytes(F32IMG_HEADER.pack(w, h, c) + payload)

    @classmethod
    def load_f32(cls, path) -> "ImageBuffer":
        raw = Path(path).read_bytes()
        if len(raw) < F32IMG_HEADER.size:
            raise FormatError("truncated f32img header", len(raw))
        w, h, c = F32IMG_HEADER.unpack_from(raw)
        expected = F32IMG_HEADER.size + 4 * w * h * c
        if len(raw) != expected:
            raise FormatError(f"f32img payload length {len(raw)} != expected {expected}",
                              F32IMG_HEADER.size)
        data = np.frombuffer(raw, dtype="<f4", offset=F32IMG_HEADER.size).reshape(h, w, c)
        return cls(data.astype(np.float64))


def _bilinear_array(data: Array, uv: Array) -> Array:
    h, w = data.shape[:2]
    dt = data.dtype if data.dtype.kind == "f" else np.dtype(np.float64)
    uv = np.asarray(uv, dtype=dt)
    x = np.clip(uv[..., 0] * w - 0.5, 0.0, w - 1)
    y = np.clip(uv[..., 1] * h - 0.5, 0.0, h - 1)
    x0 = np.minimum(x.astype(np.intp), w - 2) if w > 1 else np.zeros(x.shape, np.intp)
    y0 = np.minimum(y.astype(np.intp), h - 2) if h > 1 else np.zeros(y.shape, np.intp)
    fx = (x - x0)[..., None].astype(dt, copy=False)
    fy = (y - y0)[..., None].astype(dt, copy=False)
    flat = data.reshape(h * w, -1)
    i00 = y0 * w + x0
    dx = 1 if w > 1 else 0
    dy = w if h > 1 else 0
    a = np.take(flat, i00, axis=0)
    b = np.take(flat, i00 + dx, axis=0)
    b -= a
    b *= fx
    a += b  # top row
    c = np.take(flat, i00 + dy, axis=0)
    d = np.take(flat, i00 + dy + dx, axis=0)
    d -= c
    d *= fx
    c += d  # bottom row
    c -= a
    c *= fy
    a += c
    return a.astype(dt, copy=False)


def bilinear_sample(image: ImageBuffer | Array, uv: Array) -> Array:
    """Bilinear lookup with texel centers at ``(i + 0.5) / W`` and border clamp.

    ``uv`` has shape ``(..., 2)``; the result has shape ``(..., channels)``.
    """
    data = image.data if isinstance(image, ImageBuffer) else np.asarray(image)
    return _bilinear_array(data, uv)


def psnr(a: Array, b: Array, mask: Array | None = None) -> float:
    diff = (np.asarray(a) - np.asarray(b)) ** 2
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(diff))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
