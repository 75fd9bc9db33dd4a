"""Standard test fixtures: scene files, a seeded tri-plane and decoder, an anchor image."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import yaml

from .core import ImageBuffer
from .neural import TriPlane, make_decoder, save_weights

ANCHOR_HEIGHT = 1024
ANCHOR_WIDTH = 512
FEATURE_DIM = 257

SHAPES = {
    "sphere": {"type": "sphere", "radius": 0.5},
    "box": {"type": "box", "half_extents": [0.4, 0.6, 0.3]},
    "capsule": {"type": "capsule", "a": [0.0, -0.5, 0.0], "b": [0.0, 0.5, 0.0], "radius": 0.3},
}


def anchor_image(seed: int, height: int = ANCHOR_HEIGHT, width: int = ANCHOR_WIDTH) -> ImageBuffer:
    """Smooth colour field: a few seeded low-frequency sinusoids per channel."""
    rng = np.random.default_rng([seed, 7])
    v, u = np.meshgrid((np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij")
    img = np.full((height, width, 3), 0.5)
    n_waves = 4
    for c in range(3):
        freqs = rng.uniform(0.5, 4.0, (n_waves, 2))
        phases = rng.uniform(0, 2 * np.pi, n_waves)
        amps = rng.dirichlet(np.ones(n_waves)) * 0.45
        for (fu, fv), ph, a in zip(freqs, phases, amps):
            img[..., c] += a * np.sin(2 * np.pi * (fu * u + fv * v) + ph)
    return ImageBuffer.rgb(img)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def gen_fixtures(out_dir, seed: int = 0, triplane_resolution: int = 256) -> dict[str, str]:
    """Write the fixture set into ``out_dir``; returns ``{file name: sha256}``.

    The manifest is also written to ``manifest.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    tp = TriPlane.from_seed(seed, triplane_resolution, 32)
    tp.save(out / "triplane.tpl")
    files.append("triplane.tpl")
    save_weights(make_decoder(FEATURE_DIM, np.random.default_rng([seed, 3]), channels=tp.channels),
                 out / "decoder.mlpw")
    files.append("decoder.mlpw")
    anchor_image(seed).save_png(out / "anchor.png")
    files.append("anchor.png")

    for name, shape in SHAPES.items():
        cfg = {
            "seed": seed,
            "field": shape,
            "density": {"alpha": 0.02},
            "oracle": {"features": {"dim": FEATURE_DIM}, "color": {"type": "normal"}},
            "triplane": {"path": "triplane.tpl"},
            "decoder": {"path": "decoder.mlpw"},
            "anchor": "anchor.png",
            "frontal": {"yaw": 0.0, "pitch": 0.0, "half_width": 1.2, "half_height": 2.4},
            "cameras": [{"yaw": 0.0, "pitch": 0.0}, {"yaw": 90.0, "pitch": 0.0}, {"yaw": 180.0, "pitch": 0.0}],
            "render": {"width": 256, "height": 512},
        }
        fname = f"{name}.scene.yaml"
        (out / fname).write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
        files.append(fname)

    manifest = {f: _sha256(out / f) for f in files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
