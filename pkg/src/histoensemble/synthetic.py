"""Synthetic class-separable image trees for smoke tests and demos."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

_PALETTE = np.array([
    [205, 90, 110], [95, 190, 120], [90, 110, 210], [200, 190, 80], [80, 190, 200],
    [170, 90, 200], [120, 120, 120], [230, 150, 60],
], dtype=np.float64)
_GRAY = np.full(3, 150.0)


def make_synthetic_dataset(root, class_names: Sequence[str], n_per_class: int, seed: int = 0,
                           size: int = 96, noise: float = 12.0, jitter: float = 18.0,
                           separation: float = 1.0) -> Path:
    """Write ``root/<class>/img_XXXX.png`` RGB images.

    Each class has its own base color and stripe frequency; every image adds
    a random brightness offset (``jitter``) and per-pixel Gaussian noise
    (``noise``), both in 0-255 intensity units. ``separation`` below 1 pulls
    the class colors and stripe amplitudes toward a shared gray so classes
    overlap.
    """
    if len(class_names) > len(_PALETTE):
        raise ValueError(f"at most {len(_PALETTE)} synthetic classes")
    root = Path(root)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    for c, name in enumerate(class_names):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        color = _GRAY + separation * (_PALETTE[c] - _GRAY)
        stripes = separation * 25.0 * np.sin(2 * np.pi * (c + 2) * (xx + yy) / size)
        for i in range(n_per_class):
            img = color + stripes[..., None] + rng.uniform(-jitter, jitter)
            img = img + rng.normal(0.0, noise, size=(size, size, 3))
            Image.fromarray(np.clip(np.rint(img), 0, 255).astype(np.uint8), "RGB").save(d / f"img_{i:04d}.png")
    return root
