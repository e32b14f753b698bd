"""Synthetic lung-like X-ray generator.

Produces image/mask pairs with two elliptical "lungs" (darker than the
surrounding field, slightly varied per sample) and can write them out in
the Montgomery or Shenzhen directory layout. Used by the end-to-end
smoke pipeline and anywhere tests need dataset trees without the real
collections.
"""

from pathlib import Path

import numpy as np
from PIL import Image


def synth_pair(seed: int, height: int = 384, width: int = 360):
    """One synthetic (image, left_mask, right_mask) triple at native size."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    def ellipse(cx, cy, ax, ay):
        return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0

    jitter = lambda scale: 1.0 + rng.uniform(-0.1, 0.1) * scale
    left = ellipse(
        0.32 * width * jitter(0.3),
        0.48 * height * jitter(0.3),
        0.13 * width * jitter(1.0),
        0.27 * height * jitter(1.0),
    )
    right = ellipse(
        0.68 * width * jitter(0.3),
        0.48 * height * jitter(0.3),
        0.13 * width * jitter(1.0),
        0.27 * height * jitter(1.0),
    )

    gradient = 140.0 + 40.0 * (yy / height)
    image = gradient + rng.normal(0.0, 6.0, size=(height, width))
    image[left | right] -= 65.0
    image = np.clip(image, 0, 255).astype(np.uint8)
    return image, left.astype(np.uint8), right.astype(np.uint8)


def write_synthetic_tree(out_root, n: int = 16, seed: int = 0, layout: str = "montgomery"):
    """Write ``n`` synthetic samples as a dataset tree; returns the ids."""
    out = Path(out_root)
    rng = np.random.default_rng(seed)
    img_dir = out / "CXR_png"
    img_dir.mkdir(parents=True, exist_ok=True)
    if layout == "montgomery":
        left_dir = out / "ManualMask" / "leftMask"
        right_dir = out / "ManualMask" / "rightMask"
        left_dir.mkdir(parents=True, exist_ok=True)
        right_dir.mkdir(parents=True, exist_ok=True)
    elif layout == "shenzhen":
        mask_dir = out / "mask"
        mask_dir.mkdir(parents=True, exist_ok=True)
    else:
        raise ValueError(f"unknown layout '{layout}'")

    ids = []
    for i in range(n):
        sid = f"SYN_{i:04d}"
        height = int(rng.integers(320, 480))
        width = int(rng.integers(300, 440))
        image, left, right = synth_pair(seed * 100003 + i, height=height, width=width)
        Image.fromarray(image, mode="L").save(img_dir / f"{sid}.png")
        if layout == "montgomery":
            Image.fromarray(left * 255, mode="L").save(left_dir / f"{sid}.png")
            Image.fromarray(right * 255, mode="L").save(right_dir / f"{sid}.png")
        else:
            merged = np.logical_or(left, right).astype(np.uint8) * 255
            Image.fromarray(merged, mode="L").save(mask_dir / f"{sid}_mask.png")
        ids.append(sid)
    return ids
