#!/usr/bin/env python3
"""Build a desk-scale image folder from the photos bundled with scikit-image/sklearn.

No benchmark datasets ship in the sandbox, so we cut random square crops
(random scale, position and horizontal flip) out of a dozen natural photos and
save them as PNG.  The result is a stand-in for CelebA-style folders.

    python scripts/make_desk_dataset.py out/desk32 --count 12000 --resolution 32
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image

SKIMAGE_COLOR = ["astronaut", "coffee", "chelsea", "rocket", "retina", "immunohistochemistry",
                 "hubble_deep_field", "colorwheel"]


def source_photos():
    import skimage.data
    from sklearn.datasets import load_sample_images

    photos = [getattr(skimage.data, name)() for name in SKIMAGE_COLOR]
    photos.append(skimage.data.stereo_motorcycle()[0])
    photos.extend(load_sample_images().images)
    return [np.ascontiguousarray(p[..., :3]) for p in photos]


def make(out_dir, count, resolution, seed=0, min_crop=None, max_crop=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    photos = source_photos()
    min_crop = min_crop or resolution * 2
    for i in range(count):
        p = photos[rng.integers(len(photos))]
        h, w = p.shape[:2]
        hi = min(max_crop or min(h, w), min(h, w))
        s = int(rng.integers(min_crop, hi + 1))
        y, x = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
        crop = Image.fromarray(p[y : y + s, x : x + s]).resize((resolution, resolution), Image.BICUBIC)
        if rng.random() < 0.5:
            crop = crop.transpose(Image.FLIP_LEFT_RIGHT)
        crop.save(out / f"{i:06d}.png")
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--count", type=int, default=12000)
    ap.add_argument("--resolution", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--min-crop", type=int, default=None)
    ap.add_argument("--max-crop", type=int, default=None)
    a = ap.parse_args()
    make(a.out_dir, a.count, a.resolution, a.seed, a.min_crop, a.max_crop)


if __name__ == "__main__":
    main()
