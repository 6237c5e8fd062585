"""Synthetic N-MNIST-like recordings for offline testing.

Digit images (scikit-learn's bundled 8x8 digits, upsampled) are swept along
a three-segment triangular path, one segment per 105 ms saccade, with a
raised-cosine velocity profile. A per-pixel contrast detector emits ON/OFF
events whenever intensity moves a full contrast step away from the
pixel's reference level. The result has the same file layout, timing
structure and mid-saccade activity peak as the real dataset, but it is not
a substitute for it when checking published accuracies.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy import ndimage

from .aer import NMNIST_SIZE, EventStream, encode_events
from .preprocess import SACCADE_MS

SAMPLE_US = 500
TAIL_MS = 45
# triangle vertices (x, y) in pixels; saccade k moves from vertex k-1 to vertex k
PATH = np.array([[0.0, 0.0], [3.0, 6.0], [6.0, 0.0], [0.0, 0.0]])


def load_digit_images(size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Upsampled scikit-learn digits in [0, 1], shape ``(n, size, size)``."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    inner = size - 4
    imgs = np.stack([ndimage.zoom(im / 16.0, inner / 8.0, order=1) for im in digits.images])
    imgs = np.clip(imgs, 0.0, 1.0)
    out = np.zeros((len(imgs), size, size))
    out[:, 2:2 + inner, 2:2 + inner] = imgs
    return out, digits.target.astype(np.int64)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(-12.0, 12.0)
    out = ndimage.rotate(image, angle, reshape=False, order=1)
    shift = rng.uniform(-1.0, 1.0, size=2)
    out = ndimage.shift(out, shift, order=1)
    return np.clip(out, 0.0, 1.0)


def record(image: np.ndarray, rng: np.random.Generator, contrast: float = 0.12,
           noise_rate_hz: float = 0.5) -> EventStream:
    """Emit events for one sweep of ``image`` (28x28) across the 34x34 sensor."""
    n_samples = (3 * SACCADE_MS + TAIL_MS) * 1000 // SAMPLE_US
    t_ms = (np.arange(n_samples) + 1) * SAMPLE_US / 1000.0
    seg = np.minimum(t_ms // SACCADE_MS, 3).astype(int)
    u = np.clip((t_ms - seg * SACCADE_MS) / SACCADE_MS, 0.0, 1.0)
    prog = (1 - np.cos(np.pi * u)) / 2
    start = PATH[np.minimum(seg, 3)]
    stop = PATH[np.minimum(seg + 1, 3)]
    offset = np.where((seg < 3)[:, None], start + (stop - start) * prog[:, None], PATH[3])

    yy, xx = np.mgrid[0:NMNIST_SIZE, 0:NMNIST_SIZE].astype(np.float64)
    rows = yy[None] - offset[:, 1, None, None]
    cols = xx[None] - offset[:, 0, None, None]
    frames = ndimage.map_coordinates(image, [rows, cols], order=1, mode="constant", cval=0.0)

    ref = frames[0].copy()
    xs, ys, ps, ts = [], [], [], []
    for k in range(1, n_samples):
        diff = frames[k] - ref
        for pol, mask in ((1, diff >= contrast), (0, diff <= -contrast)):
            if not mask.any():
                continue
            steps = np.floor(np.abs(diff[mask]) / contrast).astype(int)
            py, px = np.nonzero(mask)
            n = int(steps.sum())
            ys.extend(np.repeat(py, steps))
            xs.extend(np.repeat(px, steps))
            ps.extend([pol] * n)
            ts.extend(k * SAMPLE_US + rng.integers(0, SAMPLE_US, n))
            ref[mask] += np.sign(diff[mask]) * steps * contrast

    n_noise = rng.poisson(noise_rate_hz * NMNIST_SIZE**2 * (n_samples * SAMPLE_US) / 1e6)
    xs.extend(rng.integers(0, NMNIST_SIZE, n_noise))
    ys.extend(rng.integers(0, NMNIST_SIZE, n_noise))
    ps.extend(rng.integers(0, 2, n_noise))
    ts.extend(rng.integers(0, n_samples * SAMPLE_US, n_noise))

    order = np.argsort(np.asarray(ts, dtype=np.int64), kind="stable")
    return EventStream(
        np.asarray(xs, dtype=np.int64)[order],
        np.asarray(ys, dtype=np.int64)[order],
        np.asarray(ps, dtype=np.int64)[order],
        np.asarray(ts, dtype=np.int64)[order],
    )


def write_dataset(root: "str | os.PathLike[str]", n_train: int = 1000, n_test: int = 300,
                  seed: int = 0) -> Path:
    """Write ``Train/<digit>/<id>.bin`` and ``Test/<digit>/<id>.bin`` under ``root``.

    Train samples come from the first 1400 scikit-learn digits and test
    samples from the remainder, each randomly rotated and shifted.
    """
    root = Path(root)
    images, labels = load_digit_images()
    rng = np.random.default_rng(seed)
    pools = {"Train": np.arange(0, 1400), "Test": np.arange(1400, len(images))}
    counts = {"Train": n_train, "Test": n_test}
    sample_id = 0
    for split, pool in pools.items():
        for _ in range(counts[split]):
            i = int(rng.choice(pool))
            stream = record(augment(images[i], rng), rng)
            out = root / split / str(labels[i])
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{sample_id:05d}.bin").write_bytes(encode_events(stream))
            sample_id += 1
    for split in pools:
        for d in range(10):
            (root / split / str(d)).mkdir(parents=True, exist_ok=True)
    return root
