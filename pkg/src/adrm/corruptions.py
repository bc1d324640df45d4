"""Algorithmic natural-image corruptions with five graded severities.

Severity 0 is always the identity. Per-kind parameters for severities 1..5
live in :data:`SEVERITY_PARAMS`; stochastic kinds draw from a generator
seeded by the caller, so output is a pure function of (images, spec, seed).
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import fft, ndimage

from .errors import InvalidArgument, UnsupportedCorruption

# index i holds the parameter for severity i + 1
SEVERITY_PARAMS = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),      # noise std
    "shot_noise": (500, 250, 100, 75, 50),                 # photon count scale
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),       # salt-and-pepper fraction
    "defocus_blur": (0.75, 1.0, 1.5, 2.0, 2.5),            # disk radius, px
    "motion_blur": (2, 3, 4, 5, 6),                        # line kernel length, px
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),               # additive shift
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),               # deviation scale
    "fog": (0.2, 0.5, 0.75, 1.0, 1.5),                     # haze weight
    "pixelate": (0.95, 0.9, 0.85, 0.75, 0.65),             # downsample factor
    "jpeg_blocking": (40, 28, 20, 12, 6),                  # kept DCT coeffs per 8x8 block
}

CORRUPTIONS = tuple(SEVERITY_PARAMS)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in SEVERITY_PARAMS:
            raise UnsupportedCorruption(f"unsupported corruption {self.kind!r}")
        if not 0 <= int(self.severity) <= 5:
            raise InvalidArgument(f"severity must be in [0, 5], got {self.severity}")

    @property
    def param(self):
        return None if self.severity == 0 else SEVERITY_PARAMS[self.kind][self.severity - 1]


def _gaussian_noise(x, sigma, rng):
    return x + rng.normal(0.0, sigma, size=x.shape)


def _shot_noise(x, lam, rng):
    return rng.poisson(x * lam) / lam


def _impulse_noise(x, amount, rng):
    out = x.copy()
    u = rng.random(x.shape)
    out[u < amount / 2] = 0.0
    out[(u >= amount / 2) & (u < amount)] = 1.0
    return out


def _disk_kernel(radius):
    r = int(np.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    # supersample the disk edge so fractional radii still grow the kernel
    sub = np.linspace(-0.5, 0.5, 8, endpoint=False) + 1 / 16
    cover = np.zeros(yy.shape)
    for dy in sub:
        for dx in sub:
            cover += (yy + dy) ** 2 + (xx + dx) ** 2 <= radius ** 2
    cover[r, r] = max(cover[r, r], 1.0)
    return cover / cover.sum()


def _convolve_each(x, kernel):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for c in range(x.shape[1]):
            out[i, c] = ndimage.convolve(x[i, c], kernel, mode="reflect")
    return out


def _defocus_blur(x, radius, rng):
    return _convolve_each(x, _disk_kernel(radius))


def _motion_blur(x, length, rng):
    out = np.empty_like(x)
    angles = rng.uniform(0.0, np.pi, size=x.shape[0])
    r = length // 2 + 1
    for i, angle in enumerate(angles):
        kernel = np.zeros((2 * r + 1, 2 * r + 1))
        for t in np.linspace(-length / 2, length / 2, 4 * length + 1):
            kernel[int(np.floor(r + t * np.sin(angle) + 0.5)), int(np.floor(r + t * np.cos(angle) + 0.5))] += 1
        kernel /= kernel.sum()
        for c in range(x.shape[1]):
            out[i, c] = ndimage.convolve(x[i, c], kernel, mode="reflect")
    return out


def _brightness(x, delta, rng):
    return x + delta


def _contrast(x, factor, rng):
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    return (x - mean) * factor + mean


def _fog(x, weight, rng):
    n, _, h, w = x.shape
    haze = ndimage.gaussian_filter(rng.standard_normal((n, 1, h, w)), sigma=(0, 0, h / 4, w / 4),
                                   mode="wrap")
    lo = haze.min(axis=(2, 3), keepdims=True)
    hi = haze.max(axis=(2, 3), keepdims=True)
    haze = (haze - lo) / (hi - lo + 1e-12)
    peak = x.max(axis=(1, 2, 3), keepdims=True)
    return (x + weight * haze) * peak / (peak + weight)


def _pixelate(x, factor, rng):
    n, c, h, w = x.shape
    small = (max(1, int(w * factor)), max(1, int(h * factor)))
    out = np.empty_like(x)
    for i in range(n):
        for ch in range(c):
            im = Image.fromarray(x[i, ch].astype(np.float32))
            im = im.resize(small, Image.BOX).resize((w, h), Image.NEAREST)
            out[i, ch] = np.asarray(im)
    return out


def _zigzag_mask(keep, block=8):
    order = sorted(((i, j) for i in range(block) for j in range(block)),
                   key=lambda ij: (ij[0] + ij[1], ij[0] if (ij[0] + ij[1]) % 2 else ij[1]))
    mask = np.zeros((block, block), dtype=bool)
    for i, j in order[:keep]:
        mask[i, j] = True
    return mask


def _jpeg_blocking(x, keep, rng, block=8):
    n, c, h, w = x.shape
    ph, pw = -h % block, -w % block
    padded = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = padded.shape[2:]
    blocks = padded.reshape(n, c, H // block, block, W // block, block)
    coeffs = fft.dctn(blocks, axes=(3, 5), norm="ortho")
    coeffs *= _zigzag_mask(keep, block)[None, None, None, :, None, :]
    out = fft.idctn(coeffs, axes=(3, 5), norm="ortho").reshape(n, c, H, W)
    return out[:, :, :h, :w]


_KERNELS = {
    "gaussian_noise": _gaussian_noise,
    "shot_noise": _shot_noise,
    "impulse_noise": _impulse_noise,
    "defocus_blur": _defocus_blur,
    "motion_blur": _motion_blur,
    "brightness": _brightness,
    "contrast": _contrast,
    "fog": _fog,
    "pixelate": _pixelate,
    "jpeg_blocking": _jpeg_blocking,
}


def corrupt(images, spec, seed=0):
    """Apply ``spec`` to a batch ``[N, C, H, W]`` (or a single ``[C, H, W]`` image)."""
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(*spec)
    x = np.asarray(images)
    if spec.severity == 0:
        return x.copy()
    single = x.ndim == 3
    work = x[None] if single else x
    if not np.all(np.isfinite(work)):
        raise InvalidArgument("corrupt received non-finite input")
    rng = np.random.default_rng(seed)
    out = _KERNELS[spec.kind](work.astype(np.float64), spec.param, rng)
    out = np.clip(out, 0.0, 1.0).astype(x.dtype if x.dtype.kind == "f" else np.float32)
    return out[0] if single else out


def export_corrupted(images, labels, kinds, severities, out_dir, seed=0):
    """Write one ``.npz`` per (kind, severity) plus ``manifest.json`` with checksums."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for kind in kinds:
        for severity in severities:
            spec = CorruptionSpec(kind, severity)
            x = corrupt(images, spec, seed)
            buf = io.BytesIO()
            np.savez(buf, images=x, labels=np.asarray(labels))
            data = buf.getvalue()
            fname = f"{kind}_s{severity}.npz"
            (out_dir / fname).write_bytes(data)
            entries.append({"file": fname, "kind": kind, "severity": severity, "seed": seed,
                            "param": spec.param, "sha256": hashlib.sha256(data).hexdigest()})
    (out_dir / "manifest.json").write_text(json.dumps({"entries": entries}, indent=2))
    return entries
