"""Synthetic degradations and the paired-sample dataset.

Every generator is a pure function of ``(clean, params, seed)``. Images are
``float32`` arrays of shape ``[H, W, 3]`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ContractError, ParameterError

KINDS = ("noise", "haze", "rain", "blur", "lowlight")
NOISE_SIGMAS = (15.0, 25.0, 50.0)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"expected image of shape [H, W, 3], got {img.shape}")
    return img.astype(np.float32, copy=False)


def _finish(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_noise(clean: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Additive white Gaussian noise; ``sigma`` is on the 0-255 scale."""
    clean = _check_image(clean)
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape) * (sigma / 255.0)
    return _finish(clean + noise)


def synth_haze(clean: np.ndarray, transmission: float, airlight: float, seed: int = 0) -> np.ndarray:
    """Atmospheric scattering ``t * clean + (1 - t) * airlight`` with uniform ``t``."""
    clean = _check_image(clean)
    if not 0.0 < transmission <= 1.0:
        raise ParameterError(f"transmission must lie in (0, 1], got {transmission}")
    if not 0.0 <= airlight <= 1.0:
        raise ParameterError(f"airlight must lie in [0, 1], got {airlight}")
    t = np.float32(transmission)
    return _finish(t * clean + (np.float32(1.0) - t) * np.float32(airlight))


def synth_rain(clean: np.ndarray, streaks: int, angle: float, length: int, seed: int) -> np.ndarray:
    """Additive bright line segments tilted ``angle`` degrees from vertical."""
    clean = _check_image(clean)
    if streaks < 0:
        raise ParameterError(f"streaks must be >= 0, got {streaks}")
    if length < 1:
        raise ParameterError(f"length must be >= 1, got {length}")
    if streaks == 0:
        return clean.copy()
    h, w, _ = clean.shape
    rng = np.random.default_rng(seed)
    layer = np.zeros((h, w), dtype=np.float64)
    theta = math.radians(angle)
    dy, dx = math.cos(theta), math.sin(theta)
    steps = np.arange(length, dtype=np.float64)
    for _ in range(streaks):
        y0 = rng.uniform(-length, h)
        x0 = rng.uniform(0, w)
        strength = rng.uniform(0.5, 0.9)
        ys = np.rint(y0 + steps * dy).astype(int)
        xs = np.rint(x0 + steps * dx).astype(int)
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        layer[ys[keep], xs[keep]] = np.maximum(layer[ys[keep], xs[keep]], strength)
    return _finish(clean + layer[..., None].astype(np.float32))


def motion_kernel(kernel_size: int, angle: float) -> np.ndarray:
    """Normalised linear motion-blur kernel of odd size ``kernel_size``."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    k = np.zeros((kernel_size, kernel_size), dtype=np.float64)
    c = kernel_size // 2
    theta = math.radians(angle)
    for t in np.linspace(-c, c, 4 * kernel_size + 1):
        y = int(round(c - t * math.sin(theta)))
        x = int(round(c + t * math.cos(theta)))
        k[y, x] = 1.0
    return k / k.sum()


def synth_blur(clean: np.ndarray, kernel_size: int, angle: float, seed: int = 0) -> np.ndarray:
    """Motion blur with reflective padding. ``seed`` is accepted for interface parity."""
    clean = _check_image(clean)
    k = motion_kernel(kernel_size, angle)
    if kernel_size == 1:
        return clean.copy()
    out = np.stack(
        [ndimage.convolve(clean[..., ch].astype(np.float64), k, mode="reflect") for ch in range(3)],
        axis=-1,
    )
    return _finish(out)


def synth_lowlight(clean: np.ndarray, gamma: float, gain: float, seed: int = 0) -> np.ndarray:
    """Darkening ``gain * clean ** gamma``."""
    clean = _check_image(clean)
    if gamma < 1.0:
        raise ParameterError(f"gamma must be >= 1, got {gamma}")
    if not 0.0 < gain <= 1.0:
        raise ParameterError(f"gain must lie in (0, 1], got {gain}")
    out = np.float64(gain) * np.power(clean.astype(np.float64), np.float64(gamma))
    return _finish(out)


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")


def apply_degradation(clean: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    p = spec.params
    if spec.kind == "noise":
        return synth_noise(clean, p["sigma"], spec.seed)
    if spec.kind == "haze":
        return synth_haze(clean, p["transmission"], p["airlight"], spec.seed)
    if spec.kind == "rain":
        return synth_rain(clean, p["streaks"], p["angle"], p["length"], spec.seed)
    if spec.kind == "blur":
        return synth_blur(clean, p["kernel_size"], p["angle"], spec.seed)
    return synth_lowlight(clean, p["gamma"], p["gain"], spec.seed)


def sample_params(kind: str, rng: np.random.Generator, noise_sigmas: Sequence[float] = NOISE_SIGMAS) -> dict:
    """Draw kind-specific parameters from ``rng``."""
    if kind == "noise":
        return {"sigma": float(noise_sigmas[int(rng.integers(len(noise_sigmas)))])}
    if kind == "haze":
        return {"transmission": float(rng.uniform(0.4, 0.8)), "airlight": float(rng.uniform(0.7, 1.0))}
    if kind == "rain":
        return {
            "streaks": int(rng.integers(30, 90)),
            "angle": float(rng.uniform(-20.0, 20.0)),
            "length": int(rng.integers(6, 16)),
        }
    if kind == "blur":
        return {"kernel_size": int(rng.choice([5, 7, 9, 11])), "angle": float(rng.uniform(0.0, 180.0))}
    if kind == "lowlight":
        return {"gamma": float(rng.uniform(1.5, 2.5)), "gain": float(rng.uniform(0.3, 0.6))}
    raise ConfigError(f"unknown degradation kind {kind!r}")


# ---------------------------------------------------------------------------
# Procedural clean images


def _value_noise(rng: np.random.Generator, size: int, base_cells: int, octaves: int) -> np.ndarray:
    out = np.zeros((size, size), dtype=np.float64)
    amp, total = 1.0, 0.0
    cells = base_cells
    for _ in range(octaves):
        grid = rng.random((cells + 1, cells + 1))
        zoomed = ndimage.zoom(grid, size / (cells + 1), order=3, mode="nearest", grid_mode=True)
        out += amp * zoomed[:size, :size]
        total += amp
        amp *= 0.5
        cells *= 2
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo + 1e-12)


def procedural_image(seed: int, size: int = 64) -> np.ndarray:
    """Seeded texture + gradient + geometric shapes, shape ``[size, size, 3]``."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    texture = _value_noise(rng, size, base_cells=int(rng.integers(2, 4)), octaves=2)
    angle = rng.uniform(0, 2 * np.pi)
    grad = np.cos(angle) * xx + np.sin(angle) * yy
    grad = (grad - grad.min()) / (grad.max() - grad.min() + 1e-12)
    base_colors = rng.uniform(0.15, 0.85, size=(2, 3))
    mix = 0.6 * texture + 0.4 * grad
    img = base_colors[0] * (1 - mix[..., None]) + base_colors[1] * mix[..., None]
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        r = rng.uniform(0.08, 0.25)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= 0.7 * r)
        img[mask] = 0.35 * img[mask] + 0.65 * color
    return _finish(img)


# ---------------------------------------------------------------------------
# PNG I/O


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_png(img: np.ndarray, path: str | Path) -> None:
    img = _check_image(img)
    arr = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class DatasetConfig:
    kinds: list = field(default_factory=lambda: ["noise", "haze", "rain"])
    size: int = 24
    image_size: int = 64
    seed: int = 0
    image_dir: str | None = None
    noise_sigmas: list = field(default_factory=lambda: list(NOISE_SIGMAS))


@dataclass
class PairedSample:
    clean: np.ndarray
    degraded: np.ndarray
    spec: DegradationSpec
    index: int


def sample_seed(global_seed: int, index: int) -> int:
    """Per-sample 64-bit seed derived from ``(global_seed, index)``."""
    ss = np.random.SeedSequence([int(global_seed) & 0xFFFFFFFF, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w, _ = img.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    img = img[top : top + s, left : left + s]
    if s != size:
        pil = Image.fromarray(np.rint(img * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
        img = np.asarray(pil, dtype=np.float32) / 255.0
    return img.astype(np.float32)


class PairedDataset(Sequence):
    """Deterministic, index-addressable sequence of :class:`PairedSample`.

    Sample ``i`` uses kind ``kinds[i % len(kinds)]`` so kinds are stratified
    round-robin. Samples are synthesised lazily and not cached.
    """

    def __init__(self, cfg: DatasetConfig):
        if not cfg.kinds:
            raise ConfigError("dataset config must name at least one degradation kind")
        for kind in cfg.kinds:
            if kind not in KINDS:
                raise ConfigError(f"unknown degradation kind {kind!r}; expected one of {KINDS}")
        if cfg.size < 0:
            raise ConfigError(f"dataset size must be >= 0, got {cfg.size}")
        self.cfg = cfg
        self._files: list[Path] = []
        if cfg.image_dir is not None:
            root = Path(cfg.image_dir)
            self._files = sorted(p for p in root.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
            if not self._files:
                raise ConfigError(f"no images found in {root}")

    def __len__(self) -> int:
        return self.cfg.size

    def clean_image(self, index: int) -> np.ndarray:
        seed = sample_seed(self.cfg.seed, index)
        if self._files:
            img = load_png(self._files[index % len(self._files)])
            return _center_crop_resize(img, self.cfg.image_size)
        return procedural_image(seed, self.cfg.image_size)

    def spec_for(self, index: int) -> DegradationSpec:
        seed = sample_seed(self.cfg.seed, index)
        kind = self.cfg.kinds[index % len(self.cfg.kinds)]
        rng = np.random.default_rng([seed, 1])
        return DegradationSpec(kind, sample_params(kind, rng, self.cfg.noise_sigmas), seed)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        clean = self.clean_image(index)
        spec = self.spec_for(index)
        return PairedSample(clean, apply_degradation(clean, spec), spec, index)

    def __iter__(self) -> Iterator[PairedSample]:
        for i in range(len(self)):
            yield self[i]


def make_dataset(cfg: DatasetConfig) -> PairedDataset:
    return PairedDataset(cfg)


def write_dataset(dataset: PairedDataset, out_dir: str | Path) -> list[dict]:
    """Write ``clean/`` and ``degraded/`` PNGs plus an index; returns the index rows."""
    out = Path(out_dir)
    rows = []
    for s in dataset:
        name = f"{s.index:05d}_{s.spec.kind}.png"
        save_png(s.clean, out / "clean" / name)
        save_png(s.degraded, out / "degraded" / name)
        rows.append({"index": s.index, "file": name, "kind": s.spec.kind, "seed": s.spec.seed, **s.spec.params})
    return rows
