"""Synthetic layered B-scans with vessel-shadow discontinuities.

Boundaries are built top-down: the ILM follows a smooth shape curve and
each following boundary adds a layer thickness that itself wobbles by a
few sinusoids.  Because every thickness amplitude stays below
``thickness - min_gap`` the eight boundaries never cross.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

NUM_BOUNDARIES = 8
NUM_LAYERS = 7
NUM_CLASSES = NUM_LAYERS + 2
MIN_GAP = 2.0
REGIMES = ("none", "normal", "multiple_close", "ultrawide")


class SpecError(ValueError):
    """Invalid or infeasible generator settings; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class SynthSpec:
    height: int = 128
    width: int = 128
    num_layers: int = NUM_LAYERS
    top: float = 26.0
    layer_thickness: tuple = (11.0, 12.0, 10.0, 9.0, 14.0, 9.0, 9.0)
    harmonics: int = 2
    shape_amplitude: float = 4.0
    thickness_amplitude: float = 1.0
    layer_means: tuple = (0.05, 0.75, 0.45, 0.2, 0.6, 0.3, 0.85, 0.55, 0.1)
    noise_std: float = 0.02
    regime: str = "none"
    shadow_count: int = 1
    shadow_width: tuple = (4, 10)
    alpha: float = 0.3
    shadow_start_boundary: int = 1
    axial_pitch: float = 2.0
    lateral_pitch: float = 4.0
    drift: float = 0.0
    drift_mode: str = "phase"
    drift_cap: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.layer_thickness = tuple(float(t) for t in self.layer_thickness)
        self.layer_means = tuple(float(m) for m in self.layer_means)
        self.shadow_width = tuple(int(w) for w in self.shadow_width)
        self.validate()

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise SpecError("height", "image must be at least 8x8")
        if self.num_layers != NUM_LAYERS:
            raise SpecError("num_layers", f"only {NUM_LAYERS} layers are supported")
        if len(self.layer_thickness) != NUM_LAYERS:
            raise SpecError("layer_thickness", f"needs {NUM_LAYERS} entries")
        if len(self.layer_means) != NUM_CLASSES:
            raise SpecError("layer_means", f"needs {NUM_CLASSES} entries (7 layers + 2 backgrounds)")
        means = np.asarray(self.layer_means)
        if np.any(means < 0) or np.any(means > 1):
            raise SpecError("layer_means", "values must lie in [0, 1]")
        if np.any(np.abs(np.diff(means)) < 0.1 - 1e-12):
            raise SpecError("layer_means", "adjacent classes must differ by at least 0.1")
        if self.harmonics < 0:
            raise SpecError("harmonics", "must be >= 0")
        if self.shape_amplitude < 0 or self.thickness_amplitude < 0:
            raise SpecError("thickness_amplitude", "amplitudes must be >= 0")
        for t in self.layer_thickness:
            if self.thickness_amplitude > t - MIN_GAP:
                raise SpecError("thickness_amplitude",
                                f"amplitude {self.thickness_amplitude} would let a {t}px layer fall below {MIN_GAP}px")
        lo = self.top - self.shape_amplitude
        hi = self.top + sum(self.layer_thickness) + self.shape_amplitude + NUM_LAYERS * self.thickness_amplitude
        if lo < 1 or hi > self.height - 2:
            raise SpecError("top", f"boundaries may leave the image (rows {lo:.1f}..{hi:.1f}, height {self.height})")
        if self.noise_std < 0:
            raise SpecError("noise_std", "must be >= 0")
        if self.regime not in REGIMES:
            raise SpecError("regime", f"must be one of {REGIMES}")
        if not 0.0 < self.alpha <= 1.0:
            raise SpecError("alpha", "attenuation must be in (0, 1]")
        if not 0 <= self.shadow_start_boundary < NUM_BOUNDARIES:
            raise SpecError("shadow_start_boundary", f"must be in [0, {NUM_BOUNDARIES - 1}]")
        wmin, wmax = self.shadow_width
        if wmin < 1 or wmax < wmin:
            raise SpecError("shadow_width", "need 1 <= min <= max")
        if self.regime == "multiple_close":
            if self.shadow_count < 2:
                raise SpecError("shadow_count", "multiple_close needs at least 2 shadows")
            if self.shadow_count * (3 * wmax) > self.width:
                raise SpecError("shadow_width", "shadows do not fit in the image")
        if self.regime == "normal" and self.shadow_count < 1:
            raise SpecError("shadow_count", "normal regime needs at least 1 shadow")
        if self.regime == "normal" and self.shadow_count * (wmax + 1) > self.width:
            raise SpecError("shadow_width", "shadows do not fit in the image")
        if self.drift < 0 or self.drift_cap < 0:
            raise SpecError("drift", "must be >= 0")
        if self.drift > self.drift_cap:
            raise SpecError("drift", f"drift {self.drift} exceeds drift_cap {self.drift_cap}")
        if self.drift_mode not in ("phase", "linear"):
            raise SpecError("drift_mode", "must be 'phase' or 'linear'")
        if self.axial_pitch <= 0 or self.lateral_pitch <= 0:
            raise SpecError("axial_pitch", "pitches must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("layer_thickness", "layer_means", "shadow_width"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(sorted(unknown)[0], "unknown field")
        return cls(**d)


@dataclass
class BScanSample:
    image: np.ndarray            # H x W float32 in [0, 1]
    labels: np.ndarray           # H x W int class ids
    boundaries: Optional[np.ndarray]  # 8 x W subpixel rows
    axial_pitch: float
    lateral_pitch: float
    shadow_columns: np.ndarray = field(default=None)  # W bool
    shadow_start: np.ndarray = field(default=None)    # W int row (-1 where unshadowed)


@dataclass
class Volume:
    frames: list
    spec: SynthSpec
    curves: "BoundaryCurves"


# ---------------------------------------------------------------------------
# boundary geometry
# ---------------------------------------------------------------------------

@dataclass
class BoundaryCurves:
    """Closed-form boundary model: evaluable at any frame index."""

    top: float
    thickness: np.ndarray          # (7,)
    amps: np.ndarray               # (8, K) row 0 = shape curve, rows 1.. = thickness wobble
    freqs: np.ndarray              # (8, K) cycles per image width
    phases: np.ndarray             # (8, K)
    phase_step: float = 0.0        # radians per frame ("phase" drift)
    velocity: float = 0.0          # rows per frame ("linear" drift)

    def component(self, x: np.ndarray, frame: float = 0.0) -> np.ndarray:
        width = x.size
        arg = (2 * np.pi * self.freqs[:, :, None] * x[None, None, :] / width
               + self.phases[:, :, None] + frame * self.phase_step)
        return (self.amps[:, :, None] * np.sin(arg)).sum(axis=1)

    def evaluate(self, width: int, frame: float = 0.0) -> np.ndarray:
        x = np.arange(width, dtype=np.float64)
        comp = self.component(x, frame)
        b = np.empty((NUM_BOUNDARIES, width))
        b[0] = self.top + comp[0] + frame * self.velocity
        for j in range(NUM_LAYERS):
            b[j + 1] = b[j] + self.thickness[j] + comp[j + 1]
        return b


def _curves(spec: SynthSpec, rng: np.random.Generator) -> BoundaryCurves:
    k = spec.harmonics
    freqs = np.tile(np.arange(1, k + 1, dtype=np.float64), (NUM_BOUNDARIES, 1))
    phases = rng.uniform(0, 2 * np.pi, (NUM_BOUNDARIES, k))
    # split each amplitude budget randomly across harmonics (sum <= budget)
    weights = rng.dirichlet(np.ones(k), NUM_BOUNDARIES) if k else np.zeros((NUM_BOUNDARIES, 0))
    budget = np.array([spec.shape_amplitude] + [spec.thickness_amplitude] * NUM_LAYERS)
    amps = weights * budget[:, None]
    return BoundaryCurves(spec.top, np.asarray(spec.layer_thickness), amps, freqs, phases)


def check_ordering(b: np.ndarray, height: int, min_gap: float = MIN_GAP) -> None:
    gaps = np.diff(b, axis=0)
    if np.any(gaps < min_gap - 1e-9):
        j, col = np.argwhere(gaps < min_gap - 1e-9)[0]
        raise SpecError("thickness_amplitude", f"boundaries {j + 1}/{j + 2} closer than {min_gap}px at column {col}")
    if b.min() < 0 or b.max() > height - 1:
        raise SpecError("top", "a boundary leaves the image")


def gen_boundaries(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Eight per-column boundary curves (8 x W), strictly ordered."""
    curves = _curves(spec, rng)
    b = curves.evaluate(spec.width)
    check_ordering(b, spec.height)
    return b


def rasterize_labels(boundaries: np.ndarray, height: int, width: Optional[int] = None) -> np.ndarray:
    """Class id per pixel: the number of boundaries at or above the row.

    Each boundary is rounded half-up to the nearest row first, so the row
    of boundary ``j`` is the first row of class ``j``.
    """
    b = np.asarray(boundaries, dtype=np.float64)
    width = b.shape[1] if width is None else width
    if b.shape[1] != width:
        raise ValueError("boundary width does not match requested width")
    rows = np.floor(b + 0.5).astype(np.int64)
    r = np.arange(height)[:, None, None]
    return (r >= rows[None, :, :]).sum(axis=1).astype(np.int64)


def render_bscan(labels: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    means = np.asarray(spec.layer_means)
    img = means[labels]
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# shadows
# ---------------------------------------------------------------------------

def shadow_intervals(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Half-open column intervals for the configured regime."""
    w = spec.width
    wmin, wmax = spec.shadow_width
    if spec.regime == "none":
        return []
    if spec.regime == "ultrawide":
        lo = max(int(np.ceil(0.25 * w)), wmin)
        hi = max(lo, min(int(0.45 * w), w))
        width = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, w - width + 1))
        return [(start, start + width)]
    if spec.regime == "multiple_close":
        widths = rng.integers(wmin, wmax + 1, spec.shadow_count)
        gaps = [int(rng.integers(1, max(2, 2 * min(widths[i], widths[i + 1])))) for i in range(len(widths) - 1)]
        total = int(widths.sum()) + sum(gaps)
        start = int(rng.integers(0, w - total + 1))
        out = []
        for i, sw in enumerate(widths):
            out.append((start, start + int(sw)))
            start += int(sw) + (gaps[i] if i < len(gaps) else 0)
        return out
    # normal: separated shadows, at least one clear column between them
    out: list[tuple[int, int]] = []
    for _ in range(200):
        if len(out) == spec.shadow_count:
            break
        sw = int(rng.integers(wmin, wmax + 1))
        s = int(rng.integers(0, w - sw + 1))
        if all(s + sw + 1 <= a or s >= b + 1 for a, b in out):
            out.append((s, s + sw))
    return sorted(out)


def apply_shadows(image: np.ndarray, boundaries: np.ndarray, spec: SynthSpec,
                  rng: np.random.Generator):
    """Attenuate by ``alpha`` from the start boundary downward in shadow columns.

    Returns (image, shadow column mask, per-column start row or -1).
    """
    h, w = image.shape
    mask = np.zeros(w, dtype=bool)
    start = np.full(w, -1, dtype=np.int64)
    out = image.copy()
    for a, b in shadow_intervals(spec, rng):
        mask[a:b] = True
    if not mask.any():
        return out, mask, start
    rows = np.floor(boundaries[spec.shadow_start_boundary] + 0.5).astype(np.int64)
    start[mask] = rows[mask]
    below = (np.arange(h)[:, None] >= rows[None, :]) & mask[None, :]
    out[below] = (out[below] * np.float32(spec.alpha)).astype(out.dtype)
    return out, mask, start


def _sample_from_boundaries(b: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> BScanSample:
    labels = rasterize_labels(b, spec.height)
    image = render_bscan(labels, spec, rng)
    if spec.regime != "none":
        image, mask, start = apply_shadows(image, b, spec, rng)
    else:
        mask, start = np.zeros(spec.width, bool), np.full(spec.width, -1, np.int64)
    return BScanSample(image, labels, b, spec.axial_pitch, spec.lateral_pitch, mask, start)


def generate_sample(spec: SynthSpec, seed: Optional[int] = None) -> BScanSample:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    b = gen_boundaries(spec, rng)
    return _sample_from_boundaries(b, spec, rng)


# ---------------------------------------------------------------------------
# volumes and low-quality ground truth
# ---------------------------------------------------------------------------

def _mean_step(curves: BoundaryCurves, width: int, n_frames: int) -> float:
    if n_frames < 2:
        return 0.0
    b = np.stack([curves.evaluate(width, f) for f in range(n_frames)])
    return float(np.abs(np.diff(b, axis=0)).mean())


def gen_volume(spec: SynthSpec, n_frames: int, rng: Optional[np.random.Generator] = None) -> Volume:
    """Frames whose boundaries drift smoothly by ``spec.drift`` rows per frame on average.

    In "phase" mode every harmonic phase advances by one common step per
    frame, calibrated by bisection so the mean absolute frame-to-frame
    boundary displacement equals ``spec.drift``; "linear" mode shifts the
    whole stack axially by ``spec.drift`` rows per frame.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    curves = _curves(spec, rng)
    if spec.drift > 0 and n_frames > 1:
        if spec.drift_mode == "linear":
            curves.velocity = spec.drift
        else:
            lo, hi = 0.0, np.pi / 2
            curves.phase_step = hi
            if _mean_step(curves, spec.width, n_frames) < spec.drift:
                raise SpecError("drift", "requested drift exceeds what the harmonic amplitudes can produce")
            for _ in range(60):
                curves.phase_step = 0.5 * (lo + hi)
                if _mean_step(curves, spec.width, n_frames) < spec.drift:
                    lo = curves.phase_step
                else:
                    hi = curves.phase_step
            curves.phase_step = 0.5 * (lo + hi)
    frames = []
    for f in range(n_frames):
        b = curves.evaluate(spec.width, f)
        check_ordering(b, spec.height)
        frames.append(_sample_from_boundaries(b, spec, rng))
    for a, b in zip(frames, frames[1:]):
        if np.abs(b.boundaries - a.boundaries).mean() > spec.drift_cap + 1e-9:
            raise SpecError("drift_cap", "adjacent-frame displacement exceeds drift_cap")
    return Volume(frames, spec, curves)


@dataclass
class DegradedTruth:
    labels: list            # per-frame H x W labels from interpolated boundaries
    boundaries: np.ndarray  # (F, 8, W) interpolated boundaries
    displacement: np.ndarray  # (F, 8, W) interpolated minus true boundary rows
    keyframes: list


def degrade_ground_truth(volume: Volume, keyframe_stride: int = 5) -> DegradedTruth:
    """Keep every ``keyframe_stride``-th frame's boundaries and interpolate the rest.

    Frames after the last keyframe copy that keyframe's boundaries.
    """
    if keyframe_stride < 2:
        raise ValueError("keyframe_stride must be >= 2")
    true_b = np.stack([fr.boundaries for fr in volume.frames])
    n = len(volume.frames)
    keys = list(range(0, n, keyframe_stride))
    interp = np.empty_like(true_b)
    for f in range(n):
        k0 = (f // keyframe_stride) * keyframe_stride
        k1 = k0 + keyframe_stride
        if f == k0 or k1 >= n:
            interp[f] = true_b[k0]
        else:
            t = (f - k0) / keyframe_stride
            interp[f] = (1.0 - t) * true_b[k0] + t * true_b[k1]
    h = volume.spec.height
    labels = [rasterize_labels(interp[f], h) for f in range(n)]
    for f in keys:
        labels[f] = volume.frames[f].labels.copy()
    return DegradedTruth(labels, interp, interp - true_b, keys)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

AUGMENTATIONS = ("hflip", "vflip", "transpose", "contrast")


def augment(sample: BScanSample, rng: np.random.Generator, toggles=AUGMENTATIONS) -> BScanSample:
    """Randomly flip/transpose/re-contrast a sample, each with probability 0.5.

    Geometric changes hit image, labels and boundaries alike.  A vertical
    flip maps boundary rows to ``H - 1 - row``; a transpose drops the
    boundaries since they are no longer per-column rows.  Transpose is
    skipped for non-square samples.
    """
    unknown = set(toggles) - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentations {sorted(unknown)}")
    img, lab = sample.image, sample.labels
    b = None if sample.boundaries is None else sample.boundaries
    mask, start = sample.shadow_columns, sample.shadow_start
    h = img.shape[0]
    if "hflip" in toggles and rng.random() < 0.5:
        img, lab = img[:, ::-1], lab[:, ::-1]
        b = None if b is None else b[:, ::-1]
        mask = None if mask is None else mask[::-1]
        start = None if start is None else start[::-1]
    if "vflip" in toggles and rng.random() < 0.5:
        img, lab = img[::-1], lab[::-1]
        b = None if b is None else (h - 1) - b
        start = None if start is None else np.where(start >= 0, (h - 1) - start, -1)
    if "transpose" in toggles and img.shape[0] == img.shape[1] and rng.random() < 0.5:
        img, lab = img.T, lab.T
        b, mask, start = None, None, None
    if "contrast" in toggles and rng.random() < 0.5:
        gain = rng.uniform(0.7, 1.3)
        img = np.clip(img * gain, 0.0, 1.0).astype(np.float32)
    return replace(sample, image=np.ascontiguousarray(img), labels=np.ascontiguousarray(lab),
                   boundaries=None if b is None else np.ascontiguousarray(b),
                   shadow_columns=None if mask is None else mask.copy(),
                   shadow_start=None if start is None else start.copy())


def generate_dataset(spec: SynthSpec, n: int, regimes: Sequence[str] = REGIMES,
                     seed: int = 0) -> list[BScanSample]:
    """``n`` independent samples cycling through ``regimes``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_sample(regime_spec(spec, regimes[i % len(regimes)], int(seeds[i]))) for i in range(n)]


def regime_spec(spec: SynthSpec, regime: str, seed: int) -> SynthSpec:
    """``spec`` switched to ``regime`` (at least two shadows for multiple_close)."""
    count = max(2, spec.shadow_count) if regime == "multiple_close" else spec.shadow_count
    return replace(spec, regime=regime, shadow_count=count, seed=seed)
