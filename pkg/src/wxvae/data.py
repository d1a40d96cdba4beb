"""Gridded precipitation I/O, window extraction, normalization and splits.

Two binary formats are handled here, both little-endian:

``WXGRID01``
    magic, u32 days, u32 height, u32 width, u32 start_day_of_year, then
    ``days*height*width`` float32 values (day-major, then row-major), mm/day.

``WXCUBE01``
    magic, u32 count, u32 T, u32 H, u32 W, u8 units flag (0 physical,
    1 normalized), float32 norm constant (0 when physical), then
    ``count*T*H*W`` float32 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import ndtr

GRID_MAGIC = b"WXGRID01"
CUBE_MAGIC = b"WXCUBE01"

PHYSICAL = 0
NORMALIZED = 1

MONSOON_ONSET = 150
MONSOON_END = 300
MONSOON_PEAK = 225
DAYS_PER_YEAR = 365


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class ValidationError(ValueError):
    """Values or configuration violate a documented invariant."""


@dataclass
class GridSeries:
    values: np.ndarray  # (days, height, width), mm/day
    start_day_of_year: int = 0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValidationError(f"grid series must be days x height x width, got {self.values.shape}")
        check_physical(self.values)

    @property
    def days(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def day_of_year(self) -> np.ndarray:
        return (self.start_day_of_year + np.arange(self.days)) % DAYS_PER_YEAR


@dataclass(frozen=True)
class NormStats:
    """``v' = log1p(v) / scale``; ``scale`` is the training-set max of ``log1p(v)``."""

    scale: float
    transform: str = "log1p_max"


@dataclass
class FieldCube:
    values: np.ndarray  # (T, H, W)
    normalized: bool = False

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)


@dataclass
class CubeDataset:
    values: np.ndarray  # (count, T, H, W)
    norm: NormStats | None = None
    role: str = "train"

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise ValidationError(f"cube dataset must be count x T x H x W, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValidationError("cube dataset contains non-finite values")

    @property
    def normalized(self) -> bool:
        return self.norm is not None

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.values.shape[1:])

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> FieldCube:
        return FieldCube(self.values[i], self.normalized)

    def subset(self, idx, role: str | None = None) -> "CubeDataset":
        return CubeDataset(self.values[np.asarray(idx)], self.norm, role or self.role)

    def cube_means(self) -> np.ndarray:
        return self.values.reshape(len(self), -1).mean(axis=1, dtype=np.float64)


def check_physical(values: np.ndarray) -> None:
    bad = ~np.isfinite(values) | (values < 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"invalid precipitation value {values[idx]!r} at index {idx}")


# ---------------------------------------------------------------------------
# binary formats

def _read_exact(buf: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buf):
        raise FormatError(f"truncated file: expected {size} bytes of {what}, found {len(buf) - offset}")
    return buf[offset : offset + size]


def save_grid(series: GridSeries, path) -> None:
    d, h, w = series.values.shape
    header = GRID_MAGIC + struct.pack("<4I", d, h, w, series.start_day_of_year)
    Path(path).write_bytes(header + series.values.astype("<f4").tobytes())


def load_grid(path) -> GridSeries:
    buf = Path(path).read_bytes()
    if buf[:8] != GRID_MAGIC:
        raise FormatError(f"{path}: not a WXGRID01 file (bad magic)")
    d, h, w, start = struct.unpack("<4I", _read_exact(buf, 8, 16, "header"))
    n = d * h * w
    payload = _read_exact(buf, 24, 4 * n, "grid payload")
    if len(buf) != 24 + 4 * n:
        raise FormatError(f"{path}: {len(buf) - 24 - 4 * n} trailing bytes after grid payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(d, h, w)
    return GridSeries(values, start)


def save_cubes(dataset: CubeDataset, path) -> None:
    count, t, h, w = dataset.values.shape
    flag = NORMALIZED if dataset.normalized else PHYSICAL
    scale = dataset.norm.scale if dataset.norm else 0.0
    header = CUBE_MAGIC + struct.pack("<4IBf", count, t, h, w, flag, scale)
    Path(path).write_bytes(header + dataset.values.astype("<f4").tobytes())


def load_cubes(path, role: str = "train") -> CubeDataset:
    buf = Path(path).read_bytes()
    if buf[:8] != CUBE_MAGIC:
        raise FormatError(f"{path}: not a WXCUBE01 file (bad magic)")
    count, t, h, w, flag, scale = struct.unpack("<4IBf", _read_exact(buf, 8, 21, "header"))
    if flag not in (PHYSICAL, NORMALIZED):
        raise FormatError(f"{path}: unknown units flag {flag}")
    n = count * t * h * w
    payload = _read_exact(buf, 29, 4 * n, "cube payload")
    if len(buf) != 29 + 4 * n:
        raise FormatError(f"{path}: {len(buf) - 29 - 4 * n} trailing bytes after cube payload")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(count, t, h, w)
    if flag == PHYSICAL:
        check_physical(values)
    norm = NormStats(float(scale)) if flag == NORMALIZED else None
    return CubeDataset(values, norm, role)


# ---------------------------------------------------------------------------
# synthetic monsoon generator

@dataclass
class MonsoonGenConfig:
    """Parameters of the desk-scale stand-in for a real daily precipitation archive.

    Each day is ``wet mask * gamma intensity * spatial texture * storm
    multiplier``. The wet mask thresholds a smoothed Gaussian field so that
    every pixel is wet with probability ``p0 + p1*s(d)``; the daily gamma
    intensity has shape ``kappa`` and scale ``theta0 + theta1*s(d)``; the
    storm multiplier is a mean-one log-normal AR(1) process in time.
    ``s(d)`` is the raised-cosine monsoon envelope.

    The defaults give a mostly dry season with large, slowly moving rain
    areas (about a quarter of monsoon pixels wet, wet-day means of 4-28
    mm/day). A 16^3, k=8 model trained on this data gives batch means that
    rise with the sampling scale; wetter, rain-everywhere settings give the
    opposite ordering.
    """

    days: int = DAYS_PER_YEAR
    height: int = 24
    width: int = 24
    start_day_of_year: int = 0
    p0: float = 0.05
    p1: float = 0.45
    kappa: float = 16.0
    theta0: float = 0.25
    theta1: float = 1.5
    smoothing: float = 10.0
    wet_persistence: float = 4.0
    texture_sigma: float = 0.15
    storm_sigma: float = 0.5
    storm_persistence: float = 0.95
    seed: int = 0

    def validate(self) -> None:
        if not (0 <= self.p0 <= 1 and 0 <= self.p1 <= 1 and self.p0 + self.p1 <= 1):
            raise ValidationError("wet-day probabilities must lie in [0, 1]")
        if self.kappa <= 0 or self.theta0 <= 0 or self.theta0 + self.theta1 <= 0:
            raise ValidationError("gamma shape and scale must be positive")
        if min(self.days, self.height, self.width) < 1:
            raise ValidationError("grid dimensions must be positive")
        if not 0 <= self.storm_persistence < 1:
            raise ValidationError("storm_persistence must be in [0, 1)")


def monsoon_envelope(day_of_year) -> np.ndarray:
    """Raised cosine, zero outside days 150-300, peaking at 1 on day 225."""
    d = np.asarray(day_of_year, dtype=np.float64)
    half = (MONSOON_END - MONSOON_ONSET) / 2
    s = 0.5 * (1 + np.cos(np.pi * (d - MONSOON_PEAK) / half))
    return np.where((d >= MONSOON_ONSET) & (d <= MONSOON_END), s, 0.0)


def _unit_gaussian_field(rng, shape, sigma) -> np.ndarray:
    g = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    axes = tuple(range(1, g.ndim))
    # centre per day: heavy smoothing leaves a near-constant offset that the std division would blow up
    g = g - g.mean(axis=axes, keepdims=True)
    return g / g.std(axis=axes, keepdims=True)


def gen_synthetic_monsoon(config: MonsoonGenConfig) -> GridSeries:
    config.validate()
    rng = np.random.default_rng(config.seed)
    shape = (config.days, config.height, config.width)
    doy = (config.start_day_of_year + np.arange(config.days)) % DAYS_PER_YEAR
    s = monsoon_envelope(doy)

    wet_field = gaussian_filter(
        rng.standard_normal(shape), sigma=(config.wet_persistence, config.smoothing, config.smoothing), mode="wrap"
    )
    wet_field /= wet_field.std()
    p = config.p0 + config.p1 * s
    wet = ndtr(wet_field) < p[:, None, None]

    intensity = rng.gamma(config.kappa, config.theta0 + config.theta1 * s)

    a = config.texture_sigma
    texture = np.exp(a * _unit_gaussian_field(rng, shape, (0, config.smoothing, config.smoothing)) - a * a / 2)

    phi, sd = config.storm_persistence, config.storm_sigma
    innov = rng.standard_normal(config.days) * sd * np.sqrt(1 - phi * phi)
    log_storm = np.empty(config.days)
    prev = rng.standard_normal() * sd
    for i in range(config.days):
        prev = phi * prev + innov[i]
        log_storm[i] = prev
    storm = np.exp(log_storm - sd * sd / 2)

    values = wet * (intensity * storm)[:, None, None] * texture
    return GridSeries(values.astype(np.float32), config.start_day_of_year)


# ---------------------------------------------------------------------------
# windowing

@dataclass
class WindowPlan:
    """Where each training cube comes from: a start day and a box origin."""

    starts: np.ndarray  # (n,) day index into the series
    rows: np.ndarray  # (n,) box origin row
    cols: np.ndarray  # (n,) box origin column
    window_days: int
    box_extent: tuple[int, int]
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return self.starts.shape[0]

    def subset(self, idx) -> "WindowPlan":
        idx = np.asarray(idx)
        return WindowPlan(
            self.starts[idx], self.rows[idx], self.cols[idx], self.window_days, self.box_extent, self.boxes
        )


def _valid_starts(series: GridSeries, window_days: int, day_range: tuple[int, int]) -> np.ndarray:
    lo, hi = day_range
    doy = series.day_of_year()
    idx = np.arange(series.days)
    # the whole window must stay inside [lo, hi] of a single year
    ok = (doy >= lo) & (doy + window_days <= hi) & (idx + window_days <= series.days)
    return idx[ok]


def plan_windows(
    series: GridSeries,
    window_days: int = 32,
    day_range: tuple[int, int] = (MONSOON_ONSET, MONSOON_END),
    n_boxes: int = 16,
    box_extent: tuple[int, int] = (20, 20),
    n_samples: int = 18_000,
    seed: int = 0,
) -> WindowPlan:
    bh, bw = box_extent
    if window_days < 1 or n_boxes < 1 or n_samples < 1:
        raise ValidationError("window_days, n_boxes and n_samples must be positive")
    if day_range[0] < 0 or day_range[1] > DAYS_PER_YEAR or day_range[0] >= day_range[1]:
        raise ValidationError(f"invalid day range {day_range}")
    if window_days > day_range[1] - day_range[0]:
        raise ValidationError(f"window of {window_days} days does not fit day range {day_range}")
    if bh > series.height or bw > series.width or bh < 1 or bw < 1:
        raise ValidationError(f"box {box_extent} does not fit grid {series.height}x{series.width}")
    starts = _valid_starts(series, window_days, day_range)
    if starts.size == 0:
        raise ValidationError(f"series has no {window_days}-day window inside days {day_range}")

    rng = np.random.default_rng(seed)
    boxes = np.stack(
        [rng.integers(0, series.height - bh + 1, n_boxes), rng.integers(0, series.width - bw + 1, n_boxes)], axis=1
    )
    which_start = rng.integers(0, starts.size, n_samples)
    which_box = rng.integers(0, n_boxes, n_samples)
    return WindowPlan(
        starts[which_start], boxes[which_box, 0], boxes[which_box, 1], window_days, (bh, bw), boxes
    )


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned 1-D linear interpolation as an ``(n_out, n_in)`` matrix."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1 - frac
    m[rows, lo + 1] += frac
    return m


def resize_bilinear(field: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes of ``field`` to ``target``."""
    h, w = field.shape[-2:]
    if (h, w) == tuple(target):
        return field.copy()
    ry = bilinear_matrix(h, target[0])
    rx = bilinear_matrix(w, target[1])
    out = np.einsum("ij,...jk,lk->...il", ry, field.astype(np.float64), rx)
    return out.astype(field.dtype)


def extract_windows(series: GridSeries, plan: WindowPlan, resize_to: tuple[int, int], chunk: int = 512) -> np.ndarray:
    t = plan.window_days
    bh, bw = plan.box_extent
    out = np.empty((len(plan), t, *resize_to), dtype=np.float32)
    days = np.arange(t)
    ii = np.arange(bh)
    jj = np.arange(bw)
    for lo in range(0, len(plan), chunk):
        sl = slice(lo, lo + chunk)
        d = plan.starts[sl, None, None, None] + days[None, :, None, None]
        r = plan.rows[sl, None, None, None] + ii[None, None, :, None]
        c = plan.cols[sl, None, None, None] + jj[None, None, None, :]
        assert d.max() < series.days and r.max() < series.height and c.max() < series.width
        out[sl] = resize_bilinear(series.values[d, r, c], resize_to)
    return out


def window_samples(
    series: GridSeries,
    window_days: int = 32,
    day_range: tuple[int, int] = (MONSOON_ONSET, MONSOON_END),
    n_boxes: int = 16,
    box_extent: tuple[int, int] = (20, 20),
    n_samples: int = 18_000,
    resize_to: tuple[int, int] = (32, 32),
    seed: int = 0,
) -> np.ndarray:
    """Draw ``n_samples`` cubes of shape ``(window_days, *resize_to)``."""
    plan = plan_windows(series, window_days, day_range, n_boxes, box_extent, n_samples, seed)
    return extract_windows(series, plan, resize_to)


# ---------------------------------------------------------------------------
# normalization and splitting

def fit_norm(values: np.ndarray) -> NormStats:
    scale = float(np.log1p(values.astype(np.float64)).max())
    if scale <= 0:
        raise ValidationError("cannot normalize an all-zero training set")
    return NormStats(scale)


def normalize(dataset: CubeDataset, stats: NormStats | None = None) -> CubeDataset:
    """Map physical cubes to ``log1p(v)/C``; ``C`` is fitted unless given."""
    if dataset.normalized:
        raise ValidationError("dataset is already normalized")
    stats = stats or fit_norm(dataset.values)
    values = (np.log1p(dataset.values.astype(np.float64)) / stats.scale).astype(np.float32)
    return CubeDataset(values, stats, dataset.role)


def denormalize(values, stats: NormStats | None) -> np.ndarray:
    if stats is None:
        raise ValidationError("denormalize needs normalization stats")
    v = np.asarray(values, dtype=np.float64)
    return np.expm1(v * stats.scale).astype(np.float32)


def denormalize_dataset(dataset: CubeDataset) -> CubeDataset:
    return CubeDataset(denormalize(dataset.values, dataset.norm), None, dataset.role)


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < test_fraction < 1:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(np.floor(test_fraction * n + 0.5))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def split_train_test(cubes, test_fraction: float = 0.2, seed: int = 0) -> tuple[CubeDataset, CubeDataset]:
    if not isinstance(cubes, CubeDataset):
        cubes = CubeDataset(np.asarray(cubes))
    train_idx, test_idx = split_indices(len(cubes), test_fraction, seed)
    return cubes.subset(train_idx, "train"), cubes.subset(test_idx, "test")
