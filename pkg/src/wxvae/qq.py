"""Quantile-quantile comparison of pooled pixel-value distributions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CubeDataset, ValidationError

DEFAULT_PROBS = 199


@dataclass
class QQCurve:
    probs: np.ndarray
    q_a: np.ndarray
    q_b: np.ndarray
    label_a: str = "a"
    label_b: str = "b"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.q_a = np.asarray(self.q_a, dtype=np.float64)
        self.q_b = np.asarray(self.q_b, dtype=np.float64)
        if not (self.probs.shape == self.q_a.shape == self.q_b.shape):
            raise ValidationError("probs and quantile arrays must have the same length")
        if np.any(np.diff(self.probs) <= 0):
            raise ValidationError("probability grid must be strictly increasing")


def prob_grid(n_probs: int = DEFAULT_PROBS) -> np.ndarray:
    """``n_probs`` equally spaced interior probabilities ``i/(n_probs+1)``."""
    if n_probs < 1:
        raise ValidationError("n_probs must be >= 1")
    return np.arange(1, n_probs + 1) / (n_probs + 1)


def quantiles(values, probs) -> np.ndarray:
    """Linear interpolation between closest ranks at ``h = (n-1)p``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValidationError("cannot take quantiles of an empty sample")
    p = np.asarray(probs, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValidationError("probabilities must lie in [0, 1]")
    return np.quantile(v, p, method="linear")


def _pixels(cubes) -> np.ndarray:
    if isinstance(cubes, CubeDataset):
        if cubes.normalized:
            raise ValidationError("QQ comparison needs physical units (mm/day); denormalize first")
        return cubes.values.ravel()
    return np.asarray(cubes).ravel()


def qq_curve(cubes_a, cubes_b, n_probs: int = DEFAULT_PROBS, label_a: str = "a", label_b: str = "b") -> QQCurve:
    """Pool every pixel of each set and compare them on a shared probability grid."""
    if isinstance(cubes_a, CubeDataset) and isinstance(cubes_b, CubeDataset):
        if cubes_a.normalized != cubes_b.normalized:
            raise ValidationError("unit mismatch: one set is normalized, the other physical")
    probs = prob_grid(n_probs)
    return QQCurve(probs, quantiles(_pixels(cubes_a), probs), quantiles(_pixels(cubes_b), probs), label_a, label_b)


@dataclass(frozen=True)
class ExtremeRefSpec:
    fraction: float
    direction: str = "top"

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ValidationError(f"fraction must be in (0, 1), got {self.fraction}")
        if self.direction not in ("top", "bottom"):
            raise ValidationError(f"direction must be 'top' or 'bottom', got {self.direction!r}")


def extreme_indices(means: np.ndarray, spec: ExtremeRefSpec) -> np.ndarray:
    means = np.asarray(means, dtype=np.float64)
    m = math.ceil(spec.fraction * means.size - 1e-9)
    key = -means if spec.direction == "top" else means
    order = np.argsort(key, kind="stable")
    return np.sort(order[:m])


def reference_extremes(dataset: CubeDataset, spec: ExtremeRefSpec) -> CubeDataset:
    """Cubes with the greatest (top) or lowest (bottom) mean precipitation; ties keep input order."""
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    idx = extreme_indices(dataset.cube_means(), spec)
    return dataset.subset(idx, f"{spec.direction}{spec.fraction:g}")


def qq_divergence(curve: QQCurve, upto_prob: float = 1.0) -> float:
    """Largest quantile gap over the grid points with ``prob <= upto_prob``."""
    if not 0 < upto_prob <= 1:
        raise ValidationError(f"upto_prob must be in (0, 1], got {upto_prob}")
    keep = curve.probs <= upto_prob
    if not keep.any():
        return 0.0
    return float(np.max(np.abs(curve.q_a[keep] - curve.q_b[keep])))


def prob_at_value(values, threshold: float) -> float:
    """Fraction of ``values`` at or below ``threshold``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    return float(np.count_nonzero(v <= threshold) / v.size)


def write_qq_csv(curve: QQCurve, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prob", "quantile_a", "quantile_b"])
        for p, a, b in zip(curve.probs, curve.q_a, curve.q_b):
            w.writerow([repr(float(p)), repr(float(a)), repr(float(b))])
    return path


def read_qq_csv(path) -> QQCurve:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["prob", "quantile_a", "quantile_b"]:
        raise ValidationError(f"{path}: missing QQ CSV header")
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(-1, 3)
    return QQCurve(data[:, 0], data[:, 1], data[:, 2])


def emit_qq(curve: QQCurve, path_csv, path_svg=None) -> None:
    """Write the CSV and, optionally, an SVG scatter against the identity line."""
    write_qq_csv(curve, path_csv)
    if path_svg is not None:
        from .plots import render_qq

        render_qq([curve], path_svg)
