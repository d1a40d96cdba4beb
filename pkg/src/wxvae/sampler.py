"""Controlled synthesis: draw latents from chosen regions of N(0, I) and decode.

Two modes:

* ``scaled``: every coordinate ~ N(0, sigma^2). Small sigma stays in the bulk
  of the prior, large sigma reaches into the tails.
* ``tail``: every coordinate ~ N(0, 1) conditioned on ``|v| >= t``, drawn by
  rejection.

The same seed gives the same standard-normal draws in scaled mode for any
sigma, so batches at different sigma are directly comparable.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CubeDataset, NormStats, ValidationError, denormalize, save_cubes
from .model import decode
from .train import Checkpoint, load_checkpoint

MAX_THRESHOLD = 6.0
SIGMA_GRID = (0.3, 0.5, 0.65, 0.75, 0.85, 1.0, 1.3)


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "scaled"
    sigma: float = 1.0
    threshold: float = 0.0
    n: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("scaled", "tail"):
            raise SamplerError(f"unknown sampler mode {self.mode!r}")
        if self.n < 1:
            raise SamplerError(f"sample count must be >= 1, got {self.n}")
        if self.mode == "scaled" and not self.sigma > 0:
            raise SamplerError(f"sigma must be > 0, got {self.sigma}")
        if self.mode == "tail":
            if self.threshold < 0:
                raise SamplerError(f"threshold must be >= 0, got {self.threshold}")
            if self.threshold > MAX_THRESHOLD:
                raise SamplerError(
                    f"threshold {self.threshold} > {MAX_THRESHOLD}: acceptance probability below 1e-9"
                )

    def describe(self) -> dict[str, str]:
        d = {"mode": self.mode, "n": str(self.n), "seed": str(self.seed)}
        if self.mode == "scaled":
            d["sigma"] = repr(float(self.sigma))
        else:
            d["threshold"] = repr(float(self.threshold))
        return d


def sample_scaled(k: int, config: SamplerConfig) -> np.ndarray:
    config.validate()
    if config.mode != "scaled":
        raise SamplerError("sample_scaled needs mode 'scaled'")
    rng = np.random.default_rng(config.seed)
    return config.sigma * rng.standard_normal((config.n, k))


def draw_tail(rng: np.random.Generator, size: int, threshold: float) -> tuple[np.ndarray, int, int]:
    """Draw ``size`` standard normals with ``|v| >= threshold`` by rejection.

    Returns the values in draw order, the number of candidates drawn and how
    many of those passed the threshold (surplus accepted draws are discarded).
    """
    if threshold > MAX_THRESHOLD:
        raise SamplerError(f"threshold {threshold} > {MAX_THRESHOLD}: acceptance probability below 1e-9")
    out = np.empty(size)
    filled, drawn, passed = 0, 0, 0
    while filled < size:
        chunk = max(1024, 2 * (size - filled))
        cand = rng.standard_normal(chunk)
        drawn += chunk
        keep = cand[np.abs(cand) >= threshold]
        passed += keep.size
        take = min(keep.size, size - filled)
        out[filled : filled + take] = keep[:take]
        filled += take
    return out, drawn, passed


def sample_tail(k: int, config: SamplerConfig) -> np.ndarray:
    config.validate()
    if config.mode != "tail":
        raise SamplerError("sample_tail needs mode 'tail'")
    rng = np.random.default_rng(config.seed)
    values, _, _ = draw_tail(rng, config.n * k, config.threshold)
    z = values.reshape(config.n, k)
    assert (np.abs(z) >= config.threshold).all()
    return z


def sample_latents(k: int, config: SamplerConfig) -> np.ndarray:
    if config.mode == "tail":
        return sample_tail(k, config)
    return sample_scaled(k, config)


@dataclass
class SynthesisBatch:
    latents: np.ndarray  # (n, k)
    fields: np.ndarray  # (n, T, H, W), mm/day
    config: SamplerConfig
    checkpoint_digest: str

    def as_dataset(self) -> CubeDataset:
        return CubeDataset(self.fields, None, "synthetic")

    def provenance(self) -> dict[str, str]:
        d = self.config.describe()
        d["checkpoint"] = self.checkpoint_digest
        return d


def synthesize(
    checkpoint: Checkpoint | str | Path,
    config: SamplerConfig,
    norm: NormStats | None = None,
    batch_size: int = 128,
    latents: np.ndarray | None = None,
) -> SynthesisBatch:
    """Decode sampled latents into physical-unit cubes.

    ``norm`` defaults to the normalization constants stored with the checkpoint.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    k = ckpt.model_config.latent_dim
    z = sample_latents(k, config) if latents is None else np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != k:
        raise SamplerError(f"latents of shape {z.shape} do not match checkpoint latent_dim {k}")
    norm = norm or ckpt.norm
    if norm is None:
        raise ValidationError("no normalization constants: pass norm or use a checkpoint that stores them")
    parts = []
    for lo in range(0, z.shape[0], batch_size):
        zb = z[lo : lo + batch_size].astype(np.float32)
        parts.append(decode(zb, ckpt.params).data[:, 0])
    fields = denormalize(np.concatenate(parts), norm)
    return SynthesisBatch(z, fields, config, ckpt.digest)


def write_batch(batch: SynthesisBatch, path) -> Path:
    """Write the cubes as WXCUBE01 plus a ``.provenance`` key=value sidecar."""
    path = Path(path)
    save_cubes(batch.as_dataset(), path)
    side = path.with_name(path.name + ".provenance")
    digest = hashlib.sha256(np.ascontiguousarray(batch.latents).tobytes()).hexdigest()[:16]
    lines = [f"{k}={v}" for k, v in batch.provenance().items()] + [f"latents_digest={digest}"]
    side.write_text("\n".join(lines) + "\n")
    return side
