"""Training loop, warm-up schedule and the WXVAE001 checkpoint format.

Checkpoint layout (little-endian)::

    b"WXVAE001"
    u32 n, then n bytes of UTF-8 ``key=value`` lines (model.*, train.*, norm.*)
    repeated until EOF:
        u32 n, n bytes UTF-8 parameter name
        u32 rank, rank x u32 dims
        prod(dims) float32 values
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import CubeDataset, NormStats
from .model import ConfigError, ModelConfig, VaeParams, forward_loss, param_shapes
from .optim import AdamState, adam_step, clip_global_norm

log = logging.getLogger(__name__)

CKPT_MAGIC = b"WXVAE001"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 10
    warmup_ramp: bool = False
    beta_target: float | None = None  # None -> latent_dim / pixel_count
    early_stop_patience: int = 10
    early_stop_min_delta: float = 1e-4
    clip_norm: float | None = None
    seed: int = 0
    validation_fraction: float = 0.1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError(f"warmup_epochs must be in [0, epochs], got {self.warmup_epochs}")
        if self.lr < 0 or self.early_stop_patience < 1:
            raise ConfigError("lr must be >= 0 and early_stop_patience >= 1")
        if self.beta_target is not None and self.beta_target < 0:
            raise ConfigError("beta_target must be >= 0")

    def resolved_beta(self, model: ModelConfig) -> float:
        if self.beta_target is None:
            return model.latent_dim / model.pixel_count
        return float(self.beta_target)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def beta_schedule(epoch: int, config: TrainConfig, beta_target: float | None = None) -> float:
    """KL weight for ``epoch``: zero during warm-up, then the target.

    With ``warmup_ramp`` the weight rises linearly over the warm-up instead.
    """
    target = config.beta_target if beta_target is None else beta_target
    target = 0.0 if target is None else float(target)
    if epoch >= config.warmup_epochs:
        return target
    if config.warmup_ramp:
        return target * epoch / config.warmup_epochs
    return 0.0


@dataclass
class EpochRecord:
    epoch: int
    beta: float
    train_total: float
    train_rec: float
    train_reg: float
    val_total: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = -1
    best_epoch: int = -1

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.records]

    def to_rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]


def validation_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(math.floor(fraction * n + 0.5))
    if n_val < 1 or n_val >= n:
        raise ConfigError(f"validation split of {fraction} leaves {n_val} of {n} cubes for validation")
    perm = np.random.default_rng([seed, 1]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _evaluate(values: np.ndarray, params: VaeParams, noise: np.ndarray, beta: float, batch_size: int) -> float:
    total = 0.0
    n = values.shape[0]
    for lo in range(0, n, batch_size):
        xb = values[lo : lo + batch_size]
        loss, _ = forward_loss(xb, params, noise[lo : lo + batch_size], beta)
        total += loss.total.item() * xb.shape[0]
    return total / n


def train(
    dataset: CubeDataset | np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: VaeParams | None = None,
) -> tuple[VaeParams, TrainHistory]:
    """Fit the VAE and return the parameters of the best validation epoch.

    ``val_total`` is always measured with the target KL weight, and early
    stopping only considers epochs after the warm-up, so the selected model
    is one trained against the full objective.
    """
    train_config.validate()
    values = dataset.values if isinstance(dataset, CubeDataset) else np.asarray(dataset, dtype=np.float32)
    if values.shape[0] == 0:
        raise ConfigError("training set is empty")
    if tuple(values.shape[1:]) != model_config.input_extent:
        raise ConfigError(f"cubes of extent {values.shape[1:]} do not match model extent {model_config.input_extent}")

    cfg = train_config
    beta_target = cfg.resolved_beta(model_config)
    train_idx, val_idx = validation_split(values.shape[0], cfg.validation_fraction, cfg.seed)
    x_train, x_val = values[train_idx], values[val_idx]
    k = model_config.latent_dim

    if params is None:
        params = VaeParams.init(model_config, cfg.seed, output_mean=float(x_train.mean(dtype=np.float64)))
    else:
        params = params.copy()
    rng = np.random.default_rng([cfg.seed, 2])
    val_noise = np.random.default_rng([cfg.seed, 3]).standard_normal((x_val.shape[0], k)).astype(np.float32)
    state = AdamState()
    arrays = params.arrays()
    history = TrainHistory()
    best_val, best_params, stale = math.inf, params.copy(), 0
    first_eligible = cfg.warmup_epochs if cfg.warmup_epochs < cfg.epochs else 0

    for epoch in range(cfg.epochs):
        beta = beta_schedule(epoch, cfg, beta_target)
        order = rng.permutation(x_train.shape[0])
        sums = np.zeros(3)
        for b, lo in enumerate(range(0, order.size, cfg.batch_size)):
            xb = x_train[order[lo : lo + cfg.batch_size]]
            noise = rng.standard_normal((xb.shape[0], k)).astype(np.float32)
            params.zero_grad()
            loss, _ = forward_loss(xb, params, noise, beta)
            vals = loss.values()
            if not all(math.isfinite(v) for v in vals):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: {vals}")
            T.backward(loss.total)
            grads = params.grads()
            if cfg.clip_norm is not None:
                clip_global_norm(grads, cfg.clip_norm)
            adam_step(arrays, grads, state, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            sums += np.array(vals) * xb.shape[0]
        params.zero_grad()
        tr_total, tr_rec, tr_reg = sums / x_train.shape[0]
        val_total = _evaluate(x_val, params, val_noise, beta_target, cfg.batch_size)
        history.records.append(EpochRecord(epoch, beta, tr_total, tr_rec, tr_reg, val_total))
        log.info(
            "epoch %d beta=%.3g train_total=%.5f rec=%.5f reg=%.4f val_total=%.5f",
            epoch, beta, tr_total, tr_rec, tr_reg, val_total,
        )
        history.stopped_epoch = epoch
        if epoch < first_eligible:
            continue
        if val_total < best_val - cfg.early_stop_min_delta or history.best_epoch < 0:
            best_val, best_params, stale = val_total, params.copy(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break
    return best_params, history


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    params: VaeParams
    model_config: ModelConfig
    train_config: TrainConfig
    norm: NormStats | None = None

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(int(e)) for e in v)
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v)


def _config_lines(model: ModelConfig, train_cfg: TrainConfig, norm: NormStats | None) -> str:
    lines = [f"model.{k}={_fmt(v)}" for k, v in asdict(model).items()]
    lines += [f"train.{k}={_fmt(v)}" for k, v in asdict(train_cfg).items()]
    if norm is not None:
        lines += [f"norm.transform={norm.transform}", f"norm.scale={norm.scale!r}"]
    return "\n".join(lines) + "\n"


def _parse_value(cls, name: str, raw: str):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    if raw == "none":
        return None
    if "tuple" in str(ftype):
        return tuple(int(v) for v in raw.split(","))
    if "bool" in str(ftype):
        return raw == "True"
    if "int" in str(ftype) and "float" not in str(ftype):
        return int(raw)
    if "float" in str(ftype):
        return float(raw)
    return raw


def save_checkpoint(
    params: VaeParams, model_config: ModelConfig, train_config: TrainConfig, path, norm: NormStats | None = None
) -> None:
    out = bytearray(CKPT_MAGIC)
    block = _config_lines(model_config, train_config, norm).encode("utf-8")
    out += struct.pack("<I", len(block)) + block
    for name, t in params.items():
        enc = name.encode("utf-8")
        out += struct.pack("<I", len(enc)) + enc
        out += struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape)
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def _take(buf: bytes, pos: int, n: int, what: str) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf[pos : pos + n], pos + n


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    raw, pos = _take(buf, 8, 4, "config length")
    (n,) = struct.unpack("<I", raw)
    raw, pos = _take(buf, pos, n, "config block")
    model_kv, train_kv, norm_kv = {}, {}, {}
    for line in raw.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        section, _, name = key.partition(".")
        {"model": model_kv, "train": train_kv, "norm": norm_kv}.get(section, {})[name] = value
    try:
        model = ModelConfig(**{k: _parse_value(ModelConfig, k, v) for k, v in model_kv.items()})
        train_cfg = TrainConfig(**{k: _parse_value(TrainConfig, k, v) for k, v in train_kv.items()})
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed config block: {exc}") from None
    norm = NormStats(float(norm_kv["scale"]), norm_kv.get("transform", "log1p_max")) if "scale" in norm_kv else None

    arrays: dict[str, np.ndarray] = {}
    while pos < len(buf):
        raw, pos = _take(buf, pos, 4, "parameter name length")
        (ln,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, ln, "parameter name")
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, 4, f"rank of {name}")
        (rank,) = struct.unpack("<I", raw)
        raw, pos = _take(buf, pos, 4 * rank, f"dims of {name}")
        dims = struct.unpack(f"<{rank}I", raw)
        count = int(np.prod(dims)) if rank else 1
        raw, pos = _take(buf, pos, 4 * count, f"values of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)

    expected = param_shapes(model)
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[name].shape != shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arrays[name].shape}, config implies {shape}")
    extra = set(arrays) - set(expected)
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)}")
    params = VaeParams.from_arrays({k: arrays[k] for k in expected}, model)
    return Checkpoint(params, model, train_cfg, norm)
