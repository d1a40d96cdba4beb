"""Convolutional VAE over precipitation cubes.

Encoder: two stride-2 3x3x3 convolutions with ReLU, a ReLU bottleneck dense
layer, then parallel dense heads for the posterior mean and log-variance.
Decoder: dense layer reshaped to ``decoder_channels`` maps at a quarter of the
input extent, two stride-2 transposed convolutions with ReLU, and a final
single-filter 3x3x3 transposed convolution followed by a non-negative output
activation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

KERNEL = 3
STAGES = 2
LOG_VAR_RANGE = (-10.0, 10.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_extent: tuple[int, int, int] = (16, 16, 16)
    conv_channels: int = 16
    bottleneck_width: int = 64
    latent_dim: int = 8
    decoder_channels: int = 32
    padding: int = 1
    output_activation: str = "softplus"

    def __post_init__(self):
        object.__setattr__(self, "input_extent", tuple(int(e) for e in self.input_extent))
        self.validate()

    @classmethod
    def full(cls) -> "ModelConfig":
        """Full-size network: 32^3 input, 128 conv channels, 500-wide bottleneck, 30 latents, 256 decoder maps."""
        return cls((32, 32, 32), 128, 500, 30, 256)

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    def validate(self) -> None:
        if len(self.input_extent) != 3 or any(e < 4 or e % 4 for e in self.input_extent):
            raise ConfigError(f"each input extent must be a positive multiple of 4, got {self.input_extent}")
        for name in ("conv_channels", "bottleneck_width", "latent_dim", "decoder_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.padding != 1:
            raise ConfigError("only padding 1 reproduces the 4x down/up-sampling of the network")
        if self.output_activation not in ("softplus", "relu"):
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    @property
    def reduced_extent(self) -> tuple[int, int, int]:
        return tuple(e // 4 for e in self.input_extent)

    @property
    def pixel_count(self) -> int:
        t, h, w = self.input_extent
        return t * h * w

    @property
    def flat_features(self) -> int:
        return self.conv_channels * int(np.prod(self.reduced_extent))

    @property
    def decoder_dense_width(self) -> int:
        return self.decoder_channels * int(np.prod(self.reduced_extent))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, b, k, cd = config.conv_channels, config.bottleneck_width, config.latent_dim, config.decoder_channels
    kk = (KERNEL,) * 3
    return {
        "enc.conv1_1.weight": (c, 1, *kk),
        "enc.conv1_1.bias": (c,),
        "enc.conv1_2.weight": (c, c, *kk),
        "enc.conv1_2.bias": (c,),
        "enc.dense_bn.weight": (b, config.flat_features),
        "enc.dense_bn.bias": (b,),
        "enc.dense_mu.weight": (k, b),
        "enc.dense_mu.bias": (k,),
        "enc.dense_logvar.weight": (k, b),
        "enc.dense_logvar.bias": (k,),
        "dec.dense.weight": (config.decoder_dense_width, k),
        "dec.dense.bias": (config.decoder_dense_width,),
        "dec.convt2_1.weight": (cd, c, *kk),
        "dec.convt2_1.bias": (c,),
        "dec.convt2_2.weight": (c, c, *kk),
        "dec.convt2_2.bias": (c,),
        "dec.convt2_3.weight": (c, 1, *kk),
        "dec.convt2_3.bias": (1,),
    }


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("dec.convt"):
        # each output of a transposed conv sees C_in * k^3 / stride^3 inputs on average; use C_in * k^3
        return shape[0] * int(np.prod(shape[2:]))
    return int(np.prod(shape[1:]))


class VaeParams:
    """Named parameter tensors, iterated in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig):
        expected = param_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            raise ConfigError(f"parameter names do not match config: {sorted(missing) or 'order differs'}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {tensors[name].shape}, config needs {shape}")
        self.tensors = tensors
        self.config = config

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=T.DTYPE, output_mean: float | None = None) -> "VaeParams":
        """Kaiming-uniform weights scaled by fan-in, zero biases.

        With ``output_mean`` the final bias instead starts where the output
        activation returns that value, so an untrained decoder already
        predicts the data mean rather than softplus(0) = 0.69.
        """
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".bias"):
                arr = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / _fan_in(name, shape))
                arr = rng.uniform(-bound, bound, size=shape)
            tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
        if output_mean is not None:
            m = max(float(output_mean), 1e-6)
            b = m if config.output_activation == "relu" else m + np.log(-np.expm1(-m))
            tensors["dec.convt2_3.bias"].data[...] = b
        return cls(tensors, config)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: ModelConfig) -> "VaeParams":
        return cls({k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in arrays.items()}, config)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "VaeParams":
        return VaeParams.from_arrays({k: t.data.copy() for k, t in self.tensors.items()}, self.config)

    def astype(self, dtype) -> "VaeParams":
        return VaeParams.from_arrays({k: t.data.astype(dtype) for k, t in self.tensors.items()}, self.config)

    @property
    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass
class LatentStats:
    mu: Tensor  # (N, k)
    log_var: Tensor  # (N, k)


@dataclass
class LossBreakdown:
    total: Tensor
    rec: Tensor
    reg: Tensor
    beta: float

    def values(self) -> tuple[float, float, float]:
        return self.total.item(), self.rec.item(), self.reg.item()


def _as_batch(x, config: ModelConfig, dtype) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if x.data.ndim == 4:
        x = T.reshape(x, (x.shape[0], 1, *x.shape[1:]))
    if x.data.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != config.input_extent:
        raise ConfigError(f"input batch {x.shape} does not match extent {config.input_extent}")
    return x


def encode(x, params: VaeParams, config: ModelConfig | None = None) -> LatentStats:
    """Posterior mean and clamped log-variance for a batch ``(N, 1, T, H, W)`` or ``(N, T, H, W)``."""
    config = config or params.config
    p = params
    h = _as_batch(x, config, p["enc.conv1_1.weight"].dtype)
    n = h.shape[0]
    pad = config.padding
    h = T.relu(T.conv3(h, p["enc.conv1_1.weight"], p["enc.conv1_1.bias"], 2, pad))
    h = T.relu(T.conv3(h, p["enc.conv1_2.weight"], p["enc.conv1_2.bias"], 2, pad))
    h = T.reshape(h, (n, -1))
    h = T.relu(T.dense(h, p["enc.dense_bn.weight"], p["enc.dense_bn.bias"]))
    mu = T.dense(h, p["enc.dense_mu.weight"], p["enc.dense_mu.bias"])
    log_var = T.clamp(T.dense(h, p["enc.dense_logvar.weight"], p["enc.dense_logvar.bias"]), *LOG_VAR_RANGE)
    return LatentStats(mu, log_var)


def reparameterize(stats: LatentStats, noise) -> Tensor:
    """``z = mu + exp(log_var / 2) * noise``; the caller owns the randomness."""
    noise = np.asarray(noise, dtype=stats.mu.dtype)
    if noise.shape != stats.mu.shape:
        raise ConfigError(f"noise shape {noise.shape} does not match latent shape {stats.mu.shape}")
    return T.add(stats.mu, T.mul(T.exp(T.mul(stats.log_var, 0.5)), noise))


def decode(z, params: VaeParams, config: ModelConfig | None = None) -> Tensor:
    config = config or params.config
    p = params
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=p["dec.dense.weight"].dtype))
    if z.data.ndim != 2 or z.shape[1] != config.latent_dim:
        raise ConfigError(f"latent batch {z.shape} does not match latent_dim {config.latent_dim}")
    n = z.shape[0]
    pad = config.padding
    h = T.dense(z, p["dec.dense.weight"], p["dec.dense.bias"])
    h = T.relu(T.reshape(h, (n, config.decoder_channels, *config.reduced_extent)))
    h = T.relu(T.conv3_transpose(h, p["dec.convt2_1.weight"], p["dec.convt2_1.bias"], 2, pad, 1))
    h = T.relu(T.conv3_transpose(h, p["dec.convt2_2.weight"], p["dec.convt2_2.bias"], 2, pad, 1))
    h = T.conv3_transpose(h, p["dec.convt2_3.weight"], p["dec.convt2_3.bias"], 1, pad)
    if config.output_activation == "softplus":
        return T.softplus(h)
    return T.relu(h)


def kl_normal(stats: LatentStats) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over latent dims, averaged over the batch."""
    mu, lv = stats.mu, stats.log_var
    per_dim = T.mul(T.sub(T.sub(T.add(T.square(mu), T.exp(lv)), 1.0), lv), 0.5)
    return T.mean(T.sum_rows(per_dim))


def elbo_loss(x, x_hat: Tensor, stats: LatentStats, beta: float) -> LossBreakdown:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
    if x.data.size != x_hat.data.size:
        raise ConfigError(f"input {x.shape} and reconstruction {x_hat.shape} differ in size")
    if x.shape != x_hat.shape:
        x = T.reshape(x, x_hat.shape)
    rec = T.mean(T.square(T.sub(x, x_hat)))
    reg = kl_normal(stats)
    total = T.add(rec, T.mul(reg, float(beta)))
    return LossBreakdown(total, rec, reg, float(beta))


def forward_loss(x, params: VaeParams, noise, beta: float) -> tuple[LossBreakdown, Tensor]:
    stats = encode(x, params)
    x_hat = decode(reparameterize(stats, noise), params)
    return elbo_loss(x, x_hat, stats, beta), x_hat
