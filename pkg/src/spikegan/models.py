"""Spiking generator, spiking discriminator, and the analog discriminator.

Generator, per step::

    z -> Linear -> LIF -> ConvT(4, s2) -> LIF -> ConvT(4, s2) -> X_t

The X_t sequence is decoded (attention or mean) and squashed with tanh.

Discriminator, per step::

    image -> 3 x [Conv(3, s1, p1) -> LIF -> AvgPool(2)] -> Linear -> readout LIF

Inputs whose sides are not multiples of 8 are padded with -1 (background)
before the first block.  The analog discriminator keeps the same layers
but swaps LIF for LeakyReLU and runs a single step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .decoding import AttentionDecoderParams, ScoreTrace, decode_sequence
from .nn import ConfigError, Conv2d, ConvTranspose2d, Linear, Module, ParameterRegistry
from .snn import LIFConfig, encode_poisson, lif_scan, readout_scan
from .tensor import Parameter, Tensor

DECODERS = ("mean", "attention")
NEURONS = ("lif", "analog")


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 10
    image_shape: tuple[int, int, int] = (1, 28, 28)
    hidden_channels: tuple[int, int] = (128, 64)
    T: int = 16
    decoder: str = "mean"
    d_k: int = 64
    lif: LIFConfig = field(default_factory=LIFConfig)
    init_gain: float = 1.0

    def __post_init__(self):
        C, H, W = self.image_shape
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if H % 4 or W % 4:
            raise ConfigError(f"generator image sides must be multiples of 4, got {H}x{W}")
        if len(self.hidden_channels) != 2 or min(self.hidden_channels) < 1:
            raise ConfigError(f"hidden_channels needs two positive widths, got {self.hidden_channels}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_shape: tuple[int, int, int] = (1, 28, 28)
    channels: tuple[int, int, int] = (64, 128, 256)
    neuron: str = "lif"
    T: int = 16
    readout: str = "last"
    encoding: str = "direct"
    lif: LIFConfig = field(default_factory=LIFConfig)
    leaky_slope: float = 0.2
    init_gain: float = 1.0

    def __post_init__(self):
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError(f"discriminator needs three positive block widths, got {self.channels}")
        if self.neuron not in NEURONS:
            raise ConfigError(f"neuron must be one of {NEURONS}, got {self.neuron!r}")
        if self.readout not in ("last", "mean"):
            raise ConfigError(f"readout must be 'last' or 'mean', got {self.readout!r}")
        if self.encoding not in ("direct", "poisson"):
            raise ConfigError(f"encoding must be 'direct' or 'poisson', got {self.encoding!r}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")

    @property
    def pool_pads(self) -> tuple[tuple[int, int], ...]:
        """(bottom, right) zero padding applied before each of the three 2x pools."""
        _, h, w = self.image_shape
        pads = []
        for _ in range(3):
            pads.append((h % 2, w % 2))
            h, w = (h + h % 2) // 2, (w + w % 2) // 2
        return tuple(pads)

    @property
    def feature_shape(self) -> tuple[int, int]:
        """Spatial size after the last pool."""
        _, h, w = self.image_shape
        return -(-h // 8), -(-w // 8)


class GeneratorOutput(NamedTuple):
    image: Tensor
    x_seq: Tensor  # (T, N, C, H, W) presynaptic inputs to the decoder
    trace: ScoreTrace | None


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        C, H, W = cfg.image_shape
        c0, c1 = cfg.hidden_channels
        self._base = (c0, H // 4, W // 4)
        g = cfg.init_gain
        self.fc = Linear(cfg.latent_dim, c0 * (H // 4) * (W // 4), rng, gain=g)
        self.up1 = ConvTranspose2d(c0, c1, 4, rng, stride=2, padding=1, gain=g)
        self.up2 = ConvTranspose2d(c1, C, 4, rng, stride=2, padding=1, gain=g)
        self.decoder = AttentionDecoderParams(C * H * W, cfg.d_k, rng) if cfg.decoder == "attention" else None

    def presynaptic(self, z: Tensor, steps: int) -> Tensor:
        """Real-valued bottleneck inputs, stacked as (T, N, C, H, W)."""
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ConfigError(f"latent must be (N, {self.cfg.latent_dim}), got {z.shape}")
        N = z.shape[0]
        lif = self.cfg.lif
        # the latent is static, so the first layer's current is the same every step
        current = self.fc(z)
        o1 = lif_scan(T.expand(current, (steps,) + current.shape), lif)
        h = self.up1(T.reshape(o1, (steps * N,) + self._base))
        o2 = lif_scan(T.reshape(h, (steps, N) + h.shape[1:]), lif)
        x = self.up2(T.reshape(o2, (steps * N,) + o2.shape[2:]))
        return T.reshape(x, (steps, N) + x.shape[1:])

    def forward(self, z: Tensor, steps: int | None = None, force_equal: bool = False) -> GeneratorOutput:
        steps = self.cfg.T if steps is None else steps
        stacked = self.presynaptic(z, steps)
        if self.decoder is not None:
            xs = [stacked[t] for t in range(steps)]
            raw, trace = decode_sequence(xs, self.decoder, force_equal=force_equal)
        else:
            xs = None
            raw, trace = T.mean(stacked, axis=0), None
        return GeneratorOutput(T.tanh(raw), stacked, trace)


class Discriminator(Module):
    """Spiking (``neuron='lif'``) or analog (``neuron='analog'``) critic."""

    def __init__(self, cfg: DiscriminatorConfig, rng: np.random.Generator):
        self.cfg = cfg
        C = cfg.image_shape[0]
        c1, c2, c3 = cfg.channels
        g = cfg.init_gain
        self.blocks = [
            Conv2d(C, c1, 3, rng, padding=1, gain=g),
            Conv2d(c1, c2, 3, rng, padding=1, gain=g),
            Conv2d(c2, c3, 3, rng, padding=1, gain=g),
        ]
        Hf, Wf = cfg.feature_shape
        self.fc = Linear(c3 * Hf * Wf, 1, rng, gain=g)

    def _check(self, image: Tensor) -> None:
        if image.ndim != 4 or tuple(image.shape[1:]) != tuple(self.cfg.image_shape):
            raise ConfigError(f"discriminator expects (N, {self.cfg.image_shape}), got {image.shape}")

    def _pool(self, h: Tensor, block: int) -> Tensor:
        # odd sides get one zero row/column, i.e. the partial window counts as silent
        bottom, right = self.cfg.pool_pads[block]
        if bottom or right:
            h = T.pad2d(h, (0, bottom, 0, right))
        return T.avgpool2d(h, 2)

    def forward(self, image: Tensor, steps: int | None = None,
                rng: np.random.Generator | None = None) -> Tensor:
        self._check(image)
        x = image
        N = x.shape[0]
        if self.cfg.neuron == "analog":
            h = x
            for i, conv in enumerate(self.blocks):
                h = self._pool(T.leaky_relu(conv(h), self.cfg.leaky_slope), i)
            return T.reshape(self.fc(T.flatten(h)), (N,))

        steps = self.cfg.T if steps is None else steps
        lif = self.cfg.lif
        if self.cfg.encoding == "direct":
            # identical input every step: convolve once, broadcast over time
            c = self.blocks[0](x)
            c = T.expand(c, (steps,) + c.shape)
        else:
            seq = encode_poisson(x, steps, rng if rng is not None else np.random.default_rng(0))
            c = self.blocks[0](T.reshape(T.stack(seq), (steps * N,) + x.shape[1:]))
            c = T.reshape(c, (steps, N) + c.shape[1:])
        for i in range(3):
            spikes = lif_scan(c, lif)
            h = self._pool(T.reshape(spikes, (steps * N,) + spikes.shape[2:]), i)
            if i < 2:
                c = self.blocks[i + 1](h)
                c = T.reshape(c, (steps, N) + c.shape[1:])
        currents = T.reshape(self.fc(T.flatten(h)), (steps, N))
        return readout_scan(currents, lif, self.cfg.readout)


def generator_forward(z: Tensor, steps: int, model: Generator, force_equal: bool = False) -> GeneratorOutput:
    return model(z, steps, force_equal=force_equal)


def discriminator_forward(image: Tensor, steps: int, model: Discriminator,
                          rng: np.random.Generator | None = None) -> Tensor:
    if model.cfg.neuron != "lif":
        raise ConfigError("discriminator_forward needs a spiking discriminator")
    return model(image, steps, rng=rng)


def hybrid_discriminator_forward(image: Tensor, model: Discriminator) -> Tensor:
    if model.cfg.neuron != "analog":
        raise ConfigError("hybrid_discriminator_forward needs an analog discriminator")
    return model(image)


def parameter_registry(model: Module, prefix: str = "") -> ParameterRegistry:
    """Name every parameter of ``model``; duplicate names are a config error."""
    reg = ParameterRegistry()
    for name, p in model.named_parameters():
        reg.add(prefix + name, p)
    return reg


def spiking_to_analog(cfg: DiscriminatorConfig) -> DiscriminatorConfig:
    return replace(cfg, neuron="analog", T=1)


__all__ = [
    "GeneratorConfig",
    "DiscriminatorConfig",
    "Generator",
    "Discriminator",
    "GeneratorOutput",
    "Parameter",
    "generator_forward",
    "discriminator_forward",
    "hybrid_discriminator_forward",
    "parameter_registry",
    "spiking_to_analog",
]
