"""Adversarial training: losses, RMSProp, learning-rate schedule, the loop.

Variant bindings::

    variant  loss     discriminator  decoder
    SGAN     minimax  spiking        mean
    SWGAN    em       spiking        mean
    SGAD     em       spiking        attention
    HYBRID   minimax  analog         mean

Randomness is split into independent streams keyed by ``(seed, stream,
epoch)``, so an epoch's batches, latents and spike encodings depend only on
the config and the epoch index.  That makes resuming from an epoch-boundary
checkpoint bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .decoding import ScoreTrace
from .data import BatchPlan, ImageDataset, normalize
from .errors import ConfigError, DivergenceError
from .models import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, parameter_registry
from .nn import StateDictError
from .snn import LIFConfig
from .tensor import Parameter, Tensor

VARIANTS = {
    "SGAN": ("minimax", "lif", "mean"),
    "SWGAN": ("em", "lif", "mean"),
    "SGAD": ("em", "lif", "attention"),
    "HYBRID": ("minimax", "analog", "mean"),
}
DEFAULT_LR = {"em": 5e-5, "minimax": 2e-4}
DESK_LR = 2e-3

# random streams (batch order uses BatchPlan, seeded by (seed, epoch))
_INIT_G, _INIT_D, _LATENT, _ENCODE = 1, 2, 3, 4


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "SGAD"
    loss: str | None = None
    epochs: int = 200
    T: int = 16
    batch_size: int = 64
    lr_g: float | None = None
    lr_d: float | None = None
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    n_critic: int = 1
    clip: float | None = None
    seed: int = 0
    latent_dim: int = 10
    g_channels: tuple[int, int] = (128, 64)
    d_channels: tuple[int, int, int] = (64, 128, 256)
    d_k: int = 64
    tau: float = 2.0
    v_th: float = 1.0
    surrogate_width: float = 0.5
    surrogate: str = "rect"
    readout: str = "last"
    encoding: str = "direct"
    g_init_gain: float = 1.0
    d_init_gain: float = 1.0
    record_wall_time: bool = False

    def __post_init__(self):
        variant = str(self.variant).upper()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        object.__setattr__(self, "variant", variant)
        bound = VARIANTS[variant][0]
        loss = bound if self.loss is None else str(self.loss).lower()
        if loss != bound:
            raise ConfigError(f"variant {variant} trains with the {bound} loss, not {self.loss!r}")
        object.__setattr__(self, "loss", loss)
        for name in ("lr_g", "lr_d"):
            value = getattr(self, name)
            if value is None:
                object.__setattr__(self, name, DEFAULT_LR[loss])
            elif not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        object.__setattr__(self, "g_channels", tuple(int(c) for c in self.g_channels))
        object.__setattr__(self, "d_channels", tuple(int(c) for c in self.d_channels))
        checks = [
            (self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"),
            (self.T >= 1, f"T must be >= 1, got {self.T}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (0 <= self.rmsprop_alpha < 1, f"rmsprop_alpha must be in [0, 1), got {self.rmsprop_alpha}"),
            (self.rmsprop_eps >= 0, f"rmsprop_eps must be >= 0, got {self.rmsprop_eps}"),
            (self.n_critic >= 1, f"n_critic must be >= 1, got {self.n_critic}"),
            (self.clip is None or self.clip > 0, f"clip must be positive when set, got {self.clip}"),
            (self.g_init_gain > 0, f"g_init_gain must be positive, got {self.g_init_gain}"),
            (self.d_init_gain > 0, f"d_init_gain must be positive, got {self.d_init_gain}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        try:
            self.lif_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def neuron(self) -> str:
        return VARIANTS[self.variant][1]

    @property
    def decoder(self) -> str:
        return VARIANTS[self.variant][2]

    def lif_config(self) -> LIFConfig:
        return LIFConfig(tau=self.tau, v_th=self.v_th, surrogate_width=self.surrogate_width,
                         surrogate=self.surrogate)

    def generator_config(self, image_shape: tuple[int, int, int]) -> GeneratorConfig:
        return GeneratorConfig(latent_dim=self.latent_dim, image_shape=tuple(image_shape),
                               hidden_channels=self.g_channels, T=self.T, decoder=self.decoder,
                               d_k=self.d_k, lif=self.lif_config(), init_gain=self.g_init_gain)

    def discriminator_config(self, image_shape: tuple[int, int, int]) -> DiscriminatorConfig:
        return DiscriminatorConfig(image_shape=tuple(image_shape), channels=self.d_channels,
                                   neuron=self.neuron, T=self.T if self.neuron == "lif" else 1,
                                   readout=self.readout, encoding=self.encoding, lif=self.lif_config(),
                                   init_gain=self.d_init_gain)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["g_channels"] = list(self.g_channels)
        out["d_channels"] = list(self.d_channels)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(unknown)}")
        return cls(**values)


def desk_config(variant: str, seed: int = 0, **overrides) -> TrainConfig:
    """Small preset sized for a single CPU core (40 epochs, T=8, batch 64).

    Narrow layers fire too rarely under the plain uniform init, so weights are
    scaled up (the analog discriminator of HYBRID keeps the plain init).  With
    only ~1,240 updates the usual learning rates barely move the weights, so
    every variant uses 2e-3 for both networks.
    """
    spiking_d = VARIANTS[str(variant).upper()][1] == "lif" if str(variant).upper() in VARIANTS else True
    base = dict(variant=variant, seed=seed, epochs=40, T=8, batch_size=64,
                g_channels=(16, 8), d_channels=(4, 8, 16), d_k=16, lr_g=DESK_LR, lr_d=DESK_LR,
                g_init_gain=5.0, d_init_gain=10.0 if spiking_d else 1.0)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------- losses

def _check_logits(*logits: Tensor) -> None:
    for x in logits:
        if not np.all(np.isfinite(x.data)):
            raise DivergenceError("non-finite discriminator output")


def minimax_d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    _check_logits(d_real, d_fake)
    # log(1 - sigmoid(x)) == log_sigmoid(-x)
    return -(T.mean(T.log_sigmoid(d_real)) + T.mean(T.log_sigmoid(-d_fake)))


def minimax_g_loss(d_fake: Tensor) -> Tensor:
    """Non-saturating form: maximise log D(G(z))."""
    _check_logits(d_fake)
    return -T.mean(T.log_sigmoid(d_fake))


def em_d_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    _check_logits(d_real, d_fake)
    return -(T.mean(d_real) - T.mean(d_fake))


def em_g_loss(d_fake: Tensor) -> Tensor:
    _check_logits(d_fake)
    return -T.mean(d_fake)


def minimax_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    return minimax_d_loss(d_real, d_fake), minimax_g_loss(d_fake)


def em_losses(d_real: Tensor, d_fake: Tensor) -> tuple[Tensor, Tensor]:
    return em_d_loss(d_real, d_fake), em_g_loss(d_fake)


_LOSSES = {"minimax": (minimax_d_loss, minimax_g_loss), "em": (em_d_loss, em_g_loss)}


# ---------------------------------------------------------------- optimiser

@dataclass
class OptState:
    """Running mean-square accumulator per parameter, in registry order."""

    names: list[str]
    acc: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, named: Sequence[tuple[str, Parameter]]) -> "OptState":
        return cls([n for n, _ in named], [np.zeros_like(p.data) for _, p in named])


def rmsprop_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None], state: OptState,
                 lr: float, alpha: float = 0.99, eps: float = 1e-8) -> None:
    """In place: ``s = alpha*s + (1-alpha)*g^2``; ``p -= lr * g / (sqrt(s) + eps)``.

    Parameters whose gradient is None are left alone, accumulator included.
    """
    if not (len(params) == len(grads) == len(state.acc)):
        raise ValueError(f"rmsprop_step: {len(params)} params, {len(grads)} grads, "
                         f"{len(state.acc)} accumulators")
    for p, g, s in zip(params, grads, state.acc):
        if g is None:
            continue
        if g.shape != p.shape or s.shape != p.shape:
            raise T.ShapeError(f"rmsprop_step: grad {g.shape} / accumulator {s.shape} vs param {p.shape}")
        dt = p.data.dtype.type
        s *= dt(alpha)
        s += dt(1.0 - alpha) * g * g
        p.data -= dt(lr) * g / (np.sqrt(s) + dt(eps))
    state.step += 1


def cosine_anneal_lr(lr0: float, epoch: int, total_epochs: int) -> float:
    """Constant for the first half, then a half cosine down towards zero."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    half = total_epochs / 2
    if epoch < half:
        return lr0
    return lr0 * (1 + math.cos(math.pi * (epoch - half) / half)) / 2


def grad_norm(params: Sequence[Parameter]) -> float:
    """Sum of per-parameter L2 norms (parameters without gradients count as zero)."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sqrt(np.sum(np.square(p.grad, dtype=np.float64))))
    return total


# ---------------------------------------------------------------- telemetry

TELEMETRY_COLUMNS = ("epoch", "loss_d", "loss_g", "grad_norm_g", "grad_norm_d", "lr", "wall_seconds")


@dataclass
class TelemetryRow:
    epoch: int
    loss_d: float
    loss_g: float
    grad_norm_g: float
    grad_norm_d: float
    lr: float
    wall_seconds: float | None = None


@dataclass
class RunTelemetry:
    rows: list[TelemetryRow] = field(default_factory=list)

    def write_csv(self, path: str | os.PathLike) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TELEMETRY_COLUMNS)
            for r in self.rows:
                wall = "" if r.wall_seconds is None else f"{r.wall_seconds:.3f}"
                writer.writerow([r.epoch, repr(r.loss_d), repr(r.loss_g), repr(r.grad_norm_g),
                                 repr(r.grad_norm_d), repr(r.lr), wall])
        os.replace(tmp, path)

    @classmethod
    def read_csv(cls, path: str | os.PathLike) -> "RunTelemetry":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TELEMETRY_COLUMNS:
                raise ValueError(f"{path}: columns {reader.fieldnames}, expected {list(TELEMETRY_COLUMNS)}")
            rows = []
            for line in reader:
                wall = line["wall_seconds"]
                rows.append(TelemetryRow(int(line["epoch"]), float(line["loss_d"]), float(line["loss_g"]),
                                         float(line["grad_norm_g"]), float(line["grad_norm_d"]),
                                         float(line["lr"]), float(wall) if wall else None))
        return cls(rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)


# ---------------------------------------------------------------- trainer

def _finite(value: float, what: str, epoch: int, step: int) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} is {value} at epoch {epoch}, step {step}")
    return value


class Trainer:
    """Owns both networks, their optimiser state and the run telemetry."""

    def __init__(self, cfg: TrainConfig, image_shape: tuple[int, int, int]):
        self.cfg = cfg
        self.image_shape = tuple(int(d) for d in image_shape)
        self.G = Generator(cfg.generator_config(self.image_shape), np.random.default_rng([cfg.seed, _INIT_G]))
        self.D = Discriminator(cfg.discriminator_config(self.image_shape),
                               np.random.default_rng([cfg.seed, _INIT_D]))
        self.g_named = parameter_registry(self.G, "G.").items()
        self.d_named = parameter_registry(self.D, "D.").items()
        self.opt_g = OptState.zeros(self.g_named)
        self.opt_d = OptState.zeros(self.d_named)
        self.epoch = 0
        self.telemetry = RunTelemetry()
        self.epoch_seconds: list[float] = []
        self._d_loss, self._g_loss = _LOSSES[cfg.loss]

    # one epoch -----------------------------------------------------------

    def _critic(self, images: Tensor, rng: np.random.Generator | None) -> Tensor:
        if self.cfg.neuron == "analog":
            return self.D(images)
        return self.D(images, self.cfg.T, rng=rng)

    def _latent(self, rng: np.random.Generator) -> Tensor:
        return Tensor(rng.standard_normal((self.cfg.batch_size, self.cfg.latent_dim), dtype=np.float32))

    def train_epoch(self, data: np.ndarray) -> TelemetryRow:
        cfg, epoch = self.cfg, self.epoch
        if epoch >= cfg.epochs:
            raise ConfigError(f"run already finished {cfg.epochs} epochs")
        start = time.perf_counter()
        plan = BatchPlan(cfg.seed, cfg.batch_size)
        batches = plan.indices(len(data), epoch)
        z_rng = np.random.default_rng([cfg.seed, _LATENT, epoch])
        enc_rng = np.random.default_rng([cfg.seed, _ENCODE, epoch]) if cfg.encoding == "poisson" else None
        lr_g = cosine_anneal_lr(cfg.lr_g, epoch, cfg.epochs)
        lr_d = cosine_anneal_lr(cfg.lr_d, epoch, cfg.epochs)
        g_params = [p for _, p in self.g_named]
        d_params = [p for _, p in self.d_named]
        losses_d, losses_g, norms_d, norms_g = [], [], [], []
        for step, idx in enumerate(batches):
            real = Tensor(data[idx])
            for k in range(cfg.n_critic):
                if k == cfg.n_critic - 1:
                    # the last critic batch is taped and reused by the generator step
                    generated = self.G(self._latent(z_rng)).image
                    fake = T.detach(generated)
                else:
                    with T.no_grad():
                        fake = self.G(self._latent(z_rng)).image
                self.D.zero_grad()
                loss_d = self._d_loss(self._critic(real, enc_rng), self._critic(fake, enc_rng))
                loss_d.backward()
                losses_d.append(_finite(loss_d.item(), "discriminator loss", epoch, step))
                norms_d.append(_finite(grad_norm(d_params), "discriminator gradient norm", epoch, step))
                rmsprop_step(d_params, [p.grad for p in d_params], self.opt_d, lr_d,
                             cfg.rmsprop_alpha, cfg.rmsprop_eps)
                if cfg.clip is not None:
                    for p in d_params:
                        np.clip(p.data, -cfg.clip, cfg.clip, out=p.data)
            self.G.zero_grad()
            self.D.set_requires_grad(False)
            try:
                loss_g = self._g_loss(self._critic(generated, enc_rng))
                loss_g.backward()
            finally:
                self.D.set_requires_grad(True)
            losses_g.append(_finite(loss_g.item(), "generator loss", epoch, step))
            norms_g.append(_finite(grad_norm(g_params), "generator gradient norm", epoch, step))
            rmsprop_step(g_params, [p.grad for p in g_params], self.opt_g, lr_g,
                         cfg.rmsprop_alpha, cfg.rmsprop_eps)
        self.G.zero_grad()
        self.D.zero_grad()
        seconds = time.perf_counter() - start
        self.epoch_seconds.append(seconds)
        row = TelemetryRow(epoch + 1, float(np.mean(losses_d)), float(np.mean(losses_g)),
                           float(np.mean(norms_g)), float(np.mean(norms_d)), lr_g,
                           seconds if cfg.record_wall_time else None)
        self.telemetry.rows.append(row)
        self.epoch += 1
        return row

    def fit(self, dataset: ImageDataset, epochs: int | None = None,
            on_epoch: Callable[["Trainer", TelemetryRow], None] | None = None) -> RunTelemetry:
        """Train until ``epochs`` total epochs are done (default: the configured count)."""
        if dataset.image_shape != self.image_shape:
            raise ConfigError(f"dataset images are {dataset.image_shape}, trainer built for {self.image_shape}")
        if self.cfg.batch_size > len(dataset):
            raise ConfigError(f"batch_size {self.cfg.batch_size} exceeds dataset size {len(dataset)}")
        data = normalize(dataset.images).data
        stop = self.cfg.epochs if epochs is None else min(epochs, self.cfg.epochs)
        while self.epoch < stop:
            row = self.train_epoch(data)
            if on_epoch is not None:
                on_epoch(self, row)
        return self.telemetry

    # sampling ------------------------------------------------------------

    def sample(self, n: int, seed: int = 0, batch: int = 256, force_equal: bool = False):
        """Generate ``n`` images (and the score trace for attention decoders)."""
        return sample_images(self.G, n, seed, batch, force_equal)

    # persistence ---------------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.g_named + self.d_named}
        for prefix, opt in (("opt_g.", self.opt_g), ("opt_d.", self.opt_d)):
            for name, acc in zip(opt.names, opt.acc):
                out[prefix + name] = acc
        return out

    def meta(self) -> dict[str, Any]:
        return {
            "kind": "spikegan-trainer",
            "config": self.cfg.to_dict(),
            "image_shape": list(self.image_shape),
            "epoch": self.epoch,
            "opt_steps": {"g": self.opt_g.step, "d": self.opt_d.step},
            "telemetry": [asdict(r) for r in self.telemetry.rows],
        }

    def save(self, path: str | os.PathLike) -> None:
        ckpt.save(path, self.arrays(), self.meta())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Trainer":
        arrays, meta = ckpt.load(path)
        if meta.get("kind") != "spikegan-trainer":
            raise ckpt.FormatError(f"{path}: not a trainer checkpoint")
        cfg = TrainConfig.from_dict(meta["config"])
        trainer = cls(cfg, tuple(meta["image_shape"]))
        groups: dict[str, dict[str, np.ndarray]] = {"G.": {}, "D.": {}, "opt_g.": {}, "opt_d.": {}}
        for key, value in arrays.items():
            prefix = next((p for p in groups if key.startswith(p)), None)
            if prefix is None:
                raise StateDictError(f"{path}: unknown parameters: {key}", [key], "unknown")
            groups[prefix][key[len(prefix):]] = value
        for prefix, model in (("G.", trainer.G), ("D.", trainer.D)):
            try:
                model.load_state_dict(groups[prefix])
            except StateDictError as exc:
                keys = [prefix + k for k in exc.keys]
                raise StateDictError(f"{path}: {exc.kind} parameters: {', '.join(keys)}", keys, exc.kind) from exc
        for prefix, opt in (("opt_g.", trainer.opt_g), ("opt_d.", trainer.opt_d)):
            stored = groups[prefix]
            missing = [n for n in opt.names if n not in stored]
            unknown = sorted(set(stored) - set(opt.names))
            if missing or unknown:
                keys = [prefix + k for k in missing + unknown]
                raise StateDictError(f"{path}: optimiser state mismatch: {', '.join(keys)}", keys)
            opt.acc = [stored[n].copy() for n in opt.names]
        trainer.opt_g.step = int(meta["opt_steps"]["g"])
        trainer.opt_d.step = int(meta["opt_steps"]["d"])
        trainer.epoch = int(meta["epoch"])
        trainer.telemetry = RunTelemetry([TelemetryRow(**r) for r in meta["telemetry"]])
        return trainer


def sample_images(G: Generator, n: int, seed: int = 0, batch: int = 256, force_equal: bool = False):
    """``(images (n, C, H, W) float32 in [-1, 1], ScoreTrace or None, x_seq (T, n, C, H, W))``."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    rng = np.random.default_rng([seed, _LATENT, 1 << 20])
    z = rng.standard_normal((n, G.cfg.latent_dim), dtype=np.float32)
    images, xs, ax, av = [], [], [], []
    with T.no_grad():
        for i in range(0, n, batch):
            out = G(Tensor(z[i:i + batch]), force_equal=force_equal)
            images.append(out.image.data)
            xs.append(out.x_seq.data)
            if out.trace is not None:
                ax.append(out.trace.alpha_x)
                av.append(out.trace.alpha_v)
    trace = None
    if ax:
        trace = ScoreTrace(np.concatenate(ax, axis=1), np.concatenate(av, axis=1))
    return np.concatenate(images), trace, np.concatenate(xs, axis=1)


def checkpoint_save(trainer: Trainer, path: str | os.PathLike) -> None:
    trainer.save(path)


def checkpoint_load(path: str | os.PathLike) -> Trainer:
    return Trainer.load(path)


def train(cfg: TrainConfig, dataset: ImageDataset, telemetry_path: str | os.PathLike | None = None,
          checkpoint_path: str | os.PathLike | None = None) -> Trainer:
    """Run a full training job; telemetry and checkpoint are rewritten after every epoch."""
    trainer = Trainer(cfg, dataset.image_shape)

    def _persist(t: Trainer, _row: TelemetryRow) -> None:
        if telemetry_path is not None:
            t.telemetry.write_csv(telemetry_path)
        if checkpoint_path is not None:
            t.save(checkpoint_path)

    trainer.fit(dataset, on_epoch=_persist)
    return trainer


__all__ = [
    "TrainConfig", "desk_config", "VARIANTS", "OptState", "Trainer", "RunTelemetry", "TelemetryRow",
    "minimax_losses", "em_losses", "rmsprop_step", "cosine_anneal_lr", "grad_norm",
    "checkpoint_save", "checkpoint_load", "sample_images", "train", "DivergenceError",
]
