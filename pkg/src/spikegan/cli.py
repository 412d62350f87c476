"""Command line entry points.

Exit codes: 0 success, 1 configuration or usage error, 2 data error (missing
or malformed dataset or checkpoint), 3 training divergence, 4 metric gate
(missing or unreliable feature extractor).

``train`` reads an optional ``key = value`` config file with one section per
concern::

    [training]
    variant = sgad
    epochs = 40
    T = 8

    [data]
    dataset = mnist
    data_dir = data/mnist_5k
    subset = 2000

    [output]
    out = runs/sgad
    sample_every = 5

Every key can be overridden on the command line (``--epochs 2``,
``--latent-dim 10``, ``--t 8``).  The resolved configuration is written to
``<out>/config.ini``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import checkpoint as ckpt
from .data import DataError, ImageDataset, SYNTHETIC_KINDS, load_cifar10, load_mnist, load_planar, normalize, \
    synthetic_dataset
from .errors import ConfigError, DivergenceError, MetricError
from .images import sample_grid, step_strip, write_ppm
from .metrics import (ReportError, extractor_fingerprint, feature_stats, frechet_distance,
                      gradnorm_report, load_extractor, load_stats, save_extractor, save_stats,
                      train_proxy_extractor)
from .nn import StateDictError
from .training import TrainConfig, Trainer, TelemetryRow, sample_images

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_METRIC = range(5)
DATASETS = ("mnist", "fashion-mnist", "cifar10", "planar") + SYNTHETIC_KINDS


@dataclasses.dataclass(frozen=True)
class DataOptions:
    dataset: str = "mnist"
    data_dir: str = "data/mnist_5k"
    subset: int | None = None
    synthetic_n: int = 256
    synthetic_size: int = 8

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected one of {DATASETS}")
        if self.subset is not None and self.subset < 1:
            raise ConfigError(f"subset must be >= 1, got {self.subset}")
        if self.synthetic_n < 1 or self.synthetic_size < 4 or self.synthetic_size % 4:
            raise ConfigError("synthetic_n must be >= 1 and synthetic_size a positive multiple of 4")


@dataclasses.dataclass(frozen=True)
class OutputOptions:
    out: str = "runs/latest"
    sample_every: int = 5
    sample_n: int = 16

    def __post_init__(self):
        if self.sample_every < 0 or self.sample_n < 1:
            raise ConfigError("sample_every must be >= 0 and sample_n >= 1")


SECTIONS = {"training": TrainConfig, "data": DataOptions, "output": OutputOptions}


# ---------------------------------------------------------------- config parsing

def _coerce(annotation: str, raw: str, key: str) -> Any:
    text = raw.strip()
    optional = "None" in annotation
    if optional and text.lower() in ("", "none"):
        return None
    base = annotation.replace("| None", "").strip()
    try:
        if base == "bool":
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base.startswith("tuple"):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base}") from exc


def _field_map() -> dict[str, tuple[str, dataclasses.Field]]:
    out = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            out[f.name.lower()] = (section, f)
    return out


def read_config_file(path: str | os.PathLike | None) -> dict[str, str]:
    """Flatten a sectioned ``key = value`` file into ``{field: raw value}``."""
    if path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    fmap = _field_map()
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            entry = fmap.get(key.lower())
            if entry is None or entry[0] != section:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            values[key.lower()] = raw
    return values


def resolve(raw: dict[str, str]) -> tuple[TrainConfig, DataOptions, OutputOptions]:
    fmap = _field_map()
    parsed: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, value in raw.items():
        section, f = fmap[key]
        parsed[section][f.name] = _coerce(str(f.type), value, key)
    return (TrainConfig(**parsed["training"]), DataOptions(**parsed["data"]), OutputOptions(**parsed["output"]))


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def render_config(*parts) -> str:
    lines = []
    for (section, _), obj in zip(SECTIONS.items(), parts):
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- shared helpers

def load_dataset(opts: DataOptions, seed: int = 0) -> ImageDataset:
    if opts.dataset in SYNTHETIC_KINDS:
        shape = (1, opts.synthetic_size, opts.synthetic_size)
        ds = synthetic_dataset(opts.dataset, opts.synthetic_n, shape, seed)
    elif opts.dataset in ("mnist", "fashion-mnist"):
        ds = load_mnist(opts.data_dir, name=opts.dataset)
    elif opts.dataset == "cifar10":
        ds = load_cifar10(opts.data_dir)
    else:
        ds = load_planar(opts.data_dir)
    if opts.subset is not None:
        if opts.subset > len(ds):
            raise DataError(f"{opts.dataset}: subset of {opts.subset} requested, only {len(ds)} images")
        ds = ds.subset(opts.subset)
    return ds


def _load_trainer(path: str) -> Trainer:
    try:
        return Trainer.load(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except (ckpt.CheckpointError, StateDictError, KeyError) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}") from exc


def _parse_grid(text: str | None, n: int) -> tuple[int, int]:
    if text is None:
        cols = math.ceil(math.sqrt(n))
        return math.ceil(n / cols), cols
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"grid must look like 4x4, got {text!r}") from exc
    if rows < 1 or cols < 1 or rows * cols < n:
        raise ConfigError(f"a {rows}x{cols} grid cannot hold {n} images")
    return rows, cols


def _write_samples(trainer: Trainer, path: Path, n: int, seed: int) -> None:
    images, _, _ = sample_images(trainer.G, n, seed)
    write_ppm(path, sample_grid(images, *_parse_grid(None, n)))


# ---------------------------------------------------------------- commands

def cmd_train(args: argparse.Namespace, overrides: dict[str, str]) -> int:
    raw = read_config_file(args.config)
    raw.update(overrides)
    cfg, data_opts, out_opts = resolve(raw)
    dataset = load_dataset(data_opts, cfg.seed)
    out = Path(out_opts.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(render_config(cfg, data_opts, out_opts))
    print(render_config(cfg, data_opts, out_opts), end="")
    ckpt_path = out / "checkpoint.ckpt"
    if args.resume and ckpt_path.exists():
        trainer = _load_trainer(str(ckpt_path))
        if trainer.cfg != cfg:
            raise ConfigError(f"{ckpt_path} was written with a different configuration")
        print(f"resuming after epoch {trainer.epoch}")
    else:
        trainer = Trainer(cfg, dataset.image_shape)
    samples = out / "samples"
    samples.mkdir(exist_ok=True)
    timing = out / "timing.csv"

    def on_epoch(t: Trainer, row: TelemetryRow) -> None:
        t.telemetry.write_csv(out / "telemetry.csv")
        t.save(ckpt_path)
        with open(timing, "a") as fh:
            fh.write(f"{row.epoch},{t.epoch_seconds[-1]:.3f}\n")
        last = row.epoch == cfg.epochs
        if last or (out_opts.sample_every and row.epoch % out_opts.sample_every == 0):
            _write_samples(t, samples / f"epoch_{row.epoch:04d}.ppm", out_opts.sample_n, cfg.seed)
        print(f"epoch {row.epoch}/{cfg.epochs} loss_d={row.loss_d:.5f} loss_g={row.loss_g:.5f} "
              f"grad_g={row.grad_norm_g:.4g} grad_d={row.grad_norm_d:.4g} lr={row.lr:.3g}", flush=True)

    try:
        trainer.fit(dataset, on_epoch=on_epoch)
    except DivergenceError as exc:
        trainer.telemetry.write_csv(out / "telemetry.csv")
        raise DivergenceError(f"{exc} (telemetry so far in {out / 'telemetry.csv'})") from exc
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    rows, cols = _parse_grid(args.grid, args.n)
    trainer = _load_trainer(args.checkpoint)
    images, _, _ = sample_images(trainer.G, args.n, args.seed)
    try:
        write_ppm(args.out, sample_grid(images, rows, cols))
    except OSError as exc:
        raise ConfigError(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {args.n} samples ({rows}x{cols}) to {args.out}")
    return EXIT_OK


def _dataset_fingerprint(ds: ImageDataset) -> str:
    return hashlib.sha256(ds.images.tobytes()).hexdigest()[:16]


def real_stats(ds: ImageDataset, extractor, cache_dir: str | None):
    """Feature stats of a real dataset, memoised in ``cache_dir`` when given."""
    key = f"stats_{_dataset_fingerprint(ds)}_{extractor_fingerprint(extractor)}.ckpt"
    path = Path(cache_dir) / key if cache_dir else None
    if path is not None and path.exists():
        return load_stats(path)[0], True
    stats = feature_stats(normalize(ds.images), extractor)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_stats(path, stats, {"dataset": ds.name, "images": len(ds)})
    return stats, False


def cmd_fid(args: argparse.Namespace) -> int:
    if args.n < 2:
        raise ConfigError(f"--n must be >= 2, got {args.n}")
    extractor = load_extractor(args.extractor)
    trainer = _load_trainer(args.checkpoint)
    if args.init:
        trainer = Trainer(trainer.cfg, trainer.image_shape)
    opts = DataOptions(args.dataset, args.data_dir, args.subset, args.synthetic_n, args.synthetic_size)
    ds = load_dataset(opts, trainer.cfg.seed)
    if ds.image_shape != tuple(extractor.image_shape):
        raise MetricError(f"extractor expects {extractor.image_shape} images, dataset has {ds.image_shape}")
    stats_real, cached = real_stats(ds, extractor, args.cache_dir)
    images, _, _ = sample_images(trainer.G, args.n, args.seed)
    score = frechet_distance(stats_real, feature_stats(images, extractor))
    result = {"proxy_fid": score, "n_fake": args.n, "n_real": len(ds),
              "extractor": extractor_fingerprint(extractor), "real_stats_cached": cached,
              "checkpoint": args.checkpoint, "init": bool(args.init)}
    print(f"proxy-FID {score:.6f} (n_fake={args.n}, n_real={len(ds)}, "
          f"extractor={result['extractor']}{', untrained init' if args.init else ''})")
    if args.json:
        Path(args.json).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_inspect_scores(args: argparse.Namespace) -> int:
    if args.n < 1:
        raise ConfigError(f"--n must be >= 1, got {args.n}")
    trainer = _load_trainer(args.checkpoint)
    if trainer.G.decoder is None:
        raise ConfigError(f"no attention decoder present in {args.checkpoint} "
                          f"(variant {trainer.cfg.variant}; only SGAD has one)")
    _, trace, x_seq = sample_images(trainer.G, args.n, args.seed, force_equal=args.force_equal)
    with open(args.out_csv, "w", newline="") as fh:
        trace.write_csv(fh)
    write_ppm(args.out_strip, step_strip(x_seq))
    print(f"wrote {trace.steps} steps x {args.n} samples of scores to {args.out_csv}; strip to {args.out_strip}")
    print(f"alpha_x range [{trace.alpha_x.min():.3e}, {trace.alpha_x.max():.3e}]")
    return EXIT_OK


def cmd_gradreport(args: argparse.Namespace) -> int:
    if args.labels and len(args.labels) != len(args.telemetry):
        raise ConfigError(f"{len(args.labels)} labels for {len(args.telemetry)} files")
    try:
        report = gradnorm_report(args.telemetry, args.labels or None)
    except ReportError as exc:
        raise ConfigError(str(exc)) from exc
    print(report.format())
    return EXIT_OK


def cmd_train_extractor(args: argparse.Namespace) -> int:
    opts = DataOptions(args.dataset, args.data_dir, args.subset, args.synthetic_n, args.synthetic_size)
    ds = load_dataset(opts, args.seed)
    model, accuracy = train_proxy_extractor(ds, seed=args.seed, epochs=args.epochs)
    save_extractor(model, args.out, accuracy)
    print(f"extractor train accuracy {accuracy:.4f}, fingerprint {extractor_fingerprint(model)}, saved to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration code rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.lower().replace("_", "-")


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default="mnist", choices=DATASETS)
    p.add_argument("--data-dir", default="data/mnist_5k")
    p.add_argument("--subset", type=int, default=None)
    p.add_argument("--synthetic-n", type=int, default=256)
    p.add_argument("--synthetic-size", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="spikegan", description="Spiking GAN training and evaluation.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a variant")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.ckpt if present")
    for name, (_, f) in _field_map().items():
        p.add_argument(_flag(name), dest=f"opt_{name}", default=None, metavar=name.upper())

    p = sub.add_parser("generate", help="write a grid of samples as PPM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--grid", help="ROWSxCOLS (default: near-square)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("fid", help="proxy-FID of a generator against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--extractor", required=True)
    _add_data_args(p)
    p.add_argument("--n", type=int, default=2048, help="generated samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cache-dir", help="directory for cached real-data stats")
    p.add_argument("--init", action="store_true", help="score the untrained initialisation of this config")
    p.add_argument("--json", help="also write the result as JSON")

    p = sub.add_parser("inspect-scores", help="dump attention decoder scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-strip", required=True)
    p.add_argument("--force-equal", action="store_true", help="debug: equal logits, alpha_x = 0.5")

    p = sub.add_parser("gradreport", help="compare generator gradient norms across runs")
    p.add_argument("telemetry", nargs="+")
    p.add_argument("--labels", nargs="+")

    p = sub.add_parser("train-extractor", help="train the proxy feature extractor")
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_") and v is not None}
            return cmd_train(args, overrides)
        handler = {"generate": cmd_generate, "fid": cmd_fid, "inspect-scores": cmd_inspect_scores,
                   "gradreport": cmd_gradreport, "train-extractor": cmd_train_extractor}[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except MetricError as exc:
        print(f"metric gate: {exc}", file=sys.stderr)
        return EXIT_METRIC


if __name__ == "__main__":
    sys.exit(main())
