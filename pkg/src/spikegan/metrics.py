"""Proxy Frechet distance, the feature extractor behind it, and telemetry reports.

Absolute scores depend entirely on the extractor, so only compare numbers
computed with the same frozen extractor (see :func:`extractor_fingerprint`).
"""

from __future__ import annotations

import hashlib
import math
import os
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import BatchPlan, ImageDataset, normalize
from .errors import MetricError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor
from .training import OptState, RunTelemetry, rmsprop_step


class SqrtConvergenceError(MetricError):
    """The Jacobi eigensolver did not converge within its sweep budget."""


class ExtractorGateError(MetricError):
    """The proxy extractor is missing or failed its accuracy gate."""


class ReportError(ValueError):
    """Telemetry files cannot be compared (unreadable or misaligned)."""


# ---------------------------------------------------------------- linear algebra

def jacobi_eigh(M: np.ndarray, max_sweeps: int = 100, tol: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, Q)`` with ``M = Q diag(w) Q^T``.  Stops when the off-diagonal
    Frobenius norm falls below ``tol`` times the full norm.
    """
    A = np.array(M, dtype=np.float64)
    d = A.shape[0]
    Q = np.eye(d)
    scale = np.linalg.norm(A)
    if d < 2 or scale == 0:
        return np.diag(A).copy(), Q
    off = 0.0
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(A - np.diag(np.diag(A))))
        if off <= tol * scale:
            return np.diag(A).copy(), Q
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # first-order limit; theta**2 would overflow
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                qp, qq = Q[:, p].copy(), Q[:, q].copy()
                Q[:, p] = c * qp - s * qq
                Q[:, q] = s * qp + c * qq
    raise SqrtConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps "
                               f"(d={d}, off-diagonal norm {off:.3e}, matrix norm {scale:.3e})")


def matrix_sqrt_psd(M: np.ndarray, max_sweeps: int = 100) -> np.ndarray:
    """Principal square root of a symmetric positive semi-definite matrix."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix_sqrt_psd needs a square matrix, got shape {M.shape}")
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    if asym > 1e-6 * max(1.0, float(np.max(np.abs(M)))):
        raise ValueError(f"matrix is not symmetric (max |M - M^T| = {asym:.3e})")
    w, Q = jacobi_eigh((M + M.T) / 2, max_sweeps)
    floor = -1e-6 * max(1.0, float(np.max(np.abs(w))))
    if np.any(w < floor):
        raise MetricError(f"matrix is not positive semi-definite (smallest eigenvalue {w.min():.3e})")
    root = (Q * np.sqrt(np.clip(w, 0.0, None))) @ Q.T
    return (root + root.T) / 2


# ---------------------------------------------------------------- Frechet distance

@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise ValueError(f"sigma shape {self.sigma.shape} does not match mu of length {d}")
        if d and float(np.max(np.abs(self.sigma - self.sigma.T))) > 1e-6:
            raise ValueError("sigma is not symmetric")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def frechet_distance(a: FeatureStats, b: FeatureStats, eps: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))`` with ``eps*I`` added to both covariances.

    The cross term uses the symmetric form ``Sa^(1/2) Sb Sa^(1/2)``, whose
    root has the same trace as ``(Sa Sb)^(1/2)``.
    """
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    eye = np.eye(a.dim) * eps
    sa, sb = a.sigma + eye, b.sigma + eye
    ra = matrix_sqrt_psd(sa)
    cross = ra @ sb @ ra
    cross = (cross + cross.T) / 2
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(matrix_sqrt_psd(cross)))
    return max(value, 0.0)


# ---------------------------------------------------------------- proxy extractor

class ProxyExtractor(Module):
    """Small analog CNN classifier; its penultimate layer is the feature space."""

    def __init__(self, image_shape: tuple[int, int, int], n_classes: int = 10,
                 widths: tuple[int, int] = (8, 16), feature_dim: int = 64,
                 rng: np.random.Generator | None = None):
        C, H, W = image_shape
        if H % 4 or W % 4:
            raise ValueError(f"extractor needs image sides divisible by 4, got {H}x{W}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.image_shape = tuple(image_shape)
        self.n_classes = n_classes
        self.widths = tuple(widths)
        self.feature_dim = feature_dim
        self.conv1 = Conv2d(C, widths[0], 3, rng, padding=1)
        self.conv2 = Conv2d(widths[0], widths[1], 3, rng, padding=1)
        self.fc1 = Linear(widths[1] * (H // 4) * (W // 4), feature_dim, rng)
        self.fc2 = Linear(feature_dim, n_classes, rng)

    def features(self, x: Tensor) -> Tensor:
        h = T.avgpool2d(T.relu(self.conv1(x)), 2)
        h = T.avgpool2d(T.relu(self.conv2(h)), 2)
        return T.relu(self.fc1(T.flatten(h)))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.features(x))


def _predict(model: ProxyExtractor, images: np.ndarray, batch: int = 500) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([model(Tensor(images[i:i + batch])).data.argmax(axis=1)
                               for i in range(0, len(images), batch)])


def train_proxy_extractor(dataset: ImageDataset, seed: int = 0, epochs: int = 10, batch_size: int = 64,
                          lr: float = 1e-3, gate: float = 0.95) -> tuple[ProxyExtractor, float]:
    """Fit the classifier on a labelled dataset; returns ``(model, train accuracy)``.

    Raises :class:`ExtractorGateError` when the accuracy stays below ``gate``.
    """
    if dataset.labels is None:
        raise ExtractorGateError(f"{dataset.name}: the extractor needs labelled images")
    labels = dataset.labels.astype(np.int64)
    n_classes = int(labels.max()) + 1
    model = ProxyExtractor(dataset.image_shape, n_classes, rng=np.random.default_rng([seed, 0]))
    params = model.parameters()
    opt = OptState.zeros(list(model.named_parameters()))
    data = normalize(dataset.images).data
    plan = BatchPlan(seed, batch_size)
    for epoch in range(epochs):
        for idx in plan.indices(len(data), epoch):
            model.zero_grad()
            logp = T.log_softmax(model(Tensor(data[idx])), axis=1)
            loss = -T.mean(logp[np.arange(len(idx)), labels[idx]])
            loss.backward()
            rmsprop_step(params, [p.grad for p in params], opt, lr)
    model.zero_grad()
    accuracy = float(np.mean(_predict(model, data) == labels))
    if accuracy < gate:
        raise ExtractorGateError(f"extractor reached {accuracy:.4f} train accuracy, gate is {gate}; "
                                 "train longer or check the labels")
    return model, accuracy


def save_extractor(model: ProxyExtractor, path: str | os.PathLike, accuracy: float) -> None:
    meta = {"kind": "proxy-extractor", "image_shape": list(model.image_shape), "n_classes": model.n_classes,
            "widths": list(model.widths), "feature_dim": model.feature_dim, "accuracy": accuracy}
    ckpt.save(path, model.state_dict(), meta)


def load_extractor(path: str | os.PathLike, gate: float = 0.95) -> ProxyExtractor:
    """Load a frozen extractor; missing files and failed gates raise ExtractorGateError."""
    if not os.path.isfile(path):
        raise ExtractorGateError(f"no extractor at {path}; create one with `spikegan train-extractor`")
    try:
        arrays, meta = ckpt.load(path)
    except ckpt.CheckpointError as exc:
        raise ExtractorGateError(f"unreadable extractor {path}: {exc}") from exc
    if meta.get("kind") != "proxy-extractor":
        raise ExtractorGateError(f"{path} is not an extractor file")
    if float(meta.get("accuracy", 0.0)) < gate:
        raise ExtractorGateError(f"extractor {path} recorded accuracy {meta.get('accuracy')}, gate is {gate}")
    model = ProxyExtractor(tuple(meta["image_shape"]), int(meta["n_classes"]), tuple(meta["widths"]),
                           int(meta["feature_dim"]))
    model.load_state_dict(arrays)
    model.set_requires_grad(False)
    return model


def extractor_fingerprint(model: ProxyExtractor) -> str:
    """Short content hash of the weights, for labelling scores."""
    return hashlib.sha256(ckpt.dumps(model.state_dict())).hexdigest()[:16]


def feature_stats(images, extractor: ProxyExtractor, batch: int = 500) -> FeatureStats:
    """Mean and unbiased covariance of penultimate features.

    ``images`` are normalised floats (N, C, H, W) in [-1, 1].  Statistics are
    rounded to single precision, the precision of the stats cache, so cached
    and freshly computed stats agree exactly.
    """
    data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float32)
    if len(data) < 2:
        raise ValueError(f"feature_stats needs at least 2 images, got {len(data)}")
    with T.no_grad():
        feats = np.concatenate([extractor.features(Tensor(data[i:i + batch])).data
                                for i in range(0, len(data), batch)]).astype(np.float64)
    n, d = feats.shape
    if n < d:
        warnings.warn(f"{n} samples for {d} features: covariance is rank deficient", stacklevel=2)
    mu = feats.mean(axis=0)
    centred = feats - mu
    sigma = centred.T @ centred / (n - 1)
    sigma = (sigma + sigma.T) / 2
    return FeatureStats(mu.astype(np.float32).astype(np.float64),
                        sigma.astype(np.float32).astype(np.float64), n)


def save_stats(path: str | os.PathLike, stats: FeatureStats, meta: dict | None = None) -> None:
    ckpt.save(path, {"mu": stats.mu, "sigma": stats.sigma, "n": np.array([stats.n])}, meta)


def load_stats(path: str | os.PathLike) -> tuple[FeatureStats, dict]:
    arrays, meta = ckpt.load(path)
    missing = [k for k in ("mu", "sigma", "n") if k not in arrays]
    if missing:
        raise ckpt.FormatError(f"{path}: stats cache lacks {', '.join(missing)}")
    return FeatureStats(arrays["mu"], arrays["sigma"], int(arrays["n"][0])), meta


# ---------------------------------------------------------------- gradient report

@dataclass
class GradReport:
    labels: list[str]
    epochs: np.ndarray  # (E,)
    norms: np.ndarray  # (E, k) generator gradient norms
    quarter_means: np.ndarray  # (k, 4)

    @property
    def means(self) -> np.ndarray:
        return self.norms.mean(axis=0)

    @property
    def final(self) -> np.ndarray:
        """Final-quarter means, or whole-run means for runs too short to have one."""
        last = self.quarter_means[:, 3]
        return np.where(np.isnan(last), self.means, last)

    @property
    def ratios(self) -> np.ndarray:
        """Each run's norms divided by the first run's."""
        base = self.norms[:, :1]
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.norms / base

    def verdicts(self) -> list[str]:
        out = []
        final = self.final
        scope = "final quarter" if not np.any(np.isnan(self.quarter_means[:, 3])) else "whole run"
        for i in range(len(self.labels)):
            for j in range(i + 1, len(self.labels)):
                a, b = (i, j) if final[i] >= final[j] else (j, i)
                rel = ">" if final[a] > final[b] else "="
                out.append(f"{scope}: {self.labels[a]} ({final[a]:.6g}) {rel} "
                           f"{self.labels[b]} ({final[b]:.6g})")
        return out

    def format(self) -> str:
        lines = ["epoch," + ",".join(self.labels) + "".join(f",ratio_{l}" for l in self.labels[1:])]
        ratios = self.ratios
        for e in range(len(self.epochs)):
            cells = [f"{v:.6g}" for v in self.norms[e]] + [f"{v:.6g}" for v in ratios[e, 1:]]
            lines.append(f"{int(self.epochs[e])}," + ",".join(cells))
        lines.append("")
        lines.append("run,mean,q1,q2,q3,q4")
        for label, m, q in zip(self.labels, self.means, self.quarter_means):
            lines.append(f"{label},{m:.6g}," + ",".join(f"{v:.6g}" for v in q))
        verdicts = self.verdicts()
        if verdicts:
            lines.append("")
            lines.extend(verdicts)
        return "\n".join(lines)


def quarter_means(values: np.ndarray) -> np.ndarray:
    """Means over four contiguous, near-equal chunks of epochs (NaN for an empty chunk)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise ReportError("no epochs to summarise")
    which = (4 * np.arange(len(values))) // len(values)
    return np.array([values[which == q].mean() if np.any(which == q) else np.nan for q in range(4)])


def gradnorm_report(runs: Sequence[str | os.PathLike | RunTelemetry],
                    labels: Sequence[str] | None = None) -> GradReport:
    if not runs:
        raise ReportError("gradnorm_report needs at least one telemetry file")
    tables = []
    for run in runs:
        if isinstance(run, RunTelemetry):
            tables.append(run)
            continue
        try:
            tables.append(RunTelemetry.read_csv(run))
        except (OSError, ValueError, KeyError) as exc:
            raise ReportError(f"cannot read telemetry {run}: {exc}") from exc
    if labels is None:
        labels = [os.fspath(r) if not isinstance(r, RunTelemetry) else f"run{i}" for i, r in enumerate(runs)]
    epochs = tables[0].column("epoch")
    for label, table in zip(labels, tables):
        if len(table.rows) == 0:
            raise ReportError(f"{label}: telemetry is empty")
        if not np.array_equal(table.column("epoch"), epochs):
            raise ReportError(f"{label}: epochs {len(table.rows)} do not align with {labels[0]} ({len(epochs)})")
    norms = np.stack([t.column("grad_norm_g") for t in tables], axis=1)
    quarters = np.stack([quarter_means(norms[:, k]) for k in range(norms.shape[1])])
    return GradReport(list(labels), epochs, norms, quarters)
