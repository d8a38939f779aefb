"""Datasets, priors and the per-datum likelihood families.

Every likelihood family here is written in terms of a linear predictor
``eta = x_n . theta`` (a scalar for logistic and robust regression, a length-K
vector for softmax).  Bounds and samplers reuse the same predictor so the dot
product with the feature vector is computed once per datum and evaluation.

Softmax parameters are flattened row-major (class-major): ``theta.reshape(K, D)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln, log_expit, logsumexp, softmax

LOGISTIC = "logistic"
SOFTMAX = "softmax"
ROBUST_T = "robust_t"
FAMILIES = (LOGISTIC, SOFTMAX, ROBUST_T)


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix plus per-datum targets.

    ``targets`` holds -1/+1 labels for logistic data, class labels 1..K for
    softmax data and real responses for regression data.
    """

    features: np.ndarray
    targets: np.ndarray
    family: str
    n_classes: int | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.features, dtype=float))
        if X.ndim != 2:
            raise ValueError(f"features must be a 2-D matrix, got shape {X.shape}")
        t = np.asarray(self.targets, dtype=float).reshape(-1)
        if t.shape[0] != X.shape[0]:
            raise ValueError(
                f"targets has length {t.shape[0]} but features has {X.shape[0]} rows"
            )
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite entries")
        if not np.all(np.isfinite(t)):
            raise ValueError("targets contain non-finite entries")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.family == LOGISTIC:
            if not np.all(np.abs(t) == 1.0):
                raise ValueError("logistic targets must be exactly -1 or +1")
        if self.family == SOFTMAX:
            if self.n_classes is None or self.n_classes < 2:
                raise ValueError("softmax data needs n_classes >= 2")
            if not (np.all(t == np.round(t)) and np.all((t >= 1) & (t <= self.n_classes))):
                raise ValueError(f"softmax targets must lie in 1..{self.n_classes}")
        elif self.n_classes is not None:
            raise ValueError("n_classes is only meaningful for softmax data")
        X.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", t)

    @property
    def n_points(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_params(self) -> int:
        if self.family == SOFTMAX:
            return self.n_classes * self.n_features
        return self.n_features

    def class_index(self) -> np.ndarray:
        """Zero-based class index of each datum (softmax only)."""
        return self.targets.astype(np.intp) - 1


def load_csv(path, family: str, n_classes: int | None = None) -> Dataset:
    """Read a dataset written as ``f0,...,f{D-1},target`` with a header row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if not header or header[-1] != "target":
            raise ValueError(f"{path}: last column must be 'target', got {header}")
        expected = [f"f{i}" for i in range(len(header) - 1)]
        if header[:-1] != expected:
            raise ValueError(f"{path}: feature columns must be {expected}, got {header[:-1]}")
        rows = [[float(v) for v in row] for row in reader if row]
    D = len(header) - 1
    for i, row in enumerate(rows):
        if len(row) != D + 1:
            raise ValueError(f"{path}: row {i} has {len(row)} entries, expected {D + 1}")
    arr = np.array(rows, dtype=float).reshape(len(rows), D + 1)
    if family == SOFTMAX and n_classes is None:
        n_classes = int(arr[:, -1].max()) if len(rows) else 2
    return Dataset(arr[:, :D], arr[:, D], family, n_classes)


def save_csv(data: Dataset, path) -> None:
    D = data.n_features
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{i}" for i in range(D)] + ["target"])
        for x, t in zip(data.features, data.targets):
            writer.writerow([repr(float(v)) for v in x] + [_format_target(t, data.family)])


def _format_target(t, family):
    if family == ROBUST_T:
        return repr(float(t))
    return str(int(t))


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class Prior:
    kind: str = "gaussian"  # "gaussian" (isotropic) or "laplace"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "laplace"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError(f"prior scale must be positive, got {self.scale}")

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "gaussian":
            return self.scale * rng.standard_normal(size)
        return rng.laplace(0.0, self.scale, size)


def log_prior(theta, prior: Prior) -> float:
    """Normalized log density of an isotropic Gaussian or Laplace prior."""
    theta = np.asarray(theta, dtype=float)
    P = theta.size
    s = prior.scale
    if prior.kind == "gaussian":
        return float(-0.5 * np.dot(theta, theta) / s**2 - P * (math.log(s) + 0.5 * math.log(2 * math.pi)))
    return float(-np.abs(theta).sum() / s - P * math.log(2 * s))


def grad_log_prior(theta, prior: Prior) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if prior.kind == "gaussian":
        return -theta / prior.scale**2
    # np.sign(0) == 0, the subgradient convention used here
    return -np.sign(theta) / prior.scale


# ---------------------------------------------------------------------------
# likelihood families


class LikelihoodModel:
    """Per-datum log likelihood written through a linear predictor.

    Subclasses implement ``predictor``, ``log_lik_eta`` and ``dlog_lik_eta``;
    the public ``log_lik``/``grad_log_lik`` are derived from those.  ``idx``
    is an integer index array (``None`` means every datum).
    """

    family: str = ""

    def check(self, data: Dataset) -> None:
        if data.family != self.family:
            raise ValueError(f"{type(self).__name__} cannot score {data.family} data")

    def predictor(self, theta, data: Dataset, idx=None) -> np.ndarray:
        X = data.features if idx is None else data.features[idx]
        return X @ theta

    def log_lik_eta(self, eta, data, idx=None) -> np.ndarray:
        raise NotImplementedError

    def dlog_lik_eta(self, eta, data, idx=None) -> np.ndarray:
        raise NotImplementedError

    def log_lik(self, theta, data: Dataset, idx=None) -> np.ndarray:
        theta = _checked_theta(theta, data)
        return self.log_lik_eta(self.predictor(theta, data, idx), data, idx)

    def grad_log_lik(self, theta, data: Dataset, idx=None) -> np.ndarray:
        """Gradient of each selected datum's log likelihood, shape (n, P)."""
        theta = _checked_theta(theta, data)
        eta = self.predictor(theta, data, idx)
        g = self.dlog_lik_eta(eta, data, idx)
        X = data.features if idx is None else data.features[idx]
        if g.ndim == 1:
            return g[:, None] * X
        return (g[:, :, None] * X[:, None, :]).reshape(len(X), -1)

    def sum_grad_eta(self, g, data: Dataset, idx=None) -> np.ndarray:
        """Sum over data of ``g_n (x) x_n``, flattened like theta."""
        X = data.features if idx is None else data.features[idx]
        if g.ndim == 1:
            return g @ X
        return (g.T @ X).reshape(-1)


class LogisticModel(LikelihoodModel):
    family = LOGISTIC

    def log_lik_eta(self, eta, data, idx=None):
        t = data.targets if idx is None else data.targets[idx]
        return log_expit(t * eta)

    def dlog_lik_eta(self, eta, data, idx=None):
        t = data.targets if idx is None else data.targets[idx]
        # d/d eta log sigma(t eta) = t sigma(-t eta)
        return t * np.exp(log_expit(-t * eta))


class SoftmaxModel(LikelihoodModel):
    family = SOFTMAX

    def predictor(self, theta, data, idx=None):
        X = data.features if idx is None else data.features[idx]
        W = np.reshape(theta, (data.n_classes, data.n_features))
        return X @ W.T

    def log_lik_eta(self, eta, data, idx=None):
        k = data.class_index() if idx is None else data.class_index()[idx]
        rows = np.arange(eta.shape[0])
        return eta[rows, k] - logsumexp(eta, axis=1)

    def dlog_lik_eta(self, eta, data, idx=None):
        k = data.class_index() if idx is None else data.class_index()[idx]
        g = -softmax(eta, axis=1)
        g[np.arange(eta.shape[0]), k] += 1.0
        return g


class RobustTModel(LikelihoodModel):
    """Student-t regression with ``nu`` degrees of freedom and a fixed noise scale."""

    family = ROBUST_T

    def __init__(self, nu: float = 4.0, noise_scale: float = 1.0):
        if not nu > 0:
            raise ValueError(f"nu must be positive, got {nu}")
        if not noise_scale > 0:
            raise ValueError(f"noise_scale must be positive, got {noise_scale}")
        self.nu = float(nu)
        self.noise_scale = float(noise_scale)
        self.log_norm = student_t_log_norm(self.nu) - math.log(self.noise_scale)

    def residual(self, eta, data, idx=None):
        t = data.targets if idx is None else data.targets[idx]
        return (t - eta) / self.noise_scale

    def log_lik_eta(self, eta, data, idx=None):
        r = self.residual(eta, data, idx)
        return self.log_norm - 0.5 * (self.nu + 1) * np.log1p(r * r / self.nu)

    def dlog_lik_eta(self, eta, data, idx=None):
        r = self.residual(eta, data, idx)
        # dr/d eta = -1/noise_scale
        return (self.nu + 1) * r / (self.nu + r * r) / self.noise_scale


def student_t_log_norm(nu: float) -> float:
    return float(gammaln(0.5 * (nu + 1)) - gammaln(0.5 * nu) - 0.5 * math.log(nu * math.pi))


def make_model(family: str, nu: float = 4.0, noise_scale: float = 1.0) -> LikelihoodModel:
    if family == LOGISTIC:
        return LogisticModel()
    if family == SOFTMAX:
        return SoftmaxModel()
    if family == ROBUST_T:
        return RobustTModel(nu, noise_scale)
    raise ValueError(f"unknown family {family!r}")


def _checked_theta(theta, data: Dataset) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.n_params,):
        raise ValueError(f"theta must have shape ({data.n_params},), got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta contains non-finite entries")
    return theta


def _checked_index(n, data: Dataset) -> int:
    n = int(n)
    if not 0 <= n < data.n_points:
        raise IndexError(f"datum index {n} out of range for N={data.n_points}")
    return n


def logistic_log_lik(n, theta, data: Dataset) -> float:
    n = _checked_index(n, data)
    return float(LogisticModel().log_lik(theta, data, np.array([n]))[0])


def softmax_log_lik(n, theta, data: Dataset) -> float:
    n = _checked_index(n, data)
    return float(SoftmaxModel().log_lik(theta, data, np.array([n]))[0])


def robust_t_log_lik(n, theta, data: Dataset, nu: float = 4.0, noise_scale: float = 1.0) -> float:
    n = _checked_index(n, data)
    return float(RobustTModel(nu, noise_scale).log_lik(theta, data, np.array([n]))[0])


def full_log_posterior(theta, data: Dataset, model: LikelihoodModel, prior: Prior, meter=None) -> float:
    """Unnormalized log posterior using every datum; meters N likelihood queries."""
    theta = _checked_theta(theta, data)
    if meter is not None:
        meter.add(data.n_points)
    lp = log_prior(theta, prior)
    if data.n_points == 0:
        return lp
    return lp + float(np.sum(model.log_lik(theta, data)))


def grad_full_log_posterior(theta, data, model, prior, meter=None) -> np.ndarray:
    theta = _checked_theta(theta, data)
    if meter is not None:
        meter.add(data.n_points)
    g = grad_log_prior(theta, prior)
    if data.n_points:
        eta = model.predictor(theta, data)
        g = g + model.sum_grad_eta(model.dlog_lik_eta(eta, data), data)
    return g
