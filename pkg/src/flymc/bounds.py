"""Collapsible per-datum likelihood lower bounds.

Three families are provided, each a scaled Gaussian in the linear predictor so
that the sum of log bounds over all data is a quadratic form in theta:

* ``jaakkola_jordan``  -- logistic likelihood, tight at margin +/- xi.
* ``bohning``          -- softmax likelihood, value and gradient matched at a
  reference parameter with the fixed curvature 1/2 (I - 11^T/K).
* ``t_tangent``        -- Student-t likelihood, tangent in the squared residual.

``LikelihoodTerms`` is the single metered entry point through which samplers
obtain likelihood values; bounds themselves are never metered.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .models import (
    LOGISTIC,
    ROBUST_T,
    SOFTMAX,
    Dataset,
    LikelihoodModel,
    Prior,
    RobustTModel,
    grad_log_prior,
    log_prior,
)

JAAKKOLA_JORDAN = "jaakkola_jordan"
BOHNING = "bohning"
T_TANGENT = "t_tangent"

DEFAULT_FAMILY = {LOGISTIC: JAAKKOLA_JORDAN, SOFTMAX: BOHNING, ROBUST_T: T_TANGENT}
MODEL_OF_FAMILY = {v: k for k, v in DEFAULT_FAMILY.items()}

XI_SMALL = 1e-6
MAX_QUADRATIC_ENTRIES = 50_000_000
_CHUNK = 8192


class BoundViolationError(RuntimeError):
    """A lower bound exceeded its likelihood; always a bug in a bound."""


@dataclass(frozen=True)
class JJCoefficients:
    a: float
    b: float
    c: float


def jj_coefficients(xi: float) -> JJCoefficients:
    a, c = _jj_ac(np.array([xi], dtype=float))
    return JJCoefficients(float(a[0]), 0.5, float(c[0]))


def _jj_ac(xi: np.ndarray):
    xi = np.asarray(xi, dtype=float)
    small = np.abs(xi) < XI_SMALL
    safe = np.where(small, 1.0, xi)
    # (e^xi - 1)/(e^xi + 1) == tanh(xi/2)
    a = np.where(small, -0.125, -np.tanh(0.5 * safe) / (4.0 * safe))
    c = np.where(small, -math.log(2.0), -a * xi**2 + 0.5 * xi - np.logaddexp(xi, 0.0))
    return a, c


@dataclass
class BoundParams:
    """Bound family plus its tightness locations.

    ``xi`` is a scalar (shared) or a length-N array.  Böhning bounds use
    ``theta_ref`` instead.  ``theta_ref`` is also recorded for tuned bounds
    of the other families so a cached tuning documents where it is tight.
    """

    family: str
    xi: float | np.ndarray | None = None
    theta_ref: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in MODEL_OF_FAMILY:
            raise ValueError(f"unknown bound family {self.family!r}")
        if self.xi is not None and not np.isscalar(self.xi):
            self.xi = np.asarray(self.xi, dtype=float)
        if self.theta_ref is not None:
            self.theta_ref = np.asarray(self.theta_ref, dtype=float)

    @classmethod
    def untuned(cls, family: str, n_params: int | None = None) -> "BoundParams":
        if family == JAAKKOLA_JORDAN:
            return cls(family, xi=1.5)
        if family == T_TANGENT:
            return cls(family, xi=0.0)
        if n_params is None:
            raise ValueError("untuned Böhning bound needs n_params")
        return cls(family, theta_ref=np.zeros(n_params))

    def to_json(self) -> str:
        doc = {"family": self.family}
        if self.xi is not None:
            doc["xi"] = float(self.xi) if np.isscalar(self.xi) else [float(v) for v in self.xi]
        if self.theta_ref is not None:
            doc["theta_ref"] = [float(v) for v in self.theta_ref]
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BoundParams":
        doc = json.loads(text)
        return cls(doc["family"], doc.get("xi"), doc.get("theta_ref"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "BoundParams":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class CollapsedBound:
    """Sum of log bounds as ``theta' Q theta + l' theta + c``."""

    family: str
    quadratic: np.ndarray
    linear: np.ndarray
    constant: float
    n_points: int

    def evaluate(self, theta) -> float:
        return float(theta @ (self.quadratic @ theta) + self.linear @ theta + self.constant)

    def grad(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return 2.0 * (self.quadratic @ theta) + self.linear


def evaluate_collapsed(cb: CollapsedBound, theta) -> float:
    return cb.evaluate(theta)


class _Kahan:
    """Compensated running sum of equally shaped arrays."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, value):
        y = value - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t


def _chunks(N):
    for start in range(0, N, _CHUNK):
        yield slice(start, min(start + _CHUNK, N))


def _weighted_moments(X, w_quad, w_lin, const_terms):
    """Compensated ``sum w_quad x x^T``, ``sum w_lin x`` and ``sum const``."""
    D = X.shape[1]
    Q, L = _Kahan((D, D)), _Kahan((D,) if w_lin.ndim == 1 else (w_lin.shape[1], D))
    for s in _chunks(X.shape[0]):
        Xs = X[s]
        if w_quad is None:
            Q.add(Xs.T @ Xs)
        else:
            Q.add(Xs.T @ (w_quad[s, None] * Xs))
        L.add(w_lin[s].T @ Xs)
    return Q.total, L.total, math.fsum(const_terms)


def _check_size(P):
    if P * P > MAX_QUADRATIC_ENTRIES:
        raise MemoryError(
            f"collapsed statistic needs a {P}x{P} matrix ({P * P} entries), "
            f"more than the limit of {MAX_QUADRATIC_ENTRIES}"
        )


class Bound:
    """Per-datum log lower bound bound to one dataset."""

    family = ""

    def __init__(self, data: Dataset, model: LikelihoodModel):
        if data.family != MODEL_OF_FAMILY[self.family] or model.family != data.family:
            raise ValueError(
                f"{self.family} bound does not apply to {model.family} model on {data.family} data"
            )
        self.data = data
        self.model = model

    def log_bound_eta(self, eta, idx=None) -> np.ndarray:
        raise NotImplementedError

    def dlog_bound_eta(self, eta, idx=None) -> np.ndarray:
        raise NotImplementedError

    def log_bound(self, theta, idx=None) -> np.ndarray:
        return self.log_bound_eta(self.model.predictor(np.asarray(theta, float), self.data, idx), idx)

    def grad_log_bound(self, theta, idx=None) -> np.ndarray:
        data = self.data
        g = self.dlog_bound_eta(self.model.predictor(np.asarray(theta, float), data, idx), idx)
        X = data.features if idx is None else data.features[idx]
        if g.ndim == 1:
            return g[:, None] * X
        return (g[:, :, None] * X[:, None, :]).reshape(len(X), -1)

    def collapse(self) -> CollapsedBound:
        raise NotImplementedError


def _per_datum(xi, N):
    xi = np.asarray(xi, dtype=float)
    if xi.ndim == 0:
        return np.full(N, float(xi))
    if xi.shape != (N,):
        raise ValueError(f"xi must be scalar or length {N}, got shape {xi.shape}")
    return xi


class JaakkolaJordanBound(Bound):
    family = JAAKKOLA_JORDAN

    def __init__(self, data, model, xi=1.5):
        super().__init__(data, model)
        self.xi = _per_datum(xi, data.n_points)
        self.a, self.c = _jj_ac(self.xi)

    def log_bound_eta(self, eta, idx=None):
        t = self.data.targets if idx is None else self.data.targets[idx]
        a = self.a if idx is None else self.a[idx]
        c = self.c if idx is None else self.c[idx]
        m = t * eta
        return a * m * m + 0.5 * m + c

    def dlog_bound_eta(self, eta, idx=None):
        t = self.data.targets if idx is None else self.data.targets[idx]
        a = self.a if idx is None else self.a[idx]
        return t * (2.0 * a * (t * eta) + 0.5)

    def collapse(self):
        X, t = self.data.features, self.data.targets
        _check_size(X.shape[1])
        # t_n^2 == 1, so the quadratic weight is a_n alone
        Q, L, c = _weighted_moments(X, self.a, 0.5 * t, self.c)
        return CollapsedBound(self.family, Q, L, c, self.data.n_points)


class BohningBound(Bound):
    """Quadratic lower bound on the softmax log likelihood around ``theta_ref``."""

    family = BOHNING

    def __init__(self, data, model, theta_ref=None):
        super().__init__(data, model)
        K, D = data.n_classes, data.n_features
        theta_ref = np.zeros(K * D) if theta_ref is None else np.asarray(theta_ref, float)
        if theta_ref.shape != (K * D,):
            raise ValueError(f"theta_ref must have shape ({K * D},)")
        self.theta_ref = theta_ref
        self.curvature = 0.5 * (np.eye(K) - np.full((K, K), 1.0 / K))
        psi0 = model.predictor(theta_ref, data)
        self.psi0 = psi0
        self.log_lik0 = model.log_lik_eta(psi0, data)
        self.grad0 = model.dlog_lik_eta(psi0, data)

    def log_bound_eta(self, eta, idx=None):
        if idx is None:
            psi0, l0, g0 = self.psi0, self.log_lik0, self.grad0
        else:
            psi0, l0, g0 = self.psi0[idx], self.log_lik0[idx], self.grad0[idx]
        d = eta - psi0
        return l0 + np.sum(g0 * d, axis=1) - 0.5 * np.sum((d @ self.curvature) * d, axis=1)

    def dlog_bound_eta(self, eta, idx=None):
        if idx is None:
            psi0, g0 = self.psi0, self.grad0
        else:
            psi0, g0 = self.psi0[idx], self.grad0[idx]
        return g0 - (eta - psi0) @ self.curvature

    def collapse(self):
        X = self.data.features
        K, D = self.data.n_classes, self.data.n_features
        _check_size(K * D)
        A = self.curvature
        psi0, g0 = self.psi0, self.grad0
        lin_w = g0 + psi0 @ A
        consts = self.log_lik0 - np.sum(g0 * psi0, axis=1) - 0.5 * np.sum((psi0 @ A) * psi0, axis=1)
        S, G, c = _weighted_moments(X, None, lin_w, consts)
        # row-major flattening: index k*D + d, so the quadratic is kron(A, S)
        Q = -0.5 * np.kron(A, S)
        return CollapsedBound(self.family, Q, G.reshape(-1), c, self.data.n_points)


class TTangentBound(Bound):
    """Gaussian lower bound on the Student-t likelihood.

    The log density is convex in the squared standardized residual ``s``,
    so its tangent line in ``s`` at ``s = xi**2`` lies below it.
    """

    family = T_TANGENT

    def __init__(self, data, model: RobustTModel, xi=0.0):
        super().__init__(data, model)
        self.xi = _per_datum(xi, data.n_points)
        nu = model.nu
        s0 = self.xi**2
        self.slope = -0.5 * (nu + 1) / nu / (1.0 + s0 / nu)
        self.offset = model.log_norm - 0.5 * (nu + 1) * np.log1p(s0 / nu) - self.slope * s0

    def log_bound_eta(self, eta, idx=None):
        r = self.model.residual(eta, self.data, idx)
        slope = self.slope if idx is None else self.slope[idx]
        offset = self.offset if idx is None else self.offset[idx]
        return offset + slope * r * r

    def dlog_bound_eta(self, eta, idx=None):
        r = self.model.residual(eta, self.data, idx)
        slope = self.slope if idx is None else self.slope[idx]
        return -2.0 * slope * r / self.model.noise_scale

    def collapse(self):
        X, t = self.data.features, self.data.targets
        _check_size(X.shape[1])
        w = self.slope / self.model.noise_scale**2
        # w (t - theta.x)^2 = w theta' x x' theta - 2 w t x.theta + w t^2
        Q, L, c = _weighted_moments(X, w, -2.0 * w * t, np.concatenate([w * t * t, self.offset]))
        return CollapsedBound(self.family, Q, L, c, self.data.n_points)


def make_bound(params: BoundParams, data: Dataset, model: LikelihoodModel) -> Bound:
    if params.family == JAAKKOLA_JORDAN:
        return JaakkolaJordanBound(data, model, 1.5 if params.xi is None else params.xi)
    if params.family == BOHNING:
        return BohningBound(data, model, params.theta_ref)
    if params.family == T_TANGENT:
        return TTangentBound(data, model, 0.0 if params.xi is None else params.xi)
    raise ValueError(f"unknown bound family {params.family!r}")


def collapse(params: BoundParams, data: Dataset, model: LikelihoodModel) -> CollapsedBound:
    return make_bound(params, data, model).collapse()


class LikelihoodTerms:
    """Metered access to (log L_n, log B_n) for selected data.

    Every likelihood evaluation made by the brightness kernels and the FlyMC
    joint density goes through ``evaluate``, which charges one query per datum.
    """

    def __init__(self, data: Dataset, model: LikelihoodModel, bound: Bound, meter):
        self.data = data
        self.model = model
        self.bound = bound
        self.meter = meter

    def evaluate(self, theta, idx, grad: bool = False):
        """Return ``(log_L, log_B)`` or, with ``grad``, also their eta-gradients."""
        self.meter.add(len(idx))
        model, data, bound = self.model, self.data, self.bound
        eta = model.predictor(theta, data, idx)
        log_l = model.log_lik_eta(eta, data, idx)
        log_b = bound.log_bound_eta(eta, idx)
        if not grad:
            return log_l, log_b
        return log_l, log_b, model.dlog_lik_eta(eta, data, idx), bound.dlog_bound_eta(eta, idx)


# ---------------------------------------------------------------------------
# MAP tuning


@dataclass
class SGDConfig:
    step: float = 0.5
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0


def sgd_map(data: Dataset, model: LikelihoodModel, prior: Prior, config: SGDConfig = SGDConfig(),
            theta0=None) -> np.ndarray:
    """Approximate MAP by minibatch stochastic gradient ascent.

    Ascends the log posterior divided by N, with step ``step/sqrt(epoch)``,
    and returns the average of the iterates over the second half of the epochs.
    """
    N, P = data.n_points, data.n_params
    theta = np.zeros(P) if theta0 is None else np.array(theta0, dtype=float)
    if N == 0:
        return theta
    rng = np.random.default_rng(config.seed)
    B = min(config.batch_size, N)
    first_avg_epoch = config.epochs // 2 + 1
    avg = np.zeros(P)
    n_avg = 0
    for epoch in range(1, config.epochs + 1):
        lr = config.step / math.sqrt(epoch)
        order = rng.permutation(N)
        for start in range(0, N, B):
            idx = order[start:start + B]
            eta = model.predictor(theta, data, idx)
            g_lik = model.sum_grad_eta(model.dlog_lik_eta(eta, data, idx), data, idx) / len(idx)
            g = grad_log_prior(theta, prior) / N + g_lik
            theta = theta + lr * g
            if not np.all(np.isfinite(theta)):
                raise FloatingPointError(
                    f"SGD diverged in epoch {epoch}; retry with a smaller step than {config.step}"
                )
            if epoch >= first_avg_epoch:
                avg += theta
                n_avg += 1
    avg /= n_avg
    obj = log_prior(avg, prior) + float(np.sum(model.log_lik(avg, data)))
    if not math.isfinite(obj):
        raise FloatingPointError(f"non-finite log posterior at SGD solution; retry with a smaller step")
    return avg


def tuned_params(family: str, theta_map, data: Dataset, model: LikelihoodModel) -> BoundParams:
    """Bound parameters making every datum's bound tight at ``theta_map``."""
    theta_map = np.asarray(theta_map, dtype=float)
    if family == JAAKKOLA_JORDAN:
        xi = data.targets * model.predictor(theta_map, data)
        return BoundParams(family, xi=xi, theta_ref=theta_map)
    if family == T_TANGENT:
        xi = model.residual(model.predictor(theta_map, data), data)
        return BoundParams(family, xi=xi, theta_ref=theta_map)
    if family == BOHNING:
        return BoundParams(family, theta_ref=theta_map)
    raise ValueError(f"unknown bound family {family!r}")


def map_tune(data: Dataset, model: LikelihoodModel, prior: Prior, sgd_config: SGDConfig = SGDConfig(),
             family: str | None = None) -> BoundParams:
    family = family or DEFAULT_FAMILY[model.family]
    theta_map = sgd_map(data, model, prior, sgd_config)
    return tuned_params(family, theta_map, data, model)
