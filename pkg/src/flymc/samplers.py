"""FlyMC joint density, theta-update kernels and the chain drivers.

A *target* exposes ``log_density(theta)`` and ``log_density_grad(theta)``,
each returning the value (and gradient) plus an opaque payload, and
``commit(point)`` which is called when a kernel moves the chain to that
point.  The kernels never look inside payloads, so the same
random-walk/MALA/slice code drives both the FlyMC joint and the full-data
posterior.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .bounds import Bound, LikelihoodTerms, make_bound
from .brightness import (
    BrightCache,
    BrightnessSet,
    ResampleConfig,
    bright_prob_from_logs,
    check_bounds,
    default_q_dark_to_bright,
    explicit_resample,
    implicit_resample,
)
from .diagnostics import QueryMeter
from .models import (
    Dataset,
    LikelihoodModel,
    Prior,
    full_log_posterior,
    grad_full_log_posterior,
    grad_log_prior,
    log_prior,
)

MAX_SHRINK = 1000
MIN_STEP = 1e-12


@dataclass
class Point:
    theta: np.ndarray
    log_p: float
    grad: np.ndarray | None = None
    payload: object = None


def _log_bright_factor(delta):
    """log(L/B - 1) from delta = log L - log B; -inf where the bound is tight.

    Written as ``delta + log(1 - exp(-delta))``, which neither overflows for
    very loose bounds nor loses precision for nearly tight ones.
    """
    d = -np.expm1(-delta)
    if d.size and not d.min() > 0.0:
        with np.errstate(divide="ignore"):
            return delta + np.log(np.maximum(d, 0.0))
    return delta + np.log(d)


class FlyMCTarget:
    """Joint density of theta given the current brightness variables.

    ``log p(theta) + sum_n log B_n(theta) + sum_{bright} log(L_n/B_n - 1)``,
    with the bound sum taken from the collapsed statistics.  Only the bright
    likelihoods are evaluated (and metered).
    """

    def __init__(self, data: Dataset, model: LikelihoodModel, prior: Prior, bound: Bound,
                 meter: QueryMeter, brightness: BrightnessSet | None = None,
                 with_grad: bool = False):
        self.data = data
        self.model = model
        self.prior = prior
        self.bound = bound
        self.collapsed = bound.collapse()
        self.meter = meter
        self.terms = LikelihoodTerms(data, model, bound, meter)
        self.brightness = brightness if brightness is not None else BrightnessSet(data.n_points)
        grad_shape = (data.n_classes,) if data.n_classes else ()
        self.cache = BrightCache(data.n_points, grad_shape if with_grad else None)
        self.with_grad = with_grad

    def _base(self, theta):
        return log_prior(theta, self.prior) + self.collapsed.evaluate(theta)

    def _base_grad(self, theta):
        return grad_log_prior(theta, self.prior) + self.collapsed.grad(theta)

    def _bright_grad(self, idx, delta, g_l, g_b):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = 1.0 / -np.expm1(-delta)
        if g_l.ndim == 1:
            dh = w * (g_l - g_b)
        else:
            dh = w[:, None] * (g_l - g_b)
        return self.model.sum_grad_eta(dh, self.data, idx)

    def log_density(self, theta):
        idx = self.brightness.bright_indices().copy()
        values = self.terms.evaluate(theta, idx)
        delta = check_bounds(values[0], values[1])
        value = self._base(theta) + float(np.sum(_log_bright_factor(delta)))
        return value, (idx, values)

    def log_density_grad(self, theta):
        idx = self.brightness.bright_indices().copy()
        values = self.terms.evaluate(theta, idx, grad=True)
        delta = check_bounds(values[0], values[1])
        value = self._base(theta) + float(np.sum(_log_bright_factor(delta)))
        grad = self._base_grad(theta) + self._bright_grad(idx, delta, values[2], values[3])
        return value, grad, (idx, values)

    def commit(self, point: Point) -> None:
        idx, values = point.payload
        if self.cache.with_grad and len(values) == 2:
            raise RuntimeError("gradient cache requested but payload has no gradients")
        self.cache.store(idx, values if self.cache.with_grad else values[:2])

    def current(self, theta, grad: bool = False) -> Point:
        """Joint density at the current theta from cached bright terms (no queries)."""
        idx = self.brightness.bright_indices()
        log_l, log_b = self.cache.log_lik[idx], self.cache.log_bound[idx]
        if np.isnan(log_l).any():
            raise RuntimeError("bright datum without cached likelihood")
        delta = log_l - log_b
        value = self._base(theta) + float(np.sum(_log_bright_factor(delta)))
        g = None
        if grad:
            g = self._base_grad(theta) + self._bright_grad(
                idx, delta, self.cache.grad_lik[idx], self.cache.grad_bound[idx])
        return Point(np.array(theta, dtype=float), value, g, None)

    def log_joint(self, theta) -> float:
        return self.log_density(np.asarray(theta, dtype=float))[0]

    def init_brightness(self, theta, rng, how: str = "conditional") -> None:
        """Set z from its exact conditional at ``theta`` (N queries) or all dark."""
        bs = self.brightness
        if how == "dark":
            for n in bs.bright_indices().copy():
                bs.darken(n)
            self.cache.clear(np.arange(self.data.n_points))
            return
        if how != "conditional":
            raise ValueError(f"unknown brightness initialisation {how!r}")
        N = self.data.n_points
        idx = np.arange(N)
        values = self.terms.evaluate(theta, idx, grad=self.with_grad)
        p = bright_prob_from_logs(values[0], values[1])
        z = rng.random(N) < p
        for n in idx:
            if z[n]:
                bs.brighten(n)
            else:
                bs.darken(n)
        self.cache.clear(idx)
        self.cache.store(idx[z], tuple(v[z] for v in values))


class FullDataTarget:
    """The ordinary posterior; every evaluation meters N queries."""

    def __init__(self, data: Dataset, model: LikelihoodModel, prior: Prior, meter: QueryMeter):
        self.data, self.model, self.prior, self.meter = data, model, prior, meter

    def log_density(self, theta):
        return full_log_posterior(theta, self.data, self.model, self.prior, self.meter), None

    def log_density_grad(self, theta):
        data, model, prior = self.data, self.model, self.prior
        self.meter.add(data.n_points)
        value = log_prior(theta, prior)
        grad = grad_log_prior(theta, prior)
        if data.n_points:
            eta = model.predictor(theta, data)
            value += float(np.sum(model.log_lik_eta(eta, data)))
            grad = grad + model.sum_grad_eta(model.dlog_lik_eta(eta, data), data)
        return value, grad, None

    def commit(self, point):
        pass


class TemperedTarget:
    """``beta * log p`` of another target (a deliberately wrong posterior)."""

    def __init__(self, target, beta: float):
        self.target, self.beta = target, float(beta)

    def log_density(self, theta):
        v, payload = self.target.log_density(theta)
        return self.beta * v, payload

    def log_density_grad(self, theta):
        v, g, payload = self.target.log_density_grad(theta)
        return self.beta * v, self.beta * g, payload

    def commit(self, point):
        self.target.commit(point)


class FunctionTarget:
    """Wrap plain ``log_p(theta)`` (and optionally ``grad(theta)``) callables."""

    def __init__(self, log_p, grad=None, meter: QueryMeter | None = None):
        self.log_p, self.grad, self.meter = log_p, grad, meter

    def log_density(self, theta):
        if self.meter is not None:
            self.meter.add(1)
        return float(self.log_p(theta)), None

    def log_density_grad(self, theta):
        if self.grad is None:
            raise ValueError("this target has no gradient")
        if self.meter is not None:
            self.meter.add(1)
        return float(self.log_p(theta)), np.asarray(self.grad(theta), dtype=float), None

    def commit(self, point):
        pass


# ---------------------------------------------------------------------------
# kernels


@dataclass
class KernelConfig:
    kind: str = "rwmh"  # "rwmh", "mala" or "slice"
    step: float = 0.1
    width: float = 1.0
    max_steps: int = 10
    target_accept: float | None = None
    adapt: bool = True

    def __post_init__(self):
        if self.kind not in ("rwmh", "mala", "slice"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if not self.step >= MIN_STEP:
            raise ValueError(f"step size {self.step} is degenerate (must be >= {MIN_STEP})")
        if not self.width > 0:
            raise ValueError(f"slice width must be positive, got {self.width}")
        if self.max_steps < 1:
            raise ValueError(f"slice max_steps must be >= 1, got {self.max_steps}")
        if self.target_accept is None:
            self.target_accept = {"rwmh": 0.234, "mala": 0.57, "slice": None}[self.kind]


def rwmh_step(target, point: Point, step: float, rng):
    """Gaussian random-walk Metropolis step; returns ``(point, accepted)``."""
    if not step >= MIN_STEP:
        raise ValueError(f"step size {step} is degenerate")
    proposal = point.theta + step * rng.standard_normal(point.theta.size)
    log_u = math.log(rng.random())
    log_p, payload = target.log_density(proposal)
    if log_p - point.log_p > log_u:
        new = Point(proposal, log_p, None, payload)
        target.commit(new)
        return new, True
    return point, False


def mala_step(target, point: Point, step: float, rng):
    """Metropolis-adjusted Langevin step with the asymmetric proposal correction."""
    if point.grad is None or not np.all(np.isfinite(point.grad)):
        raise FloatingPointError("MALA needs a finite gradient at the current point")
    half = 0.5 * step * step
    theta, g = point.theta, point.grad
    proposal = theta + half * g + step * rng.standard_normal(theta.size)
    log_u = math.log(rng.random())
    log_p, grad, payload = target.log_density_grad(proposal)
    if not log_p > -math.inf:
        return point, False
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient at MALA proposal")
    fwd = proposal - theta - half * g
    rev = theta - proposal - half * grad
    log_q_ratio = (fwd @ fwd - rev @ rev) / (2.0 * step * step)
    if log_p - point.log_p + log_q_ratio > log_u:
        new = Point(proposal, log_p, grad, payload)
        target.commit(new)
        return new, True
    return point, False


def slice_step(target, point: Point, width: float, max_steps: int, rng):
    """One sweep of coordinate-wise slice sampling (stepping out, shrinkage).

    Returns ``(point, n_evaluations)``.
    """
    theta = point.theta.copy()
    log_p, payload = point.log_p, point.payload
    n_eval = 0
    for d in range(theta.size):
        x0 = theta[d]
        log_y = log_p + math.log(rng.random())
        left = x0 - width * rng.random()
        right = left + width
        j = int(math.floor(max_steps * rng.random()))
        k = max_steps - 1 - j
        trial = theta.copy()
        while j > 0:
            trial[d] = left
            n_eval += 1
            if not target.log_density(trial)[0] > log_y:
                break
            left -= width
            j -= 1
        while k > 0:
            trial[d] = right
            n_eval += 1
            if not target.log_density(trial)[0] > log_y:
                break
            right += width
            k -= 1
        for _ in range(MAX_SHRINK):
            x1 = left + (right - left) * rng.random()
            trial[d] = x1
            n_eval += 1
            lp, pl = target.log_density(trial)
            if lp > log_y:
                theta = trial
                log_p, payload = lp, pl
                break
            if x1 < x0:
                left = x1
            else:
                right = x1
        else:
            raise RuntimeError(f"slice shrinkage did not terminate after {MAX_SHRINK} steps")
    new = Point(theta, log_p, None, payload)
    if payload is not None:
        target.commit(new)
    return new, n_eval


# ---------------------------------------------------------------------------
# chains


@dataclass
class ChainTrace:
    """Per-iteration record of a chain."""

    theta: np.ndarray
    log_joint: np.ndarray
    m_bright: np.ndarray
    queries: np.ndarray
    accept: np.ndarray
    info: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, n_iter: int, n_params: int) -> "ChainTrace":
        return cls(np.empty((n_iter, n_params)), np.empty(n_iter), np.zeros(n_iter, dtype=np.int64),
                   np.zeros(n_iter, dtype=np.int64), np.zeros(n_iter, dtype=bool))

    @property
    def cum_queries(self) -> np.ndarray:
        return np.cumsum(self.queries) + self.info.get("init_queries", 0)

    def write_csv(self, path) -> None:
        cum = self.cum_queries
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "log_joint", "m_bright", "cum_queries", "accept"])
            for i in range(len(self.log_joint)):
                w.writerow([i, repr(float(self.log_joint[i])), int(self.m_bright[i]), int(cum[i]),
                            int(self.accept[i])])

    def save_theta(self, path) -> None:
        with open(path, "wb") as fh:
            np.save(fh, self.theta)


class _StepTuner:
    """Robbins-Monro adaptation of log step size toward a target acceptance rate.

    The step used after burn-in is the average of the log step over the
    second half of burn-in, which is far less noisy than the last iterate.
    """

    def __init__(self, step, target_accept, burn_in):
        self.log_step = math.log(step)
        self.target = target_accept
        self.burn_in = burn_in
        self.t = 0
        self._sum = 0.0
        self._n = 0

    def update(self, accepted):
        self.t += 1
        self.log_step += (float(accepted) - self.target) / self.t**0.6
        if self.t > self.burn_in // 2:
            self._sum += self.log_step
            self._n += 1
        if self.t == self.burn_in and self._n:
            return math.exp(self._sum / self._n)
        return math.exp(self.log_step)


class Chain:
    """Shared driver: theta kernel dispatch, step-size tuning and tracing."""

    def __init__(self, target, kernel: KernelConfig, theta0, rng, burn_in: int = 0):
        self.target = target
        self.kernel = kernel
        self.rng = rng
        self.burn_in = int(burn_in)
        self.step_size = kernel.step
        self.iteration = 0
        self.theta0 = np.array(theta0, dtype=float)
        tune = kernel.adapt and kernel.kind in ("rwmh", "mala") and self.burn_in > 0
        self._tuner = _StepTuner(kernel.step, kernel.target_accept, self.burn_in) if tune else None

    def _theta_step(self, point):
        k = self.kernel
        if k.kind == "rwmh":
            point, acc = rwmh_step(self.target, point, self.step_size, self.rng)
        elif k.kind == "mala":
            point, acc = mala_step(self.target, point, self.step_size, self.rng)
        else:
            point, _ = slice_step(self.target, point, k.width, k.max_steps, self.rng)
            acc = True
        if self._tuner is not None and self.iteration < self.burn_in:
            self.step_size = max(self._tuner.update(acc), MIN_STEP)
        return point, acc

    def run(self, n_iter: int) -> ChainTrace:
        trace = ChainTrace.empty(n_iter, self.theta0.size)
        for i in range(n_iter):
            self.iterate(trace, i)
        trace.info.update(self.summary_info())
        return trace

    def summary_info(self) -> dict:
        return {"step_size": self.step_size}


class FlyMCChain(Chain):
    """Alternates brightness resampling and a theta update against the FlyMC joint."""

    def __init__(self, data: Dataset, model: LikelihoodModel, prior: Prior, bound: Bound,
                 kernel: KernelConfig, resample: ResampleConfig, rng, theta0=None,
                 burn_in: int = 0, init_brightness: str = "conditional", meter: QueryMeter | None = None):
        self.meter = meter or QueryMeter()
        target = FlyMCTarget(data, model, prior, bound, self.meter, with_grad=kernel.kind == "mala")
        if theta0 is None:
            theta0 = prior.sample(data.n_params, rng)
        super().__init__(target, kernel, theta0, rng, burn_in)
        self.data = data
        self.resample = resample
        target.init_brightness(self.theta0, rng, init_brightness)
        self.init_queries = self.meter.end_iteration()
        self.point = target.current(self.theta0, grad=kernel.kind == "mala")
        self.q_dark_to_bright = resample.q_dark_to_bright
        self._burn_fracs = []

    @property
    def brightness(self) -> BrightnessSet:
        return self.target.brightness

    def _current_q(self):
        if self.resample.q_dark_to_bright is not None:
            return self.resample.q_dark_to_bright
        N = self.data.n_points
        if self.iteration < self.burn_in or self.q_dark_to_bright is None:
            return default_q_dark_to_bright(self.brightness.num_bright, N)
        return self.q_dark_to_bright

    def _freeze_q(self):
        if self.resample.q_dark_to_bright is not None or not self._burn_fracs:
            return
        tail = self._burn_fracs[len(self._burn_fracs) // 2:]
        N = self.data.n_points
        self.q_dark_to_bright = min(1.0, max(float(np.mean(tail)), 10.0 / N))

    def step(self):
        """One FlyMC iteration: resample z, then update theta.  Returns accept flag."""
        target, rng = self.target, self.rng
        theta = self.point.theta
        if self.resample.mode == "explicit":
            explicit_resample(self.brightness, theta, self.resample, target.terms, rng, target.cache)
        else:
            implicit_resample(self.brightness, theta, self.resample, target.cache, target.terms, rng,
                              q_dark_to_bright=self._current_q())
        self.point = target.current(theta, grad=self.kernel.kind == "mala")
        m = self.brightness.num_bright
        self.point, acc = self._theta_step(self.point)
        if self.iteration < self.burn_in:
            self._burn_fracs.append(m / max(self.data.n_points, 1))
            if self.iteration == self.burn_in - 1:
                self._freeze_q()
        self.iteration += 1
        return acc, m

    def iterate(self, trace: ChainTrace, i: int):
        acc, m = self.step()
        trace.theta[i] = self.point.theta
        trace.log_joint[i] = self.point.log_p
        trace.m_bright[i] = m
        trace.queries[i] = self.meter.end_iteration()
        trace.accept[i] = acc

    def summary_info(self):
        info = super().summary_info()
        info["init_queries"] = self.init_queries
        if self.resample.mode == "implicit":
            info["q_dark_to_bright"] = self._current_q()
        return info


class FullChain(Chain):
    """Ordinary MCMC on the full-data posterior (optionally tempered)."""

    def __init__(self, data: Dataset, model: LikelihoodModel, prior: Prior, kernel: KernelConfig, rng,
                 theta0=None, burn_in: int = 0, temperature: float = 1.0, meter: QueryMeter | None = None):
        self.meter = meter or QueryMeter()
        target = FullDataTarget(data, model, prior, self.meter)
        if temperature != 1.0:
            target = TemperedTarget(target, temperature)
        if theta0 is None:
            theta0 = prior.sample(data.n_params, rng)
        super().__init__(target, kernel, theta0, rng, burn_in)
        if kernel.kind == "mala":
            v, g, _ = target.log_density_grad(self.theta0)
            self.point = Point(self.theta0, v, g)
        else:
            self.point = Point(self.theta0, target.log_density(self.theta0)[0])
        self.init_queries = self.meter.end_iteration()

    def step(self):
        self.point, acc = self._theta_step(self.point)
        self.iteration += 1
        return acc

    def iterate(self, trace, i):
        acc = self.step()
        trace.theta[i] = self.point.theta
        trace.log_joint[i] = self.point.log_p
        trace.m_bright[i] = 0
        trace.queries[i] = self.meter.end_iteration()
        trace.accept[i] = acc

    def summary_info(self):
        info = super().summary_info()
        info["init_queries"] = self.init_queries
        return info


def flymc_iteration(chain: FlyMCChain):
    return chain.step()


def full_mcmc_iteration(chain: FullChain):
    return chain.step()


def run_flymc(data, model, prior, bound_params, kernel, resample, n_iter, seed, burn_in=0,
              theta0=None, init_brightness="conditional") -> ChainTrace:
    rng = np.random.default_rng(seed)
    bound = make_bound(bound_params, data, model)
    chain = FlyMCChain(data, model, prior, bound, kernel, resample, rng, theta0, burn_in, init_brightness)
    trace = chain.run(n_iter)
    trace.info["burn_in"] = burn_in
    return trace


def run_full(data, model, prior, kernel, n_iter, seed, burn_in=0, theta0=None, temperature=1.0) -> ChainTrace:
    rng = np.random.default_rng(seed)
    chain = FullChain(data, model, prior, kernel, rng, theta0, burn_in, temperature)
    trace = chain.run(n_iter)
    trace.info["burn_in"] = burn_in
    return trace
