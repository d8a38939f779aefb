"""Likelihood-query metering, effective sample size and chain comparisons."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FLAG_THRESHOLD = 4.0


class QueryMeter:
    """Cumulative count of likelihood evaluations for one chain."""

    def __init__(self):
        self.count = 0
        self.deltas: list[int] = []
        self._mark = 0

    def add(self, n: int) -> None:
        if n < 0:
            raise ValueError("query increments must be non-negative")
        self.count += int(n)

    def end_iteration(self) -> int:
        """Close the current iteration and return its number of queries."""
        delta = self.count - self._mark
        self._mark = self.count
        self.deltas.append(delta)
        return delta


def autocorrelation(x) -> np.ndarray:
    """Biased sample autocorrelation at every lag, via FFT."""
    x = np.asarray(x, dtype=float)
    T = x.size
    y = x - x.mean()
    n_fft = 1 << (2 * T - 1).bit_length()
    f = np.fft.rfft(y, n_fft)
    acov = np.fft.irfft(f * np.conj(f), n_fft)[:T] / T
    return acov / acov[0]


def integrated_autocorr_time(x) -> float:
    """1 + 2 sum_k rho_k, truncated by the initial monotone sequence rule."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size < 4:
        raise ValueError("need a 1-D series of length >= 4")
    scale = np.std(x)
    if not scale > 0 or not np.isfinite(scale):
        raise ValueError("series has zero variance; effective sample size is undefined")
    rho = autocorrelation((x - x.mean()) / scale)
    T = rho.size
    n_pairs = T // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    # initial positive sequence, then enforce monotone decrease
    nonpos = np.flatnonzero(pairs <= 0)
    stop = nonpos[0] if nonpos.size else n_pairs
    gamma = np.minimum.accumulate(pairs[:stop])
    return float(-1.0 + 2.0 * gamma.sum())


def effective_sample_size(series) -> float:
    """Effective sample size of a scalar chain, clamped to (0, T]."""
    x = np.asarray(series, dtype=float)
    if x.size < 100:
        raise ValueError(f"need at least 100 samples, got {x.size}")
    tau = integrated_autocorr_time(x)
    T = x.size
    if not tau > 0:
        return float(T)
    return float(min(T, T / tau))


@dataclass
class EssReport:
    ess: np.ndarray
    tau: np.ndarray
    n_samples: int

    @property
    def min(self) -> float:
        return float(self.ess.min())

    @property
    def median(self) -> float:
        return float(np.median(self.ess))

    @property
    def per_1000(self) -> float:
        return 1000.0 * self.min / self.n_samples


def ess_report(samples) -> EssReport:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    ess = np.array([effective_sample_size(samples[:, d]) for d in range(samples.shape[1])])
    return EssReport(ess, samples.shape[0] / ess, samples.shape[0])


def burned(trace, burn_in: float | int = 0.5):
    """Index where post-burn-in samples start (fraction or iteration count)."""
    T = len(trace.log_joint)
    if isinstance(burn_in, float) and burn_in < 1:
        return int(T * burn_in)
    return int(burn_in)


def queries_per_effective_sample(trace, burn_in: float | int = 0.5) -> float:
    start = burned(trace, burn_in)
    samples = trace.theta[start:]
    rep = ess_report(samples)
    if not rep.min > 0:
        raise ValueError("zero effective sample size")
    queries = trace.queries[start:].sum()
    return float(queries / rep.min)


def speedup(flymc_trace, baseline_trace, burn_in: float | int = 0.5) -> float:
    """Ratio of baseline to FlyMC cost per effective sample (min ESS over dimensions)."""
    return queries_per_effective_sample(baseline_trace, burn_in) / queries_per_effective_sample(flymc_trace, burn_in)


@dataclass
class MomentSummary:
    """Per-dimension mean and variance with Monte Carlo standard errors."""

    mean: np.ndarray
    var: np.ndarray
    se_mean: np.ndarray
    se_var: np.ndarray

    @classmethod
    def from_samples(cls, samples) -> "MomentSummary":
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        T, P = samples.shape
        mean = samples.mean(axis=0)
        var = samples.var(axis=0, ddof=1)
        se_mean = np.empty(P)
        se_var = np.empty(P)
        for d in range(P):
            x = samples[:, d]
            se_mean[d] = np.sqrt(var[d] / effective_sample_size(x))
            sq = (x - mean[d]) ** 2
            se_var[d] = np.sqrt(sq.var(ddof=1) / effective_sample_size(sq))
        return cls(mean, var, se_mean, se_var)

    @classmethod
    def exact(cls, mean, var) -> "MomentSummary":
        """Moments known without Monte Carlo error (e.g. from quadrature)."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        var = np.atleast_1d(np.asarray(var, dtype=float))
        return cls(mean, var, np.zeros_like(mean), np.zeros_like(var))


@dataclass
class MomentComparison:
    mean_z: np.ndarray
    var_z: np.ndarray
    threshold: float = FLAG_THRESHOLD
    flags: list = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.flags)

    @property
    def max_z(self) -> float:
        return float(max(np.max(np.abs(self.mean_z)), np.max(np.abs(self.var_z))))

    def to_dict(self) -> dict:
        return {
            "mean_z": [float(v) for v in self.mean_z],
            "var_z": [float(v) for v in self.var_z],
            "threshold": self.threshold,
            "flags": self.flags,
        }


def _zscores(diff, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf))
    return z


def moment_comparison(a, b, threshold: float = FLAG_THRESHOLD) -> MomentComparison:
    """Differences of means and variances in units of combined MC standard error.

    ``a`` and ``b`` are sample arrays (T, P) or ``MomentSummary`` objects.
    A dimension is flagged when either difference exceeds ``threshold``.
    """
    sa = a if isinstance(a, MomentSummary) else MomentSummary.from_samples(a)
    sb = b if isinstance(b, MomentSummary) else MomentSummary.from_samples(b)
    if sa.mean.shape != sb.mean.shape:
        raise ValueError(f"dimension mismatch: {sa.mean.shape} vs {sb.mean.shape}")
    mean_z = _zscores(sa.mean - sb.mean, np.hypot(sa.se_mean, sb.se_mean))
    var_z = _zscores(sa.var - sb.var, np.hypot(sa.se_var, sb.se_var))
    flags = []
    for d in range(mean_z.size):
        if abs(mean_z[d]) > threshold:
            flags.append({"dim": d, "moment": "mean", "z": float(mean_z[d])})
        if abs(var_z[d]) > threshold:
            flags.append({"dim": d, "moment": "var", "z": float(var_z[d])})
    return MomentComparison(mean_z, var_z, threshold, flags)
