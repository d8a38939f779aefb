"""Experiment harness: synthetic data, quadrature oracle and the three-way comparison run."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import optimize

from .bounds import (
    BOHNING,
    DEFAULT_FAMILY,
    MODEL_OF_FAMILY,
    BoundParams,
    SGDConfig,
    map_tune,
)
from .brightness import ResampleConfig
from .diagnostics import (
    MomentSummary,
    ess_report,
    moment_comparison,
)
from .models import (
    FAMILIES,
    LOGISTIC,
    ROBUST_T,
    SOFTMAX,
    Dataset,
    Prior,
    full_log_posterior,
    grad_full_log_posterior,
    make_model,
    save_csv,
)
from .samplers import KernelConfig, run_flymc, run_full

log = logging.getLogger(__name__)

OUTPUT_ENV = "FLYMC_OUTPUT_DIR"
ALGORITHMS = ("regular", "untuned", "tuned")
ALGORITHM_LABELS = {"regular": "Regular MCMC", "untuned": "Untuned FlyMC", "tuned": "MAP-tuned FlyMC"}
DEFAULT_KERNEL = {LOGISTIC: "rwmh", SOFTMAX: "mala", ROBUST_T: "slice"}
DEFAULT_SIZES = {LOGISTIC: (2000, 5, None), SOFTMAX: (1500, 5, 3), ROBUST_T: (5000, 5, None)}
DEFAULT_PRIOR = {LOGISTIC: "gaussian", SOFTMAX: "gaussian", ROBUST_T: "laplace"}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """How synthetic data are drawn: theta* from ``prior_kind`` with ``theta_scale``,
    standard normal features, targets from the model itself."""

    theta_scale: float = 1.0
    prior_kind: str = "gaussian"
    nu: float = 4.0
    noise_scale: float = 1.0


def generate_synthetic(spec: SyntheticSpec, family: str, n_points: int, n_features: int,
                       n_classes: int | None = None, seed: int = 0) -> Dataset:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    rng = np.random.default_rng(seed)
    K = n_classes if family == SOFTMAX else None
    if family == SOFTMAX and (K is None or K < 2):
        raise ValueError("softmax data needs n_classes >= 2")
    P = n_features * (K or 1)
    theta = Prior(spec.prior_kind, spec.theta_scale).sample(P, rng)
    X = rng.standard_normal((n_points, n_features))
    if family == LOGISTIC:
        p = 1.0 / (1.0 + np.exp(-(X @ theta)))
        t = np.where(rng.random(n_points) < p, 1.0, -1.0)
    elif family == SOFTMAX:
        eta = X @ theta.reshape(K, n_features).T
        g = rng.gumbel(size=eta.shape)
        t = np.argmax(eta + g, axis=1) + 1.0
    else:
        t = X @ theta + spec.noise_scale * rng.standard_t(spec.nu, n_points)
    meta = {"theta_true": [float(v) for v in theta], "seed": seed, "synthetic": asdict(spec)}
    return Dataset(X, t, family, K, metadata=meta)


# ---------------------------------------------------------------------------
# grid quadrature oracle


@dataclass
class GridOracle:
    axes: list
    density: np.ndarray  # normalized, shape = grid shape
    mean: np.ndarray
    var: np.ndarray
    log_norm: float

    def moments(self) -> MomentSummary:
        return MomentSummary.exact(self.mean, self.var)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            names = [f"theta{d}" for d in range(len(self.axes))]
            w.writerow(names + ["density"])
            for index in np.ndindex(self.density.shape):
                w.writerow([repr(float(self.axes[d][i])) for d, i in enumerate(index)]
                           + [repr(float(self.density[index]))])


def _trapz_all(values, axes):
    out = values
    for ax in reversed(axes):
        out = np.trapezoid(out, ax, axis=-1)
    return float(out)


def grid_oracle_from_log_density(log_density, grid_spec) -> GridOracle:
    """Normalize ``exp(log_density)`` on a rectangular grid by trapezoid quadrature.

    ``grid_spec`` is a list of ``(low, high, n_points)`` per dimension (at most 2).
    """
    if len(grid_spec) > 2:
        raise ValueError(f"grid oracle supports at most 2 parameters, got {len(grid_spec)}")
    axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in grid_spec]
    shape = tuple(len(a) for a in axes)
    logp = np.empty(shape)
    for index in np.ndindex(shape):
        theta = np.array([axes[d][i] for d, i in enumerate(index)])
        logp[index] = log_density(theta)
    shift = logp.max()
    w = np.exp(logp - shift)
    Z = _trapz_all(w, axes)
    density = w / Z
    mesh = np.meshgrid(*axes, indexing="ij")
    mean = np.array([_trapz_all(density * m, axes) for m in mesh])
    var = np.array([_trapz_all(density * (m - mu) ** 2, axes) for m, mu in zip(mesh, mean)])
    return GridOracle(axes, density, mean, var, shift + math.log(Z))


def posterior_mode(data, model, prior):
    """Mode and inverse Hessian of the full posterior by BFGS plus finite differences."""
    P = data.n_params
    f = lambda th: -full_log_posterior(th, data, model, prior)
    g = lambda th: -grad_full_log_posterior(th, data, model, prior)
    res = optimize.minimize(f, np.zeros(P), jac=g, method="BFGS", options={"gtol": 1e-10})
    mode = res.x
    h = 1e-5
    H = np.empty((P, P))
    for j in range(P):
        e = np.zeros(P)
        e[j] = h
        H[:, j] = (g(mode + e) - g(mode - e)) / (2 * h)
    H = 0.5 * (H + H.T)
    return mode, np.linalg.inv(H)


def auto_grid(data, model, prior, n_points: int = 201, n_sd: float = 10.0):
    mode, cov = posterior_mode(data, model, prior)
    sd = np.sqrt(np.diag(cov))
    return [(m - n_sd * s, m + n_sd * s, n_points) for m, s in zip(mode, sd)]


def grid_posterior_oracle(data: Dataset, model, prior: Prior, grid_spec=None) -> GridOracle:
    if data.n_params > 2:
        raise ValueError(f"grid oracle needs at most 2 parameters, model has {data.n_params}")
    if grid_spec is None:
        grid_spec = auto_grid(data, model, prior)
    return grid_oracle_from_log_density(lambda th: full_log_posterior(th, data, model, prior), grid_spec)


# ---------------------------------------------------------------------------
# experiment configuration and runner


@dataclass
class ExperimentConfig:
    family: str = LOGISTIC
    n_points: int | None = None
    n_features: int | None = None
    n_classes: int | None = None
    data_path: str | None = None
    theta_scale: float = 1.0
    prior_kind: str | None = None
    prior_scale: float = 1.0
    nu: float = 4.0
    noise_scale: float = 1.0
    bound_family: str | None = None
    untuned_xi: float | None = None
    kernel: str | None = None
    step: float = 0.1
    slice_width: float = 0.5
    slice_max_steps: int = 10
    adapt_step: bool = True
    resample_mode: str = "implicit"
    resample_fraction: float = 0.1
    q_untuned: float | None = None
    q_tuned: float | None = None
    sgd_step: float = 0.5
    sgd_batch_size: int = 32
    sgd_epochs: int = 100
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    iterations: int = 10000
    burn_in: int | None = None
    init_brightness: str = "conditional"
    negative_control: bool = False
    negative_control_temperature: float = 0.9
    seed: int | None = None
    output_dir: str = "flymc_run"

    def __post_init__(self):
        if self.family in DEFAULT_SIZES:
            N, D, K = DEFAULT_SIZES[self.family]
            self.n_points = N if self.n_points is None else self.n_points
            self.n_features = D if self.n_features is None else self.n_features
            self.n_classes = K if self.n_classes is None else self.n_classes
            self.prior_kind = self.prior_kind or DEFAULT_PRIOR[self.family]
            self.bound_family = self.bound_family or DEFAULT_FAMILY[self.family]
            self.kernel = self.kernel or DEFAULT_KERNEL[self.family]
        if self.burn_in is None:
            self.burn_in = self.iterations // 2

    def validate(self) -> "ExperimentConfig":
        problems = []
        if self.seed is None:
            problems.append("seed is mandatory")
        if self.family not in FAMILIES:
            problems.append(f"family must be one of {FAMILIES}, got {self.family!r}")
        elif self.bound_family not in MODEL_OF_FAMILY or MODEL_OF_FAMILY[self.bound_family] != self.family:
            problems.append(f"bound family {self.bound_family!r} does not apply to {self.family} models")
        if self.family == SOFTMAX and (self.n_classes is None or self.n_classes < 2):
            problems.append("softmax needs n_classes >= 2")
        if self.family != SOFTMAX and self.n_classes is not None:
            problems.append("n_classes is only valid for softmax")
        if self.data_path is None:
            if self.n_points is None or self.n_points < 0:
                problems.append("n_points must be a non-negative integer")
            if self.n_features is None or self.n_features < 1:
                problems.append("n_features must be positive")
        if self.prior_kind not in ("gaussian", "laplace"):
            problems.append(f"prior_kind must be gaussian or laplace, got {self.prior_kind!r}")
        for name in ("prior_scale", "theta_scale", "nu", "noise_scale", "step", "slice_width", "sgd_step"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.kernel not in ("rwmh", "mala", "slice"):
            problems.append(f"kernel must be rwmh, mala or slice, got {self.kernel!r}")
        if self.resample_mode not in ("explicit", "implicit"):
            problems.append(f"resample_mode must be explicit or implicit, got {self.resample_mode!r}")
        if not 0 < self.resample_fraction <= 1:
            problems.append("resample_fraction must be in (0, 1]")
        for name in ("q_untuned", "q_tuned"):
            q = getattr(self, name)
            if q is not None and not 0 < q <= 1:
                problems.append(f"{name} must be in (0, 1]")
        unknown = [a for a in self.algorithms if a not in ALGORITHMS]
        if unknown or not self.algorithms:
            problems.append(f"algorithms must be a non-empty subset of {ALGORITHMS}, got {self.algorithms}")
        if self.iterations < 1:
            problems.append("iterations must be positive")
        if not 0 <= self.burn_in < self.iterations:
            problems.append("burn_in must lie in [0, iterations)")
        elif self.iterations - self.burn_in < 100:
            problems.append("need at least 100 post-burn-in iterations for ESS")
        if self.init_brightness not in ("conditional", "dark"):
            problems.append("init_brightness must be conditional or dark")
        if problems:
            raise ConfigError(problems)
        return self

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError([f"unknown config field {k!r}" for k in unknown])
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def prior(self) -> Prior:
        return Prior(self.prior_kind, self.prior_scale)

    def model(self):
        return make_model(self.family, self.nu, self.noise_scale)

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(self.kernel, step=self.step, width=self.slice_width,
                            max_steps=self.slice_max_steps, adapt=self.adapt_step)

    def sgd_config(self) -> SGDConfig:
        return SGDConfig(self.sgd_step, self.sgd_batch_size, self.sgd_epochs, seed=self._seed(99))

    def resample_config(self, algorithm: str) -> ResampleConfig:
        q = self.q_tuned if algorithm == "tuned" else self.q_untuned
        return ResampleConfig(self.resample_mode, self.resample_fraction, q)

    def untuned_params(self, n_params: int) -> BoundParams:
        params = BoundParams.untuned(self.bound_family, n_params)
        if self.untuned_xi is not None and self.bound_family != BOHNING:
            params.xi = float(self.untuned_xi)
        return params

    def _seed(self, stream: int) -> int:
        return int(np.random.SeedSequence([self.seed, stream]).generate_state(1)[0])

    def dataset(self) -> Dataset:
        if self.data_path is not None:
            from .models import load_csv
            return load_csv(self.data_path, self.family, self.n_classes)
        spec = SyntheticSpec(self.theta_scale, self.prior_kind, self.nu, self.noise_scale)
        return generate_synthetic(spec, self.family, self.n_points, self.n_features, self.n_classes,
                                  seed=self._seed(0))


def resolve_output_dir(path) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or path)


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def summarize_trace(trace, burn_in: int, algorithm: str) -> dict:
    post = slice(burn_in, None)
    rep = ess_report(trace.theta[post])
    n_post = len(trace.log_joint) - burn_in
    queries = int(trace.queries[post].sum())
    return {
        "algorithm": algorithm,
        "avg_queries_per_iter": queries / n_post,
        "avg_bright": float(trace.m_bright[post].mean()),
        "acceptance_rate": float(trace.accept[post].mean()),
        "ess_min": rep.min,
        "ess_median": rep.median,
        "ess_per_1000": rep.per_1000,
        "ess_per_1000_median": 1000.0 * rep.median / n_post,
        "queries_per_effective_sample": queries / rep.min,
        "mean": [float(v) for v in trace.theta[post].mean(axis=0)],
        "var": [float(v) for v in trace.theta[post].var(axis=0, ddof=1)],
        "step_size": trace.info.get("step_size"),
        "q_dark_to_bright": trace.info.get("q_dark_to_bright"),
    }


def run_algorithms(cfg: ExperimentConfig, data: Dataset | None = None):
    """Run the configured chains; returns ``(traces, tuned_params)``."""
    data = data if data is not None else cfg.dataset()
    model, prior = cfg.model(), cfg.prior()
    kernel = cfg.kernel_config()
    traces, tuned = {}, None
    for k, alg in enumerate(ALGORITHMS):
        if alg not in cfg.algorithms:
            continue
        seed = cfg._seed(1 + k)
        log.info("running %s (%d iterations)", alg, cfg.iterations)
        if alg == "regular":
            traces[alg] = run_full(data, model, prior, kernel, cfg.iterations, seed, cfg.burn_in)
        else:
            if alg == "tuned":
                tuned = map_tune(data, model, prior, cfg.sgd_config(), cfg.bound_family)
                params = tuned
            else:
                params = cfg.untuned_params(data.n_params)
            traces[alg] = run_flymc(data, model, prior, params, kernel, cfg.resample_config(alg),
                                    cfg.iterations, seed, cfg.burn_in, init_brightness=cfg.init_brightness)
    if cfg.negative_control:
        traces["tempered"] = run_full(data, model, prior, kernel, cfg.iterations, cfg._seed(10), cfg.burn_in,
                                      temperature=cfg.negative_control_temperature)
    return traces, tuned


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> Path:
    """Run every configured chain and write traces, summaries and the comparison table."""
    cfg.validate()
    out = resolve_output_dir(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = cfg.dataset()
    _dump_json(cfg.to_dict(), out / "config.json")
    if cfg.data_path is None:
        save_csv(data, out / "data.csv")
        _dump_json(data.metadata, out / "data_meta.json")
    traces, tuned = run_algorithms(cfg, data)
    if tuned is not None:
        tuned.save(out / "bounds_tuned.json")

    summaries = {}
    for alg, trace in traces.items():
        trace.write_csv(out / f"trace_{alg}.csv")
        trace.save_theta(out / f"theta_{alg}.npy")
        summaries[alg] = summarize_trace(trace, cfg.burn_in, alg)

    reference = "regular" if "regular" in traces else None
    for alg, s in summaries.items():
        if reference is not None:
            s["speedup"] = summaries[reference]["queries_per_effective_sample"] / s["queries_per_effective_sample"]
            if alg != reference:
                cmp = moment_comparison(traces[alg].theta[cfg.burn_in:], traces[reference].theta[cfg.burn_in:])
                s["moment_flags"] = cmp.flags
                s["moment_z"] = cmp.to_dict()
            else:
                s["moment_flags"] = []
        else:
            s["speedup"] = None
            s["moment_flags"] = None
        _dump_json(s, out / f"summary_{alg}.json")

    write_table(summaries, out / "table.csv")
    return out


def write_table(summaries: dict, path) -> None:
    """Comparison table with one row per algorithm, in the Table-1 column layout."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["algorithm", "avg_likelihood_queries_per_iteration", "effective_samples_per_1000_iterations",
                    "speedup_relative_to_regular_mcmc"])
        for alg in list(ALGORITHMS) + ["tempered"]:
            if alg not in summaries:
                continue
            s = summaries[alg]
            label = ALGORITHM_LABELS.get(alg, "Tempered MCMC (negative control)")
            speed = "" if s.get("speedup") is None else f"{s['speedup']:.4g}"
            w.writerow([label, f"{s['avg_queries_per_iter']:.6g}", f"{s['ess_per_1000']:.4g}", speed])
