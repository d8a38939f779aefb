"""Brightness variables: O(1) bright/dark set and the z resampling kernels."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .bounds import BoundViolationError

VIOLATION_TOL = 1e-9
# L/B - 1 is computed from min(delta, MAX_DELTA) so it stays finite; the
# acceptance tests below are unchanged by the clip unless u < 1e-290
MAX_DELTA = 700.0


class BrightnessSet:
    """Bright/dark partition of ``range(N)`` with constant-time updates.

    ``arr`` holds every index exactly once with the bright ones first;
    ``tab[n]`` is the position of ``n`` in ``arr``; the first ``num_bright``
    entries of ``arr`` are the bright data.
    """

    def __init__(self, n_points: int, bright=()):
        self.n_points = int(n_points)
        self.arr = np.arange(self.n_points, dtype=np.intp)
        self.tab = np.arange(self.n_points, dtype=np.intp)
        self.num_bright = 0
        for n in bright:
            self.brighten(n)

    def _check(self, n):
        if not 0 <= n < self.n_points:
            raise IndexError(f"datum index {n} out of range for N={self.n_points}")

    def is_bright(self, n) -> bool:
        self._check(n)
        return bool(self.tab[n] < self.num_bright)

    def brighten(self, n) -> None:
        self._check(n)
        arr, tab = self.arr, self.tab
        pos = tab[n]
        B = self.num_bright
        if pos < B:
            return
        other = arr[B]
        arr[B], arr[pos] = n, other
        tab[n], tab[other] = B, pos
        self.num_bright = B + 1

    def darken(self, n) -> None:
        self._check(n)
        arr, tab = self.arr, self.tab
        pos = tab[n]
        last = self.num_bright - 1
        if pos > last:
            return
        other = arr[last]
        arr[last], arr[pos] = n, other
        tab[n], tab[other] = last, pos
        self.num_bright = last

    def ith_bright(self, i) -> int:
        if not 0 <= i < self.num_bright:
            raise IndexError(f"bright index {i} out of range ({self.num_bright} bright)")
        return int(self.arr[i])

    def ith_dark(self, i) -> int:
        if not 0 <= i < self.n_points - self.num_bright:
            raise IndexError(f"dark index {i} out of range ({self.n_points - self.num_bright} dark)")
        return int(self.arr[self.num_bright + i])

    @property
    def num_dark(self) -> int:
        return self.n_points - self.num_bright

    def bright_indices(self) -> np.ndarray:
        """View of the bright indices; invalidated by the next mutation."""
        return self.arr[: self.num_bright]

    def dark_indices(self) -> np.ndarray:
        return self.arr[self.num_bright:]

    def mask(self) -> np.ndarray:
        return self.tab < self.num_bright

    def check_invariants(self) -> None:
        N = self.n_points
        if not 0 <= self.num_bright <= N:
            raise AssertionError(f"num_bright={self.num_bright} outside [0, {N}]")
        if not np.array_equal(np.sort(self.arr), np.arange(N)):
            raise AssertionError("arr is not a permutation")
        if not np.array_equal(self.tab[self.arr], np.arange(N)):
            raise AssertionError("tab is not the inverse of arr")

    def to_json(self) -> str:
        return json.dumps(sorted(int(n) for n in self.bright_indices()))

    @classmethod
    def from_json(cls, text: str, n_points: int) -> "BrightnessSet":
        return cls(n_points, json.loads(text))


@dataclass
class ResampleConfig:
    """How brightness variables are refreshed each iteration.

    ``mode="explicit"`` Gibbs-samples ``ceil(N * fraction)`` sites drawn with
    replacement.  ``mode="implicit"`` runs MH flips with proposal
    probabilities ``q_dark_to_bright`` and ``q_bright_to_dark``;
    ``q_dark_to_bright=None`` means adapt it to the bright fraction during
    burn-in and freeze it afterwards.
    """

    mode: str = "implicit"
    fraction: float = 0.1
    q_dark_to_bright: float | None = None
    q_bright_to_dark: float = 1.0

    def __post_init__(self):
        if self.mode not in ("explicit", "implicit"):
            raise ValueError(f"unknown resample mode {self.mode!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError(f"resample fraction must be in (0, 1], got {self.fraction}")
        q = self.q_dark_to_bright
        if q is not None and not 0 < q <= 1:
            raise ValueError(f"q_dark_to_bright must be in (0, 1], got {q}")
        if not 0 < self.q_bright_to_dark <= 1:
            raise ValueError(f"q_bright_to_dark must be in (0, 1], got {self.q_bright_to_dark}")


def default_q_dark_to_bright(num_bright: int, n_points: int) -> float:
    if n_points == 0:
        return 1.0
    return min(1.0, max(num_bright / n_points, 10.0 / n_points))


class BrightCache:
    """log L_n and log B_n (and their eta-gradients) at the current theta.

    Entries are NaN for dark data, so a bright datum with a NaN entry is a
    broken contract rather than a silent recomputation.
    """

    def __init__(self, n_points: int, grad_shape=None):
        self.log_lik = np.full(n_points, np.nan)
        self.log_bound = np.full(n_points, np.nan)
        self.with_grad = grad_shape is not None
        if self.with_grad:
            self.grad_lik = np.full((n_points,) + tuple(grad_shape), np.nan)
            self.grad_bound = np.full((n_points,) + tuple(grad_shape), np.nan)

    def store(self, idx, values):
        self.log_lik[idx] = values[0]
        self.log_bound[idx] = values[1]
        if self.with_grad:
            self.grad_lik[idx] = values[2]
            self.grad_bound[idx] = values[3]

    def clear(self, idx):
        self.log_lik[idx] = np.nan
        self.log_bound[idx] = np.nan
        if self.with_grad:
            self.grad_lik[idx] = np.nan
            self.grad_bound[idx] = np.nan


def check_bounds(log_l, log_b):
    delta = log_l - log_b
    if delta.size and delta.min() < -VIOLATION_TOL:
        i = int(np.argmin(delta))
        raise BoundViolationError(
            f"log bound exceeds log likelihood by {-delta[i]:.3e} (log L={log_l[i]!r}, log B={log_b[i]!r})"
        )
    return delta


def bright_prob_from_logs(log_l, log_b):
    """(L - B)/L = 1 - exp(log B - log L), clamped to [0, 1]."""
    delta = check_bounds(np.asarray(log_l, float), np.asarray(log_b, float))
    return np.clip(-np.expm1(-delta), 0.0, 1.0)


def bright_probability(n, theta, terms) -> float:
    """Conditional probability that datum ``n`` is bright; one likelihood query."""
    log_l, log_b = terms.evaluate(theta, np.array([n], dtype=np.intp))
    return float(bright_prob_from_logs(log_l, log_b)[0])


def implicit_flip_probabilities(log_l, log_b, q_dark_to_bright, q_bright_to_dark=1.0):
    """Per-site transition probabilities ``(T(1->0), T(0->1))`` of one implicit sweep.

    Exact values of the rule used by ``implicit_resample``; handy for checking
    detailed balance against the conditional ``p(z=1) = (L - B)/L``.
    """
    lt = np.expm1(check_bounds(np.asarray(log_l, float), np.asarray(log_b, float)))
    q_db, q_bd = q_dark_to_bright, q_bright_to_dark
    with np.errstate(divide="ignore"):
        to_dark = q_bd * np.minimum(1.0, np.where(lt > 0, q_db / (q_bd * lt), np.inf))
    to_bright = q_db * np.minimum(1.0, q_bd * lt / q_db)
    return to_dark, to_bright


def explicit_resample(bs: BrightnessSet, theta, config: ResampleConfig, terms, rng,
                      cache: BrightCache | None = None) -> int:
    """Gibbs-sample ``ceil(N * fraction)`` sites drawn uniformly with replacement.

    Returns the number of likelihood queries made.
    """
    N = bs.n_points
    if N == 0:
        return 0
    n_visits = math.ceil(N * config.fraction)
    sites = rng.integers(0, N, size=n_visits)
    u = rng.random(n_visits)
    grad = cache is not None and cache.with_grad
    values = terms.evaluate(theta, sites, grad=grad)
    p = bright_prob_from_logs(values[0], values[1])
    z = u < p
    # repeated visits of one site: the last draw wins, as in a sequential sweep
    _, last = np.unique(sites[::-1], return_index=True)
    last = n_visits - 1 - last
    sites, z = sites[last], z[last]
    values = tuple(v[last] for v in values)
    mask = bs.mask()[sites]
    to_bright = z & ~mask
    to_dark = ~z & mask
    for n in sites[to_bright]:
        bs.brighten(n)
    for n in sites[to_dark]:
        bs.darken(n)
    if cache is not None:
        cache.store(sites[z], tuple(v[z] for v in values))
        cache.clear(sites[~z])
    return n_visits


def implicit_resample(bs: BrightnessSet, theta, config: ResampleConfig, cache: BrightCache, terms, rng,
                      q_dark_to_bright: float | None = None) -> int:
    """Metropolis-Hastings flips of every brightness variable.

    Bright data reuse the cached likelihoods from the last theta update;
    each dark datum is proposed with probability ``q_dark_to_bright`` and
    only proposed data have their likelihood evaluated.  Returns the number
    of likelihood queries made.

    With ``Lt = L/B - 1`` the acceptance probabilities are
    ``min(1, q_db / (q_bd Lt))`` (bright to dark) and
    ``min(1, q_bd Lt / q_db)`` (dark to bright); the tests below are those
    rules multiplied through by the denominators, which avoids dividing by a
    zero ``Lt`` at a tight bound.
    """
    q_db = config.q_dark_to_bright if q_dark_to_bright is None else q_dark_to_bright
    if q_db is None:
        q_db = default_q_dark_to_bright(bs.num_bright, bs.n_points)
    q_bd = config.q_bright_to_dark
    B = bs.num_bright

    go_dark = None
    if B:
        bright = bs.arr[:B]
        log_l = cache.log_lik[bright]
        if np.isnan(log_l).any():
            raise RuntimeError("bright datum without cached likelihood at the current theta")
        lt = np.expm1(np.minimum(log_l - cache.log_bound[bright], MAX_DELTA))
        u = rng.random(B)
        accept = u * (q_bd * lt) < q_db
        if q_bd < 1.0:
            accept &= rng.random(B) < q_bd
        if accept.any():
            go_dark = bright[accept]

    queries = 0
    go_bright = None
    n_dark = bs.n_points - B
    if n_dark:
        candidates = bs.arr[B:][rng.random(n_dark) < q_db]
        if candidates.size:
            queries = candidates.size
            values = terms.evaluate(theta, candidates, grad=cache.with_grad)
            delta = check_bounds(values[0], values[1])
            u = rng.random(candidates.size)
            accept = u * q_db < q_bd * np.expm1(np.minimum(delta, MAX_DELTA))
            if accept.any():
                go_bright = candidates[accept]
                cache.store(go_bright, tuple(v[accept] for v in values))

    if go_dark is not None:
        cache.clear(go_dark)
        for n in go_dark:
            bs.darken(n)
    if go_bright is not None:
        for n in go_bright:
            bs.brighten(n)
    return queries
