"""Ensemble statistics: importance-weight ESS, autocorrelation, tunneling, errors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


class StatisticsDomainError(ValueError):
    pass


class FrozenObservableError(StatisticsDomainError):
    """The series has zero variance, so no autocorrelation can be measured."""


@dataclass(frozen=True)
class WeightSet:
    log_weights: np.ndarray

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=np.float64).ravel()
        if lw.size < 1:
            raise StatisticsDomainError("need at least one weight")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise StatisticsDomainError("log weights must be finite or -inf")
        object.__setattr__(self, "log_weights", lw)


@dataclass(frozen=True)
class Series:
    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if v.size < 1 or not np.all(np.isfinite(v)):
            raise StatisticsDomainError(f"series {self.label!r} must be non-empty and finite")
        object.__setattr__(self, "values", v)


def _values(s) -> np.ndarray:
    return s.values if isinstance(s, Series) else Series(s).values


def effective_sample_size(ws) -> float:
    """Normalized ESS ``(sum w)^2 / (N sum w^2)`` evaluated in log space."""
    lw = ws.log_weights if isinstance(ws, WeightSet) else WeightSet(ws).log_weights
    if np.all(lw == -np.inf):
        raise FloatingPointError("all importance weights are zero")
    lw = lw - np.max(lw)
    log_ess = 2.0 * logsumexp(lw) - logsumexp(2.0 * lw) - math.log(lw.size)
    return float(min(1.0, math.exp(log_ess)))


def autocorrelation(values: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation function rho(t), t = 0..N-1, via FFT."""
    x = np.asarray(values, dtype=np.float64) - np.mean(values)
    n = x.size
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n]
    return acov / acov[0]


def integrated_autocorrelation(s, c: float = 5.0) -> float:
    """tau_int = 1/2 + sum_{t=1}^{W} rho(t) with a self-consistent window.

    ``W`` is the smallest lag with ``W >= c * tau_int(W)``.
    """
    v = _values(s)
    if v.size < 10:
        raise StatisticsDomainError(f"need at least 10 samples, got {v.size}")
    if np.ptp(v) == 0.0:
        raise FrozenObservableError("frozen observable: series has zero variance")
    rho = autocorrelation(v)
    taus = 0.5 + np.cumsum(rho[1:])
    lags = np.arange(1, v.size)
    ok = lags >= c * taus
    w = int(np.argmax(ok)) if ok.any() else v.size - 2
    return float(max(taus[w], 0.5))


def tunneling_rate(q_series, tol: float = 1e-6) -> float:
    """Fraction of consecutive samples whose topological charge differs."""
    q = _values(q_series)
    if q.size < 2:
        raise StatisticsDomainError("need at least two charges")
    if np.any(np.abs(q - np.rint(q)) > tol):
        raise StatisticsDomainError("topological charges must be integers")
    q = np.rint(q)
    return float(np.mean(q[1:] != q[:-1]))


def bootstrap_error(s, n_resample: int = 1000, seed=0, block_size: int = 1) -> float:
    """Bootstrap standard error of the mean.

    With ``block_size > 1`` the series is first averaged over non-overlapping
    blocks (a trailing partial block is dropped) and the blocks are resampled,
    which accounts for autocorrelation shorter than the block.
    """
    v = _values(s)
    if v.size < 2:
        raise StatisticsDomainError("need at least two samples")
    if block_size > 1:
        nb = v.size // block_size
        if nb < 2:
            raise StatisticsDomainError("fewer than two blocks")
        v = v[: nb * block_size].reshape(nb, block_size).mean(axis=1)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.integers(0, v.size, size=(n_resample, v.size))
    return float(np.std(v[idx].mean(axis=1)))


def exp_delta_h_check(delta_h, n_sigma: float = 3.0) -> tuple[float, float, bool]:
    """Mean of exp(-dH) with its naive standard error; exact MCMC gives 1."""
    dh = _values(delta_h)
    e = np.exp(-dh)
    mean = float(np.mean(e))
    err = float(np.std(e, ddof=1) / math.sqrt(e.size)) if e.size > 1 else math.inf
    return mean, err, abs(mean - 1.0) <= n_sigma * err
