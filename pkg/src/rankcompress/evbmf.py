"""Empirical variational Bayes matrix factorization (global analytic solution).

Used as the local, per-layer rank estimator for the no-search baseline.
Follows Nakajima et al., "Global analytic solution of fully-observed
variational Bayesian matrix factorization" (JMLR 2013): the noise variance is
the minimizer of a one-dimensional objective over a bracketed interval, and a
singular value survives iff it exceeds the EVB threshold under that variance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import tensor_core as tc


@dataclass(frozen=True)
class EvbmfEstimate:
    estimated_rank: int
    noise_variance: float
    retained_singular_values: tuple[float, ...]


def _tau(x, alpha):
    d = x - (1.0 + alpha)
    return 0.5 * (d + np.sqrt(np.maximum(d * d - 4.0 * alpha, 0.0)))


def _psi1_tau(tau, alpha):
    return np.log(tau + 1.0) + alpha * np.log(tau / alpha + 1.0) - tau


def evb_tau_threshold(alpha: float) -> float:
    """Zero crossing of ``log(t+1) + a*log(t/a+1) - t`` for ``t > 0``.

    Equals ~2.5129 at ``alpha == 1``; the often-used ``2.5129*sqrt(alpha)`` is
    an approximation of this root.
    """
    hi = 1.0
    while _psi1_tau(hi, alpha) > 0:
        hi *= 2.0
    return brentq(_psi1_tau, 1e-12, hi, args=(alpha,), xtol=1e-14, rtol=1e-15)


def _objective(log_sigma2, s2, m, alpha, x_thresh):
    # per-component contribution, scaled by 1/L: psi0 everywhere plus psi1
    # above the threshold
    sigma2 = math.exp(log_sigma2)
    x = s2 / (m * sigma2)
    val = np.sum(x - np.log(x))
    big = x > x_thresh
    if np.any(big):
        val += np.sum(_psi1_tau(_tau(x[big], alpha), alpha))
    return float(val)


def evbmf_rank(a: np.ndarray) -> EvbmfEstimate:
    """Estimate the rank of ``a`` (``rows*cols >= 4``) with the analytic EVB solution."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size < 4:
        raise ValueError(f"evbmf needs a matrix with at least 4 entries, got shape {a.shape}")
    if a.shape[0] > a.shape[1]:
        a = a.T
    l, m = a.shape
    if not np.any(a):
        return EvbmfEstimate(0, 0.0, ())
    s = tc.svd(a).singular_values
    s2 = s * s
    alpha = l / m
    tau_bar = evb_tau_threshold(alpha)
    x_thresh = (1.0 + tau_bar) * (1.0 + alpha / tau_bar)

    # bracket for the noise variance (Theorem on the EVB noise estimate)
    h_bar = min(math.ceil(l / (1.0 + alpha)) - 1, l)
    upper = float(np.sum(s2)) / (l * m)
    tail = s2[h_bar:] if h_bar < l else s2[-1:]
    lower = max(float(tail[0]) / (m * x_thresh), float(np.mean(tail)) / m)
    floor = upper * 1e-30
    lower = max(lower, floor)
    if lower >= upper:
        sigma2 = upper
    else:
        with np.errstate(divide="ignore"):
            pos = s2 > 0
            s2_obj = np.where(pos, s2, floor * m)
        res = minimize_scalar(
            _objective,
            bounds=(math.log(lower), math.log(upper)),
            args=(s2_obj, m, alpha, x_thresh),
            method="bounded",
            options={"xatol": 1e-10},
        )
        sigma2 = math.exp(res.x)
    threshold = math.sqrt(m * sigma2 * x_thresh)
    rank = int(np.sum(s > threshold))
    return EvbmfEstimate(rank, sigma2, tuple(float(v) for v in s[:rank]))


def evbmf_tucker_ranks(w: np.ndarray, clamp: bool = True) -> tuple[int, int]:
    """``(r1, r2)`` from the input-mode and output-mode unfoldings of a kernel.

    With ``clamp`` each rank is raised to at least 1; without it a 0 signals
    that the mode is pure noise and the layer should be left alone.
    """
    w = np.asarray(w, dtype=np.float64)
    r1 = evbmf_rank(tc.unfold(w, 2)).estimated_rank
    r2 = evbmf_rank(tc.unfold(w, 1)).estimated_rank
    if clamp:
        r1, r2 = max(r1, 1), max(r2, 1)
    return r1, r2
