"""Convergence diagnostics: split-R-hat and rank-normalized bulk ESS.

Formulas follow the standard published definitions (Gelman et al., Bayesian
Data Analysis 3rd ed., and Vehtari et al. 2021 "Rank-normalization, folding,
and localization"): chains are split in half; draws are rank-normalized via
z = Phi^-1((r - 3/8) / (S + 1/4)) with average ranks for ties; R-hat is the
usual sqrt(var_plus / W) on the split, rank-normalized chains; ESS combines
per-chain autocovariances with Geyer's initial monotone positive sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri


def _split(chains: np.ndarray) -> np.ndarray:
    """(M, N) -> (2M, N//2); drops the middle draw when N is odd."""
    m, n = chains.shape
    half = n // 2
    return np.concatenate([chains[:, :half], chains[:, n - half:]], axis=0)


def rank_normalize(chains: np.ndarray) -> np.ndarray:
    """Pooled fractional ranks (average ties) mapped through the normal
    quantile function; shape preserved."""
    flat = chains.reshape(-1)
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.shape, dtype=float)
    ranks[order] = np.arange(1, len(flat) + 1, dtype=float)
    # average ranks over ties
    sorted_vals = flat[order]
    i = 0
    while i < len(flat):
        j = i
        while j + 1 < len(flat) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            ranks[order[i:j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    z = ndtri((ranks - 0.375) / (len(flat) + 0.25))
    return z.reshape(chains.shape)


def split_rhat(chains: np.ndarray, rank_normalized: bool = True) -> float:
    """Potential scale reduction on split (optionally rank-normalized) chains.

    Returns inf when the within-chain variance vanishes but chains differ
    (non-mixing), and 1.0 for fully degenerate (all-equal) input.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 1 or chains.shape[1] < 4:
        raise ValueError("split_rhat needs an (M, N) array with N >= 4")
    x = rank_normalize(chains) if rank_normalized else chains
    x = _split(x)
    m, n = x.shape
    means = x.mean(axis=1)
    vars_ = x.var(axis=1, ddof=1)
    w = vars_.mean()
    b_over_n = means.var(ddof=1)
    var_plus = (n - 1) / n * w + b_over_n
    if w <= 0.0:
        return 1.0 if var_plus <= 0.0 else float("inf")
    return float(np.sqrt(var_plus / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance (normalized by N) per chain via FFT; (M, N) -> (M, N)."""
    m, n = x.shape
    xc = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n].real
    return acov / n


def ess_bulk(chains: np.ndarray) -> float:
    """Rank-normalized bulk effective sample size of one scalar parameter."""
    chains = np.asarray(chains, dtype=float)
    x = _split(rank_normalize(chains))
    m, n = x.shape
    if np.allclose(x, x.reshape(-1)[0]):
        return 0.0
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    var_plus = w * (n - 1) / n + x.mean(axis=1).var(ddof=1)
    if var_plus <= 0.0:
        return 0.0
    rho = 1.0 - (w - acov.mean(axis=0) * n / (n - 1)) / var_plus
    rho[0] = 1.0
    # Geyer initial monotone positive sequence on paired sums
    tau = 0.0
    prev_pair = np.inf
    k = 0
    while 2 * k + 1 < n:
        pair = rho[2 * k] + rho[2 * k + 1]
        if pair <= 0.0:
            break
        pair = min(pair, prev_pair)
        tau += pair
        prev_pair = pair
        k += 1
    tau = max(2.0 * tau - 1.0, 1.0 / np.log10(m * n + 10.0))
    return float(min(m * n / tau, m * n))


@dataclass
class Diagnostics:
    """Per-parameter convergence summary plus sampler bookkeeping."""

    rhat: np.ndarray
    ess: np.ndarray
    acceptance: np.ndarray            # (n_chains, n_blocks), post-warmup rates
    divergence_flags: list = field(default_factory=list)
    limited: bool = False             # True when only one chain was run

    def max_rhat(self) -> float:
        finite = self.rhat[np.isfinite(self.rhat)]
        if len(finite) < len(self.rhat):
            return float("inf")
        return float(finite.max()) if len(finite) else float("nan")

    def min_ess(self) -> float:
        return float(np.min(self.ess)) if len(self.ess) else float("nan")


def compute_diagnostics(draws: np.ndarray, acceptance: np.ndarray,
                        divergence_flags: list | None = None) -> Diagnostics:
    """draws: (n_chains, n_keep, dim). Single-chain input yields limited
    diagnostics (R-hat from split halves only), flagged via `limited`."""
    n_chains, n_keep, dim = draws.shape
    rhat = np.empty(dim)
    ess = np.empty(dim)
    for j in range(dim):
        chains = draws[:, :, j]
        rhat[j] = split_rhat(chains)
        ess[j] = ess_bulk(chains)
    return Diagnostics(rhat=rhat, ess=ess, acceptance=acceptance,
                       divergence_flags=list(divergence_flags or []),
                       limited=n_chains < 2)
