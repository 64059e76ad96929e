"""Chain diagnostics: effective sample size and split R-hat."""

from __future__ import annotations

import numpy as np


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of a 1-D series via FFT."""
    n = x.size
    xc = x - x.mean()
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conjugate(f), nfft)[:n].real
    return acov / n


def effective_sample_size(chains: np.ndarray) -> float:
    """ESS of one parameter from draws shaped (num_chains, num_draws).

    Uses Geyer's initial monotone positive sequence on the chain-averaged
    autocorrelation.  Returns NaN for degenerate (constant) chains.
    """
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = x.shape
    if n < 4:
        return float("nan")
    acov = np.mean([_autocovariance(x[c]) for c in range(m)], axis=0)
    var = acov[0]
    if var <= 0:
        return float("nan")
    rho = acov / var
    # pair consecutive lags (1,2), (3,4), ...; truncate at the first
    # non-positive pair and enforce monotone decrease
    max_pairs = (n - 1) // 2
    tau = 1.0
    prev = np.inf
    for k in range(max_pairs):
        pair = rho[2 * k + 1] + rho[2 * k + 2]
        if pair <= 0:
            break
        pair = min(pair, prev)
        prev = pair
        tau += 2.0 * pair
    ess = m * n / tau
    return float(min(ess, m * n))


def split_rhat(chains: np.ndarray) -> float:
    """Split R-hat for one parameter from draws shaped (num_chains, num_draws)."""
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = x.shape
    half = n // 2
    if half < 2:
        return float("nan")
    halves = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
    means = halves.mean(axis=1)
    variances = halves.var(axis=1, ddof=1)
    w = variances.mean()
    b = half * means.var(ddof=1)
    if w <= 0:
        return 1.0 if b <= 0 else float("inf")
    var_plus = (half - 1) / half * w + b / half
    return float(np.sqrt(var_plus / w))
