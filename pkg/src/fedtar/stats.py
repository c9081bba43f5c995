"""Paired bootstrap confidence interval and sign-flip permutation test."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class BootstrapReport:
    n: int
    mean_diff: float
    ci_low: float
    ci_high: float
    p_value: float
    win_rate: float
    significant: bool
    replicates: int
    exact_permutation: bool

    def to_dict(self) -> dict:
        return asdict(self)


def paired_bootstrap(diffs, replicates: int = 5000, seed: int = 0, level: float = 0.95,
                     alpha: float = 0.05) -> BootstrapReport:
    """Summarise per-instance differences (candidate minus baseline, positive = candidate wins).

    The CI is the percentile bootstrap of the mean. The p-value is two-sided
    under random sign flips; when ``2**n <= replicates`` every flip pattern is
    enumerated instead of sampled. A result is significant when the CI
    excludes 0 and p < ``alpha``.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if d.size < 2:
        raise ValueError("paired bootstrap needs at least two differences")
    if replicates < 100:
        raise ValueError("use at least 100 bootstrap replicates")
    if not np.all(np.isfinite(d)):
        raise ValueError("differences must be finite")
    n = d.size
    rng = np.random.default_rng(seed)
    observed = float(d.mean())

    idx = rng.integers(0, n, size=(replicates, n))
    boot = d[idx].mean(axis=1)
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(boot, [tail, 1.0 - tail])
    lo, hi = float(min(lo, observed)), float(max(hi, observed))

    # a tiny relative slack keeps ties (e.g. all-equal |d|) counted as extreme
    thresh = abs(observed) * (1.0 - 1e-12)
    exact = 2**n <= replicates
    if exact:
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=n)))
        null = signs @ d / n
        p = float(np.mean(np.abs(null) >= thresh))
    else:
        signs = rng.choice((-1.0, 1.0), size=(replicates, n))
        null = signs @ d / n
        p = float((1 + np.count_nonzero(np.abs(null) >= thresh)) / (replicates + 1))

    win = 100.0 * np.count_nonzero(d > 0) / n
    significant = (lo > 0.0 or hi < 0.0) and p < alpha
    return BootstrapReport(n, observed, lo, hi, p, float(win), bool(significant), replicates, exact)
