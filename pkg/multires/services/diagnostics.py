import logging
import math
from typing import List, Optional

import arviz as az
import numpy as np

from multires.core.exceptions import ValidationException
from multires.models.chain import ChainDraws
from multires.schemas.reports import ConvergenceRow

logger = logging.getLogger(__name__)

# arviz returns nan below this many draws
MIN_DRAWS = 4


def _series(samples) -> np.ndarray:
    return np.asarray(samples, dtype=float).ravel()


def _is_constant(x: np.ndarray) -> bool:
    return x.size == 0 or float(np.ptp(x)) == 0.0


def autocorrelation(samples: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation at lags 0..n-1."""
    x = _series(samples)
    if _is_constant(x):
        return np.concatenate(([1.0], np.zeros(x.size - 1)))
    return np.asarray(az.autocorr(x), dtype=float)


def effective_sample_size(samples: np.ndarray, method: str = "mean") -> float:
    """Single-chain ESS; arviz splits the chain in halves."""
    x = _series(samples)
    if x.size < MIN_DRAWS:
        return float(x.size)
    return float(az.ess(x, method=method))


def integrated_autocorrelation_time(samples: np.ndarray) -> float:
    x = _series(samples)
    return max(x.size / effective_sample_size(x), 1.0)


def mean_standard_error(samples: np.ndarray) -> float:
    x = _series(samples)
    if _is_constant(x):
        return 0.0
    return float(az.mcse(x, method="mean"))


def geweke_z(samples: np.ndarray, first: float = 0.1, last: float = 0.5) -> float:
    """Difference of early and late window means in Monte Carlo standard-error units."""
    samples = _series(samples)
    if not (0.0 < first < 1.0 and 0.0 < last < 1.0 and first + last <= 1.0):
        raise ValidationException("Geweke windows must be fractions summing to at most 1")
    n = samples.size
    a = samples[: int(math.floor(first * n))]
    b = samples[n - int(math.floor(last * n)):]
    if a.size < MIN_DRAWS or b.size < MIN_DRAWS:
        raise ValidationException(f"chain of length {n} too short for a Geweke test", field="draws")
    se2 = mean_standard_error(a) ** 2 + mean_standard_error(b) ** 2
    if se2 <= 0.0:
        return 0.0 if a.mean() == b.mean() else math.inf
    return float((a.mean() - b.mean()) / math.sqrt(se2))


def _row(quantity: str, series: np.ndarray) -> ConvergenceRow:
    z: Optional[float]
    try:
        z = geweke_z(series)
    except ValidationException:
        z = None
    return ConvergenceRow(quantity=quantity, ess=effective_sample_size(series), geweke_z=z)


def convergence_summary(chain: ChainDraws) -> List[ConvergenceRow]:
    """ESS and Geweke z of the scalar traces of a chain."""
    rows = [
        _row("alpha", chain.alpha),
        _row("n_clusters", chain.n_clusters),
    ]
    total = chain.loglik.sum(axis=1)
    if np.isfinite(total).all():
        rows.append(_row("log_likelihood", total))
    flagged = [r.quantity for r in rows if r.geweke_z is not None and abs(r.geweke_z) > 3.0]
    if flagged:
        logger.warning(f"⚠️ Geweke |z| > 3 for {', '.join(flagged)}; consider a longer burn-in")
    return rows
