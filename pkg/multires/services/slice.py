import math
from typing import Callable, Tuple

import numpy as np

from multires.core.exceptions import NumericalException

MAX_SHRINKS = 100


def _log_uniform(rng: np.random.Generator) -> float:
    # 1 - U lies in (0, 1]
    return math.log(1.0 - rng.random())


def slice_sample(
    x0: float,
    log_density: Callable[[float], float],
    rng: np.random.Generator,
    width: float = 1.0,
    max_steps: int = 50,
    lower: float = -math.inf,
    upper: float = math.inf,
    max_shrinks: int = 200,
) -> float:
    """Univariate slice sampling with stepping out and shrinkage.

    The bracket never leaves (lower, upper); the density is only evaluated
    strictly inside the bounds.
    """
    current = log_density(x0)
    if not math.isfinite(current):
        raise NumericalException("slice sampler started outside the support", {"x": x0})
    level = current + _log_uniform(rng)

    def inside(x: float) -> bool:
        return lower < x < upper and log_density(x) > level

    left = x0 - width * rng.random()
    right = left + width
    steps_left = int(math.floor(max_steps * rng.random()))
    steps_right = max_steps - 1 - steps_left
    while steps_left > 0 and inside(left):
        left -= width
        steps_left -= 1
    while steps_right > 0 and inside(right):
        right += width
        steps_right -= 1
    left = max(left, lower)
    right = min(right, upper)

    for _ in range(max_shrinks):
        proposal = left + (right - left) * rng.random()
        if inside(proposal):
            return proposal
        if proposal < x0:
            left = proposal
        else:
            right = proposal
    raise NumericalException("slice bracket collapsed without acceptance", {"x": x0})


def elliptical_slice(
    current: np.ndarray,
    prior_draw: np.ndarray,
    log_likelihood: Callable[[np.ndarray], float],
    rng: np.random.Generator,
    current_log_likelihood: float = None,
    max_shrinks: int = MAX_SHRINKS,
) -> Tuple[np.ndarray, float]:
    """One elliptical slice step for a zero-mean Gaussian prior.

    Proposals lie on the ellipse current*cos(phi) + prior_draw*sin(phi); the
    angle bracket shrinks towards phi = 0 until a point clears the slice.
    """
    if current_log_likelihood is None:
        current_log_likelihood = log_likelihood(current)
    level = current_log_likelihood + _log_uniform(rng)

    phi = rng.random() * 2.0 * math.pi
    phi_min, phi_max = phi - 2.0 * math.pi, phi
    for _ in range(max_shrinks):
        proposal = current * math.cos(phi) + prior_draw * math.sin(phi)
        value = log_likelihood(proposal)
        if value > level:
            return proposal, value
        if phi > 0:
            phi_max = phi
        elif phi < 0:
            phi_min = phi
        else:
            break
        phi = phi_min + (phi_max - phi_min) * rng.random()
    raise NumericalException("elliptical slice bracket collapsed to the current point")
