import logging
from functools import lru_cache
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from multires.core.exceptions import NumericalException
from multires.models.linkage import YearGrid
from multires.schemas.kernels import CARParams, RQParams

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


def rq_covariance(
    kappa: Union[RQParams, Sequence[float]],
    grid: Union[YearGrid, np.ndarray],
    jitter: float = 1e-8,
) -> np.ndarray:
    """Rational quadratic covariance over the year grid.

    C[j, k] = (1/kappa1) * (1 + (t_j - t_k)^2 / (kappa2 * kappa3)) ** (-kappa3),
    plus jitter * (1/kappa1) on the diagonal.
    """
    k1, k2, k3 = kappa.as_tuple() if isinstance(kappa, RQParams) else (float(v) for v in kappa)
    t = grid.time_points if isinstance(grid, YearGrid) else np.asarray(grid, dtype=float)
    lag2 = (t[:, None] - t[None, :]) ** 2
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        C = (1.0 / k1) * np.power(1.0 + lag2 / (k2 * k3), -k3)
    if not np.isfinite(C).all():
        raise NumericalException(
            "non-finite rational quadratic covariance", details={"kappa": [k1, k2, k3]}
        )
    if jitter:
        C[np.diag_indices_from(C)] += jitter / k1
    return C


@lru_cache(maxsize=32)
def _chain(T: int) -> np.ndarray:
    omega = np.zeros((T, T))
    idx = np.arange(T - 1)
    omega[idx, idx + 1] = 1.0
    omega[idx + 1, idx] = 1.0
    omega.setflags(write=False)
    return omega


def chain_adjacency(T: int) -> Tuple[np.ndarray, np.ndarray]:
    """First-order neighbours over years and the diagonal of row sums."""
    omega = _chain(T)
    return omega, np.diag(omega.sum(axis=1))


def car_precision(params: CARParams) -> np.ndarray:
    """tau * (D - rho * Omega)."""
    Q = params.tau * (params.d - params.rho * params.omega)
    try:
        linalg.cholesky(Q, lower=True)
    except linalg.LinAlgError:
        raise NumericalException(
            "CAR precision is not positive definite; check the adjacency",
            details={"tau": params.tau, "rho": params.rho},
        )
    return Q


def _cholesky(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(matrix, lower=True)
    except (linalg.LinAlgError, ValueError):
        raise NumericalException(f"{what} is not symmetric positive definite")


def inverse_spd(matrix: np.ndarray) -> np.ndarray:
    factor = linalg.cho_factor(matrix, lower=True)
    inverse = linalg.cho_solve(factor, np.eye(matrix.shape[0]))
    return 0.5 * (inverse + inverse.T)


class MatrixNormalSpec:
    """Zero-or-fixed mean matrix normal with row precision and column covariance.

    Equivalent to a multivariate normal on the row-stacked matrix with
    covariance kron(inv(row_precision), col_covariance).
    """

    def __init__(
        self,
        row_precision: np.ndarray,
        col_covariance: np.ndarray,
        mean: Optional[np.ndarray] = None,
    ):
        self.row_precision = np.atleast_2d(np.asarray(row_precision, dtype=float))
        self.col_covariance = np.atleast_2d(np.asarray(col_covariance, dtype=float))
        self.P = self.row_precision.shape[0]
        self.T = self.col_covariance.shape[0]
        self.mean = np.zeros((self.P, self.T)) if mean is None else np.asarray(mean, dtype=float)
        self.row_chol = _cholesky(self.row_precision, "row precision")
        self.col_chol = _cholesky(self.col_covariance, "column covariance")
        self.log_det_row_precision = 2.0 * np.log(np.diag(self.row_chol)).sum()
        self.log_det_col_covariance = 2.0 * np.log(np.diag(self.col_chol)).sum()

    @classmethod
    def from_precisions(
        cls, row_precision: np.ndarray, col_precision: np.ndarray
    ) -> "MatrixNormalSpec":
        try:
            col_covariance = inverse_spd(np.atleast_2d(col_precision))
        except (linalg.LinAlgError, ValueError):
            raise NumericalException("column precision is not symmetric positive definite")
        return cls(row_precision, col_covariance)

    def quadratic(self, x: np.ndarray) -> float:
        """tr(row_precision (x - M) inv(C) (x - M)')."""
        centered = np.asarray(x, dtype=float).reshape(self.P, self.T) - self.mean
        W = self.row_chol.T @ centered
        V = linalg.solve_triangular(self.col_chol, W.T, lower=True)
        return float(np.sum(V * V))

    def quadratic_sum(self, xs: np.ndarray) -> float:
        """Sum of quadratic(x) over a stack of P x T matrices."""
        centered = np.asarray(xs, dtype=float).reshape(-1, self.P, self.T) - self.mean
        if centered.shape[0] == 0:
            return 0.0
        W = np.einsum("qp,nqt->npt", self.row_chol, centered)
        V = linalg.solve_triangular(self.col_chol, W.reshape(-1, self.T).T, lower=True)
        return float(np.sum(V * V))

    def logpdf(self, x: np.ndarray) -> float:
        return (
            -0.5 * self.P * self.T * LOG_2PI
            + 0.5 * self.T * self.log_det_row_precision
            - 0.5 * self.P * self.log_det_col_covariance
            - 0.5 * self.quadratic(x)
        )

    def rvs(self, rng: np.random.Generator) -> np.ndarray:
        Z = rng.standard_normal((self.P, self.T))
        rows = linalg.solve_triangular(self.row_chol, Z, lower=True, trans="T")
        return self.mean + rows @ self.col_chol.T


def matnorm_sample(spec: MatrixNormalSpec, rng: np.random.Generator) -> np.ndarray:
    return spec.rvs(rng)


def matnorm_logdensity(x: np.ndarray, spec: MatrixNormalSpec) -> float:
    return spec.logpdf(x)
