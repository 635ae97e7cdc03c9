"""Distances, the exponential kernel, coregionalization, induced covariances.

The six (generally p(p+1)) latent processes w_k are independent, mean-zero,
unit-variance Gaussian processes with exponential correlation
exp(-phi_k * d). A lower-triangular coregionalization matrix A, with zeros
imposed by a variant-specific mask, mixes them into the spatially varying
regression coefficients. The covariance this induces between observation
vectors at two points is the sandwich product

    [I_p (x) h(B)]' . A diag(exp(-phi_k d)) A' . [I_p (x) h(B')]

with h(B) = (1, x_1(B), ..., x_p(B))', plus a diagonal nugget at coincident
points. For three bivariate variants a closed-form expansion of the same
quantity is available and used as an algebraic cross-check.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .data import EARTH_RADIUS_KM, Site
from .errors import DimensionMismatch, NotPositiveDefinite, UnsupportedVariant

LATENT_RIDGE = 1e-8


def great_circle_km(a: Site, b: Site) -> float:
    """Great-circle distance in km (haversine, Earth radius 6371.0 km)."""
    lat1, lat2 = math.radians(a.lat), math.radians(b.lat)
    dlat = lat2 - lat1
    dlon = math.radians(b.lon - a.lon)
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def chordal_km(a: Site, b: Site) -> float:
    """Three-dimensional Euclidean (chordal) distance in km."""
    gc = great_circle_km(a, b)
    return 2.0 * EARTH_RADIUS_KM * math.sin(gc / (2.0 * EARTH_RADIUS_KM))


def distance_matrix(sites, metric: str = "great-circle") -> np.ndarray:
    """Pairwise distance matrix in km over a site list."""
    lon = np.radians(np.array([s.lon for s in sites], dtype=float))
    lat = np.radians(np.array([s.lat for s in sites], dtype=float))
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    gc = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(h)))
    if metric == "great-circle":
        return gc
    if metric == "chordal":
        return 2.0 * EARTH_RADIUS_KM * np.sin(gc / (2.0 * EARTH_RADIUS_KM))
    raise ValueError(f"unknown metric {metric!r}")


def exp_cov(d, phi):
    """Exponential correlation exp(-phi * d); phi in 1/km, d in km."""
    if phi <= 0:
        raise ValueError("decay parameter phi must be positive")
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr < 0):
        raise ValueError("distances must be non-negative")
    out = np.exp(-phi * d_arr)
    return out if out.ndim else float(out)


def effective_range_km(phi: float) -> float:
    """Reporting convention only: distance where correlation drops to e^-3."""
    return 3.0 / phi


def latent_cov_matrix(sites, phi_k: float, metric: str = "great-circle") -> np.ndarray:
    """Unit-diagonal exponential correlation matrix over a site list.

    Returns the pure kernel matrix; factorize with :func:`chol_with_ridge`,
    which adds the documented 1e-8 ridge (coincident sites otherwise make
    this exactly singular).
    """
    if len(sites) < 1:
        raise ValueError("need at least one site")
    return exp_cov(distance_matrix(sites, metric), phi_k)


def chol_with_ridge(m: np.ndarray, ridge: float = LATENT_RIDGE) -> np.ndarray:
    """Lower Cholesky factor of m + ridge*I; NotPositiveDefinite on failure."""
    try:
        return np.linalg.cholesky(m + ridge * np.eye(m.shape[0]))
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(
            f"covariance of order {m.shape[0]} failed Cholesky even with ridge {ridge}"
        ) from None


class VariantPattern(enum.Enum):
    """Sparsity pattern of the coregionalization matrix A."""

    INDEPENDENT_POLLUTANTS = "independent_pollutants"
    SHARED_INTERCEPT = "shared_intercept"
    SHARED_INTERCEPT_DIAG_SLOPES = "shared_intercept_diag_slopes"
    WITHIN_POLLUTANT_CORRELATED = "within_pollutant_correlated"
    FULL = "full"


def coef_index(i: int, j: int, p: int) -> int:
    """Row index of coefficient (pollutant i, covariate j) in the stacked vector.

    i is 0-based in 0..p-1; j in 0..p with 0 the intercept.
    """
    if not (0 <= i < p and 0 <= j <= p):
        raise DimensionMismatch(f"coefficient ({i}, {j}) outside p={p} model")
    return i * (p + 1) + j


def variant_mask(variant: VariantPattern, p: int) -> np.ndarray:
    """Boolean lower-triangular mask of the non-null entries of A."""
    q = p * (p + 1)
    mask = np.zeros((q, q), dtype=bool)
    if variant is VariantPattern.FULL:
        mask[np.tril_indices(q)] = True
        return mask
    if variant is VariantPattern.INDEPENDENT_POLLUTANTS:
        # Each pollutant keeps only its intercept and own-output slope,
        # mixed by a little 2x2 lower triangle; cross terms are null.
        for i in range(p):
            r0 = coef_index(i, 0, p)
            r1 = coef_index(i, i + 1, p)
            mask[r0, r0] = True
            mask[r1, r0] = True
            mask[r1, r1] = True
        return mask
    if variant is VariantPattern.SHARED_INTERCEPT:
        c0 = coef_index(0, 0, p)
        for i in range(p):
            r = coef_index(i, 0, p)
            mask[r, c0] = True
            mask[r, r] = True
        return mask
    if variant is VariantPattern.SHARED_INTERCEPT_DIAG_SLOPES:
        mask |= variant_mask(VariantPattern.SHARED_INTERCEPT, p)
        for i in range(p):
            for j in range(1, p + 1):
                r = coef_index(i, j, p)
                mask[r, r] = True
        return mask
    if variant is VariantPattern.WITHIN_POLLUTANT_CORRELATED:
        if p != 2:
            raise UnsupportedVariant("within_pollutant_correlated is defined for p = 2")
        for r, c in [(1, 1), (2, 1), (2, 2), (3, 1), (3, 3), (4, 1), (4, 4), (5, 2), (5, 4), (5, 5), (6, 3), (6, 4), (6, 6)]:
            mask[r - 1, c - 1] = True
        return mask
    raise UnsupportedVariant(f"unknown variant {variant!r}")


def overall_active_mask(variant: VariantPattern, p: int) -> np.ndarray:
    """Which overall coefficients beta_ij are free (True) vs fixed at zero.

    Only the independent-pollutants variant pins coefficients: the cross
    slopes beta_ij with j not in {0, i} are identically zero there.
    """
    q = p * (p + 1)
    active = np.ones(q, dtype=bool)
    if variant is VariantPattern.INDEPENDENT_POLLUTANTS:
        active[:] = False
        for i in range(p):
            active[coef_index(i, 0, p)] = True
            active[coef_index(i, i + 1, p)] = True
    return active


@dataclass(frozen=True)
class DecayParams:
    """Fixed spatial decay parameters, one per latent process (1/km)."""

    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float))
        if self.phi.ndim != 1:
            raise DimensionMismatch("phi must be a vector")
        if np.any(self.phi <= 0):
            raise ValueError("all decay parameters must be positive")

    def __len__(self) -> int:
        return len(self.phi)

    def scaled(self, multiplier: float) -> "DecayParams":
        return DecayParams(self.phi * multiplier)


class Coregionalization:
    """Lower-triangular A with a variant sparsity mask; T = A A' is the
    constant local covariance matrix of the coefficient processes."""

    def __init__(self, p: int, A: np.ndarray, mask: np.ndarray):
        A = np.asarray(A, dtype=float)
        mask = np.asarray(mask, dtype=bool)
        q = p * (p + 1)
        if A.shape != (q, q) or mask.shape != (q, q):
            raise DimensionMismatch(f"A and mask must be {q}x{q} for p={p}")
        if np.any(np.triu(mask, k=1)):
            raise ValueError("mask must be lower triangular")
        if np.any(np.triu(A, k=1) != 0.0):
            raise ValueError("A must be lower triangular")
        if np.any(A[~mask] != 0.0):
            raise ValueError("masked-out entries of A must be exactly zero")
        diag_mask = np.diag(mask)
        if np.any(np.diag(A)[diag_mask] <= 0.0):
            raise ValueError("unmasked diagonal entries of A must be positive")
        self.p = int(p)
        self.q = q
        self.A = A
        self.mask = mask

    @classmethod
    def from_variant(cls, p: int, variant: VariantPattern, entries: dict) -> "Coregionalization":
        """Build from 1-based (row, col) -> value entries of the variant mask."""
        mask = variant_mask(variant, p)
        q = p * (p + 1)
        A = np.zeros((q, q))
        for (r, c), v in entries.items():
            if not mask[r - 1, c - 1]:
                raise ValueError(f"entry A[{r},{c}] is masked out under {variant.value}")
            A[r - 1, c - 1] = v
        return cls(p, A, mask)

    @property
    def T(self) -> np.ndarray:
        return self.A @ self.A.T

    def active_processes(self) -> np.ndarray:
        """Indices of latent processes with at least one unmasked loading."""
        return np.flatnonzero(self.mask.any(axis=0))

    def unmasked_entries(self) -> list[tuple[int, int]]:
        """0-based (row, col) pairs of sampled entries, row-major order."""
        rows, cols = np.nonzero(self.mask)
        return list(zip(rows.tolist(), cols.tolist()))


def design_vector(x_B) -> np.ndarray:
    """(1, x_1(B), ..., x_p(B)) as a column-ish 1-D array."""
    x = np.asarray(x_B, dtype=float)
    return np.concatenate(([1.0], x))


def induced_cov_from_matrix(A: np.ndarray, phi, x_B, x_Bprime, dist: float) -> np.ndarray:
    """Sandwich product for an arbitrary mixing matrix A (no mask checks).

    Rows of the result index pollutants at the first point, columns at the
    second; no nugget term.
    """
    A = np.asarray(A, dtype=float)
    q = A.shape[0]
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (q,):
        raise DimensionMismatch(f"phi must have length {q}")
    h_b = design_vector(x_B)
    h_bp = design_vector(x_Bprime)
    p = q // len(h_b)
    if p * len(h_b) != q:
        raise DimensionMismatch("covariate vector length inconsistent with A order")
    H_b = np.kron(np.eye(p), h_b[:, None])      # (q, p)
    H_bp = np.kron(np.eye(p), h_bp[:, None])
    sigma_w = np.exp(-phi * dist)
    middle = (A * sigma_w[None, :]) @ A.T
    return H_b.T @ middle @ H_bp


def induced_joint_cov(
    coreg: Coregionalization,
    phi: DecayParams,
    x_B,
    x_Bprime,
    dist: float,
    nuggets=None,
    same_point: bool = False,
) -> np.ndarray:
    """Cov(Y(s), Y(s')) induced by the coregionalization, a p x p matrix.

    The diagonal nugget is added only when the two points coincide
    (``same_point``) and for matching pollutants.
    """
    if len(phi) != coreg.q:
        raise DimensionMismatch(f"phi must have length {coreg.q}")
    if len(np.atleast_1d(x_B)) != coreg.p or len(np.atleast_1d(x_Bprime)) != coreg.p:
        raise DimensionMismatch(f"covariate vectors must have length p={coreg.p}")
    cov = induced_cov_from_matrix(coreg.A, phi.phi, x_B, x_Bprime, dist)
    if same_point and nuggets is not None:
        cov = cov + np.diag(np.asarray(nuggets, dtype=float))
    return cov


def closed_form_cov(
    variant: VariantPattern,
    coreg: Coregionalization,
    phi: DecayParams,
    x_B,
    x_Bprime,
    dist: float,
    nugget,
    same_point: bool,
) -> tuple[float, float, float]:
    """(cov11, cov22, cov12) from the closed-form expansions, p = 2 only.

    cov12 is Cov(Y_1(s), Y_2(s')) with s in cell B and s' in cell B'. These
    are the exact algebraic expansions of the sandwich product for the three
    reduced bivariate variants; anything else raises UnsupportedVariant.
    """
    supported = (
        VariantPattern.SHARED_INTERCEPT,
        VariantPattern.SHARED_INTERCEPT_DIAG_SLOPES,
        VariantPattern.WITHIN_POLLUTANT_CORRELATED,
    )
    if variant not in supported:
        raise UnsupportedVariant(f"no closed form for {variant.value}")
    if coreg.p != 2:
        raise UnsupportedVariant("closed forms are bivariate")
    if len(phi) != 6:
        raise DimensionMismatch("phi must have length 6")

    A = coreg.A
    rho = np.exp(-phi.phi * dist)
    x1, x2 = float(np.atleast_1d(x_B)[0]), float(np.atleast_1d(x_B)[1])
    x1p, x2p = float(np.atleast_1d(x_Bprime)[0]), float(np.atleast_1d(x_Bprime)[1])
    tau1, tau2 = (float(n) for n in np.atleast_1d(nugget))
    delta = 1.0 if same_point else 0.0

    def a(r, c):
        return A[r - 1, c - 1]

    if variant is VariantPattern.SHARED_INTERCEPT:
        cov11 = a(1, 1) ** 2 * rho[0] + tau1 * delta
        cov22 = a(4, 1) ** 2 * rho[0] + a(4, 4) ** 2 * rho[3] + tau2 * delta
        cov12 = a(1, 1) * a(4, 1) * rho[0]
        return cov11, cov22, cov12

    if variant is VariantPattern.SHARED_INTERCEPT_DIAG_SLOPES:
        cov11 = (
            a(1, 1) ** 2 * rho[0]
            + a(2, 2) ** 2 * x1 * x1p * rho[1]
            + a(3, 3) ** 2 * x2 * x2p * rho[2]
            + tau1 * delta
        )
        cov22 = (
            a(4, 1) ** 2 * rho[0]
            + a(4, 4) ** 2 * rho[3]
            + a(5, 5) ** 2 * x1 * x1p * rho[4]
            + a(6, 6) ** 2 * x2 * x2p * rho[5]
            + tau2 * delta
        )
        cov12 = a(1, 1) * a(4, 1) * rho[0]
        return cov11, cov22, cov12

    # Within-pollutant-correlated pattern. The w1 loading of Y1 and the w4
    # loading of Y2 depend on the covariates, so the quadratic products must
    # be kept in full for the expansion to match the sandwich product.
    u1 = a(1, 1) + a(2, 1) * x1 + a(3, 1) * x2
    u1p = a(1, 1) + a(2, 1) * x1p + a(3, 1) * x2p
    u4 = a(4, 4) + a(5, 4) * x1 + a(6, 4) * x2
    u4p = a(4, 4) + a(5, 4) * x1p + a(6, 4) * x2p
    cov11 = (
        u1 * u1p * rho[0]
        + a(2, 2) ** 2 * x1 * x1p * rho[1]
        + a(3, 3) ** 2 * x2 * x2p * rho[2]
        + tau1 * delta
    )
    cov22 = (
        a(4, 1) ** 2 * rho[0]
        + a(5, 2) ** 2 * x1 * x1p * rho[1]
        + a(6, 3) ** 2 * x2 * x2p * rho[2]
        + u4 * u4p * rho[3]
        + a(5, 5) ** 2 * x1 * x1p * rho[4]
        + a(6, 6) ** 2 * x2 * x2p * rho[5]
        + tau2 * delta
    )
    cov12 = (
        u1 * a(4, 1) * rho[0]
        + a(2, 2) * a(5, 2) * x1 * x1p * rho[1]
        + a(3, 3) * a(6, 3) * x2 * x2p * rho[2]
    )
    return cov11, cov22, cov12
