"""Ordinary kriging, cokriging with the induced cross-covariance, and the
daily-REML-median decay estimation protocol.

Kriging predicts a new observation (nugget included in the target variance),
working on the transformed scale; callers back-transform. Cokriging is cast
as a joint-Gaussian conditional: simple cokriging when means are supplied,
otherwise the ordinary form via GLS mean estimation plus simple cokriging of
the residuals with the universal-kriging variance correction, which is
algebraically identical to the textbook ordinary-cokriging equations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.optimize import minimize_scalar

from .covariance import distance_matrix
from .errors import NotPositiveDefinite, SingularSystem, TooFewSites

_KRIGE_RIDGE = 1e-10


@dataclass(frozen=True)
class KrigingModel:
    """Constant-unknown-mean exponential-plus-nugget model."""

    sigma2: float
    tau2: float
    phi: float

    def __post_init__(self):
        if self.sigma2 <= 0 or self.tau2 < 0 or self.phi <= 0:
            raise ValueError("need sigma2 > 0, tau2 >= 0, phi > 0")

    def cov(self, d: np.ndarray) -> np.ndarray:
        c = self.sigma2 * np.exp(-self.phi * d)
        return c + self.tau2 * (d == 0.0)

    def cov_cross_site(self, d: np.ndarray) -> np.ndarray:
        """Covariance with a new, independently measured observation."""
        return self.sigma2 * np.exp(-self.phi * d)


@dataclass(frozen=True)
class CokrigingModel:
    """Per-pollutant kriging models plus the induced cross-covariance
    parameters (posterior means of A11, A41, A44 and the shared decay)."""

    model_1: KrigingModel
    model_2: KrigingModel
    a11: float
    a41: float
    phi1: float

    def cross_cov(self, d: np.ndarray) -> np.ndarray:
        return self.a11 * self.a41 * np.exp(-self.phi1 * d)


def _solve_ok_system(C: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    n = C.shape[0]
    bordered = np.zeros((n + 1, n + 1))
    bordered[:n, :n] = C + _KRIGE_RIDGE * np.trace(C) / n * np.eye(n)
    bordered[:n, n] = 1.0
    bordered[n, :n] = 1.0
    try:
        return np.linalg.solve(bordered, rhs)
    except np.linalg.LinAlgError:
        raise SingularSystem("ordinary kriging system is singular") from None


def krige(obs_sites, obs_values, model: KrigingModel, target_sites):
    """Ordinary kriging: (means, variances, weights) at the targets.

    Weights satisfy the unbiasedness constraint (sum to one); the variance is
    the standard ordinary-kriging variance for predicting a new observation,
    C(0) - lambda'c0 - nu with C(0) = sigma2 + tau2.
    """
    obs_sites = list(obs_sites)
    y = np.asarray(obs_values, dtype=float)
    n = len(obs_sites)
    if n < 2:
        raise TooFewSites("ordinary kriging needs at least 2 observations")
    all_sites = obs_sites + list(target_sites)
    d = distance_matrix(all_sites)
    C = model.cov(d[:n, :n])
    c0 = model.cov_cross_site(d[:n, n:])
    # A target that coincides with an observed site shares its nugget: the
    # prediction then honors that record exactly when tau2 = 0.
    coincident = d[:n, n:] == 0.0
    c0 = c0 + model.tau2 * coincident

    n_t = c0.shape[1]
    rhs = np.vstack([c0, np.ones((1, n_t))])
    sol = _solve_ok_system(C, rhs)
    lam, nu = sol[:n], sol[n]
    means = lam.T @ y
    c00 = model.sigma2 + model.tau2
    variances = c00 - np.einsum("nt,nt->t", lam, c0) - nu
    return means, np.maximum(variances, 0.0), lam


def cokrige(
    obs_sites_1,
    obs_values_1,
    obs_sites_2,
    obs_values_2,
    model: CokrigingModel,
    target_sites,
    target_pollutant: int,
    mode: str = "ordinary",
    known_means: tuple = (0.0, 0.0),
):
    """Cokriging via the joint-Gaussian conditional: (means, variances).

    mode="ordinary" (default) estimates the two unknown constant means by
    GLS and adds the mean-uncertainty term to the variance; mode="simple"
    conditions on the supplied known_means directly.
    """
    s1, s2 = list(obs_sites_1), list(obs_sites_2)
    y = np.concatenate([np.asarray(obs_values_1, float), np.asarray(obs_values_2, float)])
    n1, n2 = len(s1), len(s2)
    n = n1 + n2
    if n < 2:
        raise TooFewSites("cokriging needs at least 2 observations")
    targets = list(target_sites)
    d = distance_matrix(s1 + s2 + targets)
    d11 = d[:n1, :n1]
    d22 = d[n1:n, n1:n]
    d12 = d[:n1, n1:n]

    sigma = np.empty((n, n))
    sigma[:n1, :n1] = model.model_1.cov(d11)
    sigma[n1:, n1:] = model.model_2.cov(d22)
    sigma[:n1, n1:] = model.cross_cov(d12)
    sigma[n1:, :n1] = model.cross_cov(d12).T
    try:
        cf = cho_factor(sigma + _KRIGE_RIDGE * np.trace(sigma) / n * np.eye(n), lower=True)
    except (LinAlgError, np.linalg.LinAlgError):
        raise NotPositiveDefinite("joint cokriging covariance failed Cholesky") from None

    tm = model.model_1 if target_pollutant == 1 else model.model_2
    d_t1 = d[:n1, n:]
    d_t2 = d[n1:n, n:]
    sig0 = np.empty((n, len(targets)))
    if target_pollutant == 1:
        sig0[:n1] = tm.cov_cross_site(d_t1) + tm.tau2 * (d_t1 == 0.0)
        sig0[n1:] = model.cross_cov(d_t2)
    else:
        sig0[:n1] = model.cross_cov(d_t1)
        sig0[n1:] = tm.cov_cross_site(d_t2) + tm.tau2 * (d_t2 == 0.0)
    c00 = tm.sigma2 + tm.tau2

    alpha = cho_solve(cf, sig0)          # Sigma^-1 sigma0
    base_var = c00 - np.einsum("nt,nt->t", sig0, alpha)

    if mode == "simple":
        m = np.concatenate([np.full(n1, known_means[0]), np.full(n2, known_means[1])])
        f0 = None
        means = (known_means[0] if target_pollutant == 1 else known_means[1]) + alpha.T @ (y - m)
        variances = base_var
    elif mode == "ordinary":
        F = np.zeros((n, 2))
        F[:n1, 0] = 1.0
        F[n1:, 1] = 1.0
        Si_F = cho_solve(cf, F)
        gram = F.T @ Si_F
        try:
            mu = np.linalg.solve(gram, Si_F.T @ y)
        except np.linalg.LinAlgError:
            raise SingularSystem("GLS mean system is singular") from None
        f0 = np.zeros((2, len(targets)))
        f0[target_pollutant - 1] = 1.0
        u = f0 - F.T @ alpha
        means = f0.T @ mu + alpha.T @ (y - F @ mu)
        variances = base_var + np.einsum("kt,kt->t", u, np.linalg.solve(gram, u))
    else:
        raise ValueError(f"unknown cokriging mode {mode!r}")
    return means, np.maximum(variances, 0.0)


# ------------------------------------------------------------------- REML fit


def _reml_objective(y: np.ndarray, R: np.ndarray, log10_delta: float):
    """Negative restricted log-likelihood profiled over sigma2 (constants
    dropped); also returns the profiled (mu, sigma2)."""
    n = len(y)
    V = R + 10.0**log10_delta * np.eye(n)
    try:
        cf = cho_factor(V, lower=True)
    except (LinAlgError, np.linalg.LinAlgError):
        return np.inf, (np.nan, np.nan)
    ones = np.ones(n)
    Vi_y = cho_solve(cf, y)
    Vi_1 = cho_solve(cf, ones)
    denom = ones @ Vi_1
    mu = (ones @ Vi_y) / denom
    e = y - mu
    quad = e @ cho_solve(cf, e)
    if quad <= 0:
        return np.inf, (np.nan, np.nan)
    sigma2 = quad / (n - 1)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    obj = (n - 1) * np.log(sigma2) + logdet + np.log(denom)
    return 0.5 * obj, (mu, sigma2)


def reml_fit_day(sites, y, phi_bounds=(1e-6, 1.0), phi_fixed: float | None = None):
    """Profile-REML fit of (mu, sigma2, tau2, phi) for one day's data.

    Outer 1-D bounded searches over phi on five log-spaced subintervals (or
    phi held fixed), inner 1-D bounded search over the noise-to-signal ratio,
    sigma2 profiled in closed form. Returns a dict including the objective
    values per subinterval so callers can detect a flat profile.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 5:
        raise TooFewSites(f"need at least 5 sites for REML, got {n}")
    d = distance_matrix(list(sites))

    def profile_delta(phi):
        R = np.exp(-phi * d)

        def inner(ld):
            return _reml_objective(y, R, ld)[0]

        res = minimize_scalar(inner, bounds=(-8.0, 4.0), method="bounded",
                              options={"xatol": 1e-3})
        obj, (mu, sigma2) = _reml_objective(y, R, res.x)
        return obj, res.x, mu, sigma2

    if phi_fixed is not None:
        obj, ld, mu, sigma2 = profile_delta(phi_fixed)
        tau2 = 10.0**ld * sigma2
        return {
            "phi": phi_fixed, "mu": mu, "sigma2": sigma2, "tau2": tau2,
            "objective": obj, "interval_objectives": [obj],
        }

    lo, hi = np.log10(phi_bounds[0]), np.log10(phi_bounds[1])
    edges = np.linspace(lo, hi, 6)
    best = None
    interval_objs = []
    for a, b in zip(edges[:-1], edges[1:]):
        res = minimize_scalar(
            lambda lp: profile_delta(10.0**lp)[0],
            bounds=(a, b), method="bounded", options={"xatol": 1e-3},
        )
        obj, ld, mu, sigma2 = profile_delta(10.0**res.x)
        interval_objs.append(obj)
        if best is None or obj < best["objective"]:
            best = {
                "phi": 10.0**res.x, "mu": mu, "sigma2": sigma2,
                "tau2": 10.0**ld * sigma2, "objective": obj,
            }
    best["interval_objectives"] = interval_objs
    return best


FLAT_OBJECTIVE_TOL = 1e-3


def estimate_decay(dataset, pollutant: int, min_sites: int = 5):
    """Daily profile-REML decay estimates and their across-day median.

    Days with fewer than ``min_sites`` reporting sites are skipped, as are
    days whose REML profile is flat in phi (unidentifiable, e.g. pure-nugget
    data); both cases emit a warning rather than failing the whole protocol.
    """
    by_day: dict = {}
    site_by_id = {s.id: s for s in dataset.sites}
    for o in dataset.observations:
        if o.pollutant == pollutant:
            by_day.setdefault(o.t, []).append(o)
    daily = {}
    for t in sorted(by_day):
        recs = by_day[t]
        if len(recs) < min_sites:
            warnings.warn(f"day {t}: only {len(recs)} sites, skipped")
            continue
        sites = [site_by_id[o.site_id] for o in recs]
        y = np.array([dataset.transformed_value(o) for o in recs])
        fit = reml_fit_day(sites, y)
        objs = fit["interval_objectives"]
        if max(objs) - min(objs) < FLAT_OBJECTIVE_TOL:
            warnings.warn(f"day {t}: REML profile flat in phi, skipped")
            continue
        daily[t] = fit["phi"]
    if not daily:
        raise TooFewSites("no day produced a usable REML estimate")
    values = list(daily.values())
    return daily, float(np.median(values))
