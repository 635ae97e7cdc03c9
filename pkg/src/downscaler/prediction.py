"""Posterior-predictive downscaling, upscaling, contrasts, bias surfaces.

Prediction is post-hoc composition: for each retained draw the latent fields
at the target points are drawn from their GP conditional given the stored
fit-site fields (the same law as sampling them inside the chain), the
coefficient surfaces are assembled through the draw's coregionalization
matrix, nugget noise is added, and the result is back-transformed. The
conditional weights and Cholesky factors depend only on geometry and the
fixed decay parameters, so they are computed once and reused across draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import LATENT_RIDGE, distance_matrix
from .data import AlignedDataset, Site, back_transform
from .errors import (
    DimensionMismatch,
    DrawCountMismatch,
    EmptyRegion,
    MissingGridOutput,
)
from .inference import ChainSamples, _chol_psd
from .model import LocalTime, ModelSpec
from .seeding import substream


@dataclass(frozen=True)
class PredictionTarget:
    """Where to predict: named points, cell centroids, or a cell-id region."""

    kind: str  # "points" | "cells" | "region"
    days: tuple
    sites: tuple = ()      # for points
    cell_ids: tuple = ()   # for cells / region

    @classmethod
    def points(cls, sites, days) -> "PredictionTarget":
        return cls(kind="points", days=tuple(days), sites=tuple(sites))

    @classmethod
    def cells(cls, cell_ids, days) -> "PredictionTarget":
        return cls(kind="cells", days=tuple(days), cell_ids=tuple(cell_ids))

    @classmethod
    def region(cls, cell_ids, days) -> "PredictionTarget":
        if not cell_ids:
            raise EmptyRegion("region must contain at least one cell")
        return cls(kind="region", days=tuple(days), cell_ids=tuple(cell_ids))


@dataclass
class PredictiveSamples:
    """Back-transformed draws per (target, day, pollutant) with summaries."""

    labels: list          # one per target
    lons: np.ndarray
    lats: np.ndarray
    days: list
    p: int
    draws: np.ndarray     # (n_targets, n_days, p, n_draws), raw scale

    @property
    def n_draws(self) -> int:
        return self.draws.shape[-1]

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=-1)

    def median(self) -> np.ndarray:
        return np.quantile(self.draws, 0.5, axis=-1)

    def q025(self) -> np.ndarray:
        return np.quantile(self.draws, 0.025, axis=-1)

    def q975(self) -> np.ndarray:
        return np.quantile(self.draws, 0.975, axis=-1)


def latent_conditional(phi_k: float, fit_sites, target_sites, metric="great-circle"):
    """Conditional of a unit-variance exponential GP at targets given fit sites.

    Returns (W, S): conditional mean is W @ w_fit, conditional covariance S.
    """
    all_sites = list(fit_sites) + list(target_sites)
    d = distance_matrix(all_sites, metric)
    n_f = len(fit_sites)
    R = np.exp(-phi_k * d)
    R_ff = R[:n_f, :n_f] + LATENT_RIDGE * np.eye(n_f)
    R_tf = R[n_f:, :n_f]
    W = np.linalg.solve(R_ff, R_tf.T).T
    S = R[n_f:, n_f:] - W @ R_tf.T
    return W, 0.5 * (S + S.T)


def _resolve_targets(dataset: AlignedDataset, target: PredictionTarget):
    """(labels, Site list, containing cell ids) for the target definition."""
    grid = dataset.grid
    if target.kind == "points":
        sites = list(target.sites)
        cells = [grid.assign(s.lon, s.lat) for s in sites]
        labels = [s.id for s in sites]
    elif target.kind in ("cells", "region"):
        if not target.cell_ids:
            raise EmptyRegion("no cells in prediction target")
        labels = list(target.cell_ids)
        sites = [Site(c, *grid.cell_centroid(c)) for c in labels]
        cells = labels
    else:
        raise ValueError(f"unknown target kind {target.kind!r}")
    return labels, sites, cells


def predict(
    samples: ChainSamples,
    dataset: AlignedDataset,
    spec: ModelSpec,
    target: PredictionTarget,
    seed: int = 0,
    include_nugget: bool = True,
    chunk: int = 256,
) -> PredictiveSamples:
    """Posterior-predictive draws at the target, one per retained chain draw.

    ``dataset`` must be the dataset the chain was fit on (it supplies the
    fit-site coordinates and the model-output covariates). Targets need grid
    output for every requested day; otherwise MissingGridOutput.
    """
    if samples.p != spec.p:
        raise DimensionMismatch("chain and spec disagree on pollutant count")
    if list(samples.site_ids) != dataset.site_ids():
        raise DimensionMismatch("chain was fit on a different site set")
    labels, t_sites, t_cells = _resolve_targets(dataset, target)
    days = list(target.days)
    day_pos = {t: i for i, t in enumerate(samples.days)}
    for t in days:
        if t not in day_pos:
            raise MissingGridOutput(f"day {t} was not part of the fitted data")

    p, q = spec.p, spec.q
    n_t, n_days, D = len(labels), len(days), samples.n_draws
    active = list(samples.active)
    n_act = len(active)

    # Covariates at the containing cells (raises MissingGridOutput if absent).
    design = np.empty((n_days, n_t, p + 1))
    for di, t in enumerate(days):
        for ci, cell in enumerate(t_cells):
            design[di, ci, 0] = 1.0
            design[di, ci, 1:] = dataset.covariates(cell, t)

    conds = {
        k: latent_conditional(spec.phi.phi[k], dataset.sites, t_sites)
        for k in active
    }
    chols = {k: _chol_psd(conds[k][1]) for k in active}

    # Per-draw loadings restricted to active processes.
    A_rows = np.zeros((D, q, n_act))
    for pos_e, (r, c) in enumerate(samples.entries):
        if c in active:
            A_rows[:, r, active.index(c)] = samples.A_entries[:, pos_e]

    rng = substream(seed, "predict", target.kind, tuple(days))
    gamma = spec.temporal.gamma_vector(q) if spec.temporal.local is LocalTime.DYNAMIC else None
    out = np.empty((n_t, n_days, p, D))

    for lo in range(0, D, chunk):
        hi = min(lo + chunk, D)
        dd = hi - lo
        if spec.temporal.local is LocalTime.DYNAMIC:
            # Condition the innovations day by day, then accumulate with gamma
            # along the full fitted day range so partial-history targets are
            # composed correctly.
            T_all = len(samples.days)
            w_t_all = np.empty((dd, T_all, n_act, n_t))
            for pos_k, k in enumerate(active):
                W, _ = conds[k]
                L = chols[k]
                wf = samples.w[lo:hi, :, pos_k, :]
                mean_t = np.einsum("af,dtf->dta", W, wf)
                z = rng.standard_normal((dd, T_all, n_t))
                w_t_all[:, :, pos_k, :] = mean_t + np.einsum("ab,dtb->dta", L, z)
            bl_all = np.einsum("dma,dtan->dtmn", A_rows[lo:hi], w_t_all)
            for tpos in range(1, T_all):
                bl_all[:, tpos] += gamma[None, :, None] * bl_all[:, tpos - 1]
            bl = bl_all[:, [day_pos[t] for t in days]]
        else:
            w_t = np.empty((dd, n_days, n_act, n_t))
            for pos_k, k in enumerate(active):
                W, _ = conds[k]
                L = chols[k]
                if spec.temporal.local is LocalTime.STATIC:
                    wf = samples.w[lo:hi, 0, pos_k, :]
                    mean_t = np.einsum("af,df->da", W, wf)
                    z = rng.standard_normal((dd, n_t))
                    field = mean_t + np.einsum("ab,db->da", L, z)
                    w_t[:, :, pos_k, :] = field[:, None, :]
                else:
                    tsel = [day_pos[t] for t in days]
                    wf = samples.w[lo:hi][:, tsel, pos_k, :]
                    mean_t = np.einsum("af,dtf->dta", W, wf)
                    z = rng.standard_normal((dd, n_days, n_t))
                    w_t[:, :, pos_k, :] = mean_t + np.einsum("ab,dtb->dta", L, z)
            bl = np.einsum("dma,dtan->dtmn", A_rows[lo:hi], w_t)

        tsel = [day_pos[t] for t in days]
        beta_d = samples.beta[lo:hi][:, tsel, :]          # (dd, n_days, q)
        for i in range(p):
            cols = [i * (p + 1) + j for j in range(p + 1)]
            coef = beta_d[:, :, cols][:, :, None, :] + np.transpose(
                bl[:, :, cols, :], (0, 1, 3, 2)
            )  # (dd, n_days, n_t, p+1)
            mean = np.einsum("tnj,dtnj->dtn", design, coef)
            if include_nugget:
                sd = np.sqrt(samples.tau2[lo:hi, i])[:, None, None]
                mean = mean + sd * rng.standard_normal((dd, n_days, n_t))
            raw = back_transform(
                np.maximum(mean, 0.0) if dataset.transform[i + 1].value == "sqrt" else mean,
                dataset.transform[i + 1],
            )
            out[:, :, i, lo:hi] = np.transpose(raw, (2, 1, 0))

    return PredictiveSamples(
        labels=labels,
        lons=np.array([s.lon for s in t_sites]),
        lats=np.array([s.lat for s in t_sites]),
        days=days,
        p=p,
        draws=out,
    )


def block_average(pred: PredictiveSamples, region_labels=None, label: str = "region") -> PredictiveSamples:
    """Per-draw arithmetic mean over region cells on the raw scale.

    Averaging happens after back-transformation, so the full predictive
    uncertainty of the regional average is preserved.
    """
    if region_labels is None:
        idx = np.arange(len(pred.labels))
    else:
        missing = [r for r in region_labels if r not in pred.labels]
        if missing:
            raise EmptyRegion(f"cells {missing} not among predicted targets")
        if not region_labels:
            raise EmptyRegion("empty region")
        pos = {lab: i for i, lab in enumerate(pred.labels)}
        idx = np.array([pos[r] for r in region_labels])
    if idx.size == 0:
        raise EmptyRegion("empty region")
    draws = pred.draws[idx].mean(axis=0, keepdims=True)
    return PredictiveSamples(
        labels=[label],
        lons=np.array([pred.lons[idx].mean()]),
        lats=np.array([pred.lats[idx].mean()]),
        days=pred.days,
        p=pred.p,
        draws=draws,
    )


def contrast(pred_a: PredictiveSamples, pred_b: PredictiveSamples, label: str = "contrast") -> PredictiveSamples:
    """Draw-wise difference a - b of two matched predictive sample sets."""
    if pred_a.n_draws != pred_b.n_draws:
        raise DrawCountMismatch(
            f"{pred_a.n_draws} vs {pred_b.n_draws} draws; contrasts need matched chains"
        )
    if pred_a.days != pred_b.days or pred_a.draws.shape != pred_b.draws.shape:
        raise DrawCountMismatch("contrast operands must share days and shape")
    return PredictiveSamples(
        labels=[f"{label}:{la}-{lb}" for la, lb in zip(pred_a.labels, pred_b.labels)],
        lons=pred_a.lons,
        lats=pred_a.lats,
        days=pred_a.days,
        p=pred_a.p,
        draws=pred_a.draws - pred_b.draws,
    )


def bias_surface(
    samples: ChainSamples,
    dataset: AlignedDataset,
    spec: ModelSpec,
    day: int,
    pollutant: int,
    coefficient: int,
    cell_ids=None,
) -> dict:
    """Posterior mean of the local adjustment beta_ij(s, t) at cell centroids.

    Plug-in conditional means of the latent fields (no conditional noise),
    averaged over draws; pollutant is 1-based, coefficient j in 0..p.
    """
    p, q = spec.p, spec.q
    if not (0 <= coefficient <= p):
        raise DimensionMismatch(f"coefficient must be in 0..{p}")
    m = (pollutant - 1) * (p + 1) + coefficient
    day_pos = {t: i for i, t in enumerate(samples.days)}
    if day not in day_pos:
        raise MissingGridOutput(f"day {day} was not part of the fitted data")
    labels = list(cell_ids) if cell_ids is not None else dataset.grid.cell_ids()
    centroids = [Site(c, *dataset.grid.cell_centroid(c)) for c in labels]
    active = list(samples.active)
    D = samples.n_draws

    surf = np.zeros(len(labels))
    gamma = spec.temporal.gamma_vector(q) if spec.temporal.local is LocalTime.DYNAMIC else None
    for pos_k, k in enumerate(active):
        W, _ = latent_conditional(spec.phi.phi[k], dataset.sites, centroids)
        col = np.zeros(D)
        for pos_e, (r, c) in enumerate(samples.entries):
            if r == m and c == k:
                col = samples.A_entries[:, pos_e]
        if not np.any(col):
            continue
        if spec.temporal.local is LocalTime.DYNAMIC:
            # Accumulate the innovation means with gamma up to the target day.
            tpos = day_pos[day]
            acc = np.zeros((D, len(labels)))
            for u in range(tpos + 1):
                wt = np.einsum("af,df->da", W, samples.w[:, u, pos_k, :])
                acc = (gamma[m] * acc + wt) if u > 0 else wt
            surf += (col[:, None] * acc).mean(axis=0)
        else:
            tpos = 0 if spec.temporal.local is LocalTime.STATIC else day_pos[day]
            wt = np.einsum("af,df->da", W, samples.w[:, tpos, pos_k, :])
            surf += (col[:, None] * wt).mean(axis=0)
    return {
        "cell_ids": labels,
        "lons": np.array([s.lon for s in centroids]),
        "lats": np.array([s.lat for s in centroids]),
        "mean": surf,
        "day": day,
        "pollutant": pollutant,
        "coefficient": coefficient,
    }
