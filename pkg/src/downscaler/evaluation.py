"""Validation statistics, proper scoring rules, sweeps, OLS diagnostics.

All scores are computed on the raw concentration scale over observed entries
only: PMSE from posterior means, PMAE from posterior medians, empirical
coverage and width from the 2.5/97.5% quantiles, CRPS by the exact pairwise
empirical estimator, and the Interval Score in its standard positive-penalty
form. Reports are stratified by distance to the closest training site.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .covariance import great_circle_km
from .data import AlignedDataset, Transform, back_transform
from .errors import EmptyMask, InsufficientDraws, InvalidInterval, RankDeficient

# ------------------------------------------------------------ score kernels


def pmse(pred_means, obs, mask) -> float:
    """Mean squared error over observed entries (raw scale)."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("no observed entries to score")
    p = np.asarray(pred_means, dtype=float)[m]
    o = np.asarray(obs, dtype=float)[m]
    return float(np.mean((p - o) ** 2))


def pmae(pred_medians, obs, mask) -> float:
    """Mean absolute error over observed entries (raw scale)."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("no observed entries to score")
    p = np.asarray(pred_medians, dtype=float)[m]
    o = np.asarray(obs, dtype=float)[m]
    return float(np.mean(np.abs(p - o)))


def crps_empirical(draws, y: float) -> float:
    """Exact pairwise empirical CRPS: mean|X - y| - 0.5 mean|X - X'|.

    The all-pairs spread term is evaluated through the sorted-order identity
    (identical value, n log n instead of n^2).
    """
    x = np.sort(np.asarray(draws, dtype=float))
    n = x.size
    if n < 2:
        raise InsufficientDraws("CRPS needs at least 2 draws")
    term = float(np.mean(np.abs(x - y)))
    i = np.arange(n)
    spread = 2.0 * float(np.sum((2 * i - n + 1) * x)) / (n * n)
    return term - 0.5 * spread


def interval_score(l: float, u: float, alpha: float, y: float) -> float:
    """Standard interval score: width plus (2/alpha) out-of-interval penalty."""
    if not (l <= u):
        raise InvalidInterval(f"need l <= u, got ({l}, {u})")
    if not (0.0 < alpha < 1.0):
        raise InvalidInterval(f"alpha must be in (0, 1), got {alpha}")
    score = u - l
    if y < l:
        score += 2.0 / alpha * (l - y)
    elif y > u:
        score += 2.0 / alpha * (y - u)
    return float(score)


def coverage_and_width(q025, q975, obs, mask) -> tuple[float, float]:
    """(fraction of observed entries inside the interval, mean width)."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyMask("no observed entries to score")
    lo = np.asarray(q025, dtype=float)[m]
    hi = np.asarray(q975, dtype=float)[m]
    o = np.asarray(obs, dtype=float)[m]
    inside = (lo <= o) & (o <= hi)
    return float(inside.mean()), float(np.mean(hi - lo))


# -------------------------------------------------------- record containers


@dataclass
class PredRecord:
    """One scored (site, day, pollutant) with its raw-scale predictive."""

    site_id: str
    t: int
    pollutant: int
    y_raw: float
    mean_raw: float
    median_raw: float
    q025: float
    q975: float
    draws: np.ndarray


def prediction_records(pred, validation: AlignedDataset) -> list[PredRecord]:
    """Match point-target predictive samples to held-out observations."""
    idx = {lab: i for i, lab in enumerate(pred.labels)}
    day_pos = {t: i for i, t in enumerate(pred.days)}
    recs = []
    for o in validation.observations:
        if o.site_id not in idx or o.t not in day_pos:
            continue
        draws = pred.draws[idx[o.site_id], day_pos[o.t], o.pollutant - 1]
        recs.append(
            PredRecord(
                site_id=o.site_id,
                t=o.t,
                pollutant=o.pollutant,
                y_raw=o.value_raw,
                mean_raw=float(draws.mean()),
                median_raw=float(np.quantile(draws, 0.5)),
                q025=float(np.quantile(draws, 0.025)),
                q975=float(np.quantile(draws, 0.975)),
                draws=draws,
            )
        )
    return recs


_QUANTILE_ENSEMBLE = stats.norm.ppf((np.arange(400) + 0.5) / 400)


def gaussian_record(
    site_id: str, t: int, pollutant: int, y_raw: float,
    m: float, v: float, transform: Transform,
) -> PredRecord:
    """Record for a transformed-scale Gaussian predictive (kriging methods).

    Raw-scale posterior mean/median use exact formulas under the monotone
    transform; CRPS/IS use a deterministic quantile ensemble so every method
    is scored through the identical empirical path.
    """
    sd = float(np.sqrt(max(v, 0.0)))
    if transform is Transform.SQRT:
        mean_raw = m * m + v
    elif transform is Transform.LOG:
        mean_raw = float(np.exp(m + 0.5 * v))
    else:
        mean_raw = m
    median_raw = float(back_transform(m, transform))
    q025 = float(back_transform(m - 1.959963984540054 * sd, transform))
    q975 = float(back_transform(m + 1.959963984540054 * sd, transform))
    ens = m + sd * _QUANTILE_ENSEMBLE
    if transform is Transform.SQRT:
        ens = np.maximum(ens, 0.0)
        q025 = float(max(m - 1.959963984540054 * sd, 0.0) ** 2)
    draws = np.asarray(back_transform(ens, transform), dtype=float)
    return PredRecord(site_id, t, pollutant, y_raw, mean_raw, median_raw, q025, q975, draws)


# ---------------------------------------------------------------- reporting


@dataclass
class ScoreRow:
    method: str
    pollutant: int
    stratum: str
    n: int
    pmse: float
    pmae: float
    coverage95: float
    width95: float
    crps: float
    interval_score: float


@dataclass
class ScoreReport:
    rows: list = field(default_factory=list)

    @classmethod
    def from_records(
        cls,
        records: list[PredRecord],
        method: str,
        near_sites: set | None = None,
        alpha: float = 0.05,
    ) -> "ScoreReport":
        """Aggregate records into All/Near/Far rows per pollutant.

        near_sites is the set of site ids within the stratification distance
        of a training site; None disables stratification (All rows only).
        """
        report = cls()
        pollutants = sorted({r.pollutant for r in records})
        strata = [("All", None)]
        if near_sites is not None:
            strata += [("Near", True), ("Far", False)]
        for i in pollutants:
            for name, near_flag in strata:
                sel = [
                    r
                    for r in records
                    if r.pollutant == i
                    and (near_flag is None or (r.site_id in near_sites) == near_flag)
                ]
                if not sel:
                    continue
                y = np.array([r.y_raw for r in sel])
                mean_ = np.array([r.mean_raw for r in sel])
                med = np.array([r.median_raw for r in sel])
                lo = np.array([r.q025 for r in sel])
                hi = np.array([r.q975 for r in sel])
                mask = np.ones(len(sel), dtype=bool)
                cov, width = coverage_and_width(lo, hi, y, mask)
                crps = float(np.mean([crps_empirical(r.draws, r.y_raw) for r in sel]))
                iscore = float(
                    np.mean([interval_score(r.q025, r.q975, alpha, r.y_raw) for r in sel])
                )
                report.rows.append(
                    ScoreRow(
                        method=method,
                        pollutant=i,
                        stratum=name,
                        n=len(sel),
                        pmse=pmse(mean_, y, mask),
                        pmae=pmae(med, y, mask),
                        coverage95=cov,
                        width95=width,
                        crps=crps,
                        interval_score=iscore,
                    )
                )
        return report

    def extend(self, other: "ScoreReport") -> "ScoreReport":
        self.rows.extend(other.rows)
        return self

    def row(self, method: str, pollutant: int, stratum: str = "All") -> ScoreRow:
        for r in self.rows:
            if r.method == method and r.pollutant == pollutant and r.stratum == stratum:
                return r
        raise KeyError((method, pollutant, stratum))

    def to_csv(self, path, config_hash: str = "") -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash: {config_hash}\n")
            w = csv.writer(fh)
            w.writerow(
                ["method", "pollutant", "stratum", "n", "pmse", "pmae",
                 "coverage95", "width95", "crps", "interval_score"]
            )
            for r in self.rows:
                w.writerow(
                    [r.method, r.pollutant, r.stratum, r.n]
                    + [repr(float(v)) for v in (r.pmse, r.pmae, r.coverage95,
                                                r.width95, r.crps, r.interval_score)]
                )

    def to_text(self) -> str:
        """Aligned table, one block per pollutant, methods as columns."""
        methods = list(dict.fromkeys(r.method for r in self.rows))
        strata = list(dict.fromkeys(r.stratum for r in self.rows))
        lines = []
        stats_names = [
            ("PMSE", "pmse"), ("PMAE", "pmae"), ("Emp. cov.", "coverage95"),
            ("Width", "width95"), ("CRPS", "crps"), ("Interval score", "interval_score"),
        ]
        for stratum in strata:
            for i in sorted({r.pollutant for r in self.rows}):
                header = f"pollutant {i} [{stratum}]"
                lines.append(header)
                lines.append("  " + " ".join(f"{m:>22s}" for m in ["statistic"] + methods))
                for label, attr in stats_names:
                    vals = []
                    for m in methods:
                        try:
                            v = getattr(self.row(m, i, stratum), attr)
                            if attr == "coverage95":
                                vals.append(f"{100 * v:.1f}%")
                            else:
                                vals.append(f"{v:.3f}")
                        except KeyError:
                            vals.append("--")
                    lines.append(
                        "  " + " ".join(f"{c:>22s}" for c in [label] + vals)
                    )
                lines.append("")
        return "\n".join(lines)


def near_site_set(validation: AlignedDataset, train: AlignedDataset, max_km: float = 40.0) -> set:
    """Validation sites within max_km of the closest training site."""
    near = set()
    for v in validation.sites:
        dmin = min(great_circle_km(v, s) for s in train.sites)
        if dmin <= max_km:
            near.add(v.id)
    return near


# ---------------------------------------------------------- method pipelines


def score_downscaler(
    train: AlignedDataset,
    validation: AlignedDataset,
    spec,
    method: str,
    seed: int,
    n_iter: int = 2000,
    burn_in: int = 1000,
    thin: int = 5,
    n_chains: int = 1,
    stratify_km: float | None = 40.0,
    days=None,
) -> ScoreReport:
    """Fit on train, predict at the validation sites, score held-out records."""
    from .inference import run_chain
    from .prediction import PredictionTarget, predict

    samples = run_chain(train, spec, n_iter=n_iter, burn_in=burn_in, thin=thin,
                        seed=seed, n_chains=n_chains)
    days = list(days) if days is not None else list(train.days)
    target = PredictionTarget.points(validation.sites, days)
    pred = predict(samples, train, spec, target, seed=seed)
    records = prediction_records(pred, validation)
    near = near_site_set(validation, train, stratify_km) if stratify_km else None
    return ScoreReport.from_records(records, method, near_sites=near)


def score_kriging(
    train: AlignedDataset,
    validation: AlignedDataset,
    phi: tuple,
    method: str = "kriging",
    stratify_km: float | None = 40.0,
    cokrige_params: dict | None = None,
) -> ScoreReport:
    """Per-day ordinary kriging (or cokriging when params given), scored like
    the downscaler. sigma2/tau2 are re-estimated per day by REML with phi
    held fixed at the supplied value."""
    from .baselines import CokrigingModel, KrigingModel, cokrige, krige, reml_fit_day
    from .errors import TooFewSites

    site_by_id = {s.id: s for s in train.sites}
    vsite_by_id = {s.id: s for s in validation.sites}
    by_day: dict = {}
    for o in train.observations:
        by_day.setdefault(o.t, {}).setdefault(o.pollutant, []).append(o)
    vobs: dict = {}
    for o in validation.observations:
        vobs.setdefault((o.t, o.pollutant), []).append(o)

    records = []
    for t in sorted(by_day):
        day_models = {}
        day_data = {}
        for i in sorted(by_day[t]):
            recs = by_day[t][i]
            if len(recs) < 5:
                continue
            sites = [site_by_id[o.site_id] for o in recs]
            y = np.array([train.transformed_value(o) for o in recs])
            try:
                fit = reml_fit_day(sites, y, phi_fixed=phi[i - 1])
            except TooFewSites:
                continue
            tau2 = max(fit["tau2"], 1e-8)
            sigma2 = max(fit["sigma2"], 1e-8)
            day_models[i] = KrigingModel(sigma2=sigma2, tau2=tau2, phi=phi[i - 1])
            day_data[i] = (sites, y)
        for i in day_models:
            key = (t, i)
            if key not in vobs:
                continue
            targets = [vsite_by_id[o.site_id] for o in vobs[key]]
            if cokrige_params is not None and len(day_models) == 2:
                model = CokrigingModel(
                    model_1=day_models[1], model_2=day_models[2],
                    a11=cokrige_params["a11"], a41=cokrige_params["a41"],
                    phi1=cokrige_params.get("phi1", phi[0]),
                )
                m, v = cokrige(
                    day_data[1][0], day_data[1][1], day_data[2][0], day_data[2][1],
                    model, targets, target_pollutant=i,
                )
            else:
                m, v = krige(day_data[i][0], day_data[i][1], day_models[i], targets)[:2]
            for o, mm, vv in zip(vobs[key], m, v):
                records.append(
                    gaussian_record(o.site_id, t, i, o.value_raw, float(mm), float(vv),
                                    train.transform[i])
                )
    near = near_site_set(validation, train, stratify_km) if stratify_km else None
    return ScoreReport.from_records(records, method, near_sites=near)


def sensitivity_sweep(
    train: AlignedDataset,
    validation: AlignedDataset,
    spec,
    multipliers=(0.01, 0.1, 1.0, 10.0, 100.0),
    methods=("downscaler", "kriging"),
    seed: int = 0,
    n_iter: int = 2000,
    burn_in: int = 1000,
    thin: int = 5,
) -> list[dict]:
    """Refit and re-score each method with the decay parameters scaled.

    Emits one row per (method, multiplier, pollutant) with the Tables-1/2
    statistics; the multiplier-1 row is a standalone fit at the spec's phi.
    """
    rows = []
    p = spec.p
    base_phi = spec.phi.phi
    for mult in multipliers:
        for method in methods:
            if method == "downscaler":
                swept = spec.with_phi(base_phi * mult)
                rep = score_downscaler(
                    train, validation, swept, method, seed=seed,
                    n_iter=n_iter, burn_in=burn_in, thin=thin, stratify_km=None,
                )
            elif method == "kriging":
                phi_by_poll = tuple(
                    base_phi[i * (p + 1)] * mult for i in range(p)
                )
                rep = score_kriging(train, validation, phi_by_poll,
                                    method="kriging", stratify_km=None)
            else:
                raise ValueError(f"unknown sweep method {method!r}")
            for r in rep.rows:
                rows.append(
                    {
                        "method": method,
                        "multiplier": mult,
                        "pollutant": r.pollutant,
                        "pmse": r.pmse,
                        "pmae": r.pmae,
                        "coverage95": r.coverage95,
                        "width95": r.width95,
                        "crps": r.crps,
                        "interval_score": r.interval_score,
                        "n": r.n,
                    }
                )
    return rows


def write_sweep_csv(rows: list[dict], path, config_hash: str = "") -> None:
    cols = ["method", "multiplier", "pollutant", "pmse", "pmae",
            "coverage95", "width95", "crps", "interval_score", "n"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r["method"], repr(float(r["multiplier"])), r["pollutant"]]
                       + [repr(float(r[c])) for c in cols[3:-1]] + [r["n"]])


# --------------------------------------------------------- OLS diagnostics


def site_ols_diagnostics(dataset: AlignedDataset, min_days: int = 10, alpha: float = 0.05) -> list[dict]:
    """Per-site OLS of the normalized response on the normalized covariates.

    For every (site, pollutant) with at least min_days paired days: z-score
    the transformed response and the transformed model outputs across days,
    regress with an intercept, and flag coefficients significant at the
    two-sided ``alpha`` level (plain standard errors). Rank-deficient site
    designs are skipped with a flag.
    """
    p = dataset.p
    by_site: dict = {}
    for o in dataset.observations:
        by_site.setdefault((o.site_id, o.pollutant), []).append(o)

    results = []
    for (sid, i), recs in sorted(by_site.items()):
        if len(recs) < min_days:
            results.append({"site_id": sid, "pollutant": i, "flag": "too_few_days"})
            continue
        cell = dataset.site_to_cell[sid]
        y = np.array([dataset.transformed_value(o) for o in recs])
        X = np.array([dataset.covariates(cell, o.t) for o in recs])
        try:
            ys = _zscore(y)
            Xs = np.column_stack([np.ones(len(y))] + [_zscore(X[:, j]) for j in range(p)])
        except RankDeficient:
            results.append({"site_id": sid, "pollutant": i, "flag": "rank_deficient"})
            continue
        n, k = Xs.shape
        if n <= k or np.linalg.matrix_rank(Xs) < k:
            results.append({"site_id": sid, "pollutant": i, "flag": "rank_deficient"})
            continue
        beta, _, _, _ = np.linalg.lstsq(Xs, ys, rcond=None)
        resid = ys - Xs @ beta
        dof = n - k
        s2 = float(resid @ resid) / dof
        cov = s2 * np.linalg.inv(Xs.T @ Xs)
        se = np.sqrt(np.diag(cov))
        tcrit = stats.t.ppf(1.0 - alpha / 2.0, dof)
        with np.errstate(divide="ignore", invalid="ignore"):
            tstats = np.where(se > 0, beta / se, np.inf)
        tss = float(ys @ ys)
        r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 0.0
        row = {
            "site_id": sid,
            "pollutant": i,
            "n_days": n,
            "intercept": float(beta[0]),
            "intercept_significant": bool(abs(tstats[0]) > tcrit),
            "r2": r2,
            "flag": "",
        }
        for j in range(p):
            row[f"slope_{j + 1}"] = float(beta[j + 1])
            row[f"slope_{j + 1}_significant"] = bool(abs(tstats[j + 1]) > tcrit)
        results.append(row)
    return results


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std(ddof=0)
    if sd == 0.0:
        raise RankDeficient("constant column cannot be normalized")
    return (x - x.mean()) / sd


def write_ols_csv(rows: list[dict], path, p: int, config_hash: str = "") -> None:
    cols = ["site_id", "pollutant", "n_days", "intercept", "intercept_significant"]
    for j in range(p):
        cols += [f"slope_{j + 1}", f"slope_{j + 1}_significant"]
    cols += ["r2", "flag"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r.get(c, "") for c in cols])
