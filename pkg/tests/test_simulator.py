import numpy as np
import pytest

from downscaler.covariance import (
    Coregionalization,
    DecayParams,
    VariantPattern,
    closed_form_cov,
    great_circle_km,
)
from downscaler.data import Grid, Transform, transform
from downscaler.errors import DimensionMismatch
from downscaler.model import TemporalStructure, default_spec
from downscaler.simulator import (
    GridFieldConfig,
    TruthConfig,
    paper_scale_testbed,
    simulate,
)


def small_grid():
    return Grid(origin_lon=-88.0, origin_lat=33.0, cell_size_km=60.0, n_x=8, n_y=6)


def shared_intercept_spec(phi=None, transform_names=("identity", "identity")):
    return default_spec(
        2, VariantPattern.SHARED_INTERCEPT, TemporalStructure(),
        phi=phi if phi is not None else [0.002] * 3 + [0.0015] * 3,
        transform=list(transform_names),
    )


def test_noise_free_limit_reproduces_regression_surface():
    # tau2 = 0 and (numerically) no local adjustment: Y is the deterministic
    # regression surface composed from the covariates.
    spec = shared_intercept_spec()
    eps = 1e-15
    truth = TruthConfig(
        spec=spec,
        A_entries={(1, 1): eps, (4, 1): 0.0, (4, 4): eps},
        tau2=np.array([0.0, 0.0]),
        beta_overall=np.array([1.0, 0.5, -0.2, 0.3, 0.1, 0.7]),
        n_days=2,
        n_both=6,
        grid=small_grid(),
    )
    ds, latent = simulate(truth, seed=21)
    for o in ds.observations:
        cell = ds.site_to_cell[o.site_id]
        x = ds.covariates(cell, o.t)
        block = np.array([1.0, x[0], x[1]])
        i = o.pollutant - 1
        beta = truth.beta_overall[i * 3 : (i + 1) * 3]
        assert ds.transformed_value(o) == pytest.approx(float(block @ beta), abs=1e-12)


def test_simulated_pair_covariance_matches_closed_form():
    # Monte-Carlo covariance of simulated field pairs at two fixed sites vs
    # the analytic expressions (smoke-scale; the acceptance suite runs 200k).
    rng = np.random.default_rng(2)
    variant = VariantPattern.SHARED_INTERCEPT
    entries = {(1, 1): 0.9, (4, 1): 0.4, (4, 4): 0.7}
    coreg = Coregionalization.from_variant(2, variant, entries)
    phi = DecayParams(np.array([2e-3, 2e-3, 2e-3, 1.5e-3, 1.5e-3, 1.5e-3]))
    tau2 = np.array([0.2, 0.3])
    from downscaler.data import Site

    s1, s2 = Site("a", -86.0, 34.0), Site("b", -85.0, 34.5)
    dist = great_circle_km(s1, s2)
    x_b = np.array([1.3, -0.4])
    x_bp = np.array([0.2, 0.9])
    n = 50000
    # Draw the latent pair fields exactly from their 2x2 GP margins.
    y1 = np.zeros((n, 2))
    y2 = np.zeros((n, 2))
    for k in (0, 3):
        r = np.exp(-phi.phi[k] * dist)
        L = np.linalg.cholesky(np.array([[1.0, r], [r, 1.0]]) + 1e-12 * np.eye(2))
        w = rng.standard_normal((n, 2)) @ L.T
        for i, xb in ((0, x_b), (1, x_bp)):
            h = np.array([1.0, xb[0], xb[1]])
            load1 = h @ coreg.A[0:3, k]
            load2 = h @ coreg.A[3:6, k]
            y1[:, i] += load1 * w[:, i]
            y2[:, i] += load2 * w[:, i]
    y1 += rng.standard_normal((n, 2)) * np.sqrt(tau2[0])
    y2 += rng.standard_normal((n, 2)) * np.sqrt(tau2[1])

    c11, c22, c12 = closed_form_cov(variant, coreg, phi, x_b, x_bp, dist, tau2, False)
    for sample_cov, expected, v1, v2 in [
        (np.cov(y1[:, 0], y1[:, 1])[0, 1], c11, y1[:, 0], y1[:, 1]),
        (np.cov(y2[:, 0], y2[:, 1])[0, 1], c22, y2[:, 0], y2[:, 1]),
        (np.cov(y1[:, 0], y2[:, 1])[0, 1], c12, y1[:, 0], y2[:, 1]),
    ]:
        se = np.sqrt((v1.var() * v2.var() + sample_cov**2) / n)
        assert abs(sample_cov - expected) < 3.0 * se


def test_period_three_masking_arithmetic():
    spec = shared_intercept_spec()
    truth = TruthConfig(
        spec=spec,
        A_entries={(1, 1): 0.5, (4, 1): 0.2, (4, 4): 0.4},
        tau2=np.array([0.1, 0.1]),
        beta_overall=np.zeros(6),
        n_days=12,
        n_both=10,
        pollutant2_period=3,
        grid=small_grid(),
    )
    ds, _ = simulate(truth, seed=3)
    n1 = sum(1 for o in ds.observations if o.pollutant == 1)
    n2 = sum(1 for o in ds.observations if o.pollutant == 2)
    assert n1 == 10 * 12
    assert n2 == 10 * 4  # on-cycle days 0,3,6,9


def test_simulate_deterministic_given_seed():
    spec = shared_intercept_spec()
    truth = TruthConfig(
        spec=spec, A_entries={(1, 1): 0.5, (4, 1): 0.2, (4, 4): 0.4},
        tau2=np.array([0.1, 0.1]), beta_overall=np.zeros(6),
        n_days=3, n_both=5, grid=small_grid(),
    )
    ds1, t1 = simulate(truth, seed=9)
    ds2, t2 = simulate(truth, seed=9)
    assert ds1.observations == ds2.observations
    assert np.array_equal(t1.w, t2.w)
    ds3, _ = simulate(truth, seed=10)
    assert ds1.observations != ds3.observations


def test_dense_cholesky_cap():
    spec = shared_intercept_spec()
    truth = TruthConfig(
        spec=spec, A_entries={(1, 1): 0.5, (4, 1): 0.2, (4, 4): 0.4},
        tau2=np.array([0.1, 0.1]), beta_overall=np.zeros(6),
        n_days=1, n_both=2500, grid=small_grid(),
    )
    with pytest.raises(DimensionMismatch):
        simulate(truth, seed=1)


def test_paper_scale_testbed_counts_and_correlation():
    tb = paper_scale_testbed(seed=5)
    assert len(tb.train.sites) == 161
    assert len(tb.validation.sites) == 65
    part = tb.train.partitions[0]
    assert (len(part.both), len(part.only_1), len(part.only_2)) == (70, 52, 39)

    n1 = sum(1 for o in tb.train.observations if o.pollutant == 1)
    n2 = sum(1 for o in tb.train.observations if o.pollutant == 2)
    assert 13000 <= n1 <= 16000
    assert 4300 <= n2 <= 5300

    # Tuned cross-pollutant correlation at co-located site-days.
    vals = {}
    for o in tb.dataset.observations:
        vals[(o.site_id, o.t, o.pollutant)] = tb.dataset.transformed_value(o)
    pairs = np.array(
        [(v, vals[(s, t, 2)]) for (s, t, i), v in vals.items() if i == 1 and (s, t, 2) in vals]
    )
    corr = np.corrcoef(pairs.T)[0, 1]
    assert 0.62 <= corr <= 0.76

    # Transformed-scale moments near the study's summary statistics.
    y1 = np.array([v for (s, t, i), v in vals.items() if i == 1])
    y2 = np.array([v for (s, t, i), v in vals.items() if i == 2])
    assert abs(y1.mean() - 7.41) < 0.4 and abs(y1.std() - 1.31) < 0.25
    assert abs(y2.mean() - 2.72) < 0.2 and abs(y2.std() - 0.56) < 0.12


def test_latent_truth_record_consistency():
    spec = shared_intercept_spec()
    truth = TruthConfig(
        spec=spec, A_entries={(1, 1): 0.8, (4, 1): 0.3, (4, 4): 0.5},
        tau2=np.array([0.05, 0.05]), beta_overall=np.arange(6, dtype=float) / 10,
        n_days=2, n_both=4, n_only1=2, n_only2=2, grid=small_grid(),
    )
    ds, latent = simulate(truth, seed=13)
    # beta_local must equal A w for every day and site.
    recomposed = np.einsum("mk,tkn->tmn", latent.coreg.A, latent.w)
    assert np.max(np.abs(recomposed - latent.beta_local)) < 1e-12
    assert latent.site_ids == ds.site_ids()
    # The stored mean surface reproduces the observation means.
    sidx = {s: i for i, s in enumerate(latent.site_ids)}
    for o in ds.observations:
        mu = latent.mean[o.t, o.pollutant - 1, sidx[o.site_id]]
        y = ds.transformed_value(o)
        # Observation = mean + nugget noise; just check broad agreement.
        assert abs(y - mu) < 6 * np.sqrt(truth.tau2[o.pollutant - 1]) + 1e-9
