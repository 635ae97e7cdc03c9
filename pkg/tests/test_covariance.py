import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from downscaler.covariance import (
    Coregionalization,
    DecayParams,
    VariantPattern,
    chol_with_ridge,
    chordal_km,
    closed_form_cov,
    coef_index,
    design_vector,
    distance_matrix,
    exp_cov,
    great_circle_km,
    induced_cov_from_matrix,
    induced_joint_cov,
    latent_cov_matrix,
    variant_mask,
)
from downscaler.data import EARTH_RADIUS_KM, Site
from downscaler.errors import NotPositiveDefinite, UnsupportedVariant

APPENDIX_VARIANTS = (
    VariantPattern.SHARED_INTERCEPT,
    VariantPattern.SHARED_INTERCEPT_DIAG_SLOPES,
    VariantPattern.WITHIN_POLLUTANT_CORRELATED,
)


def random_coreg(variant, rng, p=2):
    mask = variant_mask(variant, p)
    entries = {}
    for r, c in zip(*np.nonzero(mask)):
        val = rng.uniform(0.2, 2.0) if r == c else rng.uniform(-1.5, 1.5)
        entries[(r + 1, c + 1)] = val
    return Coregionalization.from_variant(p, variant, entries)


# --------------------------------------------------------------- distances


def test_zero_distance_for_identical_points():
    a = Site("a", -80.0, 35.0)
    assert great_circle_km(a, a) == 0.0
    assert chordal_km(a, a) == 0.0


def test_antipodal_great_circle():
    a = Site("a", 0.0, 0.0)
    b = Site("b", 180.0, 0.0)
    assert great_circle_km(a, b) == pytest.approx(math.pi * EARTH_RADIUS_KM, rel=1e-12)
    # 20015.1 km with R = 6371.0
    assert great_circle_km(a, b) == pytest.approx(20015.086, abs=0.01)


def test_one_degree_latitude():
    a = Site("a", -80.0, 35.0)
    b = Site("b", -80.0, 36.0)
    expected = 2.0 * math.pi * EARTH_RADIUS_KM / 360.0
    assert great_circle_km(a, b) == pytest.approx(expected, rel=1e-10)
    assert expected == pytest.approx(111.19, abs=0.01)


def test_chordal_never_exceeds_great_circle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = Site("a", rng.uniform(-180, 180), rng.uniform(-90, 90))
        b = Site("b", rng.uniform(-180, 180), rng.uniform(-90, 90))
        gc, ch = great_circle_km(a, b), chordal_km(a, b)
        assert ch <= gc + 1e-9
        assert gc == pytest.approx(great_circle_km(b, a))  # symmetry


def test_distance_matrix_agrees_with_pairwise():
    rng = np.random.default_rng(1)
    sites = [Site(f"s{i}", rng.uniform(-90, -70), rng.uniform(30, 40)) for i in range(6)]
    d = distance_matrix(sites)
    for i in range(6):
        for j in range(6):
            assert d[i, j] == pytest.approx(great_circle_km(sites[i], sites[j]), abs=1e-9)
    dc = distance_matrix(sites, metric="chordal")
    assert np.all(dc <= d + 1e-9)


# ------------------------------------------------------------------ kernel


def test_exp_cov_at_zero_is_one():
    assert exp_cov(0.0, 0.37) == 1.0


def test_exp_cov_effective_range_values():
    # The two fixed decay medians against their quoted effective ranges.
    assert exp_cov(1875.0, 0.0016) == pytest.approx(math.exp(-3.0), rel=1e-12)
    assert exp_cov(2400.0, 0.00125) == pytest.approx(math.exp(-3.0), rel=1e-12)
    assert math.exp(-3.0) == pytest.approx(0.0498, abs=5e-5)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(min_value=1e-4, max_value=1e-2),
    st.floats(min_value=0.0, max_value=1500.0),
    st.floats(min_value=1.0, max_value=1500.0),
)
def test_exp_cov_strictly_decreasing(phi, d1, gap):
    # Ranges chosen so the difference stays resolvable in float64.
    assert exp_cov(d1, phi) > exp_cov(d1 + gap, phi)


def test_latent_cov_single_site():
    assert np.array_equal(latent_cov_matrix([Site("a", -80, 35)], 0.01), [[1.0]])


def test_latent_cov_coincident_sites_need_ridge():
    sites = [Site("a", -80, 35), Site("b", -80, 35)]
    m = latent_cov_matrix(sites, 0.01)
    assert np.array_equal(m, np.ones((2, 2)))
    with pytest.raises(np.linalg.LinAlgError):
        np.linalg.cholesky(m)  # exactly singular without the ridge
    L = chol_with_ridge(m)
    assert np.all(np.isfinite(L))


def test_latent_cov_elementwise_oracle():
    rng = np.random.default_rng(5)
    sites = [Site(f"s{i}", rng.uniform(-85, -75), rng.uniform(33, 38)) for i in range(5)]
    phi = 0.004
    m = latent_cov_matrix(sites, phi)
    brute = np.empty((5, 5))
    for i in range(5):
        for j in range(5):
            brute[i, j] = math.exp(-phi * great_circle_km(sites[i], sites[j]))
    assert np.max(np.abs(m - brute)) < 1e-14


def test_not_positive_definite_surfaces():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
    with pytest.raises(NotPositiveDefinite):
        chol_with_ridge(bad)


# ------------------------------------------------------------ variant masks


def test_variant_masks_match_documented_entry_sets():
    def entry_set(variant):
        mask = variant_mask(variant, 2)
        return {(r + 1, c + 1) for r, c in zip(*np.nonzero(mask))}

    assert entry_set(VariantPattern.INDEPENDENT_POLLUTANTS) == {
        (1, 1), (2, 1), (2, 2), (4, 4), (6, 4), (6, 6)}
    assert entry_set(VariantPattern.SHARED_INTERCEPT) == {(1, 1), (4, 1), (4, 4)}
    assert entry_set(VariantPattern.SHARED_INTERCEPT_DIAG_SLOPES) == {
        (1, 1), (2, 2), (3, 3), (4, 1), (4, 4), (5, 5), (6, 6)}
    assert entry_set(VariantPattern.WITHIN_POLLUTANT_CORRELATED) == {
        (1, 1), (2, 1), (2, 2), (3, 1), (3, 3), (4, 1), (4, 4),
        (5, 2), (5, 4), (5, 5), (6, 3), (6, 4), (6, 6)}
    full = variant_mask(VariantPattern.FULL, 2)
    assert full.sum() == 21 and np.all(full == np.tril(np.ones((6, 6), bool)))


def test_coregionalization_rejects_masked_entries():
    with pytest.raises(ValueError):
        Coregionalization.from_variant(
            2, VariantPattern.SHARED_INTERCEPT, {(1, 1): 1.0, (2, 1): 0.5}
        )
    with pytest.raises(ValueError):
        Coregionalization.from_variant(
            2, VariantPattern.SHARED_INTERCEPT, {(1, 1): -1.0, (4, 1): 0.5, (4, 4): 1.0}
        )


def test_active_processes():
    coreg = Coregionalization.from_variant(
        2, VariantPattern.SHARED_INTERCEPT, {(1, 1): 1.0, (4, 1): 0.5, (4, 4): 0.8}
    )
    assert list(coreg.active_processes()) == [0, 3]
    T = coreg.T
    assert np.allclose(T, T.T)
    assert T[0, 0] == pytest.approx(1.0)
    assert T[3, 0] == pytest.approx(0.5)
    assert T[3, 3] == pytest.approx(0.5**2 + 0.8**2)


# --------------------------------------------------------- induced covariance


def _phi6(rng):
    return DecayParams(rng.uniform(5e-4, 5e-3, size=6))


def test_induced_cov_diagonal_loadings_with_zero_covariates():
    # Diagonal A, x(B) = x(B') = 0, dist 0: only intercept loadings survive.
    entries = {(k, k): v for k, v in zip(range(1, 7), [1.5, 2.0, 0.7, 1.1, 0.9, 0.4])}
    coreg = Coregionalization.from_variant(2, VariantPattern.FULL, entries)
    phi = DecayParams(np.full(6, 1e-3))
    nuggets = np.array([0.3, 0.6])
    cov = induced_joint_cov(coreg, phi, (0.0, 0.0), (0.0, 0.0), 0.0, nuggets, same_point=True)
    assert cov[0, 0] == pytest.approx(1.5**2 + 0.3, abs=1e-14)
    assert cov[1, 1] == pytest.approx(1.1**2 + 0.6, abs=1e-14)
    assert cov[0, 1] == pytest.approx(0.0, abs=1e-14)


def test_shared_intercept_cross_covariance_formula():
    # Off-diagonal must equal A11*A41*exp(-phi1*d) for the three-entry variant.
    rng = np.random.default_rng(9)
    coreg = random_coreg(VariantPattern.SHARED_INTERCEPT, rng)
    phi = _phi6(rng)
    x_b, x_bp = rng.normal(size=2), rng.normal(size=2)
    dist = 321.0
    cov = induced_joint_cov(coreg, phi, x_b, x_bp, dist)
    expected = coreg.A[0, 0] * coreg.A[3, 0] * math.exp(-phi.phi[0] * dist)
    assert cov[0, 1] == pytest.approx(expected, abs=1e-14)
    assert cov[1, 0] == pytest.approx(expected, abs=1e-14)


def test_closed_form_shared_intercept_at_zero_distance():
    rng = np.random.default_rng(11)
    coreg = random_coreg(VariantPattern.SHARED_INTERCEPT, rng)
    phi = _phi6(rng)
    a11, a41, a44 = coreg.A[0, 0], coreg.A[3, 0], coreg.A[3, 3]
    tau = (0.25, 0.49)
    c11, c22, c12 = closed_form_cov(
        VariantPattern.SHARED_INTERCEPT, coreg, phi, (1.0, 2.0), (1.0, 2.0), 0.0, tau, True
    )
    assert c11 == pytest.approx(a11**2 + tau[0], abs=1e-14)
    assert c22 == pytest.approx(a41**2 + a44**2 + tau[1], abs=1e-14)
    assert c12 == pytest.approx(a11 * a41, abs=1e-14)


def test_closed_form_vanishes_at_large_distance():
    rng = np.random.default_rng(13)
    for variant in APPENDIX_VARIANTS:
        coreg = random_coreg(variant, rng)
        phi = _phi6(rng)
        vals = closed_form_cov(
            variant, coreg, phi, (1.0, -1.0), (0.5, 2.0), 1e7, (0.2, 0.3), False
        )
        assert np.max(np.abs(vals)) < 1e-12


def test_closed_form_unsupported_variant():
    rng = np.random.default_rng(15)
    coreg = random_coreg(VariantPattern.INDEPENDENT_POLLUTANTS, rng)
    with pytest.raises(UnsupportedVariant):
        closed_form_cov(
            VariantPattern.INDEPENDENT_POLLUTANTS, coreg, _phi6(rng),
            (0.0, 0.0), (0.0, 0.0), 1.0, (0.1, 0.1), False,
        )


@pytest.mark.parametrize("variant", APPENDIX_VARIANTS)
def test_closed_form_equals_matrix_product(variant):
    # The appendix expansions are algebra for the sandwich product; random
    # admissible parameters must agree to 1e-12 (including nugget handling).
    rng = np.random.default_rng(17)
    for _ in range(200):
        coreg = random_coreg(variant, rng)
        phi = _phi6(rng)
        x_b, x_bp = rng.normal(size=2), rng.normal(size=2)
        dist = rng.uniform(0.0, 2000.0)
        same = bool(rng.integers(2)) and dist == 0.0
        tau = rng.uniform(0.05, 1.0, size=2)
        c11, c22, c12 = closed_form_cov(variant, coreg, phi, x_b, x_bp, dist, tau, same)
        cov = induced_joint_cov(coreg, phi, x_b, x_bp, dist, tau, same)
        assert abs(c11 - cov[0, 0]) < 1e-12
        assert abs(c22 - cov[1, 1]) < 1e-12
        assert abs(c12 - cov[0, 1]) < 1e-12


def test_permutation_of_coefficients_leaves_y_covariance_unchanged():
    # Permuting the stacked coefficient vector (rows of A) together with the
    # matching design rows is a pure relabeling of the same model.
    rng = np.random.default_rng(19)
    for _ in range(20):
        A = np.tril(rng.normal(size=(6, 6)))
        phi = rng.uniform(5e-4, 5e-3, size=6)
        x_b, x_bp = rng.normal(size=2), rng.normal(size=2)
        dist = rng.uniform(0, 1500)
        perm = rng.permutation(6)
        P = np.eye(6)[perm]
        base = induced_cov_from_matrix(A, phi, x_b, x_bp, dist)

        h_b = design_vector(x_b)
        h_bp = design_vector(x_bp)
        H_b = np.kron(np.eye(2), h_b[:, None])
        H_bp = np.kron(np.eye(2), h_bp[:, None])
        sigma_w = np.diag(np.exp(-phi * dist))
        permuted = (P @ H_b).T @ (P @ A) @ sigma_w @ (P @ A).T @ (P @ H_bp)
        assert np.max(np.abs(base - permuted)) < 1e-12


def test_joint_covariance_over_site_set_is_psd():
    # Assemble the full 2n x 2n covariance from pairwise blocks; it must be
    # symmetric and factorizable after the ridge, for every variant.
    rng = np.random.default_rng(23)
    sites = [Site(f"s{i}", rng.uniform(-85, -80), rng.uniform(33, 36)) for i in range(7)]
    d = distance_matrix(sites)
    x = rng.normal(size=(7, 2))
    for variant in list(VariantPattern):
        if variant is VariantPattern.WITHIN_POLLUTANT_CORRELATED:
            pass
        coreg = random_coreg(variant, rng)
        phi = _phi6(rng)
        tau = rng.uniform(0.05, 0.5, size=2)
        n = len(sites)
        joint = np.zeros((2 * n, 2 * n))
        for i in range(n):
            for j in range(n):
                blk = induced_joint_cov(
                    coreg, phi, x[i], x[j], d[i, j], tau, same_point=(i == j)
                )
                joint[2 * i : 2 * i + 2, 2 * j : 2 * j + 2] = blk
        assert np.max(np.abs(joint - joint.T)) < 1e-10
        chol_with_ridge(joint)  # must not raise


def test_coef_index_layout():
    assert [coef_index(0, j, 2) for j in range(3)] == [0, 1, 2]
    assert [coef_index(1, j, 2) for j in range(3)] == [3, 4, 5]
    assert coef_index(0, 1, 1) == 1
