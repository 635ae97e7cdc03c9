import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from downscaler.data import (
    AlignedDataset,
    CellExtent,
    Grid,
    GridOutput,
    Observation,
    Site,
    Transform,
    TransformSpec,
    assign_cell,
    back_transform,
    build_dataset,
    ingest_grid_outputs,
    ingest_monitoring,
    partition_day,
    split_train_validation,
    transform,
    write_grid_outputs_csv,
    write_monitoring_csv,
)
from downscaler.errors import (
    DomainError,
    DuplicateRecord,
    MissingGridOutput,
    OutOfDomain,
    ParseError,
)


def regular_grid(n_x=10, n_y=10, cell_km=10.0):
    return Grid(origin_lon=-85.0, origin_lat=35.0, cell_size_km=cell_km, n_x=n_x, n_y=n_y)


# ------------------------------------------------------------- assign_cell


def test_assign_cell_centroid_lands_in_its_cell():
    grid = regular_grid()
    for cid in ["c0_0", "c3_7", "c9_9"]:
        lon, lat = grid.cell_centroid(cid)
        assert grid.assign(lon, lat) == cid


def test_boundary_site_belongs_to_lower_cell():
    # Explicit cells make the shared edge exact in degrees.
    cells = [
        CellExtent("left", 0.0, 1.0, 0.0, 1.0),
        CellExtent("right", 1.0, 2.0, 0.0, 1.0),
    ]
    grid = Grid(projection="explicit-cells", cells=cells)
    assert grid.assign(1.0, 0.5) == "right"  # lon 1.0 is right's half-open lower edge
    assert grid.assign(0.0, 0.0) == "left"
    # Regular grid: the origin is cell (0,0)'s lower corner.
    reg = regular_grid()
    assert reg.assign(reg.origin_lon, reg.origin_lat) == "c0_0"


def test_assign_cell_outside_domain_raises():
    grid = regular_grid()
    with pytest.raises(OutOfDomain):
        grid.assign(grid.origin_lon - 1.0, grid.origin_lat)


def test_assign_cell_matches_exhaustive_rectangle_scan():
    grid = regular_grid()
    rng = np.random.default_rng(42)
    extents = [grid.cell_extent(c) for c in grid.cell_ids()]

    def oracle(lon, lat):
        hits = [e.id for e in extents if e.contains(lon, lat)]
        assert len(hits) == 1
        return hits[0]

    lo = grid.cell_extent("c0_0")
    hi = grid.cell_extent("c9_9")
    for _ in range(100):
        lon = rng.uniform(lo.lon_min, hi.lon_max * 0.999999)
        lat = rng.uniform(lo.lat_min, hi.lat_max * 0.999999)
        site = Site("s", lon, lat)
        assert assign_cell(site, grid) == oracle(lon, lat)


def test_explicit_grid_rejects_overlap_and_duplicate_ids():
    with pytest.raises(ValueError):
        Grid(
            projection="explicit-cells",
            cells=[CellExtent("a", 0, 2, 0, 1), CellExtent("b", 1, 3, 0, 1)],
        )
    with pytest.raises(ValueError):
        Grid(
            projection="explicit-cells",
            cells=[CellExtent("a", 0, 1, 0, 1), CellExtent("a", 1, 2, 0, 1)],
        )


def test_grid_dict_round_trip():
    grid = regular_grid()
    again = Grid.from_dict(grid.to_dict())
    assert again.to_dict() == grid.to_dict()
    cells = [CellExtent("a", 0, 1, 0, 1), CellExtent("b", 1, 2, 0, 1)]
    g2 = Grid(projection="explicit-cells", cells=cells)
    assert Grid.from_dict(g2.to_dict()).to_dict() == g2.to_dict()


# -------------------------------------------------------------- transforms


def test_sqrt_transform_perfect_square():
    assert transform(49.0, Transform.SQRT) == 7.0
    assert back_transform(7.0, Transform.SQRT) == 49.0


def test_log_transform_identity_point():
    assert transform(1.0, Transform.LOG) == 0.0
    assert back_transform(0.0, Transform.LOG) == 1.0


def test_transform_domain_errors():
    with pytest.raises(DomainError):
        transform(-1.0, Transform.SQRT)
    with pytest.raises(DomainError):
        transform(0.0, Transform.LOG)


def test_round_trip_on_random_positives():
    rng = np.random.default_rng(7)
    x = rng.uniform(1e-6, 1e6, size=1000)
    for kind in (Transform.SQRT, Transform.LOG, Transform.IDENTITY):
        back = back_transform(transform(x, kind), kind)
        rel = np.abs(back - x) / x
        assert rel.max() < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-8, max_value=1e8), st.sampled_from(list(Transform)))
def test_round_trip_property(x, kind):
    back = back_transform(transform(x, kind), kind)
    assert abs(back - x) <= 1e-12 * abs(x)


# ------------------------------------------------------------- day partition


def _dataset_from_roles(n_both, n_only1, n_only2, n_days=1, period2=1):
    grid = regular_grid(n_x=30, n_y=30, cell_km=40.0)
    rng = np.random.default_rng(3)
    sites, obs, outs = [], [], []
    n = n_both + n_only1 + n_only2
    lo = grid.cell_extent("c0_0")
    hi = grid.cell_extent("c29_29")
    cells_used = set()
    for idx in range(n):
        lon = rng.uniform(lo.lon_min, hi.lon_max * 0.99999)
        lat = rng.uniform(lo.lat_min, hi.lat_max * 0.99999)
        site = Site(f"s{idx:03d}", lon, lat)
        sites.append(site)
        cells_used.add(grid.assign(lon, lat))
        for t in range(n_days):
            if idx < n_both or n_both + n_only1 <= idx < n:
                if (t % period2) == 0:
                    obs.append(Observation(site.id, t, 2, rng.uniform(1, 5)))
            if idx < n_both + n_only1:
                obs.append(Observation(site.id, t, 1, rng.uniform(1, 5)))
    for c in cells_used:
        for t in range(n_days):
            outs.append(GridOutput(c, t, 1, 50.0))
            outs.append(GridOutput(c, t, 2, 10.0))
    spec = TransformSpec((Transform.SQRT, Transform.LOG))
    return build_dataset(sites, grid, obs, outs, spec)


def test_partition_all_both_gives_empty_only_sets():
    ds = _dataset_from_roles(8, 0, 0)
    part = partition_day(ds, 0)
    assert len(part.both) == 8
    assert part.only_1 == frozenset() and part.only_2 == frozenset()


def test_partition_matches_study_design_counts():
    # Training-network design: 52 ozone-only, 39 PM-only, 70 both.
    ds = _dataset_from_roles(70, 52, 39)
    part = partition_day(ds, 0)
    assert (len(part.both), len(part.only_1), len(part.only_2)) == (70, 52, 39)


def test_partition_every_third_day_sampling_vs_record_scan():
    ds = _dataset_from_roles(6, 3, 4, n_days=6, period2=3)
    for t in ds.days:
        part = partition_day(ds, t)
        # Brute-force membership scan straight over the records.
        seen = {}
        for o in ds.observations:
            if o.t == t:
                seen.setdefault(o.site_id, set()).add(o.pollutant)
        both = {s for s, v in seen.items() if v == {1, 2}}
        only1 = {s for s, v in seen.items() if v == {1}}
        only2 = {s for s, v in seen.items() if v == {2}}
        assert part.both == both
        assert part.only_1 == only1
        assert part.only_2 == only2
        # Off-cycle days push both-sites into only_1.
        if t % 3 != 0:
            assert part.only_2 == frozenset() and len(part.only_1) == 9
        assert set.union(set(part.both), part.only_1, part.only_2) == set(seen)


def test_partition_disjoint_and_covering():
    ds = _dataset_from_roles(5, 4, 3, n_days=4, period2=2)
    for t in ds.days:
        part = partition_day(ds, t)
        reporting = {o.site_id for o in ds.observations if o.t == t}
        assert len(part.both) + len(part.only_1) + len(part.only_2) == len(reporting)
        assert part.both | part.only_1 | part.only_2 == reporting
        assert not (part.both & part.only_1 or part.both & part.only_2 or part.only_1 & part.only_2)


def test_day_with_no_observations_yields_empty_sets():
    ds = _dataset_from_roles(4, 0, 0)
    part = partition_day(ds, 99)
    assert part.both == frozenset() and part.only_1 == frozenset() and part.only_2 == frozenset()


# ------------------------------------------------------------------ ingest


def test_ingest_empty_file_with_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("site_id,lon,lat,t,pollutant,value_raw\n")
    sites, obs = ingest_monitoring(path)
    assert sites == [] and obs == []


def test_ingest_duplicate_record_raises(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(
        "site_id,lon,lat,t,pollutant,value_raw\n"
        "a,-80,35,0,1,3.0\n"
        "a,-80,35,0,1,4.0\n"
    )
    with pytest.raises(DuplicateRecord):
        ingest_monitoring(path)


def test_ingest_parse_error_carries_line_number(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(
        "site_id,lon,lat,t,pollutant,value_raw\n"
        "a,-80,35,0,1,3.0\n"
        "b,-80,not_a_number,0,1,3.0\n"
    )
    with pytest.raises(ParseError) as exc:
        ingest_monitoring(path)
    assert "line 3" in str(exc.value)


def test_ingest_grid_outputs_and_round_trip(tmp_path):
    ds = _dataset_from_roles(4, 2, 1, n_days=2)
    mpath, gpath = tmp_path / "mon.csv", tmp_path / "grid.csv"
    write_monitoring_csv(mpath, ds)
    write_grid_outputs_csv(gpath, ds)
    sites, obs = ingest_monitoring(mpath)
    outs = ingest_grid_outputs(gpath)
    again = build_dataset(sites, ds.grid, obs, outs, ds.transform)
    assert [s.id for s in again.sites] == [s.id for s in ds.sites]
    assert len(again.observations) == len(ds.observations)
    assert again.grid_outputs == ds.grid_outputs
    for a, b in zip(again.observations, ds.observations):
        assert a == b


def test_missing_grid_output_is_an_error():
    grid = regular_grid()
    lon, lat = grid.cell_centroid("c0_0")
    sites = [Site("a", lon, lat)]
    obs = [Observation("a", 0, 1, 2.0)]
    outs = [GridOutput("c0_0", 0, 1, 5.0)]  # pollutant 2 output missing
    spec = TransformSpec((Transform.IDENTITY, Transform.IDENTITY))
    with pytest.raises(MissingGridOutput):
        build_dataset(sites, grid, obs, outs, spec)


# ------------------------------------------------------------------- split


def test_split_study_scale_counts_and_disjointness():
    ds = _dataset_from_roles(105, 71, 50)  # 226 sites as in the case study
    train, validation = split_train_validation(ds, 161 / 226, seed=4)
    assert len(train.sites) == 161 and len(validation.sites) == 65
    assert set(train.site_ids()).isdisjoint(validation.site_ids())
    assert set(train.site_ids()) | set(validation.site_ids()) == set(ds.site_ids())


def test_split_deterministic_across_runs():
    ds = _dataset_from_roles(20, 5, 5)
    a1, b1 = split_train_validation(ds, 0.7, seed=11)
    a2, b2 = split_train_validation(ds, 0.7, seed=11)
    assert a1.site_ids() == a2.site_ids() and b1.site_ids() == b2.site_ids()
    a3, _ = split_train_validation(ds, 0.7, seed=12)
    assert a1.site_ids() != a3.site_ids()  # seed actually matters
