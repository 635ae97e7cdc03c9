"""Data model: sites, grids, observations, transforms, and the aligned dataset.

Monitoring observations are point-referenced; numerical-model output lives on
grid cells. Alignment associates every site with the cell containing it (half
open cell extents, so boundary points belong to the lower cell). Raw values
are stored once; all model internals work on the transformed scale, applied
lazily through :class:`TransformSpec`.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainError,
    DuplicateRecord,
    MissingGridOutput,
    OutOfDomain,
    ParseError,
)
from .seeding import substream

EARTH_RADIUS_KM = 6371.0
KM_PER_DEGREE = 2.0 * math.pi * EARTH_RADIUS_KM / 360.0


@dataclass(frozen=True)
class Site:
    """A monitoring location."""

    id: str
    lon: float
    lat: float

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"site {self.id}: lon {self.lon} outside [-180, 180]")
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"site {self.id}: lat {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class CellExtent:
    id: str
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def contains(self, lon: float, lat: float) -> bool:
        # Half-open on both axes: [min, max).
        return (self.lon_min <= lon < self.lon_max) and (self.lat_min <= lat < self.lat_max)


class Grid:
    """Grid-cell geometry, either a regular km-spaced grid or explicit extents.

    The regular form uses an equirectangular projection anchored at the grid
    origin: km east = (lon - origin_lon) * KM_PER_DEGREE * cos(origin_lat),
    km north = (lat - origin_lat) * KM_PER_DEGREE. Cell (ix, iy) covers the
    half-open square [ix*cs, (ix+1)*cs) x [iy*cs, (iy+1)*cs) in km and is
    named ``c{ix}_{iy}``.
    """

    def __init__(
        self,
        projection: str = "equirectangular-km",
        origin_lon: float = 0.0,
        origin_lat: float = 0.0,
        cell_size_km: float = 12.0,
        n_x: int = 1,
        n_y: int = 1,
        cells: list[CellExtent] | None = None,
    ):
        if projection not in ("equirectangular-km", "explicit-cells"):
            raise ValueError(f"unknown projection {projection!r}")
        self.projection = projection
        if projection == "equirectangular-km":
            if cell_size_km <= 0 or n_x < 1 or n_y < 1:
                raise ValueError("regular grid needs cell_size_km > 0 and n_x, n_y >= 1")
            self.origin_lon = float(origin_lon)
            self.origin_lat = float(origin_lat)
            self.cell_size_km = float(cell_size_km)
            self.n_x = int(n_x)
            self.n_y = int(n_y)
            self._cells = None
            self._cos_lat = math.cos(math.radians(self.origin_lat))
        else:
            if not cells:
                raise ValueError("explicit-cells grid needs a non-empty cell list")
            ids = [c.id for c in cells]
            if len(set(ids)) != len(ids):
                raise ValueError("explicit cell ids must be unique")
            if len(cells) <= 2000:
                for i, a in enumerate(cells):
                    for b in cells[i + 1 :]:
                        if (
                            a.lon_min < b.lon_max
                            and b.lon_min < a.lon_max
                            and a.lat_min < b.lat_max
                            and b.lat_min < a.lat_max
                        ):
                            raise ValueError(f"cells {a.id} and {b.id} overlap")
            self._cells = list(cells)
            self._by_id = {c.id: c for c in cells}

    def cell_ids(self) -> list[str]:
        if self._cells is not None:
            return [c.id for c in self._cells]
        return [f"c{ix}_{iy}" for iy in range(self.n_y) for ix in range(self.n_x)]

    def _km_xy(self, lon: float, lat: float) -> tuple[float, float]:
        x = (lon - self.origin_lon) * KM_PER_DEGREE * self._cos_lat
        y = (lat - self.origin_lat) * KM_PER_DEGREE
        return x, y

    def assign(self, lon: float, lat: float) -> str:
        """Cell id whose half-open extent contains (lon, lat)."""
        if self._cells is not None:
            for c in self._cells:
                if c.contains(lon, lat):
                    return c.id
            raise OutOfDomain(f"point ({lon}, {lat}) lies outside every cell")
        x, y = self._km_xy(lon, lat)
        ix = math.floor(x / self.cell_size_km)
        iy = math.floor(y / self.cell_size_km)
        if not (0 <= ix < self.n_x and 0 <= iy < self.n_y):
            raise OutOfDomain(f"point ({lon}, {lat}) lies outside the grid")
        return f"c{ix}_{iy}"

    def cell_extent(self, cell_id: str) -> CellExtent:
        """Extent of a cell in degrees (half-open on both axes)."""
        if self._cells is not None:
            try:
                return self._by_id[cell_id]
            except KeyError:
                raise OutOfDomain(f"unknown cell id {cell_id!r}") from None
        ix, iy = self._parse_regular_id(cell_id)
        lon0 = self.origin_lon + ix * self.cell_size_km / (KM_PER_DEGREE * self._cos_lat)
        lon1 = self.origin_lon + (ix + 1) * self.cell_size_km / (KM_PER_DEGREE * self._cos_lat)
        lat0 = self.origin_lat + iy * self.cell_size_km / KM_PER_DEGREE
        lat1 = self.origin_lat + (iy + 1) * self.cell_size_km / KM_PER_DEGREE
        return CellExtent(cell_id, lon0, lon1, lat0, lat1)

    def cell_centroid(self, cell_id: str) -> tuple[float, float]:
        e = self.cell_extent(cell_id)
        return (0.5 * (e.lon_min + e.lon_max), 0.5 * (e.lat_min + e.lat_max))

    def _parse_regular_id(self, cell_id: str) -> tuple[int, int]:
        try:
            body = cell_id.lstrip("c")
            ix_s, iy_s = body.split("_")
            ix, iy = int(ix_s), int(iy_s)
        except (ValueError, AttributeError):
            raise OutOfDomain(f"unknown cell id {cell_id!r}") from None
        if not (0 <= ix < self.n_x and 0 <= iy < self.n_y):
            raise OutOfDomain(f"unknown cell id {cell_id!r}")
        return ix, iy

    def to_dict(self) -> dict:
        if self._cells is not None:
            return {
                "projection": "explicit-cells",
                "cells": [
                    {
                        "id": c.id,
                        "lon_min": c.lon_min,
                        "lon_max": c.lon_max,
                        "lat_min": c.lat_min,
                        "lat_max": c.lat_max,
                    }
                    for c in self._cells
                ],
            }
        return {
            "projection": "equirectangular-km",
            "origin_lon": self.origin_lon,
            "origin_lat": self.origin_lat,
            "cell_size_km": self.cell_size_km,
            "n_x": self.n_x,
            "n_y": self.n_y,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        proj = d.get("projection", "equirectangular-km")
        if proj == "explicit-cells":
            cells = [
                CellExtent(
                    str(c["id"]),
                    float(c["lon_min"]),
                    float(c["lon_max"]),
                    float(c["lat_min"]),
                    float(c["lat_max"]),
                )
                for c in d["cells"]
            ]
            return cls(projection=proj, cells=cells)
        return cls(
            projection=proj,
            origin_lon=float(d["origin_lon"]),
            origin_lat=float(d["origin_lat"]),
            cell_size_km=float(d["cell_size_km"]),
            n_x=int(d["n_x"]),
            n_y=int(d["n_y"]),
        )


def assign_cell(site: Site, grid: Grid) -> str:
    """Id of the unique cell whose half-open extent contains the site."""
    return grid.assign(site.lon, site.lat)


class Transform(enum.Enum):
    SQRT = "sqrt"
    LOG = "log"
    IDENTITY = "identity"


@dataclass(frozen=True)
class TransformSpec:
    """Per-pollutant raw-to-model-scale transform."""

    per_pollutant: tuple[Transform, ...]

    @classmethod
    def from_names(cls, names) -> "TransformSpec":
        return cls(tuple(Transform(str(n).lower()) for n in names))

    @property
    def p(self) -> int:
        return len(self.per_pollutant)

    def __getitem__(self, pollutant: int) -> Transform:
        """Transform for a 1-based pollutant index."""
        return self.per_pollutant[pollutant - 1]

    def names(self) -> list[str]:
        return [t.value for t in self.per_pollutant]


def transform(value, kind: Transform):
    """Raw scale -> model scale. Accepts scalars or arrays."""
    arr = np.asarray(value, dtype=float)
    if kind is Transform.SQRT:
        if np.any(arr < 0):
            raise DomainError("sqrt transform requires raw values >= 0")
        out = np.sqrt(arr)
    elif kind is Transform.LOG:
        if np.any(arr <= 0):
            raise DomainError("log transform requires raw values > 0")
        out = np.log(arr)
    else:
        out = arr
    return out if out.ndim else float(out)


def back_transform(value, kind: Transform):
    """Model scale -> raw scale. Inverse of :func:`transform`."""
    arr = np.asarray(value, dtype=float)
    if kind is Transform.SQRT:
        out = np.square(arr)
    elif kind is Transform.LOG:
        out = np.exp(arr)
    else:
        out = arr
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Observation:
    site_id: str
    t: int
    pollutant: int  # 1-based
    value_raw: float


@dataclass(frozen=True)
class GridOutput:
    cell_id: str
    t: int
    pollutant: int  # 1-based
    value_raw: float


@dataclass(frozen=True)
class DayPartition:
    """Sites reporting on day t, split into three disjoint sets (p <= 2)."""

    t: int
    both: frozenset[str]
    only_1: frozenset[str]
    only_2: frozenset[str]


@dataclass
class AlignedDataset:
    """Immutable bundle of observations, model output, and their alignment.

    Safe to share read-only across workers; nothing mutates it after
    :func:`build_dataset` returns.
    """

    sites: list[Site]
    grid: Grid
    observations: list[Observation]
    grid_outputs: dict  # (cell_id, t, pollutant) -> raw value
    site_to_cell: dict
    partitions: dict  # t -> DayPartition (built when p <= 2)
    transform: TransformSpec
    days: list[int] = field(default_factory=list)

    @property
    def p(self) -> int:
        return self.transform.p

    def site_ids(self) -> list[str]:
        return [s.id for s in self.sites]

    def grid_output_value(self, cell_id: str, t: int, pollutant: int) -> float:
        try:
            return self.grid_outputs[(cell_id, t, pollutant)]
        except KeyError:
            raise MissingGridOutput(
                f"no model output for cell {cell_id!r}, day {t}, pollutant {pollutant}"
            ) from None

    def covariates(self, cell_id: str, t: int) -> np.ndarray:
        """Transformed model-output vector (x_1(B,t), ..., x_p(B,t))."""
        return np.array(
            [
                transform(self.grid_output_value(cell_id, t, i), self.transform[i])
                for i in range(1, self.p + 1)
            ]
        )

    def transformed_value(self, obs: Observation) -> float:
        return transform(obs.value_raw, self.transform[obs.pollutant])


def partition_day(dataset: AlignedDataset, t: int) -> DayPartition:
    """Partition the sites reporting on day t by pollutant availability.

    Only defined for p <= 2; with p = 1 the only_2 set is always empty.
    A day with no observations yields three empty sets.
    """
    if dataset.p > 2:
        raise ValueError("DayPartition is defined for p <= 2")
    seen: dict[str, set[int]] = {}
    for o in dataset.observations:
        if o.t == t:
            seen.setdefault(o.site_id, set()).add(o.pollutant)
    both, only_1, only_2 = set(), set(), set()
    for sid, polls in seen.items():
        if dataset.p == 2 and polls == {1, 2}:
            both.add(sid)
        elif polls == {1}:
            both.add(sid) if dataset.p == 1 else only_1.add(sid)
        elif polls == {2}:
            only_2.add(sid)
        else:
            both.add(sid)
    return DayPartition(t, frozenset(both), frozenset(only_1), frozenset(only_2))


def build_dataset(
    sites,
    grid: Grid,
    observations,
    grid_outputs,
    transform_spec: TransformSpec,
) -> AlignedDataset:
    """Validate and align the pieces into an AlignedDataset.

    Checks: unique site ids, unique record keys, finite values, every
    observed site inside the grid, and complete model output for every
    (cell-of-an-observed-site, observed day, pollutant) triple.
    """
    sites = sorted(sites, key=lambda s: s.id)
    ids = [s.id for s in sites]
    if len(set(ids)) != len(ids):
        raise DuplicateRecord("site ids must be unique within a dataset")

    p = transform_spec.p
    site_to_cell = {s.id: assign_cell(s, grid) for s in sites}

    obs_map = {}
    for o in observations:
        if o.site_id not in site_to_cell:
            raise ParseError(f"observation references unknown site {o.site_id!r}")
        if not (1 <= o.pollutant <= p):
            raise ParseError(f"pollutant index {o.pollutant} outside 1..{p}")
        if o.t < 0:
            raise ParseError(f"negative day index {o.t}")
        if not math.isfinite(o.value_raw):
            raise ParseError(f"non-finite observation at {o.site_id!r} day {o.t}")
        key = (o.site_id, o.t, o.pollutant)
        if key in obs_map:
            raise DuplicateRecord(f"duplicate observation for {key}")
        obs_map[key] = o

    out_map = {}
    for g in grid_outputs:
        key = (g.cell_id, g.t, g.pollutant)
        if key in out_map:
            raise DuplicateRecord(f"duplicate grid output for {key}")
        if not math.isfinite(g.value_raw):
            raise ParseError(f"non-finite grid output for {key}")
        out_map[key] = g.value_raw

    obs = sorted(obs_map.values(), key=lambda o: (o.t, o.site_id, o.pollutant))
    days = sorted({o.t for o in obs})
    for o in obs:
        cell = site_to_cell[o.site_id]
        for i in range(1, p + 1):
            if (cell, o.t, i) not in out_map:
                raise MissingGridOutput(
                    f"no model output for cell {cell!r}, day {o.t}, pollutant {i}"
                    f" (needed by site {o.site_id!r})"
                )

    ds = AlignedDataset(
        sites=sites,
        grid=grid,
        observations=obs,
        grid_outputs=out_map,
        site_to_cell=site_to_cell,
        partitions={},
        transform=transform_spec,
        days=days,
    )
    if p <= 2:
        ds.partitions = {t: partition_day(ds, t) for t in days}
    return ds


def _open_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows


def ingest_monitoring(path) -> tuple[list[Site], list[Observation]]:
    """Read a monitoring CSV: site_id,lon,lat,t,pollutant,value_raw."""
    rows = _open_rows(path)
    if not rows or [c.strip() for c in rows[0]] != [
        "site_id",
        "lon",
        "lat",
        "t",
        "pollutant",
        "value_raw",
    ]:
        raise ParseError("expected header site_id,lon,lat,t,pollutant,value_raw", line=1)
    coords: dict[str, tuple[float, float]] = {}
    seen = set()
    observations = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 6:
            raise ParseError(f"expected 6 fields, got {len(row)}", line=lineno)
        sid = row[0].strip()
        try:
            lon, lat = float(row[1]), float(row[2])
            t, pollutant = int(row[3]), int(row[4])
            value = float(row[5])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if sid in coords and coords[sid] != (lon, lat):
            raise ParseError(f"site {sid!r} reappears with different coordinates", line=lineno)
        coords[sid] = (lon, lat)
        key = (sid, t, pollutant)
        if key in seen:
            raise DuplicateRecord(f"line {lineno}: duplicate record for {key}")
        seen.add(key)
        observations.append(Observation(sid, t, pollutant, value))
    sites = [Site(sid, lon, lat) for sid, (lon, lat) in sorted(coords.items())]
    return sites, observations


def ingest_grid_outputs(path) -> list[GridOutput]:
    """Read a grid-output CSV: cell_id,t,pollutant,value_raw."""
    rows = _open_rows(path)
    if not rows or [c.strip() for c in rows[0]] != ["cell_id", "t", "pollutant", "value_raw"]:
        raise ParseError("expected header cell_id,t,pollutant,value_raw", line=1)
    seen = set()
    outputs = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ParseError(f"expected 4 fields, got {len(row)}", line=lineno)
        cid = row[0].strip()
        try:
            t, pollutant = int(row[1]), int(row[2])
            value = float(row[3])
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        key = (cid, t, pollutant)
        if key in seen:
            raise DuplicateRecord(f"line {lineno}: duplicate record for {key}")
        seen.add(key)
        outputs.append(GridOutput(cid, t, pollutant, value))
    return outputs


def write_monitoring_csv(path, dataset: AlignedDataset) -> None:
    by_id = {s.id: s for s in dataset.sites}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["site_id", "lon", "lat", "t", "pollutant", "value_raw"])
        for o in dataset.observations:
            s = by_id[o.site_id]
            w.writerow([o.site_id, repr(s.lon), repr(s.lat), o.t, o.pollutant, repr(o.value_raw)])


def write_grid_outputs_csv(path, dataset: AlignedDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", "t", "pollutant", "value_raw"])
        for (cid, t, pollutant), v in sorted(dataset.grid_outputs.items()):
            w.writerow([cid, t, pollutant, repr(v)])


def split_train_validation(dataset: AlignedDataset, fraction: float, seed: int):
    """Split by SITE into (train, validation); deterministic given seed.

    ``fraction`` is the train share of sites. Validation sites never appear
    in the train set; both halves keep the full grid output table.
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError("fraction must be in (0, 1)")
    ids = sorted(s.id for s in dataset.sites)
    rng = substream(seed, "train-validation-split")
    perm = rng.permutation(len(ids))
    n_train = int(round(fraction * len(ids)))
    train_ids = {ids[i] for i in perm[:n_train]}

    def subset(keep_ids):
        sites = [s for s in dataset.sites if s.id in keep_ids]
        obs = [o for o in dataset.observations if o.site_id in keep_ids]
        outputs = [GridOutput(c, t, i, v) for (c, t, i), v in dataset.grid_outputs.items()]
        return build_dataset(sites, dataset.grid, obs, outputs, dataset.transform)

    validation_ids = set(ids) - train_ids
    return subset(train_ids), subset(validation_ids)
