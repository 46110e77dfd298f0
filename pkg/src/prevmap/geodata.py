"""Core spatial data types, distances, and survey/raster ingestion.

Conventions used throughout the package:

* Locations are (lon, lat) in decimal degrees, WGS-84-style axes but with
  no projection handling: Euclidean distances are in degrees, great-circle
  distances in km on a sphere of radius 6371 km.
* Rasters store a 2-D value grid with row 0 at the SOUTH edge (origin is
  the lower-left corner); the ESRI ASCII reader/writer flips row order.
* A cell covers the half-open extent [x, x + cell_size) x [y, y + cell_size),
  so a point on a shared edge belongs to the cell north-east of it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import BoundsError, SurveyFormatError

EARTH_RADIUS_KM = 6371.0

SURVEY_HEADER = ["lon", "lat", "examined", "positive"]


class DistanceMetric(Enum):
    EUCLIDEAN = "euclidean"
    GREAT_CIRCLE = "greatcircle"

    @classmethod
    def from_string(cls, s: str) -> "DistanceMetric":
        key = s.strip().lower().replace("_", "").replace("-", "")
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown distance metric {s!r}")


@dataclass(frozen=True)
class Location:
    """A point on the globe: degrees east, degrees north."""

    lon: float
    lat: float

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"lon {self.lon} outside [-180, 180]")
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"lat {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class SurveyRecord:
    """One prevalence observation: `positive` of `examined` tested positive."""

    loc: Location
    examined: int
    positive: int

    def __post_init__(self):
        if self.examined < 1:
            raise ValueError(f"examined must be >= 1, got {self.examined}")
        if self.positive < 0 or self.positive > self.examined:
            raise ValueError(
                f"positive must be in [0, examined], got {self.positive}/{self.examined}"
            )

    @property
    def prevalence(self) -> float:
        return self.positive / self.examined


@dataclass
class Raster:
    """Rectangular lon-lat grid of values with a validity mask.

    `values` and `mask` have shape (n_rows, n_cols); row 0 is the
    southernmost row. `mask` is True where the cell holds a valid value.
    """

    origin: Location
    cell_size: float
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("values must be 2-D (n_rows, n_cols)")
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.values.shape:
            raise ValueError("mask shape must match values shape")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def cell_of(self, loc: Location) -> tuple[int, int]:
        """Row/col of the cell whose half-open extent contains `loc`."""
        col = math.floor((loc.lon - self.origin.lon) / self.cell_size)
        row = math.floor((loc.lat - self.origin.lat) / self.cell_size)
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise BoundsError(
                f"location ({loc.lon}, {loc.lat}) outside raster extent "
                f"[{self.origin.lon}, {self.origin.lon + self.n_cols * self.cell_size}) x "
                f"[{self.origin.lat}, {self.origin.lat + self.n_rows * self.cell_size})"
            )
        return row, col

    def cell_centre(self, row: int, col: int) -> Location:
        return Location(
            self.origin.lon + (col + 0.5) * self.cell_size,
            self.origin.lat + (row + 0.5) * self.cell_size,
        )

    def cell_centres(self) -> list[Location]:
        """Centres of all cells, row-major from the south-west corner."""
        return [
            self.cell_centre(r, c)
            for r in range(self.n_rows)
            for c in range(self.n_cols)
        ]


def locations_to_array(pts) -> np.ndarray:
    """Stack Locations into an (n, 2) array of (lon, lat)."""
    return np.array([(p.lon, p.lat) for p in pts], dtype=float).reshape(-1, 2)


def distance(a: Location, b: Location, metric: DistanceMetric) -> float:
    """Distance between two locations: degrees (Euclidean) or km (great-circle)."""
    if metric is DistanceMetric.EUCLIDEAN:
        return math.hypot(a.lon - b.lon, a.lat - b.lat)
    return _haversine_km(
        np.array([a.lon]), np.array([a.lat]), np.array([b.lon]), np.array([b.lat])
    )[0]


def _haversine_km(lon1, lat1, lon2, lat2) -> np.ndarray:
    d2r = math.pi / 180.0
    dlat = (lat2 - lat1) * d2r
    dlon = (lon2 - lon1) * d2r
    h = (
        np.sin(dlat / 2.0) ** 2
        + np.cos(lat1 * d2r) * np.cos(lat2 * d2r) * np.sin(dlon / 2.0) ** 2
    )
    # clip guards roundoff for antipodal points
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_distances(a_xy: np.ndarray, b_xy: np.ndarray, metric: DistanceMetric) -> np.ndarray:
    """All distances between rows of a_xy (n, 2) and rows of b_xy (m, 2)."""
    a_xy = np.asarray(a_xy, dtype=float)
    b_xy = np.asarray(b_xy, dtype=float)
    if metric is DistanceMetric.EUCLIDEAN:
        diff = a_xy[:, None, :] - b_xy[None, :, :]
        return np.sqrt((diff**2).sum(axis=2))
    return _haversine_km(
        a_xy[:, 0:1], a_xy[:, 1:2], b_xy[None, :, 0], b_xy[None, :, 1]
    )


def distance_matrix(pts, metric: DistanceMetric) -> np.ndarray:
    """Symmetric pairwise distance matrix with an exactly zero diagonal."""
    if len(pts) < 1:
        raise ValueError("need at least one point")
    xy = locations_to_array(pts)
    d = pairwise_distances(xy, xy, metric)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def parse_survey_csv(path) -> list[SurveyRecord]:
    """Read survey records from a CSV with header `lon,lat,examined,positive`.

    Raises SurveyFormatError naming the file line on a malformed number or
    an invariant violation (positive > examined, examined < 1).
    """
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SurveyFormatError(f"{path}: empty file, expected header row")
        if [h.strip().lower() for h in header] != SURVEY_HEADER:
            raise SurveyFormatError(
                f"{path}: bad header {header!r}, expected {','.join(SURVEY_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise SurveyFormatError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                lon, lat = float(row[0]), float(row[1])
                examined, positive = int(row[2]), int(row[3])
            except ValueError as exc:
                raise SurveyFormatError(f"{path}:{lineno}: {exc}") from exc
            try:
                records.append(SurveyRecord(Location(lon, lat), examined, positive))
            except ValueError as exc:
                raise SurveyFormatError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_survey_csv(records, path) -> None:
    """Write survey records in the exchange format read by parse_survey_csv."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SURVEY_HEADER)
        for r in records:
            # repr keeps the shortest exact representation, so read-back
            # reproduces the coordinates bit for bit
            writer.writerow([repr(r.loc.lon), repr(r.loc.lat), r.examined, r.positive])


def raster_sample(r: Raster, loc: Location):
    """Value of the cell containing `loc`, or None on a nodata cell."""
    row, col = r.cell_of(loc)
    if not r.mask[row, col]:
        return None
    return float(r.values[row, col])


def build_grid(bbox: tuple[Location, Location], cell_size: float) -> Raster:
    """Empty all-valid raster covering `bbox` (sw, ne corners) at `cell_size`."""
    sw, ne = bbox
    dlon = ne.lon - sw.lon
    dlat = ne.lat - sw.lat
    if dlon <= 0 or dlat <= 0:
        raise ValueError(f"degenerate bbox: spans ({dlon}, {dlat}) degrees")
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    n_cols = math.ceil(dlon / cell_size - 1e-12)
    n_rows = math.ceil(dlat / cell_size - 1e-12)
    return Raster(
        origin=sw,
        cell_size=cell_size,
        values=np.zeros((n_rows, n_cols)),
        mask=np.ones((n_rows, n_cols), dtype=bool),
    )


def records_bbox(records, pad: float = 0.0) -> tuple[Location, Location]:
    """Bounding box of record locations, optionally padded on every side."""
    xy = locations_to_array([r.loc for r in records])
    return (
        Location(float(xy[:, 0].min()) - pad, float(xy[:, 1].min()) - pad),
        Location(float(xy[:, 0].max()) + pad, float(xy[:, 1].max()) + pad),
    )


NODATA_DEFAULT = -9999.0


def write_asc(r: Raster, path) -> None:
    """Write a raster as an ESRI ASCII grid (rows written north to south)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"ncols {r.n_cols}\n")
        fh.write(f"nrows {r.n_rows}\n")
        fh.write(f"xllcorner {r.origin.lon:.10g}\n")
        fh.write(f"yllcorner {r.origin.lat:.10g}\n")
        fh.write(f"cellsize {r.cell_size:.10g}\n")
        fh.write(f"NODATA_value {NODATA_DEFAULT:.10g}\n")
        for row in range(r.n_rows - 1, -1, -1):
            cells = [
                f"{r.values[row, col]:.10g}" if r.mask[row, col] else f"{NODATA_DEFAULT:.10g}"
                for col in range(r.n_cols)
            ]
            fh.write(" ".join(cells) + "\n")


def read_asc(path) -> Raster:
    """Read an ESRI ASCII grid into a Raster (nodata cells masked out)."""
    path = Path(path)
    header = {}
    with path.open(encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) == 2 and parts[0].lower() in (
            "ncols",
            "nrows",
            "xllcorner",
            "yllcorner",
            "cellsize",
            "nodata_value",
        ):
            header[parts[0].lower()] = parts[1]
            i += 1
        else:
            break
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise SurveyFormatError(f"{path}: missing ESRI ASCII header field {key}")
    n_cols = int(header["ncols"])
    n_rows = int(header["nrows"])
    nodata = float(header.get("nodata_value", NODATA_DEFAULT))
    flat = np.array(" ".join(lines[i:]).split(), dtype=float)
    if flat.size != n_rows * n_cols:
        raise SurveyFormatError(
            f"{path}: expected {n_rows * n_cols} values, found {flat.size}"
        )
    top_down = flat.reshape(n_rows, n_cols)
    values = top_down[::-1].copy()
    mask = values != nodata
    values = np.where(mask, values, 0.0)
    return Raster(
        origin=Location(float(header["xllcorner"]), float(header["yllcorner"])),
        cell_size=float(header["cellsize"]),
        values=values,
        mask=mask,
    )
