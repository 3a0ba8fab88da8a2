"""Raster-to-county aggregation, daily-to-weekly reduction, soil texture.

County values are overlap- and agland-weighted means of raster cells; a
county whose valid-cell weight sum is zero yields missing (None), never
an error. Daily series fold to 52 weeks with days 364+ merged into week
51; accumulated ("flux") variables are summed per week, instantaneous
("state") variables averaged. Soil texture classification follows the
NRCS twelve-class sand/silt/clay rules encoded as inequality tables.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEEKS = 52

TEXTURE_CLASSES = (
    "Sand", "Loamy Sand", "Sandy Loam", "Loam", "Silt Loam", "Silt",
    "Sandy Clay Loam", "Clay Loam", "Silty Clay Loam", "Sandy Clay",
    "Silty Clay", "Clay",
)


class GeoFormatError(ValueError):
    """A geospatial input file violates its documented format."""


@dataclass
class RasterGrid:
    """Row-major grid in map units; cell 0 is the top-left corner."""

    origin_x: float
    origin_y: float
    cell_size: float
    rows: int
    cols: int
    values: np.ndarray
    nodata: float = -9999.0

    def __post_init__(self):
        if self.cell_size <= 0:
            raise GeoFormatError(f"cell_size must be positive, got {self.cell_size}")
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size != self.rows * self.cols:
            raise GeoFormatError(
                f"value count {self.values.size} != rows*cols {self.rows * self.cols}"
            )

    def is_nodata(self, idx):
        return self.values[idx] == self.nodata


def read_ascii_grid(path):
    """ESRI ASCII grid: six header lines then whitespace-separated values."""
    header = {}
    with open(path, "r", encoding="utf-8") as f:
        tokens = f.read().split()
    expected = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"]
    pos = 0
    for key in expected:
        if pos + 1 >= len(tokens) or tokens[pos].lower() != key:
            raise GeoFormatError(f"{path}: expected header key {key!r}, got {tokens[pos:pos+1]}")
        header[key] = float(tokens[pos + 1])
        pos += 2
    values = np.array([float(t) for t in tokens[pos:]])
    return RasterGrid(
        origin_x=header["xllcorner"],
        origin_y=header["yllcorner"],
        cell_size=header["cellsize"],
        rows=int(header["nrows"]),
        cols=int(header["ncols"]),
        values=values,
        nodata=header["nodata_value"],
    )


def write_ascii_grid(grid, path):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"ncols {grid.cols}\n")
        f.write(f"nrows {grid.rows}\n")
        f.write(f"xllcorner {grid.origin_x!r}\n")
        f.write(f"yllcorner {grid.origin_y!r}\n")
        f.write(f"cellsize {grid.cell_size!r}\n")
        f.write(f"nodata_value {grid.nodata!r}\n")
        for r in range(grid.rows):
            row = grid.values[r * grid.cols : (r + 1) * grid.cols]
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


# -- county weights -----------------------------------------------------------


def build_weight_map(county_cells_file, landcover):
    """Combine per-cell county overlap fractions with agland fractions.

    county_cells_file: CSV ``county,cell_index,overlap_fraction`` (a fourth
    ``agland_fraction`` column, the save format, overrides the landcover
    raster). ``landcover``: RasterGrid of agland fractions in [0, 1], or
    None when the file carries its own. Cells with zero weight are
    dropped.
    """
    import csv

    weights = {}
    with open(county_cells_file, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:3] != ["county", "cell_index", "overlap_fraction"]:
            raise GeoFormatError(
                f"{county_cells_file}: header must start county,cell_index,overlap_fraction"
            )
        has_agland = len(header) == 4 and header[3] == "agland_fraction"
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise GeoFormatError(f"{county_cells_file}:{lineno}: wrong field count")
            county, cell, overlap = row[0], int(row[1]), float(row[2])
            if not 0.0 <= overlap <= 1.0:
                raise GeoFormatError(
                    f"{county_cells_file}:{lineno}: overlap fraction {overlap} outside [0, 1]"
                )
            if has_agland:
                agland = float(row[3])
            else:
                if landcover is None:
                    raise GeoFormatError(
                        f"{county_cells_file}: no agland column and no landcover raster"
                    )
                if cell < 0 or cell >= landcover.values.size:
                    raise GeoFormatError(
                        f"{county_cells_file}:{lineno}: cell {cell} outside the raster"
                    )
                agland = 0.0 if landcover.is_nodata(cell) else float(landcover.values[cell])
            w = overlap * agland
            weights.setdefault(county, [])
            if w > 0.0:
                weights[county].append((cell, w))
    return weights


def save_weight_map(weights, path):
    import csv

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["county", "cell_index", "overlap_fraction", "agland_fraction"])
        for county in sorted(weights):
            for cell, w in sorted(weights[county]):
                writer.writerow([county, cell, repr(float(w)), "1.0"])


def aggregate_to_county(raster, weights, county):
    """Weighted mean over the county's cells, skipping nodata; returns None
    (missing) when no valid weight remains."""
    cells = weights.get(county, [])
    num = 0.0
    den = 0.0
    for cell, w in cells:
        if cell < 0 or cell >= raster.values.size:
            raise GeoFormatError(f"county {county}: cell {cell} outside the raster")
        if raster.is_nodata(cell):
            continue
        num += w * raster.values[cell]
        den += w
    if den == 0.0:
        return None
    return num / den


# -- temporal reduction -------------------------------------------------------


def daily_to_weekly(series, variable_kind):
    """Fold a 365/366-day series to 52 weeks: week k covers days
    [7k, 7k+7); days beyond 357 land in week 51. Flux variables sum,
    state variables average."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 1 or series.size not in (365, 366):
        raise GeoFormatError(f"daily series must have 365 or 366 days, got {series.shape}")
    if variable_kind not in ("flux", "state"):
        raise ValueError(f"variable_kind must be flux or state, got {variable_kind!r}")
    week_of_day = np.minimum(np.arange(series.size) // 7, WEEKS - 1)
    sums = np.zeros(WEEKS)
    np.add.at(sums, week_of_day, series)
    if variable_kind == "flux":
        return sums
    counts = np.bincount(week_of_day, minlength=WEEKS)
    return sums / counts


# -- soil texture -------------------------------------------------------------


@dataclass
class TexturePoint:
    """Sand/silt/clay percentages; renormalized to sum 100 (inputs may be
    rounded, tolerance 0.5)."""

    sand: float
    silt: float
    clay: float

    def __post_init__(self):
        for name, v in (("sand", self.sand), ("silt", self.silt), ("clay", self.clay)):
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} percentage {v} outside [0, 100]")
        total = self.sand + self.silt + self.clay
        if abs(total - 100.0) > 0.5:
            raise ValueError(f"sand+silt+clay = {total}, expected 100 +- 0.5")
        self.sand = self.sand * 100.0 / total
        self.silt = self.silt * 100.0 / total
        self.clay = self.clay * 100.0 / total


def classify_texture(point):
    """Map a simplex point to exactly one of the twelve NRCS classes."""
    sand, silt, clay = point.sand, point.silt, point.clay
    if silt + 1.5 * clay < 15:
        return "Sand"
    if silt + 2.0 * clay < 30:
        return "Loamy Sand"
    if (7 <= clay < 20 and sand > 52) or (clay < 7 and silt < 50):
        if silt + 2.0 * clay >= 30:
            return "Sandy Loam"
    if 7 <= clay < 27 and 28 <= silt < 50 and sand <= 52:
        return "Loam"
    if silt >= 50 and ((12 <= clay < 27) or (silt < 80 and clay < 12)):
        return "Silt Loam"
    if silt >= 80 and clay < 12:
        return "Silt"
    if 20 <= clay < 35 and silt < 28 and sand > 45:
        return "Sandy Clay Loam"
    if 27 <= clay < 40 and 20 < sand <= 45:
        return "Clay Loam"
    if 27 <= clay < 40 and sand <= 20:
        return "Silty Clay Loam"
    if clay >= 35 and sand > 45:
        return "Sandy Clay"
    if clay >= 40 and silt >= 40:
        return "Silty Clay"
    return "Clay"


def county_texture_fractions(points, weights=None):
    """Weight-normalized histogram over the twelve classes; empty input is
    missing (None)."""
    points = list(points)
    if not points:
        return None
    if weights is None:
        weights = [1.0] * len(points)
    weights = np.asarray(list(weights), dtype=np.float64)
    if weights.size != len(points) or np.any(weights < 0):
        raise ValueError("weights must be non-negative, one per point")
    total = weights.sum()
    if total == 0.0:
        return None
    hist = np.zeros(len(TEXTURE_CLASSES))
    index = {name: i for i, name in enumerate(TEXTURE_CLASSES)}
    for p, w in zip(points, weights):
        hist[index[classify_texture(p)]] += w
    return hist / total
