"""Dataset schema, CSV ingestion, normalization, windows, synthetic data.

One record is a county-year: weekly weather (7 x 52), weekly land-surface
series (16 x 52), depth-indexed soil properties (20 x 6), and scalar
extras. The extras vector has seven slots: six survey-derived indices
stored in the feature file, plus the previous year's national mean yield
of the target crop, which is injected at window-assembly time (NaN until
then — missing values are always explicit, never silently zero).

Feature files are UTF-8 CSV with a mandatory header following the column
manifest below; yields are sparse (county, year, crop) rows; adjacency is
a tab-separated undirected edge list. The synthetic generator emits the
same formats so real and synthetic paths share one ingestion code path.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from yieldgraph.graph import CountyGraph, load_graph

WEATHER_VARS = ("precip", "tdmean", "tmax", "tmean", "tmin", "vpdmax", "vpdmin")
LAND_VARS = (
    "precip_total", "moist_avail_200", "moist_avail_100",
    "soilm_0_200", "soilm_0_100", "soilm_0_10", "soilm_10_40",
    "soilm_40_100", "soilm_100_200", "humidity_2m", "temp_2m",
    "soilt_0_10", "soilt_10_40", "soilt_40_100", "soilt_100_200",
    "wind_max",
)
SOIL_VARS = (
    "awc", "bulk_density", "ec", "organic_matter",
    "silt_pct", "clay_pct", "sand_pct",
    "tex_clay", "tex_silty_clay", "tex_sandy_clay", "tex_clay_loam",
    "tex_silty_clay_loam", "tex_sandy_clay_loam", "tex_loam",
    "tex_silt_loam", "tex_sandy_loam", "tex_silt", "tex_loamy_sand",
    "tex_sand", "ph",
)
EXTRA_VARS = (
    "nccpi_all", "restrictive_depth", "nccpi_small_grains",
    "nccpi_corn", "nccpi_cotton", "nccpi_soybean",
)
CROPS = ("corn", "soybean")
WEEKS = 52
DEPTHS = 6

N_WEATHER = len(WEATHER_VARS)
N_LAND = len(LAND_VARS)
N_SOIL = len(SOIL_VARS)
N_EXTRA_STORED = len(EXTRA_VARS)


def feature_columns():
    cols = ["county", "year"]
    cols += [f"w_{v}_{w}" for v in WEATHER_VARS for w in range(WEEKS)]
    cols += [f"l_{v}_{w}" for v in LAND_VARS for w in range(WEEKS)]
    cols += [f"s_{v}_{d}" for v in SOIL_VARS for d in range(DEPTHS)]
    cols += [f"e_{v}" for v in EXTRA_VARS]
    return cols


class DataFormatError(ValueError):
    """A data file violates its documented format."""


class WindowUnavailableError(LookupError):
    """A requested history window cannot be assembled without fabricating data."""


@dataclass
class YearFeatures:
    """One county-year record. ``extras`` has 7 entries; extras[6] is the
    previous-year national mean yield, NaN until a window is assembled."""

    county: str
    year: int
    weather: np.ndarray       # [7, 52]
    land_surface: np.ndarray  # [16, 52]
    soil: np.ndarray          # [20, 6]
    extras: np.ndarray        # [7]

    def __post_init__(self):
        checks = (
            (self.weather, (N_WEATHER, WEEKS), "weather"),
            (self.land_surface, (N_LAND, WEEKS), "land_surface"),
            (self.soil, (N_SOIL, DEPTHS), "soil"),
            (self.extras, (N_EXTRA_STORED + 1,), "extras"),
        )
        for arr, shape, name in checks:
            if arr.shape != shape:
                raise DataFormatError(
                    f"county {self.county} year {self.year}: {name} shape "
                    f"{arr.shape}, expected {shape}"
                )

    @property
    def has_missing(self):
        return bool(
            np.isnan(self.weather).any()
            or np.isnan(self.land_surface).any()
            or np.isnan(self.soil).any()
            or np.isnan(self.extras[:N_EXTRA_STORED]).any()
        )


class YieldTable:
    """Sparse (county, year, crop) -> bushels/acre with explicit missingness."""

    def __init__(self, entries=None):
        self.entries = {}
        for key, value in (entries or {}).items():
            self.set(*key, value)

    def set(self, county, year, crop, value):
        if crop not in CROPS:
            raise DataFormatError(f"unknown crop {crop!r}")
        if not np.isfinite(value) or value <= 0:
            raise DataFormatError(
                f"yield for ({county}, {year}, {crop}) must be positive, got {value}"
            )
        self.entries[(county, int(year), crop)] = float(value)

    def get(self, county, year, crop):
        return self.entries.get((county, int(year), crop))

    def counties_with(self, year, crop):
        return sorted(c for (c, y, k) in self.entries if y == year and k == crop)

    def coverage(self, crop):
        counts = {}
        for (_, y, k) in self.entries:
            if k == crop:
                counts[y] = counts.get(y, 0) + 1
        return dict(sorted(counts.items()))

    def national_mean(self, year, crop):
        vals = [v for (c, y, k), v in self.entries.items() if y == year and k == crop]
        return float(np.mean(vals)) if vals else None

    def std_all_years(self, crop):
        vals = [v for (_, _, k), v in self.entries.items() if k == crop]
        if len(vals) < 2:
            raise DataFormatError(f"not enough {crop} yields to compute a spread")
        return float(np.std(vals))

    def values_for_years(self, years, crop):
        return np.array(
            [v for (c, y, k), v in sorted(self.entries.items()) if k == crop and y in years]
        )


@dataclass(frozen=True)
class YearSplit:
    """Test year t, validation year t-1, training on all prior dataset years."""

    test_year: int

    @property
    def val_year(self):
        return self.test_year - 1

    def train_years(self, dataset_years):
        years = sorted(y for y in dataset_years if y < self.val_year)
        if not years:
            raise ValueError(f"no training years before validation year {self.val_year}")
        return years


@dataclass
class NormStats:
    """Per-feature mean/std computed over training years only. Constant
    features keep std 1 and are flagged."""

    train_years: tuple
    weather_mean: np.ndarray
    weather_std: np.ndarray
    land_mean: np.ndarray
    land_std: np.ndarray
    soil_mean: np.ndarray
    soil_std: np.ndarray
    extras_mean: np.ndarray
    extras_std: np.ndarray
    constant_flags: dict
    target_mean: dict = field(default_factory=dict)  # crop -> train-year mean
    target_std: dict = field(default_factory=dict)

    def standardize_target(self, crop, value):
        return (value - self.target_mean[crop]) / self.target_std[crop]

    def destandardize_target(self, crop, value):
        return value * self.target_std[crop] + self.target_mean[crop]


class Dataset:
    """In-memory dataset: dense per-block arrays indexed [county, year]."""

    def __init__(self, counties, years, weather, land, soil, extras, present,
                 yields, graph, normalized=False, norm_stats=None):
        self.counties = list(counties)
        self.years = sorted(years)
        self.county_index = {c: i for i, c in enumerate(self.counties)}
        self.year_index = {y: i for i, y in enumerate(self.years)}
        self.weather = weather
        self.land = land
        self.soil = soil
        self.extras = extras
        self.present = present
        self.yields = yields
        self.graph = graph
        self.normalized = normalized
        self.norm_stats = norm_stats
        self._usable = None
        self._prev_mean_cache = {}

    @property
    def n_records(self):
        return int(self.present.sum())

    def _usable_mask(self):
        """[county, year] True where a record exists with no missing cell."""
        if self._usable is None:
            finite = (
                np.isfinite(self.weather).all(axis=(2, 3))
                & np.isfinite(self.land).all(axis=(2, 3))
                & np.isfinite(self.soil).all(axis=(2, 3))
                & np.isfinite(self.extras).all(axis=2)
            )
            self._usable = finite & self.present
        return self._usable

    def usable_counties(self, year):
        """Counties with complete features for the year (graph-eligible)."""
        yi = self.year_index.get(year)
        if yi is None:
            return []
        mask = self._usable_mask()[:, yi]
        return [c for c, ok in zip(self.counties, mask) if ok]

    def has_record(self, county, year):
        ci = self.county_index.get(county)
        yi = self.year_index.get(year)
        return ci is not None and yi is not None and bool(self.present[ci, yi])

    def features(self, county, year):
        if not self.has_record(county, year):
            raise KeyError(f"no features for county {county} year {year}")
        ci, yi = self.county_index[county], self.year_index[year]
        extras = np.full(N_EXTRA_STORED + 1, np.nan)
        extras[:N_EXTRA_STORED] = self.extras[ci, yi]
        return YearFeatures(
            county=county,
            year=year,
            weather=self.weather[ci, yi].copy(),
            land_surface=self.land[ci, yi].copy(),
            soil=self.soil[ci, yi].copy(),
            extras=extras,
        )

    def labeled_counties(self, year, crop):
        return [c for c in self.yields.counties_with(year, crop) if c in self.county_index]

    def prev_year_national_mean(self, crop, year):
        """National mean of the prior year; the earliest labeled year stands
        in when no prior labels exist."""
        key = (crop, year)
        if key not in self._prev_mean_cache:
            m = self.yields.national_mean(year - 1, crop)
            if m is None:
                labeled_years = sorted({y for (_, y, k) in self.yields.entries if k == crop})
                if not labeled_years:
                    raise DataFormatError(f"no {crop} yields anywhere in the dataset")
                m = self.yields.national_mean(labeled_years[0], crop)
            self._prev_mean_cache[key] = m
        return self._prev_mean_cache[key]


# -- ingestion ----------------------------------------------------------------


def _parse_cell(text, path, lineno):
    if text == "":
        return np.nan
    try:
        return float(text)
    except ValueError as e:
        raise DataFormatError(f"{path}:{lineno}: bad number {text!r}") from e


def load_dataset(features_file, yields_file, adjacency_file):
    expected = feature_columns()
    rows = []
    with open(features_file, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != expected:
            raise DataFormatError(
                f"{features_file}: header does not match the column manifest "
                f"({len(header or [])} columns, expected {len(expected)})"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DataFormatError(
                    f"{features_file}:{lineno}: {len(row)} fields, expected {len(expected)}"
                )
            county = row[0]
            try:
                year = int(row[1])
            except ValueError as e:
                raise DataFormatError(f"{features_file}:{lineno}: bad year {row[1]!r}") from e
            values = [_parse_cell(cell, features_file, lineno) for cell in row[2:]]
            rows.append((county, year, np.array(values)))

    counties = sorted({c for c, _, _ in rows})
    years = sorted({y for _, y, _ in rows})
    ci = {c: i for i, c in enumerate(counties)}
    yi = {y: i for i, y in enumerate(years)}
    shape = (len(counties), len(years))
    weather = np.full(shape + (N_WEATHER, WEEKS), np.nan)
    land = np.full(shape + (N_LAND, WEEKS), np.nan)
    soil = np.full(shape + (N_SOIL, DEPTHS), np.nan)
    extras = np.full(shape + (N_EXTRA_STORED,), np.nan)
    present = np.zeros(shape, dtype=bool)
    n_w = N_WEATHER * WEEKS
    n_l = N_LAND * WEEKS
    n_s = N_SOIL * DEPTHS
    for county, year, vals in rows:
        a, b = ci[county], yi[year]
        if present[a, b]:
            raise DataFormatError(f"{features_file}: duplicate record for {county}/{year}")
        weather[a, b] = vals[:n_w].reshape(N_WEATHER, WEEKS)
        land[a, b] = vals[n_w : n_w + n_l].reshape(N_LAND, WEEKS)
        soil[a, b] = vals[n_w + n_l : n_w + n_l + n_s].reshape(N_SOIL, DEPTHS)
        extras[a, b] = vals[n_w + n_l + n_s :]
        present[a, b] = True

    yields = YieldTable()
    with open(yields_file, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["county", "year", "crop", "yield"]:
            raise DataFormatError(f"{yields_file}: header must be county,year,crop,yield")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataFormatError(f"{yields_file}:{lineno}: expected 4 fields")
            try:
                yields.set(row[0], int(row[1]), row[2], float(row[3]))
            except (ValueError, DataFormatError) as e:
                raise DataFormatError(f"{yields_file}:{lineno}: {e}") from e

    graph = load_graph(adjacency_file, node_ids=set(counties))
    return Dataset(counties, years, weather, land, soil, extras, present, yields, graph)


def save_dataset(dataset, out_dir):
    """Write features.csv / yields.csv / adjacency.tsv; floats use shortest
    round-trip formatting so load(save(ds)) is exact."""
    os.makedirs(out_dir, exist_ok=True)
    fpath = os.path.join(out_dir, "features.csv")
    with open(fpath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(feature_columns())
        for county in dataset.counties:
            a = dataset.county_index[county]
            for year in dataset.years:
                b = dataset.year_index[year]
                if not dataset.present[a, b]:
                    continue
                vals = np.concatenate([
                    dataset.weather[a, b].ravel(),
                    dataset.land[a, b].ravel(),
                    dataset.soil[a, b].ravel(),
                    dataset.extras[a, b],
                ])
                writer.writerow(
                    [county, year] + ["" if np.isnan(v) else repr(float(v)) for v in vals]
                )
    ypath = os.path.join(out_dir, "yields.csv")
    with open(ypath, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["county", "year", "crop", "yield"])
        for (county, year, crop), value in sorted(dataset.yields.entries.items()):
            writer.writerow([county, year, crop, repr(value)])
    apath = os.path.join(out_dir, "adjacency.tsv")
    with open(apath, "w", encoding="utf-8") as f:
        f.write("# undirected county adjacency, one edge per line\n")
        seen = set()
        for i, county in enumerate(dataset.graph.node_ids):
            for j in dataset.graph.neighbors[i]:
                edge = (min(i, int(j)), max(i, int(j)))
                if edge not in seen:
                    seen.add(edge)
                    f.write(f"{dataset.graph.node_ids[edge[0]]}\t{dataset.graph.node_ids[edge[1]]}\n")
    return fpath, ypath, apath


# -- normalization ------------------------------------------------------------


def _block_stats(stack):
    """stack: [n_records, ...feature dims]; NaN-aware per-feature stats."""
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(stack, axis=0)
        std = np.nanstd(stack, axis=0)
    mean = np.where(np.isnan(mean), 0.0, mean)
    std = np.where(np.isnan(std), 0.0, std)
    constant = std < 1e-12
    std = np.where(constant, 1.0, std)
    return mean, std, constant


def compute_norm_stats(dataset, split):
    train_years = split.train_years(dataset.years)
    assert max(train_years) < split.val_year  # leakage guard
    mask = np.zeros(len(dataset.years), dtype=bool)
    for y in train_years:
        mask[dataset.year_index[y]] = True
    sel = dataset.present[:, mask]

    def gather(block):
        return block[:, mask][sel]

    wm, ws, wc = _block_stats(gather(dataset.weather))
    lm, ls, lc = _block_stats(gather(dataset.land))
    sm, ss, sc = _block_stats(gather(dataset.soil))
    em, es, ec = _block_stats(gather(dataset.extras))

    stats = NormStats(
        train_years=tuple(train_years),
        weather_mean=wm, weather_std=ws,
        land_mean=lm, land_std=ls,
        soil_mean=sm, soil_std=ss,
        extras_mean=em, extras_std=es,
        constant_flags={"weather": wc, "land": lc, "soil": sc, "extras": ec},
    )
    for crop in CROPS:
        vals = [
            v for (c, y, k), v in dataset.yields.entries.items()
            if k == crop and y in set(train_years) and c in dataset.county_index
        ]
        if vals:
            std = float(np.std(vals))
            stats.target_mean[crop] = float(np.mean(vals))
            stats.target_std[crop] = std if std > 1e-12 else 1.0
    return stats


def apply_norm_stats(dataset, stats):
    return Dataset(
        dataset.counties,
        dataset.years,
        (dataset.weather - stats.weather_mean) / stats.weather_std,
        (dataset.land - stats.land_mean) / stats.land_std,
        (dataset.soil - stats.soil_mean) / stats.soil_std,
        (dataset.extras - stats.extras_mean) / stats.extras_std,
        dataset.present,
        dataset.yields,
        dataset.graph,
        normalized=True,
        norm_stats=stats,
    )


def normalize(dataset, split):
    """Z-score every feature channel with training-year statistics, applied
    identically to validation and test years."""
    stats = compute_norm_stats(dataset, split)
    return apply_norm_stats(dataset, stats), stats


# -- window assembly ----------------------------------------------------------


def assemble_window(dataset, county, year, dt, crop="corn"):
    """Chronological [year-dt .. year] feature window, oldest first.

    Each entry's extras[6] carries that year's previous-year national mean
    yield (standardized with the dataset's target statistics when the
    dataset is normalized). Any missing year or missing cell aborts the
    window rather than fabricating data.
    """
    span = range(year - dt, year + 1)
    for y in span:
        if not dataset.has_record(county, y):
            raise WindowUnavailableError(f"county {county} lacks features for year {y}")
    window = []
    for y in span:
        feats = dataset.features(county, y)
        if feats.has_missing:
            raise WindowUnavailableError(f"county {county} year {y} has missing cells")
        prev_mean = dataset.prev_year_national_mean(crop, y)
        if dataset.normalized:
            prev_mean = dataset.norm_stats.standardize_target(crop, prev_mean)
        feats.extras[N_EXTRA_STORED] = prev_mean
        window.append(feats)
    return window


def enumerate_windows(dataset, target_years, crop, dt):
    """All (county, target_year) pairs with a label and a complete window;
    returns (samples, skipped_count)."""
    samples = []
    skipped = 0
    for year in target_years:
        for county in dataset.labeled_counties(year, crop):
            try:
                assemble_window(dataset, county, year, dt, crop)
            except WindowUnavailableError:
                skipped += 1
                continue
            samples.append((county, year))
    return samples, skipped


# -- synthetic generator ------------------------------------------------------

_JULY_WEEKS = np.arange(26, 32)
_JULY_PROFILE = np.array([0.5, 0.9, 1.0, 1.0, 0.9, 0.5])
_WEATHER_PERSISTENCE = 0.6   # year-over-year carryover of the regional field
_COUNTY_MEASUREMENT_SD = 1.0  # shared per county-year across weekly channels
_SOIL_BIAS_SD = 0.7           # shared per county across soil and extras
_CELL_NOISE = 0.3

_CROP_PARAMS = {
    # base, trend/yr, fertility gain, July-weather gain, noise sd
    "corn": (120.0, 2.0, 10.0, 7.0, 2.0),
    "soybean": (42.0, 0.7, 3.5, 2.4, 0.7),
}


def _grid_graph(side):
    ids = [f"{r * side + c:05d}" for r in range(side) for c in range(side)]
    edges = []
    for r in range(side):
        for c in range(side):
            i = r * side + c
            if c + 1 < side:
                edges.append((ids[i], ids[i + 1]))
            if r + 1 < side:
                edges.append((ids[i], ids[i + side]))
    return CountyGraph(ids, edges)


def _smooth(graph, values, sweeps=2):
    out = values.astype(np.float64).copy()
    for _ in range(sweeps):
        nxt = out.copy()
        for i, nbrs in enumerate(graph.neighbors):
            if nbrs.size:
                nxt[i] = (out[i] + out[nbrs].sum()) / (1.0 + nbrs.size)
        out = nxt
    return out


def _standardized_smooth_field(graph, rng):
    field_ = _smooth(graph, rng.normal(size=graph.n))
    return (field_ - field_.mean()) / field_.std()


def generate_synthetic(n_counties, n_years, grid_side, seed, start_year=2000):
    """Seeded synthetic dataset on a grid graph.

    Yield = linear trend in year + smooth fertility field + response to a
    smooth regional July-weather field + noise. County features observe
    the July field through the weekly channels with a shared per-county
    measurement offset, and fertility through the soil/extras channels
    with a per-county offset, so neighboring counties carry genuinely
    complementary signal.
    """
    if grid_side**2 != n_counties:
        raise ValueError(f"n_counties={n_counties} is not grid_side^2={grid_side**2}")
    if n_years < 6:
        raise ValueError(f"need at least 6 years, got {n_years}")
    rng = np.random.default_rng(seed)
    graph = _grid_graph(grid_side)
    n = graph.n
    years = list(range(start_year, start_year + n_years))

    fert = _standardized_smooth_field(graph, rng)
    climate = _standardized_smooth_field(graph, rng)
    soil_bias = rng.normal(scale=_SOIL_BIAS_SD, size=n)
    fert_observed = fert + soil_bias

    def loadings(k):
        return rng.choice([-1.0, 1.0], size=k) * rng.uniform(0.5, 1.0, size=k)

    w_load = loadings(N_WEATHER)
    l_load = loadings(N_LAND)
    w_climate = rng.uniform(-0.5, 0.5, size=N_WEATHER)
    l_climate = rng.uniform(-0.5, 0.5, size=N_LAND)
    w_base = rng.uniform(-5, 5, size=N_WEATHER)
    w_amp = rng.uniform(1, 3, size=N_WEATHER)
    w_phase = rng.uniform(0, WEEKS, size=N_WEATHER)
    l_base = rng.uniform(-5, 5, size=N_LAND)
    l_amp = rng.uniform(1, 3, size=N_LAND)
    l_phase = rng.uniform(0, WEEKS, size=N_LAND)
    s_load = loadings(N_SOIL)
    depth_profile = np.linspace(1.0, 0.4, DEPTHS)
    e_load = loadings(N_EXTRA_STORED)

    weeks = np.arange(WEEKS)
    w_season = w_base[:, None] + w_amp[:, None] * np.sin(
        2 * np.pi * (weeks[None, :] - w_phase[:, None]) / WEEKS
    )
    l_season = l_base[:, None] + l_amp[:, None] * np.sin(
        2 * np.pi * (weeks[None, :] - l_phase[:, None]) / WEEKS
    )

    # regional July-weather field: smooth in space, AR(1) across years
    u = np.zeros((n_years, n))
    u[0] = _standardized_smooth_field(graph, rng)
    carry = _WEATHER_PERSISTENCE
    fresh = np.sqrt(1.0 - carry**2)
    for t in range(1, n_years):
        u[t] = carry * u[t - 1] + fresh * _standardized_smooth_field(graph, rng)

    shape = (n, n_years)
    weather = np.empty(shape + (N_WEATHER, WEEKS))
    land = np.empty(shape + (N_LAND, WEEKS))
    soil = np.empty(shape + (N_SOIL, DEPTHS))
    extras = np.empty(shape + (N_EXTRA_STORED,))
    present = np.ones(shape, dtype=bool)

    july = np.zeros(WEEKS)
    july[_JULY_WEEKS] = _JULY_PROFILE
    for t in range(n_years):
        measured = u[t] + rng.normal(scale=_COUNTY_MEASUREMENT_SD, size=n)
        w_signal = (
            w_season[None, :, :]
            + w_load[None, :, None] * measured[:, None, None] * july[None, None, :]
            + w_climate[None, :, None] * climate[:, None, None]
        )
        weather[:, t] = w_signal + rng.normal(scale=_CELL_NOISE, size=(n, N_WEATHER, WEEKS))
        l_signal = (
            l_season[None, :, :]
            + l_load[None, :, None] * measured[:, None, None] * july[None, None, :]
            + l_climate[None, :, None] * climate[:, None, None]
        )
        land[:, t] = l_signal + rng.normal(scale=_CELL_NOISE, size=(n, N_LAND, WEEKS))

    soil_core = s_load[None, :, None] * depth_profile[None, None, :] * fert_observed[:, None, None]
    soil_static = soil_core + rng.normal(scale=_CELL_NOISE, size=(n, N_SOIL, DEPTHS))
    extras_static = e_load[None, :] * fert_observed[:, None] + rng.normal(
        scale=0.2, size=(n, N_EXTRA_STORED)
    )
    for t in range(n_years):
        soil[:, t] = soil_static
        extras[:, t] = extras_static

    yields = YieldTable()
    for crop in CROPS:
        base, trend, fert_gain, weather_gain, noise_sd = _CROP_PARAMS[crop]
        for t, year in enumerate(years):
            vals = (
                base
                + trend * t
                + fert_gain * fert
                + weather_gain * u[t]
                + rng.normal(scale=noise_sd, size=n)
            )
            vals = np.maximum(vals, 1.0)
            for i, county in enumerate(graph.node_ids):
                yields.set(county, year, crop, vals[i])

    return Dataset(
        graph.node_ids, years, weather.copy(), land.copy(), soil.copy(),
        extras.copy(), present, yields, graph,
    )
