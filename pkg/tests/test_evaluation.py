import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yieldgraph.data import YearSplit
from yieldgraph.evaluation import (
    EvalReport,
    MetricError,
    apply_early_mask,
    build_masking_plan,
    emit_report,
    evaluate,
    mask_dataset_year,
    parse_metrics,
    pearson_corr,
    r_squared,
    rmse,
)
from tests.test_data import make_dataset


class OraclePredictor:
    """Predicts the stored truth (optionally shifted / held constant)."""

    def __init__(self, dataset, crop="corn", mode="truth"):
        self.dataset = dataset
        self.crop = crop
        self.history_years = 0
        self.seed = 0
        self.method_name = f"oracle-{mode}"
        self.norm_stats = None
        self.mode = mode

    def predict_year(self, ds, counties, year):
        truth = np.array([self.dataset.yields.get(c, year, self.crop) for c in counties])
        if self.mode == "truth":
            return truth
        if self.mode == "constant":
            return np.full(len(counties), truth.mean() + 5.0)
        if self.mode == "noisy":
            return truth + np.sin(np.arange(len(counties)) + 1.0)
        raise ValueError(self.mode)


def _vectors():
    return (
        st.lists(st.floats(-100, 100), min_size=3, max_size=30),
        st.floats(0.5, 3.0),
        st.floats(-20, 20),
    )


def test_rmse_hand_values():
    assert rmse([1.0, 2.0], [1.0, 2.0], 1.0) == 0.0
    assert abs(rmse([0.0, 0.0], [3.0, 4.0], 1.0) - np.sqrt(12.5)) < 1e-12
    assert rmse([0.0, 0.0], [3.0, 4.0], 2.0) == rmse([0.0, 0.0], [3.0, 4.0], 1.0) / 2.0


def test_rmse_scale_identity():
    rng = np.random.default_rng(0)
    t = rng.normal(size=20)
    p = rng.normal(size=20)
    s = 3.7
    assert abs(rmse(t, p, s) - rmse(t / s, p / s, 1.0)) <= 1e-12


def test_rmse_errors():
    with pytest.raises(MetricError):
        rmse([], [], 1.0)
    with pytest.raises(MetricError):
        rmse([1.0], [1.0], 0.0)


def test_r_squared_hand_values():
    assert r_squared([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 1.0
    assert r_squared([1.0, 2.0, 3.0], [2.0, 2.0, 2.0]) == 0.0
    assert abs(r_squared([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]) - 0.5) < 1e-12
    with pytest.raises(MetricError):
        r_squared([2.0, 2.0], [1.0, 2.0])


def test_r_squared_cross_metric_identity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t = rng.normal(size=15)
        p = rng.normal(size=15)
        n = t.size
        ss_tot = np.sum((t - t.mean()) ** 2)
        identity = 1.0 - n * rmse(t, p, 1.0) ** 2 / ss_tot
        assert abs(r_squared(t, p) - identity) <= 1e-12


def test_pearson_hand_values():
    t = np.array([1.0, 2.0, 3.0])
    assert abs(pearson_corr(t, 2 * t + 3) - 1.0) < 1e-12
    assert abs(pearson_corr(t, -(t - 2.0) + 2.0) + 1.0) < 1e-12
    assert abs(pearson_corr(t, [1.0, 3.0, 2.0]) - 0.5) < 1e-12
    with pytest.raises(MetricError):
        pearson_corr(t, [1.0, 1.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(*_vectors())
def test_pearson_affine_invariance(values, scale, shift):
    t = np.array(values)
    p = np.sin(t) + 0.1 * t  # deterministic partner with spread
    if np.std(t) < 1e-6 or np.std(p) < 1e-6:
        return
    base = pearson_corr(t, p)
    assert abs(pearson_corr(t * scale + shift, p) - base) <= 1e-9
    assert abs(pearson_corr(t, p * scale + shift) - base) <= 1e-9


def _labeled_dataset(seed=0):
    counties = ("00000", "00001", "00002", "00003")
    years = tuple(range(2000, 2008))
    yields = {}
    rng = np.random.default_rng(seed)
    for i, c in enumerate(counties):
        for y in years:
            yields[(c, y, "corn")] = 80.0 + 5 * i + 0.5 * (y - 2000) + rng.uniform(0, 3)
    return make_dataset(
        counties=counties, years=years, seed=seed,
        edges=[("00000", "00001"), ("00001", "00002"), ("00002", "00003")],
        yields=yields,
    )


def test_evaluate_oracle_checkpoint_perfect_metrics():
    ds = _labeled_dataset()
    report = evaluate(OraclePredictor(ds), ds, YearSplit(test_year=2007))
    assert report.rmse_normalized == 0.0
    assert report.r2 == 1.0
    assert abs(report.corr - 1.0) < 1e-12
    assert report.n_counties == 4


def test_evaluate_constant_predictor_nonpositive_r2():
    ds = _labeled_dataset()
    report = evaluate(OraclePredictor(ds, mode="constant"), ds, YearSplit(test_year=2007))
    assert report.r2 <= 0.0


def test_evaluate_metrics_recomputable_from_records():
    ds = _labeled_dataset()
    report = evaluate(OraclePredictor(ds, mode="noisy"), ds, YearSplit(test_year=2007))
    true = np.array([r[1] for r in report.records])
    pred = np.array([r[2] for r in report.records])
    assert abs(report.rmse_normalized - rmse(true, pred, report.yield_std)) <= 1e-12
    assert abs(report.r2 - r_squared(true, pred)) <= 1e-12
    assert abs(report.corr - pearson_corr(true, pred)) <= 1e-12


def test_masking_plan_cutoff_52_is_identity():
    ds = _labeled_dataset()
    split = YearSplit(test_year=2007)
    plan = build_masking_plan(ds, split, cutoff_week=52)
    feats = ds.features("00000", 2007)
    masked = apply_early_mask(feats, plan)
    assert np.array_equal(masked.weather, feats.weather)
    assert np.array_equal(masked.land_surface, feats.land_surface)


def test_masking_boundary_week():
    ds = _labeled_dataset()
    split = YearSplit(test_year=2007)
    plan = build_masking_plan(ds, split)
    feats = ds.features("00000", 2007)
    masked = apply_early_mask(feats, plan)
    assert np.array_equal(masked.weather[:, :22], feats.weather[:, :22])
    assert np.array_equal(masked.weather[:, 22], plan.weather_means["00000"][:, 22])
    assert np.array_equal(masked.soil, feats.soil)
    assert np.array_equal(masked.extras, feats.extras, equal_nan=True)


def test_masking_idempotent():
    ds = _labeled_dataset()
    plan = build_masking_plan(ds, YearSplit(test_year=2007))
    feats = ds.features("00001", 2007)
    once = apply_early_mask(feats, plan)
    twice = apply_early_mask(once, plan)
    assert np.array_equal(once.weather, twice.weather)
    assert np.array_equal(once.land_surface, twice.land_surface)


def test_masking_unknown_county_errors():
    ds = _labeled_dataset()
    plan = build_masking_plan(ds, YearSplit(test_year=2007))
    feats = ds.features("00000", 2007)
    feats.county = "99999"
    with pytest.raises(KeyError):
        apply_early_mask(feats, plan)


def test_mask_dataset_year_touches_only_target_year():
    ds = _labeled_dataset()
    split = YearSplit(test_year=2007)
    plan = build_masking_plan(ds, split)
    masked = mask_dataset_year(ds, plan, 2007)
    yi = ds.year_index[2007]
    assert not np.array_equal(masked.weather[:, yi], ds.weather[:, yi])
    assert np.array_equal(masked.weather[:, : yi], ds.weather[:, : yi])
    assert np.array_equal(masked.soil, ds.soil)


def test_emit_report_files_and_roundtrip(tmp_path):
    ds = _labeled_dataset()
    report = evaluate(OraclePredictor(ds, mode="noisy"), ds, YearSplit(test_year=2007))
    metrics_path, csv_path, svg_path = emit_report(report, tmp_path / "out")

    lines = open(csv_path, encoding="utf-8").read().splitlines()
    assert lines[0] == "county,year,true,predicted"
    assert len(lines) == 1 + report.n_counties

    parsed = parse_metrics(metrics_path)
    assert parsed["rmse"] == report.rmse_normalized
    assert parsed["r2"] == report.r2
    assert parsed["corr"] == report.corr
    assert parsed["n"] == report.n_counties

    true, pred = [], []
    for line in lines[1:]:
        _, _, t, p = line.split(",")
        true.append(float(t))
        pred.append(float(p))
    assert abs(rmse(true, pred, report.yield_std) - parsed["rmse"]) <= 1e-12
    assert abs(r_squared(true, pred) - parsed["r2"]) <= 1e-12

    tree = ET.parse(svg_path)
    circles = [e for e in tree.iter() if e.tag.endswith("circle")]
    assert len(circles) == report.n_counties


def test_emit_report_empty_scatter_guard(tmp_path):
    report = EvalReport(
        crop="corn", test_year=2007, method="m", seed=0,
        rmse_normalized=0.0, r2=1.0, corr=1.0, n_counties=1, yield_std=1.0,
        records=[("c", 5.0, 5.0, 0.0)],
    )
    _, _, svg_path = emit_report(report, tmp_path / "one")
    ET.parse(svg_path)  # well-formed even with a degenerate range
