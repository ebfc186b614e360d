import json
import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats as scipy_stats

from errors import StatisticsError, ValidationError
from stats import (
    ABLATION_COLUMNS,
    METRIC_COLUMNS,
    ablation_table,
    bootstrap_ci,
    chi2_sf,
    classification_metrics,
    cohens_d,
    cohens_d_weighted,
    comparison_table,
    detection_delay,
    false_alarm_rate,
    kruskal_wallis,
    metric_table,
    roc_auc,
    score_distribution,
    summarize_delays,
    t_two_tailed_p,
    welch_t,
    write_plot_data,
    write_table,
)


def test_classification_metrics_counts():
    report = classification_metrics([1, 1, 0, 0, 1, 0], [1, 0, 0, 1, 1, 0])
    assert (report.tp, report.fp, report.tn, report.fn) == (2, 1, 2, 1)
    assert report.accuracy == pytest.approx(4 / 6)
    assert report.precision == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(2 / 3)
    assert report.f1 == pytest.approx(2 / 3)
    assert report.n == 6
    assert report.undefined == []


def test_zero_denominators_are_flagged():
    report = classification_metrics([0, 0, 0], [0, 0, 0])
    assert report.precision == 0.0 and report.recall == 0.0 and report.f1 == 0.0
    assert report.undefined == ["precision", "recall", "f1"]
    assert report.accuracy == 1.0


def test_classification_metrics_rejects_bad_input():
    with pytest.raises(ValidationError):
        classification_metrics([0, 1], [1])
    with pytest.raises(ValidationError):
        classification_metrics([0, 2], [0, 1])
    with pytest.raises(ValidationError):
        classification_metrics([], [])


@pytest.mark.parametrize(
    "scores,expected",
    [
        ([0.1, 0.2, 0.8, 0.9], 1.0),
        ([0.9, 0.8, 0.2, 0.1], 0.0),
        ([0.5, 0.5, 0.5, 0.5], 0.5),
    ],
)
def test_roc_auc_cases(scores, expected):
    assert roc_auc([0, 0, 1, 1], scores) == pytest.approx(expected)


def test_roc_auc_needs_both_classes():
    with pytest.raises(StatisticsError):
        roc_auc([1, 1], [0.2, 0.3])


def test_detection_delay_and_summary():
    assert detection_delay(10, [3, 12, 15]) == 2.0
    assert detection_delay(10, [3, 7]) is None
    summary = summarize_delays(iter([2.0, None, 4.0]))
    assert summary.mean_delay == pytest.approx(3.0)
    assert (summary.n_detected, summary.n_missed) == (2, 1)
    assert summary.miss_rate == pytest.approx(1 / 3)
    assert summarize_delays([None]).mean_delay is None


def test_false_alarm_rate():
    assert false_alarm_rate([0, 0, 0, 1], [1, 0, 0, 1]) == pytest.approx(1 / 3)
    assert false_alarm_rate([1, 1], [0, 1]) == 0.0


def test_welch_t_worked_example():
    result = welch_t([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
    assert result.statistic == pytest.approx(-1.0)
    assert result.dof == pytest.approx(8.0)
    assert result.p_value == pytest.approx(0.3466, abs=1e-4)
    assert result.effect_size == pytest.approx(-1 / math.sqrt(2.5))


def test_welch_t_matches_scipy(rng):
    a = rng.normal(0.0, 1.0, size=40)
    b = rng.normal(0.4, 2.0, size=25)
    ours = welch_t(a, b)
    reference = scipy_stats.ttest_ind(a, b, equal_var=False)
    assert ours.statistic == pytest.approx(reference.statistic, rel=1e-10)
    assert ours.p_value == pytest.approx(reference.pvalue, rel=1e-8)


def test_welch_effect_size_has_the_sign_of_t(rng):
    for _ in range(20):
        a = rng.normal(rng.normal(), 1.0, size=12)
        b = rng.normal(rng.normal(), 2.0, size=9)
        forward, backward = welch_t(a, b), welch_t(b, a)
        assert np.sign(forward.effect_size) == np.sign(forward.statistic)
        assert backward.effect_size == pytest.approx(-forward.effect_size)
        assert backward.statistic == pytest.approx(-forward.statistic)


def test_welch_t_degenerate():
    with pytest.raises(StatisticsError):
        welch_t([1.0, 1.0], [2.0, 2.0])
    with pytest.raises(StatisticsError):
        welch_t([1.0], [2.0, 3.0])


def test_distribution_tails():
    assert t_two_tailed_p(0.0, 5.0) == pytest.approx(1.0)
    assert t_two_tailed_p(2.0, 10.0) == pytest.approx(2 * scipy_stats.t.sf(2.0, 10.0))
    assert chi2_sf(7.2, 2.0) == pytest.approx(math.exp(-3.6))
    assert chi2_sf(0.0, 3.0) == 1.0


def test_cohens_d_example():
    assert 2.7 <= cohens_d(0.15, 0.05, 0.32, 0.07) <= 2.9
    assert cohens_d_weighted(0.0, 1.0, 10, 1.0, 1.0, 10) == pytest.approx(1.0)
    with pytest.raises(StatisticsError):
        cohens_d(0.0, 0.0, 1.0, 0.0)


def test_kruskal_wallis_worked_example():
    result = kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
    assert result.statistic == pytest.approx(7.2)
    assert result.dof == 2.0
    assert result.p_value == pytest.approx(math.exp(-3.6))
    assert result.effect_size == pytest.approx((7.2 - 2) / 6)


def test_kruskal_wallis_matches_scipy_with_ties():
    groups = [[1, 2, 2, 3, 5], [2, 4, 4, 6], [5, 5, 7, 8, 8, 9]]
    ours = kruskal_wallis(groups)
    reference = scipy_stats.kruskal(*groups)
    assert ours.statistic == pytest.approx(reference.statistic)
    assert ours.p_value == pytest.approx(reference.pvalue)


def test_kruskal_wallis_degenerate():
    with pytest.raises(StatisticsError):
        kruskal_wallis([[1, 2, 3]])
    with pytest.raises(StatisticsError):
        kruskal_wallis([[1, 2], []])
    with pytest.raises(StatisticsError):
        kruskal_wallis([[1.0, 1.0, 1.0], [1.0, 1.0]])


def test_bootstrap_constant_sample():
    assert bootstrap_ci([3.0] * 10) == (3.0, 3.0)


def test_bootstrap_is_deterministic_and_bounded(rng):
    sample = rng.normal(5.0, 2.0, size=60)
    lo, hi = bootstrap_ci(sample, seed=11)
    assert (lo, hi) == bootstrap_ci(sample, seed=11)
    assert sample.min() <= lo < hi <= sample.max()


def test_bootstrap_width_matches_normal_approximation(rng):
    sample = rng.normal(0.0, 1.0, size=400)
    lo, hi = bootstrap_ci(sample, n_resamples=5000, seed=1)
    expected = 2 * 1.96 * sample.std(ddof=1) / math.sqrt(sample.size)
    assert hi - lo == pytest.approx(expected, rel=0.15)


def test_bootstrap_rejects_bad_arguments():
    with pytest.raises(StatisticsError):
        bootstrap_ci([])
    with pytest.raises(StatisticsError):
        bootstrap_ci([1.0])
    with pytest.raises(ValidationError):
        bootstrap_ci([1.0, 2.0], n_resamples=10)


def test_score_distribution_summary():
    summary = score_distribution([0.1, 0.2, 0.15, 0.12], [0.8, 0.9, 0.85])
    assert summary["normal"]["n"] == 4
    assert summary["attack"]["max"] == pytest.approx(0.9)
    assert summary["cohens_d"] > 0
    assert summary["welch"]["statistic"] > 0

    flat = score_distribution([0.1, 0.1], [0.1, 0.1])
    assert flat["cohens_d"] is None and flat["welch"] is None


def test_tables_and_plot_data(tmp_path):
    report = classification_metrics([1, 0, 1, 0], [1, 0, 0, 0])
    report.auc = 0.75
    frame = metric_table([("full", report)])
    assert list(frame.columns) == METRIC_COLUMNS
    write_table(frame, tmp_path / "metrics.json")
    records = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))
    assert records[0]["Model"] == "full"
    assert records[0]["AUC"] == pytest.approx(0.75)

    ablation = ablation_table([("full", 0.9, 2.0), ("no_gat", 0.8, None)])
    assert list(ablation.columns) == ABLATION_COLUMNS
    write_table(ablation, tmp_path / "ablation.csv")
    assert pd.read_csv(tmp_path / "ablation.csv")["Variant"].tolist() == ["full", "no_gat"]

    comparison = comparison_table([("full vs no_gat", welch_t([1, 2, 3], [2, 4, 6]))])
    assert comparison.loc[0, "DoF"] > 0

    points = write_plot_data(tmp_path / "plot.csv", {"a": ([0, 1], [0.1, 0.2]), "b": ([0], [0.5])})
    assert points == 3
    plot = pd.read_csv(tmp_path / "plot.csv")
    assert list(plot.columns) == ["x", "y", "series"]
    assert plot["series"].tolist() == ["a", "a", "b"]
