import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierreward.errors import DegenerateCalibrationError, ValidationError
from hierreward.reward_core import (
    Density,
    HierarchicalRewardConfig,
    NormalizationStats,
    RewardSignal,
    Shaping,
    Trajectory,
    aggregate_signal,
    combine,
    combine_ungated,
    fit_normalization,
    quantile_threshold,
    shape_sigmoid,
    z_normalize,
)


def traj(n, segments=None):
    return Trajectory(0, tuple(range(1, n + 1)), (0.0,) * n, segments)


def decimal_sigmoid(x: str) -> float:
    """High-precision reference: 1 / (1 + e^-x) evaluated with 50 digits."""
    getcontext().prec = 50
    return float(1 / (1 + (-Decimal(x)).exp()))


UNIT = NormalizationStats(0.0, 1.0, 2)


# --- normalization ---------------------------------------------------------


def test_z_normalize_examples():
    stats = NormalizationStats(2.0, 1.0, 10)
    assert z_normalize(2.0, stats) == 0.0
    assert z_normalize(3.5, stats) == 1.5


def test_fit_normalization_two_points():
    s = fit_normalization([0.0, 2.0])
    assert (s.mean, s.stddev, s.sample_count) == (1.0, 1.0, 2)


def test_fit_normalization_degenerate():
    with pytest.raises(DegenerateCalibrationError):
        fit_normalization([5, 5, 5])


def test_fit_normalization_needs_two_samples():
    with pytest.raises(ValidationError):
        fit_normalization([1.0])


def test_stats_reject_nonpositive_stddev():
    with pytest.raises(ValidationError):
        NormalizationStats(0.0, 0.0, 3)


def test_round_trip_on_small_set():
    samples = [1.0, 2.0, 3.0, 4.0]
    stats = fit_normalization(samples)
    z = [z_normalize(x, stats) for x in samples]
    # independent pass: plain Python mean and population variance
    mean = sum(z) / len(z)
    var = sum((v - mean) ** 2 for v in z) / len(z)
    assert abs(mean) < 1e-12
    assert abs(math.sqrt(var) - 1.0) < 1e-12


def test_fit_normalization_standard_normal():
    x = np.random.default_rng(1234).standard_normal(1000)
    s = fit_normalization(x)
    assert abs(s.mean) < 0.1 and abs(s.stddev - 1.0) < 0.1


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=50))
def test_z_round_trip_property(samples):
    if max(samples) - min(samples) < 1e-3:
        return
    stats = fit_normalization(samples)
    z = np.array([z_normalize(x, stats) for x in samples])
    assert abs(z.mean()) < 1e-9
    assert abs(z.std() - 1.0) < 1e-9


# --- quantile threshold -------------------------------------------------------


def test_quantile_counts_exactly_three_of_ten():
    samples = [float(i) for i in range(1, 11)]
    t = quantile_threshold(samples, 0.3)
    assert sum(1 for s in samples if s >= t) == 3


def test_quantile_median_region():
    samples = [-2.0, -1.0, 0.0, 1.0, 2.0]
    assert quantile_threshold(samples, 0.5) == 0.0


def test_quantile_standard_normal_matches_sort_oracle():
    x = np.random.default_rng(7).standard_normal(10_000)
    t = quantile_threshold(x, 0.3)
    oracle = sorted(x.tolist())[7000]
    assert t == oracle
    assert abs(t - 0.524) < 0.05


def test_quantile_rejects_empty_and_bad_fraction():
    with pytest.raises(ValidationError):
        quantile_threshold([], 0.3)
    with pytest.raises(ValidationError):
        quantile_threshold([1.0], 1.0)


@given(
    st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=200, unique=True),
    st.floats(0.01, 0.99),
)
def test_quantile_admits_about_top_fraction(samples, f):
    t = quantile_threshold(samples, f)
    n = len(samples)
    admitted = sum(1 for s in samples if s >= t)
    assert t in samples
    assert abs(admitted - f * n) <= 1.0 + 1e-6


# --- shaping and aggregation ---------------------------------------------------


def test_sigmoid_examples():
    assert shape_sigmoid(0.0) == 0.5
    assert shape_sigmoid(-1.0) == pytest.approx(decimal_sigmoid("-1"), abs=1e-15)
    assert shape_sigmoid(0.5) == pytest.approx(decimal_sigmoid("0.5"), abs=1e-15)
    assert round(shape_sigmoid(-1.0), 5) == 0.26894
    assert round(shape_sigmoid(0.5), 5) == 0.62246


@given(st.floats(-700, 700, allow_nan=False))
def test_sigmoid_in_open_unit_interval(x):
    y = shape_sigmoid(x)
    assert 0.0 <= y <= 1.0
    if abs(x) < 30:
        assert 0.0 < y < 1.0


def test_aggregate_token_all_zero():
    sig = RewardSignal("g", Density.TOKEN, (0.0, 0.0, 0.0))
    assert aggregate_signal(sig, traj(3)) == 1.5


def test_aggregate_sequence():
    sig = RewardSignal("f", Density.SEQUENCE, (0.5,))
    assert aggregate_signal(sig, traj(4)) == pytest.approx(decimal_sigmoid("0.5"), abs=1e-15)


def test_aggregate_segment_cancels_without_shaping():
    sig = RewardSignal("f", Density.SEGMENT, (0.5, -0.5))
    assert aggregate_signal(sig, traj(4, ((0, 2), (2, 4))), Shaping.NONE) == 0.0


def test_aggregate_length_mismatch():
    with pytest.raises(ValidationError):
        aggregate_signal(RewardSignal("g", Density.TOKEN, (0.0, 0.0)), traj(3))
    with pytest.raises(ValidationError):
        aggregate_signal(RewardSignal("f", Density.SEGMENT, (0.1,)), traj(3))


@given(st.lists(st.floats(-30, 30, allow_nan=False), min_size=1, max_size=40))
def test_token_shaped_sum_in_open_interval(values):
    n = len(values)
    total = aggregate_signal(RewardSignal("g", Density.TOKEN, tuple(values)), traj(n))
    assert 0.0 < total < n


def test_trajectory_invariants():
    with pytest.raises(ValidationError):
        Trajectory(0, (), ())
    with pytest.raises(ValidationError):
        Trajectory(0, (1, 2), (0.0,))
    with pytest.raises(ValidationError):
        Trajectory(0, (1, 2, 3), (0.0,) * 3, ((0, 1), (2, 3)))
    with pytest.raises(ValidationError):
        Trajectory(0, (1, 2, 3), (0.0,) * 3, ((0, 2),))


# --- combiner ------------------------------------------------------------------


def test_combine_below_threshold():
    cfg = HierarchicalRewardConfig(threshold=0.6, holistic_weight=5.0, selected_aspects=("f",))
    sig = RewardSignal("f", Density.SEQUENCE, (0.5,))
    r = combine(0.4, [sig], traj(2), cfg, UNIT)
    assert not r.gated
    assert r.final == pytest.approx(5 * 0.4)
    assert r.aspect_contributions == {"f": 0.0}


def test_combine_boundary_is_gated():
    cfg = HierarchicalRewardConfig(threshold=0.6, holistic_weight=5.0, selected_aspects=("f",))
    sig = RewardSignal("f", Density.SEQUENCE, (0.5,))
    assert combine(0.6, [sig], traj(2), cfg, UNIT).gated


def test_combine_above_threshold():
    cfg = HierarchicalRewardConfig(
        threshold=0.6, holistic_weight=5.0, aspect_weights={"f": 1.0}, selected_aspects=("f",)
    )
    sig = RewardSignal("f", Density.SEQUENCE, (0.5,))
    r = combine(0.7, [sig], traj(2), cfg, UNIT)
    assert r.gated
    assert r.final == pytest.approx(5 * 0.7 + decimal_sigmoid("0.5"), abs=1e-12)
    assert round(r.final, 5) == 4.12246


def test_combine_ignores_unselected_and_requires_selected():
    cfg = HierarchicalRewardConfig(threshold=0.0, selected_aspects=("f",))
    f = RewardSignal("f", Density.SEQUENCE, (0.0,))
    other = RewardSignal("x", Density.SEQUENCE, (100.0,))
    r = combine(1.0, [f, other], traj(2), cfg, UNIT)
    assert set(r.aspect_contributions) == {"f"}
    with pytest.raises(ValidationError):
        combine(1.0, [other], traj(2), cfg, UNIT)


def test_combine_rejects_non_finite_holistic():
    cfg = HierarchicalRewardConfig(threshold=0.0)
    with pytest.raises(ValidationError):
        combine(float("nan"), [], traj(1), cfg, UNIT)


def test_combine_ungated_raw_sum():
    cfg = HierarchicalRewardConfig(threshold=10.0, holistic_weight=2.0, selected_aspects=("g",))
    g = RewardSignal("g", Density.TOKEN, (-1.0, 0.0, -1.0))
    r = combine_ungated(1.0, [g], traj(3), cfg, UNIT)
    assert r.final == 2.0 - 2.0
    r = combine_ungated(1.0, [g], traj(3), cfg, UNIT, include_holistic=False)
    assert r.final == -2.0


# --- properties ------------------------------------------------------------------

@st.composite
def config_and_pair(draw):
    threshold = draw(st.floats(-3, 3))
    w_h = draw(st.floats(0.01, 10))
    n_aspects = draw(st.integers(0, 3))
    weights = {f"a{i}": draw(st.floats(0.01, 10)) for i in range(n_aspects)}
    cfg = HierarchicalRewardConfig(threshold, w_h, weights, Shaping.SIGMOID, tuple(weights))
    n = draw(st.integers(1, 8))
    t = traj(n)
    token_values = st.lists(st.floats(-20, 20), min_size=n, max_size=n)
    sig_a = [RewardSignal(k, Density.TOKEN, tuple(draw(token_values))) for k in weights]
    sig_b = [RewardSignal(k, Density.SEQUENCE, (draw(st.floats(-20, 20)),)) for k in weights]
    h_a = draw(st.floats(threshold, threshold + 5))
    h_b = draw(st.floats(threshold - 5, threshold).filter(lambda x: x < threshold))
    return cfg, t, sig_a, sig_b, h_a, h_b


@settings(max_examples=300)
@given(config_and_pair())
def test_hierarchy_dominance(case):
    cfg, t, sig_a, sig_b, h_a, h_b = case
    ra = combine(h_a, sig_a, t, cfg, UNIT)
    rb = combine(h_b, sig_b, t, cfg, UNIT)
    assert ra.gated and not rb.gated
    assert ra.final > rb.final


@given(
    st.floats(-3, 3),
    st.lists(st.floats(-5, 5), min_size=2, max_size=10),
    st.floats(-10, 10),
)
def test_gate_monotonic_in_holistic(threshold, hs, aspect_raw):
    cfg = HierarchicalRewardConfig(threshold, 5.0, selected_aspects=("f",))
    sig = RewardSignal("f", Density.SEQUENCE, (aspect_raw,))
    finals = [combine(h, [sig], traj(1), cfg, UNIT).final for h in sorted(hs)]
    assert all(b >= a for a, b in zip(finals, finals[1:]))


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 10))
def test_empty_selection_equals_holistic_only(h, threshold, w_h):
    cfg = HierarchicalRewardConfig(threshold, w_h)
    r = combine(h, [RewardSignal("x", Density.SEQUENCE, (3.0,))], traj(1), cfg, UNIT)
    assert r.final == w_h * h
    assert r.aspect_contributions == {}


@given(st.floats(-5, 5), config_and_pair())
def test_gated_contributions_positive(h, case):
    cfg, t, sig_a, *_ = case
    r = combine(cfg.threshold + abs(h), sig_a, t, cfg, UNIT)
    assert r.gated
    assert all(v > 0 for v in r.aspect_contributions.values())
