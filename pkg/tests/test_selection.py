import itertools
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hierreward.errors import AllTiesError, NoComparablePairsError, ValidationError
from hierreward.reward_core import Trajectory
from hierreward.selection import (
    ComparisonPair,
    InconsistencyCounts,
    Outcome,
    SelectionReport,
    grammar_error_rate,
    inconsistency,
    select_rewards,
    slice_correct_rate,
    win_rate,
)


def pair(h_a, h_b, **aspects):
    return ComparisonPair(0, h_a, h_b, aspects)


def brute_inconsistency(pairs, name):
    """Recount from scratch with explicit sign arithmetic."""
    compared = divergent = 0
    for p in pairs:
        dh = p.holistic_a - p.holistic_b
        if dh == 0:
            continue
        compared += 1
        sa, sb = p.aspect_scores[name]
        da = sa - sb
        if da != 0 and (da > 0) != (dh > 0):
            divergent += 1
    return divergent / compared


def brute_win_rate(outcomes):
    w = outcomes.count(Outcome.WIN_A)
    l = outcomes.count(Outcome.WIN_B)
    return w / (w + l)


def test_slice_correct_rate_examples():
    assert slice_correct_rate([True, True, True]) == 1.0
    assert slice_correct_rate([True, False, True, False]) == 0.5
    assert slice_correct_rate([True] * 7 + [False] * 2) == 7 / 9
    with pytest.raises(ValidationError):
        slice_correct_rate([])


def test_grammar_error_rate_examples():
    assert grammar_error_rate(0, 50) == 0.0
    assert grammar_error_rate(1, 100) == 0.01
    with pytest.raises(ValidationError):
        grammar_error_rate(1, 0)
    with pytest.raises(ValidationError):
        grammar_error_rate(-1, 5)


def test_inconsistency_counting_example():
    # 2 holistic ties, 3 of the remaining 8 divergent
    pairs = [pair(1, 1, x=(1, 0))] * 2
    pairs += [pair(1, 0, x=(0, 1))] * 3
    pairs += [pair(1, 0, x=(1, 0))] * 3
    pairs += [pair(0, 1, x=(0, 0))] * 2  # aspect ties count as consistent
    rate, counts = inconsistency(pairs, "x")
    assert rate == 0.375
    assert (counts.compared, counts.tie_dropped, counts.divergent) == (8, 2, 3)
    assert counts.compared + counts.tie_dropped == len(pairs)


def test_inconsistency_self_is_zero():
    rng = random.Random(0)
    pairs = []
    for _ in range(50):
        a, b = rng.random(), rng.random()
        pairs.append(pair(a, b, h=(a, b)))
    assert inconsistency(pairs, "h")[0] == 0.0


def test_inconsistency_errors():
    with pytest.raises(ValidationError):
        inconsistency([pair(1, 0, x=(1, 0))], "y")
    with pytest.raises(NoComparablePairsError):
        inconsistency([pair(1, 1, x=(1, 0))], "x")


def test_pair_invariants():
    t0 = Trajectory(0, (1,), (0.0,))
    t1 = Trajectory(1, (1,), (0.0,))
    with pytest.raises(ValidationError):
        ComparisonPair(0, 1.0, 0.0, {}, t0, t1)
    with pytest.raises(ValidationError):
        ComparisonPair(0, 1.0, 0.0, {"x": (1.0,)})


def test_win_rate_examples():
    W, L, T = Outcome.WIN_A, Outcome.WIN_B, Outcome.TIE
    assert win_rate([W, W, W, L, T, T]) == 0.75
    assert win_rate([L, L]) == 0.0
    assert win_rate([W, L] * 4) == 0.5
    with pytest.raises(AllTiesError):
        win_rate([T, T])


def test_counts_merge_equals_single_pass():
    rng = random.Random(3)
    pairs = [pair(rng.randint(0, 3), rng.randint(0, 3), x=(rng.randint(0, 2), rng.randint(0, 2))) for _ in range(200)]
    whole = inconsistency(pairs, "x")[1]
    merged = InconsistencyCounts()
    for k in range(0, 200, 37):
        merged = merged.merge(inconsistency(pairs[k : k + 37], "x")[1])
    assert merged == whole


def test_select_rewards_example_ranking():
    # holistic prefers A on all 100 pairs; each aspect disagrees on a set count
    target = {"fact": 30, "relevance": 45, "completeness": 48, "length": 50}
    pairs = []
    for i in range(100):
        scores = {k: ((0.0, 1.0) if i < n else (1.0, 0.0)) for k, n in target.items()}
        pairs.append(pair(1.0, 0.0, **scores))
    report = select_rewards(pairs, list(target), max_selected=1)
    assert report.chosen == ("fact",)
    assert {k: v.inconsistency for k, v in report.aspects.items()} == {k: n / 100 for k, n in target.items()}


def test_select_single_candidate():
    report = select_rewards([pair(1, 0, x=(0, 1))], ["x"])
    assert report.chosen == ("x",)


def test_select_tie_break_by_win_rate_gap():
    # holistic: greedy wins 3 of 4; both aspects have zero inconsistency
    pairs = [
        pair(1, 0, near=(1, 0), far=(0, 0)),
        pair(1, 0, near=(1, 0), far=(0, 0)),
        pair(1, 0, near=(0, 0), far=(0, 0)),
        pair(0, 1, near=(0, 1), far=(0, 1)),
    ]
    report = select_rewards(pairs, ["far", "near"])
    assert report.aspects["near"].inconsistency == report.aspects["far"].inconsistency == 0.0
    assert report.chosen == ("near",)


def test_select_validation():
    with pytest.raises(ValidationError):
        select_rewards([pair(1, 0, x=(0, 1))], [])
    with pytest.raises(ValidationError):
        select_rewards([pair(1, 0, x=(0, 1))], ["x"], max_selected=0)


def test_report_round_trip():
    rng = random.Random(5)
    pairs = [pair(rng.random(), rng.random(), a=(rng.random(), rng.random()), b=(1.0, 1.0)) for _ in range(30)]
    report = select_rewards(pairs, ["a", "b"], max_selected=2)
    assert SelectionReport.from_dict(report.to_dict()) == report


# --- properties ---------------------------------------------------------------

small = st.integers(0, 3)


@st.composite
def pair_sets(draw, names=("a", "b", "c", "d")):
    n = draw(st.integers(1, 40))
    out = []
    for _ in range(n):
        scores = {k: (float(draw(small)), float(draw(small))) for k in names}
        out.append(ComparisonPair(0, float(draw(small)), float(draw(small)), scores))
    return out


@given(pair_sets())
def test_inconsistency_symmetric_under_swap(pairs):
    if all(p.holistic_a == p.holistic_b for p in pairs):
        return
    for name in "abcd":
        assert inconsistency(pairs, name) == inconsistency([p.swapped() for p in pairs], name)


@given(pair_sets())
def test_inconsistency_matches_brute_force(pairs):
    if all(p.holistic_a == p.holistic_b for p in pairs):
        return
    for name in "abcd":
        assert inconsistency(pairs, name)[0] == brute_inconsistency(pairs, name)


@given(st.lists(st.sampled_from(list(Outcome)), min_size=1, max_size=30))
def test_win_rate_swap_sums_to_one(outcomes):
    flip = {Outcome.WIN_A: Outcome.WIN_B, Outcome.WIN_B: Outcome.WIN_A, Outcome.TIE: Outcome.TIE}
    if all(o is Outcome.TIE for o in outcomes):
        return
    assert win_rate(outcomes) + win_rate([flip[o] for o in outcomes]) == pytest.approx(1.0, abs=1e-12)


@given(pair_sets(), st.permutations(["a", "b", "c", "d"]), st.integers(1, 4))
def test_selection_invariant_to_candidate_order(pairs, perm, k):
    if all(p.holistic_a == p.holistic_b for p in pairs):
        return
    assert select_rewards(pairs, perm, k).chosen == select_rewards(pairs, sorted(perm), k).chosen


def test_win_rate_exhaustive_small_lists():
    for n in range(1, 7):
        for combo in itertools.product(list(Outcome), repeat=n):
            combo = list(combo)
            if all(o is Outcome.TIE for o in combo):
                with pytest.raises(AllTiesError):
                    win_rate(combo)
            else:
                assert win_rate(combo) == brute_win_rate(combo)
