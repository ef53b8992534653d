from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lma3.metrics import (
    CorpusTooSmall,
    DiversityReport,
    EmptyDistribution,
    EmptyGoal,
    StemDistribution,
    abstraction_counts,
    cosine_distance,
    diversity_timeseries,
    embed,
    hill_number,
    novelty,
    stem_h_index,
    stem_of,
    unique_goals,
    uniqueness_novelty,
)

counts_st = st.dictionaries(st.text(alphabet="abcdefgh", min_size=1, max_size=4),
                            st.integers(min_value=1, max_value=200), min_size=1, max_size=20)


def brute_h(counts):
    return max([h for h in range(0, len(counts) + 1) if sum(c >= h for c in counts) >= h])


@pytest.mark.parametrize("text, stem", [("cutting the apple", "cut"), ("Slice the red potato", "slice"),
                                        ("roasted a white onion", "roast"), ("the fridge, open it", "fridg"),
                                        ("  An Open door!", "open")])
def test_stem_of(text, stem):
    assert stem_of(text) == stem


def test_stem_of_empty():
    for bad in ("", "the", "  a an the  ", "!!!"):
        with pytest.raises(EmptyGoal):
            stem_of(bad)


VERBS = ["slice", "dice", "chop", "cut", "fry", "roast", "grill", "cook", "open", "close", "pick", "put", "eat",
         "go", "read", "prepare", "cutting", "roasted", "opened", "eating", "picked", "frying", "sliced", "grilling"]


@given(st.sampled_from(VERBS), st.text(alphabet="abc ", max_size=10))
def test_stem_idempotent_on_verbs(verb, rest):
    s = stem_of(f"{verb} {rest}")
    assert stem_of(s + " rest") == s


def test_hill_examples():
    d = StemDistribution({"cut": 2, "open": 1})
    assert hill_number(d, 0) == 2
    expected = math.exp(-(2 / 3) * math.log(2 / 3) - (1 / 3) * math.log(1 / 3))
    assert hill_number(d, 1) == pytest.approx(expected, abs=1e-12)
    assert hill_number(d, 1) == pytest.approx(1.8899, abs=1e-4)
    for k in (1, 3, 7):
        u = StemDistribution({str(i): 5 for i in range(k)})
        for q in (0, 1, 2):
            assert hill_number(u, q) == pytest.approx(k)
    with pytest.raises(EmptyDistribution):
        hill_number(StemDistribution({}), 1)
    with pytest.raises(ValueError):
        hill_number(d, -1)


def numpy_hill(counts, q):
    p = np.asarray(counts, dtype=float) / np.sum(counts)
    if q == 1:
        return float(np.exp(-np.sum(p * np.log(p))))
    return float(np.sum(p**q) ** (1.0 / (1.0 - q)))


@settings(max_examples=200, deadline=None)
@given(counts_st, st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.5]))
def test_hill_matches_numpy(counts, q):
    assert hill_number(counts, q) == pytest.approx(numpy_hill(list(counts.values()), q), rel=1e-9, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(counts_st, st.floats(0, 5), st.floats(0, 5))
def test_hill_monotone(counts, q1, q2):
    lo, hi = sorted((q1, q2))
    assert hill_number(counts, lo) >= hill_number(counts, hi) - 1e-9


@settings(max_examples=200, deadline=None)
@given(counts_st)
def test_hill_continuity_and_bounds(counts):
    d1 = hill_number(counts, 1)
    assert abs(hill_number(counts, 1 + 1e-6) - d1) < 1e-3
    assert abs(hill_number(counts, 1 - 1e-6) - d1) < 1e-3
    assert 1 - 1e-9 <= d1 <= len(counts) + 1e-9


def test_h_index_examples():
    assert stem_h_index([5, 4, 4, 2, 1]) == 3
    assert stem_h_index({"x": 100}) == 1
    assert stem_h_index([]) == 0
    assert stem_h_index([6] * 6) == 6


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(min_value=1, max_value=50), max_size=40))
def test_h_index_brute_force(counts):
    assert stem_h_index(counts) == brute_h(counts)


def test_abstraction_examples():
    assert abstraction_counts(["cook two red ingredients"]) == (1.0, 1.0)
    assert abstraction_counts(["slice the red potato"]) == (0.0, 0.0)
    assert abstraction_counts(["open the container and the fridge", "open the fridge"]) == (0.5, 0.5)
    assert abstraction_counts(["Stand at the sandbox", "use the toolbox"]) == (0.0, 0.0)
    assert abstraction_counts(["eat fruit several   times"]) == (1.0, 1.0)
    assert abstraction_counts([]) == (0.0, 0.0)


def test_unique_goals():
    u = unique_goals({"A": {"g1", "g2"}, "B": {"g2", "g3"}})
    assert u["A"].unique == {"g1"} and u["A"].ratio == 0.5
    same = unique_goals({1: {"x"}, 2: {"x"}, 3: {"x"}})
    assert all(not v.unique for v in same.values())
    disjoint = unique_goals({1: {"a"}, 2: {"b"}})
    assert all(v.ratio == 1.0 for v in disjoint.values())
    with pytest.raises(ValueError):
        unique_goals({1: {"a"}})


@given(st.text(min_size=1, max_size=60))
def test_embedding_unit_norm(text):
    v = embed(text)
    assert v.shape == (512,)
    assert abs(np.linalg.norm(v) - 1) < 1e-9


def test_embedding_is_stable_across_processes():
    # crc32-hashed buckets do not depend on interpreter hash seeds
    v = embed("open the fridge")
    assert np.count_nonzero(v) > 0
    import subprocess
    import sys

    code = "from lma3.metrics import embed; import numpy as np; print(np.flatnonzero(embed('open the fridge')).tolist())"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True,
                         env={"PYTHONHASHSEED": "123"}).stdout
    assert out.strip() == str(np.flatnonzero(v).tolist())


def test_novelty_examples():
    assert novelty("a goal", ["a goal", "a goal"]) == 0
    assert cosine_distance(embed("same"), embed("same")) == pytest.approx(0, abs=1e-12)
    assert cosine_distance(embed("aaaa"), embed("zzzz")) == pytest.approx(1)
    near = novelty("slice the red potato", ["slice the red potato.", "open the fridge"])
    far = novelty("slice the red potato", ["open the fridge", "close the oven"])
    assert near < far
    with pytest.raises(CorpusTooSmall):
        novelty("x", ["x"])


def test_uniqueness_novelty():
    corpus = ["open the fridge", "open the fridge door", "eat the cilantro"]
    assert uniqueness_novelty([], corpus) == 0.0
    assert 0 < uniqueness_novelty(["eat the cilantro"], corpus) <= 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["slice the apple", "open the fridge", "cook two ingredients",
                                 "eat fruit", "go to the kitchen", "open a container and eat"]),
                min_size=1, max_size=12), st.randoms())
def test_report_permutation_invariant(goals, rnd):
    shuffled = list(goals)
    rnd.shuffle(shuffled)
    a, b = DiversityReport.from_goals(goals), DiversityReport.from_goals(shuffled)
    assert a == b
    assert a.D0 == len(StemDistribution.from_goals(goals).counts)
    assert 1 - 1e-9 <= a.D1 <= a.D0 + 1e-9
    assert a.h_index <= a.D0
    assert 0 <= a.conjunction_ratio <= 1 and 0 <= a.category_ratio <= 1


def test_report_set_semantics():
    a = DiversityReport.from_goals(["Open the fridge.", "open the fridge", "slice the apple"])
    assert a.n_goals == 2


def test_timeseries():
    rows = diversity_timeseries({"open the fridge": 1, "slice the apple": 150, "slice the potato": 250},
                                every=100, last_episode=300)
    assert [r["episode"] for r in rows] == [100, 200, 300]
    assert [r["n_goals"] for r in rows] == [1, 2, 3]
    assert rows[-1]["D0"] == 2
