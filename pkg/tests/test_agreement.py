"""Tests for Krippendorff's alpha and per-rater metrics."""

import math
import textwrap
from itertools import permutations

import krippendorff
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from camds.agreement import (
    RatingMatrix,
    coincidence_matrix,
    krippendorff_alpha,
    load_gold,
    load_ratings,
    rater_metrics,
)
from camds.errors import AgreementError, ManifestError

VALUES = st.sampled_from(["a", "b", "c", None])


def _pairable_alpha(rows):
    """Reference alpha from explicit pairs of values within each item."""
    observed = 0.0
    values = []
    for j in range(len(rows[0])):
        item = [row[j] for row in rows if row[j] is not None]
        if len(item) < 2:
            continue
        values += item
        for a, b in permutations(range(len(item)), 2):
            observed += (item[a] != item[b]) / (len(item) - 1)
    n = len(values)
    expected = sum(values[a] != values[b] for a, b in permutations(range(n), 2))
    return 1.0 - (n - 1) * observed / expected


class TestAlpha:
    def test_two_raters(self):
        matrix = RatingMatrix.from_rows([["a", "a", "b", "b"], ["a", "b", "b", "b"]])
        assert krippendorff_alpha(matrix) == pytest.approx(8 / 15, abs=1e-12)

    def test_missing_ratings(self):
        matrix = RatingMatrix.from_rows(
            [
                ["a", "a", "b", "a", None],
                ["a", "b", "b", None, "a"],
                [None, "b", "b", "b", None],
            ]
        )
        o, alphabet = coincidence_matrix(matrix)
        assert alphabet == ("a", "b")
        assert o.tolist() == [[2.0, 2.0], [2.0, 4.0]]
        assert krippendorff_alpha(matrix) == pytest.approx(0.25, abs=1e-12)

    def test_perfect_agreement(self):
        rows = [["normal", "abnormal", "normal"]] * 3
        assert krippendorff_alpha(RatingMatrix.from_rows(rows)) == 1.0

    def test_single_label_is_undefined(self):
        assert math.isnan(krippendorff_alpha(RatingMatrix.from_rows([["a", "a"], ["a", "a"]])))

    def test_no_pairable_items(self):
        matrix = RatingMatrix.from_rows([["a", None], [None, "b"]])
        with pytest.raises(AgreementError, match="pairable"):
            krippendorff_alpha(matrix)

    def test_ragged_rows(self):
        with pytest.raises(AgreementError):
            RatingMatrix.from_rows([["a", "b"], ["a"]])

    @settings(max_examples=1000, deadline=None)
    @given(
        st.integers(1, 8).flatmap(
            lambda items: st.lists(
                st.lists(VALUES, min_size=items, max_size=items), min_size=2, max_size=4
            )
        )
    )
    def test_matches_pairable_reference(self, rows):
        pairable = [
            v for j in range(len(rows[0]))
            for v in [row[j] for row in rows if row[j] is not None]
            if sum(row[j] is not None for row in rows) >= 2
        ]
        assume(len(set(pairable)) >= 2)
        matrix = RatingMatrix.from_rows(rows)
        value = krippendorff_alpha(matrix)
        assert value == pytest.approx(_pairable_alpha(rows), abs=1e-9)
        codes = {"a": 0.0, "b": 1.0, "c": 2.0, None: np.nan}
        reliability = np.array([[codes[v] for v in row] for row in rows])
        expected = krippendorff.alpha(
            reliability_data=reliability, level_of_measurement="nominal"
        )
        assert value == pytest.approx(expected, abs=1e-9)

        relabel = {"a": "x", "b": "y", "c": "z", None: None}
        renamed = RatingMatrix.from_rows([[relabel[v] for v in row] for row in rows])
        assert krippendorff_alpha(renamed) == pytest.approx(value, abs=1e-12)
        reordered = RatingMatrix.from_rows(list(reversed(rows)))
        assert krippendorff_alpha(reordered) == pytest.approx(value, abs=1e-12)


class TestRaterMetrics:
    def test_hand_counts(self):
        items = [f"i{j + 1}" for j in range(20)]
        gold = {item: "abnormal" if j < 10 else "normal" for j, item in enumerate(items)}
        row = ["abnormal"] * 8 + ["normal"] * 2 + ["abnormal"] + ["normal"] * 9
        result = rater_metrics(RatingMatrix.from_rows([row], raters=["dr1"]), gold)
        m = result["dr1"]
        assert (m.sensitivity, m.specificity, m.accuracy) == (0.8, 0.9, 0.85)
        assert m.f1 == pytest.approx(16 / 19)

    def test_unrated_and_unknown_items_are_skipped(self):
        matrix = RatingMatrix.from_rows([["abnormal", None, "normal"]])
        m = rater_metrics(matrix, {"i1": "abnormal", "i2": "normal"})["r1"]
        assert m.accuracy == 1.0
        assert math.isnan(m.specificity)

    def test_no_overlap(self):
        with pytest.raises(AgreementError, match="r1"):
            rater_metrics(RatingMatrix.from_rows([["normal"]]), {"other": "normal"})


class TestFiles:
    def test_load_ratings(self, tmp_path):
        path = tmp_path / "ratings.csv"
        path.write_text(
            textwrap.dedent("""\
                rater,f1,f2,f3
                senior1,abnormal,normal,
                senior2,abnormal,abnormal,normal
            """)
        )
        matrix = load_ratings(path)
        assert matrix.raters == ("senior1", "senior2")
        assert matrix.items == ("f1", "f2", "f3")
        assert matrix.ratings[0] == ("abnormal", "normal", None)

    @pytest.mark.parametrize(
        "text,line",
        [("item,f1\nr1,a\n", 1), ("rater\n", 1), ("rater,f1,f2\nr1,a\n", 2)],
    )
    def test_malformed_ratings(self, tmp_path, text, line):
        path = tmp_path / "ratings.csv"
        path.write_text(text)
        with pytest.raises(ManifestError) as info:
            load_ratings(path)
        assert info.value.line == line

    def test_load_gold(self, tmp_path):
        path = tmp_path / "gold.csv"
        path.write_text("item,label\nf1,abnormal\nf2,normal\n")
        assert load_gold(path) == {"f1": "abnormal", "f2": "normal"}
        path.write_text("item,label\nf1,abnormal\nf1,normal\n")
        with pytest.raises(ManifestError, match="duplicate"):
            load_gold(path)
