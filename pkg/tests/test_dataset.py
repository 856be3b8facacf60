"""Tests for manifests, patient folds and frame loading."""

import textwrap

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from camds.dataset import (
    FoldSplit,
    FrameRecord,
    filter_informative,
    fold_counts,
    fold_leaks,
    get_fold,
    group_clips,
    load_folds,
    load_frame_set,
    load_manifest,
    patient_labels,
    resolve_path,
    save_folds,
    save_manifest,
    split_folds,
)
from camds.errors import DatasetError, ManifestError

HEADER = "patient_id,frame_index,path,label,informative\n"


def _write(tmp_path, text, name="manifest.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def _labels(n, abnormal_every=2):
    return {f"P{i:03d}": int(i % abnormal_every == 0) for i in range(n)}


class TestManifest:
    def test_load(self, tmp_path):
        path = _write(
            tmp_path,
            HEADER
            + textwrap.dedent("""\
                P1,0,frames/a.ppm,normal,true
                P1,1,frames/b.ppm,normal,false
                P2,0,frames/c.ppm,abnormal,true
            """),
        )
        records = load_manifest(path)
        assert records[0] == FrameRecord("P1", 0, "frames/a.ppm", 0, True)
        assert records[1].informative is False
        assert records[2].label_name == "abnormal"

    def test_roundtrip(self, tmp_path):
        records = [
            FrameRecord("P1", 0, "a.ppm", 0, True),
            FrameRecord("P2", 3, "b.ppm", 1, False),
        ]
        save_manifest(records, tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[2] == "P2,3,b.ppm,abnormal,false"
        assert load_manifest(tmp_path / "m.csv") == records

    @pytest.mark.parametrize(
        "text,match,line",
        [
            ("", "header row is mandatory", 1),
            ("patient_id,frame_index,path,label\n", "missing column", 1),
            ("patient_id,path,frame_index,label,informative\n", "wrong column order", 1),
            (HEADER + "P1,0,a.ppm,sick,true\n", "unknown label", 2),
            (HEADER + "P1,x,a.ppm,normal,true\n", "not an integer", 2),
            (HEADER + "P1,0,a.ppm,normal,yes\n", "informative", 2),
            (HEADER + "P1,0,a.ppm,normal\n", "expected 5 fields", 2),
            (HEADER + "P1,0,a.ppm,normal,true\nP1,0,b.ppm,normal,true\n", "first on line 2", 3),
        ],
    )
    def test_malformed(self, tmp_path, text, match, line):
        with pytest.raises(ManifestError, match=match) as info:
            load_manifest(_write(tmp_path, text))
        assert info.value.line == line

    def test_conflicting_patient_labels(self):
        records = [FrameRecord("P1", 0, "a", 0), FrameRecord("P1", 1, "b", 1)]
        with pytest.raises(DatasetError, match="P1"):
            patient_labels(records)

    def test_group_clips_orders_frames(self):
        records = [FrameRecord("P2", 1, "c", 1), FrameRecord("P1", 0, "a", 0),
                   FrameRecord("P2", 0, "b", 1)]
        clips = group_clips(records)
        assert [c.patient_id for c in clips] == ["P2", "P1"]
        assert [f.frame_index for f in clips[0].frames] == [0, 1]

    def test_filter_informative(self):
        records = [
            FrameRecord("P1", 0, "a", 0, True),
            FrameRecord("P2", 0, "b", 1, False),
            FrameRecord("P2", 1, "c", 1, False),
        ]
        kept, emptied = filter_informative(records)
        assert kept == records[:1]
        assert emptied == ["P2"]


class TestSplitFolds:
    @pytest.mark.parametrize("n,sizes", [(114, (91, 11, 12)), (10, (8, 1, 1)), (40, (32, 4, 4))])
    def test_sizes(self, n, sizes):
        for split in split_folds(_labels(n), 5, seed=0):
            assert (len(split.train), len(split.val), len(split.test)) == sizes

    def test_reproducible_and_independent(self):
        a = split_folds(_labels(30), 3, seed=1)
        b = split_folds(_labels(30), 3, seed=1)
        c = split_folds(_labels(30), 3, seed=2)
        assert a == b
        assert a != c
        assert a[0].test != a[1].test

    def test_stratified(self):
        labels = _labels(40)
        for split in split_folds(labels, 3, seed=0, stratify=True):
            abnormal_test = [p for p in split.test if labels[p] == 1]
            assert len(split.test) == 4
            assert len(abnormal_test) == 2

    @pytest.mark.parametrize(
        "n,k,ratios",
        [(10, 0, (0.8, 0.1, 0.1)), (7, 4, (0.8, 0.1, 0.1)), (10, 2, (0.8, 0.1, 0.2)),
         (10, 2, (1.2, -0.1, -0.1)), (10, 2, (0.5, 0.5))],
    )
    def test_invalid(self, n, k, ratios):
        with pytest.raises(DatasetError):
            split_folds(_labels(n), k, ratios)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(2, 80), k=st.integers(1, 4), seed=st.integers(0, 2**32 - 1))
    def test_every_fold_partitions_the_patients(self, n, k, seed):
        if n < 2 * k:
            return
        labels = _labels(n)
        folds = split_folds(labels, k, seed=seed)
        assert [f.fold for f in folds] == list(range(1, k + 1))
        for split in folds:
            assert split.patients == set(labels)
            assert len(split.train) + len(split.val) + len(split.test) == n
            assert len(split.train) == int(0.8 * n + 1e-9)

    def test_fold_file_roundtrip(self, tmp_path):
        folds = split_folds(_labels(12), 2, seed=4)
        save_folds(folds, tmp_path / "folds.csv")
        loaded = load_folds(tmp_path / "folds.csv")
        assert [(f.fold, f.train, f.val, f.test) for f in loaded] == [
            (f.fold, f.train, f.val, f.test) for f in folds
        ]

    @pytest.mark.parametrize(
        "body,match",
        [
            ("1,holdout,P1\n", "unknown role"),
            ("1,train,P1\n1,test,P1\n", "first on line 2"),
            ("0,train,P1\n", ">= 1"),
        ],
    )
    def test_malformed_fold_file(self, tmp_path, body, match):
        path = _write(tmp_path, "fold,role,patient_id\n" + body, "folds.csv")
        with pytest.raises(ManifestError, match=match):
            load_folds(path)

    def test_get_fold(self):
        folds = split_folds(_labels(10), 2)
        assert get_fold(folds, 2).fold == 2
        with pytest.raises(DatasetError, match="available: 1, 2"):
            get_fold(folds, 3)


class TestLeaksAndCounts:
    def test_clean_split_has_no_leaks(self):
        records = [FrameRecord(p, 0, "x", lab) for p, lab in _labels(10).items()]
        assert fold_leaks(split_folds(_labels(10), 2), records) == []

    def test_leaks_are_reported(self):
        split = FoldSplit(1, frozenset({"A", "B"}), frozenset({"B"}), frozenset())
        records = [FrameRecord("A", 0, "x", 0), FrameRecord("B", 0, "y", 0),
                   FrameRecord("C", 0, "z", 1)]
        leaks = fold_leaks([split], records)
        assert leaks == [
            "fold 1: patient B in both train and val",
            "fold 1: patient C has frames but no role",
        ]

    def test_counts(self):
        split = FoldSplit(1, frozenset({"A", "B"}), frozenset({"C"}), frozenset())
        records = [
            FrameRecord("A", 0, "a0", 0), FrameRecord("A", 1, "a1", 0),
            FrameRecord("B", 0, "b0", 1), FrameRecord("C", 0, "c0", 1),
        ]
        (counts,) = fold_counts([split], records)
        assert counts.patients["train"] == 2
        assert counts.patients["train_normal"] == 1
        assert counts.frames["train_normal"] == 2
        assert counts.frames["val_abnormal"] == 1
        assert counts.patients["test"] == 0


class TestFrameSet:
    def test_load_frame_set(self, toy_corpus):
        records = toy_corpus.records
        frames = load_frame_set(records, toy_corpus.root, size=16)
        assert frames.images.shape == (len(records), 3, 16, 16)
        assert frames.images.dtype == np.float32
        assert_array_equal(frames.labels, [r.label for r in records])
        threaded = load_frame_set(records, toy_corpus.root, size=16, threads=3)
        assert_array_equal(threaded.images, frames.images)

    def test_subset(self, toy_corpus):
        frames = load_frame_set(toy_corpus.records, toy_corpus.root, size=8)
        part = frames.subset([2, 0])
        assert len(part) == 2
        assert part.paths == [frames.paths[2], frames.paths[0]]

    def test_threads_must_be_positive(self, toy_corpus):
        with pytest.raises(DatasetError):
            load_frame_set(toy_corpus.records, toy_corpus.root, size=16, threads=0)

    def test_resolve_path(self, tmp_path):
        assert resolve_path(tmp_path, "frames/a.ppm") == tmp_path / "frames" / "a.ppm"
        absolute = str(tmp_path / "b.ppm")
        assert resolve_path("/elsewhere", absolute) == tmp_path / "b.ppm"
