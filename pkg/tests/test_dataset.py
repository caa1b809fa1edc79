import hashlib
import json

import numpy as np
import pytest

from echomil.dataset import (
    CHANNEL_MEAN,
    CHANNEL_STD,
    DatasetManifest,
    FoldSplit,
    ManifestEntry,
    StratificationError,
    SyntheticSpec,
    VideoDecodeError,
    VideoSample,
    check_fold_split,
    generate_synthetic_dataset,
    load_ground_truth,
    load_manifest_samples,
    load_video,
    make_fold_splits,
    preprocess_frames,
)
from conftest import reload_manifest


def _frames(t=4, s=16):
    return np.zeros((t, s, s, 3), dtype=np.uint8)


class TestVideoSample:
    def test_valid(self):
        s = VideoSample(id="a", frames=_frames(), label=1, view_tag="synthetic")
        assert s.num_frames == 4

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError):
            VideoSample(id="a", frames=_frames(), label=0, view_tag="synthetic")

    def test_rejects_bad_frames(self):
        with pytest.raises(ValueError):
            VideoSample(id="a", frames=np.zeros((4, 16, 16)), label=1, view_tag="synthetic")
        with pytest.raises(ValueError):
            VideoSample(
                id="a", frames=_frames().astype(np.float32), label=1, view_tag="synthetic"
            )


class TestManifest:
    def test_csv_roundtrip(self, tmp_path):
        entries = [
            ManifestEntry(id="v1", path="videos/v1.avi", label=1, view="subAS"),
            ManifestEntry(id="v2", path="videos/v2.avi", label=-1, view="LPS4C"),
        ]
        m = DatasetManifest(entries=entries, root=tmp_path)
        path = tmp_path / "manifest.csv"
        m.save_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "id,path,label,view"
        loaded = DatasetManifest.load_csv(path)
        assert [e.id for e in loaded.entries] == ["v1", "v2"]
        assert [e.label for e in loaded.entries] == [1, -1]

    def test_duplicate_ids_rejected(self, tmp_path):
        entries = [
            ManifestEntry(id="v1", path="a.avi", label=1, view="subAS"),
            ManifestEntry(id="v1", path="b.avi", label=-1, view="subAS"),
        ]
        with pytest.raises(ValueError):
            DatasetManifest(entries=entries, root=tmp_path)

    def test_bad_label_in_csv(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,path,label,view\nv1,a.avi,2,subAS\n")
        with pytest.raises(ValueError):
            DatasetManifest.load_csv(path)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("id,file,label,view\nv1,a.avi,1,subAS\n")
        with pytest.raises(ValueError):
            DatasetManifest.load_csv(path)

    def test_class_counts(self, tiny_dataset):
        counts = tiny_dataset["manifest"].class_counts
        assert counts == {1: 4, -1: 4}


class TestSyntheticGeneration:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SyntheticSpec(num_positive=-1, num_negative=2)
        with pytest.raises(ValueError):
            SyntheticSpec(num_positive=2, num_negative=2, event_window=(30, 20))
        with pytest.raises(ValueError):
            SyntheticSpec(num_positive=2, num_negative=2, frames_per_video=8,
                          event_window=(10, 12))

    def test_counts_and_ids(self, tiny_dataset):
        m = tiny_dataset["manifest"]
        ids = sorted(e.id for e in m.entries)
        assert len(ids) == 8
        assert sum(i.startswith("syn_pos_") for i in ids) == 4
        assert sum(i.startswith("syn_neg_") for i in ids) == 4

    def test_ground_truth_sidecar(self, tiny_dataset):
        truth = load_ground_truth(tiny_dataset["root"] / "ground_truth.json")
        spec = tiny_dataset["spec"]
        for sid, rec in truth.items():
            if sid.startswith("syn_pos_"):
                lo, hi = spec.event_window
                assert lo <= rec["event_len"] <= hi
                assert 0 <= rec["event_start"]
                assert rec["event_start"] + rec["event_len"] <= spec.frames_per_video
                assert rec["patch_w"] > 0 and rec["patch_h"] > 0
            else:
                assert rec["event_start"] == -1
                assert rec["event_len"] == 0

    def test_regeneration_is_bit_identical(self, tmp_path):
        spec = SyntheticSpec(num_positive=2, num_negative=2, frames_per_video=12,
                             frame_size=48, event_window=(4, 6), seed=5)
        generate_synthetic_dataset(spec, tmp_path / "a")
        generate_synthetic_dataset(spec, tmp_path / "b")
        for rel in ["manifest.csv", "ground_truth.json", "videos/syn_pos_0000.avi",
                    "videos/syn_neg_0001.avi"]:
            da = hashlib.sha256((tmp_path / "a" / rel).read_bytes()).hexdigest()
            db = hashlib.sha256((tmp_path / "b" / rel).read_bytes()).hexdigest()
            assert da == db, rel

    def test_event_survives_compression(self, tiny_dataset):
        """The labeled window must stay detectable by a plain pixel scan."""
        truth = load_ground_truth(tiny_dataset["root"] / "ground_truth.json")
        m = reload_manifest(tiny_dataset)
        samples = {s.id: s for s in load_manifest_samples(m)}
        for sid, rec in truth.items():
            frames = samples[sid].frames.astype(np.int32)
            excess = frames[..., 0] - (frames[..., 1] + frames[..., 2]) / 2
            hot = (excess > 80).sum(axis=(1, 2))  # saturated pixels per frame
            detected = {int(i) for i in np.nonzero(hot >= 16)[0]}
            if rec["event_len"] > 0:
                expected = set(range(rec["event_start"], rec["event_start"] + rec["event_len"]))
                assert detected == expected, sid
            else:
                assert detected == set(), sid


class TestVideoIO:
    def test_missing_file(self, tmp_path):
        with pytest.raises(VideoDecodeError):
            load_video(tmp_path / "nope.avi")

    def test_decode_shape(self, tiny_dataset):
        m = reload_manifest(tiny_dataset)
        sample = load_manifest_samples(m, [m.entries[0].id])[0]
        spec = tiny_dataset["spec"]
        assert sample.frames.shape == (
            spec.frames_per_video, spec.frame_size, spec.frame_size, 3
        )
        assert sample.frames.dtype == np.uint8

    def test_decode_cache(self, tiny_dataset, tmp_path, monkeypatch):
        monkeypatch.setenv("ECHOMIL_CACHE", str(tmp_path / "cache"))
        m = reload_manifest(tiny_dataset)
        first = load_manifest_samples(m, [m.entries[0].id])[0]
        cached = list((tmp_path / "cache").glob("*.npy"))
        assert len(cached) == 1
        second = load_manifest_samples(m, [m.entries[0].id])[0]
        assert np.array_equal(first.frames, second.frames)


class TestPreprocess:
    def test_standardization_values(self):
        frames = np.full((2, 32, 32, 3), 128, dtype=np.uint8)
        out = preprocess_frames(frames, 16)
        assert out.shape == (2, 16, 16, 3)
        expected = (128 / 255 - CHANNEL_MEAN[0]) / CHANNEL_STD[0]
        assert np.allclose(out, expected, atol=1e-6)

    def test_target_size_floor(self):
        with pytest.raises(ValueError):
            preprocess_frames(np.zeros((1, 32, 32, 3), dtype=np.uint8), 4)


class TestFoldSplits:
    def _manifest(self, n_pos, n_neg, tmp_path):
        entries = [
            ManifestEntry(id=f"p{i}", path=f"p{i}.avi", label=1, view="subAS")
            for i in range(n_pos)
        ] + [
            ManifestEntry(id=f"n{i}", path=f"n{i}.avi", label=-1, view="subAS")
            for i in range(n_neg)
        ]
        return DatasetManifest(entries=entries, root=tmp_path)

    def test_split_is_stratified(self, tmp_path):
        m = self._manifest(9, 6, tmp_path)
        split = make_fold_splits(m, 3, seed=0)
        check_fold_split(split, m)
        for fold in range(3):
            ids = split.fold_ids(fold)
            assert sum(i.startswith("p") for i in ids) == 3
            assert sum(i.startswith("n") for i in ids) == 2

    def test_split_deterministic(self, tmp_path):
        m = self._manifest(10, 10, tmp_path)
        a = make_fold_splits(m, 5, seed=3)
        b = make_fold_splits(m, 5, seed=3)
        assert a.assignments == b.assignments
        c = make_fold_splits(m, 5, seed=4)
        assert a.assignments != c.assignments

    def test_too_few_samples(self, tmp_path):
        m = self._manifest(2, 8, tmp_path)
        with pytest.raises(StratificationError):
            make_fold_splits(m, 3, seed=0)

    def test_check_rejects_missing_id(self, tmp_path):
        m = self._manifest(4, 4, tmp_path)
        split = make_fold_splits(m, 2, seed=0)
        broken = dict(split.assignments)
        del broken["p0"]
        with pytest.raises(ValueError):
            check_fold_split(FoldSplit(k=2, assignments=broken), m)

    def test_check_rejects_imbalance(self, tmp_path):
        m = self._manifest(4, 4, tmp_path)
        assignments = {f"p{i}": 0 for i in range(4)}
        assignments.update({f"n{i}": 1 for i in range(4)})
        with pytest.raises(ValueError):
            check_fold_split(FoldSplit(k=2, assignments=assignments), m)

    def test_json_roundtrip(self, tmp_path):
        m = self._manifest(4, 4, tmp_path)
        split = make_fold_splits(m, 2, seed=1)
        path = tmp_path / "folds.json"
        split.save_json(path)
        loaded = FoldSplit.load_json(path)
        assert loaded.k == 2
        assert loaded.assignments == split.assignments
