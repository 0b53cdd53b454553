import struct

import numpy as np
import pytest

from msbt.data import (SynthConfig, VideoSample, check_synthetic_labels, expand_scores_to_frames,
                       generate_synthetic, load_manifest, plant_event, read_feature_file,
                       read_frame_labels, write_dataset, write_feature_file, write_frame_labels,
                       write_sample)
from msbt.errors import ConfigurationError, LoadError


def test_feature_file_layout(tmp_path):
    arr = np.arange(6, dtype=np.float64).reshape(3, 2) / 4
    write_feature_file(tmp_path / "x.msbf", arr)
    raw = (tmp_path / "x.msbf").read_bytes()
    assert raw[:16] == b"MSBF" + struct.pack("<III", 1, 3, 2)
    assert raw[16:] == arr.astype("<f4").tobytes()
    back = read_feature_file(tmp_path / "x.msbf")
    assert back.dtype == np.float64 and np.array_equal(back, arr)


@pytest.mark.parametrize("mutate, msg", [
    (lambda b: b[:10], "truncated"),
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:-4], "expected"),
])
def test_feature_file_rejects_malformed(tmp_path, mutate, msg):
    write_feature_file(tmp_path / "x.msbf", np.ones((2, 2)))
    (tmp_path / "x.msbf").write_bytes(mutate((tmp_path / "x.msbf").read_bytes()))
    with pytest.raises(LoadError, match=msg):
        read_feature_file(tmp_path / "x.msbf")


def test_frame_labels_roundtrip(tmp_path):
    write_frame_labels(tmp_path / "l.txt", [0, 1, 1, 0])
    assert (tmp_path / "l.txt").read_text() == "0110\n"
    assert read_frame_labels(tmp_path / "l.txt").tolist() == [0, 1, 1, 0]
    (tmp_path / "bad.txt").write_text("01x\n")
    with pytest.raises(LoadError):
        read_frame_labels(tmp_path / "bad.txt")


def test_empty_manifest(tmp_path):
    (tmp_path / "m.tsv").write_text("# nothing here\n")
    manifest, samples = load_manifest(tmp_path / "m.tsv")
    assert samples == [] and manifest.entries == []


def test_write_then_load_is_bit_identical(tmp_path, rng):
    feats = {m: rng.normal(size=(5, d)).astype(np.float32).astype(np.float64) for m, d in (("R", 3), ("A", 2))}
    s = VideoSample("v1", feats, 1, np.repeat([0, 1, 1, 0, 0], 4).astype(np.uint8))
    path = write_dataset([s], tmp_path, frames_per_snippet=4)
    manifest, (back,) = load_manifest(path)
    assert manifest.frames_per_snippet == 4 and manifest.modalities == ("R", "A")
    assert manifest.dims == {"R": 3, "A": 2}
    for m in feats:
        assert np.array_equal(back.features[m], feats[m])
    assert back.frame_labels.tolist() == s.frame_labels.tolist() and back.video_label == 1


def test_manifest_with_video_labels(tmp_path, rng):
    s = VideoSample("clip", {"R": rng.normal(size=(3, 2)), "F": rng.normal(size=(3, 2))}, 1)
    line = write_sample(s, tmp_path)
    assert line.split("\t")[3:] == ["-", "1"]
    (tmp_path / "m.tsv").write_text(line + "\n")
    _, (back,) = load_manifest(tmp_path / "m.tsv")
    assert back.video_label == 1 and back.frame_labels is None


def test_snippet_count_mismatch_names_video(tmp_path):
    write_feature_file(tmp_path / "r.msbf", np.zeros((12, 2)))
    write_feature_file(tmp_path / "a.msbf", np.zeros((10, 2)))
    (tmp_path / "m.tsv").write_text("bad_video\tr.msbf\t-\ta.msbf\t0\n")
    with pytest.raises(LoadError, match="bad_video"):
        load_manifest(tmp_path / "m.tsv")


def test_missing_file_and_dim_mismatch_name_video(tmp_path):
    write_feature_file(tmp_path / "r1.msbf", np.zeros((4, 2)))
    write_feature_file(tmp_path / "r2.msbf", np.zeros((4, 3)))
    write_feature_file(tmp_path / "a.msbf", np.zeros((4, 2)))
    (tmp_path / "m.tsv").write_text("v1\tr1.msbf\t-\tgone.msbf\t0\n")
    with pytest.raises(LoadError, match="v1"):
        load_manifest(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("v1\tr1.msbf\t-\ta.msbf\t0\nv2\tr2.msbf\t-\ta.msbf\t1\n")
    with pytest.raises(LoadError, match="v2"):
        load_manifest(tmp_path / "m.tsv")


def test_duplicate_ids_and_bad_label_length(tmp_path):
    write_feature_file(tmp_path / "r.msbf", np.zeros((2, 2)))
    (tmp_path / "m.tsv").write_text("v\tr.msbf\t-\tr.msbf\t0\nv\tr.msbf\t-\tr.msbf\t1\n")
    with pytest.raises(LoadError, match="duplicate"):
        load_manifest(tmp_path / "m.tsv")
    write_frame_labels(tmp_path / "l.txt", [0] * 5)
    (tmp_path / "m.tsv").write_text("v\tr.msbf\t-\tr.msbf\tl.txt\n")
    with pytest.raises(LoadError, match="v"):
        load_manifest(tmp_path / "m.tsv", frames_per_snippet=2)


def test_video_sample_invariants(rng):
    with pytest.raises(LoadError):
        VideoSample("x", {"R": np.zeros((3, 2)), "A": np.zeros((4, 2))})
    with pytest.raises(LoadError):
        VideoSample("x", {"R": np.zeros((3, 2))}, 0, np.zeros(7, dtype=np.uint8))


def test_expand_scores():
    assert expand_scores_to_frames([0.2, 0.8], 2) == [0.2, 0.2, 0.8, 0.8]
    assert expand_scores_to_frames([0.1, 0.5, 0.7], 1) == [0.1, 0.5, 0.7]
    assert len(expand_scores_to_frames(np.zeros(7), 16)) == 112
    with pytest.raises(ConfigurationError):
        expand_scores_to_frames([0.1], 0)


def test_synthetic_anomaly_rate_zero():
    samples = generate_synthetic(SynthConfig(num_videos=10, anomaly_rate=0.0))
    assert all(s.video_label == 0 and not s.frame_labels.any() for s in samples)


def test_synthetic_is_deterministic():
    cfg = SynthConfig(num_videos=6, async_max=2, seed=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for x, y in zip(a, b):
        assert x.id == y.id and x.events == y.events
        for m in x.features:
            assert x.features[m].tobytes() == y.features[m].tobytes()
        assert x.frame_labels.tobytes() == y.frame_labels.tobytes()


def test_synthetic_labels_match_events():
    cfg = SynthConfig(num_videos=30, async_min=1, async_max=2, seed=3)
    samples = generate_synthetic(cfg)
    check_synthetic_labels(samples, cfg.frames_per_snippet)
    assert {s.video_label for s in samples} == {0, 1}


def test_planted_audio_is_offset():
    feats = {m: np.zeros((20, 3)) for m in "RFA"}
    dirs = {m: np.array([1.0, 0.0, 0.0]) for m in "RFA"}
    plant_event(feats, dirs, 10, 5, 2, 1.0)
    assert np.flatnonzero(feats["R"][:, 0]).tolist() == [10, 11, 12, 13, 14]
    assert np.flatnonzero(feats["F"][:, 0]).tolist() == [10, 11, 12, 13, 14]
    assert np.flatnonzero(feats["A"][:, 0]).tolist() == [12, 13, 14, 15, 16]


def test_train_and_test_sets_share_the_anomaly_signature():
    a = generate_synthetic(SynthConfig(num_videos=20, seed=1, noise=0.0, distractor_rate=0.0))
    b = generate_synthetic(SynthConfig(num_videos=20, seed=2, noise=0.0, distractor_rate=0.0))
    bump = lambda ss: next(s.features["R"][s.events[0][0]] for s in ss if s.events)
    assert np.allclose(bump(a), bump(b), atol=1e-6)


@pytest.mark.parametrize("kw", [
    dict(t_min=10, t_max=5), dict(event_len_min=0), dict(async_min=3, async_max=1),
    dict(async_max=4, event_len_min=4), dict(anomaly_rate=1.5), dict(dims={"X": 3}),
])
def test_synthetic_rejects_invalid_config(kw):
    with pytest.raises(ConfigurationError):
        generate_synthetic(SynthConfig(**kw))
