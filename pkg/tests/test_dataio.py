import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sage_va import dataio
from sage_va.dataio import (
    AnnotationTrack,
    FeatureSequence,
    SynthConfig,
    align_audio,
    parse_annotations,
    read_feature_file,
    segment_clips,
    synth_dataset,
    write_feature_file,
)
from sage_va.errors import (
    BadMagicError,
    ConfigError,
    DataError,
    NonFiniteError,
    TruncatedError,
)


def direct_ccc(x, y):
    mx, my = x.mean(), y.mean()
    cov = ((x - mx) * (y - my)).mean()
    return 2 * cov / (x.var() + y.var() + (mx - my) ** 2)


def ridge_fit(X, y, lam=1e-3):
    X1 = np.hstack([X, np.ones((len(X), 1))])
    return np.linalg.solve(X1.T @ X1 + lam * np.eye(X1.shape[1]), X1.T @ y)


def ridge_predict(X, w):
    return np.hstack([X, np.ones((len(X), 1))]) @ w


# -- SAGF -----------------------------------------------------------------


def test_feature_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    seq = FeatureSequence("audio", rng.normal(size=(300, 16)), 50.0)
    write_feature_file(tmp_path / "a.sagf", seq)
    back = read_feature_file(tmp_path / "a.sagf")
    assert back.modality == "audio" and back.fps == 50.0
    assert back.values.tobytes() == seq.values.tobytes()


def test_feature_header_layout(tmp_path):
    seq = FeatureSequence("visual", np.arange(6.0).reshape(3, 2), 25.0)
    raw = dataio.encode_features(seq)
    assert raw[:4] == b"SAGF"
    assert struct.unpack_from("<HBBfII", raw, 4) == (1, 0, 0, 25.0, 3, 2)
    assert len(raw) == 20 + 6 * 8
    assert struct.unpack_from("<6d", raw, 20) == tuple(range(6))


def test_bad_magic(tmp_path):
    raw = bytearray(dataio.encode_features(FeatureSequence("visual", np.ones((2, 2)), 25.0)))
    raw[:4] = b"XXXX"
    (tmp_path / "x.sagf").write_bytes(bytes(raw))
    with pytest.raises(BadMagicError) as info:
        read_feature_file(tmp_path / "x.sagf")
    assert info.value.offset == 0


def test_truncated_payload():
    raw = dataio.encode_features(FeatureSequence("visual", np.ones((4, 3)), 25.0))
    with pytest.raises(TruncatedError) as info:
        dataio.decode_features(raw[:-5])
    assert info.value.offset == len(raw) - 5
    with pytest.raises(TruncatedError):
        dataio.decode_features(raw[:10])


def test_non_finite_value_reports_offset():
    values = np.ones((3, 2))
    raw = bytearray(dataio.encode_features(FeatureSequence("visual", values, 25.0)))
    struct.pack_into("<d", raw, 20 + 8 * 3, float("nan"))
    with pytest.raises(NonFiniteError) as info:
        dataio.decode_features(bytes(raw))
    assert info.value.offset == 20 + 24


def test_parse_errors_are_distinct():
    assert not issubclass(BadMagicError, TruncatedError)
    assert not issubclass(TruncatedError, NonFiniteError)


# -- annotations ----------------------------------------------------------


def _write_csv(tmp_path, rows):
    p = tmp_path / "ann.csv"
    p.write_text("frame,valence,arousal\n" + "".join(f"{r}\n" for r in rows))
    return p


def test_sentinel_rows_invalid(tmp_path):
    rows = [f"{i},0.1,0.2" for i in range(7)] + ["7,-5,-5", "8,0.5,-5", "9,0.0,0.0"]
    track = parse_annotations(_write_csv(tmp_path, rows))
    assert track.frames == 10
    assert not track.valid[7] and not track.valid[8]
    assert track.valid[:7].all() and track.valid[9]


def test_in_range_row(tmp_path):
    track = parse_annotations(_write_csv(tmp_path, ["0,0.3,-0.2"]))
    assert track.valence[0] == 0.3 and track.arousal[0] == -0.2 and track.valid[0]


def test_out_of_range_row(tmp_path):
    with pytest.raises(DataError, match="row 2") as info:
        parse_annotations(_write_csv(tmp_path, ["0,0,0", "1,0,0", "2,1.5,0.0"]))
    assert info.value.row == 2


def test_annotations_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    track = AnnotationTrack(rng.uniform(-1, 1, 50), rng.uniform(-1, 1, 50), rng.random(50) > 0.2)
    dataio.write_annotations(tmp_path / "t.csv", track)
    back = parse_annotations(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.valid, track.valid)
    np.testing.assert_array_equal(back.valence[track.valid], track.valence[track.valid])
    np.testing.assert_array_equal(back.arousal[track.valid], track.arousal[track.valid])


def test_annotation_frames_must_be_consecutive(tmp_path):
    with pytest.raises(DataError):
        parse_annotations(_write_csv(tmp_path, ["0,0,0", "2,0,0"]))


# -- alignment ------------------------------------------------------------


def test_align_identity():
    seq = FeatureSequence("audio", np.random.default_rng(0).normal(size=(30, 4)), 25.0)
    out = align_audio(seq, 30, 25.0)
    np.testing.assert_array_equal(out.values, seq.values)
    assert out.modality == "audio"


def test_align_50hz_to_25fps():
    values = np.arange(600.0)[:, None] * np.ones((1, 3))
    out = align_audio(FeatureSequence("audio", values, 50.0), 300, 25.0)
    np.testing.assert_array_equal(out.values[:, 0], 2 * np.arange(300))


def test_align_clamps_short_audio():
    values = np.arange(10.0)[:, None]
    out = align_audio(FeatureSequence("audio", values, 25.0), 300, 25.0)
    assert out.frames == 300
    np.testing.assert_array_equal(out.values[:10, 0], np.arange(10))
    assert out.values[-1, 0] == 9 and np.all(out.values[10:, 0] == 9)


def test_align_zero_fps():
    seq = FeatureSequence("audio", np.ones((5, 1)), 25.0)
    with pytest.raises(ConfigError):
        align_audio(seq, 5, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.integers(1, 400), st.sampled_from([10.0, 25.0, 30.0, 50.0, 100.0]))
def test_align_row_count(n_audio, n_video, audio_fps):
    seq = FeatureSequence("audio", np.zeros((n_audio, 2)), audio_fps)
    assert align_audio(seq, n_video, 25.0).frames == n_video


# -- segmentation ---------------------------------------------------------


def _spans(clips):
    return [(c.start, c.end) for c in clips]


def test_segment_exact_cover():
    assert _spans(segment_clips(700)) == [(0, 300), (200, 500), (400, 700)]


def test_segment_tail_clip():
    assert _spans(segment_clips(750)) == [(0, 300), (200, 500), (400, 700), (450, 750)]


def test_segment_short_video():
    assert _spans(segment_clips(120)) == [(0, 120)]


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 2000), st.integers(1, 400), st.integers(1, 400))
def test_segment_cover_properties(T, clip_len, stride):
    clips = segment_clips(T, clip_len, stride)
    covered = np.zeros(T, dtype=int)
    for c in clips:
        assert 0 <= c.start < c.end <= T
        covered[c.start:c.end] += 1
        if T >= clip_len:
            assert len(c) == clip_len
    # a stride larger than the clip leaves gaps between regular windows
    if stride <= clip_len:
        assert covered.min() >= 1


# -- synthetic data -------------------------------------------------------


def test_synth_deterministic():
    cfg = SynthConfig(n_videos=2, frames_per_video=120, seed=3,
                      corruption_schedule=[(10, 40, "audio", 2.0)])
    a, b = synth_dataset(cfg), synth_dataset(cfg)
    for (va, aa, na), (vb, ab, nb) in zip(a, b):
        assert va.values.tobytes() == vb.values.tobytes()
        assert aa.values.tobytes() == ab.values.tobytes()
        assert na.valence.tobytes() == nb.valence.tobytes()


def test_synth_invariants():
    for vis, aud, ann in synth_dataset(SynthConfig(n_videos=3, seed=9,
                                                   corruption_schedule=[(0, 100, "visual", 5.0)])):
        assert np.all(np.isfinite(vis.values)) and np.all(np.isfinite(aud.values))
        assert ann.valid.all()
        assert np.all(np.abs(ann.valence) <= 1) and np.all(np.abs(ann.arousal) <= 1)
        assert vis.dim == 16 and aud.dim == 8
        assert aud.frames == 2 * vis.frames


def test_synth_rejects_overlapping_schedule():
    with pytest.raises(ConfigError):
        SynthConfig(corruption_schedule=[(0, 100, "visual", 1.0), (50, 150, "visual", 1.0)])
    SynthConfig(corruption_schedule=[(0, 100, "visual", 1.0), (50, 150, "audio", 1.0)])


def test_synth_rejects_out_of_range_schedule():
    with pytest.raises(ConfigError):
        SynthConfig(frames_per_video=100, corruption_schedule=[(50, 150, "visual", 1.0)])


def test_synth_clean_data_is_ridge_learnable():
    videos = dataio.synth_videos(SynthConfig(seed=0))
    X = np.vstack([np.hstack([v.visual, v.audio]) for v in videos])
    y = np.concatenate([v.annotations.valence for v in videos])
    order = np.random.default_rng(0).permutation(len(X))
    cut = int(0.8 * len(X))
    w = ridge_fit(X[order[:cut]], y[order[:cut]])
    assert direct_ccc(ridge_predict(X[order[cut:]], w), y[order[cut:]]) > 0.9


def test_synth_corruption_destroys_visual_information():
    cfg = SynthConfig(seed=0, corruption_schedule=[(100, 200, "visual", 5.0)])
    videos = dataio.synth_videos(cfg)
    X = np.vstack([v.visual for v in videos])
    y = np.concatenate([v.annotations.valence for v in videos])
    frame = np.tile(np.arange(cfg.frames_per_video), cfg.n_videos)
    clean = (frame < 100) | (frame >= 200)
    w = ridge_fit(X[clean], y[clean])
    assert direct_ccc(ridge_predict(X[clean], w), y[clean]) > 0.9
    assert direct_ccc(ridge_predict(X[~clean], w), y[~clean]) < 0.5


def test_save_and_load_video(tmp_path):
    vis, aud, ann = synth_dataset(SynthConfig(n_videos=1, frames_per_video=50, seed=1))[0]
    dataio.save_video(tmp_path, "v0", vis, aud, ann)
    assert dataio.list_video_ids(tmp_path) == ["v0"]
    video = dataio.load_video(tmp_path, "v0")
    assert video.visual.shape == (50, 16) and video.audio.shape == (50, 8)
    np.testing.assert_array_equal(video.audio, aud.values[::2])
