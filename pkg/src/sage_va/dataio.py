"""Feature/annotation files, audio-video alignment, clip windows and synthetic data."""

from __future__ import annotations

import csv
import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DataError,
    FormatError,
    NonFiniteError,
    TruncatedError,
)

INVALID_LABEL = -5.0
MODALITIES = ("visual", "audio")

SAGF_MAGIC = b"SAGF"
SAGF_VERSION = 1
# magic, version u16, modality u8, reserved u8, fps f32, T u32, D u32
_SAGF_HEADER = struct.Struct("<4sHBBfII")


@dataclass(frozen=True)
class FeatureSequence:
    modality: str
    values: np.ndarray
    fps: float

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ConfigError(f"feature values must be a non-empty T x D matrix, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigError("feature values must be finite")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "values", values)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class AnnotationTrack:
    valence: np.ndarray
    arousal: np.ndarray
    valid: np.ndarray

    @property
    def frames(self) -> int:
        return len(self.valid)

    @property
    def targets(self) -> np.ndarray:
        """``T x 2`` array of (valence, arousal)."""
        return np.stack([self.valence, self.arousal], axis=1)

    @classmethod
    def from_targets(cls, targets: np.ndarray, valid: np.ndarray | None = None) -> "AnnotationTrack":
        targets = np.asarray(targets, dtype=np.float64)
        if valid is None:
            valid = np.ones(len(targets), dtype=bool)
        return cls(targets[:, 0].copy(), targets[:, 1].copy(), np.asarray(valid, dtype=bool))


@dataclass(frozen=True)
class ClipIndex:
    video_id: str
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


# ---------------------------------------------------------------------------
# SAGF feature files


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_features(seq: FeatureSequence) -> bytes:
    header = _SAGF_HEADER.pack(SAGF_MAGIC, SAGF_VERSION, MODALITIES.index(seq.modality), 0,
                               seq.fps, seq.frames, seq.dim)
    return header + np.ascontiguousarray(seq.values, dtype="<f8").tobytes()


def decode_features(buf: bytes) -> FeatureSequence:
    if len(buf) < 4 or buf[:4] != SAGF_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {SAGF_MAGIC!r}", 0)
    if len(buf) < _SAGF_HEADER.size:
        raise TruncatedError("header shorter than 20 bytes", len(buf))
    _, version, modality, _reserved, fps, T, D = _SAGF_HEADER.unpack_from(buf, 0)
    if version != SAGF_VERSION:
        raise FormatError(f"unsupported SAGF version {version}", 4)
    if modality >= len(MODALITIES):
        raise FormatError(f"unknown modality code {modality}", 6)
    if T < 1 or D < 1:
        raise FormatError(f"empty feature matrix {T}x{D}", 12)
    if not (math.isfinite(fps) and fps > 0):
        raise FormatError(f"fps must be positive, got {fps}", 8)
    need = T * D * 8
    payload = buf[_SAGF_HEADER.size:]
    if len(payload) < need:
        raise TruncatedError(f"payload has {len(payload)} bytes, expected {need}", len(buf))
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes after payload", _SAGF_HEADER.size + need)
    values = np.frombuffer(payload, dtype="<f8", count=T * D).astype(np.float64).reshape(T, D)
    bad = np.flatnonzero(~np.isfinite(values.reshape(-1)))
    if bad.size:
        raise NonFiniteError("non-finite feature value", _SAGF_HEADER.size + 8 * int(bad[0]))
    return FeatureSequence(MODALITIES[modality], values, float(fps))


def write_feature_file(path: str | os.PathLike, seq: FeatureSequence) -> None:
    atomic_write(path, encode_features(seq))


def read_feature_file(path: str | os.PathLike) -> FeatureSequence:
    return decode_features(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# annotations


def parse_annotations(path: str | os.PathLike) -> AnnotationTrack:
    """Read a ``frame,valence,arousal`` CSV. Rows holding -5 in either column are invalid."""
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_annotation_text(fh.read())


def parse_annotation_text(text: str) -> AnnotationTrack:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["frame", "valence", "arousal"]:
        raise DataError(f"expected header 'frame,valence,arousal', got {header!r}")
    val, aro, ok = [], [], []
    for row in reader:
        if not row:
            continue
        i = len(ok)
        if len(row) != 3:
            raise DataError(f"expected 3 columns, got {len(row)}", i)
        try:
            frame, v, a = int(row[0]), float(row[1]), float(row[2])
        except ValueError:
            raise DataError(f"unparseable row {row!r}", i) from None
        if frame != i:
            raise DataError(f"frames must increase by one from 0; found frame {frame}", i)
        invalid = v == INVALID_LABEL or a == INVALID_LABEL
        if not invalid:
            for name, x in (("valence", v), ("arousal", a)):
                if not (-1.0 <= x <= 1.0):
                    raise DataError(f"{name} {x} outside [-1, 1]", i)
        val.append(v)
        aro.append(a)
        ok.append(not invalid)
    if not ok:
        raise DataError("annotation file has no rows")
    return AnnotationTrack(np.array(val), np.array(aro), np.array(ok, dtype=bool))


def format_annotations(track: AnnotationTrack) -> str:
    out = io.StringIO()
    out.write("frame,valence,arousal\n")
    for t in range(track.frames):
        if track.valid[t]:
            out.write(f"{t},{float(track.valence[t])!r},{float(track.arousal[t])!r}\n")
        else:
            out.write(f"{t},-5,-5\n")
    return out.getvalue()


def write_annotations(path: str | os.PathLike, track: AnnotationTrack) -> None:
    atomic_write(path, format_annotations(track).encode("utf-8"))


# ---------------------------------------------------------------------------
# alignment and clip windows


def align_audio(audio: FeatureSequence, video_frames: int, video_fps: float) -> FeatureSequence:
    """Nearest-index resampling of an audio feature track onto the video frame grid.

    Video frame ``t`` sits at time ``t / video_fps``; it takes the audio row
    nearest that instant, ``round(t * audio.fps / video_fps)``, clamped to the
    last available row.  The result carries the video frame rate.
    """
    if not video_fps > 0 or not audio.fps > 0:
        raise ConfigError(f"frame rates must be positive (video {video_fps}, audio {audio.fps})")
    if video_frames < 1:
        raise ConfigError(f"video_frames must be >= 1, got {video_frames}")
    ratio = audio.fps / video_fps
    idx = np.floor(np.arange(video_frames) * ratio + 0.5).astype(np.int64)
    idx = np.clip(idx, 0, audio.frames - 1)
    return FeatureSequence(audio.modality, audio.values[idx], float(video_fps))


def segment_clips(T: int, clip_len: int = 300, stride: int = 200, video_id: str = "") -> list[ClipIndex]:
    """Overlapping windows over ``[0, T)``.

    Starts at 0, stride, 2*stride, ... while a full window fits.  If frames
    remain past the last window, a final window ending at ``T`` is added.
    Videos shorter than ``clip_len`` give one short clip.
    """
    if clip_len < 1 or stride < 1:
        raise ConfigError(f"clip_len and stride must be >= 1, got {clip_len}, {stride}")
    if T < 1:
        return []
    if T <= clip_len:
        return [ClipIndex(video_id, 0, T)]
    clips = [ClipIndex(video_id, s, s + clip_len) for s in range(0, T - clip_len + 1, stride)]
    if clips[-1].end < T:
        clips.append(ClipIndex(video_id, T - clip_len, T))
    return clips


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class Corruption:
    start: int
    end: int
    modality: str
    std: float


@dataclass
class SynthConfig:
    n_videos: int = 4
    frames_per_video: int = 300
    dim_visual: int = 16
    dim_audio: int = 8
    corruption_schedule: list[Corruption] = field(default_factory=list)
    seed: int = 0
    video_fps: float = 25.0
    audio_fps: float = 50.0
    feature_noise: float = 0.05

    def __post_init__(self):
        self.corruption_schedule = [c if isinstance(c, Corruption) else _corruption_from(c)
                                    for c in self.corruption_schedule]
        self.validate()

    def validate(self) -> None:
        for name in ("n_videos", "frames_per_video", "dim_visual", "dim_audio"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (self.video_fps > 0 and self.audio_fps > 0):
            raise ConfigError("frame rates must be positive")
        by_mod: dict[str, list[Corruption]] = {}
        for c in self.corruption_schedule:
            if c.modality not in MODALITIES:
                raise ConfigError(f"unknown modality {c.modality!r} in corruption schedule")
            if not (0 <= c.start < c.end <= self.frames_per_video):
                raise ConfigError(f"corruption range [{c.start}, {c.end}) outside "
                                  f"[0, {self.frames_per_video})")
            if c.std < 0:
                raise ConfigError("corruption std must be >= 0")
            by_mod.setdefault(c.modality, []).append(c)
        for mod, entries in by_mod.items():
            entries = sorted(entries, key=lambda c: c.start)
            for a, b in zip(entries, entries[1:]):
                if b.start < a.end:
                    raise ConfigError(f"overlapping corruption ranges on {mod}: "
                                      f"[{a.start},{a.end}) and [{b.start},{b.end})")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["corruption_schedule"] = [c.__dict__.copy() for c in self.corruption_schedule]
        return d


def _corruption_from(c) -> Corruption:
    if isinstance(c, dict):
        return Corruption(int(c["start"]), int(c["end"]), str(c["modality"]), float(c["std"]))
    start, end, modality, std = c
    return Corruption(int(start), int(end), str(modality), float(std))


def _latent_track(rng: np.random.Generator, times: np.ndarray, duration: float) -> np.ndarray:
    """Sum of three slow sinusoids, clipped to [-1, 1]."""
    cycles = rng.uniform(0.5, 3.0, size=3)
    amps = rng.uniform(0.2, 0.45, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    offset = rng.uniform(-0.2, 0.2)
    track = offset + sum(a * np.sin(2 * np.pi * c * times / duration + p)
                         for a, c, p in zip(amps, cycles, phases))
    return np.clip(track, -1.0, 1.0)


def synth_dataset(cfg: SynthConfig) -> list[tuple[FeatureSequence, FeatureSequence, AnnotationTrack]]:
    """Deterministic multimodal dataset driven by smooth valence/arousal trajectories.

    Each modality embeds the latent state ``[valence, arousal, nuisance...]``
    through a fixed random linear map followed by ``tanh``, plus a little
    Gaussian noise.  Audio is produced at ``audio_fps`` (one video frame
    covers several audio rows).  Corruption entries replace the named
    modality's features in their frame range with pure noise.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_latent = 4
    maps = {
        "visual": (rng.normal(0, 0.8, size=(n_latent, cfg.dim_visual)), rng.normal(0, 0.2, cfg.dim_visual)),
        "audio": (rng.normal(0, 0.8, size=(n_latent, cfg.dim_audio)), rng.normal(0, 0.2, cfg.dim_audio)),
    }
    T = cfg.frames_per_video
    duration = T / cfg.video_fps
    out = []
    for _ in range(cfg.n_videos):
        tracks = [_latent_track(rng, np.arange(T) / cfg.video_fps, duration) for _ in range(n_latent)]
        latent = np.stack(tracks, axis=1)
        n_audio = int(math.ceil(T * cfg.audio_fps / cfg.video_fps))
        audio_frame = np.minimum(np.floor(np.arange(n_audio) * cfg.video_fps / cfg.audio_fps + 0.5), T - 1)
        feats = {}
        for mod, rows in (("visual", np.arange(T)), ("audio", audio_frame.astype(np.int64))):
            w, b = maps[mod]
            x = np.tanh(latent[rows] @ w + b)
            x = x + cfg.feature_noise * rng.normal(size=x.shape)
            feats[mod] = x
        for c in cfg.corruption_schedule:
            if c.modality == "visual":
                lo, hi = c.start, c.end
            else:
                scale = cfg.audio_fps / cfg.video_fps
                lo, hi = int(math.floor(c.start * scale)), int(math.ceil(c.end * scale))
            x = feats[c.modality]
            x[lo:hi] = c.std * rng.normal(size=(hi - lo, x.shape[1]))
        ann = AnnotationTrack(latent[:, 0].copy(), latent[:, 1].copy(), np.ones(T, dtype=bool))
        out.append((FeatureSequence("visual", feats["visual"], cfg.video_fps),
                    FeatureSequence("audio", feats["audio"], cfg.audio_fps),
                    ann))
    return out


# ---------------------------------------------------------------------------
# datasets on disk


@dataclass
class Video:
    """One aligned video: visual/audio matrices with equal row counts plus labels."""

    video_id: str
    visual: np.ndarray
    audio: np.ndarray
    annotations: AnnotationTrack

    @property
    def frames(self) -> int:
        return self.visual.shape[0]


def video_paths(data_dir: str | os.PathLike, video_id: str) -> dict[str, Path]:
    d = Path(data_dir)
    return {"visual": d / f"{video_id}.visual.sagf",
            "audio": d / f"{video_id}.audio.sagf",
            "annotations": d / f"{video_id}.csv"}


def save_video(data_dir: str | os.PathLike, video_id: str, visual: FeatureSequence,
               audio: FeatureSequence, annotations: AnnotationTrack) -> None:
    paths = video_paths(data_dir, video_id)
    write_feature_file(paths["visual"], visual)
    write_feature_file(paths["audio"], audio)
    write_annotations(paths["annotations"], annotations)


def list_video_ids(data_dir: str | os.PathLike) -> list[str]:
    return sorted(p.name[: -len(".visual.sagf")] for p in Path(data_dir).glob("*.visual.sagf"))


def load_video(data_dir: str | os.PathLike, video_id: str, with_annotations: bool = True) -> Video:
    paths = video_paths(data_dir, video_id)
    visual = read_feature_file(paths["visual"])
    audio = align_audio(read_feature_file(paths["audio"]), visual.frames, visual.fps)
    if with_annotations:
        ann = parse_annotations(paths["annotations"])
        if ann.frames != visual.frames:
            raise DataError(f"{video_id}: {ann.frames} annotation rows for {visual.frames} frames")
    else:
        ann = AnnotationTrack.from_targets(np.zeros((visual.frames, 2)), np.zeros(visual.frames, bool))
    return Video(video_id, visual.values, audio.values, ann)


def load_dataset(data_dir: str | os.PathLike, video_ids: Sequence[str] | None = None) -> list[Video]:
    ids = list_video_ids(data_dir) if video_ids is None else list(video_ids)
    return [load_video(data_dir, vid) for vid in ids]


def synth_videos(cfg: SynthConfig, prefix: str = "vid") -> list[Video]:
    """In-memory equivalent of writing :func:`synth_dataset` to disk and loading it back."""
    videos = []
    for i, (vis, aud, ann) in enumerate(synth_dataset(cfg)):
        aligned = align_audio(aud, vis.frames, vis.fps)
        videos.append(Video(f"{prefix}{i:03d}", vis.values, aligned.values, ann))
    return videos
