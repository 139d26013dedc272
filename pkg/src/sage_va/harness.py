"""Training loop, k-fold splits, full-video prediction and fold selection."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .dataio import ClipIndex, Video, segment_clips
from .errors import BatchError, ConfigError, NumericError
from .metrics import EvalReport, ccc_loss, evaluate
from .model import Checkpoint, ModelConfig, SageParams, init_params, sage_forward

log = logging.getLogger(__name__)


def worker_threads() -> int:
    """Worker cap from ``SAGE_THREADS`` (default 1)."""
    raw = os.environ.get("SAGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SAGE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass
class TrainConfig:
    clip_len: int = 300
    stride: int = 200
    batch_size: int = 4
    epochs: int = 20
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    k: int = 5
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.validate()

    def validate(self) -> None:
        for name in ("clip_len", "stride", "batch_size", "k"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0 and self.clip_norm > 0):
            raise ConfigError("invalid optimizer settings")
        self.model.validate()

    @property
    def rgf_rescale(self) -> bool:
        return self.model.rgf_rescale

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        model = dict(d.pop("model", {}))
        for key in ("rgf_rescale", "use_rgf"):
            if key in d:
                model[key] = d.pop(key)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        try:
            return cls(model=ModelConfig.from_dict(model), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    folds: dict[str, int]

    def members(self, fold: int) -> list[str]:
        return sorted(v for v, f in self.folds.items() if f == fold)

    def sizes(self) -> list[int]:
        return [len(self.members(i)) for i in range(self.k)]


def kfold_split(video_ids: Sequence[str], k: int, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle followed by round-robin assignment to ``k`` folds."""
    ids = sorted(set(video_ids))
    if len(ids) != len(video_ids):
        raise ConfigError("video ids must be unique")
    if not 1 <= k <= len(ids):
        raise ConfigError(f"cannot split {len(ids)} videos into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldAssignment(k, {ids[j]: i % k for i, j in enumerate(order)})


def select_best_fold_per_target(reports: Sequence[EvalReport]) -> tuple[int, int]:
    """Independent argmax of validation valence and arousal CCC; ties go to the lower fold."""
    if not reports:
        raise ConfigError("need at least one fold report")
    v = int(np.argmax([r.overall_valence for r in reports]))
    a = int(np.argmax([r.overall_arousal for r in reports]))
    return v, a


# ---------------------------------------------------------------------------
# optimizer


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: SageParams, grads: Mapping[str, np.ndarray]) -> SageParams:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        updates = {}
        for name, g in grads.items():
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            updates[name] = params[name].data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params.replace(updates)


# ---------------------------------------------------------------------------
# prediction


def _clip_outputs(params: SageParams, config: ModelConfig, video: Video, clip: ClipIndex):
    out = sage_forward(video.visual[clip.start:clip.end], video.audio[clip.start:clip.end], params, config)
    alpha = out.alpha.data if out.alpha is not None else np.full(len(clip), 1.0 / len(clip))
    return out.predictions.data, alpha


def predict_video(ckpt: Checkpoint, video: Video, clip_len: int | None = None,
                  stride: int | None = None, with_alpha: bool = False):
    """Frame-level predictions for a whole video.

    Every clip from :func:`segment_clips` is run separately; frames covered by
    several clips get the mean of their predictions (and of their reliability
    weights when ``with_alpha`` is set).
    """
    clip_len = clip_len or ckpt.meta.get("clip_len", 300)
    stride = stride or ckpt.meta.get("stride", 200)
    params = ckpt.params.detached()
    T = video.frames
    total = np.zeros((T, 2))
    alpha_total = np.zeros(T)
    count = np.zeros(T)
    for clip in segment_clips(T, clip_len, stride, video.video_id):
        pred, alpha = _clip_outputs(params, ckpt.config, video, clip)
        total[clip.start:clip.end] += pred
        alpha_total[clip.start:clip.end] += alpha
        count[clip.start:clip.end] += 1
    preds = total / count[:, None]
    if with_alpha:
        return preds, alpha_total / count, count
    return preds


def predict_all(ckpt: Checkpoint, videos: Sequence[Video], clip_len: int | None = None,
                stride: int | None = None) -> dict[str, np.ndarray]:
    threads = min(worker_threads(), max(1, len(videos)))
    if threads == 1:
        return {v.video_id: predict_video(ckpt, v, clip_len, stride) for v in videos}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        preds = list(pool.map(lambda v: predict_video(ckpt, v, clip_len, stride), videos))
    return {v.video_id: p for v, p in zip(videos, preds)}


def evaluate_checkpoint(ckpt: Checkpoint, videos: Sequence[Video], clip_len: int | None = None,
                        stride: int | None = None) -> EvalReport:
    preds = predict_all(ckpt, videos, clip_len, stride)
    return evaluate(preds, {v.video_id: v.annotations for v in videos})


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_ccc_v: float
    val_ccc_a: float
    val_ccc_mean: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_ccc_v!r},{self.val_ccc_a!r},{self.val_ccc_mean!r}"


LOG_HEADER = "epoch,train_loss,val_ccc_v,val_ccc_a,val_ccc_mean"


def format_log(rows: Sequence[EpochLog]) -> str:
    return "\n".join([LOG_HEADER] + [r.csv_row() for r in rows]) + "\n"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog]
    final: Checkpoint
    best_epoch: int
    skipped_clips: list[ClipIndex] = field(default_factory=list)

    def __iter__(self):
        # allows ``ckpt, log = train(...)``
        return iter((self.checkpoint, self.log))


def _training_clips(videos: Sequence[Video], config: TrainConfig):
    clips, skipped = [], []
    for vi, video in enumerate(videos):
        for clip in segment_clips(video.frames, config.clip_len, config.stride, video.video_id):
            if video.annotations.valid[clip.start:clip.end].sum() < 2:
                log.warning("skipping clip %s[%d:%d]: fewer than 2 valid frames",
                            clip.video_id, clip.start, clip.end)
                skipped.append(clip)
                continue
            clips.append((vi, clip))
    return clips, skipped


def _batches(order: np.ndarray, clips, batch_size: int) -> list[list]:
    """Group shuffled clips by length, then chunk; length groups follow first appearance."""
    groups: dict[int, list] = {}
    for i in order:
        vi, clip = clips[i]
        groups.setdefault(len(clip), []).append(clips[i])
    batches = []
    for members in groups.values():
        batches.extend(members[j:j + batch_size] for j in range(0, len(members), batch_size))
    return batches


def batch_loss(params: SageParams, config: ModelConfig, videos: Sequence[Video], batch) -> nx.Tensor:
    losses = []
    for vi, clip in batch:
        video = videos[vi]
        s, e = clip.start, clip.end
        out = sage_forward(video.visual[s:e], video.audio[s:e], params, config)
        losses.append(ccc_loss(out.predictions, video.annotations.targets[s:e],
                               video.annotations.valid[s:e]))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def train(config: TrainConfig, videos: Sequence[Video], folds: FoldAssignment | None = None,
          held_out: int | None = None, init: Checkpoint | None = None) -> TrainResult:
    """Adam training with global-norm clipping on every clip of the training videos.

    Videos in fold ``held_out`` are excluded from the gradient and scored each
    epoch; the returned checkpoint is the epoch with the best held-out mean
    CCC (the last epoch when nothing is held out).
    """
    config.validate()
    if held_out is not None and folds is None:
        raise ConfigError("held_out given without a fold assignment")
    if held_out is not None and not 0 <= held_out < folds.k:
        raise ConfigError(f"held_out fold {held_out} outside [0, {folds.k})")
    if held_out is None:
        train_videos, val_videos = list(videos), []
    else:
        train_videos = [v for v in videos if folds.folds[v.video_id] != held_out]
        val_videos = [v for v in videos if folds.folds[v.video_id] == held_out]
    meta = {"clip_len": config.clip_len, "stride": config.stride}
    if init is None:
        init = Checkpoint(config.model, init_params(config.model, config.seed), meta)
    clips, skipped = _training_clips(train_videos, config)
    if not clips and config.epochs:
        raise BatchError("no training clip has at least 2 valid frames")

    rng = np.random.default_rng([config.seed, 1])
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    params = init.params.trainable()
    best, best_score, best_epoch = init, -math.inf, 0
    rows: list[EpochLog] = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for b, batch in enumerate(_batches(rng.permutation(len(clips)), clips, config.batch_size)):
            loss = batch_loss(params, config.model, train_videos, batch)
            value = loss.item()
            if not math.isfinite(value):
                names = ", ".join(f"{c.video_id}[{c.start}:{c.end}]" for _, c in batch)
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b} ({names})")
            grads = nx.backward(loss, wrt=[params[n] for n in params])
            grads, _ = clip_grad_norm({n: grads[params[n]] for n in params}, config.clip_norm)
            params = opt.step(params, grads)
            losses.append(value)
        current = Checkpoint(config.model, params.detached(), meta)
        if val_videos:
            report = evaluate_checkpoint(current, val_videos)
            row = EpochLog(epoch, float(np.mean(losses)), report.overall_valence,
                           report.overall_arousal, report.overall_mean)
        else:
            row = EpochLog(epoch, float(np.mean(losses)), math.nan, math.nan, math.nan)
        rows.append(row)
        log.info("epoch %d loss %.5f val mean %.4f", epoch, row.train_loss, row.val_ccc_mean)
        score = row.val_ccc_mean if val_videos else float(epoch)
        if score > best_score:
            best, best_score, best_epoch = current, score, epoch
    final = Checkpoint(config.model, params.detached(), meta) if config.epochs else init
    return TrainResult(best, rows, final, best_epoch, skipped)


# ---------------------------------------------------------------------------
# fusion ablation


@dataclass
class ArmResult:
    arm: str
    seed: int
    held_out_valence: float
    held_out_arousal: float
    held_out_mean: float
    final_train_loss: float


@dataclass
class AblationReport:
    results: list[ArmResult]

    def arm_means(self) -> dict[str, float]:
        arms: dict[str, list[float]] = {}
        for r in self.results:
            arms.setdefault(r.arm, []).append(r.held_out_mean)
        return {arm: float(np.mean(v)) for arm, v in arms.items()}

    def to_csv(self) -> str:
        lines = ["arm,seed,held_out_ccc_v,held_out_ccc_a,held_out_ccc_mean,final_train_loss"]
        lines += [f"{r.arm},{r.seed},{r.held_out_valence:.6f},{r.held_out_arousal:.6f},"
                  f"{r.held_out_mean:.6f},{r.final_train_loss:.6f}" for r in self.results]
        for arm, m in self.arm_means().items():
            lines.append(f"{arm},MEAN,,,{m:.6f},")
        return "\n".join(lines) + "\n"


def compare_fusion_ablation(seeds: Sequence[int], synth: Mapping | None = None,
                            config: TrainConfig | None = None, k: int = 4,
                            held_out: int = 0) -> AblationReport:
    """Train the full model and the no-fusion ablation on corrupted synthetic data.

    For every seed both arms see the same videos, folds and initialization
    seed; the score is the held-out CCC at the last epoch.
    """
    from .dataio import Corruption, SynthConfig, synth_videos

    synth = dict(synth or {})
    frames = synth.get("frames_per_video", 300)
    synth.setdefault("n_videos", 8)
    synth.setdefault("corruption_schedule",
                     [Corruption(frames // 3, 2 * frames // 3, "visual", 5.0)])
    config = config or TrainConfig(epochs=40, batch_size=1, learning_rate=1e-3)
    results = []
    for seed in seeds:
        videos = synth_videos(SynthConfig(**{**synth, "seed": seed}))
        folds = kfold_split([v.video_id for v in videos], k, seed)
        for arm, use_rgf in (("sage", True), ("no_rgf", False)):
            model = ModelConfig(**{**config.model.to_dict(), "use_rgf": use_rgf,
                                   "dim_visual": videos[0].visual.shape[1],
                                   "dim_audio": videos[0].audio.shape[1]})
            cfg = TrainConfig(**{**config.to_dict(), "model": model, "seed": seed})
            result = train(cfg, videos, folds, held_out)
            last = result.log[-1]
            results.append(ArmResult(arm, seed, last.val_ccc_v, last.val_ccc_a,
                                     last.val_ccc_mean, last.train_loss))
            log.info("seed %d arm %s held-out mean %.4f", seed, arm, last.val_ccc_mean)
    return AblationReport(results)
