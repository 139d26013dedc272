"""``sage-va`` command line: synth, train, eval, gradcheck, export, compare.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage, config or IO error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import dataio, harness
from .errors import BatchError, ConfigError, DataError, NumericError, SageError
from .gradcheck import model_gradient_check
from .model import ModelConfig, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"

log = logging.getLogger("sage_va")


# ---------------------------------------------------------------------------
# helpers


def build_id() -> str:
    """Content hash of the package sources, stable across checkouts of the same code."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _read_json(path: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _write_text(path: Path, text: str) -> None:
    dataio.atomic_write(path, text.encode("utf-8"))


def _require_dir(path: str | None, flag: str) -> Path:
    if not path:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{flag} {path}: not a directory")
    return p


def _load_videos(data_dir: Path, ids=None) -> list[dataio.Video]:
    ids = dataio.list_video_ids(data_dir) if ids is None else ids
    if not ids:
        raise DataError(f"no *.visual.sagf files in {data_dir}")
    videos = dataio.load_dataset(data_dir, ids)
    dims = {(v.visual.shape[1], v.audio.shape[1]) for v in videos}
    if len(dims) != 1:
        raise DataError(f"feature dimensions differ across videos: {sorted(dims)}")
    return videos


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = dataio.SynthConfig.from_dict(raw)
    except (TypeError, KeyError, ValueError) as exc:
        if isinstance(exc, SageError):
            raise
        raise ConfigError(f"bad synth config: {exc}") from None
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for i, (vis, aud, ann) in enumerate(dataio.synth_dataset(cfg)):
        dataio.save_video(out, f"vid{i:03d}", vis, aud, ann)
    _write_text(out / "synth_config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {cfg.n_videos} videos to {out}")
    return EXIT_OK


def _train_setup(args):
    """Resolve config, data dir, folds and output dir from flags and an optional manifest."""
    raw = _read_json(args.config) if args.config else {}
    manifest = raw if "train_config" in raw else None
    config_dict = dict(manifest["train_config"]) if manifest else raw
    try:
        config = harness.TrainConfig.from_dict(config_dict)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SageError):
            raise
        raise ConfigError(f"bad train config: {exc}") from None

    model = config.model.to_dict()
    if args.rgf_rescale:
        model["rgf_rescale"] = True
    if args.no_rgf:
        model["use_rgf"] = False
    seed = args.seed if args.seed is not None else config.seed
    k = args.k if args.k is not None else config.k

    data = args.data or (manifest or {}).get("data")
    data_dir = _require_dir(data, "--data")
    ids = (manifest or {}).get("video_ids") if not args.data else None
    videos = _load_videos(data_dir, ids)
    dv, da = videos[0].visual.shape[1], videos[0].audio.shape[1]
    if (model["dim_visual"], model["dim_audio"]) != (dv, da):
        log.info("feature dims from data: visual %d, audio %d", dv, da)
        model.update(dim_visual=dv, dim_audio=da)
    config = harness.TrainConfig(**{**config.to_dict(), "model": ModelConfig.from_dict(model),
                                    "seed": seed, "k": k})

    if args.fold is not None:
        folds_to_run = [args.fold]
    elif manifest and args.k is None:
        folds_to_run = manifest.get("folds")
    else:
        folds_to_run = None
    if k > 1:
        if folds_to_run is None:
            folds_to_run = list(range(k))
        bad = [f for f in folds_to_run if not 0 <= f < k]
        if bad:
            raise ConfigError(f"fold index {bad[0]} outside [0, {k})")
    elif args.fold is not None:
        raise ConfigError("--fold needs --k >= 2")
    else:
        folds_to_run = []

    out = Path(args.out or (manifest or {}).get("out") or "run")
    return config, data_dir, videos, folds_to_run, out


def cmd_train(args) -> int:
    config, data_dir, videos, folds_to_run, out = _train_setup(args)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "train_config": config.to_dict(),
        "data": str(data_dir.resolve()),
        "video_ids": [v.video_id for v in videos],
        "seed": config.seed,
        "k": config.k,
        "folds": folds_to_run,
        "build": build_id(),
        "out": str(out.resolve()),
    }
    _write_text(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    if config.k == 1:
        result = harness.train(config, videos)
        save_checkpoint(out / "model.sagc", result.checkpoint)
        _write_text(out / "train_log.csv", harness.format_log(result.log))
        last = result.log[-1].train_loss if result.log else float("nan")
        print(f"trained {len(result.log)} epochs, final train loss {last:.6f}")
        return EXIT_OK

    folds = harness.kfold_split([v.video_id for v in videos], config.k, config.seed)
    reports = []
    for fold in folds_to_run:
        result = harness.train(config, videos, folds, held_out=fold)
        save_checkpoint(out / f"fold{fold}.sagc", result.checkpoint)
        _write_text(out / f"fold{fold}_log.csv", harness.format_log(result.log))
        held = [v for v in videos if folds.folds[v.video_id] == fold]
        report = harness.evaluate_checkpoint(result.checkpoint, held)
        report.write_csv(out / f"fold{fold}_eval.csv")
        reports.append(report)
        print(f"fold {fold} (best epoch {result.best_epoch}): {report.summary_line()}")
    v, a = harness.select_best_fold_per_target(reports)
    selection = {
        "valence": {"fold": folds_to_run[v], "ccc": reports[v].overall_valence,
                    "checkpoint": f"fold{folds_to_run[v]}.sagc"},
        "arousal": {"fold": folds_to_run[a], "ccc": reports[a].overall_arousal,
                    "checkpoint": f"fold{folds_to_run[a]}.sagc"},
    }
    _write_text(out / "selection.json", json.dumps(selection, indent=2, sort_keys=True) + "\n")
    print(f"selected fold {folds_to_run[v]} for valence, fold {folds_to_run[a]} for arousal")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    ckpt = load_checkpoint(args.checkpoint)
    videos = _load_videos(_require_dir(args.data, "--data"))
    report = harness.evaluate_checkpoint(ckpt, videos)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "eval_report.csv")
    print(report.summary_line())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = ModelConfig(rgf_rescale=args.rgf_rescale, use_rgf=not args.no_rgf)
    report = model_gradient_check(seed=args.seed or 0, config=config)
    print(f"checked {len(report.results)} coordinates ({len(report.kinked)} redrawn at ReLU kinks)")
    print(report.describe_worst())
    if report.passed(1e-4):
        return EXIT_OK
    print(f"FAILED: max relative error {report.max_error:.3e} in parameter {report.worst.param}",
          file=sys.stderr)
    return EXIT_RUNTIME


def cmd_export(args) -> int:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    if not args.video:
        raise ConfigError("--video is required")
    ckpt = load_checkpoint(args.checkpoint)
    video = dataio.load_video(_require_dir(args.data, "--data"), args.video, with_annotations=False)
    preds, alpha, _ = harness.predict_video(ckpt, video, with_alpha=True)
    lines = ["frame,valence_pred,arousal_pred,alpha"]
    lines += [f"{t},{p[0]!r},{p[1]!r},{a!r}" for t, (p, a) in enumerate(zip(preds.tolist(), alpha.tolist()))]
    out = Path(args.out or f"{args.video}.export.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_text(out, "\n".join(lines) + "\n")
    print(f"wrote {len(preds)} frames to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    config = harness.TrainConfig.from_dict(raw.get("train", {"epochs": 40, "batch_size": 1,
                                                              "learning_rate": 1e-3}))
    if args.rgf_rescale:
        config = harness.TrainConfig(**{**config.to_dict(), "model": ModelConfig.from_dict(
            {**config.model.to_dict(), "rgf_rescale": True})})
    seeds = raw.get("seeds", list(range(args.seed or 0, (args.seed or 0) + 5)))
    report = harness.compare_fusion_ablation(seeds, raw.get("synth"), config,
                                             k=args.k or 4, held_out=args.fold or 0)
    text = report.to_csv()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "ablation_report.csv", text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "write a synthetic dataset"),
    "train": (cmd_train, "train single-split or k-fold"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the full model"),
    "export": (cmd_export, "per-frame predictions and reliability weights as CSV"),
    "compare": (cmd_compare, "fusion versus no-fusion ablation on corrupted synthetic data"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sage-va", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON config (or a run manifest for train)")
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--out", help="output directory (file path for export)")
        p.add_argument("--checkpoint", help="SAGC checkpoint")
        p.add_argument("--seed", type=int)
        p.add_argument("--fold", type=int, help="train or hold out only this fold")
        p.add_argument("--k", type=int, help="number of folds (1 = single split)")
        p.add_argument("--rgf-rescale", action="store_true", help="scale fused features by T")
        p.add_argument("--no-rgf", action="store_true", help="ablation: skip reliability fusion")
        if name == "export":
            p.add_argument("--video", help="video id inside --data")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericError, BatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
