"""
Command-line surface: `python -m app <command> ...`

    synth      write a synthetic WAV corpus with manifest and label map
    featurize  cache normalised spectrograms for a manifest
    adapt      turn a vision checkpoint into initial AST parameters
    train      run the training recipe, one checkpoint per epoch
    eval       score checkpoints (or an ensemble) on a cached split
    predict    score one WAV file
    ablate     run an overlap / patch / posembed / pretrain sweep

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.core import ablation, dataset
from app.core.checkpoint import load_params, read_container, save_params
from app.core.config import load_run_config
from app.core.errors import ASTError, ConfigurationError, InputError
from app.core.frontend import read_wav
from app.core.inference import LoadedModel
from app.core.metrics import evaluate, format_stats, render_report, run_stats, write_ap_csv
from app.core.model import ASTParams, init_params, predict_scores, resize_for_config
from app.core.schemas import ASTConfig, PatchGrid, RunConfig
from app.core.training import ensemble_predict, reset_head, train
from app.core.vit_adapt import adapt_checkpoint, load_vit_checkpoint, save_vit_checkpoint, synth_vit_checkpoint

logger = logging.getLogger("app.cli")

EXIT_USAGE = 1
EXIT_DATA = 2


class ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors map to 1 here."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _patch(value: str) -> Tuple[int, int]:
    try:
        f, t = value.lower().split("x")
        return int(f), int(t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected FxT (e.g. 16x16), got {value!r}")


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def build_parser() -> ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--preset", choices=["audioset-like", "audioset-full", "esc-like", "speechcommands-like"])
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--mode", choices=["bilinear", "nearest", "reinit"], help="positional-embedding adaptation")
    common.add_argument("--overlap", type=int, help="square patch overlap")
    common.add_argument("--patch", type=_patch, help="patch shape FxT")
    common.add_argument("--out", help="output directory")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = ArgumentParser(prog="python -m app", description="Audio Spectrogram Transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n", type=_positive, default=16)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--multi-label", action="store_true")
    p.add_argument("--min-seconds", type=float, default=1.0)
    p.add_argument("--max-seconds", type=float, default=10.0)
    p.add_argument("--eval-fraction", type=float, default=0.25)

    p = sub.add_parser("featurize", parents=[common], help="cache spectrograms for a manifest")
    p.add_argument("--manifest")
    p.add_argument("--labels", help="label map JSON")
    p.add_argument("--workers", type=_positive, default=4)

    p = sub.add_parser("adapt", parents=[common], help="adapt a vision checkpoint")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--source", help="vision checkpoint container")
    src.add_argument("--synthetic-source", action="store_true", help="use a randomly filled ViT-shaped source")
    p.add_argument("--source-grid", type=int, default=24)
    p.add_argument("--special-tokens", type=int, choices=[1, 2], default=2)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--cache")
    p.add_argument("--init", choices=["scratch", "checkpoint"])
    p.add_argument("--init-checkpoint")

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints")
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--cache")
    p.add_argument("--split", default="eval")
    p.add_argument("--ensemble", help="ensemble manifest JSON: list of {checkpoint, ...}")

    p = sub.add_parser("predict", parents=[common], help="score one WAV file")
    p.add_argument("checkpoint")
    p.add_argument("wav")
    p.add_argument("--top", type=_positive, default=5)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    p.add_argument("--sweep", choices=list(ablation.SWEEPS), required=True)
    p.add_argument("--cache")
    p.add_argument("--source", help="vision checkpoint container (synthetic if omitted)")
    p.add_argument("--seeds", type=int, nargs="+")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {
        "seed": args.seed,
        "train.epochs": args.epochs,
        "adapt_mode": args.mode,
        "paths.out_dir": args.out,
    }
    for flag, key in (("cache", "paths.cache"), ("manifest", "paths.manifest"), ("labels", "paths.label_map"),
                      ("init", "init"), ("init_checkpoint", "paths.init_checkpoint")):
        overrides[key] = getattr(args, flag, None)
    if getattr(args, "init_checkpoint", None) and getattr(args, "init", None) is None:
        overrides["init"] = "checkpoint"
    config = load_run_config(args.config, args.preset, overrides)
    if args.patch is not None or args.overlap is not None:
        g = config.model.grid
        pf, pt = args.patch if args.patch is not None else (g.patch_f, g.patch_t)
        if args.overlap is not None:
            ov_f = ov_t = args.overlap
        elif args.patch is not None:
            ov_f = ov_t = 0
        else:
            ov_f, ov_t = g.overlap
        try:
            grid = PatchGrid(patch_f=pf, patch_t=pt, stride_f=pf - ov_f, stride_t=pt - ov_t)
        except ValidationError as e:
            raise ConfigurationError(f"invalid patch/overlap: {e.errors()[0]['msg']}") from e
        overrides["model.grid"] = grid.model_dump()
        config = load_run_config(args.config, args.preset, overrides)
    return config


def _out_dir(args: argparse.Namespace, config: Optional[RunConfig] = None) -> Path:
    if args.out:
        return Path(args.out)
    if config is not None:
        return Path(config.paths.out_dir)
    raise ConfigurationError("--out is required")


def load_features(config: RunConfig, workers: int = 4) -> dataset.FeatureSet:
    if config.paths.cache and Path(config.paths.cache).exists():
        return dataset.load_cache(config.paths.cache)
    if not (config.paths.manifest and config.paths.label_map):
        raise ConfigurationError("need paths.cache, or paths.manifest and paths.label_map")
    label_map = dataset.read_label_map(config.paths.label_map)
    fs = dataset.featurize_manifest(
        dataset.read_manifest(config.paths.manifest), label_map,
        config.model.target_frames, config.model.n_mels, config.normalization, workers,
    )
    if config.paths.cache:
        dataset.save_cache(config.paths.cache, fs, list(label_map.values()))
    return fs


def _label_names(config: RunConfig) -> Optional[List[str]]:
    if config.paths.label_map and Path(config.paths.label_map).exists():
        return list(dataset.read_label_map(config.paths.label_map).values())
    return None


def _split(fs: dataset.FeatureSet, split: str) -> dataset.FeatureSet:
    part = fs.subset(split)
    return part if len(part) else fs


def fit_to_data(config: RunConfig, fs: dataset.FeatureSet) -> RunConfig:
    """The run config with model frames and classes taken from the data."""
    raw = config.model_dump()
    raw["model"].update(target_frames=fs.target_frames, num_classes=len(fs.label_ids))
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"config does not fit the data: {e.errors()[0]['msg']}") from e


def initial_params(config: RunConfig) -> ASTParams:
    path = config.paths.init_checkpoint
    if config.init == "scratch" or not path:
        if config.init == "checkpoint":
            raise ConfigurationError("init=checkpoint needs paths.init_checkpoint (--init-checkpoint)")
        return init_params(config.model, config.seed)
    kind = read_container(path).metadata.get("kind")
    if kind == "ast":
        params, old, _ = load_params(path)
        if old.num_classes == config.model.num_classes and old.target_frames == config.model.target_frames:
            return params
        return reset_head(params, old, config.model, config.seed, "nearest" if config.adapt_mode == "nearest" else "bilinear")
    params, report = adapt_checkpoint(load_vit_checkpoint(path), config.model, config.adapt_mode, rng=config.seed)
    logger.info("adaptation:\n" + report.render())
    return params


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    out = _out_dir(args)
    manifest = dataset.synth_dataset(
        args.n, args.classes, args.seed or 0, out, multi_label=args.multi_label,
        min_seconds=args.min_seconds, max_seconds=args.max_seconds, eval_fraction=args.eval_fraction,
    )
    print(f"wrote {len(manifest)} clips, {out / 'manifest.csv'}, {out / 'labels.json'}")
    return 0


def cmd_featurize(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = _out_dir(args, config)
    cache = Path(config.paths.cache) if config.paths.cache else out / "features.astc"
    config.paths.cache = None
    fs = load_features(config, args.workers)
    dataset.save_cache(cache, fs, _label_names(config))
    print(f"cached {len(fs)} spectrograms ({fs.target_frames} frames) to {cache}")
    return 0


def cmd_adapt(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = _out_dir(args, config)
    if args.synthetic_source:
        m = config.model
        src = synth_vit_checkpoint(embed_dim=m.embed_dim, depth=m.depth, heads=m.heads, grid=args.source_grid,
                                   patch=m.grid.patch_f, n_special=args.special_tokens, mlp_ratio=m.mlp_ratio,
                                   seed=config.seed)
        save_vit_checkpoint(out / "source.astc", src)
    else:
        src = load_vit_checkpoint(args.source)
    params, report = adapt_checkpoint(src, config.model, config.adapt_mode, rng=config.seed)
    path = save_params(out / "adapted.astc", params, config.model, adapted_from=args.source or "synthetic")
    (out / "adaptation_report.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    print(report.render())
    print(f"wrote {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = _out_dir(args, config)
    fs = load_features(config)
    config = fit_to_data(config, fs)
    train_data, eval_data = fs.subset("train"), fs.subset("eval")
    if not len(train_data):
        train_data = fs
    result = train(config, train_data, initial_params(config), out, eval_data if len(eval_data) else None,
                   _label_names(config))
    (out / "run_config.json").write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    if result.log:
        last = result.log[-1]
        print(f"trained {len(result.log)} epochs; final loss {last.train_loss:.4f}"
              + (f", eval mAP {last.eval_map:.4f}" if last.eval_map is not None else ""))
    else:
        print(f"zero epochs; wrote initial checkpoint to {out / 'averaged.astc'}")
    return 0


def read_ensemble_manifest(path: str) -> List[str]:
    """Checkpoint paths from a JSON list of {"checkpoint": ...} entries, relative to the manifest."""
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: ensemble manifest is not valid JSON: {e}") from e
    if not isinstance(entries, list) or not entries:
        raise ConfigurationError(f"{path}: ensemble manifest must be a non-empty list")
    base, members = Path(path).parent, []
    for i, e in enumerate(entries):
        ckpt = e.get("checkpoint") if isinstance(e, dict) else None
        if not isinstance(ckpt, str) or not ckpt:
            raise ConfigurationError(f"{path}: entry {i} needs a \"checkpoint\" path, got {e!r}")
        members.append(ckpt if Path(ckpt).is_absolute() else str(base / ckpt))
    return members


def _member_scores(path: str, fs: dataset.FeatureSet, mode: str) -> Tuple[np.ndarray, ASTConfig]:
    params, config, _ = load_params(path)
    if config.num_classes != len(fs.label_ids):
        raise InputError(f"{path}: {config.num_classes} classes, data has {len(fs.label_ids)}")
    if fs.target_frames != config.target_frames:
        target = config.model_copy(update={"target_frames": fs.target_frames})
        params = resize_for_config(params, config, target, "nearest" if mode == "nearest" else "bilinear")
        config = target
    return predict_scores(fs.features, params, config), config


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    fs = _split(load_features(config), args.split)
    members: List[str] = list(args.checkpoints)
    if args.ensemble:
        members.extend(read_ensemble_manifest(args.ensemble))
    if not members:
        raise ConfigurationError("give at least one checkpoint or --ensemble")

    outputs, results, modes = [], [], set()
    for path in members:
        scores, member_cfg = _member_scores(path, fs, config.adapt_mode)
        modes.add(member_cfg.multi_label)
        if len(modes) > 1:
            raise ConfigurationError(f"{path}: members mix multi-label and single-label checkpoints")
        multi_label = member_cfg.multi_label
        outputs.append(scores)
        results.append(evaluate(scores, fs.labels, multi_label))
        logger.info(f"{path}: mAP={results[-1].map:.4f}")

    extra: Dict[str, Any] = {"checkpoints": len(members)}
    if args.ensemble:
        final = evaluate(ensemble_predict(outputs), fs.labels, multi_label)
        extra["mode"] = "ensemble"
    else:
        final = results[0]
        if len(results) > 1:
            extra["mode"] = "runs"
            extra["mAP_runs"] = format_stats(*run_stats([r.map for r in results]))
            if results[0].accuracy is not None:
                extra["accuracy_runs"] = format_stats(*run_stats([r.accuracy for r in results]))
    report = render_report(final, **extra)
    print(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report + "\n", encoding="utf-8")
        write_ap_csv(final, out / "per_class_ap.csv", _label_names(config) or fs.label_ids)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = LoadedModel.from_path(args.checkpoint)
    response = model.predict(read_wav(args.wav), top_k=args.top)
    for s in response.scores:
        print(f"{s.score:.4f}  {s.label_id}  {s.name}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    fs = load_features(config)
    config = fit_to_data(config, fs)
    source = load_vit_checkpoint(args.source) if args.source else None
    result = ablation.run_sweep(
        args.sweep, config, fs.subset("train") if len(fs.subset("train")) else fs, fs.subset("eval"),
        source, seeds=args.seeds or [config.seed], progress=logger.info,
    )
    print(result.render())
    if args.out:
        result.to_csv(Path(args.out) / f"ablation_{args.sweep}.csv")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "featurize": cmd_featurize,
    "adapt": cmd_adapt,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ASTError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_DATA
