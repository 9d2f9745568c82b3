"""Command-line entry point: ``bmqa <command> [flags]``.

Exit codes: 0 success, 1 data or format error (or a failed check), 2 usage,
contract or configuration error. Log verbosity comes from ``BMQA_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import QualityDataset, atomic_write_text, split_by_scene
from .errors import ConfigError, ContractError, DataError, NonFiniteError
from .image import load_image

log = logging.getLogger("bmqa")

SPLITS = ("all", "train", "val", "test")


def _setup_logging():
    level = os.environ.get("BMQA_LOG_LEVEL", "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "INFO"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def digest(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _log_run(command, seed, config):
    log.info("bmqa %s | command=%s seed=%s config_digest=%s", __version__, command, seed, digest(config))


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc.strerror}") from None


def _write(out_dir, name, text):
    path = os.path.join(out_dir, name)
    atomic_write_text(path, text)
    return path


def _sections(args):
    if not args.config:
        return {}
    from .train import read_config

    return read_config(args.config)


def _pipeline_config(args):
    from .pipeline import PipelineConfig

    sections = _sections(args)
    cfg = PipelineConfig.from_sections(sections, seed=args.seed)
    if getattr(args, "loss_mode", None):
        for name in ("pt", "ss"):
            cfg.stages[name] = dataclasses.replace(cfg.stages[name], loss_mode=args.loss_mode)
    return cfg


def _synth_config(args):
    from .synth import SynthConfig

    fields = {f.name: f for f in dataclasses.fields(SynthConfig)}
    values = {}
    for key, raw in _sections(args).get("synth", {}).items():
        if key not in fields:
            raise ConfigError(f"unknown key in [synth]: {key}")
        default = getattr(SynthConfig(), key)
        try:
            if isinstance(default, bool):
                values[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, tuple):
                values[key] = tuple(float(x) for x in raw.replace(",", " ").split())
            else:
                values[key] = type(default)(raw)
        except ValueError as exc:
            raise ConfigError(f"[synth] {key}: {exc}") from None
    for flag, key in (("scenes", "n_scenes"), ("seed", "seed"), ("variants", "variants"), ("raters", "raters")):
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = value
    return SynthConfig(**values).validate()


def _load_system(path):
    from .pipeline import BMQASystem

    return BMQASystem.from_checkpoint(load_checkpoint(path))


def _dataset(args):
    return QualityDataset.from_manifest(args.manifest)


def _select(ds, split, seed):
    if split == "all":
        return ds
    parts = dict(zip(SPLITS[1:], split_by_scene(ds.samples, seed=seed)))
    return ds.subset(parts[split])


def _save_histories(out, histories):
    from .train import StageResult

    for stage, hist in histories.items():
        _write(out, f"loss_{stage}.csv", StageResult(stage, hist).history_csv())


def cmd_synth(args):
    from .synth import synth_generate

    cfg = _synth_config(args)
    _log_run("synth", cfg.seed, cfg.to_dict())
    manifest = synth_generate(cfg, args.out)
    print(manifest)
    return 0


def _progress(stage, result, seconds):
    log.info("stage %s: %d epochs, final loss %.6f (%.1f s)", stage, len(result.history), result.final_loss, seconds)


def cmd_pretrain(args):
    from .pipeline import train_pipeline

    cfg = _pipeline_config(args)
    _log_run("pretrain", cfg.seed, cfg.to_dict())
    ds = _dataset(args)
    res = train_pipeline(ds, cfg, first="pt", last=args.stage or "ss", progress=_progress)
    _ensure_dir(args.out)
    save_checkpoint(res.system.to_checkpoint(), os.path.join(args.out, "pretrain.bmqa"))
    _save_histories(args.out, res.histories)
    if res.window_hit is not None:
        lo, hi = cfg.stages["ss"].target_window
        state = "inside" if res.window_hit else "outside"
        print(f"ss final loss {res.histories['ss'][-1]:.4f} is {state} the target window [{lo}, {hi}]")
    print(os.path.join(args.out, "pretrain.bmqa"))
    return 0


def cmd_train(args):
    from .pipeline import evaluate, train_pipeline

    cfg = _pipeline_config(args)
    _log_run("train", cfg.seed, cfg.to_dict())
    ds = _dataset(args)
    init = _load_system(args.ckpt) if args.ckpt else None
    first = args.stage or ("st" if init is not None else "pt")
    res = train_pipeline(ds, cfg, init=init, first=first, progress=_progress)
    _ensure_dir(args.out)
    save_checkpoint(res.system.to_checkpoint(), os.path.join(args.out, "model.bmqa"))
    _save_histories(args.out, res.histories)
    rep = evaluate(res.system, res.splits[2], group_key=args.group_by)
    _write(args.out, "eval.txt", rep.to_text("Held-out test split"))
    _write(args.out, "eval.csv", rep.to_csv())
    print(rep.to_text("Held-out test split"), end="")
    return 0


def cmd_eval(args):
    from .pipeline import evaluate

    system = _load_system(args.ckpt)
    _log_run("eval", system.meta.get("seed"), {"ckpt": os.path.abspath(args.ckpt), "split": args.split,
                                               "group_by": args.group_by, "image_only": args.image_only})
    ds = _select(_dataset(args), args.split, system.meta.get("split_seed", 0))
    rep = evaluate(system, ds, group_key=args.group_by, image_only=args.image_only)
    text = rep.to_text(f"Evaluation ({args.split})")
    if args.out:
        _ensure_dir(args.out)
        _write(args.out, "eval.txt", text)
        _write(args.out, "eval.csv", rep.to_csv())
    print(text, end="")
    return 0


def cmd_predict(args):
    system = _load_system(args.ckpt)
    mode = "image-audio" if args.qsd is not None else "image-only"
    _log_run("predict", system.meta.get("seed"), {"ckpt": os.path.abspath(args.ckpt), "mode": mode})
    image = load_image(args.image)
    if args.qsd is not None:
        score = system.predict(image, [args.qsd])[0]
    else:
        score = system.predict_image_only(image)[0]
    print(f"{score:.6f}\t{mode}")
    return 0


def cmd_caption(args):
    system = _load_system(args.ckpt)
    _log_run("caption", system.meta.get("seed"), {"ckpt": os.path.abspath(args.ckpt)})
    sys.stdout.buffer.write((system.caption(load_image(args.image)) + "\n").encode("utf-8"))
    return 0


def cmd_analyze(args):
    from .stats import analyze

    ds_samples = QualityDataset.from_manifest(args.manifest).samples
    _log_run("analyze", None, {"manifest": os.path.abspath(args.manifest)})
    rep = analyze(ds_samples)
    text = rep.to_text()
    if args.out:
        _ensure_dir(args.out)
        _write(args.out, "stats.txt", text)
        for name, csv in rep.tables().items():
            _write(args.out, f"{name}.csv", csv)
    print(text, end="")
    return 0


def cmd_ablate(args):
    from .pipeline import ablation_csv, ablation_table, run_ablation

    cfg = _pipeline_config(args)
    _log_run("ablate", cfg.seed, cfg.to_dict())
    methods = args.methods.split(",") if args.methods else None
    reports = run_ablation(_dataset(args), cfg, methods,
                           progress=lambda spec, rep: log.info("%s PLCC %.4f", spec.label, rep.plcc))
    table = ablation_table(reports)
    if args.out:
        _ensure_dir(args.out)
        _write(args.out, "ablation.txt", table)
        _write(args.out, "ablation.csv", ablation_csv(reports))
    print(table, end="")
    return 0


def cmd_gradcheck(args):
    from .gradsuite import run_suite

    seed = args.seed or 0
    _log_run("gradcheck", seed, {"instances": args.instances})
    result = run_suite(instances=args.instances, seed=seed)
    print(result.to_text(), end="")
    return 0 if result.passed else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="bmqa", description="Blind multimodal quality assessment toolkit.")
    parser.add_argument("--version", action="version", version=f"bmqa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        for flag in flags:
            flag(p)
        return p

    def config(p):
        p.add_argument("--config", help="INI file with [pipeline], [pt], [ss], [st], [cap], [synth] sections")

    def seed(p):
        p.add_argument("--seed", type=int, help="random seed")

    def out(required):
        return lambda p: p.add_argument("--out", required=required, help="output directory")

    def manifest(p):
        p.add_argument("--manifest", required=True, help="JSON-lines manifest")

    def ckpt(required):
        return lambda p: p.add_argument("--ckpt", required=required, help="checkpoint file")

    def image(p):
        p.add_argument("--image", required=True, help="binary PPM (P6) image")

    def loss_mode(p):
        p.add_argument("--loss-mode", choices=("paper_sum", "mean_nll"), help="alignment loss form")

    def group_by(p):
        p.add_argument("--group-by", help="record field for per-group rows, e.g. device")

    p = add("synth", cmd_synth, "generate the synthetic dataset", config, seed, out(True))
    p.add_argument("--scenes", type=int, help="number of scenes")
    p.add_argument("--variants", type=int, help="variants per scene (1-5)")
    p.add_argument("--raters", type=int, help="simulate this many raters per image")

    p = add("pretrain", cmd_pretrain, "self-supervised stages (pt, then ss)",
            config, seed, out(True), manifest, loss_mode)
    p.add_argument("--stage", choices=("pt", "ss"), help="last stage to run (default ss)")

    p = add("train", cmd_train, "train through regression and the caption head",
            config, seed, out(True), manifest, ckpt(False), loss_mode, group_by)
    p.add_argument("--stage", choices=("pt", "ss", "st"),
                   help="first stage to run (default pt, or st with --ckpt)")

    p = add("eval", cmd_eval, "evaluate a checkpoint on a manifest", ckpt(True), manifest, group_by, out(False))
    p.add_argument("--split", choices=SPLITS, default="all", help="scene split to evaluate")
    p.add_argument("--image-only", action="store_true", help="ignore transcripts; use generated ones")

    p = add("predict", cmd_predict, "score one image", ckpt(True), image)
    p.add_argument("--qsd", help="transcript; omit for image-only mode")

    add("caption", cmd_caption, "generate a transcript for one image", ckpt(True), image)
    add("analyze", cmd_analyze, "keyword statistics of a manifest", manifest, out(False))

    p = add("ablate", cmd_ablate, "train and compare the ablation grid", config, seed, out(False), manifest,
            loss_mode)
    p.add_argument("--methods", help="comma-separated subset of a,b,c,d,e,f,g,h")

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite", seed)
    p.add_argument("--instances", type=int, default=100, help="random instances per case")
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DataError, NonFiniteError) as exc:
        log.error("%s", exc)
        return 1
    except ContractError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
