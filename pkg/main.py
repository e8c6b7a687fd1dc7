# main.py
import os

# BLAS threads are fixed at import time; one thread keeps kernels bit-deterministic
_threads = os.getenv("NLEDN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from derain_app.config import MICRO, SMALL, AppConfig, ModelConfig, dump_config, load_config, variant_config
from derain_app.errors import DerainError

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

PRESETS = {"micro": MICRO, "small": SMALL, "default": ModelConfig()}

logger = logging.getLogger("derain")


class CliParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this CLI reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    p = CliParser(description="NLEDN de-raining workbench: synthesize data, train, infer, evaluate")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="Overlay synthetic rain streaks on clean PNGs")
    s.add_argument("--clean-dir", required=True, help="Folder of clean 8-bit RGB PNGs")
    s.add_argument("--out-dir", required=True, help="Dataset root; receives rainy/, clean/ and manifest.tsv")
    s.add_argument("--count", type=int, default=16, help="Number of pairs to write")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--streaks", type=int, default=120, help="Streaks per image")
    s.add_argument("--angle", type=float, nargs=2, default=(60.0, 120.0), metavar=("LO", "HI"), help="Degrees from horizontal")
    s.add_argument("--length", type=float, nargs=2, default=(8.0, 24.0), metavar=("LO", "HI"), help="Streak length, px")
    s.add_argument("--width", type=float, nargs=2, default=(0.5, 1.2), metavar=("LO", "HI"), help="Cross-profile sigma, px")
    s.add_argument("--intensity", type=float, nargs=2, default=(0.2, 0.6), metavar=("LO", "HI"), help="Added brightness, within [0, 0.6]")
    s.add_argument("--scenes", type=int, default=0, help="First fill --clean-dir with N procedural scenes")
    s.add_argument("--scene-size", type=int, default=64, help="Side length of generated scenes")

    t = sub.add_parser("train", help="Train on a paired dataset")
    t.add_argument("--data", required=True, help="Dataset root with rainy/ and clean/")
    t.add_argument("--out", required=True, help="Output folder for checkpoints and the training log")
    t.add_argument("--config", default=None, help="Flat key = value config file")
    t.add_argument("--resume", default=None, help="Checkpoint written by an earlier run to continue from")
    _add_model_flags(t)
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--lr", type=float, default=None, help="Initial learning rate")
    t.add_argument("--patience", type=int, default=None, help="Plateau patience in steps")
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.add_argument("--log-every", type=int, default=None)
    t.add_argument("--seed", type=int, default=None, help="Seeds parameter init, data order and flips")

    i = sub.add_parser("infer", help="De-rain PNGs with a checkpoint")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="inp", required=True, help="A PNG or a folder of PNGs")
    i.add_argument("--out", required=True, help="Output folder")
    i.add_argument("--dump-rainmap", default=None, metavar="DIR", help="Also write (R + 1) / 2 per image into DIR")

    e = sub.add_parser("eval", help="Luminance PSNR / SSIM against ground truth")
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--pred-dir", default=None, help="Folder of finished predictions")
    e.add_argument("--ckpt", default=None, help="Checkpoint to run on --rainy-dir instead of --pred-dir")
    e.add_argument("--rainy-dir", default=None)
    e.add_argument("--out", default=None, help="Optional path to save the TSV report")

    d = sub.add_parser("describe", help="Print a model configuration and its parameter counts")
    d.add_argument("--config", default=None)
    d.add_argument("--ckpt", default=None, help="Describe the model stored in a checkpoint")
    _add_model_flags(d)

    g = sub.add_parser("gradcheck", help="Finite-difference gradient checks in float64")
    g.add_argument("--scale", choices=["micro", "small"], default="micro")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--check", action="append", default=None, help="Run only this check (repeatable)")
    return p


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=["Ra", "Rb", "Rc", "Rd", "Re", "Rf"], default=None, help="Ablation configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="Width preset")
    p.add_argument("--affinity", choices=["softmax", "raw-sum"], default=None)
    p.add_argument("--upsample", choices=["indices", "bilinear"], default=None)


def validate_args(p: CliParser, args: argparse.Namespace) -> None:
    """Flag checks that need more than argparse types; runs before any file is touched."""
    if args.command == "synth":
        if args.count < 0 or args.scenes < 0 or args.scene_size < 8:
            p.error("--count and --scenes must be >= 0 and --scene-size >= 8")
        try:
            _rain_params(args).validate()
        except ValueError as e:
            p.error(str(e))
    elif args.command == "train":
        for flag in ("max_steps", "patience", "checkpoint_every", "log_every"):
            value = getattr(args, flag)
            if value is not None and value < {"max_steps": 0, "patience": 2}.get(flag, 1):
                p.error(f"--{flag.replace('_', '-')} is out of range: {value}")
        if args.lr is not None and args.lr <= 0:
            p.error("--lr must be > 0")
    elif args.command == "eval":
        if (args.pred_dir is None) == (args.ckpt is None):
            p.error("pass exactly one of --pred-dir or --ckpt")
        if args.ckpt is not None and args.rainy_dir is None:
            p.error("--ckpt needs --rainy-dir")


def _rain_params(args):
    from derain_app.synth import RainParams

    return RainParams(
        streak_count=args.streaks,
        angle=tuple(args.angle),
        length=tuple(args.length),
        width=tuple(args.width),
        intensity=tuple(args.intensity),
        seed=args.seed,
    )


def _model_config(cfg: AppConfig, args: argparse.Namespace) -> ModelConfig:
    model = cfg.model
    if args.preset:
        preset = PRESETS[args.preset]
        model = replace(
            model,
            base_channels=preset.base_channels,
            growth_rate=preset.growth_rate,
            dense_layers_per_block=preset.dense_layers_per_block,
        )
    if args.variant:
        model = variant_config(args.variant, model)
    if args.affinity:
        model = replace(model, affinity_mode=args.affinity)
    if args.upsample:
        model = replace(model, upsample_mode=args.upsample)
    return model.validate()


# --- commands ---

def cmd_synth(cfg: AppConfig, args) -> int:
    from derain_app.synth import SynthOptions, synthesize_and_save, write_scenes

    if args.scenes:
        scenes = write_scenes(Path(args.clean_dir), args.scenes, args.scene_size, args.seed)
        print(f"Generated {len(scenes)} scenes under {args.clean_dir}/")
    written = synthesize_and_save(SynthOptions(
        clean_dir=Path(args.clean_dir),
        out_dir=Path(args.out_dir),
        count=args.count,
        seed=args.seed,
        rain=_rain_params(args),
    ))
    print(f"Saved {len(written)} pairs under {args.out_dir}/")
    return EXIT_OK


def cmd_train(cfg: AppConfig, args) -> int:
    from derain_app.data import PairedDataset
    from derain_app.model import init_parameters
    from derain_app.train import load_training_state, train_loop

    tc = cfg.train
    overrides = {
        "max_steps": args.max_steps,
        "lr_init": args.lr,
        "plateau_patience": args.patience,
        "checkpoint_every": args.checkpoint_every,
        "log_every": args.log_every,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(tc, key, value)
    if args.lr is not None:
        tc.lr_floor = min(tc.lr_floor, args.lr)
    if args.seed is not None:
        cfg.model.seed = args.seed
    tc.validate()

    dataset = PairedDataset(args.data)
    if args.resume:
        model, state = load_training_state(args.resume)
        if args.variant or args.preset or args.affinity or args.upsample:
            logger.warning("model flags are ignored when resuming; the checkpoint's config is used")
    else:
        cfg.model = _model_config(cfg, args)
        model, state = init_parameters(cfg.model), None
    cfg.model = model.config

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    logger.info("training %d parameters on %d pairs", model.parameter_count(), len(dataset))

    result = train_loop(model, dataset, tc, out, state=state, queue_capacity=cfg.queue_capacity)
    final = f"{result.final_loss:.5f}" if result.final_loss is not None else "n/a"
    print(f"Trained to step {result.steps}; final loss {final}; lr {result.lr:.3g}")
    if result.checkpoints:
        print(f"Last checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_infer(cfg: AppConfig, args) -> int:
    from derain_app.pipeline import DerainPipeline

    pipe = DerainPipeline.from_checkpoint(args.ckpt, threads=cfg.threads)
    outputs = pipe.run(args.inp, args.out, rainmap_dir=args.dump_rainmap)
    print(f"Wrote {len(outputs)} image(s) to {args.out}/")
    return EXIT_OK


def cmd_eval(cfg: AppConfig, args) -> int:
    from derain_app.eval import run_eval

    report = run_eval(args.gt_dir, pred_dir=args.pred_dir, ckpt=args.ckpt, rainy_dir=args.rainy_dir, threads=cfg.threads)
    tsv = report.to_tsv()
    sys.stdout.write(tsv)
    if args.out:
        Path(args.out).write_text(tsv, encoding="utf-8")
        print(f"\nSaved report to {args.out}")
    return EXIT_OK


def cmd_describe(cfg: AppConfig, args) -> int:
    from derain_app.checkpoint import load_checkpoint
    from derain_app.model import count_parameters, parameter_groups, parameter_layout

    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
        cfg.model = model.config
        built = model.parameter_count()
    else:
        cfg.model = _model_config(cfg, args)
        built = sum(math.prod(shape) for _, shape in parameter_layout(cfg.model))

    print("=== Model config ===")
    for line in dump_config(cfg).splitlines():
        if line.startswith("model."):
            print(line[len("model."):])
    print("\n=== Parameters per group ===")
    for group, n in parameter_groups(cfg.model).items():
        print(f"{group:10} {n}")
    print(f"\nparameters: {built}")
    print(f"closed-form: {count_parameters(cfg.model)}")
    return EXIT_OK


def cmd_gradcheck(cfg: AppConfig, args) -> int:
    from derain_app.gradcheck import run_suite

    report = run_suite(scale=args.scale, seed=args.seed, names=args.check)
    sys.stdout.write(report.to_table())
    if not report.passed:
        print(f"FAILED: {', '.join(report.failures)}")
        return EXIT_FAILURE
    print("all gradient checks passed")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "describe": cmd_describe,
    "gradcheck": cmd_gradcheck,
}


def cli(argv=None) -> int:
    p = build_parser()
    args = p.parse_args(argv)
    validate_args(p, args)

    try:
        cfg = load_config(getattr(args, "config", None))
    except DerainError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error("%s", e)
        return EXIT_FAILURE
    logging.basicConfig(level=cfg.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if cfg.debug:
        os.environ["NLEDN_DEBUG"] = "1"

    try:
        return COMMANDS[args.command](cfg, args)
    except (DerainError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(cli())
