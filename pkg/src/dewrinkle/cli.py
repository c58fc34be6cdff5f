"""Command-line entry point: ``dewrinkle <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, save_config
from .data import (
    DataError,
    Sample,
    load_dataset,
    load_image,
    load_mask,
    save_dataset,
    save_image,
    save_mask,
    split_dataset,
)
from .evaluate import evaluate_inpainting, evaluate_segmentation
from .pipeline import PipelineOptions, remove_wrinkles
from .segnet import freeze, train_segmentation
from .toy import toy_dataset
from .trainer_inpaint import train_inpainting

logger = logging.getLogger("dewrinkle")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output is not None:
        cfg.output_dir = args.output
    cfg.propagate()
    return cfg


def _require_dir(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is not set in the config")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train_val(cfg: RunConfig) -> tuple[list[Sample], list[Sample]]:
    train = load_dataset(_require_dir(cfg.data.train_root, "data.train_root"))
    if cfg.data.val_root:
        return train, load_dataset(_require_dir(cfg.data.val_root, "data.val_root"))
    if cfg.data.val_fraction > 0:
        _, val_ids = split_dataset([s.id for s in train], cfg.data.val_fraction, seed=cfg.seed)
        held = set(val_ids)
        return [s for s in train if s.id not in held], [s for s in train if s.id in held]
    return train, []


def _eval_set(cfg: RunConfig) -> list[Sample]:
    root = cfg.data.eval_root or cfg.data.train_root
    return load_dataset(_require_dir(root, "data.eval_root"))


def cmd_train_seg(args: argparse.Namespace) -> int:
    cfg = _config(args)
    train, val = _train_val(cfg)
    out = Path(cfg.output_dir)
    save_config(out / "config.yaml", cfg)
    model, history = train_segmentation(train, val, cfg.seg, device=args.device)
    save_checkpoint(out / "seg.pt", model, "seg", cfg.to_dict())
    _write_json(out / "seg_history.json", history)
    logger.info("wrote %s", out / "seg.pt")
    return EXIT_OK


def cmd_train_inpaint(args: argparse.Namespace) -> int:
    cfg = _config(args)
    seg_path = _require_file(cfg.seg_checkpoint(), "inpaint.seg_checkpoint")
    train, val = _train_val(cfg)
    seg, _ = load_checkpoint(seg_path, "seg", args.device)
    freeze(seg)
    out = Path(cfg.output_dir)
    save_config(out / "config.yaml", cfg)
    gen, disc, history = train_inpainting(
        train, val, seg, cfg.inpaint, device=args.device, preview_dir=out / "previews" if val else None
    )
    save_checkpoint(out / "gen.pt", gen, "gen", cfg.to_dict())
    save_checkpoint(out / "disc.pt", disc, "disc", cfg.to_dict())
    _write_json(out / "inpaint_history.json", history)
    logger.info("wrote %s and %s", out / "gen.pt", out / "disc.pt")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = Path(cfg.output_dir)
    image = load_image(_require_file(Path(args.image), "input image"))
    override = None
    if args.mask_override is not None:
        override = load_mask(_require_file(Path(args.mask_override), "mask override"))
    seg = None
    if override is None:
        seg, _ = load_checkpoint(_require_file(out_dir / "seg.pt", "segmentation checkpoint"), "seg", args.device)
    gen, _ = load_checkpoint(_require_file(out_dir / "gen.pt", "generator checkpoint"), "gen", args.device)
    opts = PipelineOptions(
        seg_input_size=cfg.pipeline.seg_input_size,
        threshold=cfg.pipeline.threshold,
        dilate_px=cfg.pipeline.dilate_px,
        mask_override=override,
    )
    x_hat, mask = remove_wrinkles(image, seg, gen, opts)
    dest = Path(args.out)
    save_image(dest, x_hat)
    save_mask(dest.with_name(f"{dest.stem}_mask.png"), mask)
    logger.info("wrote %s", dest)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out_dir = Path(cfg.output_dir)
    dataset = _eval_set(cfg)
    # where outputs go does not change what was evaluated
    provenance = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    if args.seg:
        seg, _ = load_checkpoint(_require_file(out_dir / "seg.pt", "segmentation checkpoint"), "seg", args.device)
        report = evaluate_segmentation(seg, dataset, threshold=cfg.pipeline.threshold, config=provenance)
        dest = out_dir / "metrics_seg.json"
    else:
        gen, _ = load_checkpoint(_require_file(out_dir / "gen.pt", "generator checkpoint"), "gen", args.device)
        report = evaluate_inpainting(gen, dataset, cfg.mask_policy, seed=cfg.seed, config=provenance)
        dest = out_dir / "metrics_inpaint.json"
    report.save(dest)
    print(report.table())
    return EXIT_OK


def cmd_make_toy(args: argparse.Namespace) -> int:
    if args.output is None:
        raise UsageError("make-toy needs --output DIR")
    save_dataset(args.output, toy_dataset(n=args.n, size=args.size, seed=args.seed or 0))
    logger.info("wrote %d toy samples to %s", args.n, args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--output", default=None, help="override output_dir (make-toy: dataset dir)")
    common.add_argument("--device", default="cpu", help="torch device name, e.g. cpu or cuda")
    common.add_argument("-v", "--verbose", action="store_true")

    with_cfg = argparse.ArgumentParser(add_help=False, parents=[common])
    with_cfg.add_argument("--config", required=True, help="YAML run config")

    parser = _Parser(prog="dewrinkle", description="Wrinkle segmentation and inpainting.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-seg", parents=[with_cfg], help="train the wrinkle segmentation network")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("train-inpaint", parents=[with_cfg], help="train the inpainting generator")
    p.set_defaults(func=cmd_train_inpaint)

    p = sub.add_parser("infer", parents=[with_cfg], help="remove wrinkles from one image")
    p.add_argument("image", help="input PNG")
    p.add_argument("out", help="output PNG; the mask goes to <stem>_mask.png next to it")
    p.add_argument("--mask-override", default=None, help="binary PNG mask used instead of segmentation")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[with_cfg], help="compute metrics on the evaluation set")
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--seg", action="store_true", help="segmentation IoU")
    which.add_argument("--inpaint", action="store_true", help="inpainting LPIPS and FID")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("make-toy", parents=[common], help="write the synthetic toy dataset")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, CheckpointError) as exc:
        print(f"dewrinkle: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"dewrinkle: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
