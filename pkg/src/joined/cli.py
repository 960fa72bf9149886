"""Command-line entry point exposing the full workflow.

Commands compose through on-disk artifacts: ``synth`` writes a dataset,
``gen-targets`` caches supervision arrays, the three ``train-*`` commands
write checkpoints and loss logs, ``infer`` writes prediction records, and
``eval``/``plot`` consume them.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data_io, metrics, plots, training
from .config import ConfigError, RunConfig, load_config, render_config
from .data_io import DataError, SyntheticSpec, build_manifest, generate_synthetic, load_dataset
from .nets import CheckpointError, GraphConfigError, load_checkpoint
from .pipeline import PipelineError, build_coarse_example, infer_sample
from .training import TrainingError

_ERRORS = (ConfigError, DataError, PipelineError, TrainingError, CheckpointError, GraphConfigError)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--data", type=Path, default=None, help="dataset root")
    parser.add_argument("--device", choices=("cpu", "accelerator"), default=None)
    parser.add_argument(
        "--print-config", action="store_true", help="echo the resolved config and exit"
    )


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = str(args.out)
    if args.data is not None:
        overrides["data_root"] = str(args.data)
    if args.device is not None:
        overrides["device"] = args.device
    return load_config(args.config, overrides)


def _load_samples(config: RunConfig) -> list[data_io.FundusSample]:
    manifest = build_manifest(config.data_root)
    return load_dataset(manifest, workers=config.effective_workers())


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    spec = SyntheticSpec(size=args.size, seed=config.seed)
    out = Path(config.out_dir)
    manifest = generate_synthetic(spec, args.n, out)
    print(f"wrote {len(manifest.entries)} synthetic samples to {out}")
    return 0


def cmd_gen_targets(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = _load_samples(config)
    for sample in samples:
        example, _ = build_coarse_example(
            sample.image,
            sample.mask,
            sample.annot.fovea,
            resolution=config.coarse_resolution,
            sigma_divisor=config.sigma_divisor,
        )
        data_io.save_array(out / f"{sample.image_id}.dist.jnd", example.dist.values)
        data_io.save_array(out / f"{sample.image_id}.heat.jnd", example.heat)
        data_io.save_array(out / f"{sample.image_id}.heatmask.jnd", example.heat_mask)
        if example.onehot is not None:
            data_io.save_array(out / f"{sample.image_id}.onehot.jnd", example.onehot)
    print(f"cached targets for {len(samples)} samples under {out}")
    return 0


def cmd_train_coarse(args: argparse.Namespace, config: RunConfig) -> int:
    samples = _load_samples(config)
    _, history = training.train_coarse(config, samples, config.out_dir)
    last = history[-1]
    print(
        f"coarse training done: epochs={len(history)} "
        f"l_p={last.l_p:.4f} l_d={last.l_d:.4f} l_s={last.l_s:.4f} total={last.total:.4f}"
    )
    return 0


def _maybe_coarse(args: argparse.Namespace):
    if args.coarse is None:
        return None
    return load_checkpoint(args.coarse)


def cmd_train_fine_seg(args: argparse.Namespace, config: RunConfig) -> int:
    samples = _load_samples(config)
    _, history = training.train_fine_seg(config, samples, config.out_dir, _maybe_coarse(args))
    print(f"fine segmentation training done: epochs={len(history)} loss={history[-1]:.4f}")
    return 0


def cmd_train_fine_loc(args: argparse.Namespace, config: RunConfig) -> int:
    samples = _load_samples(config)
    _, history = training.train_fine_loc(config, samples, config.out_dir, _maybe_coarse(args))
    print(f"fine localization training done: epochs={len(history)} loss={history[-1]:.4f}")
    return 0


def cmd_infer(args: argparse.Namespace, config: RunConfig) -> int:
    jsdm = load_checkpoint(args.jsdm)
    fsm = load_checkpoint(args.fsm) if args.fsm else None
    flm = load_checkpoint(args.flm) if args.flm else None
    samples = _load_samples(config)
    out = Path(config.out_dir) / "predictions"
    for sample in samples:
        record = infer_sample(
            sample,
            jsdm,
            fsm,
            flm,
            coarse_resolution=config.coarse_resolution,
            seg_crop_size=config.seg_crop_size,
            loc_crop_size=config.loc_crop_size,
            fallback=config.fallback_params(),
        )
        data_io.save_prediction(out, record)
    print(f"wrote {len(samples)} prediction records to {out}")
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    manifest = build_manifest(config.data_root)
    result = metrics.evaluate(args.pred, manifest)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(result, out / "report.csv")
    table = metrics.render_table(result)
    (out / "report.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_plot(args: argparse.Namespace, config: RunConfig) -> int:
    run_dir = Path(args.run)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    made = 0
    for csv_path in sorted(run_dir.glob("*_loss.csv")):
        plots.plot_loss_curves(csv_path, out / f"{csv_path.stem}.png")
        made += 1
    if args.jsdm:
        jsdm = load_checkpoint(args.jsdm)
        fsm = load_checkpoint(args.fsm) if args.fsm else None
        samples = _load_samples(config)[: args.n]
        for sample in samples:
            plots.render_sample_panel(
                sample,
                jsdm,
                out / f"panel_{sample.image_id}.png",
                fsm=fsm,
                coarse_resolution=config.coarse_resolution,
            )
            made += 1
    print(f"wrote {made} figures to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="joined", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gen-targets", help="cache supervision targets as JND1 blobs")
    p.set_defaults(func=cmd_gen_targets)

    p = sub.add_parser("train-coarse", help="train the coarse three-branch net")
    p.set_defaults(func=cmd_train_coarse)

    p = sub.add_parser("train-fine-seg", help="train the fine segmenter")
    p.add_argument("--coarse", type=Path, default=None, help="coarse checkpoint for conditioning")
    p.set_defaults(func=cmd_train_fine_seg)

    p = sub.add_parser("train-fine-loc", help="train the fine localizer")
    p.add_argument("--coarse", type=Path, default=None, help="coarse checkpoint for conditioning")
    p.set_defaults(func=cmd_train_fine_loc)

    p = sub.add_parser("infer", help="run the full pipeline over a dataset")
    p.add_argument("--jsdm", type=Path, required=True)
    p.add_argument("--fsm", type=Path, default=None)
    p.add_argument("--flm", type=Path, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render loss curves and sample panels")
    p.add_argument("--run", type=Path, required=True, help="directory with *_loss.csv logs")
    p.add_argument("--jsdm", type=Path, default=None)
    p.add_argument("--fsm", type=Path, default=None)
    p.add_argument("--n", type=int, default=4)
    p.set_defaults(func=cmd_plot)

    for sp in sub.choices.values():
        _add_common(sp)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve(args)
        if args.print_config:
            print(render_config(config), end="")
            return 0
        return args.func(args, config)
    except _ERRORS as exc:
        print(f"joined: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
