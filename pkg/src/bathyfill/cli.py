"""Command-line pipeline: synth, svr-train, correct, train, predict, combine, eval, report.

Exit codes: 0 success, 2 usage error, 1 runtime failure. Every randomized
step takes an explicit seed so reruns are bit-identical.
"""

from __future__ import annotations

import argparse
import difflib
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import metrics as metricsmod
from . import network as net
from . import refraction, svr, training
from .loss import BswConfig
from .rasters import (
    DepthRaster,
    NormalizationSpec,
    extract_patches,
    read_grid,
    read_ppm,
    write_grid,
    write_ppm,
)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that suggests near-miss flags instead of just failing."""

    all_flags: set = set()

    def error(self, message):
        extra = ""
        if "unrecognized arguments" in message:
            unknown = [tok for tok in message.split(":", 1)[1].split() if tok.startswith("-")]
            hints = []
            for tok in unknown:
                close = difflib.get_close_matches(tok, sorted(self.all_flags), n=2)
                if close:
                    hints.append(f"{tok} -> did you mean {' or '.join(close)}?")
            if hints:
                extra = "\n" + "\n".join(hints)
        self.exit(2, f"{self.prog}: error: {message}{extra}\n")


def _register_flags(parser):
    for action in parser._actions:
        _Parser.all_flags.update(action.option_strings)


def build_parser():
    parser = _Parser(prog="bathyfill", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic scene triple")
    p.add_argument("--config", help="scene config file (key = value)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("svr-train", help="fit the refraction-correction model")
    p.add_argument("--config", help="scene config file (camera geometry, depth range)")
    p.add_argument("--out", required=True, help="output model path (plain text)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--noise", type=float, default=0.0, help="sigma of observation noise on pairs (m)")
    p.add_argument("--grid-search", action="store_true", help="pick C by k-fold validation")
    p.set_defaults(func=cmd_svr_train)

    p = sub.add_parser("correct", help="apply the correction model to a depth grid")
    p.add_argument("--model", required=True)
    p.add_argument("--dsm", required=True, help="input grid with apparent depths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correct)

    p = sub.add_parser("train", help="train the depth network on a gappy grid")
    p.add_argument("--image", required=True, help="orthoimage (P6 ppm)")
    p.add_argument("--dsm", required=True, help="corrected gappy depth grid")
    p.add_argument("--config", help="training config file")
    p.add_argument("--out", required=True, help="output directory (model.sbun, loss.csv)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="whole prediction from a trained checkpoint")
    p.add_argument("--model", required=True, help="checkpoint (.sbun)")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output grid path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("combine", help="fill measured-grid gaps with predictions")
    p.add_argument("--sfm", required=True, help="measured (gappy) grid")
    p.add_argument("--pred", required=True, help="complete predicted grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("eval", help="metrics table against reference depths")
    p.add_argument("--ref", required=True, help="reference (complete) grid")
    p.add_argument("--sfm", help="uncorrected measured grid")
    p.add_argument("--corrected", help="corrected measured grid")
    p.add_argument("--pred", help="whole prediction grid")
    p.add_argument("--combined", help="combined prediction grid")
    p.add_argument("--out", required=True, help="output directory (metrics.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="difference histograms and hydrographic banding")
    p.add_argument("--ref", required=True)
    p.add_argument("--sfm", help="uncorrected measured grid")
    p.add_argument("--corrected", help="corrected measured grid")
    p.add_argument("--pred", help="whole prediction grid")
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--out", required=True, help="output directory (hist.csv, banding.csv)")
    p.set_defaults(func=cmd_report)

    _register_flags(parser)
    for command in sub.choices.values():
        _register_flags(command)
    return parser


def _scene_config(args):
    cfg = refraction.SceneConfig.from_file(args.config) if args.config else refraction.SceneConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_synth(args):
    cfg = _scene_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = refraction.generate_scene(cfg)
    write_ppm(bundle.image, out / "image.ppm")
    write_grid(bundle.sfm, out / "sfm.grid")
    write_grid(bundle.truth, out / "truth.grid")
    print(f"scene written to {out} (gap fraction {bundle.gap_fraction:.3f})")
    return 0


def cmd_svr_train(args):
    cfg = _scene_config(args)
    pairs = refraction.generate_depth_pairs(cfg)
    if args.noise > 0:
        rng = np.random.default_rng(cfg.seed + 0xA7)
        noisy = np.minimum(pairs.apparent + rng.normal(0, args.noise, pairs.apparent.shape), 0.0)
        # noise can break the |Z0| <= |Z| invariant pointwise; keep raw arrays
        pairs = svr.ArrayPairs(apparent=noisy, true=pairs.true)
    train_cfg = svr.SvrTrainConfig()
    if args.grid_search:
        best_c, scores = svr.grid_search_C(pairs, train_cfg)
        train_cfg = svr.SvrTrainConfig(C=best_c, epsilon=train_cfg.epsilon)
        print(f"grid search selected C={best_c} (scores: {scores})")
    model, state = svr.train_svr(pairs, train_cfg)
    model.save(args.out)
    print(f"svr model: w={model.w:.6f} b={model.b:.6f} (kkt gap {state.kkt_gap:.2e}) -> {args.out}")
    return 0


def cmd_correct(args):
    model = svr.LinearSvrModel.load(args.model)
    dsm = read_grid(args.dsm)
    write_grid(svr.correct_raster(model, dsm), args.out)
    print(f"corrected grid -> {args.out}")
    return 0


def _train_configs(args):
    raw = cfgmod.read_config(args.config) if args.config else {}
    net_cfg = net.NetworkConfig.from_mapping(raw)
    bsw = BswConfig(
        d_min=cfgmod.get_float(raw, "loss.d_min", 1.0),
        d_max=cfgmod.get_float(raw, "loss.d_max", 2.0),
        decay=cfgmod.get_str(raw, "loss.decay", "linear", choices=("linear", "exponential")),
        w_floor=cfgmod.get_float(raw, "loss.w_floor", 1.0),
        w_ceil=cfgmod.get_float(raw, "loss.w_ceil", 2.0),
    )
    train_cfg = training.TrainConfig(
        lr0=cfgmod.get_float(raw, "train.lr0", 2.5e-4),
        epochs=cfgmod.get_int(raw, "train.epochs", 30),
        batch_size=cfgmod.get_int(raw, "train.batch_size", 4),
        seed=cfgmod.get_int(raw, "train.seed", 0),
        augment=cfgmod.get_bool(raw, "train.augment", True),
        glint_threshold=cfgmod.get_int(raw, "train.glint_threshold", 235),
        norm=NormalizationSpec(
            rgb_divisor=cfgmod.get_float(raw, "norm.rgb_divisor", 255.0),
            depth_divisor=cfgmod.get_float(raw, "norm.depth_divisor", -15.0),
        ),
        loss=cfgmod.get_str(raw, "train.loss", "bsw", choices=("bsw", "rmse")),
        bsw=bsw,
        patch_px=cfgmod.get_int(raw, "train.patch_px", 32),
    )
    if getattr(args, "seed", None) is not None:
        train_cfg.seed = args.seed
    return net_cfg, train_cfg


def cmd_train(args):
    net_cfg, train_cfg = _train_configs(args)
    image = read_ppm(args.image)
    dsm = read_grid(args.dsm)
    image.gsd = dsm.gsd
    patches = extract_patches(image, dsm, train_cfg.patch_px)
    params, trace = training.train(patches, net_cfg, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "norm.rgb_divisor": repr(train_cfg.norm.rgb_divisor),
        "norm.depth_divisor": repr(train_cfg.norm.depth_divisor),
        "train.patch_px": train_cfg.patch_px,
        "train.glint_threshold": train_cfg.glint_threshold,
    }
    net.save_checkpoint(out / "model.sbun", params, net_cfg, extra=extra)
    training.write_loss_trace(trace, out / "loss.csv")
    print(f"trained {train_cfg.epochs} epochs, final loss {trace[-1][1]:.6f} -> {out}")
    return 0


def cmd_predict(args):
    params, net_cfg, extra = net.load_checkpoint(args.model)
    image = read_ppm(args.image)
    train_cfg = training.TrainConfig(
        norm=NormalizationSpec(
            rgb_divisor=float(extra.get("norm.rgb_divisor", 255.0)),
            depth_divisor=float(extra.get("norm.depth_divisor", -15.0)),
        ),
        patch_px=int(extra.get("train.patch_px", 32)),
        glint_threshold=int(extra.get("train.glint_threshold", 235)),
    )
    pred = training.predict_raster(params, net_cfg, image, train_cfg)
    write_grid(pred, args.out)
    print(f"whole prediction -> {args.out}")
    return 0


def cmd_combine(args):
    sfm = read_grid(args.sfm)
    pred = read_grid(args.pred)
    write_grid(training.combine_prediction(sfm, pred), args.out)
    print(f"combined prediction -> {args.out}")
    return 0


def _load_optional(path):
    return read_grid(path) if path else None


def cmd_eval(args):
    ref = read_grid(args.ref)
    rows = metricsmod.evaluate_pipeline(
        ref,
        sfm=_load_optional(args.sfm),
        corrected=_load_optional(args.corrected),
        predicted=_load_optional(args.pred),
        combined=_load_optional(args.combined),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metricsmod.write_metrics_csv(rows, out / "metrics.csv")
    print(metricsmod.format_metrics_table(rows))
    return 0


def cmd_report(args):
    ref = read_grid(args.ref)
    named = {}
    for label, path in (("sfm", args.sfm), ("corrected", args.corrected), ("predicted", args.pred)):
        if not path:
            continue
        grid = read_grid(path)
        errors, _ = metricsmod._selected_errors(grid, ref)
        named[label] = errors
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if named:
        metricsmod.write_histogram_csv(out / "hist.csv", named, bins=args.bins)
    if args.pred:
        banding = metricsmod.hydro_banding(read_grid(args.pred), ref)
        metricsmod.write_banding_csv(banding, out / "banding.csv")
        for scheme, table in banding.items():
            parts = ", ".join(f"{band}: {pct:.2f}%" for band, pct in table.items())
            print(f"{scheme}: {parts}")
    return 0


def cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    raise SystemExit(cli())
