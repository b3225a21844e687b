"""Command-line workflow: synth, train, eval, gradcheck, graph, significance.

Configuration comes from an INI file (sections: model, loss, schedule, data,
eval) with flag overrides winning; the fully resolved configuration is echoed
into every run directory.  Exit codes: 0 ok, 1 usage/config, 2 io/data,
3 numerical abort, 4 check failure.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from . import checksuite, reporting
from .datasynth import Dataset, ManifestError, SynthSpec, generate_synthetic, load_manifest
from .evalprotocols import evaluate_crosscam, evaluate_repeated_splits, report_csv
from .gridgraph import build_grid_graph, write_graph_file
from .losses import LossConfig
from .model import ConfigError, ModelConfig, VARIANTS, build_model, export_significance, \
    extract_features
from .optim import CheckpointFormatError, NumericalAbort, OptimState, ScheduleConfig, \
    TrainConfig, compute_channel_stats, format_log_row, load_checkpoint, make_checkpoint, \
    normalize, save_checkpoint, train_epochs

DEFAULTS = {
    "model": {
        "input_size": "32",
        "backbone_channels": "16,32,64",
        "last_stride_one": "true",
        "sgn_depth": "3",
        "embed_dim": "64",
        "variant": "hpgn",
    },
    "loss": {
        "alpha": "2", "beta": "1", "rho": "2", "lam": "1",
        "epsilon": "0.1", "margin": "1.2",
    },
    "schedule": {"epochs": "150", "base_lr": "0.03", "warmup_start": "0.0003"},
    "data": {"p": "8", "k": "4", "flip_p": "0.5", "erase_p": "0.5"},
    "eval": {"protocol": "crosscam", "repeats": "10", "split_mode": "conventional"},
}


def resolve_config(path: str | None, overrides: dict[tuple[str, str], str]) -> dict[str, dict[str, str]]:
    """defaults <- file <- flag overrides; unknown sections/keys rejected."""
    cfg = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for sec in parser.sections():
            if sec not in cfg:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, val in parser.items(sec):
                if key not in cfg[sec]:
                    raise ConfigError(f"unknown key {key!r} in section [{sec}]")
                cfg[sec][key] = val
    for (sec, key), val in overrides.items():
        if val is not None:
            cfg[sec][key] = str(val)
    return cfg


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def write_config_echo(cfg: dict, out_dir) -> None:
    path = os.path.join(out_dir, "config_resolved.ini")
    with open(path, "w") as fh:
        for sec, vals in cfg.items():
            fh.write(f"[{sec}]\n")
            for key, val in vals.items():
                fh.write(f"{key} = {val}\n")
            fh.write("\n")


def model_config_from(cfg: dict, num_classes: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        num_classes=num_classes,
        input_size=int(m["input_size"]),
        backbone_channels=tuple(int(x) for x in m["backbone_channels"].split(",")),
        last_stride_one=_bool(m["last_stride_one"]),
        sgn_depth=int(m["sgn_depth"]),
        embed_dim=int(m["embed_dim"]),
        variant=m["variant"],
    )


def loss_config_from(cfg: dict) -> LossConfig:
    s = cfg["loss"]
    return LossConfig(alpha=float(s["alpha"]), beta=float(s["beta"]), rho=float(s["rho"]),
                      lam=float(s["lam"]), epsilon=float(s["epsilon"]), margin=float(s["margin"]))


def _resolve_threads(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("HPGN_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _apply_threads(n: int) -> None:
    # best effort: BLAS pools read these at first use
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    _apply_threads(_resolve_threads(args))
    try:
        cfg = resolve_config(args.config, {
            ("model", "variant"): args.variant,
            ("schedule", "epochs"): args.epochs,
        })
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        input_size = int(cfg["model"]["input_size"])
        dataset = load_manifest(args.data, input_size=input_size)
    except (ManifestError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    write_config_echo(cfg, args.out)

    labels = dataset.labels
    num_classes = len(np.unique(labels))
    remap = {ident: i for i, ident in enumerate(np.unique(labels))}
    labels = np.array([remap[x] for x in labels])
    try:
        mc = model_config_from(cfg, num_classes)
        losses = loss_config_from(cfg)
        schedule = ScheduleConfig(total_epochs=int(cfg["schedule"]["epochs"]),
                                  base_lr=float(cfg["schedule"]["base_lr"]),
                                  warmup_start=float(cfg["schedule"]["warmup_start"]))
        tc = TrainConfig(epochs=schedule.total_epochs, p=int(cfg["data"]["p"]),
                         k=int(cfg["data"]["k"]), seed=args.seed,
                         checkpoint_every=args.checkpoint_every,
                         flip_p=float(cfg["data"]["flip_p"]),
                         erase_p=float(cfg["data"]["erase_p"]))
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    start_epoch = 0
    if args.resume:
        try:
            ckpt = load_checkpoint(args.resume)
            model, state, stats = ckpt.build_model()
            start_epoch = ckpt.epoch
        except (CheckpointFormatError, OSError, KeyError) as exc:
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return 2
    else:
        model = build_model(mc, seed=args.seed)
        state = OptimState()
        stats = compute_channel_stats(dataset.images)

    echo = {
        "model": {
            "num_classes": num_classes, "input_size": mc.input_size,
            "backbone_channels": list(mc.backbone_channels),
            "last_stride_one": mc.last_stride_one, "sgn_depth": mc.sgn_depth,
            "embed_dim": mc.embed_dim, "variant": mc.variant, "scale_windows": None,
        },
        "optim": {"momentum": state.momentum, "weight_decay": state.weight_decay},
        "loss": {k: v for k, v in cfg["loss"].items()},
        "schedule": {k: v for k, v in cfg["schedule"].items()},
        "data": {k: v for k, v in cfg["data"].items()},
    }

    log_path = os.path.join(args.out, "metric_log.csv")
    rows = []
    mode = "a" if start_epoch else "w"
    log_fh = open(log_path, mode)
    if not start_epoch:
        log_fh.write("epoch,lr,total,lsrs1,triplet1,lsrs2,triplet2\n")

    def hook(row):
        rows.append(row)
        log_fh.write(format_log_row(row) + "\n")
        log_fh.flush()
        epoch = row["epoch"]
        if tc.checkpoint_every and epoch % tc.checkpoint_every == 0:
            ck = make_checkpoint(model, state, stats, echo, epoch, args.seed)
            save_checkpoint(ck, os.path.join(args.out, "ckpt_latest.hpgn"))

    try:
        train_epochs(model, state, stats, dataset.images, labels,
                     schedule, losses, tc, start_epoch=start_epoch, log_hook=hook)
    except NumericalAbort as exc:
        log_fh.close()
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    log_fh.close()
    final = make_checkpoint(model, state, stats, echo, tc.epochs, args.seed)
    save_checkpoint(final, os.path.join(args.out, "final.hpgn"))
    if rows:
        reporting.save_loss_curves(rows, args.out)
    print(f"trained {tc.epochs - start_epoch} epochs; outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    _apply_threads(_resolve_threads(args))
    try:
        ckpt = load_checkpoint(args.checkpoint)
        model, _, stats = ckpt.build_model()
    except (CheckpointFormatError, OSError, KeyError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    try:
        dataset = load_manifest(args.data, input_size=model.config.input_size)
    except (ManifestError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    feats = extract_features(model, normalize(dataset.images, stats))
    ids = dataset.labels
    cams = dataset.cameras
    splits = np.array([s.split for s in dataset.samples])

    if args.protocol == "crosscam":
        if "probe" in splits and "gallery" in splits:
            p_idx = np.flatnonzero(splits == "probe")
            g_idx = np.flatnonzero(splits == "gallery")
        else:
            p_idx = g_idx = np.arange(len(ids))
        report = evaluate_crosscam(feats[p_idx], ids[p_idx], cams[p_idx],
                                   feats[g_idx], ids[g_idx], cams[g_idx])
        if not report.per_query_ap:
            print("warning: every query was excluded (no cross-camera positives)")
    else:
        rng = np.random.default_rng(args.seed)
        try:
            report = evaluate_repeated_splits(feats, ids, args.repeats, rng,
                                              mode=args.split_mode)
        except ValueError as exc:
            print(f"eval error: {exc}", file=sys.stderr)
            return 1

    with open(os.path.join(args.out, "report.csv"), "w") as fh:
        fh.write(report_csv(report))
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(report.summary() + "\n")
    if len(report.cmc):
        reporting.save_cmc_figure(report, args.out)
    if args.per_repeat and report.per_repeat:
        with open(os.path.join(args.out, "per_repeat.csv"), "w") as fh:
            fh.write("repeat,rank1,rank5,rank10,mAP\n")
            for i, rep in enumerate(report.per_repeat, 1):
                rr = rep["rank_rates"]
                fh.write(f"{i},{rr[1]:.6f},{rr[5]:.6f},{rr[10]:.6f},{rep['mAP']:.6f}\n")
    print(report.summary())
    return 0


def cmd_gradcheck(args) -> int:
    scopes = checksuite.SCOPES if args.scope == "all" else (args.scope,)
    try:
        ok = True
        for scope in scopes:
            report = checksuite.run_scope(scope, eps=args.eps, tol=args.tol)
            for line in report.lines():
                print(f"{scope:<8s} {line}")
            ok = ok and report.passed
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 4


def cmd_graph(args) -> int:
    try:
        graph = build_grid_graph(args.height, args.width)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        write_graph_file(graph, args.out)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {graph.d}-node graph to {args.out}")
    return 0


def cmd_significance(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint)
        model, _, _ = ckpt.build_model()
    except (CheckpointFormatError, OSError, KeyError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 2
    maps = export_significance(model)
    os.makedirs(args.out, exist_ok=True)
    if not maps:
        print("warning: model variant has no spatial-graph layers; nothing to export")
        return 0
    written = reporting.save_heatmaps(maps, args.out)
    print(f"wrote {len(written)} heatmaps to {args.out}")
    return 0


def cmd_synth(args) -> int:
    try:
        spec = SynthSpec(identity_count=args.ids, images_per_identity=args.imgs,
                         image_size=args.size, camera_count=args.cams,
                         marker_min=args.marker_min, marker_max=args.marker_max,
                         group_size=args.group_size, noise=args.noise,
                         clutter=args.clutter, seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        manifest = generate_synthetic(spec, args.out)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {spec.identity_count * spec.images_per_identity} images; manifest: {manifest}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpgn",
        description="Spatial-graph pyramid re-identification: train, evaluate, inspect.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a manifest dataset")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--data", required=True, help="dataset directory with manifest.csv")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--variant", default=None,
                   help="one of: " + ", ".join(VARIANTS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded numerics")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=10)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate retrieval metrics from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--protocol", choices=("crosscam", "repeated"), default="crosscam")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--split-mode", choices=("conventional", "literal"), default="conventional")
    p.add_argument("--per-repeat", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of gradients")
    p.add_argument("--scope", default="all", choices=("all",) + checksuite.SCOPES)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("graph", help="dump a spatial grid graph as triplets")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("significance", help="export learned location-importance maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_significance)

    p = sub.add_parser("synth", help="generate a synthetic identity dataset")
    p.add_argument("--ids", type=int, default=50)
    p.add_argument("--imgs", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--cams", type=int, default=4)
    p.add_argument("--group-size", type=int, default=5,
                   help="identities per shared-color group (1 = unique colors)")
    p.add_argument("--marker-min", type=int, default=5)
    p.add_argument("--marker-max", type=int, default=9)
    p.add_argument("--noise", type=float, default=0.03,
                   help="pixel noise sigma")
    p.add_argument("--clutter", type=int, default=0,
                   help="bright speckle distractors per image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
