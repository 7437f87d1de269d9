"""Command-line surface: train, register, eval, synth, inspect-fg, params."""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, model as model_mod, train as train_mod, transform


def _manifest_path(arg, default_name="manifest.tsv"):
    p = Path(arg)
    if p.is_dir():
        p = p / default_name
    return p


def _cmd_train(args):
    cfg = train_mod.TrainConfig.from_text(Path(args.config).read_text())
    cfg.out_dir = args.out
    train_manifest = data.read_manifest(_manifest_path(args.manifest, "train.tsv"))
    val_path = _manifest_path(args.manifest, "val.tsv")
    if Path(args.manifest).is_dir() and val_path.exists():
        val_manifest = data.read_manifest(val_path)
    else:
        val_manifest = train_manifest
    best, history = train_mod.train(
        cfg, train_manifest, val_manifest, log_fn=lambda s: print(s, flush=True)
    )
    print(f"best checkpoint: {best}")
    return 0


def _load_pair_volumes(args):
    fixed = data.read_fvol(args.fixed)
    moving = data.read_fvol(args.moving)
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed {fixed.dims} and moving {moving.dims} differ")
    return fixed, moving


def _cmd_register(args):
    net = model_mod.load_checkpoint(args.model)
    fixed, moving = _load_pair_volumes(args)
    psi, _ = metrics.predict_deformation(net, fixed.tensor(), moving.tensor())
    warped = transform.warp(moving.tensor(), psi, "trilinear")
    data.write_fvol(args.out_warped, data.Volume(warped.data[0], moving.spacing))
    data.write_fvol(
        args.out_flow, data.Volume(psi.field.data, moving.spacing, data.FLOW)
    )
    if args.warp_labels:
        labels = data.read_fvol(args.warp_labels)
        moved = transform.warp(
            labels.tensor() if labels.role == data.FLOW
            else data.Volume(labels.data.astype(np.float32), labels.spacing).tensor(),
            psi,
            "nearest",
        )
        out_path = str(Path(args.out_warped).with_suffix("")) + "_labels.fvol"
        data.write_fvol(
            out_path,
            data.Volume(moved.data[0].astype(np.uint8), labels.spacing, data.LABELS),
        )
        print(f"warped labels: {out_path}")
    return 0


def _cmd_eval(args):
    net = model_mod.load_checkpoint(args.model)
    manifest = data.read_manifest(_manifest_path(args.manifest, "test.tsv"))
    pairs = data.candidate_pairs(manifest, "labeled_only")
    if manifest.intra:
        pairs = [(a, b) for a, b in pairs if a.frame == "fix"]
    n_labels = 0
    reports = []
    for fe, me in pairs:
        fi, fl = data.load_entry(fe)
        mi, ml = data.load_entry(me)
        if not n_labels:
            n_labels = int(max(fl.data.max(), ml.data.max())) + 1
        reports.append(metrics.evaluate_pair(net, fi, mi, fl, ml, n_labels))
    summary = metrics.write_report(args.report, reports)
    print(
        f"{len(reports)} pairs: DSC {summary['dsc_before']:.4f} -> "
        f"{summary['dsc_after']:.4f}, NJD {summary['njd_percent']:.4f}%, "
        f"{summary['seconds']:.2f}s/pair"
    )
    return 0


def _cmd_synth(args):
    size = tuple(int(s) for s in args.size.split(","))
    if len(size) == 1:
        size = size * 3
    data.make_synthetic_dataset(args.out, args.n, size, args.seed)
    print(f"wrote {args.n} pairs under {args.out}")
    return 0


def _cmd_inspect_fg(args):
    net = model_mod.load_checkpoint(args.model)
    manifest = data.read_manifest(_manifest_path(args.manifest, "test.tsv"))
    pairs = data.candidate_pairs(manifest, "uniform")
    if manifest.intra:
        pairs = [(a, b) for a, b in pairs if a.frame == "fix"]
    tensors = []
    for fe, me in pairs:
        fi, _ = data.load_entry(fe)
        mi, _ = data.load_entry(me)
        tensors.append((fi.tensor(), mi.tensor()))
    means = model_mod.fg_weight_means(net, tensors)
    with open(args.out, "w") as f:
        f.write("block," + ",".join(str(i) for i in range(2, 9)) + "\n")
        f.write("w_fuse_mean," + ",".join(f"{m:.4f}" for m in means) + "\n")
    print(
        "gate means (blocks 2..8): " + " ".join(f"{m:.3f}" for m in means)
    )
    return 0


def _cmd_params(args):
    cfg = train_mod.TrainConfig.from_text(Path(args.config).read_text())
    net = model_mod.build_model(cfg.model)
    total = net.count_params()
    if args.detail:
        for name, n in net.param_breakdown():
            print(f"{name:32s} {n:>10,}")
    print(f"{total:,} parameters ({total/1e6:.2f}M)")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="fusionreg",
        description="Diffeomorphic registration with learned gated fusion",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config and manifest")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest", required=True,
                   help="train manifest (or a dataset dir with train.tsv/val.tsv)")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=_cmd_train)

    r = sub.add_parser("register", help="warp a moving volume onto a fixed one")
    r.add_argument("--model", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--out-warped", required=True)
    r.add_argument("--out-flow", required=True)
    r.add_argument("--warp-labels")
    r.set_defaults(fn=_cmd_register)

    e = sub.add_parser("eval", help="report DSC/NJD/runtime over labeled pairs")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", default="48,48,48")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_synth)

    i = sub.add_parser("inspect-fg", help="mean fusion-gate weights per block")
    i.add_argument("--model", required=True)
    i.add_argument("--manifest", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=_cmd_inspect_fg)

    pa = sub.add_parser("params", help="parameter count for a config")
    pa.add_argument("--config", required=True)
    pa.add_argument("--detail", action="store_true")
    pa.set_defaults(fn=_cmd_params)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, train_mod.TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
