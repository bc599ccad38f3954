"""``pmslam`` command line: reconstruct, evaluate, synth, train, gradcheck, convert."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import DatasetError, InputError, NumericError, StageError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("pmslam")


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, StageError):
        return _exit_code(exc.cause)
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (InputError, FileNotFoundError, IsADirectoryError, NotADirectoryError, PermissionError)):
        return EXIT_INPUT
    return None


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ------------------------------------------------------------- reconstruct


def _adapters(args, data, cfg):
    from . import oracle, pipeline

    if args.oracle is not None:
        if data.depth is None or data.poses is None:
            raise InputError("--oracle needs a dataset with depth and poses")
        gt = oracle.GroundTruth(data.depth, data.poses, data.intrinsics)
        sigma = args.oracle * _diameter(gt)
        return oracle.OracleI2P(gt, sigma, cfg.seed), oracle.OracleL2W(gt, sigma, cfg.seed), oracle.oracle_scorer(gt)
    if not (args.i2p and args.l2w):
        raise InputError("reconstruct needs --i2p and --l2w checkpoints, or --oracle SIGMA")
    from .i2p import I2PNet
    from .l2w import L2WNet
    from .retrieval import RetrievalHead

    i2p = I2PNet.load(args.i2p)
    l2w = L2WNet.load(args.l2w)
    head = RetrievalHead.load(args.head, i2p) if args.head else None
    if head is None and cfg.selection == "retrieval":
        raise InputError("retrieval selection needs --head (or use --set selection=recent)")
    return pipeline.from_models(i2p, l2w, head)


def _diameter(gt) -> float:
    from .eval import build_gt_cloud

    cloud = build_gt_cloud(gt.depth, gt.intrinsics, gt.poses)
    lo, hi = cloud.min(0), cloud.max(0)
    return float(np.linalg.norm(hi - lo))


def cmd_reconstruct(args) -> int:
    from .geometry import write_poses
    from .io import export_scene, load_config, load_dataset
    from .pipeline import run

    overrides = _overrides(args.set)
    if args.no_conf_filter:
        overrides["conf_threshold"] = "0"
    cfg = load_config(args.config, overrides, args.preset)
    data = load_dataset(args.dataset, tuple(args.crop))
    i2p, l2w, scorer = _adapters(args, data, cfg)
    result = run(i2p, l2w, scorer, data.images, cfg, data.intrinsics, overlap=args.overlap)
    for line in result.log_lines:
        print(line)
    if len(result.scene) == 0:
        raise NumericError("no points survived confidence filtering; try --no-conf-filter")
    if args.out:
        export_scene(args.out, result.scene, binary=not args.ascii)
    if args.traj:
        traj = result.scene.trajectory(seed=cfg.seed)
        write_poses(args.traj, [traj[i] for i in sorted(traj)])
    print(f"frames={result.n_frames} registered={result.registered} points={len(result.scene)} "
          f"fps={result.fps:.2f} elapsed={result.timings['total']:.3f}s")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate


def cmd_evaluate(args) -> int:
    from .eval import build_gt_cloud, evaluate
    from .geometry import read_poses
    from .io import load_dataset, read_ply

    data = load_dataset(args.dataset, tuple(args.crop))
    if data.depth is None or data.poses is None:
        raise DatasetError(args.dataset, "evaluation needs depth and poses", None)
    ply = read_ply(args.pred)
    pred = np.stack([ply["x"], ply["y"], ply["z"]], axis=1).astype(np.float64)
    gt, gf, gp = build_gt_cloud(data.depth, data.intrinsics, data.poses, return_index=True)
    pred_index = (ply["frame_id"], ply["pixel_index"]) if "frame_id" in ply and "pixel_index" in ply else None
    traj = read_poses(args.traj) if args.traj else None
    gt_traj = None
    if traj is not None:
        if len(traj) != len(data.poses):
            raise InputError(f"{len(traj)} predicted poses for {len(data.poses)} frames")
        gt_traj = data.poses
    report = evaluate(
        pred, gt, pred_index, (gf, gp) if pred_index is not None else None, traj, gt_traj,
        cap=None if args.cap == 0 else args.cap, seed=args.seed,
    )
    print(report.to_text(), end="")
    if args.report:
        report.write(args.report)
    return EXIT_OK


# ------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    from .io import save_dataset
    from .synth.scene import gen_scene

    scene = gen_scene(args.seed, args.frames, (args.size, args.size))
    save_dataset(args.out, scene.images, scene.intrinsics, scene.depth, scene.poses, units="room")
    print(f"wrote {scene.n_frames} frames to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------- train


def _load_sequences(dirs, crop):
    from .io import load_dataset

    seqs = []
    for d in dirs:
        root = Path(d)
        roots = [root] if (root / "manifest.txt").is_file() else sorted(p.parent for p in root.glob("*/manifest.txt"))
        if not roots:
            raise DatasetError(root, "no manifest.txt here or one level below", None)
        for r in roots:
            data = load_dataset(r, crop)
            if data.depth is None or data.poses is None:
                raise DatasetError(r, "training data needs depth and poses", None)
            seqs.append(data)
    return seqs


def cmd_train(args) -> int:
    import torch

    from .i2p import I2PNet
    from .l2w import L2WNet
    from .nn import BlockConfig
    from .retrieval import RetrievalHead
    from .synth import train
    from .synth.clips import make_training_clips

    torch.set_num_threads(1)
    seqs = _load_sequences(args.data, tuple(args.crop))
    cfg = train.TrainConfig(
        clip_len=args.clip_len, batch_size=args.batch_size, epochs=args.epochs, lr=args.lr, seed=args.seed,
        mix=args.mix, max_batches=args.max_batches,
    )
    bcfg = BlockConfig(d=args.width, img_size=tuple(args.crop))
    if args.kind == "i2p":
        model = I2PNet(bcfg, seed=args.seed)
        clips = [c for s in seqs for c in make_training_clips(s, cfg.clip_len, args.stride, skip=args.skip)]
        result = train.train_i2p_toy(model, clips, cfg, progress=print)
        model.save(args.out)
    else:
        if not args.i2p:
            raise InputError(f"train {args.kind} needs a trained --i2p checkpoint")
        i2p = I2PNet.load(args.i2p).eval()
        if args.kind == "l2w":
            model = L2WNet(i2p.cfg, seed=args.seed)
            clips = [c for s in seqs for c in make_training_clips(s, cfg.clip_len, args.stride, mode="l2w", skip=args.skip)]
            result = train.train_l2w_toy(model, i2p, clips, cfg, progress=print)
            model.save(args.out)
        else:
            head = RetrievalHead(i2p, seed=args.seed)
            data = train.retrieval_pairs(i2p, head, seqs, seed=args.seed)
            result = train.train_retrieval_head(head, i2p, data, cfg, progress=print)
            head.save(args.out)
    man_path = args.manifest or f"{args.out}.json"
    Path(man_path).write_text(json.dumps(result.manifest, indent=2) + "\n", encoding="utf-8")
    print(f"saved {args.out} (manifest {man_path})")
    return EXIT_OK


# --------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .diagnostics import TOLERANCE, gradcheck_suite

    errors = gradcheck_suite(d=args.width, seed=args.seed)
    worst = 0.0
    for name, err in errors.items():
        print(f"{name:28s} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if worst < TOLERANCE else EXIT_NUMERIC


# ----------------------------------------------------------------- convert


def cmd_convert(args) -> int:
    from .convert import CONVERTERS

    if args.format not in CONVERTERS:
        raise InputError(f"unknown source format {args.format!r}; choose from {sorted(CONVERTERS)}")
    intr = tuple(args.intrinsics) if args.intrinsics else None
    n = CONVERTERS[args.format](args.src, args.out, intrinsics=intr, limit=args.limit, step=args.step)
    print(f"converted {n} frames to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmslam", description="Dense pointmap reconstruction from monocular video.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def crop(sp):
        sp.add_argument("--crop", type=int, nargs=2, default=[64, 64], metavar=("H", "W"), help="center crop size")

    r = sub.add_parser("reconstruct", help="reconstruct a dataset into a point cloud")
    r.add_argument("dataset")
    r.add_argument("--config", help="key = value config file")
    r.add_argument("--preset", choices=["replica-style", "sampled-style"])
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    r.add_argument("--out", help="PLY output path")
    r.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    r.add_argument("--traj", help="write per-frame camera poses here")
    r.add_argument("--no-conf-filter", action="store_true", help="keep every point regardless of confidence")
    r.add_argument("--i2p", help="I2P checkpoint")
    r.add_argument("--l2w", help="L2W checkpoint")
    r.add_argument("--head", help="retrieval head checkpoint")
    r.add_argument("--oracle", type=float, metavar="SIGMA",
                   help="use ground-truth oracles with noise SIGMA (fraction of scene diameter)")
    r.add_argument("--overlap", action="store_true", help="run local inference in a producer thread")
    crop(r)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="score a reconstruction against dataset ground truth")
    e.add_argument("pred")
    e.add_argument("dataset")
    e.add_argument("--report", help="write the JSON report here")
    e.add_argument("--traj", help="predicted poses (one 3x4 line per frame) for ATE")
    e.add_argument("--cap", type=int, default=200_000, help="max points per cloud for metrics (0 = no cap)")
    e.add_argument("--seed", type=int, default=0)
    crop(e)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="render a synthetic scene to the dataset layout")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=None, help="frame count (default: random 64-256)")
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a toy network on datasets with ground truth")
    t.add_argument("kind", choices=["i2p", "l2w", "retrieval"])
    t.add_argument("--data", required=True, action="append", help="dataset dir, or a dir of datasets (repeatable)")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--i2p", help="frozen I2P checkpoint (l2w, retrieval)")
    t.add_argument("--manifest", help="run manifest path (default: <out>.json)")
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--clip-len", type=int, default=5)
    t.add_argument("--stride", type=int, default=1)
    t.add_argument("--skip", type=int, default=1)
    t.add_argument("--mix", type=float, default=0.5)
    t.add_argument("--width", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--max-batches", type=int, default=None)
    crop(t)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gradcheck", help="finite-difference check of every block and loss")
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("convert", help="convert a benchmark sequence to the dataset layout")
    c.add_argument("format", help="7scenes or replica")
    c.add_argument("src")
    c.add_argument("--out", required=True)
    c.add_argument("--intrinsics", type=float, nargs=4, metavar=("FX", "FY", "CX", "CY"))
    c.add_argument("--limit", type=int, default=None, help="max frames")
    c.add_argument("--step", type=int, default=1, help="keep every STEP-th frame")
    c.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        cause = exc.cause if isinstance(exc, StageError) else exc
        stage = f"[{exc.stage}] " if isinstance(exc, StageError) else ""
        print(f"pmslam: error: {stage}{type(cause).__name__}: {cause}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
