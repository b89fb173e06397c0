"""``mvaf`` command line: prepare, synth, train, eval, infer, ablate, dump.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.  ``MVAF_DATA_ROOT`` overrides the configured dataset
root.  Heavy modules load only after ``--deterministic`` has pinned the
BLAS thread pools.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

DATA_ROOT_ENV = "MVAF_DATA_ROOT"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
               "NUMEXPR_NUM_THREADS")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- shared plumbing --------------------------------------------------------------------------------
def _load_cfg(args):
    from . import config as C

    cfg = C.load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["train"] = {"seed": args.seed}
    root = os.environ.get(DATA_ROOT_ENV)
    if root:
        changes["data"] = {"root": root}
    steps = getattr(args, "steps", None)
    if steps is not None:
        changes.setdefault("train", {})["steps"] = steps
    return C.apply_overrides(cfg, changes) if changes else cfg


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg, out: Path) -> None:
    from . import config as C

    C.save_config(cfg, out / "config.yaml")


def _frame_ids(cfg) -> list[str]:
    from . import kitti_io as K

    root = Path(cfg.data.root)
    index = root / cfg.data.split / cfg.data.index
    if index.exists():
        return K.read_split(index)
    velo = root / cfg.data.split / "velodyne"
    if not velo.is_dir():
        raise DataError(f"no dataset at {root} (missing {velo} and {index}); run `mvaf synth` or `mvaf prepare`")
    return sorted(p.stem for p in velo.glob("*.bin"))


def _load_frames(cfg, ids=None):
    from . import kitti_io as K

    ids = _frame_ids(cfg) if ids is None else ids
    if not ids:
        raise DataError(f"dataset at {cfg.data.root} has no frames")
    return [K.load_frame(cfg.data.root, i, cfg.data.split) for i in ids]


def _model_from_checkpoint(args, cfg):
    from . import training as T

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return T.load_model(args.checkpoint, cfg)


# -- commands ---------------------------------------------------------------------------------------
def cmd_prepare(args) -> int:
    from . import kitti_io as K

    cfg = _load_cfg(args)
    root = Path(cfg.data.root)
    base = root / cfg.data.split
    ids = sorted(p.stem for p in (base / "velodyne").glob("*.bin")) if (base / "velodyne").is_dir() else []
    required = ("velodyne", "calib", "label_2")
    problems = []
    for fid in ids:
        paths = K.frame_paths(root, fid, cfg.data.split)
        missing = [sub for sub in required if not paths[sub].exists()]
        if missing:
            problems.append(f"{fid}: missing {', '.join(missing)}")
            continue
        try:
            K.read_calib(paths["calib"])
            K.read_labels(paths["label_2"])
        except (K.KittiFormatError, ValueError) as exc:
            problems.append(f"{fid}: {exc}")
    # calib or label files without a cloud are broken frames too
    for sub in ("calib", "label_2"):
        d = base / sub
        if d.is_dir():
            problems.extend(f"{p.stem}: missing velodyne" for p in sorted(d.glob("*.txt")) if p.stem not in ids)
    if problems:
        for p in problems:
            print(f"prepare: {p}", file=sys.stderr)
        return EXIT_DATA
    base.mkdir(parents=True, exist_ok=True)
    K.write_split(base / cfg.data.index, ids)
    if not ids:
        print(f"prepare: warning: no frames under {base}; wrote an empty index", file=sys.stderr)
    _say(f"prepare: {len(ids)} frames indexed in {base / cfg.data.index}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import kitti_io as K

    cfg = _load_cfg(args)
    root = Path(args.out) if args.out else Path(cfg.data.root)
    n = cfg.data.synth_frames if args.frames is None else args.frames
    seed = cfg.data.synth_seed if args.seed is None else args.seed
    if n < 0:
        raise UsageError("--frames must be >= 0")
    ids = []
    for i in range(n):
        fid = f"{i:06d}"
        frame = K.synthetic_frame(fid, seed * 100003 + i, cfg.data.synth_cars, image_size=cfg.model.image_size)
        K.save_frame(root, frame, cfg.data.split)
        ids.append(fid)
    (root / cfg.data.split).mkdir(parents=True, exist_ok=True)
    K.write_split(root / cfg.data.split / cfg.data.index, ids)
    _write_config(cfg, root)
    _say(f"synth: wrote {n} frames to {root / cfg.data.split}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import training as T

    cfg = _load_cfg(args)
    frames = _load_frames(cfg)
    out = _out_dir(args, "runs/train")
    state = None
    if args.checkpoint:
        state = T.load_state(args.checkpoint, cfg)
        _say(f"train: resuming from step {state.step}")
    w = cfg.loss
    _say(f"train: {len(frames)} frames, {cfg.train.steps} steps, batch {cfg.train.batch_size}, "
         f"loss weights loc={w.loc} cls={w.cls} dir={w.dir} fore={w.fore} ctr={w.ctr}")
    start = time.perf_counter()

    def log(rec):
        parts = " ".join(f"{k}={v:.4f}" for k, v in rec.parts.items())
        _say(f"step {rec.step:5d} lr={rec.lr:.2e} total={rec.total:.4f} {parts} [{time.perf_counter() - start:.1f}s]")

    until = cfg.train.steps if args.until is None else args.until
    if not 0 < until <= cfg.train.steps:
        raise UsageError(f"--until must lie in 1..{cfg.train.steps}")
    try:
        state = T.train(cfg, frames, state=state, steps=until, out_dir=out, log=log)
    except T.TrainingAborted as exc:
        print(f"train: aborted: {exc}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    _say(f"train: done, loss reduction {T.loss_reduction(state.history):.4f}; checkpoint {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import json

    from . import eval_harness as E

    cfg = _load_cfg(args)
    model = _model_from_checkpoint(args, cfg)
    frames = _load_frames(cfg)
    out = _out_dir(args, "runs/eval")
    res = E.evaluate_model(model, frames, cfg)
    _write_config(cfg, out)
    report = {"ap_3d": res.ap_3d, "ap_bev": res.ap_bev, "iou_thr": res.iou_thr,
              "ap_all_objects": res.ap_loose, "loose_thr": res.loose_thr, "frames": len(frames)}
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _say(res.summary())
    return EXIT_OK


def cmd_infer(args) -> int:
    from . import detection as D
    from . import eval_harness as E
    from . import kitti_io as K

    cfg = _load_cfg(args)
    model = _model_from_checkpoint(args, cfg)
    frames = _load_frames(cfg)
    out = _out_dir(args, "runs/infer")
    results = out / "results"
    results.mkdir(exist_ok=True)
    for frame, dets in zip(frames, E.run_inference(model, frames, cfg)):
        K.write_labels(results / f"{frame.frame_id}.txt", D.detections_to_labels(dets, frame.calib, cfg.model.image_size))
    _write_config(cfg, out)
    _say(f"infer: wrote {len(frames)} result files to {results}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from . import eval_harness as E

    cfg = _load_cfg(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in E.ABLATION_VARIANTS]
    if unknown or not variants:
        raise UsageError(f"unknown variants {unknown}; choose from {', '.join(E.ABLATION_VARIANTS)}")
    frames = _load_frames(cfg)
    out = _out_dir(args, "runs/ablate")
    _write_config(cfg, out)
    report = E.run_ablation(cfg, variants, frames, out_dir=out, log=_say)
    _say(report.to_csv().rstrip())
    return EXIT_OK


def cmd_dump(args) -> int:
    from . import eval_harness as E

    cfg = _load_cfg(args)
    model = _model_from_checkpoint(args, cfg)
    ids = _frame_ids(cfg)
    fid = args.frame or (ids[0] if ids else None)
    if fid is None or fid not in ids:
        raise DataError(f"frame {fid!r} is not in the dataset")
    (frame,) = _load_frames(cfg, [fid])
    out = _out_dir(args, "runs/dump")
    paths = E.dump_visualizations(model, frame, cfg, out)
    _write_config(cfg, out)
    _say(f"dump: wrote {len(paths)} images to {out}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "ablate": cmd_ablate, "dump": cmd_dump}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run config (default: the toy preset)")
    common.add_argument("--checkpoint", help="checkpoint to load (train: resume)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-exact reruns")
    parser = _Parser(prog="mvaf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="verify a dataset and write its index")
    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset in KITTI formats")
    p.add_argument("--frames", type=int, help="number of frames (default data.synth_frames)")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--until", type=int, help="stop after this step of the schedule (resume later)")
    sub.add_parser("eval", parents=[common], help="AP of a checkpoint on the dataset")
    sub.add_parser("infer", parents=[common], help="write KITTI result files")
    p = sub.add_parser("ablate", parents=[common], help="train and evaluate fusion and weighting variants")
    p.add_argument("--variants", default="ES,SC,APF", help="comma-separated variant names")
    p.add_argument("--steps", type=int, help="override train.steps")
    p = sub.add_parser("dump", parents=[common], help="write feature and weight images for one frame")
    p.add_argument("--frame", help="frame id (default: first in the index)")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"mvaf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.deterministic:
        for var in THREAD_VARS:
            os.environ[var] = "1"
        if "numpy" in sys.modules:
            print("mvaf: warning: numpy already loaded; thread limits may not apply", file=sys.stderr)

    from .autodiff import CheckpointError
    from .backbones import ConfigError
    from .detection import NumericError
    from .kitti_io import KittiFormatError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"mvaf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, KittiFormatError, CheckpointError, OSError) as exc:
        print(f"mvaf {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"mvaf {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
