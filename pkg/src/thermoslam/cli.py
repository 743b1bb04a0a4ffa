"""Command-line drivers: ``calibrate``, ``run``, ``synth``, ``eval``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 tracking lost.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRACKING_LOST = 4

log = logging.getLogger("thermoslam")


# -- calibrate ----------------------------------------------------------------


def cmd_calibrate(args) -> int:
    from . import calib
    from .dataset import Calibration, load_dataset, read_board, read_calibration, read_points_csv, write_calibration
    from .imgproc import read_pgm, rescale_to_8bit

    manifest = load_dataset(args.dataset)
    base = read_calibration(manifest.calibration)
    init_path = Path(args.init) if args.init else manifest.calib_init
    T_init = read_calibration(init_path).extrinsic if init_path else base.extrinsic
    if manifest.board is None:
        from .dataset import DataError

        raise DataError(f"{manifest.root}: board.txt missing")
    board = read_board(manifest.board)
    observations = []
    for e in manifest.frames:
        if e.corners is not None:
            corners = read_points_csv(e.corners, columns=2)
        else:
            img8 = rescale_to_8bit(read_pgm(e.image), conv=base.conv)
            corners = calib.find_chessboard_corners(img8, board)
            if corners is None:
                log.info("%d: no chessboard found", e.timestamp)
                continue
        observations.append(calib.Observation(e.timestamp, corners, read_points_csv(e.cloud)))
    if not observations:
        raise calib.CalibrationError("no chessboard observations")
    result = calib.calibrate(observations, board, base.K, T_init, seed=args.seed)
    out = Calibration(base.K, base.conv, result.extrinsic)
    write_calibration(args.output, out)
    log.info(
        "calibrated from %d planes (%d rejected); triplet %s; plane cost %.3g -> %.3g",
        len(result.pairs), len(result.rejected), result.triplet, result.refine.initial_cost, result.refine.final_cost,
    )
    print(f"wrote {args.output}")
    return EXIT_OK


# -- run ----------------------------------------------------------------------


def cmd_run(args) -> int:
    from .config import load_config, override
    from .dataset import load_dataset
    from .pipeline import run_pipeline

    cfg = load_config(args.config)
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg = override(cfg, key.strip(), value.strip())
    if args.deterministic:
        cfg.deterministic = True
    log.info("resolved configuration:\n%s", cfg.dump())
    manifest = load_dataset(args.dataset, tolerance_ns=int(round(cfg.sync_tolerance_ms * 1e6)))
    result = run_pipeline(manifest, cfg, args.output)
    print(
        f"processed {len(result.stamps)} frames, {len(result.keyframe_stamps)} keyframes, "
        f"{sum(e.accepted for e in result.events)} accepted loops; outputs in {args.output}"
    )
    if result.tracking_lost:
        print(f"tracking lost at {result.tracking_lost}", file=sys.stderr)
        return EXIT_TRACKING_LOST
    return EXIT_OK


# -- synth --------------------------------------------------------------------


def cmd_synth(args) -> int:
    from . import synth

    path = Path(args.scene)
    if path.is_file():
        text = path.read_text()
    elif args.scene in synth.PRESETS:
        text = f"preset = {args.scene}"
    else:
        raise ConfigError(f"{args.scene}: no such scene config file or preset")
    text += "\n" + "\n".join(s.replace("=", " = ", 1) for s in args.set or [])
    try:
        cfg = synth.parse_scene_config(text)
        preset = synth.make_preset(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = synth.generate_dataset(cfg, args.output, preset)
    print(f"wrote {len(preset.trajectory.poses)} frames to {out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .evaluate import evaluate_ate
    from .geom import read_tum

    try:
        est_t, est_p, _ = read_tum(args.estimate)
        gt_t, gt_p, gt_mask = read_tum(args.groundtruth)
    except (OSError, ValueError) as exc:
        from .dataset import DataError

        raise DataError(str(exc)) from None
    res = evaluate_ate(
        est_t,
        np.array([p.t for p in est_p]),
        gt_t,
        np.array([p.t for p in gt_p]),
        align=args.align,
        scale=args.scale,
        gt_valid=gt_mask if args.use_mask else None,
    )
    print(f"ate_rmse {res.rmse:.6f} m over {res.count} poses" + (f" (scale {res.scale:.6f})" if args.scale else ""))
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thermoslam", description="Thermal-LiDAR direct odometry and mapping.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="estimate the camera->LiDAR extrinsic from chessboard observations")
    c.add_argument("dataset")
    c.add_argument("-o", "--output", required=True, help="calibration file to write")
    c.add_argument("--init", help="calibration file with the initial extrinsic (default: calib_init.txt)")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("run", help="run odometry, loop closure and mapping on a dataset")
    r.add_argument("dataset")
    r.add_argument("-c", "--config", help="pipeline config file (key = value)")
    r.add_argument("-o", "--output", required=True, help="output directory")
    r.add_argument("--deterministic", action="store_true", help="run the mapping stage synchronously")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="render a synthetic dataset from a scene config or preset name")
    s.add_argument("scene", help="scene config file, or one of: corridor-loop, tunnel, calib-room")
    s.add_argument("-o", "--output", required=True, help="dataset directory to create")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scene config key")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="absolute trajectory error between two TUM files")
    e.add_argument("estimate")
    e.add_argument("groundtruth")
    e.add_argument("--align", action="store_true", help="rigid (SE(3)) alignment before scoring")
    e.add_argument("--scale", action="store_true", help="similarity alignment (implies --align)")
    e.add_argument("--use-mask", action="store_true", help="skip ground truth flagged invalid in a 9th column")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    from .calib import CalibrationError
    from .dataset import DataError

    args = build_parser().parse_args(argv)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CalibrationError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
