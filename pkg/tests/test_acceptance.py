"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run alone with ``pytest -s tests/test_acceptance.py`` (the lines are printed
even without ``-s``).
"""

import filecmp
import time

import numpy as np
import pytest

from thermoslam import calib, cli, geom, loop, odom, synth
from thermoslam.config import PipelineConfig
from thermoslam.dataset import load_dataset
from thermoslam.evaluate import evaluate_ate
from thermoslam.geom import CameraIntrinsics, Pose
from thermoslam.imgproc import RawToCelsius, ThermalImage, build_pyramid, rescale_to_8bit
from thermoslam.pipeline import run_pipeline

from conftest import random_twist

DRIFT_DEG = 0.5  # injected yaw error per keyframe for the loop-closure check


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")

    return emit


def ate(result, gt_path):
    gt_t, gt_p, _ = geom.read_tum(gt_path)
    res = evaluate_ate(
        result.stamps, np.array([p.t for p in result.poses]), gt_t, np.array([p.t for p in gt_p]), align=True
    )
    return res.rmse


# -- 1 ------------------------------------------------------------------------


def test_c1_geometry(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_rt = 0.0
    for _ in range(1000):
        xi = random_twist(rng)
        worst_rt = max(worst_rt, np.max(np.abs(geom.log(geom.exp(xi)) - xi)))

    K = CameraIntrinsics(200.0, 190.0, 159.5, 119.5, 320, 240)
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    worst_j, h = 0.0, 1e-6
    for _ in range(100):
        # affine intensity: bilinear sampling is exact, so FD sees the true derivative
        ga, gb = rng.uniform(-20, 20, 2)
        img = ga * u + gb * v + rng.uniform(1000, 9000)
        X = geom.exp(random_twist(rng, 0.1, 0.1))
        uv = rng.uniform([20, 20], [K.width - 20, K.height - 20], (1, 2))
        p = X.inverse().apply(geom.unproject(uv, rng.uniform(1.0, 10.0), K))
        ref = np.zeros(1)
        _, valid, q, uvq = odom.residuals(p, X, img, K, ref)
        J = odom.residual_jacobian(q, uvq, img, K)[0]
        fd = np.zeros(6)
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            fd[k] = (
                odom.residuals(p, geom.exp(d) @ X, img, K, ref)[0][0]
                - odom.residuals(p, geom.exp(-d) @ X, img, K, ref)[0][0]
            ) / (2 * h)
        worst_j = max(worst_j, np.linalg.norm(J - fd) / np.linalg.norm(fd))
    dt = time.perf_counter() - t0
    ok = worst_rt < 1e-8 and worst_j < 1e-4 and dt < 5.0
    report("C1 geometry", ok, f"exp/log max err {worst_rt:.2e}, Jacobian rel err {worst_j:.2e}, {dt:.2f} s")
    assert worst_rt < 1e-8
    assert worst_j < 1e-4
    assert dt < 5.0


# -- 2 ------------------------------------------------------------------------


def test_c2_calibration(report):
    t0 = time.perf_counter()
    cfg = synth.SceneConfig(preset="calib-room", frames=30)
    pr = synth.make_preset(cfg)
    K, E = cfg.intrinsics(), pr.extrinsic
    obj = pr.board.object_points()
    clean, corners = [], []
    for i, (T, B) in enumerate(zip(pr.trajectory.poses, pr.board_poses)):
        clean.append(synth.render_lidar(pr.scene, T @ E.inverse(), frame=i))
        corners.append(geom.project_points(T.inverse().apply(B.apply(obj)), K)[0])

    def solve(noise, seed):
        rng = np.random.default_rng(seed)
        obs = []
        for i, c in enumerate(clean):
            cloud = c + rng.normal(0.0, noise, c.shape) if noise else c
            obs.append(calib.Observation(i, corners[i], cloud))
        init = synth.perturbed_extrinsic(E, 1.0, 0.02, rng)
        err = geom.relative(E, calib.calibrate(obs, pr.board, K, init, seed=seed).extrinsic)
        return np.degrees(err.rotation_angle()), np.linalg.norm(err.t)

    r0, t0_err = solve(0.0, 0)
    noisy = np.array([solve(0.005, s + 1) for s in range(50)])
    good = np.mean((noisy[:, 0] < 0.5) & (noisy[:, 1] < 0.01))
    dt = time.perf_counter() - t0
    ok = np.radians(r0) < 1e-6 and t0_err < 1e-6 and good >= 0.95 and dt < 60
    report(
        "C2 calibration",
        ok,
        f"noiseless {np.radians(r0):.1e} rad / {t0_err:.1e} m; 5 mm noise: {100 * good:.0f}% within 0.5 deg/1 cm "
        f"(worst {noisy[:, 0].max():.3f} deg, {100 * noisy[:, 1].max():.2f} cm); {dt:.1f} s",
    )
    assert np.radians(r0) < 1e-6 and t0_err < 1e-6
    assert good >= 0.95
    assert dt < 60


# -- 3 ------------------------------------------------------------------------


def test_c3_tracking(report):
    t0 = time.perf_counter()
    cfg = synth.SceneConfig(preset="tunnel", frames=100, step=0.1)
    pr = synth.make_preset(cfg)
    K, E = cfg.intrinsics(), pr.extrinsic
    gt = pr.trajectory.poses
    prev, est, terr, rerr = None, gt[0], [], []
    for i, T in enumerate(gt):
        img = synth.render_thermal(pr.scene, T, K, timestamp=i)
        f = odom.Frame.build(img, E.inverse().apply(synth.render_lidar(pr.scene, T @ E.inverse())), K, pose=T)
        if prev is not None:
            X, _ = odom.track(prev, f.pyramid, Pose())
            e = geom.relative(geom.relative(T, prev.pose), X)
            terr.append(np.linalg.norm(e.t))
            rerr.append(np.degrees(e.rotation_angle()))
            est = est @ X.inverse()
        prev = f
    path = sum(np.linalg.norm(b.t - a.t) for a, b in zip(gt, gt[1:]))
    drift = np.linalg.norm(est.t - gt[-1].t) / path
    dt = time.perf_counter() - t0
    ok = max(terr) < 5e-3 and max(rerr) < 0.1 and drift < 0.01 and dt < 120
    report(
        "C3 tracking",
        ok,
        f"max {1000 * max(terr):.2f} mm / {max(rerr):.3f} deg per frame, drift {100 * drift:.2f}% of {path:.1f} m, {dt:.1f} s",
    )
    assert max(terr) < 5e-3 and max(rerr) < 0.1
    assert drift < 0.01
    assert dt < 120


# -- 4 ------------------------------------------------------------------------


def test_c4_bias(report):
    cfg = synth.SceneConfig(preset="corridor-loop")
    pr = synth.make_preset(cfg)
    K, E = cfg.intrinsics(), pr.extrinsic
    gain, bias = 1.1, -200.0
    permissive = loop.LoopParams(min_inlier_ratio=0.0, gain_range=(0.0, np.inf))
    rows = []
    for fi in (10, 60, 120, 200):
        T = pr.trajectory.poses[fi]
        img = synth.render_thermal(pr.scene, T, K)
        kf = odom.make_keyframe(
            odom.Frame.build(img, E.inverse().apply(synth.render_lidar(pr.scene, T @ E.inverse())), K, pose=T), 0
        )
        T2 = T @ geom.exp([0.0, np.radians(1.0), 0.0, 0.1, 0.05, 0.05])
        raw = synth.render_thermal(pr.scene, T2, K).data.astype(float)
        # a * I_target + b = I_ref  with  a = gain, b = bias
        pyr = build_pyramid(ThermalImage(np.clip((raw - bias) / gain, 0, 16383)), 4)
        truth = geom.relative(T2, T)
        aff = loop.align_affine(kf, pyr, Pose())
        plain = loop.align_affine(kf, pyr, Pose(), permissive, estimate_affine=False)
        ea, ep = geom.relative(truth, aff.pose), geom.relative(truth, plain.pose)
        rows.append((aff.a, aff.b, np.linalg.norm(ea.t), np.degrees(ea.rotation_angle()), np.linalg.norm(ep.t), np.degrees(ep.rotation_angle())))
    rows = np.array(rows)
    ok_ab = np.all(np.abs(rows[:, 0] - gain) < 0.02) and np.all(np.abs(rows[:, 1] - bias) < 10)
    ok_pose = np.all(rows[:, 2] < 0.01) and np.all(rows[:, 3] < 0.2)
    ratio = np.min(rows[:, 4] / np.maximum(rows[:, 2], 1e-12))
    ok = ok_ab and ok_pose and ratio >= 5
    report(
        "C4 bias robustness",
        ok,
        f"a in [{rows[:, 0].min():.3f}, {rows[:, 0].max():.3f}], b in [{rows[:, 1].min():.1f}, {rows[:, 1].max():.1f}], "
        f"pose <= {1000 * rows[:, 2].max():.2f} mm / {rows[:, 3].max():.3f} deg; plain residual >= {ratio:.0f}x worse",
    )
    assert ok_ab and ok_pose
    assert ratio >= 5


# -- 6, 7 ---------------------------------------------------------------------


def test_c6_weight(report):
    w = odom.RobustWeight(5.0, 2.5)
    r = np.linspace(0.0, 50.0, 10_000)
    vals = w(r)
    ok = abs(w(0.0) - 1.2) < 1e-12 and abs(w(2.5) - 1.0) < 1e-12 and np.all(np.diff(vals) < 0)
    report("C6 weight function", ok, f"w(0) = {w(0.0):.12g}, w(sigma) = {w(2.5):.12g}, strictly decreasing on 1e4 points")
    assert ok


def test_c7_rescale(report):
    conv = RawToCelsius()
    counts = np.arange(16384)
    out = rescale_to_8bit(counts, 0.0, 30.0, conv).astype(int)
    lo = rescale_to_8bit(np.array([(0.0 - conv.offset) / conv.scale]), 0.0, 30.0, conv)[0]
    hi = rescale_to_8bit(np.array([(30.0 - conv.offset) / conv.scale]), 0.0, 30.0, conv)[0]
    ok = np.all(np.diff(out) >= 0) and lo == 0 and hi == 255 and out[0] == 0 and out[-1] == 255
    report("C7 rescale", ok, f"monotone over all 16384 counts; 0 C -> {lo}, 30 C -> {hi}")
    assert ok


# -- 5, 8, 9 ------------------------------------------------------------------


@pytest.fixture(scope="session")
def corridor(tmp_path_factory):
    root = tmp_path_factory.mktemp("corridor")
    assert cli.main(["synth", "corridor-loop", "-o", str(root / "ds")]) == 0
    return root


@pytest.fixture(scope="session")
def closed_run(corridor):
    cfg = PipelineConfig(deterministic=True, drift_yaw_per_keyframe_deg=DRIFT_DEG)
    t0 = time.perf_counter()
    res = run_pipeline(load_dataset(corridor / "ds"), cfg, corridor / "closed")
    return res, time.perf_counter() - t0


def test_c5_loop_closure(report, corridor, closed_run):
    res, dt = closed_run
    open_res = run_pipeline(
        load_dataset(corridor / "ds"),
        PipelineConfig(deterministic=True, drift_yaw_per_keyframe_deg=DRIFT_DEG, loop_closure=False),
    )
    gt_path = corridor / "ds" / "groundtruth.txt"
    gt_t, gt_p, _ = geom.read_tum(gt_path)
    gt_pos = dict(zip(gt_t.tolist(), [p.t for p in gt_p]))
    kf_ts = list(res.keyframe_stamps)

    accepted = [e for e in res.events if e.accepted]
    # revisit: the trajectory returns to its start after one perimeter
    _, perimeter = synth.corridor_loop_path(6.0, 1.0)
    revisit_ts = gt_t[int(round(perimeter / 0.1))]
    revisit_kf = int(np.argmin([abs(t - revisit_ts) for t in kf_ts]))
    detected = False
    if accepted:
        first = accepted[0]
        qi, ci = kf_ts.index(first.query_ts), kf_ts.index(first.candidate_ts)
        old = [k for k, t in enumerate(kf_ts) if first.query_ts - t > PipelineConfig().t_recent * 1e9]
        nearest = old[int(np.argmin([np.linalg.norm(gt_pos[kf_ts[k]] - gt_pos[first.query_ts]) for k in old]))]
        detected = abs(qi - revisit_kf) <= 2 and abs(ci - nearest) <= 2

    # acceptance gate: consistent pair passes, a corrupted reverse estimate fails
    gate = False
    if accepted:
        e = accepted[0]
        corrupt = geom.exp([0.0, 0.0, 0.0, 0.08, 0.0, 0.0]) @ e.reverse
        gate = loop.cross_validate(e.relative, e.reverse) and not loop.cross_validate(e.relative, corrupt)

    ate_closed, ate_open = ate(res, gt_path), ate(open_res, gt_path)
    gain = 1.0 - ate_closed / ate_open
    ok = detected and gate and gain >= 0.7 and dt < 180
    report(
        "C5 loop closure",
        ok,
        f"{len(accepted)} accepted loops, first at keyframe {kf_ts.index(accepted[0].query_ts) if accepted else '-'} "
        f"(revisit {revisit_kf}); gate ok={gate}; ATE {ate_open:.3f} -> {ate_closed:.4f} m "
        f"({100 * gain:.1f}% better); {dt:.0f} s",
    )
    assert detected
    assert gate
    assert gain >= 0.7
    assert dt < 180


def test_c8_determinism(report, corridor, closed_run):
    out = corridor / "closed_again"
    code = cli.main(
        ["run", str(corridor / "ds"), "-o", str(out), "--deterministic", "--set", f"drift_yaw_per_keyframe_deg={DRIFT_DEG}"]
    )
    same = {
        name: filecmp.cmp(corridor / "closed" / name, out / name, shallow=False)
        for name in ("trajectory.txt", "map.ply", "map_colored.ply", "keyframes.txt", "loops.csv")
    }
    ok = code == 0 and all(same.values())
    report("C8 determinism", ok, ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert code == 0
    assert same["trajectory.txt"] and same["map.ply"]
    assert all(same.values())


@pytest.mark.parametrize("preset", ["corridor-loop", "tunnel", "calib-room"])
def test_c9_end_to_end(report, tmp_path, corridor, preset, capsys):
    t0 = time.perf_counter()
    ds = corridor / "ds" if preset == "corridor-loop" else tmp_path / "ds"
    codes = []
    if preset != "corridor-loop":
        codes.append(cli.main(["synth", preset, "-o", str(ds)]))
    codes.append(cli.main(["run", str(ds), "-o", str(tmp_path / "out")]))
    codes.append(cli.main(["eval", str(tmp_path / "out" / "trajectory.txt"), str(ds / "groundtruth.txt"), "--align"]))
    summary = capsys.readouterr().out.strip().splitlines()[-1]
    ok = all(c == 0 for c in codes)
    report(f"C9 synth/run/eval [{preset}]", ok, f"exit codes {codes}; {summary}; {time.perf_counter() - t0:.0f} s")
    assert ok
