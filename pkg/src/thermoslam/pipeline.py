"""Tracking thread + mapping thread driver over a dataset.

Tracking chains frame-to-frame estimates and window refinement in its own
odometry frame. The mapper owns the keyframe pose graph: it turns keyframe
odometry into graph edges, runs place recognition and loop correction, and
anchors the thermographic map to the (corrected) keyframe poses. Tracking
never reads corrected poses, so running the mapper synchronously or on a
background thread yields identical outputs.
"""

from __future__ import annotations

import csv
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features, geom, loop, odom
from .config import PipelineConfig
from .dataset import Calibration, DatasetManifest, read_calibration, read_points_csv
from .geom import Pose
from .imgproc import RawToCelsius, read_pgm, rescale_to_8bit
from .mapping import ThermoMap, export_map
from .posegraph import PoseGraph, optimize_pose_graph

log = logging.getLogger(__name__)


@dataclass
class FrameRecord:
    timestamp: int
    anchor: int  # keyframe id
    rel: Pose  # pose in the anchor keyframe's frame
    keyframe: bool
    cost: float = 0.0
    iterations: tuple[int, ...] = ()
    inlier_ratio: float = 1.0
    valid_ratio: float = 1.0


# -- mapping ------------------------------------------------------------------


class Mapper:
    """Keyframe pose graph, loop closure and map, fed in keyframe order."""

    def __init__(self, cfg: PipelineConfig, conv: RawToCelsius, vocabulary: features.Vocabulary | None):
        self.cfg = cfg
        self.conv = conv
        self.vocabulary = vocabulary
        self.graph = PoseGraph()
        self.keyframes: list[odom.Keyframe] = []
        self.map = ThermoMap(conv)
        self.events: list[loop.LoopEvent] = []
        self.loop_params = loop.LoopParams(
            t_recent=cfg.t_recent,
            eta_min=cfg.eta_min,
            rho_min=cfg.rho_min,
            eps=cfg.eps,
            max_rounds=cfg.loop_max_rounds,
            far_init_distance=cfg.far_init_distance,
            seed=cfg.seed,
        )
        self.lock = threading.Lock()
        self.corrections = 0

    def add_keyframe(self, kf: odom.Keyframe) -> None:
        cfg = self.cfg
        if self.keyframes:
            prev = self.keyframes[-1]
            Z = geom.relative(prev.pose, kf.pose)
            if cfg.drift_yaw_per_keyframe_deg:
                # Camera y points down, so this is a yaw error about the vertical.
                Z = Z @ geom.exp([0.0, np.radians(cfg.drift_yaw_per_keyframe_deg), 0.0, 0.0, 0.0, 0.0])
            with self.lock:
                node = self.graph.add_node(self.graph.nodes[-1] @ Z)
                self.graph.add_edge(node - 1, node, Z, cfg.odom_information)
        else:
            with self.lock:
                self.graph.add_node(kf.pose)
        self.keyframes.append(kf)
        self.map.accumulate(kf.id, self.graph.nodes[kf.id], kf.cloud, kf.pyramid[0], kf.K)
        if cfg.loop_closure and self.vocabulary is not None:
            img8 = rescale_to_8bit(kf.image, cfg.rescale_low, cfg.rescale_high, self.conv)
            kf.bag = features.extract_features(img8, self.vocabulary)
            self._close_loop(kf)

    def add_frame(self, anchor: int, rel: Pose, cloud: np.ndarray, image: np.ndarray, K) -> None:
        self.map.accumulate(anchor, self.graph.nodes[anchor], cloud, image, K, in_keyframe=rel)

    def _close_loop(self, kf: odom.Keyframe) -> None:
        cand = loop.detect_loop(kf, self.keyframes, self.loop_params)
        if cand is None:
            return
        dist, _ = geom.pose_distance(self.graph.nodes[cand.keyframe.id], self.graph.nodes[kf.id])
        event = loop.verify_loop(kf, cand, self.loop_params, distance=dist)
        self.events.append(event)
        log.info(
            "loop %d -> %d: eta %.2f ratio %.2f a %.3f b %.1f consistency %.4f %s",
            kf.id, cand.keyframe.id, event.eta, event.common_ratio, event.a, event.b, event.consistency,
            "accepted" if event.accepted else "rejected",
        )
        if not event.accepted:
            return
        graph = PoseGraph(list(self.graph.nodes), list(self.graph.edges))
        graph.add_edge(cand.keyframe.id, kf.id, event.relative.inverse(), max(event.inliers, 1), kind="loop")
        result = optimize_pose_graph(graph)
        with self.lock:
            graph.nodes = result.poses
            self.graph = graph
            self.map.reanchor(dict(enumerate(result.poses)))
        self.corrections += 1

    def keyframe_poses(self) -> list[Pose]:
        with self.lock:
            return list(self.graph.nodes)


class _MapperThread:
    """Runs a :class:`Mapper` on a background thread fed by an ordered queue."""

    def __init__(self, mapper: Mapper):
        self.mapper = mapper
        self.q: queue.Queue = queue.Queue()
        self.error: BaseException | None = None
        self.thread = threading.Thread(target=self._run, name="mapping", daemon=True)
        self.thread.start()

    def _run(self):
        while True:
            item = self.q.get()
            if item is None:
                return
            if self.error is not None:
                continue
            try:
                kind, args = item
                getattr(self.mapper, kind)(*args)
            except BaseException as exc:  # surfaced on join
                self.error = exc

    def submit(self, kind: str, *args) -> None:
        self.q.put((kind, args))

    def join(self) -> None:
        self.q.put(None)
        self.thread.join()
        if self.error is not None:
            raise self.error


class _Inline:
    def __init__(self, mapper: Mapper):
        self.mapper = mapper

    def submit(self, kind: str, *args) -> None:
        getattr(self.mapper, kind)(*args)

    def join(self) -> None:
        pass


# -- tracking -----------------------------------------------------------------


class Tracker:
    def __init__(self, calib: Calibration, cfg: PipelineConfig, sink):
        self.calib = calib
        self.cfg = cfg
        self.sink = sink
        self.params = odom.TrackParams(nu=cfg.nu, max_iterations=cfg.max_iterations, min_valid_ratio=cfg.min_valid_ratio)
        self.records: list[FrameRecord] = []
        self.keyframes: list[odom.Keyframe] = []
        self.prev: odom.Frame | None = None
        self.motion = Pose()  # last frame-to-frame X

    def process(self, timestamp: int, image, cloud_lidar: np.ndarray) -> FrameRecord:
        cfg, calib = self.cfg, self.calib
        cloud_cam = calib.extrinsic.inverse().apply(cloud_lidar) if len(cloud_lidar) else np.zeros((0, 3))
        frame = odom.Frame.build(image, cloud_cam, calib.K, levels=cfg.levels, max_points=cfg.max_points)
        frame.timestamp = timestamp
        if self.prev is None:
            frame.pose = Pose()
            return self._keyframe(frame, odom.TrackDiagnostics())
        try:
            X, diag = odom.track(self.prev, frame.pyramid, self.motion, self.params)
        except odom.TrackingLost:
            log.debug("%d: constant-motion start failed, retrying from identity", timestamp)
            X, diag = odom.track(self.prev, frame.pyramid, Pose(), self.params)
        pose = self.prev.pose @ X.inverse()
        if cfg.refine and self.keyframes:
            window = self.keyframes[-cfg.window_size :]
            pose, _ = odom.refine_local(frame.pyramid, pose, window, self.params)
        self.motion = geom.relative(pose, self.prev.pose)
        frame.pose = pose
        last = self.keyframes[-1]
        if odom.should_create_keyframe(
            pose, last, None, cfg.kf_translation, cfg.kf_rotation_deg, cfg.kf_min_visible
        ):
            return self._keyframe(frame, diag)
        rel = geom.relative(last.pose, pose)
        if cfg.map_all_frames:
            self.sink.submit("add_frame", last.id, rel, frame.cloud, frame.pyramid[0], frame.K)
        self.prev = frame
        rec = FrameRecord(timestamp, last.id, rel, False, diag.cost, tuple(diag.iterations), diag.inlier_ratio, diag.valid_ratio)
        self.records.append(rec)
        return rec

    def _keyframe(self, frame: odom.Frame, diag: odom.TrackDiagnostics) -> FrameRecord:
        kf = odom.make_keyframe(frame, len(self.keyframes))
        self.keyframes.append(kf)
        self.sink.submit("add_keyframe", kf)
        self.prev = kf
        rec = FrameRecord(
            frame.timestamp, kf.id, Pose(), True, diag.cost, tuple(diag.iterations), diag.inlier_ratio, diag.valid_ratio
        )
        self.records.append(rec)
        return rec


# -- driver -------------------------------------------------------------------


@dataclass
class PipelineResult:
    stamps: list[int]
    poses: list[Pose]
    keyframe_stamps: list[int]
    keyframe_poses: list[Pose]
    records: list[FrameRecord]
    events: list[loop.LoopEvent]
    tracking_lost: str | None = None
    map_points: int = 0
    outputs: dict = field(default_factory=dict)


def train_vocabulary(manifest: DatasetManifest, cfg: PipelineConfig, conv: RawToCelsius) -> features.Vocabulary:
    n = len(manifest.frames)
    step = max(1, n // max(cfg.vocabulary_images, 1))
    sets = []
    for entry in manifest.frames[::step][: cfg.vocabulary_images]:
        img8 = rescale_to_8bit(read_pgm(entry.image, entry.timestamp), cfg.rescale_low, cfg.rescale_high, conv)
        sets.append(features.extract_orb(img8)[1])
    return features.Vocabulary.train(sets, seed=cfg.seed)


def run_pipeline(manifest: DatasetManifest, cfg: PipelineConfig, out_dir: str | Path | None = None) -> PipelineResult:
    """Process every frame of ``manifest``; write outputs to ``out_dir`` if given."""
    calib = read_calibration(manifest.calibration)
    if cfg.raw_scale is not None or cfg.raw_offset is not None:
        calib.conv = RawToCelsius(
            calib.conv.scale if cfg.raw_scale is None else cfg.raw_scale,
            calib.conv.offset if cfg.raw_offset is None else cfg.raw_offset,
        )
    vocabulary = None
    if cfg.loop_closure:
        if manifest.vocabulary is not None:
            vocabulary = features.Vocabulary.load(manifest.vocabulary)
        else:
            log.info("no vocabulary.bin; training one from the dataset images")
            vocabulary = train_vocabulary(manifest, cfg, calib.conv)
    mapper = Mapper(cfg, calib.conv, vocabulary)
    sink = _Inline(mapper) if cfg.deterministic else _MapperThread(mapper)
    tracker = Tracker(calib, cfg, sink)
    lost = None
    try:
        for entry in manifest.frames:
            image = read_pgm(entry.image, entry.timestamp)
            cloud = read_points_csv(entry.cloud)
            try:
                tracker.process(entry.timestamp, image, cloud)
            except odom.TrackingLost as exc:
                lost = f"{entry.timestamp}: {exc}"
                log.error("tracking lost at %s", lost)
                break
    finally:
        sink.join()
    kf_poses = mapper.keyframe_poses()
    stamps = [r.timestamp for r in tracker.records]
    poses = [kf_poses[r.anchor] @ r.rel for r in tracker.records]
    kf_stamps = [kf.timestamp for kf in tracker.keyframes]
    result = PipelineResult(stamps, poses, kf_stamps, kf_poses, tracker.records, mapper.events, lost, len(mapper.map))
    if out_dir is not None:
        write_outputs(result, mapper, cfg, Path(out_dir))
    return result


DIAG_FIELDS = ["timestamp", "cost", "iterations", "inlier_ratio", "valid_ratio", "keyframe"]


def write_outputs(result: PipelineResult, mapper: Mapper, cfg: PipelineConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    geom.write_tum(out / "trajectory.txt", result.stamps, result.poses)
    geom.write_tum(out / "keyframes.txt", result.keyframe_stamps, result.keyframe_poses)
    n = export_map(
        mapper.map,
        out / "map.ply",
        voxel=cfg.map_voxel,
        binary=cfg.map_binary,
        colored_path=out / "map_colored.ply",
        t_low=cfg.map_t_low,
        t_high=cfg.map_t_high,
    )
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DIAG_FIELDS)
        for r in result.records:
            w.writerow(
                [r.timestamp, f"{r.cost:.6g}", ";".join(map(str, r.iterations)), f"{r.inlier_ratio:.4f}",
                 f"{r.valid_ratio:.4f}", int(r.keyframe)]
            )
    loop.write_loop_events(out / "loops.csv", result.events)
    (out / "config.txt").write_text(cfg.dump())
    result.outputs = {"trajectory": out / "trajectory.txt", "map": out / "map.ply", "map_vertices": n}
