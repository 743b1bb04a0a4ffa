"""Keyframe pose graph with Gauss-Newton optimization on SE(3)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve

from . import geom
from .geom import Pose

log = logging.getLogger(__name__)


@dataclass
class Edge:
    i: int
    j: int
    Z: Pose  # measured pose of node j in node i's frame
    information: np.ndarray  # 6x6
    kind: str = "odometry"


@dataclass
class PoseGraph:
    nodes: list[Pose] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)

    def add_node(self, pose: Pose) -> int:
        self.nodes.append(pose)
        return len(self.nodes) - 1

    def add_edge(self, i: int, j: int, Z: Pose, information=None, kind: str = "odometry") -> None:
        if not (0 <= i < len(self.nodes) and 0 <= j < len(self.nodes)):
            raise IndexError(f"edge ({i}, {j}) references a missing node")
        if not np.all(np.isfinite(Z.matrix())):
            raise ValueError("edge measurement is not finite")
        info = np.eye(6) if information is None else np.asarray(information, dtype=float)
        if np.isscalar(information) or info.ndim == 0:
            info = float(information) * np.eye(6)
        self.edges.append(Edge(i, j, Z, info, kind))


def edge_error(Z: Pose, Ti: Pose, Tj: Pose) -> np.ndarray:
    return geom.log(Z.inverse() @ Ti.inverse() @ Tj)


def total_error(nodes: list[Pose], edges: list[Edge]) -> float:
    total = 0.0
    for e in edges:
        r = edge_error(e.Z, nodes[e.i], nodes[e.j])
        total += float(r @ e.information @ r)
    return total


def _edge_jacobians(e: Edge, Ti: Pose, Tj: Pose, h: float = 1e-6) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual and central-difference Jacobians w.r.t. left updates of both nodes."""
    r0 = edge_error(e.Z, Ti, Tj)
    Ji = np.empty((6, 6))
    Jj = np.empty((6, 6))
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        Ji[:, k] = (edge_error(e.Z, geom.exp(d) @ Ti, Tj) - edge_error(e.Z, geom.exp(-d) @ Ti, Tj)) / (2 * h)
        Jj[:, k] = (edge_error(e.Z, Ti, geom.exp(d) @ Tj) - edge_error(e.Z, Ti, geom.exp(-d) @ Tj)) / (2 * h)
    return r0, Ji, Jj


@dataclass
class OptimizeResult:
    poses: list[Pose]
    initial_error: float
    final_error: float
    iterations: int
    converged: bool


def optimize_pose_graph(
    graph: PoseGraph, max_iterations: int = 100, tol: float = 1e-10, anchor: int = 0
) -> OptimizeResult:
    """Levenberg-damped Gauss-Newton over all nodes except ``anchor``."""
    nodes = list(graph.nodes)
    n = len(nodes)
    err0 = total_error(nodes, graph.edges)
    if n < 2 or not graph.edges or err0 <= tol:
        return OptimizeResult(nodes, err0, err0, 0, True)
    var = {k: idx for idx, k in enumerate(i for i in range(n) if i != anchor)}
    dim = 6 * len(var)
    err, lam, converged, it = err0, 1e-6, False, 0
    for it in range(1, max_iterations + 1):
        rows, cols, vals = [], [], []
        g = np.zeros(dim)
        for e in graph.edges:
            r, Ji, Jj = _edge_jacobians(e, nodes[e.i], nodes[e.j])
            blocks = [(var.get(e.i), Ji), (var.get(e.j), Jj)]
            for a, Ja in blocks:
                if a is None:
                    continue
                g[6 * a : 6 * a + 6] += Ja.T @ e.information @ r
                for b, Jb in blocks:
                    if b is None:
                        continue
                    blk = Ja.T @ e.information @ Jb
                    ii, jj = np.meshgrid(np.arange(6 * a, 6 * a + 6), np.arange(6 * b, 6 * b + 6), indexing="ij")
                    rows.append(ii.ravel())
                    cols.append(jj.ravel())
                    vals.append(blk.ravel())
        H = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)).tocsc()
        diag = H.diagonal()
        improved = False
        for _ in range(10):
            A = H + coo_matrix((lam * (diag + 1e-9), (np.arange(dim), np.arange(dim))), shape=(dim, dim)).tocsc()
            delta = -spsolve(A, g)
            trial = list(nodes)
            for k, idx in var.items():
                trial[k] = geom.exp(delta[6 * idx : 6 * idx + 6]) @ nodes[k]
            err_new = total_error(trial, graph.edges)
            if err_new <= err:
                improved = True
                break
            lam *= 10.0
        if not improved:
            converged = True
            break
        gain = err - err_new
        nodes, err = trial, err_new
        lam = max(lam / 10.0, 1e-9)
        if gain <= tol * max(err0, 1.0) or np.linalg.norm(delta) < 1e-12:
            converged = True
            break
    else:
        log.warning("pose graph did not converge in %d iterations; returning best iterate", max_iterations)
    return OptimizeResult(nodes, err0, err, it, converged)
