"""Evaluation metrics and cloud alignment.

Normal-map evaluation works below a leg-cutoff height so shank pixels
do not pollute foot metrics.  3D evaluation samples both meshes and
reports bidirectional chamfer statistics.  Alignment first levels both
geometries with a RANSAC floor fit, then optimizes in-plane rotation,
in-plane translation and isotropic scale against the chamfer objective
with periodic nearest-neighbor re-association and one outlier-rejection
round.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import fitting
from .geometry import (Mesh, chamfer_stats, lower_median, nearest_neighbors,
                       sample_surface)

__all__ = [
    "NormalEvalReport", "FloorFit", "AlignParams", "AlignResult",
    "pixel_heights", "eval_normals", "fit_floor", "level_to_floor",
    "align_4param", "eval_3d", "report_json", "report_table", "report_csv",
]

LEG_CUTOFF = 0.20
THRESHOLDS_DEG = (11.25, 22.5, 30.0)


@dataclass
class NormalEvalReport:
    mean_deg: float
    median_deg: float
    rmse_deg: float
    pct_lt_11_25: float
    pct_lt_22_5: float
    pct_lt_30: float
    pixels: int

    def as_dict(self):
        return {
            "mean_deg": self.mean_deg,
            "median_deg": self.median_deg,
            "rmse_deg": self.rmse_deg,
            "pct_lt_11_25": self.pct_lt_11_25,
            "pct_lt_22_5": self.pct_lt_22_5,
            "pct_lt_30": self.pct_lt_30,
            "pixels": self.pixels,
        }


def pixel_heights(mesh: Mesh, frag):
    """World z of the surface point under each covered pixel, NaN off
    coverage."""
    H, W = frag.face.shape
    z = np.full((H, W), np.nan)
    sel = frag.face >= 0
    f = frag.face[sel]
    bary = frag.bary[sel]
    z[sel] = np.sum(bary * mesh.vertices[mesh.faces[f], 2], axis=1)
    return z


def eval_normals(pred_mu, gt_normals, mask, heights=None,
                 leg_cutoff=LEG_CUTOFF) -> NormalEvalReport:
    """Angular-error statistics over masked pixels, optionally dropping
    pixels at or above the cutoff height."""
    sel = np.asarray(mask, dtype=bool).copy()
    if heights is not None:
        with np.errstate(invalid="ignore"):
            sel &= np.nan_to_num(heights, nan=np.inf) < leg_cutoff
    if not sel.any():
        raise ValueError("empty evaluation set")
    dots = np.clip(np.sum(pred_mu[sel] * gt_normals[sel], axis=1), -1.0, 1.0)
    err = np.degrees(np.arccos(dots))
    pcts = [float((err < t).mean() * 100.0) for t in THRESHOLDS_DEG]
    return NormalEvalReport(float(err.mean()), lower_median(err),
                            float(np.sqrt(np.mean(err ** 2))),
                            pcts[0], pcts[1], pcts[2], int(sel.sum()))


# ---------------------------------------------------------------------------
# Floor handling.

@dataclass
class FloorFit:
    normal: np.ndarray     # unit plane normal
    d: float               # plane is normal . x + d = 0
    inliers: np.ndarray    # (N,) bool against the fitted points

    def distances(self, points):
        return points @ self.normal + self.d


def fit_floor(points, iters=1000, threshold=0.003, min_inlier_frac=0.20,
              seed=0) -> FloorFit:
    """Seeded RANSAC plane with a least-squares refinement on inliers.

    Winner is (inlier count, lowest iteration index); substreams are
    spawned per iteration so a parallel schedule cannot change the
    result.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise ValueError("need at least 3 points")
    streams = np.random.SeedSequence(seed).spawn(iters)
    best_count, best_plane = 0, None
    for i in range(iters):
        rng = np.random.default_rng(streams[i])
        a, b, c = pts[rng.choice(len(pts), size=3, replace=False)]
        n = np.cross(b - a, c - a)
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            continue
        n = n / nn
        d = -float(n @ a)
        count = int((np.abs(pts @ n + d) <= threshold).sum())
        if count > best_count:
            best_count, best_plane = count, (n, d)
    if best_count < min_inlier_frac * len(pts):
        raise ValueError(
            f"no dominant plane: best inlier fraction "
            f"{best_count / len(pts):.3f} < {min_inlier_frac}")
    n, d = best_plane
    inl = np.abs(pts @ n + d) <= threshold
    centroid = pts[inl].mean(axis=0)
    _, _, vt = np.linalg.svd(pts[inl] - centroid, full_matrices=False)
    refined = vt[-1]
    if refined @ n < 0:
        refined = -refined
    n, d = refined, -float(refined @ centroid)
    return FloorFit(n, d, np.abs(pts @ n + d) <= threshold)


def _rotation_to_z(n):
    axis = np.cross(n, [0.0, 0.0, 1.0])
    s = np.linalg.norm(axis)
    c = float(n[2])
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])   # upside down: half turn about x
    axis = axis / s
    K = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    theta = np.arctan2(s, c)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def level_to_floor(geometry, floor: FloorFit):
    """Rigid transform putting the floor at z=0 with normal +z.

    The plane normal is oriented so the majority of the off-floor
    points (the subject) ends up above the floor.  Accepts a Mesh or an
    (N,3) cloud; returns (transformed geometry, R, t) with x' = Rx + t.
    """
    mesh = geometry if isinstance(geometry, Mesh) else None
    pts = mesh.vertices if mesh is not None else np.asarray(
        geometry, dtype=np.float64)
    n = floor.normal / np.linalg.norm(floor.normal)
    d = float(floor.d)
    outliers = pts[~floor.inliers] if len(floor.inliers) == len(pts) else pts
    if len(outliers):
        if np.mean(outliers @ n + d) < 0:
            n, d = -n, -d
    elif n[2] < 0:
        n, d = -n, -d
    R = _rotation_to_z(n)
    t = np.array([0.0, 0.0, d])
    moved = pts @ R.T + t
    if mesh is not None:
        return mesh.copy_with(moved), R, t
    return moved, R, t


# ---------------------------------------------------------------------------
# 4-parameter chamfer alignment.

@dataclass
class AlignParams:
    theta_z: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    s: float = 1.0

    def validate(self):
        if not self.s > 0:
            raise ValueError("scale must be positive")
        return self

    def apply(self, points, pivot):
        c, sn = np.cos(self.theta_z), np.sin(self.theta_z)
        R = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
        local = (np.asarray(points, dtype=np.float64) - pivot) @ R.T
        return self.s * local + pivot + np.array([self.tx, self.ty, 0.0])


@dataclass
class AlignResult:
    params: AlignParams
    trace: np.ndarray        # best-so-far objective of the final pass
    pivot: np.ndarray        # scale/rotation pivot (source centroid)
    objective: float
    kept_source: int
    kept_target: int


def _pooled_objective_and_grad(src, tgt, a_idx, b_idx, vec, pivot):
    """Mean pooled NN distance under fixed associations and its
    gradient in (theta, tx, ty, s)."""
    theta, tx, ty, s = vec
    c, sn = np.cos(theta), np.sin(theta)
    R = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
    dR = np.array([[-sn, -c, 0.0], [c, -sn, 0.0], [0.0, 0.0, 0.0]])
    # source points contributing: every source point once for the a
    # side, plus the ones targets picked on the b side
    p = np.concatenate([src, src[b_idx]])
    q = np.concatenate([tgt[a_idx], tgt])
    local = (p - pivot) @ R.T
    moved = s * local + pivot + np.array([tx, ty, 0.0])
    v = moved - q
    dist = np.linalg.norm(v, axis=1)
    m = len(v)
    obj = float(dist.mean())
    u = v / np.maximum(dist, 1e-300)[:, None]
    g_theta = float(np.sum(u * (s * ((p - pivot) @ dR.T))) / m)
    g_s = float(np.sum(u * local) / m)
    g_tx = float(u[:, 0].sum() / m)
    g_ty = float(u[:, 1].sum() / m)
    return obj, np.array([g_theta, g_tx, g_ty, g_s])


def _optimize(src, tgt, init_vec, pivot, lr, steps, reassoc_every):
    vec = init_vec.copy()
    state = fitting.AdamState.for_params({"p": vec})
    best_obj, best_vec = np.inf, vec.copy()
    trace = []
    a_idx = b_idx = None
    for step in range(steps):
        if step % reassoc_every == 0:
            moved = AlignParams(*vec).apply(src, pivot)
            a_idx, _ = nearest_neighbors(moved, tgt)
            b_idx, _ = nearest_neighbors(tgt, moved)
        obj, grad = _pooled_objective_and_grad(src, tgt, a_idx, b_idx, vec,
                                               pivot)
        if obj < best_obj:
            best_obj, best_vec = obj, vec.copy()
        trace.append(best_obj)
        vec = fitting.adam_step(state, {"p": vec}, {"p": grad}, lr)["p"]
    moved = AlignParams(*vec).apply(src, pivot)
    a_idx, da = nearest_neighbors(moved, tgt)
    b_idx, db = nearest_neighbors(tgt, moved)
    obj = float(np.concatenate([da, db]).mean())
    if obj < best_obj:
        best_obj, best_vec = obj, vec.copy()
    trace.append(best_obj)
    return best_vec, best_obj, np.array(trace)


def align_4param(source, target, init: AlignParams | None = None, lr=0.01,
                 steps=500, reassoc_every=25, outlier_factor=3.0) -> AlignResult:
    """Chamfer alignment of source onto target over (theta_z, tx, ty, s).

    Adam with periodic re-association, then one outlier-rejection round:
    points whose nearest neighbor sits beyond ``outlier_factor`` times
    the median distance are dropped on both sides and the optimization
    repeats from the first-round answer.  The reported trace (best
    objective so far, hence non-increasing) covers the final round.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    for name, cloud in (("source", src), ("target", tgt)):
        if cloud.ndim != 2 or cloud.shape[1] != 3 or len(cloud) < 10:
            raise ValueError(f"degenerate {name} cloud: need at least 10 points")
    init = (init or AlignParams()).validate()
    pivot = src.mean(axis=0)
    vec0 = np.array([init.theta_z, init.tx, init.ty, init.s])

    vec1, _, trace = _optimize(src, tgt, vec0, pivot, lr, steps, reassoc_every)

    moved = AlignParams(*vec1).apply(src, pivot)
    _, da = nearest_neighbors(moved, tgt)
    _, db = nearest_neighbors(tgt, moved)
    keep_s = da <= outlier_factor * np.median(da)
    keep_t = db <= outlier_factor * np.median(db)
    if (~keep_s).any() or (~keep_t).any():
        if keep_s.sum() >= 10 and keep_t.sum() >= 10:
            vec1, _, trace = _optimize(src[keep_s], tgt[keep_t], vec1, pivot,
                                       lr, steps, reassoc_every)

    params = AlignParams(*[float(x) for x in vec1]).validate()
    moved = params.apply(src[keep_s], pivot)
    _, da = nearest_neighbors(moved, tgt[keep_t])
    _, db = nearest_neighbors(tgt[keep_t], moved)
    objective = float(np.concatenate([da, db]).mean())
    return AlignResult(params, trace, pivot, objective,
                       int(keep_s.sum()), int(keep_t.sum()))


# ---------------------------------------------------------------------------
# 3D evaluation and report output.

def eval_3d(fitted: Mesh, gt: Mesh, n=10000, seed=0, gt_seed=None):
    """Bidirectional chamfer report over n surface samples per mesh."""
    a = sample_surface(fitted, n, seed)
    b = sample_surface(gt, n, seed if gt_seed is None else gt_seed)
    report = chamfer_stats(a, b)
    report["n_points"] = n
    return report


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{value:.6g}"
    return str(value)


def report_json(report):
    clean = {k: (float(v) if isinstance(v, np.floating) else
                 int(v) if isinstance(v, np.integer) else v)
             for k, v in report.items()}
    return json.dumps(clean, indent=1, sort_keys=True) + "\n"


def report_table(report, title=None):
    width = max(len(k) for k in report)
    lines = []
    if title:
        lines += [title, "-" * max(len(title), width)]
    for k, v in report.items():
        lines.append(f"{k:<{width}}  {_fmt(v)}")
    return "\n".join(lines) + "\n"


def report_csv(report):
    keys = list(report)
    row = ",".join(f"{report[k]:.10g}" if isinstance(report[k], (float, np.floating))
                   else str(report[k]) for k in keys)
    return ",".join(keys) + "\n" + row + "\n"
