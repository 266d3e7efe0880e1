"""Differentiable rasterization: normal maps, soft silhouettes, keypoints.

The rasterizer produces a hard pixel→face assignment with
perspective-correct barycentric weights.  That assignment is treated as
a constant during backward (straight-through visibility): gradients
reach the mesh vertices only through interpolated normal values,
projected keypoints, and the soft silhouette's edge distances.

Pixel centers sit at (column + 0.5, row + 0.5).  Coverage is the
inclusive half-plane edge-function test.  Back-face culling is on:
with the y-down camera frame of :mod:`footfit.camera`, front-facing
triangles have negative signed area in pixel coordinates.  Faces with
any vertex closer than ``Z_NEAR`` are dropped entirely (no near-plane
clipping); synthetic desk scenes keep the mesh far in front of it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .geometry import Mesh

__all__ = [
    "FragmentBuffer", "rasterize", "render_normals", "render_normals_var",
    "render_silhouette_soft", "render_silhouette_soft_var",
    "project_keypoints", "project_keypoints_var", "project_vertices_var",
    "vertex_normals_var", "cutoff_fraction", "ContourTopology",
]

Z_NEAR = 1e-6


@dataclass
class FragmentBuffer:
    face: np.ndarray      # (H,W) int64, -1 where empty
    bary: np.ndarray      # (H,W,3) perspective-correct weights
    depth: np.ndarray     # (H,W) meters, 0 where empty
    front_faces: np.ndarray   # bool per face: z-valid and camera-facing

    @property
    def mask(self):
        return self.face >= 0


def _project_np(vertices, camera):
    cam = vertices @ camera.R.T + camera.t
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * cam[:, 0] / z + camera.cx
        py = camera.fy * cam[:, 1] / z + camera.cy
    return np.stack([px, py], axis=1), z


def rasterize(mesh: Mesh, camera) -> FragmentBuffer:
    H, W = camera.height, camera.width
    face_buf = np.full((H, W), -1, dtype=np.int64)
    bary_buf = np.zeros((H, W, 3))
    depth_buf = np.zeros((H, W))
    pix, z = _project_np(mesh.vertices, camera)
    tri = mesh.faces
    front = np.all(z[tri] > Z_NEAR, axis=1)

    p0, p1, p2 = (pix[tri[:, k]] for k in range(3))
    area2 = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
             - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    front &= area2 < -1e-14          # camera-facing under y-down pixel coords
    frag = FragmentBuffer(face_buf, bary_buf, depth_buf, front)
    if not np.any(front):
        return frag

    fids = np.nonzero(front)[0]
    q0, q1, q2 = p0[fids], p1[fids], p2[fids]
    a2 = area2[fids]
    # pixel-center bounding boxes, clipped to the image
    xs = np.stack([q0[:, 0], q1[:, 0], q2[:, 0]], axis=1)
    ys = np.stack([q0[:, 1], q1[:, 1], q2[:, 1]], axis=1)
    j0 = np.maximum(np.ceil(xs.min(axis=1) - 0.5), 0).astype(np.int64)
    j1 = np.minimum(np.floor(xs.max(axis=1) - 0.5), W - 1).astype(np.int64)
    i0 = np.maximum(np.ceil(ys.min(axis=1) - 0.5), 0).astype(np.int64)
    i1 = np.minimum(np.floor(ys.max(axis=1) - 0.5), H - 1).astype(np.int64)
    keep = (j1 >= j0) & (i1 >= i0)
    if not np.any(keep):
        return frag
    fids, q0, q1, q2, a2 = fids[keep], q0[keep], q1[keep], q2[keep], a2[keep]
    j0, j1, i0, i1 = j0[keep], j1[keep], i0[keep], i1[keep]

    bw = j1 - j0 + 1
    bh = i1 - i0 + 1
    counts = bw * bh
    total = int(counts.sum())
    cand = np.repeat(np.arange(len(fids)), counts)
    base = np.repeat(np.cumsum(counts) - counts, counts)
    off = np.arange(total) - base
    jj = j0[cand] + off % bw[cand]
    ii = i0[cand] + off // bw[cand]
    px_c = jj + 0.5
    py_c = ii + 0.5

    c0, c1, c2 = q0[cand], q1[cand], q2[cand]
    w0 = (c2[:, 0] - c1[:, 0]) * (py_c - c1[:, 1]) - (c2[:, 1] - c1[:, 1]) * (px_c - c1[:, 0])
    w1 = (c0[:, 0] - c2[:, 0]) * (py_c - c2[:, 1]) - (c0[:, 1] - c2[:, 1]) * (px_c - c2[:, 0])
    w2 = (c1[:, 0] - c0[:, 0]) * (py_c - c0[:, 1]) - (c1[:, 1] - c0[:, 1]) * (px_c - c0[:, 0])
    inside = (w0 <= 0) & (w1 <= 0) & (w2 <= 0)   # same sign as the negative area
    if not np.any(inside):
        return frag
    cand, jj, ii = cand[inside], jj[inside], ii[inside]
    lam = np.stack([w0[inside], w1[inside], w2[inside]], axis=1) / a2[cand][:, None]

    zt = z[tri[fids]]                             # (Fkept, 3)
    inv_z = lam / zt[cand]
    inv_sum = inv_z.sum(axis=1)
    depth = 1.0 / inv_sum
    bary = inv_z / inv_sum[:, None]

    flat = ii * W + jj
    global_face = fids[cand]
    order = np.lexsort((global_face, depth, flat))
    flat_s = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_s[1:] != flat_s[:-1]
    sel = order[first]

    face_buf.reshape(-1)[flat[sel]] = global_face[sel]
    depth_buf.reshape(-1)[flat[sel]] = depth[sel]
    bary_buf.reshape(-1, 3)[flat[sel]] = bary[sel]
    return frag


# ---------------------------------------------------------------------------
# Differentiable attribute rendering on top of a fixed FragmentBuffer.

def project_vertices_var(verts: ad.Var, camera):
    """Projected pixel coordinates (V,2) as a Var plus raw depths (values).

    Depths are clamped away from zero before the divide so behind-camera
    vertices (always culled by the rasterizer) cannot poison gradients.
    """
    tape = verts.tape
    cam_pts = verts @ tape.const(camera.R.T) + tape.const(camera.t)
    z = cam_pts[:, 2:3]
    z_safe = ad.clamp(z, Z_NEAR, 1e12)
    px = cam_pts[:, 0:1] * camera.fx / z_safe + camera.cx
    py = cam_pts[:, 1:2] * camera.fy / z_safe + camera.cy
    return ad.concat([px, py], axis=1), cam_pts.value[:, 2]


def vertex_normals_var(verts: ad.Var, faces) -> ad.Var:
    """Differentiable area-weighted unit vertex normals (world frame)."""
    a = ad.take(verts, faces[:, 0])
    b = ad.take(verts, faces[:, 1])
    c = ad.take(verts, faces[:, 2])
    e1 = b - a
    e2 = c - a
    cx = e1[:, 1] * e2[:, 2] - e1[:, 2] * e2[:, 1]
    cy = e1[:, 2] * e2[:, 0] - e1[:, 0] * e2[:, 2]
    cz = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    cross = ad.stack([cx, cy, cz], axis=1)
    idx = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    acc = ad.segment_sum(ad.concat([cross, cross, cross], axis=0), idx, verts.shape[0])
    return acc / ad.norm2(acc, axis=1, keepdims=True)


def render_normals_var(verts: ad.Var, faces, camera, frag: FragmentBuffer = None):
    """Camera-frame normal map (H,W,3) as a Var; zero outside coverage."""
    if frag is None:
        frag = rasterize(Mesh(verts.value, faces), camera)
    tape = verts.tape
    H, W = camera.height, camera.width
    n_world = vertex_normals_var(verts, faces)
    n_cam = n_world @ tape.const(camera.R.T)
    flat = np.nonzero(frag.face.reshape(-1) >= 0)[0]
    if flat.size == 0:
        return tape.const(np.zeros((H, W, 3))), frag
    fsel = frag.face.reshape(-1)[flat]
    bary = frag.bary.reshape(-1, 3)[flat]
    n0 = ad.take(n_cam, faces[fsel, 0])
    n1 = ad.take(n_cam, faces[fsel, 1])
    n2 = ad.take(n_cam, faces[fsel, 2])
    n_pix = n0 * bary[:, 0:1] + n1 * bary[:, 1:2] + n2 * bary[:, 2:3]
    n_pix = n_pix / ad.norm2(n_pix, axis=1, keepdims=True)
    idx = (flat[:, None] * 3 + np.arange(3)[None, :])
    img = ad.scatter_into(np.zeros(H * W * 3), idx, n_pix)
    return img.reshape((H, W, 3)), frag


def render_normals(mesh: Mesh, camera, frag: FragmentBuffer = None):
    """Numpy normal map for label generation; same code path as the Var form."""
    tape = ad.Tape()
    img, frag = render_normals_var(tape.const(mesh.vertices), mesh.faces, camera, frag)
    return img.value, frag


@dataclass
class ContourTopology:
    """Edge table reused across renders of one mesh topology."""
    edges: np.ndarray        # (E,2) vertex ids
    edge_faces: np.ndarray   # (E,2) adjacent face ids, -1 padding
    n_adjacent: np.ndarray   # (E,) 1 or 2

    @classmethod
    def build(cls, mesh: Mesh):
        uniq, face_ids, start, counts = mesh.edges_with_faces()
        if np.any(counts > 2):
            raise ValueError("non-manifold edge (more than two incident faces)")
        ef = np.full((len(uniq), 2), -1, dtype=np.int64)
        ef[:, 0] = face_ids[start]
        two = counts == 2
        ef[two, 1] = face_ids[start[two] + 1]
        return cls(uniq, ef, counts)


def _contour_edges(topo: ContourTopology, front_faces):
    """Edges with exactly one camera-facing adjacent face (the occluding
    contour plus open boundaries)."""
    f0 = np.where(topo.edge_faces[:, 0] >= 0, front_faces[topo.edge_faces[:, 0]], False)
    f1 = np.where(topo.edge_faces[:, 1] >= 0, front_faces[topo.edge_faces[:, 1]], False)
    return topo.edges[f0.astype(int) + f1.astype(int) == 1]


def render_silhouette_soft_var(verts: ad.Var, faces, camera, sharpness=40.0,
                               frag: FragmentBuffer = None, topo: ContourTopology = None):
    """Soft silhouette: sigmoid(sharpness × signed distance to the nearest
    occluding-contour edge in pixel space), positive inside coverage.

    Pixels farther than a saturation band from the contour take their
    limit values (1 inside, 0 outside) with zero gradient; the sigmoid
    there differs from the limit by less than exp(-sharpness × band).
    """
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    H, W = camera.height, camera.width
    tape = verts.tape
    if frag is None:
        frag = rasterize(Mesh(verts.value, faces), camera)
    if topo is None:
        topo = ContourTopology.build(Mesh(verts.value, faces))
    mask = frag.mask
    contour = _contour_edges(topo, frag.front_faces)
    if contour.size == 0 or not mask.any() or mask.all():
        return tape.const(mask.astype(np.float64)), frag

    band = max(3.0, 12.0 / sharpness)
    dist_in = ndimage.distance_transform_edt(mask)
    dist_out = ndimage.distance_transform_edt(~mask)
    band_mask = np.where(mask, dist_in, dist_out) <= band + 1.5
    flat = np.nonzero(band_mask.reshape(-1))[0]

    pix_var, _ = project_vertices_var(verts, camera)
    pix = pix_var.value
    ii, jj = np.divmod(flat, W)
    pc = np.stack([jj + 0.5, ii + 0.5], axis=1)

    # nearest contour edge per band pixel, chosen outside the tape
    a = pix[contour[:, 0]]
    b = pix[contour[:, 1]]
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-30)
    t = (pc[:, None, 0] - a[None, :, 0]) * ab[None, :, 0]
    t += (pc[:, None, 1] - a[None, :, 1]) * ab[None, :, 1]
    t = np.clip(t / denom[None, :], 0.0, 1.0)
    dx = a[None, :, 0] + t * ab[None, :, 0] - pc[:, None, 0]
    dy = a[None, :, 1] + t * ab[None, :, 1] - pc[:, None, 1]
    nearest = np.argmin(dx * dx + dy * dy, axis=1)

    va = ad.take(pix_var, contour[nearest, 0])
    vb = ad.take(pix_var, contour[nearest, 1])
    pa = tape.const(pc) - va
    ab_v = vb - va
    tt = ad.clamp((pa * ab_v).sum(axis=1, keepdims=True)
                  / ad.clamp((ab_v * ab_v).sum(axis=1, keepdims=True), 1e-30, 1e30),
                  0.0, 1.0)
    res = pa - tt * ab_v
    # sqrt of a clamped square keeps the gradient finite for pixel
    # centers that land exactly on a contour edge (sigmoid there is 0.5)
    dist = ad.sqrt(ad.clamp((res * res).sum(axis=1), 1e-24, 1e60))
    sign = np.where(mask.reshape(-1)[flat], 1.0, -1.0)
    vals = ad.sigmoid(dist * (sign * sharpness))
    base = mask.astype(np.float64).reshape(-1)
    img = ad.scatter_into(base, flat, vals)
    return img.reshape((H, W)), frag


def render_silhouette_soft(mesh: Mesh, camera, sharpness=40.0):
    tape = ad.Tape()
    img, frag = render_silhouette_soft_var(tape.const(mesh.vertices), mesh.faces,
                                           camera, sharpness)
    return img.value, frag


def project_keypoints_var(verts: ad.Var, kp_vertex_ids, camera):
    """Normalized keypoint positions (K,2) as a Var plus 0/1 visibility.

    A keypoint is visible when it lands in [0, W) × [0, H) pixel bounds
    with positive depth.  Visibility is a value, not a Var.
    """
    kp_ids = np.asarray(kp_vertex_ids)
    pix_var, z = project_vertices_var(verts, camera)
    kp_pix = ad.take(pix_var, kp_ids)
    norm = kp_pix / np.array([camera.width, camera.height], dtype=np.float64)
    p = kp_pix.value
    zk = z[kp_ids]
    visible = ((zk > 0) & (p[:, 0] >= 0) & (p[:, 0] < camera.width)
               & (p[:, 1] >= 0) & (p[:, 1] < camera.height)).astype(np.float64)
    return norm, visible


def project_keypoints(mesh: Mesh, kp_vertex_ids, camera):
    tape = ad.Tape()
    norm, visible = project_keypoints_var(tape.const(mesh.vertices), kp_vertex_ids, camera)
    return norm.value, visible


def cutoff_fraction(mesh: Mesh, cutoff_height, camera, frag: FragmentBuffer = None) -> float:
    """Fraction of covered pixels whose surface point lies above the
    horizontal plane z = cutoff_height.  Empty coverage gives 0."""
    if frag is None:
        frag = rasterize(mesh, camera)
    sel = frag.face.reshape(-1) >= 0
    if not sel.any():
        return 0.0
    fsel = frag.face.reshape(-1)[sel]
    bary = frag.bary.reshape(-1, 3)[sel]
    z_corners = mesh.vertices[mesh.faces[fsel], 2]
    z_pix = np.sum(bary * z_corners, axis=1)
    return float(np.mean(z_pix > cutoff_height))
