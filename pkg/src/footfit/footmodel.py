"""Deformable foot template: procedural mesh, code-conditioned
displacement MLP, registration transform, and model file IO.

The template is a watertight swept tube: superellipse cross sections
follow a spine that runs down a leg stub, bends at the ankle, and
sweeps forward to the toes.  A heel lobe, a medial arch lift, per-toe
length extensions and a soft floor flattening shape it into a left
foot resting just above z = 0, toes toward +x, big toe at +y.  Output
vertices are

    v_i = diag(s) · R(r) · (x_i + F(x_i, z_s, z_p)) + t

with R built from Euler angles as in :func:`footfit.geometry.euler_rotation`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .geometry import Mesh, euler_rotation

__all__ = [
    "FootParams", "ParamVars", "DeformationField", "TemplateAsset",
    "ModelFormatError", "KEYPOINT_NAMES", "build_template", "zero_field",
    "random_field", "make_default_model", "forward", "forward_mesh",
    "blendshape_forward", "lift_params", "save_model", "load_model",
]

KEYPOINT_NAMES = (
    "toe_1", "toe_2", "toe_3", "toe_4", "toe_5",
    "ball_medial", "ball_lateral", "heel_back", "heel_bottom",
    "arch_mid", "instep_top", "ankle_outer",
)

MAGIC = b"FMDL"
VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass
class FootParams:
    r: np.ndarray        # Euler radians (3,)
    t: np.ndarray        # meters (3,)
    s: np.ndarray        # per-axis scale (3,)
    z_s: np.ndarray      # shape code
    z_p: np.ndarray      # pose code

    @classmethod
    def identity(cls, d_s=8, d_p=8):
        return cls(np.zeros(3), np.zeros(3), np.ones(3), np.zeros(d_s), np.zeros(d_p))

    def validate(self):
        for name, n in (("r", 3), ("t", 3), ("s", 3)):
            if np.asarray(getattr(self, name)).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        if not np.all(np.asarray(self.s) > 0):
            raise ValueError("scale components must be positive")
        return self


@dataclass
class ParamVars:
    """Registration and code parameters as tape variables."""
    r: ad.Var
    t: ad.Var
    s: ad.Var
    z_s: ad.Var
    z_p: ad.Var


def lift_params(tape, params: FootParams, train=()):
    """Put params on a tape; names in ``train`` become gradient leaves."""
    params.validate()
    out = {}
    for name in ("r", "t", "s", "z_s", "z_p"):
        value = np.asarray(getattr(params, name), dtype=np.float64)
        if name in train:
            out[name] = tape.leaf(value)
        else:
            out[name] = tape.const(value)
    return ParamVars(**out)


@dataclass
class DeformationField:
    """MLP x, z_s, z_p -> displacement; tanh hidden layers, linear out."""
    weights: list                 # [(W, b), ...] float64
    d_s: int
    d_p: int

    def __post_init__(self):
        if self.weights[0][0].shape[0] != 3 + self.d_s + self.d_p:
            raise ModelFormatError("first layer width does not match 3 + D_s + D_p")
        if self.weights[-1][0].shape[1] != 3:
            raise ModelFormatError("last layer must emit 3 values")
        for W, b in self.weights:
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ModelFormatError("non-finite field weights")


@dataclass
class TemplateAsset:
    mesh: Mesh
    keypoint_ids: np.ndarray
    keypoint_names: tuple = KEYPOINT_NAMES
    blend_basis: np.ndarray = None    # (K, V, 3) displacement fields

    def validate(self):
        self.mesh.validate()
        if not self.mesh.is_watertight():
            raise ValueError("template mesh is not watertight")
        ids = np.asarray(self.keypoint_ids)
        if ids.shape != (len(self.keypoint_names),):
            raise ValueError("keypoint id count does not match names")
        if len(set(ids.tolist())) != len(ids):
            raise ValueError("keypoint ids must be distinct")
        if ids.min() < 0 or ids.max() >= len(self.mesh.vertices):
            raise ValueError("keypoint id out of range")
        return self


# ---------------------------------------------------------------------------
# Procedural template.

_N_SEG = 52
_LEG_X = 0.055          # leg axis before the final recentering shift
_BEND_R = 0.035
_BEND_C = (_LEG_X + _BEND_R, 0.07)    # (x, z) of the ankle bend arc center
_LEG_TOP = 0.22
_FOOT_X0 = _LEG_X + _BEND_R
_FOOT_X1 = 0.235
_X_SHIFT = -0.12        # recenters the foot around the world origin

_TOE_Y = np.array([0.030, 0.0155, 0.001, -0.0135, -0.028])
_TOE_LEN = np.array([0.016, 0.0125, 0.009, 0.006, 0.0035])
_TOE_SIGMA = 0.0045


def _superellipse(phi, e_pos, e_neg, w, p):
    """Closed section curve in a (u, v) ring plane; +u at phi = 0."""
    cu = np.cos(phi)
    sv = np.sin(phi)
    eu = np.where(cu >= 0, e_pos, e_neg)
    ou = np.sign(cu) * np.abs(cu) ** (2.0 / p) * eu
    ov = np.sign(sv) * np.abs(sv) ** (2.0 / p) * w
    return ou, ov


def _toe_extension(y):
    d = (y[:, None] - _TOE_Y[None, :]) / _TOE_SIGMA
    return (np.exp(-0.5 * d * d) * _TOE_LEN[None, :]).sum(axis=1)


def build_template():
    """Watertight left-foot tube, about 2,700 vertices, resting near z=0."""
    phi = 2 * np.pi * np.arange(_N_SEG) / _N_SEG
    rings = []      # (center(3), u(3), v(3), extents...)
    meta = []       # per-ring phi-plane data for later masking

    leg_r = 0.034
    for i in range(10):                       # leg: plane normal z, u = -x
        frac = i / 10.0
        z = _LEG_TOP + (_BEND_C[1] - _LEG_TOP) * frac
        rings.append(((_LEG_X, 0.0, z), (-1.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                      leg_r, leg_r, leg_r, 2.0, 0.0))

    entry = dict(e_pos=0.030, e_neg=0.040, w=0.036, p=2.4)
    for i in range(16):                       # ankle bend: quarter arc
        beta = (i + 1) / 17.0
        th = np.pi * (1.0 + 0.5 * beta)
        cx = _BEND_C[0] + _BEND_R * np.cos(th)
        cz = _BEND_C[1] + _BEND_R * np.sin(th)
        u = (np.cos(th), 0.0, np.sin(th))
        e_pos = (1 - beta) * leg_r + beta * entry["e_pos"]
        e_neg = ((1 - beta) * leg_r + beta * entry["e_neg"]) * (1 - 0.22 * np.sin(np.pi * beta))
        w = (1 - beta) * leg_r + beta * entry["w"]
        p = 2.0 + (entry["p"] - 2.0) * beta
        heel = 0.030 * np.sin(np.pi * np.clip(beta, 0, 1)) ** 2
        rings.append(((cx, 0.0, cz), u, (0.0, 1.0, 0.0), e_pos, e_neg, w, p, heel))

    for i in range(26):                       # foot: plane normal x, u = -z
        xi = (i + 1) / 26.0
        x = _FOOT_X0 + (_FOOT_X1 - _FOOT_X0) * xi
        zc = 0.035 * (1 - xi) + 0.016 * xi
        top = 0.075 - 0.047 * xi ** 0.9
        w = 0.036 * (1 - xi) + 0.031 * xi + 0.016 * np.sin(np.pi * xi ** 0.9)
        p = 2.3 + 0.9 * np.sin(np.pi * xi)
        rings.append(((x, 0.0, zc), (0.0, 0.0, -1.0), (0.0, 1.0, 0.0),
                      zc - 0.005, top - zc, w, p, 0.0))

    verts = []
    phis = []
    for center, u, v, e_pos, e_neg, w, p, heel in rings:
        ou, ov = _superellipse(phi, e_pos, e_neg, w, p)
        ou = ou + heel * np.maximum(np.cos(phi), 0.0) ** 3
        pts = (np.asarray(center)[None, :]
               + ou[:, None] * np.asarray(u)[None, :]
               + ov[:, None] * np.asarray(v)[None, :])
        verts.append(pts)
        phis.append(phi)
    verts = np.concatenate(verts, axis=0)
    phis = np.concatenate(phis)

    # medial arch lift on the sole side of midfoot rings
    bottom = np.maximum(np.cos(phis), 0.0) ** 2
    medial = np.clip(0.5 + verts[:, 1] / 0.10, 0.0, 1.0)
    arch = 0.011 * np.exp(-0.5 * ((verts[:, 0] - 0.125) / 0.020) ** 2)
    verts[:, 2] += arch * bottom * medial

    # per-toe length extensions, then toe caps inherit via the same warp
    n_rings = len(rings)
    top_center = np.array([_LEG_X, 0.0, _LEG_TOP])
    toe_center = np.array([_FOOT_X1, 0.0, 0.016])
    verts = np.vstack([verts, top_center, toe_center])
    gate = 1.0 / (1.0 + np.exp(-(verts[:, 0] - 0.205) / 0.012))
    verts[:, 0] += _toe_extension(verts[:, 1]) * gate

    # soft floor flattening and recentering
    delta = 0.004
    verts[:, 2] = delta * np.logaddexp(0.0, verts[:, 2] / delta)
    verts[:, 0] += _X_SHIFT

    faces = []
    for i in range(n_rings - 1):
        for j in range(_N_SEG):
            a = i * _N_SEG + j
            b = i * _N_SEG + (j + 1) % _N_SEG
            c = (i + 1) * _N_SEG + (j + 1) % _N_SEG
            d = (i + 1) * _N_SEG + j
            faces.append([a, b, c])
            faces.append([a, c, d])
    i_top = n_rings * _N_SEG
    i_toe = i_top + 1
    for j in range(_N_SEG):
        jn = (j + 1) % _N_SEG
        faces.append([i_top, jn, j])
        last = (n_rings - 1) * _N_SEG
        faces.append([i_toe, last + j, last + jn])
    faces = np.asarray(faces, dtype=np.int64)

    # orient all faces outward (positive enclosed volume)
    tri = verts[faces]
    vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
    if vol < 0:
        faces = faces[:, ::-1]
    mesh = Mesh(verts, np.ascontiguousarray(faces)).validate()
    return TemplateAsset(mesh, _assign_keypoints(verts), KEYPOINT_NAMES,
                         _blend_basis(verts)).validate()


def _pick(score, taken):
    order = np.argsort(score)
    for idx in order:
        if idx not in taken:
            taken.add(int(idx))
            return int(idx)
    raise RuntimeError("ran out of vertices while picking keypoints")


def _assign_keypoints(verts):
    taken = set()
    ids = []
    big = 1e9
    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    for yt in _TOE_Y:      # toe tips: farthest forward near each toe line,
        # mid-height preferred so every tip sits on the toe's leading edge
        in_lane = (np.abs(y - yt) < 0.007) & (x > 0.05)
        score = -x + 2.0 * np.abs(z - 0.016)
        ids.append(_pick(np.where(in_lane, score, big), taken))
    ball = (x > 0.02) & (x < 0.07)
    ids.append(_pick(np.where(ball, -y, big), taken))           # ball_medial
    ids.append(_pick(np.where(ball, y, big), taken))            # ball_lateral
    low = z < 0.04
    ids.append(_pick(np.where(low, x, big), taken))             # heel_back
    heel_zone = x < -0.06
    ids.append(_pick(np.where(heel_zone, z, big), taken))       # heel_bottom
    # arch_mid / instep_top / ankle_outer; instep and ankle sit high so
    # vertical scale is observable from keypoints alone
    for anchor in ([-0.005, 0.028, 0.010], [0.010, 0.0, 0.080],
                   [-0.050, -0.035, 0.070]):
        d = np.linalg.norm(verts - np.asarray(anchor), axis=1)
        ids.append(_pick(d, taken))
    return np.asarray(ids, dtype=np.int64)


def _blend_basis(verts):
    """Four hand-built displacement fields: length, width, toe lift, instep."""
    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    n = len(verts)
    basis = np.zeros((4, n, 3))
    basis[0, :, 0] = 0.08 * (x - x.mean())
    basis[1, :, 1] = 0.15 * y
    basis[2, :, 2] = 0.012 / (1.0 + np.exp(-(x - 0.06) / 0.015))
    basis[3, :, 2] = 0.010 * np.exp(-0.5 * (((x - (-0.01)) / 0.03) ** 2)) \
        * np.clip((z - 0.02) / 0.05, 0.0, 1.0)
    return basis


# ---------------------------------------------------------------------------
# Deformation field construction and evaluation.

def zero_field(d_s=8, d_p=8, hidden=64, n_hidden=3):
    dims = [3 + d_s + d_p] + [hidden] * n_hidden + [3]
    weights = [(np.zeros((dims[i], dims[i + 1])), np.zeros(dims[i + 1]))
               for i in range(len(dims) - 1)]
    return DeformationField(weights, d_s, d_p)


def random_field(template_verts, d_s=8, d_p=8, hidden=64, n_hidden=3,
                 seed=0, target_rms=0.008):
    """Seeded field whose displacement RMS at unit-normal codes is
    calibrated to ``target_rms`` over the template vertices.

    First-layer position weights are scaled so the position block
    contributes as much preactivation variance as the code block;
    otherwise the displacement collapses to a per-code constant offset
    (positions span ~0.1 m while codes are unit scale) and the field
    degenerates into a translation absorbed by the registration.
    """
    rng = np.random.default_rng(seed)
    dims = [3 + d_s + d_p] + [hidden] * n_hidden + [3]
    pos_scale = float(np.std(template_verts))
    pos_gain = np.sqrt((d_s + d_p) / 3.0) / pos_scale
    weights = []
    for i in range(len(dims) - 1):
        W = rng.normal(0.0, 1.0 / np.sqrt(dims[i]), size=(dims[i], dims[i + 1]))
        if i == 0:
            W[:3] *= pos_gain
        weights.append((W, np.zeros(dims[i + 1])))
    field = DeformationField(weights, d_s, d_p)
    probes = rng.normal(size=(16, d_s + d_p))
    sq = 0.0
    for row in probes:
        d = field_apply(field, template_verts, row[:d_s], row[d_s:])
        sq += np.mean(np.sum(d * d, axis=1))
    rms = np.sqrt(sq / len(probes))
    W, b = field.weights[-1]
    field.weights[-1] = (W * (target_rms / rms), b)
    return field


def field_apply(field, points, z_s, z_p):
    """Plain numpy field evaluation (label generation, calibration)."""
    n = len(points)
    h = np.concatenate([points,
                        np.broadcast_to(z_s, (n, field.d_s)),
                        np.broadcast_to(z_p, (n, field.d_p))], axis=1)
    for i, (W, b) in enumerate(field.weights):
        h = h @ W + b
        if i < len(field.weights) - 1:
            h = np.tanh(h)
    return h


def _field_var(field, X, z_s, z_p):
    tape = X.tape
    n = X.shape[0]
    ones = tape.const(np.ones((n, 1)))
    h = ad.concat([X, ones @ z_s.reshape((1, field.d_s)),
                   ones @ z_p.reshape((1, field.d_p))], axis=1)
    for i, (W, b) in enumerate(field.weights):
        h = h @ tape.const(W) + tape.const(b)
        if i < len(field.weights) - 1:
            h = ad.tanh(h)
    return h


def _euler_var(r):
    tape = r.tape
    one = tape.const(1.0)
    zero = tape.const(0.0)
    cx, sx = ad.cos(r[0]), ad.sin(r[0])
    cy, sy = ad.cos(r[1]), ad.sin(r[1])
    cz, sz = ad.cos(r[2]), ad.sin(r[2])
    Rx = ad.stack([ad.stack([one, zero, zero]),
                   ad.stack([zero, cx, -sx]),
                   ad.stack([zero, sx, cx])])
    Ry = ad.stack([ad.stack([cy, zero, sy]),
                   ad.stack([zero, one, zero]),
                   ad.stack([-sy, zero, cy])])
    Rz = ad.stack([ad.stack([cz, -sz, zero]),
                   ad.stack([sz, cz, zero]),
                   ad.stack([zero, zero, one])])
    return Rz @ Ry @ Rx


def forward(asset: TemplateAsset, field: DeformationField, pv: ParamVars) -> ad.Var:
    """Differentiable deformed vertices (V,3); faces stay asset.mesh.faces."""
    if pv.z_s.shape != (field.d_s,) or pv.z_p.shape != (field.d_p,):
        raise ValueError("code dimensions do not match the field")
    if not np.all(pv.s.value > 0):
        raise ValueError("scale components must be positive")
    tape = pv.r.tape
    X = tape.const(asset.mesh.vertices)
    u = X + _field_var(field, X, pv.z_s, pv.z_p)
    R = _euler_var(pv.r)
    return (u @ ad.transpose(R)) * pv.s + pv.t


def forward_mesh(asset, field, params: FootParams) -> Mesh:
    tape = ad.Tape()
    pv = lift_params(tape, params, train=())
    return asset.mesh.copy_with(forward(asset, field, pv).value)


def blendshape_forward(asset, coeffs, params: FootParams) -> Mesh:
    """Linear fallback: template + Σ coeffs_k · basis_k, then registration."""
    if asset.blend_basis is None:
        raise ValueError("asset carries no blendshape basis")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (len(asset.blend_basis),):
        raise ValueError(f"expected {len(asset.blend_basis)} coefficients")
    params.validate()
    u = asset.mesh.vertices + np.einsum("k,kvc->vc", coeffs, asset.blend_basis)
    R = euler_rotation(params.r)
    v = (u @ R.T) * params.s + params.t
    return asset.mesh.copy_with(v)


# ---------------------------------------------------------------------------
# Model file IO.

def _write_array(fh, arr):
    fh.write(np.ascontiguousarray(arr).tobytes())


def save_model(path, asset: TemplateAsset, field: DeformationField):
    asset.validate()
    mesh = asset.mesh
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<II", len(mesh.vertices), len(mesh.faces)))
        _write_array(fh, mesh.vertices.astype("<f8"))
        _write_array(fh, mesh.faces.astype("<i8"))
        fh.write(struct.pack("<I", len(asset.keypoint_ids)))
        _write_array(fh, np.asarray(asset.keypoint_ids, dtype="<i8"))
        for name in asset.keypoint_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(struct.pack("<III", field.d_s, field.d_p, len(field.weights)))
        for W, b in field.weights:
            fh.write(struct.pack("<II", W.shape[0], W.shape[1]))
            _write_array(fh, W.astype("<f8"))
            _write_array(fh, b.astype("<f8"))
        if asset.blend_basis is None:
            fh.write(struct.pack("<I", 0))
        else:
            fh.write(struct.pack("<I", len(asset.blend_basis)))
            _write_array(fh, asset.blend_basis.astype("<f8"))


def _read_exact(fh, n, path):
    raw = fh.read(n)
    if len(raw) != n:
        raise ModelFormatError(f"{path}: truncated model file")
    return raw


def _read_array(fh, dtype, shape, path):
    n = int(np.prod(shape)) * np.dtype(dtype).itemsize
    return np.frombuffer(_read_exact(fh, n, path), dtype=dtype).reshape(shape).copy()


def load_model(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != MAGIC:
            raise ModelFormatError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != VERSION:
            raise ModelFormatError(f"{path}: unsupported version {version}")
        nv, nf = struct.unpack("<II", _read_exact(fh, 8, path))
        vertices = _read_array(fh, "<f8", (nv, 3), path)
        faces = _read_array(fh, "<i8", (nf, 3), path)
        (nk,) = struct.unpack("<I", _read_exact(fh, 4, path))
        kp_ids = _read_array(fh, "<i8", (nk,), path)
        names = []
        for _ in range(nk):
            (ln,) = struct.unpack("<H", _read_exact(fh, 2, path))
            names.append(_read_exact(fh, ln, path).decode("utf-8"))
        d_s, d_p, n_layers = struct.unpack("<III", _read_exact(fh, 12, path))
        weights = []
        for _ in range(n_layers):
            din, dout = struct.unpack("<II", _read_exact(fh, 8, path))
            W = _read_array(fh, "<f8", (din, dout), path)
            b = _read_array(fh, "<f8", (dout,), path)
            weights.append((W, b))
        (n_basis,) = struct.unpack("<I", _read_exact(fh, 4, path))
        basis = None
        if n_basis:
            basis = _read_array(fh, "<f8", (n_basis, nv, 3), path)
    try:
        field = DeformationField(weights, d_s, d_p)
    except ModelFormatError:
        raise
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    asset = TemplateAsset(Mesh(vertices, faces), kp_ids, tuple(names), basis)
    try:
        asset.validate()
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    return asset, field


def make_default_model(seed=0):
    asset = build_template()
    field = random_field(asset.mesh.vertices, seed=seed)
    return asset, field
