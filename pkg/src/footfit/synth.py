"""Synthetic multi-view label generation and image augmentations.

A scene is a ground-truth model instance observed from an arc of
cameras.  Each view gets a label bundle: noiseless GT normal map,
perturbed mean-direction map with a calibrated concentration map,
coverage mask, keypoints with visibility, and a Lambert-shaded image.
Noise on directions is a folded-normal angle about a random tangent
axis, and kappa is chosen so the expected angular error matches the
mean of that folded normal, making the synthesized uncertainty
calibrated by construction.

Scene directory layout::

    scene.json            spec echo (JSON)
    cameras.json
    view_000/
        image.ppm         shaded 8-bit image
        gt_normals.pfm    noiseless camera-frame normals
        mu.pfm            perturbed directions (what fitting consumes)
        kappa.pfm
        mask.pgm
        keypoints.json
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
from scipy import ndimage

from . import camera as cam_mod
from . import footmodel as fm
from . import images
from . import losses
from . import renderer

__all__ = [
    "SceneSpec", "ViewBundle", "synthesize_kappa", "render_view",
    "generate_scene", "load_scene", "scene_gt_params", "random_scene_params",
    "flip_bundle", "downsample_upsample", "gaussian_blur", "add_noise",
    "color_jitter", "grayscale", "perspective_bundle", "augment",
    "apply_augmentations", "FLIP_KEYPOINT_REMAP", "AUGMENT_PROBS",
]

CALIBRATION = np.sqrt(2.0 / np.pi)   # mean of |N(0,1)|
CUTOFF_COVER_MAX = 0.20
AMBIENT, DIFFUSE = 0.25, 0.7


@dataclass
class SceneSpec:
    params: fm.FootParams
    arc: cam_mod.ArcSamplerConfig = dc_field(default_factory=cam_mod.ArcSamplerConfig)
    n_views: int = 8
    cutoff: float = 0.20
    sigma_view_deg: object = 5.0     # scalar or one value per view
    kp_sigma: float = 0.01           # reported keypoint spread, normalized units
    seed: int = 0

    def sigma_list(self):
        s = self.sigma_view_deg
        if np.isscalar(s):
            return [float(s)] * self.n_views
        out = [float(v) for v in s]
        if len(out) != self.n_views:
            raise ValueError("need one sigma per view")
        return out

    def validate(self):
        if self.n_views < 1:
            raise ValueError("need at least one view")
        if self.cutoff < 0:
            raise ValueError("cutoff height must be non-negative")
        if any(v < 0 for v in self.sigma_list()):
            raise ValueError("view noise must be non-negative")
        if self.kp_sigma <= 0:
            raise ValueError("keypoint spread must be positive")
        self.params.validate()
        return self


@dataclass
class ViewBundle:
    """Everything one view contributes: camera, labels, shaded image,
    and the noiseless normal map the labels were synthesized from."""
    camera: cam_mod.Camera
    obs: losses.Observation
    image: np.ndarray        # (H,W,3) float in [0,1]
    gt_normals: np.ndarray   # (H,W,3), zero off-mask


def random_scene_params(rng, d_s=8, d_p=8, code_scale=0.6):
    """Registration and code draw used for synthetic scenes: a foot
    roughly at the origin, as a handheld capture rig would frame it."""
    return fm.FootParams(rng.uniform(-0.06, 0.06, 3),
                         rng.uniform(-0.01, 0.01, 3),
                         rng.uniform(0.98, 1.02, 3),
                         rng.normal(size=d_s) * code_scale,
                         rng.normal(size=d_p) * code_scale)


def synthesize_kappa(gt_normals, mask, sigma_deg, rng):
    """Perturbed direction map and calibrated concentration map.

    Foreground directions are the GT normals rotated by folded-normal
    angles about per-pixel random tangent axes; kappa solves
    expected_angular_error(kappa) = mean folded-normal angle.  sigma 0
    gives exact directions at the lookup's top concentration.
    Background stays (0,0,0) with kappa 0.
    """
    if sigma_deg < 0:
        raise ValueError("sigma must be non-negative")
    H, W = mask.shape
    mu = np.zeros((H, W, 3))
    kappa = np.zeros((H, W))
    n = gt_normals[mask]
    if sigma_deg == 0.0:
        kappa[mask] = losses.kappa_for_expected_error(0.0)
        mu[mask] = n
        return mu, kappa
    kappa[mask] = losses.kappa_for_expected_error(CALIBRATION * sigma_deg)
    P = len(n)
    alpha = np.abs(rng.normal(0.0, np.radians(sigma_deg), size=P))
    v = rng.normal(size=(P, 3))
    t = v - (v * n).sum(axis=1, keepdims=True) * n
    norms = np.linalg.norm(t, axis=1, keepdims=True)
    # a draw parallel to n has no tangent part; fall back to any
    # perpendicular direction (measure-zero event)
    bad = norms[:, 0] < 1e-9
    if bad.any():
        alt = np.cross(n[bad], [[1.0, 0.0, 0.0]])
        alt_n = np.linalg.norm(alt, axis=1, keepdims=True)
        small = alt_n[:, 0] < 1e-9
        alt[small] = np.cross(n[bad][small], [0.0, 1.0, 0.0])
        t[bad] = alt
        norms = np.linalg.norm(t, axis=1, keepdims=True)
    t = t / norms
    mu[mask] = n * np.cos(alpha)[:, None] + t * np.sin(alpha)[:, None]
    return mu, kappa


def lambert_image(gt_normals, mask):
    """Headlight-lit grayscale image replicated to RGB, in [0,1]."""
    shade = AMBIENT + DIFFUSE * np.clip(-gt_normals[..., 2], 0.0, 1.0)
    img = np.where(mask, shade, 1.0)
    return np.repeat(img[:, :, None], 3, axis=2)


def render_view(gt_mesh, kp_ids, camera, sigma_deg, kp_sigma, rng,
                frag=None) -> ViewBundle:
    if frag is None:
        frag = renderer.rasterize(gt_mesh, camera)
    gt_normals, _ = renderer.render_normals(gt_mesh, camera, frag=frag)
    mask = frag.mask
    mu, kappa = synthesize_kappa(gt_normals, mask, sigma_deg, rng)
    kp, vis = renderer.project_keypoints(gt_mesh, kp_ids, camera)
    sigma = np.full((len(kp_ids), 2), float(kp_sigma))
    obs = losses.Observation(
        losses.NormalObservation(mu, kappa),
        losses.KeypointObservation(kp, sigma, vis), mask)
    return ViewBundle(camera, obs, lambert_image(gt_normals, mask), gt_normals)


def _spec_echo(spec: SceneSpec):
    return {
        "seed": spec.seed,
        "n_views": spec.n_views,
        "cutoff": spec.cutoff,
        "sigma_view_deg": spec.sigma_list(),
        "kp_sigma": spec.kp_sigma,
        "lateral_axis": "world_x",
        "arc": asdict(spec.arc),
        "params": {
            "r": spec.params.r.tolist(),
            "t": spec.params.t.tolist(),
            "s": spec.params.s.tolist(),
            "z_s": spec.params.z_s.tolist(),
            "z_p": spec.params.z_p.tolist(),
        },
    }


def generate_scene(spec: SceneSpec, model, out_dir):
    """Write a complete scene directory; returns its path.

    Cameras are sampled per view from seed ``spec.seed ^ view`` (so the
    output does not depend on generation order) and resampled while the
    above-cutoff part of the render covers more than 20% of the
    silhouette, up to 100 attempts per view.
    """
    spec.validate()
    asset, field = model
    gt_mesh = fm.forward_mesh(asset, field, spec.params)
    sigmas = spec.sigma_list()
    os.makedirs(out_dir, exist_ok=True)
    cams = []
    for view in range(spec.n_views):
        rng = np.random.default_rng(spec.seed ^ view)
        for _ in range(100):
            cam = cam_mod.sample_arc(spec.arc, rng)
            frag = renderer.rasterize(gt_mesh, cam)
            if renderer.cutoff_fraction(gt_mesh, spec.cutoff, cam,
                                        frag=frag) <= CUTOFF_COVER_MAX:
                break
        else:
            raise ValueError(
                f"view {view}: no camera with above-cutoff coverage "
                f"<= {CUTOFF_COVER_MAX} in 100 attempts; loosen the arc "
                f"or raise the cutoff")
        cams.append(cam)
        bundle = render_view(gt_mesh, asset.keypoint_ids, cam, sigmas[view],
                             spec.kp_sigma, rng, frag=frag)
        view_dir = os.path.join(out_dir, f"view_{view:03d}")
        losses.save_observation(view_dir, bundle.obs)
        images.save_ppm(os.path.join(view_dir, "image.ppm"),
                        images.float_to_u8(bundle.image))
        images.save_pfm(os.path.join(view_dir, "gt_normals.pfm"),
                        bundle.gt_normals)
    cam_mod.save_cameras(os.path.join(out_dir, "cameras.json"), cams)
    with open(os.path.join(out_dir, "scene.json"), "w") as fh:
        json.dump(_spec_echo(spec), fh, indent=1)
        fh.write("\n")
    return out_dir


def load_scene(scene_dir):
    """(meta dict, cameras, observations) for a scene directory."""
    meta_path = os.path.join(scene_dir, "scene.json")
    if not os.path.exists(meta_path):
        raise losses.MissingObservation(f"{scene_dir}: missing scene.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    cams = cam_mod.load_cameras(os.path.join(scene_dir, "cameras.json"))
    obs = [losses.load_observation(os.path.join(scene_dir, f"view_{i:03d}"))
           for i in range(meta["n_views"])]
    return meta, cams, obs


def scene_gt_params(meta) -> fm.FootParams:
    p = meta["params"]
    return fm.FootParams(np.asarray(p["r"]), np.asarray(p["t"]),
                         np.asarray(p["s"]), np.asarray(p["z_s"]),
                         np.asarray(p["z_p"]))


# ---------------------------------------------------------------------------
# Augmentations.  Images are float (H,W,3) in [0,1].

def _flip_remap(names):
    """Index remap under a horizontal flip: toes reverse order, the
    ball width pair swaps, midline and unpaired landmarks keep their
    identity (the flip produces the opposite foot)."""
    remap = list(range(len(names)))
    names = list(names)
    for i in range(5):
        remap[i] = names.index(f"toe_{5 - i}")
    bm, bl = names.index("ball_medial"), names.index("ball_lateral")
    remap[bm], remap[bl] = bl, bm
    return np.asarray(remap)


FLIP_KEYPOINT_REMAP = _flip_remap(fm.KEYPOINT_NAMES)


def flip_bundle(bundle: ViewBundle) -> ViewBundle:
    """Horizontal mirror of image and labels.  Applying it twice gives
    the original back bit for bit.  The camera is kept as-is: the
    flipped bundle is a 2D training sample, not a renderable view."""
    remap = FLIP_KEYPOINT_REMAP
    obs = bundle.obs
    mu = obs.normals.mu[:, ::-1].copy()
    mu[..., 0] = -mu[..., 0]
    gt = bundle.gt_normals[:, ::-1].copy()
    gt[..., 0] = -gt[..., 0]
    kp = obs.keypoints
    k = kp.k[remap].copy()
    k[:, 0] = 1.0 - k[:, 0]
    flipped = losses.Observation(
        losses.NormalObservation(mu, obs.normals.kappa[:, ::-1].copy()),
        losses.KeypointObservation(k, kp.sigma[remap].copy(), kp.v[remap].copy()),
        obs.mask[:, ::-1].copy())
    return ViewBundle(bundle.camera, flipped, bundle.image[:, ::-1].copy(), gt)


def _resize_bilinear(image, h2, w2):
    H, W = image.shape[:2]
    ii = (np.arange(h2) + 0.5) * (H / h2) - 0.5
    jj = (np.arange(w2) + 0.5) * (W / w2) - 0.5
    grid_i, grid_j = np.meshgrid(ii, jj, indexing="ij")
    out = np.empty((h2, w2, image.shape[2]))
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.map_coordinates(
            image[:, :, c], [grid_i, grid_j], order=1, mode="nearest")
    return out


def downsample_upsample(image, ratio):
    """Bilinear downsample by ``ratio`` then back to the original size."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    H, W = image.shape[:2]
    h2 = max(1, int(round(H * ratio)))
    w2 = max(1, int(round(W * ratio)))
    return _resize_bilinear(_resize_bilinear(image, h2, w2), H, W)


def gaussian_blur(image, sigma):
    """7x7 Gaussian blur per channel (truncation pinned to radius 3)."""
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0),
                                   truncate=3.0 / sigma)


def add_noise(image, rng, sigma=0.01):
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def _rgb_to_hsv(rgb):
    mx = rgb.max(axis=2)
    mn = rgb.min(axis=2)
    d = mx - mn
    safe = np.where(d == 0, 1.0, d)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(d == 0, 0.0, h / 6.0)
    s = np.where(mx == 0, 0.0, d / np.where(mx == 0, 1.0, mx))
    return h, s, mx


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    channels = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for idx, (rr, gg, bb) in enumerate(channels):
        sel = i == idx
        out[sel, 0] = rr[sel]
        out[sel, 1] = gg[sel]
        out[sel, 2] = bb[sel]
    return out


def color_jitter(image, rng, brightness=0.5, contrast=0.5, saturation=0.5,
                 hue=0.1):
    """Brightness / contrast / saturation factors in 1 +/- the given
    ranges, hue shifted by up to +/-``hue`` of the full wheel."""
    out = image * rng.uniform(1.0 - brightness, 1.0 + brightness)
    mean = out.mean()
    out = np.clip((out - mean) * rng.uniform(1.0 - contrast, 1.0 + contrast)
                  + mean, 0.0, 1.0)
    h, s, v = _rgb_to_hsv(out)
    s = np.clip(s * rng.uniform(1.0 - saturation, 1.0 + saturation), 0.0, 1.0)
    h = (h + rng.uniform(-hue, hue)) % 1.0
    return np.clip(_hsv_to_rgb(h, s, v), 0.0, 1.0)


def grayscale(image):
    luma = image.mean(axis=2, keepdims=True)
    return np.repeat(luma, 3, axis=2)


def perspective_bundle(bundle: ViewBundle, gt_mesh, kp_ids, sigma_deg,
                       kp_sigma, rng) -> ViewBundle:
    """Random camera rotation with all labels re-rendered to match:
    yaw and pitch up to 20 degrees, roll anywhere."""
    lim = np.radians(20.0)
    yaw, pitch = rng.uniform(-lim, lim, size=2)
    roll = rng.uniform(-np.pi, np.pi)
    cam2 = cam_mod.rotate_camera(bundle.camera, yaw, pitch, roll)
    return render_view(gt_mesh, kp_ids, cam2, sigma_deg, kp_sigma, rng)


AUGMENT_PROBS = {
    "downsample": 0.5,
    "flip": 0.5,
    "blur": 0.5,
    "noise": 0.5,
    "jitter": 1.0,
    "grayscale": 0.02,
    "perspective": 1.0,
}


def augment(bundle: ViewBundle, ops, rng, gt_mesh=None, kp_ids=None,
            sigma_deg=5.0, kp_sigma=0.01) -> ViewBundle:
    """Apply named ops in order.  Image-only ops keep labels untouched;
    flip and perspective rewrite them consistently.  perspective needs
    the GT mesh to re-render from the rotated camera."""
    for op in ops:
        if op == "downsample":
            img = downsample_upsample(bundle.image, rng.uniform(0.2, 1.0))
            bundle = ViewBundle(bundle.camera, bundle.obs, img,
                                bundle.gt_normals)
        elif op == "flip":
            bundle = flip_bundle(bundle)
        elif op == "blur":
            img = gaussian_blur(bundle.image, rng.uniform(0.1, 10.0))
            bundle = ViewBundle(bundle.camera, bundle.obs, img,
                                bundle.gt_normals)
        elif op == "noise":
            bundle = ViewBundle(bundle.camera, bundle.obs,
                                add_noise(bundle.image, rng),
                                bundle.gt_normals)
        elif op == "jitter":
            bundle = ViewBundle(bundle.camera, bundle.obs,
                                color_jitter(bundle.image, rng),
                                bundle.gt_normals)
        elif op == "grayscale":
            bundle = ViewBundle(bundle.camera, bundle.obs,
                                grayscale(bundle.image), bundle.gt_normals)
        elif op == "perspective":
            if gt_mesh is None:
                raise ValueError("perspective augmentation needs the GT mesh")
            bundle = perspective_bundle(bundle, gt_mesh, kp_ids, sigma_deg,
                                        kp_sigma, rng)
        else:
            raise ValueError(f"unknown augmentation {op!r}")
    return bundle


def apply_augmentations(bundle: ViewBundle, rng, gt_mesh=None, kp_ids=None,
                        sigma_deg=5.0, kp_sigma=0.01) -> ViewBundle:
    """Roll the standard per-op probabilities and apply what comes up.
    perspective is skipped unless the GT mesh is provided."""
    ops = []
    for op in ("perspective", "downsample", "flip", "blur", "noise",
               "jitter", "grayscale"):
        if op == "perspective" and gt_mesh is None:
            continue
        if rng.uniform() < AUGMENT_PROBS[op]:
            ops.append(op)
    return augment(bundle, ops, rng, gt_mesh=gt_mesh, kp_ids=kp_ids,
                   sigma_deg=sigma_deg, kp_sigma=kp_sigma)
