"""Deterministic synthetic RGB-D scenes: ray-cast spheres and fronto-parallel
rectangles in front of a textured background plane, seen from two camera poses.

World coordinates coincide with the first (target) camera.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose, pixel_rays, rotation_from_axis_angle
from .imageio import read_pfm, read_ppm, write_pfm, write_ppm


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    n_points: int = 1500
    min_d: float = 0.5
    max_d: float = 20.0
    background_range: tuple = (8.0, 15.0)
    nearest_object: float = 2.0
    max_objects: int = 8
    max_rotation_deg: float = 3.0
    max_translation: float = 0.15
    texture_period_px: float = 16.0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.default_for(self.height, self.width)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray
    wave: np.ndarray
    phase: float


@dataclass
class Rect:
    corner: np.ndarray      # (x, y) of the low corner
    extents: np.ndarray     # (width, height) in meters
    depth: float
    albedo: np.ndarray
    wave: np.ndarray
    phase: float


@dataclass
class Scene:
    background_depth: float
    background_albedo: np.ndarray
    background_wave: np.ndarray
    background_phase: float
    light_dir: np.ndarray
    spheres: list = field(default_factory=list)
    rects: list = field(default_factory=list)

    @property
    def objects(self) -> list:
        return [*self.spheres, *self.rects]

    def object_depth_range(self) -> tuple[float, float]:
        """Nearest and farthest depth any object surface reaches."""
        near = [s.center[2] - s.radius for s in self.spheres] + [r.depth for r in self.rects]
        far = [s.center[2] + s.radius for s in self.spheres] + [r.depth for r in self.rects]
        return min(near), max(far)


@dataclass
class Sample:
    rgb_t: np.ndarray         # (H, W, 3) in [0, 1]
    rgb_t1: np.ndarray
    sparse: np.ndarray        # (H, W) meters, 0 = invalid
    gt_depth: np.ndarray      # (H, W) meters
    pose_t_to_t1: Pose
    intrinsics: Intrinsics


def _wave(rng, depth: float, cfg: SynthConfig) -> np.ndarray:
    # spatial frequency chosen so the pattern spans ~texture_period_px pixels at this depth
    f = cfg.intrinsics().fx
    k = 2 * np.pi * f / (depth * cfg.texture_period_px) * rng.uniform(0.8, 1.25)
    d = rng.normal(size=3)
    d[2] *= 0.3
    return k * d / np.linalg.norm(d)


def generate_scene(seed, cfg: SynthConfig | None = None) -> Scene:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    K = cfg.intrinsics()
    bg = rng.uniform(*cfg.background_range)
    light = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), -1.0])
    scene = Scene(bg, rng.uniform(0.3, 0.9, 3), _wave(rng, bg, cfg), rng.uniform(0, 2 * np.pi),
                  light / np.linalg.norm(light))
    n_obj = int(rng.integers(1, cfg.max_objects + 1))
    for _ in range(n_obj):
        z = rng.uniform(cfg.nearest_object, bg - 1.5)
        half_w = z * (cfg.width / 2) / K.fx
        half_h = z * (cfg.height / 2) / K.fy
        albedo = rng.uniform(0.2, 1.0, 3)
        if rng.uniform() < 0.5:
            r = rng.uniform(0.25, 0.3 * min(half_w, half_h) + 0.25)
            r = min(r, z - cfg.nearest_object + 0.5)
            c = np.array([rng.uniform(-0.8, 0.8) * half_w, rng.uniform(-0.8, 0.8) * half_h, z])
            scene.spheres.append(Sphere(c, float(r), albedo, _wave(rng, z, cfg), rng.uniform(0, 2 * np.pi)))
        else:
            ext = np.array([rng.uniform(0.2, 0.7) * half_w, rng.uniform(0.2, 0.7) * half_h])
            corner = np.array([rng.uniform(-half_w, half_w - ext[0]), rng.uniform(-half_h, half_h - ext[1])])
            scene.rects.append(Rect(corner, ext, float(z), albedo, _wave(rng, z, cfg), rng.uniform(0, 2 * np.pi)))
    return scene


def render_view(scene: Scene, pose: Pose, intrinsics: Intrinsics, height: int, width: int):
    """Ray-cast the scene from the camera at ``pose`` (world -> camera).

    Returns (rgb (H, W, 3) in [0, 1], depth (H, W) meters).
    """
    d_cam = pixel_rays(intrinsics, 1, height, width)[0].reshape(3, -1).T
    R, t = pose.rotation, pose.translation
    dirs = d_cam @ R                     # rows are R^T d
    origin = -R.T @ t
    n = dirs.shape[0]
    depth = (scene.background_depth - origin[2]) / dirs[:, 2]
    normal = np.tile([0.0, 0.0, -1.0], (n, 1))
    albedo = np.tile(scene.background_albedo, (n, 1))
    wave = np.tile(scene.background_wave, (n, 1))
    phase = np.full(n, scene.background_phase)

    for rect in scene.rects:
        lam = (rect.depth - origin[2]) / dirs[:, 2]
        hit = origin[None, :2] + lam[:, None] * dirs[:, :2]
        inside = ((hit >= rect.corner) & (hit <= rect.corner + rect.extents)).all(axis=1) & (lam > 0)
        closer = inside & (lam < depth)
        depth[closer] = lam[closer]
        normal[closer] = [0.0, 0.0, -1.0]
        albedo[closer], wave[closer], phase[closer] = rect.albedo, rect.wave, rect.phase

    for sph in scene.spheres:
        oc = origin - sph.center
        a = (dirs * dirs).sum(axis=1)
        b = 2 * dirs @ oc
        c = oc @ oc - sph.radius ** 2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        lam = np.full(n, np.inf)
        lam[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2 * a[hit])
        closer = hit & (lam > 0) & (lam < depth)
        depth[closer] = lam[closer]
        p = origin + lam[closer, None] * dirs[closer]
        normal[closer] = (p - sph.center) / sph.radius
        albedo[closer], wave[closer], phase[closer] = sph.albedo, sph.wave, sph.phase

    points = origin + depth[:, None] * dirs
    tex = 0.6 + 0.4 * np.sin((points * wave).sum(axis=1) + phase) * np.cos(
        (points * wave[:, [1, 2, 0]]).sum(axis=1) * 0.7 - phase)
    shade = 0.3 + 0.7 * np.clip(normal @ scene.light_dir, 0.0, None)
    rgb = np.clip(albedo * (tex * shade)[:, None], 0.0, 1.0)
    return rgb.reshape(height, width, 3), depth.reshape(height, width)


def sample_sparse(dense_depth: np.ndarray, n_points: int, seed) -> np.ndarray:
    """Keep ``n_points`` uniformly chosen pixels (without replacement); zero elsewhere."""
    h, w = dense_depth.shape
    if not 0 <= n_points <= h * w:
        raise ValueError(f"n_points must be in [0, {h * w}], got {n_points}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(h * w, size=n_points, replace=False)
    sparse = np.zeros(h * w, dtype=dense_depth.dtype)
    sparse[idx] = dense_depth.reshape(-1)[idx]
    return sparse.reshape(h, w)


def random_pose(rng, cfg: SynthConfig) -> Pose:
    axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0, cfg.max_rotation_deg))
    t = rng.normal(size=3)
    t = t / np.linalg.norm(t) * rng.uniform(0, cfg.max_translation)
    return Pose(rotation_from_axis_angle(axis, angle), t)


def make_sample(seed, cfg: SynthConfig | None = None) -> tuple[Sample, Scene]:
    """Render a two-view sample; ``seed`` may be an int or a sequence of ints."""
    cfg = cfg or SynthConfig()
    scene_seed, pose_seed, sparse_seed = np.random.SeedSequence(seed).spawn(3)
    scene = generate_scene(scene_seed, cfg)
    K = cfg.intrinsics()
    pose = random_pose(np.random.default_rng(pose_seed), cfg)
    rgb0, d0 = render_view(scene, Pose.identity(), K, cfg.height, cfg.width)
    rgb1, _ = render_view(scene, pose, K, cfg.height, cfg.width)
    sparse = sample_sparse(d0, cfg.n_points, sparse_seed)
    return Sample(rgb0.astype(np.float32), rgb1.astype(np.float32), sparse.astype(np.float32),
                  d0.astype(np.float32), pose, K), scene


def visibility_mask(sample: Sample, depth_t1: np.ndarray, rel_tol: float = 0.02) -> np.ndarray:
    """True where a target pixel's 3D point is the visible surface in the second view."""
    H, W = sample.gt_depth.shape
    K = sample.intrinsics
    pts = pixel_rays(K, 1, H, W)[0].reshape(3, -1) * sample.gt_depth.reshape(1, -1)
    q = sample.pose_t_to_t1.rotation @ pts + sample.pose_t_to_t1.translation[:, None]
    z = q[2]
    u = K.fx * q[0] / z + K.cx
    v = K.fy * q[1] / z + K.cy
    inside = (z > 0) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    ok = np.zeros(H * W, dtype=bool)
    ui, vi = np.floor(u[inside]).astype(int), np.floor(v[inside]).astype(int)
    # all four bilinear neighbours must agree with the projected depth
    agree = np.ones(ui.size, dtype=bool)
    for dv in (0, 1):
        for du in (0, 1):
            d1 = depth_t1[np.minimum(vi + dv, H - 1), np.minimum(ui + du, W - 1)]
            agree &= np.abs(d1 - z[inside]) <= rel_tol * z[inside]
    ok[np.flatnonzero(inside)[agree]] = True
    return ok.reshape(H, W)


# -- dataset directories --------------------------------------------------------

def _split_seed(seed: int, split: str, index: int) -> list:
    return [seed, {"train": 0, "val": 1}.get(split, 2), index]


def write_sample(directory, index: int, sample: Sample) -> None:
    d = Path(directory)
    stem = f"{index:05d}"
    write_ppm(d / f"{stem}_rgb0.ppm", sample.rgb_t)
    write_ppm(d / f"{stem}_rgb1.ppm", sample.rgb_t1)
    write_pfm(d / f"{stem}_sparse.pfm", sample.sparse)
    write_pfm(d / f"{stem}_gt.pfm", sample.gt_depth)
    K = sample.intrinsics
    pose = " ".join(repr(float(x)) for x in sample.pose_t_to_t1.as_matrix().reshape(-1))
    fx, fy, cx, cy = (repr(float(v)) for v in (K.fx, K.fy, K.cx, K.cy))
    meta = f"fx={fx}\nfy={fy}\ncx={cx}\ncy={cy}\npose={pose}\n"
    (d / f"{stem}_meta.txt").write_text(meta)


def read_meta(path) -> tuple[Intrinsics, Pose]:
    kv = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    try:
        K = Intrinsics(float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]))
        pose = Pose.from_matrix([float(x) for x in kv["pose"].split()])
    except (KeyError, ValueError) as e:
        raise ValueError(f"{path}: malformed meta file ({e})") from None
    return K, pose


def read_sample(directory, index: int) -> Sample:
    d = Path(directory)
    stem = f"{index:05d}"
    K, pose = read_meta(d / f"{stem}_meta.txt")
    return Sample(read_ppm(d / f"{stem}_rgb0.ppm"), read_ppm(d / f"{stem}_rgb1.ppm"),
                  read_pfm(d / f"{stem}_sparse.pfm"), read_pfm(d / f"{stem}_gt.pfm"), pose, K)


def list_indices(directory) -> list[int]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset split directory not found: {d}")
    return sorted(int(p.name.split("_")[0]) for p in d.glob("*_meta.txt"))


def load_split(root, split: str) -> list[Sample]:
    directory = Path(root) / split
    return [read_sample(directory, i) for i in list_indices(directory)]


def generate_dataset(root, n_train: int, n_val: int, seed: int = 0, cfg: SynthConfig | None = None) -> None:
    cfg = cfg or SynthConfig()
    for split, count in (("train", n_train), ("val", n_val)):
        directory = Path(root) / split
        os.makedirs(directory, exist_ok=True)
        for i in range(count):
            sample, _ = make_sample(_split_seed(seed, split, i), cfg)
            write_sample(directory, i, sample)
