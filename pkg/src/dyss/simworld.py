"""Synthetic multi-camera world.

Objects move at constant velocity over ``T`` frames spaced 0.5 s apart; the
last frame is "now" and the world frame is the ego frame at that instant.
Six pinhole cameras in a ring observe the scene; instead of images each
camera yields a low-resolution feature map where every visible object
leaves a Gaussian blob along a fixed class-signature direction in channel
space (plus, optionally, a smooth code of its depth), on top of white noise.

Box rows are ``(x, y, z, w, l, h, theta, vx, vy)`` with ``z`` the box bottom.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels.checkpoint import DTYPE, ManifestError, dump_json, pack, unpack

CLASSES = ("car", "pedestrian", "truck", "cyclist")
# mean (w, l, h) per class in meters; sizes are drawn with 10% relative spread
CLASS_SIZES = np.array([[1.9, 4.5, 1.6],
                        [0.7, 0.7, 1.75],
                        [2.5, 8.0, 3.2],
                        [0.7, 1.8, 1.5]])
SIZE_REL_STD = 0.1
FRAME_DT = 0.5
BOX_DIM = 9
DATASET_FORMAT = "dyss-dataset/1"


@dataclass
class WorldConfig:
    n_objects: int = 6
    frames: int = 8
    bounds: float = 30.0          # objects start with |x|, |y| <= bounds at the current frame
    min_range: float = 4.0        # keep-out radius around the ego
    min_separation: float = 4.0   # between object centers at the current frame
    max_speed: float = 5.0        # per-axis velocity ~ U[-max_speed, max_speed]
    moving_ego: bool = False
    ego_speed: float = 5.0        # m/s along ego +x when moving_ego
    n_cameras: int = 6
    hfov_deg: float = 70.0
    image_width: int = 128
    image_height: int = 64
    mount_height: float = 1.5
    stride: int = 8
    channels: int = 32
    blob_sigma_px: float = 8.0
    blob_amplitude: float = 1.0
    noise_std: float = 0.05
    depth_cue: bool = True
    depth_channels: int = 8
    depth_max: float = 48.0
    signature_seed: int = 7

    @property
    def map_size(self) -> tuple[int, int]:
        return self.image_height // self.stride, self.image_width // self.stride


@dataclass
class CameraModel:
    K: np.ndarray           # 3x3 intrinsics
    extrinsic: np.ndarray   # 4x4 camera <- ego
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.K[0, 0]}, {self.K[1, 1]}")
        R = self.extrinsic[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or not np.allclose(self.extrinsic[3], [0, 0, 0, 1]):
            raise ValueError("extrinsic is not a rigid transform")


@dataclass
class Scene:
    seed: int
    index: int
    classes: np.ndarray        # [n] int
    boxes: np.ndarray          # [T, n, 9]
    ego_poses: np.ndarray      # [T, 4, 4] world <- ego
    rig: list = field(default_factory=list)
    maps: np.ndarray | None = None   # [T, cameras, C, H', W']

    @property
    def frames(self) -> int:
        return self.boxes.shape[0]

    @property
    def n_objects(self) -> int:
        return self.boxes.shape[1]

    def gt_boxes(self) -> np.ndarray:
        """Boxes at the current (last) frame."""
        return self.boxes[-1]


# ---------------------------------------------------------------- geometry

def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rigid(R: np.ndarray, t) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    return rigid(R.T, -R.T @ t)


def ring_rig(n_cameras: int = 6, hfov_deg: float = 70.0, width: int = 128, height: int = 64,
             mount_height: float = 1.5) -> list[CameraModel]:
    """Cameras evenly spaced in yaw (x right, y down, z forward)."""
    f = (width / 2.0) / np.tan(np.deg2rad(hfov_deg) / 2.0)
    K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    rig = []
    for i in range(n_cameras):
        yaw = 2.0 * np.pi * i / n_cameras
        forward = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        R_ego_cam = np.stack([right, down, forward], axis=1)
        ego_from_cam = rigid(R_ego_cam, [0.0, 0.0, mount_height])
        rig.append(CameraModel(K.copy(), invert_rigid(ego_from_cam), width, height))
    return rig


def frame_times(frames: int) -> np.ndarray:
    """Seconds relative to the current frame: ``-(T-1)*dt, ..., 0``."""
    return -(frames - 1 - np.arange(frames)) * FRAME_DT


def ego_poses(cfg: WorldConfig) -> np.ndarray:
    poses = np.repeat(np.eye(4)[None], cfg.frames, axis=0)
    if cfg.moving_ego:
        poses[:, 0, 3] = cfg.ego_speed * frame_times(cfg.frames)
    return poses


def project_points(points_world: np.ndarray, camera: CameraModel, ego_pose: np.ndarray):
    """World points ``[..., 3]`` -> pixels ``[..., 2]``, depth, validity (numpy only)."""
    cam_from_world = camera.extrinsic @ invert_rigid(ego_pose)
    p = points_world @ cam_from_world[:3, :3].T + cam_from_world[:3, 3]
    depth = p[..., 2]
    safe = np.where(depth > 0.1, depth, 1.0)
    u = camera.K[0, 0] * p[..., 0] / safe + camera.K[0, 2]
    v = camera.K[1, 1] * p[..., 1] / safe + camera.K[1, 2]
    valid = (depth > 0.1) & (u >= 0) & (u <= camera.width) & (v >= 0) & (v <= camera.height)
    return np.stack([u, v], axis=-1), depth, valid


# ---------------------------------------------------------------- generation

def _rng(seed: int, index: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, *stream])


def class_signatures(cfg: WorldConfig) -> np.ndarray:
    """Fixed unit vectors ``[K, C]`` in channel space, one per class."""
    width = cfg.channels - (cfg.depth_channels if cfg.depth_cue else 0)
    if width < 1:
        raise ValueError("not enough channels for class signatures")
    sig = np.random.default_rng(cfg.signature_seed).standard_normal((len(CLASSES), width))
    sig /= np.linalg.norm(sig, axis=1, keepdims=True)
    out = np.zeros((len(CLASSES), cfg.channels))
    out[:, :width] = sig
    return out


def depth_code(depth: float, cfg: WorldConfig) -> np.ndarray:
    """Radial-basis code of depth on the trailing ``depth_channels`` channels."""
    out = np.zeros(cfg.channels)
    if not cfg.depth_cue:
        return out
    centers = np.linspace(0.0, cfg.depth_max, cfg.depth_channels)
    width = centers[1] - centers[0] if cfg.depth_channels > 1 else cfg.depth_max
    out[cfg.channels - cfg.depth_channels:] = 0.5 * np.exp(-0.5 * ((depth - centers) / width) ** 2)
    return out


def gen_scene(seed: int, cfg: WorldConfig | None = None, index: int = 0, n_objects: int | None = None,
              render: bool = True) -> Scene:
    """Sample objects and (optionally) render all feature maps; pure in (seed, index, cfg)."""
    cfg = cfg or WorldConfig()
    n = cfg.n_objects if n_objects is None else n_objects
    if n < 0:
        raise ValueError("n_objects must be >= 0")
    rng = _rng(seed, index, 0)
    centers: list[np.ndarray] = []
    attempts = 0
    while len(centers) < n:
        attempts += 1
        if attempts > 10000:
            raise RuntimeError(f"could not place {n} objects within bounds {cfg.bounds}")
        c = rng.uniform(-cfg.bounds, cfg.bounds, 2)
        if np.hypot(*c) < cfg.min_range:
            continue
        if any(np.hypot(*(c - o)) < cfg.min_separation for o in centers):
            continue
        centers.append(c)
    classes = rng.integers(0, len(CLASSES), n)
    sizes = CLASS_SIZES[classes] * (1.0 + SIZE_REL_STD * rng.standard_normal((n, 3)))
    sizes = np.maximum(sizes, 0.2)
    vel = rng.uniform(-cfg.max_speed, cfg.max_speed, (n, 2))
    theta = np.arctan2(vel[:, 1], vel[:, 0])
    boxes = np.zeros((cfg.frames, n, BOX_DIM))
    # step back from the current frame so center_t == center_{t+1} - v * dt holds bitwise
    boxes[-1, :, 0:2] = np.asarray(centers).reshape(n, 2)
    for t in range(cfg.frames - 2, -1, -1):
        boxes[t, :, 0:2] = boxes[t + 1, :, 0:2] - vel * FRAME_DT
    for t in range(cfg.frames):
        boxes[t, :, 3:6] = sizes
        boxes[t, :, 6] = theta
        boxes[t, :, 7:9] = vel
    rig = ring_rig(cfg.n_cameras, cfg.hfov_deg, cfg.image_width, cfg.image_height, cfg.mount_height)
    scene = Scene(seed, index, classes.astype(np.int64), boxes, ego_poses(cfg), rig)
    if render:
        scene.maps = render_all(scene, cfg)
    return scene


def render_features(scene: Scene, t: int, camera: int, cfg: WorldConfig | None = None) -> np.ndarray:
    """Feature map ``[C, H', W']`` of camera ``camera`` at frame ``t``."""
    cfg = cfg or WorldConfig()
    Hm, Wm = cfg.map_size
    out = np.zeros((cfg.channels, Hm, Wm))
    cam = scene.rig[camera]
    sig = class_signatures(cfg)
    sigma = cfg.blob_sigma_px / cfg.stride
    rows, cols = np.arange(Hm)[:, None], np.arange(Wm)[None, :]
    for i in range(scene.n_objects):
        b = scene.boxes[t, i]
        center = np.array([b[0], b[1], b[2] + 0.5 * b[5]])
        pix, depth, valid = project_points(center, cam, scene.ego_poses[t])
        if not valid:
            continue
        mu = pix / cfg.stride
        d2 = (cols - mu[0]) ** 2 + (rows - mu[1]) ** 2
        blob = np.where(d2 <= (3.0 * sigma) ** 2, np.exp(-0.5 * d2 / sigma ** 2), 0.0)
        vec = sig[scene.classes[i]] + depth_code(float(depth), cfg)
        out += cfg.blob_amplitude * vec[:, None, None] * blob[None]
    if cfg.noise_std > 0:
        out += cfg.noise_std * _rng(scene.seed, scene.index, 1, t, camera).standard_normal(out.shape)
    return out


def render_all(scene: Scene, cfg: WorldConfig | None = None) -> np.ndarray:
    cfg = cfg or WorldConfig()
    return np.stack([np.stack([render_features(scene, t, k, cfg) for k in range(len(scene.rig))])
                     for t in range(scene.frames)])


# ---------------------------------------------------------------- dataset files

def config_to_dict(cfg: WorldConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> WorldConfig:
    known = {f.name for f in dataclasses.fields(WorldConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"unknown world config keys: {unknown}")
    return WorldConfig(**d)


def _scene_arrays(scene: Scene) -> dict[str, np.ndarray]:
    arrays = {
        "classes": scene.classes.astype(DTYPE),
        "boxes": scene.boxes,
        "ego_poses": scene.ego_poses,
        "intrinsics": np.stack([c.K for c in scene.rig]) if scene.rig else np.zeros((0, 3, 3)),
        "extrinsics": np.stack([c.extrinsic for c in scene.rig]) if scene.rig else np.zeros((0, 4, 4)),
    }
    if scene.maps is not None:
        arrays["maps"] = scene.maps
    return arrays


def save_dataset(directory, scenes: list[Scene], cfg: WorldConfig, seed: int) -> Path:
    """One JSON manifest plus one flat little-endian float64 blob per scene."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for scene in scenes:
        entries, blob = pack(_scene_arrays(scene))
        name = f"scene_{scene.index:05d}.bin"
        (directory / name).write_bytes(blob)
        records.append({"index": scene.index, "seed": scene.seed, "blob": name, "nbytes": len(blob),
                        "entries": entries,
                        "cameras": [{"width": c.width, "height": c.height} for c in scene.rig]})
    manifest = {"format": DATASET_FORMAT, "seed": seed, "config": config_to_dict(cfg), "scenes": records}
    path = directory / "manifest.json"
    dump_json(manifest, path)
    return path


def load_dataset(directory) -> tuple[list[Scene], WorldConfig, int]:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("format", "seed", "config", "scenes"):
        if key not in manifest:
            raise ManifestError(f"{path}: missing field '{key}'")
    if manifest["format"] != DATASET_FORMAT:
        raise ManifestError(f"{path}: field 'format' is {manifest['format']!r}, expected {DATASET_FORMAT!r}")
    cfg = config_from_dict(manifest["config"])
    scenes = []
    for i, rec in enumerate(manifest["scenes"]):
        for key in ("index", "seed", "blob", "nbytes", "entries", "cameras"):
            if key not in rec:
                raise ManifestError(f"{path}: scene {i} is missing field '{key}'")
        blob = (directory / rec["blob"]).read_bytes()
        if len(blob) != rec["nbytes"]:
            raise ManifestError(f"{path}: size mismatch for {rec['blob']}: field 'nbytes' says "
                                f"{rec['nbytes']}, file has {len(blob)} bytes")
        arrays = unpack(rec["entries"], blob, f"{path}:{rec['blob']}")
        for key in ("classes", "boxes", "ego_poses", "intrinsics", "extrinsics"):
            if key not in arrays:
                raise ManifestError(f"{path}: scene {i} has no array '{key}'")
        rig = [CameraModel(K, E, cam["width"], cam["height"])
               for K, E, cam in zip(arrays["intrinsics"], arrays["extrinsics"], rec["cameras"])]
        scenes.append(Scene(int(rec["seed"]), int(rec["index"]), arrays["classes"].astype(np.int64),
                            arrays["boxes"], arrays["ego_poses"], rig, arrays.get("maps")))
    return scenes, cfg, int(manifest["seed"])


def generate_dataset(seed: int, n_scenes: int, cfg: WorldConfig | None = None, start: int = 0) -> list[Scene]:
    cfg = cfg or WorldConfig()
    return [gen_scene(seed, cfg, index=start + i) for i in range(n_scenes)]
