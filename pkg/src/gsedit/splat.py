"""Gaussian scenes, EWA projection and front-to-back alpha compositing of RGB and depth."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics import DTensor, AdamState, adam_step
from .numerics import ops
from .numerics.rten import atomic_write_bytes
from .numerics.tensor import make_node

NEAR = 0.01
COV2D_REG = 0.3
ALPHA_MAX = 0.999
T_MIN = 1e-4
_PIXEL_CHUNK = 4_000_000  # max gaussians x pixels per compositing block


# -- scene and camera -----------------------------------------------------

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions in (w, x, y, z) order -> (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


@dataclass
class GaussianScene:
    """Struct-of-arrays Gaussian mixture: N opacities, means, scales, rotations, colours."""

    opacity: np.ndarray  # (N,)
    mean: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 4) unit quaternions, w first
    color: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(-1)
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1, 3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(-1, 4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        n = len(self.opacity)
        if not all(len(a) == n for a in (self.mean, self.scale, self.rotation, self.color)):
            raise ValueError("per-gaussian arrays disagree in length")

    @property
    def count(self) -> int:
        return len(self.opacity)

    def __len__(self) -> int:
        return self.count

    @classmethod
    def empty(cls) -> GaussianScene:
        return cls(np.zeros(0), np.zeros((0, 3)), np.ones((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)))

    def validate(self, tol: float = 1e-6) -> None:
        if np.any((self.opacity < 0) | (self.opacity > 1)):
            raise ValueError("opacity outside [0, 1]")
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be positive")
        if np.any(np.abs(np.linalg.norm(self.rotation, axis=1) - 1.0) > tol):
            raise ValueError("rotation quaternions must have unit norm")
        if np.any((self.color < 0) | (self.color > 1)):
            raise ValueError("color outside [0, 1]")

    def covariance(self) -> np.ndarray:
        r = quat_to_rotmat(self.rotation)
        return r @ (self.scale[:, :, None] ** 2 * np.swapaxes(r, 1, 2))

    def permuted(self, order: Sequence[int]) -> GaussianScene:
        order = np.asarray(order)
        return GaussianScene(
            self.opacity[order], self.mean[order], self.scale[order], self.rotation[order], self.color[order]
        )

    def to_json(self) -> dict:
        return {
            "gaussians": [
                {
                    "opacity": float(self.opacity[i]),
                    "mean": self.mean[i].tolist(),
                    "scale": self.scale[i].tolist(),
                    "rotation": self.rotation[i].tolist(),
                    "color": self.color[i].tolist(),
                }
                for i in range(self.count)
            ]
        }

    @classmethod
    def from_json(cls, obj: dict) -> GaussianScene:
        gs = obj["gaussians"]
        if not gs:
            return cls.empty()
        return cls(
            [g["opacity"] for g in gs],
            [g["mean"] for g in gs],
            [g["scale"] for g in gs],
            [g["rotation"] for g in gs],
            [g["color"] for g in gs],
        )


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(self.width), int(self.height)

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        r = self.world_to_camera[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-5:
            raise ValueError("world_to_camera rotation is not orthonormal")

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "world_to_camera": self.world_to_camera.reshape(-1).tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> Camera:
        return cls(obj["fx"], obj["fy"], obj["cx"], obj["cy"], obj["width"], obj["height"],
                   np.asarray(obj["world_to_camera"], dtype=np.float64).reshape(4, 4))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera transform for a camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    f = target - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:
        r = np.cross(f, np.array([0.0, 1.0, 0.0]))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    m = np.eye(4)
    m[:3, :3] = np.stack([r, d, f])
    m[:3, 3] = -m[:3, :3] @ eye
    return m


def save_scene(path, scene: GaussianScene) -> None:
    atomic_write_bytes(path, json.dumps(scene.to_json()).encode())


def load_scene(path) -> GaussianScene:
    return GaussianScene.from_json(json.loads(Path(path).read_text()))


def save_cameras(path, cams: Sequence[Camera]) -> None:
    atomic_write_bytes(path, json.dumps([c.to_json() for c in cams]).encode())


def load_cameras(path) -> list[Camera]:
    obj = json.loads(Path(path).read_text())
    if isinstance(obj, dict):
        obj = obj.get("cameras", [obj])
    return [Camera.from_json(o) for o in obj]


# -- projection -----------------------------------------------------------

@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


@dataclass
class ProjectedGaussians:
    """Screen-space Gaussians of one view, sorted front to back.

    ``index`` maps each entry back to its row in the source scene.
    """

    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray

    def __len__(self) -> int:
        return len(self.index)

    def __iter__(self) -> Iterator[ProjectedGaussian]:
        for i in range(len(self)):
            yield ProjectedGaussian(self.mean2d[i], self.cov2d[i], float(self.depth[i]),
                                    float(self.opacity[i]), self.color[i])


def _canonical_order(scene: GaussianScene) -> np.ndarray:
    keys = np.concatenate(
        [scene.mean, scene.scale, scene.rotation, scene.color, scene.opacity[:, None]], axis=1
    )
    return np.lexsort(keys.T[::-1])


def project(scene: GaussianScene, cam: Camera) -> ProjectedGaussians:
    """EWA projection; drops Gaussians at or behind the near plane and sorts by view depth."""
    cam.validate()
    # fixed canonical input order keeps rendering independent of how the scene is shuffled
    order = _canonical_order(scene) if scene.count else np.zeros(0, dtype=int)
    w = cam.world_to_camera[:3, :3]
    pts = scene.mean[order] @ w.T + cam.world_to_camera[:3, 3]
    z = pts[:, 2]
    keep = z > NEAR
    order, pts, z = order[keep], pts[keep], z[keep]
    x, y = pts[:, 0], pts[:, 1]
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    jac = np.zeros((len(z), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    cov3 = scene.permuted(order).covariance() if len(order) else np.zeros((0, 3, 3))
    t = jac @ w
    cov2d = t @ cov3 @ np.swapaxes(t, 1, 2) + COV2D_REG * np.eye(2)
    by_depth = np.argsort(z, kind="stable")
    return ProjectedGaussians(
        index=order[by_depth],
        mean2d=mean2d[by_depth],
        cov2d=cov2d[by_depth],
        depth=z[by_depth],
        opacity=scene.opacity[order][by_depth],
        color=scene.color[order][by_depth],
    )


def gaussian_weights(proj: ProjectedGaussians, width: int, height: int,
                     pixels: slice | None = None) -> np.ndarray:
    """exp(-1/2 d^T cov2d^-1 d) for every (gaussian, pixel); pixel centres sit on integer coordinates."""
    ys, xs = np.divmod(np.arange(width * height)[pixels if pixels is not None else slice(None)], width)
    if len(proj) == 0:
        return np.zeros((0, len(xs)))
    a, b, c = proj.cov2d[:, 0, 0], proj.cov2d[:, 0, 1], proj.cov2d[:, 1, 1]
    det = a * c - b * b
    ia, ib, ic = c / det, -b / det, a / det
    dx = xs[None, :] - proj.mean2d[:, 0:1]
    dy = ys[None, :] - proj.mean2d[:, 1:2]
    power = -0.5 * (ia[:, None] * dx * dx + 2 * ib[:, None] * dx * dy + ic[:, None] * dy * dy)
    return np.exp(np.minimum(power, 0.0))


@dataclass
class _Composite:
    weights: np.ndarray  # alpha_i * T_i, zero past the early-out
    alpha: np.ndarray
    trans: np.ndarray
    mask: np.ndarray
    final_t: np.ndarray


def _composite(gw: np.ndarray, opacity: np.ndarray, alpha_max: float) -> _Composite:
    raw = opacity[:, None] * gw
    alpha = np.minimum(raw, alpha_max)
    if len(alpha) == 0:
        p = gw.shape[1]
        e = np.zeros((0, p))
        return _Composite(e, e, e, e.astype(bool), np.ones(p))
    incl = np.cumprod(1.0 - alpha, axis=0)
    trans = np.vstack([np.ones((1, alpha.shape[1])), incl[:-1]])
    mask = trans >= T_MIN
    weights = np.where(mask, alpha * trans, 0.0)
    final_t = np.where(mask, incl, np.inf).min(axis=0)
    return _Composite(weights, alpha, trans, mask, final_t)


def _pixel_chunks(n: int, p: int) -> list[slice]:
    step = max(1, _PIXEL_CHUNK // max(n, 1))
    return [slice(s, min(s + step, p)) for s in range(0, p, step)]


def render(scene: GaussianScene, cam: Camera, alpha_max: float = ALPHA_MAX) -> dict[str, DTensor]:
    """Composite RGB, depth and coverage alpha for one view; background is black."""
    proj = project(scene, cam)
    h, w = cam.height, cam.width
    p = h * w
    rgb = np.zeros((3, p))
    depth = np.zeros(p)
    alpha = np.zeros(p)
    for sl in _pixel_chunks(len(proj), p):
        comp = _composite(gaussian_weights(proj, w, h, sl), proj.opacity, alpha_max)
        rgb[:, sl] = proj.color.T @ comp.weights
        depth[sl] = proj.depth @ comp.weights
        alpha[sl] = 1.0 - comp.final_t
    return {
        "rgb": DTensor(rgb.reshape(3, h, w)),
        "depth": DTensor(depth.reshape(1, h, w)),
        "alpha": DTensor(alpha.reshape(1, h, w)),
    }


class _ViewCache:
    """Frozen-geometry data of one view reused across refit steps."""

    def __init__(self, scene: GaussianScene, cam: Camera):
        self.cam = cam
        self.proj = project(scene, cam)
        self.gw = gaussian_weights(self.proj, cam.width, cam.height)


def render_colors_opacity(cache: _ViewCache, color: DTensor, opacity: DTensor,
                          alpha_max: float = ALPHA_MAX) -> DTensor:
    """Differentiable RGB render with respect to per-gaussian colour (N x 3) and opacity (N,)."""
    idx = cache.proj.index
    cv = color.data.astype(np.float64)[idx]
    ov = opacity.data.astype(np.float64)[idx]
    gw = cache.gw
    comp = _composite(gw, ov, alpha_max)
    h, w = cache.cam.height, cache.cam.width
    out = (cv.T @ comp.weights).reshape(3, h, w)
    n_total = color.shape[0]

    def bw(g):
        g = g.reshape(3, -1)
        gc = np.zeros((n_total, 3))
        go = np.zeros(n_total)
        if len(idx) == 0:
            return gc, go
        np.add.at(gc, idx, comp.weights @ g.T)
        q = cv @ g  # dL/dC projected on each gaussian's colour
        u = comp.weights * q
        later = np.cumsum(u[::-1], axis=0)[::-1] - u
        one_minus = 1.0 - comp.alpha
        tail = np.divide(later, one_minus, out=np.zeros_like(later), where=one_minus > 0)
        dalpha = np.where(comp.mask, comp.trans * q - tail, 0.0)
        unclamped = ov[:, None] * gw < alpha_max
        np.add.at(go, idx, (dalpha * np.where(unclamped, gw, 0.0)).sum(axis=1))
        return gc, go

    return make_node(out, (color, opacity), bw, "render_rgb")


# -- synthetic scenes -----------------------------------------------------

LAYOUTS = ("cluster", "shell", "boxes")


@dataclass
class SyntheticConfig:
    radius: float = 1.0
    n_views: int = 4
    width: int = 32
    height: int = 32
    orbit_distance: float = 3.0
    elevation_deg: float = 20.0
    min_coverage: float = 0.2


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def orbit_cameras(center, cfg: SyntheticConfig, phase: float = 0.0) -> list[Camera]:
    cams = []
    el = math.radians(cfg.elevation_deg)
    # scene radius projects to 0.8 of the half width
    focal = 0.4 * min(cfg.width, cfg.height) * cfg.orbit_distance / cfg.radius
    for k in range(cfg.n_views):
        az = phase + 2 * math.pi * k / cfg.n_views
        eye = np.asarray(center) + cfg.orbit_distance * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        cams.append(Camera(focal, focal, (cfg.width - 1) / 2, (cfg.height - 1) / 2,
                           cfg.width, cfg.height, look_at(eye, center)))
    return cams


def _layout_means(rng, n, layout, radius):
    if layout == "cluster":
        k = min(4, n)
        centers = rng.normal(size=(k, 3))
        centers *= 0.45 * radius / np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), 1e-9)
        member = rng.integers(0, k, n)
        pts = centers[member] + rng.normal(scale=0.25 * radius, size=(n, 3))
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        pts = np.where(norms > radius, pts * radius / norms, pts)
        base = 0.9 * radius * n ** (-1 / 3)
        return pts, base
    if layout == "shell":
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        base = 0.9 * radius * math.sqrt(4 * math.pi / n) / 2
        r = radius + rng.uniform(-0.5, 0.5, (n, 1)) * base
        return u * r, base
    if layout == "boxes":
        nb = min(3, n)
        lo = rng.uniform(-0.7, 0.1, (nb, 3)) * radius
        size = rng.uniform(0.35, 0.6, (nb, 3)) * radius
        which = rng.integers(0, nb, n)
        pts = lo[which] + rng.uniform(0, 1, (n, 3)) * size[which]
        # push each point onto its box's nearest face so boxes read as solid surfaces
        rel = (pts - lo[which]) / size[which]
        face_axis = np.argmin(np.minimum(rel, 1 - rel), axis=1)
        rows = np.arange(n)
        snap = np.where(rel[rows, face_axis] < 0.5, 0.0, 1.0)
        rel[rows, face_axis] = snap
        pts = lo[which] + rel * size[which]
        area = float(np.sum(2 * (size[:, 0] * size[:, 1] + size[:, 1] * size[:, 2] + size[:, 0] * size[:, 2])))
        base = 0.8 * math.sqrt(area / n)
        return pts, base
    raise ValueError(f"unknown layout {layout!r}; choose from {LAYOUTS}")


def coverage(scene: GaussianScene, cam: Camera, threshold: float = 0.5) -> float:
    return float((render(scene, cam)["alpha"].data > threshold).mean())


def make_synthetic_scene(seed: int, n: int, layout: str = "cluster",
                         cfg: SyntheticConfig | None = None) -> dict:
    """Deterministic random scene plus orbit cameras that all see at least ``min_coverage`` of it."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(seed)
    means, base = _layout_means(rng, n, layout, cfg.radius)
    scale = base * np.exp(rng.uniform(-0.3, 0.3, (n, 3)))
    if layout == "shell":
        # keep the construction bound: |mean| within radius +- 3 * max scale
        scale = np.minimum(scale, base * 1.35)
    rot = _random_quats(rng, n)
    phase = rng.uniform(0, 2 * math.pi, 3)
    freq = rng.uniform(1.5, 3.5, 3)
    color = 0.5 + 0.35 * np.sin(means * freq / cfg.radius * math.pi / 2 + phase) + rng.normal(0, 0.05, (n, 3))
    color = np.clip(color, 0.0, 1.0)
    opacity = rng.uniform(0.75, 1.0, n)
    center = means.mean(axis=0)
    cams = orbit_cameras(center, cfg, phase=float(rng.uniform(0, 2 * math.pi)))
    scene = GaussianScene(opacity, means, scale, rot, color)
    for _ in range(30):
        if min(coverage(scene, c) for c in cams) >= cfg.min_coverage:
            break
        scene = replace(scene, scale=scene.scale * 1.2)
    return {"scene": scene, "orbit_cameras": cams}


# -- refit ----------------------------------------------------------------

def refit_scene(
    scene: GaussianScene,
    edited_views: Sequence[tuple[Camera, DTensor | np.ndarray]],
    steps: int = 300,
    lr: float = 0.02,
    history: list[float] | None = None,
    tol: float = 1e-10,
) -> GaussianScene:
    """Fit colours and opacities (geometry frozen) to target images by Adam on mean squared error.

    Stops once the loss drops below ``tol``. Returns the lowest-loss scene seen,
    so the result never fits worse than the input.
    """
    if not edited_views:
        raise ValueError("refit_scene needs at least one view")
    caches = [_ViewCache(scene, cam) for cam, _ in edited_views]
    targets = [DTensor(np.asarray(t.data if isinstance(t, DTensor) else t, dtype=np.float32))
               for _, t in edited_views]
    color = DTensor(scene.color, requires_grad=True, dtype=np.float64)
    opacity = DTensor(scene.opacity, requires_grad=True, dtype=np.float64)
    state = AdamState()

    def loss_fn():
        total = None
        for cache, tgt in zip(caches, targets):
            d = render_colors_opacity(cache, color, opacity) - tgt
            term = ops.mean(d * d)
            total = term if total is None else total + term
        return total * (1.0 / len(caches))

    best = (math.inf, scene.color.copy(), scene.opacity.copy())
    for step in range(steps + 1):
        color.grad = opacity.grad = None
        loss = loss_fn()
        val = loss.item()
        if history is not None:
            history.append(val)
        if val < best[0]:
            best = (val, color.data.copy(), opacity.data.copy())
        if step == steps or val <= tol:
            break
        loss.backward()
        adam_step([color, opacity], lr=lr, state=state)
        color.data = np.clip(color.data, 0.0, 1.0)
        opacity.data = np.clip(opacity.data, 0.0, 1.0)
    return replace(scene, color=best[1], opacity=best[2])
