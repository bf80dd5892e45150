"""Render -> enhance depth -> invert -> aligned denoise -> refit, plus image metrics."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .cimln import enhance_depth, load_checkpoint
from .diffusion import Condition, DiffusionConfig, LatentState, parse_edit, run_edit_loop, toy_predictor
from .numerics import DTensor, ShapeError, atomic_write_bytes, save_rten
from .splat import load_cameras, load_scene, refit_scene, render, save_scene
from .wavelet import AttentionParams

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
REPORT_SCHEMA = 1


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, DTensor) else x, dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    av, bv = _arr(a), _arr(b)
    if av.shape != bv.shape:
        raise ShapeError(f"images differ in shape: {av.shape} vs {bv.shape}")
    return av, bv


# -- metrics ---------------------------------------------------------------

def compute_psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB, capped at 100 dB for (near-)identical images."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    av, bv = _pair(a, b)
    mse = float(np.mean((av - bv) ** 2))
    if mse < peak * peak * 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def compute_rmse(a, b) -> float:
    av, bv = _pair(a, b)
    return float(np.sqrt(np.mean((av - bv) ** 2)))


def cross_view_consistency(views: Sequence) -> float:
    """L2 norm of the across-view standard deviation of per-view mean colours."""
    if len(views) < 2:
        raise ValueError("cross_view_consistency needs at least two views")
    arrs = [_arr(v) for v in views]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ShapeError("views differ in shape")
    means = np.stack([a.reshape(a.shape[0], -1).mean(axis=1) for a in arrs])
    # centring on one view is exact for identical views and leaves the std unchanged otherwise
    return float(np.linalg.norm((means - means[0]).std(axis=0)))


def mean_luminance(img) -> float:
    a = _arr(img)
    return float(np.mean(0.2126 * a[0] + 0.7152 * a[1] + 0.0722 * a[2]))


# -- image files -----------------------------------------------------------

def to_uint8(img) -> np.ndarray:
    """3 x H x W floats -> H x W x 3 bytes: clamp to [0, 1], scale by 255, round half up."""
    a = _arr(img)
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ShapeError(f"expected 1 or 3 x H x W image, got {a.shape}")
    q = np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return np.moveaxis(q, 0, -1) if q.shape[0] == 3 else q[0]


def save_png(path, img) -> None:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_png(path) -> DTensor:
    with Image.open(path) as im:
        a = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return DTensor(np.moveaxis(a, -1, 0))


def load_image(path) -> DTensor:
    """PNG or .rten image as a float tensor."""
    from .numerics import load_rten

    return load_rten(path) if str(path).endswith(".rten") else load_png(path)


# -- job / report ----------------------------------------------------------

class PipelineError(RuntimeError):
    """An error tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@dataclass
class EditJob:
    scene_path: str
    cameras_path: str
    edit: str = "identity"
    reference_ids: list[int] = field(default_factory=lambda: [0])
    lam: float = 0.5
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    cimln_checkpoint: str | None = None
    out_dir: str = "out"
    seed: int = 0
    refit_steps: int = 300
    refit_lr: float = 0.02

    def validate(self, n_views: int | None = None) -> None:
        for p in (self.scene_path, self.cameras_path):
            if not Path(p).is_file():
                raise FileNotFoundError(f"input file {p} does not exist")
        if self.cimln_checkpoint is not None and not Path(self.cimln_checkpoint).is_dir():
            raise FileNotFoundError(f"checkpoint directory {self.cimln_checkpoint} does not exist")
        parse_edit(self.edit)
        if not self.reference_ids:
            raise ValueError("at least one reference view is required")
        if n_views is not None and any(not 0 <= r < n_views for r in self.reference_ids):
            raise ValueError(f"reference ids {self.reference_ids} out of range for {n_views} cameras")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.refit_steps < 0:
            raise ValueError("refit_steps must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> EditJob:
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown job fields: {sorted(unknown)}")
        if isinstance(obj.get("diffusion"), dict):
            obj["diffusion"] = DiffusionConfig(**obj["diffusion"])
        return cls(**obj)

    @classmethod
    def load(cls, path) -> EditJob:
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class MetricReport:
    psnr_db: float
    rmse: float
    cross_view_std: float
    per_view: list[dict] = field(default_factory=list)
    cross_view_std_original: float | None = None

    def to_json(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}


@dataclass
class EditResult:
    scene: object
    report: MetricReport
    images: list[DTensor]
    edited_targets: list[DTensor]


class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, str(exc) or exc_type.__name__) from exc
        return False


def edit_scene(job: EditJob) -> EditResult:
    """Run the full edit and write every intermediate into ``job.out_dir``."""
    out = Path(job.out_dir)
    with _Stage("load"):
        scene = load_scene(job.scene_path)
        cams = load_cameras(job.cameras_path)
        if not cams:
            raise ValueError("camera list is empty")
        job.validate(len(cams))
        kind, strength = parse_edit(job.edit)
        sched = job.diffusion.schedule()
        out.mkdir(parents=True, exist_ok=True)

    with _Stage("render"):
        renders = [render(scene, cam) for cam in cams]
        for i, r in enumerate(renders):
            save_png(out / f"original_{i:03}.png", r["rgb"])
            save_rten(out / f"depth_raw_{i:03}.rten", r["depth"])

    with _Stage("enhance"):
        if job.cimln_checkpoint:
            model = load_checkpoint(job.cimln_checkpoint)
            depths = [enhance_depth(model, r["depth"], r["rgb"]) for r in renders]
        else:
            depths = [r["depth"] for r in renders]
        for i, d in enumerate(depths):
            save_rten(out / f"depth_{i:03}.rten", d)

    with _Stage("edit"):
        views = LatentState([r["rgb"] for r in renders])
        conds = [Condition(d, kind) for d in depths]
        predictor = toy_predictor(kind, strength, sched)
        record: dict = {}
        edited = run_edit_loop(views, job.reference_ids, predictor, conds, sched, job.lam,
                               AttentionParams.identity(3), record=record)
        targets = [DTensor(np.clip(z.data, 0.0, 1.0)) for z in edited.latents]
        for i, (zt, tgt) in enumerate(zip(record[sched.T], targets)):
            save_rten(out / f"latent_T_{i:03}.rten", zt)
            save_png(out / f"edited_{i:03}.png", tgt)

    with _Stage("refit"):
        hist: list[float] = []
        new_scene = refit_scene(scene, list(zip(cams, targets)), job.refit_steps, job.refit_lr, history=hist)
        save_scene(out / "scene_edited.json", new_scene)

    with _Stage("rerender"):
        images = [render(new_scene, cam)["rgb"] for cam in cams]
        for i, img in enumerate(images):
            save_png(out / f"view_{i:03}.png", img)

    with _Stage("metrics"):
        per_view = []
        for i, (r, tgt, img) in enumerate(zip(renders, targets, images)):
            per_view.append({
                "view": i,
                "psnr_vs_original_db": compute_psnr(img, r["rgb"]),
                "psnr_vs_edited_db": compute_psnr(img, tgt),
                "rmse_vs_original": compute_rmse(img, r["rgb"]),
                "luminance_original": mean_luminance(r["rgb"]),
                "luminance_edited": mean_luminance(img),
            })
        report = MetricReport(
            psnr_db=float(np.mean([v["psnr_vs_original_db"] for v in per_view])),
            rmse=compute_rmse(np.stack([_arr(i) for i in images]), np.stack([_arr(r["rgb"]) for r in renders])),
            cross_view_std=cross_view_consistency(images) if len(images) > 1 else 0.0,
            per_view=per_view,
            cross_view_std_original=cross_view_consistency([r["rgb"] for r in renders]) if len(renders) > 1 else 0.0,
        )
        payload = {**report.to_json(), "job": job.to_json(), "refit_loss": {"initial": hist[0], "final": min(hist)}}
        atomic_write_bytes(out / "report.json", (json.dumps(payload, indent=2) + "\n").encode())
    return EditResult(new_scene, report, images, targets)
