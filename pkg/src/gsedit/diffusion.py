"""Deterministic DDIM inversion / denoising with cross-view latent alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .numerics import DTensor, ShapeError
from .wavelet import AttentionParams, blend_attention, wca

EDIT_KINDS = ("identity", "hue_shift", "darken", "sharpen")


@dataclass
class DiffusionSchedule:
    """Cumulative signal levels alpha_bar[0..T] with alpha_bar[0] == 1."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 2:
            raise ValueError("alpha_bar needs at least two entries")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be non-increasing within (0, 1]")
        self.alpha_bar = ab

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear betas; alpha_bar_t is the running product of (1 - beta)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T)
    return DiffusionSchedule(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))


@dataclass
class DiffusionConfig:
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.steps, self.beta_start, self.beta_end)


def _f64(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, DTensor) else x, dtype=np.float64)


def _like(arr: np.ndarray, ref: DTensor) -> DTensor:
    return DTensor(arr, dtype=ref.dtype)


def _ddim_move(z, e, ab_from: float, ab_to: float) -> np.ndarray:
    zv, ev = _f64(z), _f64(e)
    if zv.shape != ev.shape:
        raise ShapeError(f"latent {zv.shape} and noise {ev.shape} differ in shape")
    x0 = (zv - math.sqrt(1.0 - ab_from) * ev) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0 + math.sqrt(1.0 - ab_to) * ev


def ddim_invert_step(z_t: DTensor, e: DTensor, t: int, sched: DiffusionSchedule) -> DTensor:
    if not 0 <= t <= sched.T - 1:
        raise IndexError(f"inversion step {t} outside [0, {sched.T - 1}]")
    ab = sched.alpha_bar
    return _like(_ddim_move(z_t, e, ab[t], ab[t + 1]), z_t)


def ddim_denoise_step(z_t: DTensor, e_hat: DTensor, t: int, sched: DiffusionSchedule) -> DTensor:
    if not 1 <= t <= sched.T:
        raise IndexError(f"denoising step {t} outside [1, {sched.T}]")
    ab = sched.alpha_bar
    return _like(_ddim_move(z_t, e_hat, ab[t], ab[t - 1]), z_t)


# -- noise predictors ------------------------------------------------------

@dataclass
class Condition:
    depth: DTensor | None = None
    edit_tag: str | None = None


class NoisePredictor(Protocol):
    def predict(self, z: DTensor, t: int, condition: Condition) -> DTensor: ...


def _hue_rotation(theta: np.ndarray) -> np.ndarray:
    """Rotation about the grey axis; ``theta`` broadcasts per pixel -> (3, 3, ...)."""
    c, s = np.cos(theta), np.sin(theta)
    k = (1.0 - c) / 3.0
    r = s / math.sqrt(3.0)
    return np.array([[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]])


def _box_blur(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = x.shape[1:]
    return sum(p[:, i : i + h, j : j + w] for i in range(3) for j in range(3)) / 9.0


def normalized_depth(depth: DTensor | None, shape: tuple[int, ...]) -> np.ndarray:
    """Depth scaled to [0, 1] by its maximum, broadcast to 1 x H x W; 0.5 when absent."""
    if depth is None:
        return np.full((1,) + tuple(shape[1:]), 0.5)
    d = _f64(depth).reshape((1,) + tuple(shape[1:]))
    m = d.max()
    return d / m if m > 0 else np.zeros_like(d)


@dataclass
class ToyPredictor:
    """Closed-form noise predictor standing in for a depth-conditioned denoiser.

    Without an edit it predicts the noise of a straight DDIM trajectory whose
    clean latent is ``z / (sqrt(ab) + ratio * sqrt(1 - ab))``, so inversion
    followed by denoising reproduces the input. With an edit tag it nudges the
    clean estimate by a small step of the named edit; the steps are sized so
    that over a full denoising pass the edit accumulates to ``strength``.
    """

    kind: str
    strength: float
    schedule: DiffusionSchedule = field(default_factory=make_schedule)
    ratio: float = 1.0

    def __post_init__(self):
        if self.kind not in EDIT_KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}; choose from {EDIT_KINDS}")
        if not math.isfinite(self.strength):
            raise ValueError("strength must be finite")
        ab = self.schedule.alpha_bar
        c = np.sqrt(ab) + self.ratio * np.sqrt(1.0 - ab)
        gain = 0.0
        for t in range(1, self.schedule.T + 1):
            rho = math.sqrt(1.0 - ab[t - 1]) / math.sqrt(1.0 - ab[t]) if ab[t] < 1 else 0.0
            gain += (math.sqrt(ab[t - 1]) - rho * math.sqrt(ab[t])) / c[t - 1]
        self._coef = c
        self._step_amount = self.strength / gain if gain > 0 else 0.0

    def clean_estimate(self, z: np.ndarray, t: int) -> np.ndarray:
        return z / self._coef[t]

    def _edit_delta(self, x: np.ndarray, dn: np.ndarray) -> np.ndarray:
        a = self._step_amount
        if self.kind == "darken":
            return -a * (0.5 + 0.5 * dn) * x
        if self.kind == "hue_shift":
            if x.shape[0] != 3:
                raise ShapeError(f"hue_shift needs a 3-channel latent, got {x.shape[0]} channels")
            rot = _hue_rotation(a * math.pi * (0.75 + 0.25 * dn[0]))
            return np.einsum("ijhw,jhw->ihw", rot, x) - x
        if self.kind == "sharpen":
            return a * (0.5 + 0.5 * dn) * (x - _box_blur(x))
        return np.zeros_like(x)

    def predict(self, z: DTensor, t: int, condition: Condition | None = None) -> DTensor:
        condition = condition or Condition()
        zv = _f64(z)
        ab = self.schedule.alpha_bar[t]
        x = self.clean_estimate(zv, t)
        if condition.edit_tag is None or self.kind == "identity" or self.strength == 0 or ab >= 1.0:
            return _like(self.ratio * x, z)
        target = x + self._edit_delta(x, normalized_depth(condition.depth, zv.shape))
        return _like((zv - math.sqrt(ab) * target) / math.sqrt(1.0 - ab), z)


def toy_predictor(kind: str, strength: float = 0.0, schedule: DiffusionSchedule | None = None) -> ToyPredictor:
    return ToyPredictor(kind, strength, schedule or make_schedule())


def parse_edit(text: str) -> tuple[str, float]:
    """``"hue_shift:0.3"`` -> ("hue_shift", 0.3); a bare kind means strength 0."""
    kind, _, val = text.partition(":")
    if kind not in EDIT_KINDS:
        raise ValueError(f"unknown edit {kind!r}; choose from {EDIT_KINDS}")
    return kind, float(val) if val else 0.0


# -- edit loop -------------------------------------------------------------

@dataclass
class LatentState:
    latents: list[DTensor]
    t: int = 0

    def __post_init__(self):
        if not self.latents:
            raise ValueError("LatentState needs at least one view")
        shape = self.latents[0].shape
        if any(z.shape != shape for z in self.latents):
            raise ShapeError("all view latents must share a shape")


def align_latent(i: int, latents: Sequence[DTensor], reference_ids: Sequence[int],
                 params: AttentionParams, lam: float) -> DTensor:
    """Swap the view's self-attention for the blended self/reference attention."""
    z = latents[i]
    if i in reference_ids or lam == 1.0:
        return z
    a_self = wca(z, z, params)
    a_cross = [wca(z, latents[j], params) for j in reference_ids]
    blended = blend_attention(a_self, a_cross, lam)
    return _like(_f64(z) + (_f64(blended) - _f64(a_self)), z)


def run_edit_loop(
    views: LatentState,
    reference_ids: Sequence[int],
    predictor: NoisePredictor,
    conditions: Sequence[Condition],
    sched: DiffusionSchedule,
    lam: float = 0.5,
    params: AttentionParams | None = None,
    record: dict[int, list[DTensor]] | None = None,
) -> LatentState:
    """Invert every view to t=T, then denoise all views in lock step with reference alignment.

    ``record``, when given, is filled with the view latents at t=T and t=0.
    """
    n = len(views.latents)
    if not reference_ids:
        raise ValueError("at least one reference view is required")
    if any(not 0 <= j < n for j in reference_ids):
        raise IndexError(f"reference ids {list(reference_ids)} out of range for {n} views")
    if len(conditions) != n:
        raise ValueError("need one condition per view")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    refs = list(reference_ids)
    params = params or AttentionParams.identity(views.latents[0].shape[0])

    zs = list(views.latents)
    for t in range(views.t, sched.T):
        zs = [
            ddim_invert_step(z, predictor.predict(z, t, Condition(c.depth, None)), t, sched)
            for z, c in zip(zs, conditions)
        ]
    if record is not None:
        record[sched.T] = list(zs)

    for t in range(sched.T, 0, -1):
        # every view reads the same step-t snapshot, so results do not depend on view order
        snapshot = list(zs)
        nxt = []
        for i in range(n):
            aligned = align_latent(i, snapshot, refs, params, lam)
            e_hat = predictor.predict(aligned, t, conditions[i])
            nxt.append(ddim_denoise_step(aligned, e_hat, t, sched))
        zs = nxt
    if record is not None:
        record[0] = list(zs)
    return LatentState(zs, 0)
