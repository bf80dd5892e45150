"""Two-branch depth refinement network (depth source, RGB guide) with self-supervised training."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from . import numerics as nx
from .numerics import DTensor, ShapeError, adam_step, atomic_write_bytes, load_rten, no_grad, save_rten
from .numerics.tensor import make_node

DIRECTIONS = ("guide_to_source", "source_to_guide")
BRANCHES = ("source", "guide")


@dataclass
class CimlnConfig:
    features: int = 16
    kernel1d: int = 3
    window: int = 3
    depth_scale: float = 1.0
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.features < 1:
            raise ValueError("features must be >= 1")
        if self.kernel1d % 2 == 0 or self.window % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    lambda_l1: float = 1.0
    gamma_ba: float = 0.1
    downsample_factor: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lambda_l1 < 0 or self.gamma_ba < 0:
            raise ValueError("loss weights must be non-negative")
        if self.downsample_factor < 2:
            raise ValueError("downsample factor must be >= 2")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


@dataclass
class CimlnModel:
    """Parameters keyed by dotted name; the groups below are views onto ``params``."""

    config: CimlnConfig
    params: dict[str, DTensor] = field(default_factory=dict)

    def _group(self, prefix: str) -> dict[str, DTensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    @property
    def source_stem(self):
        return self._group("source_stem")

    @property
    def guide_stem(self):
        return self._group("guide_stem")

    @property
    def ssm_blocks(self):
        return {b: self._group(f"{b}_ssm") for b in BRANCHES}

    @property
    def pml(self):
        return self._group("pml")

    @property
    def head(self):
        return self._group("head")

    def parameters(self) -> list[DTensor]:
        return list(self.params.values())

    def validate(self) -> None:
        self.config.validate()
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise ValueError(f"parameter {name} has non-finite values")

    def copy(self) -> CimlnModel:
        return CimlnModel(
            CimlnConfig(**asdict(self.config)),
            {k: DTensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
        )


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


def init_model(config: CimlnConfig | None = None, seed: int = 0, zero_head: bool = True) -> CimlnModel:
    """Random initialisation. With ``zero_head`` the model is the identity on depth."""
    cfg = config or CimlnConfig()
    cfg.validate()
    f, k1 = cfg.features, cfg.kernel1d
    rng = np.random.default_rng(seed)

    def conv(c_out, c_in, kh, kw, gain=1.0):
        std = gain * math.sqrt(2.0 / (c_in * kh * kw))
        return rng.normal(0.0, std, (c_out, c_in, kh, kw))

    p: dict[str, np.ndarray] = {
        "source_stem.w": conv(f, 1, 3, 3),
        "guide_stem.w": conv(f, 3, 3, 3),
    }
    for b in BRANCHES:
        p[f"{b}_ssm.conv2d"] = conv(f, f, 3, 3)
        p[f"{b}_ssm.conv1d_x"] = conv(f, f, 1, k1)
        p[f"{b}_ssm.conv1d_y"] = conv(f, f, 1, k1)
        # decay a = exp(-softplus(r)) spread over roughly [0.5, 0.95]
        p[f"{b}_ssm.r"] = np.array([_softplus_inv(-math.log(a)) for a in np.linspace(0.5, 0.95, f)])
        p[f"{b}_ssm.b"] = 1.0 + 0.1 * rng.normal(size=f)
        p[f"{b}_ssm.c"] = 1.0 + 0.1 * rng.normal(size=f)
        p[f"{b}_ssm.ln_gamma"] = np.ones(f)
        p[f"{b}_ssm.ln_beta"] = np.zeros(f)
        p[f"{b}_ssm.linear"] = rng.normal(0.0, 1.0 / math.sqrt(f), (f, f))
    for name in ("p_s", "u_g", "p_g", "u_s"):
        p[f"pml.{name}"] = rng.normal(0.0, 1.0 / math.sqrt(f), (f, f))
    p["head.conv_in"] = conv(f, 2 * f, 3, 3)
    for r in (1, 2):
        p[f"head.res{r}.conv_a"] = conv(f, f, 3, 3)
        p[f"head.res{r}.conv_b"] = conv(f, f, 3, 3)
    if zero_head:
        p["head.conv_out"] = np.zeros((1, f, 3, 3))
        p["head.bias_out"] = np.zeros(1)
    else:
        p["head.conv_out"] = conv(1, f, 3, 3, 0.1)
        p["head.bias_out"] = rng.normal(0.0, 0.01, 1)
    return CimlnModel(cfg, {k: DTensor(v.astype(np.float32), requires_grad=True) for k, v in p.items()})


# -- scan ------------------------------------------------------------------

def linear_scan(x: DTensor, a: DTensor, b: DTensor, c: DTensor) -> DTensor:
    """Per-channel recurrence h_k = a h_{k-1} + b x_k, y_k = c h_k, h_0 = 0, over axis 1 of F x L."""
    if x.ndim != 2:
        raise ShapeError(f"linear_scan expects F x L, got {x.shape}")
    n = x.shape[0]
    for name, v in (("a", a), ("b", b), ("c", c)):
        if v.shape != (n,):
            raise ShapeError(f"scan parameter {name} has shape {v.shape}, expected ({n},)")
    xv = x.data.astype(np.float64)
    av, bv, cv = (t.data.astype(np.float64) for t in (a, b, c))
    h = np.stack([lfilter([bv[i]], [1.0, -av[i]], xv[i]) for i in range(n)])
    y = cv[:, None] * h

    def bw(g):
        # adjoint runs the same recurrence backwards in time
        lam = np.stack([lfilter([1.0], [1.0, -av[i]], (cv[i] * g[i])[::-1])[::-1] for i in range(n)])
        h_prev = np.concatenate([np.zeros((n, 1)), h[:, :-1]], axis=1)
        return bv[:, None] * lam, (lam * h_prev).sum(1), (lam * xv).sum(1), (g * h).sum(1)

    return make_node(y, (x, a, b, c), bw, "linear_scan")


def _conv1d_seq(feat: DTensor, kernel: DTensor) -> DTensor:
    """1 x k convolution along the row-major flattened pixel sequence."""
    f, h, w = feat.shape
    k = kernel.shape[-1]
    seq = nx.reshape(feat, (f, 1, h * w))
    return nx.reshape(nx.conv2d(seq, kernel, padding=(0, k // 2)), (f, h * w))


def ssm_block(feat: DTensor, params: dict[str, DTensor], prefix: str = "", eps: float = 1e-5) -> DTensor:
    """conv2d -> two gated 1-d conv paths -> scan + layernorm on one, product, channel linear."""
    pre = prefix + "." if prefix and not prefix.endswith(".") else prefix
    get = lambda name: params[pre + name]  # noqa: E731
    if feat.ndim != 3 or get("conv2d").shape[1] != feat.shape[0]:
        raise ShapeError(f"features {feat.shape} do not match block width {get('conv2d').shape[1]}")
    f, h, w = feat.shape
    ft = nx.conv2d(feat, get("conv2d"), padding=1)
    x = nx.silu(_conv1d_seq(ft, get("conv1d_x")))
    y = nx.silu(_conv1d_seq(ft, get("conv1d_y")))
    a = nx.exp(-nx.softplus(get("r")))
    xs = linear_scan(x, a, get("b"), get("c"))
    xt = nx.layernorm(xs, 0, get("ln_gamma"), get("ln_beta"), eps)
    out = nx.matmul(get("linear"), xt * y)
    return nx.reshape(out, (f, h, w))


# -- pixel mutual learning -------------------------------------------------

def _project(feat: DTensor, w: DTensor | None) -> DTensor:
    if w is None:
        return feat
    f, h, wd = feat.shape
    return nx.reshape(nx.matmul(w, nx.reshape(feat, (f, h * wd))), (w.shape[0], h, wd))


def neighborhood_attention(query: DTensor, context: DTensor, k: int = 3) -> tuple[DTensor, DTensor]:
    """Softmax over each pixel's k x k context window of dot-product correlations.

    Returns (aggregated features F x H x W, weights k*k x H x W).
    """
    if query.shape != context.shape:
        raise ShapeError(f"query {query.shape} and context {context.shape} differ in shape")
    f, h, w = query.shape
    u = nx.unfold_neighbors(context, k)
    corr = nx.sum(nx.reshape(query, (f, 1, h, w)) * u, axis=0)
    weights = nx.softmax(corr, axis=0)
    out = nx.sum(u * nx.reshape(weights, (1, k * k, h, w)), axis=1)
    return out, weights


def pixel_mutual_learning(
    source_feat: DTensor,
    guide_feat: DTensor,
    direction: str = "guide_to_source",
    k: int = 3,
    params: dict[str, DTensor] | None = None,
) -> DTensor:
    """Message from one branch to the other.

    ``guide_to_source``: queries come from the source map, the aggregated
    neighbourhood from the guide. ``params`` optionally supplies the 1x1
    projections (``pml.p_s``/``pml.u_g`` or ``pml.p_g``/``pml.u_s``); without
    them the raw features are used.
    """
    if k % 2 == 0:
        raise ShapeError(f"window size must be odd, got {k}")
    if source_feat.shape != guide_feat.shape:
        raise ShapeError(f"source {source_feat.shape} and guide {guide_feat.shape} differ in shape")
    params = params or {}
    if direction == "guide_to_source":
        q = _project(source_feat, params.get("pml.p_s"))
        ctx = _project(guide_feat, params.get("pml.u_g"))
    elif direction == "source_to_guide":
        q = _project(guide_feat, params.get("pml.p_g"))
        ctx = _project(source_feat, params.get("pml.u_s"))
    else:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    return neighborhood_attention(q, ctx, k)[0]


# -- forward / loss --------------------------------------------------------

def _check_inputs(depth: DTensor, rgb: DTensor) -> None:
    if depth.ndim != 3 or depth.shape[0] != 1:
        raise ShapeError(f"depth must be 1 x H x W, got {depth.shape}")
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ShapeError(f"rgb must be 3 x H x W, got {rgb.shape}")
    if depth.shape[1:] != rgb.shape[1:]:
        raise ShapeError(f"depth {depth.shape} and rgb {rgb.shape} differ in spatial size")


def forward(model: CimlnModel, depth: DTensor, rgb: DTensor) -> DTensor:
    _check_inputs(depth, rgb)
    cfg, p = model.config, model.params
    scale = cfg.depth_scale
    s = nx.silu(nx.conv2d(depth * (1.0 / scale), p["source_stem.w"], padding=1))
    g = nx.silu(nx.conv2d(rgb, p["guide_stem.w"], padding=1))
    s = ssm_block(s, p, "source_ssm", cfg.ln_eps)
    g = ssm_block(g, p, "guide_ssm", cfg.ln_eps)
    o_gs = pixel_mutual_learning(s, g, "guide_to_source", cfg.window, p)
    o_sg = pixel_mutual_learning(s, g, "source_to_guide", cfg.window, p)
    x = nx.concat([s + o_gs, g + o_sg], axis=0)
    x = nx.silu(nx.conv2d(x, p["head.conv_in"], padding=1))
    for r in (1, 2):
        inner = nx.silu(nx.conv2d(x, p[f"head.res{r}.conv_a"], padding=1))
        x = x + nx.conv2d(inner, p[f"head.res{r}.conv_b"], padding=1)
    residual = nx.conv2d(x, p["head.conv_out"], padding=1) + nx.reshape(p["head.bias_out"], (1, 1, 1))
    return depth + residual * scale


def loss_total(out: DTensor, target: DTensor, lam: float = 1.0, gamma: float = 0.1) -> DTensor:
    """lam * mean(d^2) + gamma * mean(|dx d| * |dy d|) with d = out - target."""
    if out.shape != target.shape:
        raise ShapeError(f"output {out.shape} and target {target.shape} differ in shape")
    d = out - target
    l2 = nx.mean(d * d)
    boundary = nx.mean(nx.abs(nx.spatial_gradient(d, "x")) * nx.abs(nx.spatial_gradient(d, "y")))
    return l2 * lam + boundary * gamma


# -- training / inference --------------------------------------------------

def make_training_pair(depth: DTensor, rgb: DTensor, factor: int) -> tuple[DTensor, DTensor, DTensor]:
    """(degraded depth, rgb, target): depth is averaged down then bilinearly upsampled."""
    _check_inputs(depth, rgb)
    h, w = depth.shape[1:]
    if h % factor or w % factor:
        raise ShapeError(f"render size {h}x{w} is not divisible by factor {factor}")
    with no_grad():
        low = nx.resample(depth, factor, "down_average")
        degraded = nx.resample(low, factor, "up_bilinear")
    return DTensor(degraded.data), DTensor(rgb.data), DTensor(depth.data)


def _batch_loss(model, pairs, cfg: TrainConfig) -> DTensor:
    total = None
    for inp, rgb, tgt in pairs:
        term = loss_total(forward(model, inp, rgb), tgt, cfg.lambda_l1, cfg.gamma_ba)
        total = term if total is None else total + term
    return total * (1.0 / len(pairs))


def train_self_supervised(
    renders: Sequence[dict],
    cfg: TrainConfig | None = None,
    model_config: CimlnConfig | None = None,
    history: list[float] | None = None,
) -> CimlnModel:
    """Full-batch Adam on down/up-degraded depth; returns the lowest-loss parameters seen.

    ``history`` collects the loss evaluated before every step plus the final one.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if not renders:
        raise ValueError("training needs at least one render pair")
    pairs = [make_training_pair(r["depth"], r["rgb"], cfg.downsample_factor) for r in renders]
    mcfg = CimlnConfig(**asdict(model_config)) if model_config else CimlnConfig()
    peak = max(float(t.data.max()) for _, _, t in pairs)
    mcfg.depth_scale = peak if peak > 0 else 1.0
    model = init_model(mcfg, cfg.seed)
    params = model.parameters()

    best, best_loss, state = None, math.inf, None
    for step in range(cfg.steps + 1):
        for prm in params:
            prm.grad = None
        loss = _batch_loss(model, pairs, cfg)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"training loss became non-finite at step {step}")
        if history is not None:
            history.append(value)
        if value < best_loss:
            best_loss, best = value, model.copy()
        if step == cfg.steps:
            break
        loss.backward()
        state = adam_step(params, cfg.lr, state=state)
    best.validate()
    return best


def enhance_depth(model: CimlnModel, depth: DTensor, rgb: DTensor) -> DTensor:
    """Inference pass; the result is clamped to [0, 1.05 * max(input depth)]."""
    _check_inputs(depth, rgb)
    with no_grad():
        out = forward(model, DTensor(depth.data), DTensor(rgb.data))
    hi = 1.05 * max(float(depth.data.max()), 0.0)
    return DTensor(np.clip(np.nan_to_num(out.data, nan=0.0), 0.0, hi))


# -- checkpoints -----------------------------------------------------------

MANIFEST = "manifest.json"


def save_checkpoint(model: CimlnModel, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.params.items():
        save_rten(d / f"{name}.rten", p.data.astype(np.float32))
        entries.append({"name": name, "shape": list(p.shape)})
    manifest = {"format": 1, "config": asdict(model.config), "params": entries}
    atomic_write_bytes(d / MANIFEST, (json.dumps(manifest, indent=2) + "\n").encode())


def load_checkpoint(directory: str | os.PathLike) -> CimlnModel:
    d = Path(directory)
    try:
        manifest = json.loads((d / MANIFEST).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"no {MANIFEST} in checkpoint directory {d}") from None
    cfg = CimlnConfig(**manifest["config"])
    params = {}
    for entry in manifest["params"]:
        t = load_rten(d / f"{entry['name']}.rten")
        if list(t.shape) != list(entry["shape"]):
            raise ShapeError(f"checkpoint tensor {entry['name']} has shape {t.shape}, manifest says {entry['shape']}")
        params[entry["name"]] = DTensor(t.data, requires_grad=True)
    model = CimlnModel(cfg, params)
    model.validate()
    return model
