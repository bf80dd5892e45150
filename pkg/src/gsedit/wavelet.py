"""Single-level orthonormal Haar transform and wavelet-domain attention between latents."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DTensor, ShapeError

BANDS = ("LL", "LH", "HL", "HH")


@dataclass
class WaveletPyramid:
    LL: DTensor
    LH: DTensor
    HL: DTensor
    HH: DTensor
    source_shape: tuple[int, int, int]

    def bands(self) -> list[DTensor]:
        return [self.LL, self.LH, self.HL, self.HH]


@dataclass
class AttentionParams:
    """Shared query/key/value maps; logits are divided by ``scale``."""

    w_q: DTensor
    w_k: DTensor
    w_v: DTensor
    scale: float

    def __post_init__(self):
        for w in (self.w_q, self.w_k, self.w_v):
            if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape != self.w_q.shape:
                raise ShapeError("projection maps must be equal square matrices")
        if self.scale <= 0:
            raise ValueError("attention scale must be positive")

    @property
    def features(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def identity(cls, features: int) -> AttentionParams:
        eye = DTensor(np.eye(features))
        return cls(eye, eye, eye, math.sqrt(features))

    @classmethod
    def random(cls, features: int, seed: int = 0, std: float | None = None) -> AttentionParams:
        rng = np.random.default_rng(seed)
        std = std if std is not None else 1.0 / math.sqrt(features)
        mats = [DTensor(np.eye(features) + rng.normal(0, std, (features, features))) for _ in range(3)]
        return cls(*mats, math.sqrt(features))


def _data(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, DTensor) else x, dtype=np.float64)


def _wrap(arr: np.ndarray, like) -> DTensor:
    """Store in the source tensor's precision (float32 unless it was float64)."""
    return DTensor(arr, dtype=like.dtype if isinstance(like, DTensor) else np.float32)


def dwt2(x: DTensor) -> WaveletPyramid:
    v = _data(x)
    if v.ndim != 3:
        raise ShapeError(f"dwt2 expects C x H x W, got {v.shape}")
    c, h, w = v.shape
    if h % 2 or w % 2:
        raise ShapeError(f"dwt2 needs even H and W, got {h}x{w}")
    a = v[:, 0::2, 0::2]
    b = v[:, 0::2, 1::2]
    cc = v[:, 1::2, 0::2]
    d = v[:, 1::2, 1::2]
    return WaveletPyramid(
        LL=_wrap((a + b + cc + d) / 2, x),
        LH=_wrap((a - b + cc - d) / 2, x),
        HL=_wrap((a + b - cc - d) / 2, x),
        HH=_wrap((a - b - cc + d) / 2, x),
        source_shape=(c, h, w),
    )


def idwt2(p: WaveletPyramid) -> DTensor:
    ll, lh, hl, hh = (_data(t) for t in p.bands())
    if not (ll.shape == lh.shape == hl.shape == hh.shape):
        raise ShapeError(f"band shapes differ: {[t.shape for t in (ll, lh, hl, hh)]}")
    c, h2, w2 = ll.shape
    out = np.empty((c, 2 * h2, 2 * w2))
    out[:, 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[:, 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[:, 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[:, 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return _wrap(out, p.LL)


def attention_weights(query_band, context_band, params: AttentionParams) -> np.ndarray:
    """Row-stochastic (tokens_q x tokens_k) matrix; tokens are pixels, features are channels."""
    q_tok, k_tok, _ = _project(query_band, context_band, params)
    logits = q_tok @ k_tok.T / params.scale
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _project(query_band, context_band, params):
    q, k = _data(query_band), _data(context_band)
    if q.shape[0] != params.features or k.shape[0] != params.features:
        raise ShapeError(
            f"band feature dims {q.shape[0]}, {k.shape[0]} do not match projection size {params.features}"
        )
    qt = q.reshape(q.shape[0], -1).T
    kt = k.reshape(k.shape[0], -1).T
    return qt @ _data(params.w_q), kt @ _data(params.w_k), kt @ _data(params.w_v)


def subband_attention(query_band: DTensor, context_band: DTensor, params: AttentionParams) -> DTensor:
    """softmax(Q K^T / scale) V with Q from the query band and K, V from the context band."""
    shape = _data(query_band).shape
    _, _, v = _project(query_band, context_band, params)
    out = attention_weights(query_band, context_band, params) @ v
    return _wrap(out.T.reshape(shape), query_band)


def wca(query_latent: DTensor, context_latent: DTensor, params: AttentionParams) -> DTensor:
    """Per-band attention of the query latent onto the context latent, back in image space."""
    if _data(query_latent).shape != _data(context_latent).shape:
        raise ShapeError("query and context latents must share a shape")
    pq, pc = dwt2(query_latent), dwt2(context_latent)
    attended = [subband_attention(bq, bc, params) for bq, bc in zip(pq.bands(), pc.bands())]
    return idwt2(WaveletPyramid(*attended, source_shape=pq.source_shape))


def blend_attention(self_out: DTensor, cross_outs: Sequence[DTensor], lam: float) -> DTensor:
    """lam * self + (1 - lam) * mean(cross)."""
    if not cross_outs:
        raise ValueError("blend_attention needs at least one cross-attention output")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    s = _data(self_out)
    crosses = [_data(c) for c in cross_outs]
    if any(c.shape != s.shape for c in crosses):
        raise ShapeError("cross-attention outputs must match the self-attention shape")
    return _wrap(lam * s + (1.0 - lam) * np.mean(crosses, axis=0), self_out)
