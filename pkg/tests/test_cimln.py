import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsedit.cimln import (
    CimlnConfig,
    CimlnModel,
    TrainConfig,
    enhance_depth,
    forward,
    init_model,
    linear_scan,
    load_checkpoint,
    loss_total,
    make_training_pair,
    neighborhood_attention,
    pixel_mutual_learning,
    save_checkpoint,
    ssm_block,
    train_self_supervised,
)
from gsedit.numerics import DTensor, ShapeError, grad_check, resample


def rnd(seed, shape, lo=-1.0, hi=1.0, dtype=np.float64):
    return DTensor(np.random.default_rng(seed).uniform(lo, hi, shape), dtype=dtype)


# -- scan ------------------------------------------------------------------

def scan_oracle(x, a, b, c):
    out = np.zeros_like(x)
    for ch in range(x.shape[0]):
        h = 0.0
        for k in range(x.shape[1]):
            h = a[ch] * h + b[ch] * x[ch, k]
            out[ch, k] = c[ch] * h
    return out


def test_scan_matches_loop_oracle_on_1x4x4():
    x = np.random.default_rng(0).uniform(-1, 1, (1, 16))
    a, b, c = np.array([0.83]), np.array([1.3]), np.array([-0.7])
    got = linear_scan(DTensor(x, dtype=np.float64), *(DTensor(v, dtype=np.float64) for v in (a, b, c))).data
    assert np.max(np.abs(got - scan_oracle(x, a, b, c))) <= 1e-5


def test_scan_memoryless_when_a_is_zero():
    x = np.random.default_rng(1).uniform(-1, 1, (3, 10))
    b, c = np.array([0.5, 2.0, -1.0]), np.array([1.5, 0.25, 3.0])
    got = linear_scan(DTensor(x), DTensor(np.zeros(3)), DTensor(b), DTensor(c)).data
    np.testing.assert_allclose(got, (b * c)[:, None] * x, rtol=1e-6)


def test_scan_gradients():
    ts = [rnd(2, (3, 12)), rnd(3, (3,), 0.1, 0.95), rnd(4, (3,)), rnd(5, (3,))]
    err = grad_check(lambda v: (linear_scan(*v) * linear_scan(*v)).sum(), ts)
    assert err <= 1e-3


def test_scan_shape_errors():
    with pytest.raises(ShapeError):
        linear_scan(DTensor(np.ones((2, 5))), DTensor(np.ones(3)), DTensor(np.ones(2)), DTensor(np.ones(2)))


# -- ssm block -------------------------------------------------------------

def test_ssm_zero_input_gives_zero():
    model = init_model(CimlnConfig(features=6), seed=0)
    out = ssm_block(DTensor(np.zeros((6, 5, 7))), model.params, "source_ssm")
    np.testing.assert_array_equal(out.data, 0.0)


def test_ssm_output_shape_and_width_error():
    model = init_model(CimlnConfig(features=4), seed=0)
    assert ssm_block(rnd(0, (4, 6, 9)), model.params, "guide_ssm").shape == (4, 6, 9)
    with pytest.raises(ShapeError):
        ssm_block(rnd(0, (3, 6, 9)), model.params, "guide_ssm")


def test_ssm_block_gradients():
    model = init_model(CimlnConfig(features=3), seed=1)
    names = [k for k in model.params if k.startswith("source_ssm.")]
    feat = rnd(6, (3, 4, 4))

    def f(v):
        params = dict(zip(names, v[1:]))
        out = ssm_block(v[0], params, "source_ssm")
        return (out * out).sum()

    assert grad_check(f, [feat] + [model.params[n] for n in names]) <= 1e-3


def test_decay_is_in_unit_interval():
    model = init_model(seed=0)
    for b in ("source", "guide"):
        r = model.params[f"{b}_ssm.r"].data.astype(np.float64)
        a = np.exp(-np.logaddexp(0.0, r))
        assert np.all((a > 0) & (a < 1))


# -- pixel mutual learning -------------------------------------------------

def pml_oracle(q, ctx, k):
    f, h, w = q.shape
    r = k // 2
    out = np.zeros_like(q)
    wsum = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            feats, corr = [], []
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii, jj = i + di, j + dj
                    v = ctx[:, ii, jj] if 0 <= ii < h and 0 <= jj < w else np.zeros(f)
                    feats.append(v)
                    corr.append(float(np.dot(q[:, i, j], v)))
            m = max(corr)
            e = [math.exp(c - m) for c in corr]
            z = sum(e)
            wsum[i, j] = sum(x / z for x in e)
            out[:, i, j] = sum(x / z * v for x, v in zip(e, feats))
    return out, wsum


def test_pml_matches_nested_loop_oracle():
    s = np.random.default_rng(7).uniform(-1, 1, (2, 5, 5))
    g = np.random.default_rng(8).uniform(-1, 1, (2, 5, 5))
    got = pixel_mutual_learning(DTensor(s), DTensor(g), "guide_to_source", 3).data
    want, _ = pml_oracle(s, g, 3)
    assert np.max(np.abs(got - want)) <= 1e-5
    back = pixel_mutual_learning(DTensor(s), DTensor(g), "source_to_guide", 3).data
    assert np.max(np.abs(back - pml_oracle(g, s, 3)[0])) <= 1e-5


def test_pml_constant_guide_passes_constant_through():
    g = np.broadcast_to(np.array([0.4, -1.1])[:, None, None], (2, 7, 7)).copy()
    s = np.random.default_rng(9).uniform(-1, 1, (2, 7, 7))
    out = pixel_mutual_learning(DTensor(s), DTensor(g), "guide_to_source", 3).data
    # away from the zero-padded border every neighbour holds the constant
    np.testing.assert_allclose(out[:, 1:-1, 1:-1], g[:, 1:-1, 1:-1], rtol=1e-6)


def test_pml_equal_correlations_give_window_mean():
    g = np.random.default_rng(10).uniform(-1, 1, (3, 6, 6))
    out = pixel_mutual_learning(DTensor(np.zeros((3, 6, 6))), DTensor(g), "guide_to_source", 3).data
    padded = np.pad(g, ((0, 0), (1, 1), (1, 1)))
    mean = sum(padded[:, i : i + 6, j : j + 6] for i in range(3) for j in range(3)) / 9
    np.testing.assert_allclose(out, mean, rtol=1e-6, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 2, 4, 4), elements=st.floats(-30, 30)), st.sampled_from([1, 3, 5]))
def test_pml_weights_sum_to_one(x, k):
    _, w = neighborhood_attention(DTensor(x[0]), DTensor(x[1]), k)
    np.testing.assert_allclose(w.data.sum(axis=0), 1.0, atol=1e-6)


def test_pml_gradients_with_projections():
    model = init_model(CimlnConfig(features=3), seed=2)
    names = ["pml.p_s", "pml.u_g"]
    s, g = rnd(11, (3, 4, 4)), rnd(12, (3, 4, 4))

    def f(v):
        out = pixel_mutual_learning(v[0], v[1], "guide_to_source", 3, dict(zip(names, v[2:])))
        return (out * out).sum()

    assert grad_check(f, [s, g] + [model.params[n] for n in names]) <= 1e-3


def test_pml_errors():
    a = DTensor(np.zeros((2, 4, 4)))
    with pytest.raises(ShapeError):
        pixel_mutual_learning(a, DTensor(np.zeros((2, 4, 5))))
    with pytest.raises(ShapeError):
        pixel_mutual_learning(a, a, k=2)
    with pytest.raises(ValueError):
        pixel_mutual_learning(a, a, "sideways")


# -- forward ---------------------------------------------------------------

@pytest.mark.parametrize("hw", [8, 16, 33])
def test_zero_head_forward_is_identity(hw):
    model = init_model(CimlnConfig(features=4), seed=3)
    depth = rnd(13, (1, hw, hw), 0.5, 3.0, np.float32)
    out = forward(model, depth, rnd(14, (3, hw, hw), 0, 1, np.float32))
    assert out.shape == depth.shape
    assert out.data.tobytes() == depth.data.tobytes()


def test_forward_shape_errors():
    model = init_model(CimlnConfig(features=4), seed=3)
    with pytest.raises(ShapeError):
        forward(model, DTensor(np.zeros((1, 8, 8))), DTensor(np.zeros((3, 8, 9))))
    with pytest.raises(ShapeError):
        forward(model, DTensor(np.zeros((2, 8, 8))), DTensor(np.zeros((3, 8, 8))))


def test_forward_gradients_wrt_inputs():
    model = init_model(CimlnConfig(features=4), seed=4, zero_head=False)
    d, rgb = rnd(15, (1, 6, 6), 0.5, 1.0), rnd(16, (3, 6, 6), 0, 1)
    assert grad_check(lambda v: forward(model, v[0], v[1]).sum(), [d, rgb]) <= 1e-3


def test_parameter_gradients_exact_at_small_step():
    # finite differences at h=1e-3 are curvature-limited for some weight draws; at a
    # smaller step the analytic gradient is confirmed for one such draw
    model = init_model(CimlnConfig(features=4), seed=5, zero_head=False)
    rng = np.random.default_rng(5)
    d = DTensor(rng.uniform(0.5, 1, (1, 8, 8)))
    rgb = DTensor(rng.uniform(0, 1, (3, 8, 8)))
    t = DTensor(rng.uniform(0.5, 1, (1, 8, 8)))
    names = list(model.params)

    def f(ps):
        return loss_total(forward(CimlnModel(model.config, dict(zip(names, ps))), d, rgb), t)

    assert grad_check(f, [model.params[n] for n in names], h=1e-5) <= 1e-3


# -- loss ------------------------------------------------------------------

def loss_oracle(out, tgt, lam, gamma):
    _, h, w = out.shape
    d = out[0].astype(np.float64) - tgt[0]
    l2 = sum(d[i, j] ** 2 for i in range(h) for j in range(w)) / (h * w)
    ba = 0.0
    for i in range(h):
        for j in range(w):
            gx = d[i, j + 1] - d[i, j] if j + 1 < w else 0.0
            gy = d[i + 1, j] - d[i, j] if i + 1 < h else 0.0
            ba += abs(gx) * abs(gy)
    return lam * l2 + gamma * ba / (h * w)


def test_loss_zero_for_identical_inputs():
    x = rnd(17, (1, 8, 8))
    assert loss_total(x, x).item() == 0.0


def test_loss_constant_offset():
    x = rnd(18, (1, 8, 8))
    assert loss_total(x + 0.3, x, 2.0, 5.0).item() == pytest.approx(2.0 * 0.09, rel=1e-9)


def test_loss_matches_scalar_oracle():
    a, b = rnd(19, (1, 9, 7)), rnd(20, (1, 9, 7))
    assert abs(loss_total(a, b, 1.3, 0.7).item() - loss_oracle(a.data, b.data, 1.3, 0.7)) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 1, 5, 5), elements=st.floats(-1e3, 1e3)),
       st.floats(0, 10), st.floats(0, 10))
def test_loss_non_negative(x, lam, gamma):
    assert loss_total(DTensor(x[0]), DTensor(x[1]), lam, gamma).item() >= 0.0


def test_loss_shape_error():
    with pytest.raises(ShapeError):
        loss_total(DTensor(np.zeros((1, 4, 4))), DTensor(np.zeros((1, 4, 5))))


# -- training / inference --------------------------------------------------

def tiny_renders(n=2, hw=8):
    rng = np.random.default_rng(21)
    out = []
    for _ in range(n):
        depth = np.zeros((1, hw, hw), np.float32)
        depth[:, 2:6, 1:5] = rng.uniform(2, 3)
        out.append({"depth": DTensor(depth), "rgb": DTensor(rng.uniform(0, 1, (3, hw, hw)).astype(np.float32))})
    return out


def test_training_pair_construction():
    r = tiny_renders(1)[0]
    inp, rgb, tgt = make_training_pair(r["depth"], r["rgb"], 2)
    assert inp.shape == tgt.shape == (1, 8, 8) and rgb.shape == (3, 8, 8)
    assert tgt.data.tobytes() == r["depth"].data.tobytes()
    low = r["depth"].data.astype(np.float64).reshape(4, 2, 4, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(inp.data, resample(DTensor(low[None]), 2, "up_bilinear").data, atol=1e-6)
    assert inp.data.max() <= tgt.data.max() + 1e-6


def test_one_step_training_gives_valid_model():
    hist = []
    model = train_self_supervised(tiny_renders(), TrainConfig(steps=1), CimlnConfig(features=4), history=hist)
    model.validate()
    assert len(hist) == 2 and all(math.isfinite(v) for v in hist)


def test_training_is_deterministic_and_best_not_worse():
    cfg = TrainConfig(steps=4, seed=7, lr=1e-2)
    h1, h2 = [], []
    m1 = train_self_supervised(tiny_renders(), cfg, CimlnConfig(features=4), history=h1)
    m2 = train_self_supervised(tiny_renders(), cfg, CimlnConfig(features=4), history=h2)
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()
    assert h1 == h2 and min(h1) <= h1[0]


def test_training_errors():
    with pytest.raises(ShapeError):
        train_self_supervised(tiny_renders(1, 9), TrainConfig(steps=1))
    with pytest.raises(ValueError):
        train_self_supervised([], TrainConfig(steps=1))
    for bad in (TrainConfig(steps=0), TrainConfig(gamma_ba=-1), TrainConfig(downsample_factor=1)):
        with pytest.raises(ValueError):
            bad.validate()


def test_enhance_identity_clamp_and_background():
    model = init_model(CimlnConfig(features=4), seed=0)
    d = rnd(22, (1, 8, 8), 0.0, 2.0, np.float32)
    d.data[:, :3] = 0.0
    rgb = rnd(23, (3, 8, 8), 0, 1, np.float32)
    np.testing.assert_array_equal(enhance_depth(model, d, rgb).data, d.data)
    loud = init_model(CimlnConfig(features=4), seed=0, zero_head=False)
    loud.params["head.bias_out"].data[:] = 5.0
    out = enhance_depth(loud, d, rgb).data
    assert np.all(np.isfinite(out))
    assert out.max() <= 1.05 * d.data.max() + 1e-6 and out.min() >= 0.0


def test_checkpoint_round_trip(tmp_path):
    model = init_model(CimlnConfig(features=4, depth_scale=3.5), seed=9, zero_head=False)
    save_checkpoint(model, tmp_path / "ckpt")
    manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    assert manifest["config"]["depth_scale"] == 3.5
    assert {e["name"] for e in manifest["params"]} == set(model.params)
    back = load_checkpoint(tmp_path / "ckpt")
    for k, v in model.params.items():
        np.testing.assert_array_equal(back.params[k].data, v.data.astype(np.float32))
    d, rgb = rnd(24, (1, 8, 8), 0.5, 3.0, np.float32), rnd(25, (3, 8, 8), 0, 1, np.float32)
    assert forward(back, d, rgb).data.tobytes() == forward(model, d, rgb).data.tobytes()


def test_checkpoint_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)
