import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsedit import numerics as nx
from gsedit.numerics import DTensor
from gsedit.pipeline import compute_psnr
from gsedit.splat import (
    ALPHA_MAX,
    Camera,
    GaussianScene,
    SyntheticConfig,
    load_cameras,
    load_scene,
    make_synthetic_scene,
    project,
    refit_scene,
    render,
    save_cameras,
    save_scene,
)


def axis_camera(size=64, f=100.0):
    return Camera(f, f, size / 2, size / 2, size, size, np.eye(4))


def one_gaussian(mean, scale=0.05, opacity=1.0, color=(0.2, 0.5, 0.9)):
    return GaussianScene([opacity], [mean], [[scale] * 3], [[1, 0, 0, 0]], [color])


def random_scene(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianScene(
        rng.uniform(0.05, 1.0, n),
        np.column_stack([rng.uniform(-0.6, 0.6, (n, 2)), rng.uniform(1.5, 4.0, n)]),
        rng.uniform(0.05, 0.4, (n, 3)),
        q,
        rng.uniform(0, 1, (n, 3)),
    )


def brute_force_render(scene, cam, alpha_max=ALPHA_MAX):
    """Per-pixel front-to-back compositor with its own projection and a full sort at every pixel."""
    proj = []
    rmat = cam.world_to_camera[:3, :3]
    for i in range(scene.count):
        w, x, y, z = scene.rotation[i]
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])
        cov = rot @ np.diag(scene.scale[i] ** 2) @ rot.T
        pc = rmat @ scene.mean[i] + cam.world_to_camera[:3, 3]
        if pc[2] <= 0.01:
            continue
        jac = np.array([[cam.fx / pc[2], 0, -cam.fx * pc[0] / pc[2] ** 2],
                        [0, cam.fy / pc[2], -cam.fy * pc[1] / pc[2] ** 2]])
        c2 = jac @ rmat @ cov @ rmat.T @ jac.T + 0.3 * np.eye(2)
        m2 = np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])
        proj.append((pc[2], m2, np.linalg.inv(c2), scene.opacity[i], scene.color[i]))
    rgb = np.zeros((3, cam.height, cam.width))
    depth = np.zeros((1, cam.height, cam.width))
    alpha = np.zeros((1, cam.height, cam.width))
    for py in range(cam.height):
        for px in range(cam.width):
            t = 1.0
            for d, m2, conic, op, col in sorted(proj, key=lambda p: p[0]):
                if t < 1e-4:
                    break
                delta = np.array([px, py]) - m2
                a = min(op * math.exp(-0.5 * delta @ conic @ delta), alpha_max)
                rgb[:, py, px] += col * a * t
                depth[0, py, px] += d * a * t
                t *= 1 - a
            alpha[0, py, px] = 1 - t
    return rgb, depth, alpha


# -- projection ------------------------------------------------------------

def test_on_axis_projection():
    p = project(one_gaussian([0, 0, 2.0]), axis_camera())
    assert len(p) == 1
    np.testing.assert_allclose(p.mean2d[0], [32, 32])
    assert p.depth[0] == 2.0


def test_behind_camera_is_culled():
    assert len(project(one_gaussian([0, 0, -1.0]), axis_camera())) == 0
    assert len(project(one_gaussian([0, 0, 0.005]), axis_camera())) == 0


@pytest.mark.parametrize("s,d", [(0.05, 2.0), (0.2, 3.5), (0.01, 1.0)])
def test_on_axis_isotropic_cov2d(s, d):
    p = project(one_gaussian([0, 0, d], scale=s), axis_camera())
    want = (100 * s / d) ** 2 + 0.3
    np.testing.assert_allclose(p.cov2d[0], [[want, 0], [0, want]], rtol=1e-12, atol=1e-12)


def test_projected_iteration_yields_records():
    recs = list(project(one_gaussian([0, 0, 2.0]), axis_camera()))
    assert recs[0].depth == 2.0 and recs[0].cov2d.shape == (2, 2)


# -- rendering -------------------------------------------------------------

def test_single_opaque_gaussian_depth_and_color():
    out = render(one_gaussian([0, 0, 4.2]), axis_camera(), alpha_max=1.0)
    assert out["depth"].data[0, 32, 32] == pytest.approx(4.2, abs=1e-5)
    np.testing.assert_allclose(out["rgb"].data[:, 32, 32], [0.2, 0.5, 0.9], atol=1e-6)


def test_default_clamp_caps_single_gaussian_alpha():
    out = render(one_gaussian([0, 0, 4.2]), axis_camera())
    assert out["alpha"].data[0, 32, 32] == pytest.approx(ALPHA_MAX, abs=1e-6)
    assert out["depth"].data[0, 32, 32] == pytest.approx(4.2 * ALPHA_MAX, abs=1e-5)


def test_two_gaussian_depth_composite():
    # second gaussian is much wider so it is opaque at the centre pixel as well
    cam = axis_camera()
    sc = GaussianScene([0.5, 1.0], [[0, 0, 2.0], [0, 0, 5.0]], [[1e-4] * 3, [1e-4] * 3],
                       [[1, 0, 0, 0]] * 2, [[1, 0, 0], [0, 1, 0]])
    d = render(sc, cam, alpha_max=1.0)["depth"].data[0, 32, 32]
    assert d == pytest.approx(2.0 * 0.5 + 5.0 * 1.0 * 0.5, abs=1e-5)


def test_empty_scene_is_black():
    out = render(GaussianScene.empty(), axis_camera(8))
    for key in ("rgb", "depth", "alpha"):
        assert not out[key].data.any()
    assert out["rgb"].shape == (3, 8, 8)


@pytest.mark.parametrize("seed", range(12))
def test_render_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, int(rng.integers(1, 11)))
    cam = Camera(14.0, 14.0, 7.5, 7.5, 16, 16, np.eye(4))
    out = render(scene, cam)
    rgb, depth, alpha = brute_force_render(scene, cam)
    assert np.max(np.abs(out["rgb"].data - rgb)) <= 1e-5
    assert np.max(np.abs(out["depth"].data - depth)) <= 1e-5
    assert np.max(np.abs(out["alpha"].data - alpha)) <= 1e-5


def test_render_is_permutation_invariant():
    rng = np.random.default_rng(3)
    scene = random_scene(rng, 40)
    cam = Camera(14.0, 14.0, 7.5, 7.5, 16, 16, np.eye(4))
    a = render(scene.permuted(rng.permutation(40)), cam)
    b = render(scene.permuted(rng.permutation(40)), cam)
    for key in a:
        assert a[key].data.tobytes() == b[key].data.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_transmittance_monotone_and_alpha_bounded(seed):
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, 8)
    cam = Camera(14.0, 14.0, 7.5, 7.5, 16, 16, np.eye(4))
    alpha = render(scene, cam)["alpha"].data
    assert alpha.min() >= 0.0 and alpha.max() <= 1.0
    from gsedit.splat import _composite, gaussian_weights
    p = project(scene, cam)
    comp = _composite(gaussian_weights(p, 16, 16), p.opacity, ALPHA_MAX)
    assert np.all(np.diff(comp.trans, axis=0) <= 1e-15)


def test_chunked_render_matches_unchunked(monkeypatch):
    import gsedit.splat as splat
    rng = np.random.default_rng(9)
    scene = random_scene(rng, 10)
    cam = Camera(14.0, 14.0, 7.5, 7.5, 16, 16, np.eye(4))
    full = render(scene, cam)
    monkeypatch.setattr(splat, "_PIXEL_CHUNK", 37)
    chunked = render(scene, cam)
    np.testing.assert_allclose(full["rgb"].data, chunked["rgb"].data, rtol=0, atol=1e-12)


# -- differentiable compositor ---------------------------------------------

def test_render_gradients_match_finite_differences():
    from gsedit.splat import _ViewCache, render_colors_opacity
    rng = np.random.default_rng(4)
    scene = random_scene(rng, 6)
    cam = Camera(10.0, 10.0, 4.5, 4.5, 10, 10, np.eye(4))
    cache = _ViewCache(scene, cam)
    w = DTensor(rng.uniform(-1, 1, (3, 10, 10)))
    err = nx.grad_check(
        lambda xs: nx.sum(render_colors_opacity(cache, xs[0], xs[1]) * w),
        [DTensor(scene.color), DTensor(scene.opacity)],
        1e-4,
    )
    assert err <= 1e-3


def test_differentiable_render_matches_forward():
    from gsedit.splat import _ViewCache, render_colors_opacity
    rng = np.random.default_rng(5)
    scene = random_scene(rng, 10)
    cam = Camera(14.0, 14.0, 7.5, 7.5, 16, 16, np.eye(4))
    a = render_colors_opacity(_ViewCache(scene, cam), DTensor(scene.color), DTensor(scene.opacity)).data
    np.testing.assert_allclose(a, render(scene, cam)["rgb"].data, atol=1e-6)


# -- synthetic scenes ------------------------------------------------------

def test_synthetic_scene_is_deterministic():
    a = make_synthetic_scene(7, 120, "boxes")
    b = make_synthetic_scene(7, 120, "boxes")
    for f in ("opacity", "mean", "scale", "rotation", "color"):
        assert getattr(a["scene"], f).tobytes() == getattr(b["scene"], f).tobytes()
    assert all(np.array_equal(x.world_to_camera, y.world_to_camera)
               for x, y in zip(a["orbit_cameras"], b["orbit_cameras"]))


def test_shell_means_within_radius_band():
    out = make_synthetic_scene(3, 500, "shell")
    s = out["scene"]
    r = np.linalg.norm(s.mean, axis=1)
    band = 3 * s.scale.max()
    assert np.all(np.abs(r - 1.0) <= band)


@pytest.mark.parametrize("layout", ["cluster", "shell", "boxes"])
@pytest.mark.parametrize("n", [1, 30, 300])
def test_synthetic_coverage(layout, n):
    out = make_synthetic_scene(11, n, layout)
    out["scene"].validate()
    for cam in out["orbit_cameras"]:
        cam.validate()
        assert (render(out["scene"], cam)["alpha"].data > 0.5).mean() >= 0.2


def test_orbit_cameras_face_centroid():
    out = make_synthetic_scene(2, 50, "cluster", SyntheticConfig(n_views=6))
    center = out["scene"].mean.mean(axis=0)
    for cam in out["orbit_cameras"]:
        pc = cam.world_to_camera[:3, :3] @ center + cam.world_to_camera[:3, 3]
        assert abs(pc[0]) < 1e-9 and abs(pc[1]) < 1e-9 and pc[2] > 0


def test_unknown_layout():
    with pytest.raises(ValueError):
        make_synthetic_scene(0, 10, "torus")


# -- serialisation ---------------------------------------------------------

def test_scene_and_camera_json_roundtrip(tmp_path):
    out = make_synthetic_scene(1, 20, "cluster")
    save_scene(tmp_path / "s.json", out["scene"])
    save_cameras(tmp_path / "c.json", out["orbit_cameras"])
    s2 = load_scene(tmp_path / "s.json")
    c2 = load_cameras(tmp_path / "c.json")
    np.testing.assert_array_equal(s2.mean, out["scene"].mean)
    np.testing.assert_array_equal(c2[0].world_to_camera, out["orbit_cameras"][0].world_to_camera)


# -- refit -----------------------------------------------------------------

def _hue_matrix(deg):
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    k = (1 - c) / 3
    r = math.sqrt(1 / 3) * s
    return np.array([[c + k, k - r, k + r], [k + r, c + k, k - r], [k - r, k + r, c + k]])


def test_refit_noop_edit_keeps_loss():
    out = make_synthetic_scene(0, 60, "cluster")
    views = [(c, render(out["scene"], c)["rgb"]) for c in out["orbit_cameras"][:2]]
    hist = []
    fitted = refit_scene(out["scene"], views, steps=20, lr=0.02, history=hist)
    assert abs(hist[-1] - hist[0]) <= 1e-6
    final = np.mean([np.mean((render(fitted, c)["rgb"].data - t.data) ** 2) for c, t in views])
    assert final <= hist[0] + 1e-6


def test_refit_towards_red_raises_red_channel():
    out = make_synthetic_scene(1, 80, "cluster")
    shift = np.array([0.25, -0.1, -0.1])[:, None, None]
    views = [(c, np.clip(render(out["scene"], c)["rgb"].data + shift * (render(out["scene"], c)["alpha"].data), 0, 1))
             for c in out["orbit_cameras"][:3]]
    fitted = refit_scene(out["scene"], views, steps=60, lr=0.02)
    assert fitted.color[:, 0].mean() > out["scene"].color[:, 0].mean()
    fitted.validate()


def test_refit_final_loss_not_above_initial():
    out = make_synthetic_scene(2, 50, "shell")
    rng = np.random.default_rng(0)
    views = [(c, rng.uniform(0, 1, (3, 32, 32))) for c in out["orbit_cameras"][:2]]
    hist = []
    refit_scene(out["scene"], views, steps=30, lr=0.05, history=hist)
    assert min(hist) <= hist[0]


def test_refit_hue_shift_psnr_gain():
    out = make_synthetic_scene(4, 200, "cluster")
    m = _hue_matrix(120)
    cams = out["orbit_cameras"][:3]
    views = [(c, np.clip(np.einsum("ij,jhw->ihw", m, render(out["scene"], c)["rgb"].data), 0, 1)) for c in cams]
    before = np.mean([compute_psnr(render(out["scene"], c)["rgb"], DTensor(t), 1.0) for c, t in views])
    fitted = refit_scene(out["scene"], views, steps=300, lr=0.02)
    after = np.mean([compute_psnr(render(fitted, c)["rgb"], DTensor(t), 1.0) for c, t in views])
    assert after >= before + 5.0
