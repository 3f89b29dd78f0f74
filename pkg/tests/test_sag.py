import numpy as np
import pytest

from rayflow.lfcore import RayGradients, compute_gradients
from rayflow.sor import quadratic_energy, sor_sweep
from rayflow.structure_aware import (SAG_WEIGHTS, DisparityMap, SAGWeights, estimate_disparity, gather_plane,
                                     gather_planes, ray_flow_from_central, sag_energy, sag_problem, sag_solve,
                                     sag_weight_maps)
from rayflow.synth import Plane, SceneSpec, Texture, default_calibration, render, render_pair, single_plane_scene, \
    two_plane_scene
from rayflow.variational import GlobalParams


@pytest.fixture(scope="module")
def calib48():
    return default_calibration(n_u=48, n_v=48)


def _radiance_as_gradients(lf):
    # gathering is linear in the sampled field, so radiance can stand in for L_X
    z = np.zeros(lf.calib.shape)
    return RayGradients(lf.calib, lf.data, lf.data, z, z)


def test_plane_at_whole_pixel_disparity_gathers_one_scene_point(calib48):
    depth = calib48.gamma * calib48.cam_spacing_x / calib48.pixel_scale_u  # one pixel per camera step
    lf = render(SceneSpec([Plane(depth, Texture(seed=1))], calib48))
    dmap = DisparityMap(np.full((48, 48), calib48.gamma / depth))
    for centre in [(24, 24), (10, 30), (40, 8)]:
        plane = gather_plane(_radiance_as_gradients(lf), dmap, centre)
        assert plane.lx.size == 81
        assert plane.lx.std() < 1e-12


def test_plane_rays_meet_at_the_scene_point(calib48):
    depth = 300.0
    lf = render(SceneSpec([Plane(depth, Texture(seed=1))], calib48))
    dmap = DisparityMap(np.full((48, 48), calib48.gamma / depth))
    plane = gather_plane(_radiance_as_gradients(lf), dmap, (20, 28))
    X = plane.x + depth * plane.u / calib48.gamma
    Y = plane.y + depth * plane.v / calib48.gamma
    assert np.ptp(X) < 1e-9 and np.ptp(Y) < 1e-9


def test_plane_weights_are_symmetric_in_camera_offset(calib48):
    lf = render(SceneSpec([Plane(300.0, Texture(seed=1))], calib48))
    dmap = DisparityMap(np.full((48, 48), calib48.gamma / 300.0))
    ps = gather_planes(_radiance_as_gradients(lf), dmap, SAGWeights())
    h = np.broadcast_to(ps.weights, calib48.shape)[:, :, 24, 24]
    assert np.allclose(h, h[::-1, :]) and np.allclose(h, h[:, ::-1]) and np.allclose(h, h.T)
    assert h[4, 4] == h.max() and h[0, 0] < h[4, 4]


def test_disparity_agreement_weight_drops_for_other_depths(calib48):
    lf = render(SceneSpec([Plane(300.0, Texture(seed=1))], calib48))
    alpha = np.full((48, 48), calib48.gamma / 300.0)
    alpha[30:, :] = calib48.gamma / 500.0
    ps = gather_planes(_radiance_as_gradients(lf), DisparityMap(alpha), SAGWeights())
    h = np.broadcast_to(ps.weights, calib48.shape)
    # next to the depth step the outer cameras' rays land on the other surface; far away they do not
    ratio = h[:, 4, 29, 24] / h[:, 4, 15, 24]
    assert ratio.min() < 0.5
    assert np.allclose(h[:, :, 15, 24], h[:, :, 20, 24])


def test_weight_map_valley_follows_the_boundary(calib48):
    _, _, gt = render_pair(two_plane_scene((0.5, 0.0, 0.0), depths=(300.0, 400.0), calib=calib48))
    g = sag_weight_maps(gt.flow[..., :2], DisparityMap(gt.alpha), SAGWeights())
    boundary = np.argmin(np.abs(calib48.u_coords()))
    valley = np.argmin(g, axis=0)
    assert np.all(np.abs(valley - boundary) <= 2)
    assert g.max() == pytest.approx(0.5) and g.min() > 0
    # a flat flow and depth give the uniform maximum
    flat = sag_weight_maps(np.zeros((48, 48, 2)), DisparityMap(np.full((48, 48), 0.3)), SAGWeights())
    assert np.allclose(flat, 0.5)


def test_plane_sweep_finds_both_depths(calib48):
    lf0, _, gt = render_pair(two_plane_scene((0.5, 0.0, 0.0), depths=(300.0, 400.0), calib=calib48))
    dmap = estimate_disparity(lf0, alpha_range=(0.1, 0.6))
    core = (slice(4, -4), slice(4, -4))
    for true in (calib48.gamma / 300.0, calib48.gamma / 400.0):
        sel = np.isclose(gt.alpha, true)[core]
        assert abs(np.median(dmap.alpha[core][sel]) - true) < 0.05 * true
    hist, edges = np.histogram(dmap.alpha[core], bins=25, range=(0.1, 0.6))
    top = np.sort(np.argsort(hist)[-2:])
    centres = 0.5 * (edges[top] + edges[top + 1])
    assert np.allclose(centres, [calib48.gamma / 400.0, calib48.gamma / 300.0], rtol=0.05)


def test_disparity_map_helpers(calib48):
    d = DisparityMap.from_depth(np.full((4, 4), 250.0), calib48)
    assert np.allclose(d.d_alpha, 2.5)
    assert np.allclose(DisparityMap(np.array([0.0, 5.0])).alpha, [0.05, 2.0])
    noisy = d.with_noise(0.1, seed=2)
    assert np.std(noisy.alpha / d.alpha - 1) == pytest.approx(0.1, rel=0.5)
    with pytest.raises(ValueError):
        DisparityMap(np.ones(3), alpha_min=1.0, alpha_max=0.5)
    with pytest.raises(ValueError):
        estimate_disparity(render(single_plane_scene(calib=calib48)), alpha_range=(0.5, 0.1))


def test_ray_flow_from_central_copies_a_constant_field(calib48):
    V = np.broadcast_to([0.1, -0.2, 0.3], (48, 48, 3))
    out = ray_flow_from_central(V, DisparityMap(np.full((48, 48), 1 / 3)), calib48)
    assert np.allclose(out, (0.1, -0.2, 0.3))


@pytest.mark.parametrize("penalty", ["quadratic", "charbonnier"])
def test_sor_sweeps_lower_the_linearised_energy(calib48, penalty):
    lf0, lf1, gt = render_pair(single_plane_scene((0.3, 0.1, 0.2), calib=calib48))
    dmap = DisparityMap(gt.alpha)
    ps = gather_planes(compute_gradients(lf0, lf1), dmap, SAGWeights())
    g = np.full((48, 48), 0.5)
    p = GlobalParams(penalty=penalty)
    V0 = np.zeros((48, 48, 3))
    prob = sag_problem(ps, V0, np.zeros_like(V0), g, SAGWeights(), p)
    dV = np.zeros_like(V0)
    e = quadratic_energy(prob, dV)
    for _ in range(10):
        sor_sweep(prob, dV)
        e_new = quadratic_energy(prob, dV)
        assert e_new <= e + 1e-10 * abs(e)
        e = e_new
    if penalty == "quadratic":
        # the quadratic model is the energy itself up to the constant data term
        const = (ps.weights * ps.lt ** 2).sum()
        assert sag_energy(ps, V0 + dV, g, SAGWeights(), p, dV=dV) == pytest.approx(e + const, rel=1e-10)
    assert sag_energy(ps, V0 + dV, g, SAGWeights(), p, dV=dV) < sag_energy(ps, V0, g, SAGWeights(), p)


def test_solver_recovers_single_plane_motion(calib48):
    V = (0.3, 0.1, 0.2)
    lf0, lf1, gt = render_pair(single_plane_scene(V, texture=Texture(seed=1), calib=calib48))
    flow = sag_solve(lf0, lf1, DisparityMap(gt.alpha), p=GlobalParams(levels=2))
    assert flow.vectors.shape == (48, 48, 3)
    err = np.abs(flow.vectors - np.asarray(V))[6:-6, 6:-6]
    assert err.mean() < 0.01
    assert flow.status.sweeps > 0


def test_weights_and_defaults_validate():
    assert SAG_WEIGHTS[0] / SAG_WEIGHTS[1] == pytest.approx(8.0)
    with pytest.raises(ValueError):
        SAGWeights(sigma_g=0.0)
    with pytest.raises(ValueError):
        SAGWeights(lam=-1.0)
