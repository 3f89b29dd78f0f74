import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import edge_pixel, rig_patch, sample_edged_and_textured_windows, wide_rig
from rayflow.lfcore import RayGradients
from rayflow.synth import default_calibration
from rayflow.tensor import (
    DEFAULT_TAU,
    RankClass,
    StructureTensor,
    classify,
    default_tau_abs,
    eig3,
    normal_flow,
    recoverable_subspace,
    structure_tensor,
    tensor_maps,
)

elements = st.floats(-10, 10, allow_nan=False)


def _grads(calib, lx, ly, lz=None):
    lz = np.zeros(calib.shape) if lz is None else lz
    return RayGradients(calib, lx, ly, lz, np.zeros(calib.shape))


# --- eigen-decomposition ---------------------------------------------------------------------------


@given(arrays(np.float64, (5, 3), elements=elements))
def test_eig3_matches_numpy_on_gram_matrices(A):
    S = A.T @ A
    vals, vecs = eig3(S)
    ref = np.linalg.eigvalsh(S)[::-1]
    scale = max(ref[0], 1e-300)
    assert np.allclose(vals, ref, atol=1e-9 * scale)
    assert np.all(np.diff(vals) <= 1e-12 * scale)
    assert vals[-1] >= -1e-12 * scale
    assert np.allclose(vecs.T @ vecs, np.eye(3), atol=1e-8)
    assert np.allclose(S @ vecs, vecs * vals, atol=1e-7 * scale)


def test_eig3_handles_degenerate_spectra():
    for S in (np.zeros((3, 3)), np.eye(3) * 2.0, np.diag([1.0, 1.0, 0.0]), np.diag([0.0, 0.0, 3.0])):
        vals, vecs = eig3(S)
        assert np.allclose(vals, np.sort(np.diag(S))[::-1])
        assert np.allclose(vecs.T @ vecs, np.eye(3))
        assert np.allclose(S @ vecs, vecs * vals)


def test_eig3_is_vectorised():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 7, 6, 3))
    S = np.einsum("...ki,...kj->...ij", A, A)
    vals, _ = eig3(S)
    assert vals.shape == (4, 7, 3)
    assert np.allclose(vals, np.linalg.eigvalsh(S)[..., ::-1])


# --- structure tensor ------------------------------------------------------------------------------


def test_zero_gradients_give_zero_tensor():
    calib = default_calibration(n_u=8, n_v=8)
    g = _grads(calib, np.zeros(calib.shape), np.zeros(calib.shape))
    st_ = structure_tensor(g, (None, None, 3, 3), (4, 4, 4, 4))
    assert np.all(st_.s == 0) and np.all(st_.eigenvalues == 0)
    assert classify(st_) == RankClass.SMOOTH
    assert recoverable_subspace(st_).basis.shape == (0, 3)


def test_single_ray_outer_product():
    calib = default_calibration(n_u=8, n_v=8)
    lx = np.zeros(calib.shape)
    lx[4, 4, 4, 4] = 1.0
    st_ = structure_tensor(_grads(calib, lx, np.zeros(calib.shape)), (1, 1, 1, 1), (4, 4, 4, 4))
    assert np.array_equal(st_.s, np.diag([1.0, 0.0, 0.0]))
    assert st_.n_rays == 1


def test_tensor_is_sum_of_outer_products_and_trace(plane_grads_48):
    g = plane_grads_48
    window, centre = (3, 5, 7, 9), (4, 4, 20, 25)
    st_ = structure_tensor(g, window, centre)
    sl = (slice(3, 6), slice(2, 7), slice(17, 24), slice(21, 30))
    vecs = g.stacked()[sl].reshape(-1, 3)
    assert np.allclose(st_.s, vecs.T @ vecs, rtol=1e-12)
    assert np.allclose(st_.s, st_.s.T)
    assert np.isclose(np.trace(st_.s), (vecs ** 2).sum(), rtol=1e-12)
    assert st_.n_rays == vecs.shape[0]


def test_empty_window_is_an_error(plane_grads_48):
    with pytest.raises(ValueError):
        structure_tensor(plane_grads_48, (None, None, 0, 3), (4, 4, 10, 10))


def test_tensor_maps_agree_with_single_windows(plane_grads_48):
    vals, ranks, n = tensor_maps(plane_grads_48, window=(None, None, 9, 9))
    for iu, iv in [(0, 0), (10, 30), (24, 24), (47, 5)]:
        st_ = structure_tensor(plane_grads_48, (None, None, 9, 9), (4, 4, iu, iv))
        assert np.allclose(vals[iu, iv], st_.eigenvalues, rtol=1e-9, atol=1e-12)
        assert ranks[iu, iv] == classify(st_)
        assert n[iu, iv] == st_.n_rays


@given(arrays(np.float64, (40, 3), elements=elements))
def test_random_gradient_fields_are_psd(A):
    vals = StructureTensor.from_matrix(A.T @ A).eigenvalues
    assert vals[-1] >= -1e-12 * max(vals[0], 0.0) - 1e-300


# --- classification -----------------------------------------------------------------------------


def test_classify_validates_tau():
    st_ = StructureTensor.from_matrix(np.eye(3))
    for tau in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            classify(st_, tau)


def test_canonical_patches_classify_by_texture():
    centre = (4, 4, 24, 24)
    window = (None, None, 9, 9)
    calib = wide_rig()
    smooth = structure_tensor(rig_patch("constant"), window, centre)
    edge_grads = rig_patch("edge", 8.0)
    edge = structure_tensor(edge_grads, window, (4, 4, round(edge_pixel(calib, 8.0, 0.0)), 24))
    texture = structure_tensor(rig_patch("noise", 8.0, seed=1), window, centre)
    assert classify(smooth) == RankClass.SMOOTH
    assert classify(edge) == RankClass.EDGE
    assert classify(texture) == RankClass.FULL_TEXTURE
    l1, l2, l3 = edge.eigenvalues
    assert l2 / l1 > DEFAULT_TAU and l3 / l1 < DEFAULT_TAU


def test_edge_subspace_is_orthogonal_to_the_edge():
    calib = wide_rig()
    grads = rig_patch("edge", 8.0)
    st_ = structure_tensor(grads, (None, None, 9, 9), (4, 4, round(edge_pixel(calib, 8.0, 0.0)), 24))
    sub = recoverable_subspace(st_)
    assert sub.basis.shape == (2, 3) and not sub.non_physical
    # the vertical edge gives no information about motion along Y
    assert np.linalg.norm(sub.basis @ np.array([0.0, 1.0, 0.0])) < 0.1


def test_texture_subspace_is_full():
    st_ = structure_tensor(rig_patch("noise", 8.0, seed=2), (None, None, 9, 9), (4, 4, 24, 24))
    sub = recoverable_subspace(st_)
    assert sub.basis.shape == (3, 3)
    assert np.allclose(sub.basis @ sub.basis.T, np.eye(3), atol=1e-9)


def test_single_direction_spectrum_is_flagged():
    sub = recoverable_subspace(StructureTensor.from_matrix(np.diag([1.0, 0.0, 0.0])), tau_abs=1e-9)
    assert sub.basis.shape == (1, 3) and sub.non_physical
    assert np.allclose(np.abs(sub.basis[0]), (1.0, 0.0, 0.0))


@given(arrays(np.float64, (6, 3), elements=elements), st.floats(1e-3, 0.5))
def test_classification_matches_subspace_dimension(A, tau):
    st_ = StructureTensor.from_matrix(A.T @ A, n_rays=6)
    rank = classify(st_, tau)
    sub = recoverable_subspace(st_, tau)
    dim = sub.basis.shape[0]
    if rank == RankClass.SMOOTH:
        assert dim == 0
    elif rank == RankClass.FULL_TEXTURE:
        assert dim == 3
    else:
        assert dim == 2 or (dim == 1 and sub.non_physical)
    assert int(rank) != 1


def test_default_absolute_floor_scales_with_rays_and_range():
    assert default_tau_abs(100) == pytest.approx(1e-4)
    assert default_tau_abs(100, 2.0) == pytest.approx(4e-4)


# --- physical properties ------------------------------------------------------------------------------


def test_wider_windows_improve_edge_z_conditioning():
    calib = wide_rig()
    grads = rig_patch("edge", 8.0)
    iu = round(edge_pixel(calib, 8.0, 0.0))
    ratios = []
    for size in (5, 9, 17):
        l1, l2, _ = structure_tensor(grads, (None, None, size, size), (4, 4, iu, 24)).eigenvalues
        ratios.append(l1 / l2)
    assert ratios[0] > ratios[1] > ratios[2]


def test_default_camera_edge_is_numerically_near_rank_one():
    # documents the window-range effect: with a 3.6 mm aperture at 300 mm the
    # Z eigenvalue of an edge window is ~1e-5 of lambda_1 although rank 2 holds
    from rayflow.lfcore import compute_gradients
    from rayflow.synth import Plane, SceneSpec, Texture, render

    calib = default_calibration(n_u=48, n_v=48)
    lf = render(SceneSpec([Plane(300.0, Texture(kind="edge", edge_width=0.5))], calib))
    g = compute_gradients(lf, lf)
    l1, l2, l3 = structure_tensor(g, (None, None, 9, 9), (4, 4, 24, 24)).eigenvalues
    assert 0 < l2 / l1 < 1e-3
    assert l3 / l1 < 1e-9


def test_rank_one_spectra_do_not_occur_on_small_sample():
    kinds, _, vals, counts = sample_edged_and_textured_windows(100, seed=5, scenes=4)
    floor = 1e-6 * counts
    significant = vals[:, 0] > floor
    assert significant.all()
    assert np.all(vals[:, 1] >= 0.01 * vals[:, 0])


# --- normal flow -----------------------------------------------------------------------------------------


def test_normal_flow_examples():
    assert normal_flow((1.0, 0.0, 0.0), -2.0) == (2.0, 0.0, 0.0)
    assert normal_flow((0.3, -1.0, 2.0), 0.0) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        normal_flow((0.0, 0.0, 0.0), 1.0)


def test_normal_flow_satisfies_ray_flow_equation():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((10_000, 3)) * rng.uniform(0.01, 10, (10_000, 1))
    lt = rng.standard_normal(10_000) * 5
    worst = 0.0
    for gi, li in zip(g, lt):
        v = np.array(normal_flow(gi, li))
        scale = abs(li) + np.abs(gi).max() * np.abs(v).max()
        worst = max(worst, abs(gi @ v + li) / scale)
        # minimum norm: parallel to g
        assert np.allclose(np.cross(v, gi), 0, atol=1e-12 * scale)
    assert worst < 4 * np.finfo(float).eps
