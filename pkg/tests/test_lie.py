import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sais.lie import (AffineTransform, FrameSet, RigidTransform, ScaleCode, TwistVector, anchor_align_to_grasp,
                      apply_transform, compose_alignment, exp_se3, inference_grasp_pose, invert,
                      rodrigues_coefficients, rotation_about_z, strip_scale, training_grasp_pose, translation)

from conftest import expm_oracle, random_rotation, twist_matrix

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec6 = st.lists(finite, min_size=6, max_size=6).map(np.array)
positive = st.floats(0.2, 3.0)


def test_zero_twist_is_identity():
    assert np.array_equal(exp_se3(TwistVector()).matrix, np.eye(4))


def test_quarter_turn_about_z():
    h = exp_se3(TwistVector([0, 0, np.pi / 2], [0, 0, 0]))
    assert np.allclose(h.rotation, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_pure_translation():
    h = exp_se3(TwistVector([0, 0, 0], [1, 2, 3]))
    assert np.allclose(h.translation, [1, 2, 3])
    assert np.allclose(h.rotation, np.eye(3))


def test_matches_dense_exponential():
    rng = np.random.default_rng(0)
    for _ in range(200):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        v = np.concatenate([axis * rng.uniform(1e-6, np.pi), rng.normal(size=3)])
        assert np.max(np.abs(exp_se3(TwistVector.from_vector(v)).matrix - expm_oracle(twist_matrix(v)))) < 1e-9


@pytest.mark.parametrize("theta", [1e-2, 1e-3, 1e-4, 1e-5, 1e-8])
def test_series_coefficients_exact(theta):
    import mpmath

    mpmath.mp.dps = 50
    t = mpmath.mpf(theta)
    ref = (mpmath.sin(t) / t, (1 - mpmath.cos(t)) / t**2, (t - mpmath.sin(t)) / t**3)
    got = rodrigues_coefficients(theta, "series")
    tol = 1e-12 if theta <= 1e-3 else 1e-9
    for g, want in zip(got, ref):
        assert abs(g - float(want)) < tol


def test_series_at_zero():
    assert rodrigues_coefficients(0.0) == (1.0, 0.5, 1.0 / 6.0)
    with pytest.raises(ValueError):
        rodrigues_coefficients(0.0, "closed")


@pytest.mark.parametrize("theta", [1e-3, 1e-4, 1e-5])
def test_branches_agree_on_matrices(theta):
    rng = np.random.default_rng(int(-np.log10(theta)))
    for _ in range(20):
        axis = rng.normal(size=3)
        v = np.concatenate([axis / np.linalg.norm(axis) * theta, rng.normal(size=3)])
        a = exp_se3(TwistVector.from_vector(v), "series").matrix
        b = exp_se3(TwistVector.from_vector(v), "closed").matrix
        assert np.max(np.abs(a - b)) < 1e-9


def test_branches_continuous_at_switch():
    v = np.array([1e-4, 0, 0, 1.0, 1.0, 1.0])
    below = exp_se3(TwistVector.from_vector(v * (1 - 1e-14))).matrix
    above = exp_se3(TwistVector.from_vector(v)).matrix
    assert np.max(np.abs(below - above)) < 1e-12


@given(vec6)
def test_exp_of_negated_twist_is_inverse(v):
    h = exp_se3(TwistVector.from_vector(v))
    g = exp_se3(-TwistVector.from_vector(v))
    assert np.allclose((h @ g).matrix, np.eye(4), atol=1e-9)


@given(vec6)
def test_rotation_is_orthonormal(v):
    r = exp_se3(TwistVector.from_vector(v)).rotation
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(r), 1.0, atol=1e-12)


@given(vec6, positive, positive, positive)
def test_invert_roundtrip(v, a, b, c):
    h = compose_alignment(TwistVector.from_vector(v), [a, b, c])
    assert np.allclose((h @ invert(h)).matrix, np.eye(4), atol=1e-9)
    assert np.allclose((invert(h) @ h).matrix, np.eye(4), atol=1e-9)


def test_unit_scale_alignment_is_rigid_exp():
    v = np.array([0.1, -0.2, 0.3, 0.5, 0.0, -1.0])
    h = compose_alignment(TwistVector.from_vector(v), ScaleCode())
    assert np.allclose(h.matrix, exp_se3(TwistVector.from_vector(v)).matrix)


def test_scale_applied_before_rotation():
    h = compose_alignment(TwistVector([0, 0, np.pi / 2], [1, 0, 0]), [2, 1, 1])
    # (1,0,0) -> scaled (2,0,0) -> rotated (0,2,0) -> shifted
    assert np.allclose(apply_transform(h, [1, 0, 0]), h.translation + [0, 2, 0])


def test_invert_singular_raises():
    m = np.eye(4)
    m[2, 2] = 0.0
    with pytest.raises(np.linalg.LinAlgError):
        invert(AffineTransform(m))


def test_bad_bottom_row_rejected():
    m = np.eye(4)
    m[3, 0] = 1.0
    with pytest.raises(ValueError):
        AffineTransform(m)


def test_scale_code_must_be_positive():
    with pytest.raises(ValueError):
        ScaleCode([1.0, 0.0, 1.0])


def test_twist_rejects_nan():
    with pytest.raises(ValueError):
        TwistVector([np.nan, 0, 0], [0, 0, 0])


def test_apply_single_and_batch():
    h = translation([1, 2, 3])
    assert apply_transform(h, [0, 0, 0]).shape == (3,)
    assert apply_transform(h, np.zeros((5, 3))).shape == (5, 3)


def test_json_roundtrip():
    h = compose_alignment(TwistVector([0.1, 0.2, 0.3], [1, 2, 3]), [1.1, 0.9, 1.0])
    payload = json.loads(json.dumps(h.to_json("demo->align")))
    assert payload["frame_id"] == "demo->align"
    assert len(payload["matrix"]) == 16
    assert np.array_equal(AffineTransform.from_json(payload).matrix, h.matrix)


def test_strip_scale_keeps_rotation_and_translation():
    rng = np.random.default_rng(3)
    r = random_rotation(rng)
    m = np.eye(4)
    m[:3, :3] = r @ np.diag([1.3, 0.7, 2.0])
    m[:3, 3] = [1, 2, 3]
    g = strip_scale(AffineTransform(m))
    assert np.allclose(g.rotation, r)
    assert np.allclose(g.translation, [1, 2, 3])


def test_rotation_about_z_fixes_centre():
    h = rotation_about_z(0.7, [1.0, 2.0, 0.5])
    assert np.allclose(h.apply([1.0, 2.0, 0.5]), [1.0, 2.0, 0.5])
    assert np.allclose(h.apply([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])


# -- frame bookkeeping ---------------------------------------------------------


def test_identity_chain_gives_demo_frame():
    demo = RigidTransform(random_rotation(np.random.default_rng(1)), [0.3, 0.1, 0.2])
    frames = FrameSet.from_field_transforms(demo, [AffineTransform.identity()])
    assert np.allclose(training_grasp_pose(frames, 0).matrix, demo.matrix)


def test_anchor_grasp_is_demonstration_grasp():
    demo = translation([1, 0, 0])
    hs = [AffineTransform.identity(), exp_se3(TwistVector([0, 0, 0.4], [0.1, 0, 0]))]
    frames = FrameSet.from_field_transforms(demo, hs, anchor_index=0)
    assert np.allclose(frames.align_to_grasp.matrix, np.eye(4))
    assert np.allclose(training_grasp_pose(frames, 0).matrix, demo.matrix)


def test_training_grasp_follows_alignment():
    # shape 1 is shape 0 yawed by 30 degrees about the demonstration origin
    yaw = rotation_about_z(np.radians(30))
    h1 = invert(yaw)  # maps shape-1 demo coordinates onto the anchor
    frames = FrameSet.from_field_transforms(RigidTransform(), [AffineTransform.identity(), h1])
    assert np.allclose(training_grasp_pose(frames, 1).matrix, yaw.matrix)


def test_inference_grasp_chain():
    candidate = translation([0.0, 2.0, 0.0])
    h = exp_se3(TwistVector([0, 0, 0.2], [0.05, 0, 0]))
    frames = FrameSet.from_field_transforms(RigidTransform(), [AffineTransform.identity()], candidates=[candidate])
    g = inference_grasp_pose(frames, 0, 0, h)
    assert np.allclose(g.matrix, (candidate @ invert(h)).matrix)
    with pytest.raises(IndexError):
        inference_grasp_pose(frames, 0, 1, h)


def test_inference_strips_scale():
    frames = FrameSet.from_field_transforms(RigidTransform(), [AffineTransform.identity()],
                                            candidates=[RigidTransform()])
    h = compose_alignment(TwistVector([0, 0, 0.3], [0.1, 0.2, 0]), [1.2, 0.8, 1.0])
    g = inference_grasp_pose(frames, 0, 0, h)
    assert np.allclose(g.rotation.T @ g.rotation, np.eye(3))
    assert np.allclose(g.translation, invert(h).translation)


def test_anchor_with_scale_rejected():
    with pytest.raises(ValueError):
        anchor_align_to_grasp(AffineTransform(np.diag([2.0, 1.0, 1.0, 1.0])))


def test_frame_indices_checked():
    frames = FrameSet.from_field_transforms(RigidTransform(), [AffineTransform.identity()])
    with pytest.raises(IndexError):
        training_grasp_pose(frames, 3)
    with pytest.raises(IndexError):
        FrameSet.from_field_transforms(RigidTransform(), [AffineTransform.identity()], anchor_index=2)


@settings(max_examples=50)
@given(vec6)
def test_grasp_pose_is_rigid(v):
    frames = FrameSet.from_field_transforms(RigidTransform(), [AffineTransform.identity(),
                                                               exp_se3(TwistVector.from_vector(v))])
    r = training_grasp_pose(frames, 1).rotation
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)
