import numpy as np
import pytest

from vpd.errors import DegeneratePose
from vpd.skeleton import (
    DEFAULT_SKELETON,
    NormalizedPose2D,
    RawPose2D,
    SkeletonSpec,
    canonicalize_3d,
    flip_normalized_2d,
    normalize_2d,
    pose_differs,
    vertical_flip_2d,
    vertical_flip_normalized,
)

from conftest import make_humanoid_3d, random_pose_2d, rot_y


def reference_normalize(joints: np.ndarray) -> np.ndarray:
    """Independent recomputation of the normalization by its defining formula."""
    center = 0.5 * (joints[7] + joints[8])
    offsets = joints - center
    scale = np.abs(offsets).max()
    return (offsets / (2 * scale)).reshape(-1)


class TestSkeletonSpec:
    def test_default_is_valid(self):
        spec = DEFAULT_SKELETON
        assert len(spec.joint_names) == 13
        assert len(spec.bones) == 13

    def test_rejects_cycle(self):
        parent = list(DEFAULT_SKELETON.parent)
        parent[3], parent[5] = 5, 3  # elbow <-> wrist loop
        with pytest.raises(ValueError):
            SkeletonSpec(parent=tuple(parent))

    def test_rejects_duplicate_pairing(self):
        with pytest.raises(ValueError):
            SkeletonSpec(left_right_pairs=((1, 2), (1, 4), (5, 6), (7, 8), (9, 10), (11, 12)))


class TestNormalize2D:
    def test_coincident_joints_degenerate(self):
        pose = RawPose2D(joints=np.full((13, 2), 5.0), joint_scores=np.ones(13))
        with pytest.raises(DegeneratePose):
            normalize_2d(pose)

    def test_hip_centered_unit_radius_is_halved(self, rng):
        joints = rng.uniform(-1, 1, size=(13, 2))
        joints[7] = (-0.5, 0.0)
        joints[8] = (0.5, 0.0)
        # force max-offset to exactly 1 at the nose
        joints[0] = (1.0, 0.3)
        joints = np.clip(joints, -1.0, 1.0)
        pose = RawPose2D(joints=joints, joint_scores=np.ones(13))
        out = normalize_2d(pose)
        np.testing.assert_allclose(out.values, joints.reshape(-1) / 2.0, atol=0)

    def test_translation_scale_invariance_oracle(self, rng):
        joints = rng.normal(0, 30, size=(13, 2))
        pose_a = RawPose2D(joints=joints, joint_scores=np.ones(13))
        pose_b = RawPose2D(joints=3.0 * joints + np.array([7.0, -2.0]), joint_scores=np.ones(13))
        out_a = normalize_2d(pose_a)
        out_b = normalize_2d(pose_b)
        np.testing.assert_allclose(out_a.values, out_b.values, atol=1e-9)
        np.testing.assert_allclose(out_a.values, reference_normalize(joints), atol=1e-12)

    def test_output_in_box_touching_boundary(self, rng):
        for _ in range(200):
            pose = random_pose_2d(rng)
            out = normalize_2d(pose)
            assert np.all(np.abs(out.values) <= 0.5 + 1e-12)
            assert abs(np.abs(out.values).max() - 0.5) < 1e-9


class TestFlipNormalized2D:
    def test_symmetric_pose_fixed_point(self):
        joints = np.zeros((13, 2))
        joints[7] = (-0.2, 0.0)
        joints[8] = (0.2, 0.0)
        joints[1] = (-0.3, 0.4)
        joints[2] = (0.3, 0.4)
        joints[5] = (-0.5, 0.2)
        joints[6] = (0.5, 0.2)
        joints[0] = (0.0, 0.5)
        pose = NormalizedPose2D(values=joints.reshape(-1))
        out = flip_normalized_2d(pose)
        np.testing.assert_allclose(out.values, pose.values, atol=1e-12)

    def test_involution(self, rng):
        for _ in range(50):
            pose = normalize_2d(random_pose_2d(rng))
            out = flip_normalized_2d(flip_normalized_2d(pose))
            np.testing.assert_array_equal(out.values, pose.values)

    def test_wrist_swap_by_hand(self):
        joints = np.zeros((13, 2))
        joints[7] = (-0.1, 0.0)
        joints[8] = (0.1, 0.0)
        joints[5] = (0.3, 0.1)   # LWrist
        joints[6] = (-0.2, 0.1)  # RWrist
        out = flip_normalized_2d(NormalizedPose2D(values=joints.reshape(-1))).as_joints()
        np.testing.assert_allclose(out[5], (0.2, 0.1))
        np.testing.assert_allclose(out[6], (-0.3, 0.1))

    def test_flip_pathways_commute(self, rng):
        # mirroring raw x then normalizing equals normalize-then-flip
        for _ in range(100):
            pose = random_pose_2d(rng)
            mirrored = RawPose2D(
                joints=pose.joints * np.array([-1.0, 1.0]), joint_scores=pose.joint_scores
            )
            # mirroring relabels chirality: swap left/right joints of the mirror
            relabeled = mirrored.joints.copy()
            for left, right in DEFAULT_SKELETON.left_right_pairs:
                relabeled[[left, right]] = relabeled[[right, left]]
            via_raw = normalize_2d(RawPose2D(joints=relabeled, joint_scores=pose.joint_scores))
            via_normalized = flip_normalized_2d(normalize_2d(pose))
            np.testing.assert_allclose(via_raw.values, via_normalized.values, atol=1e-12)


class TestVerticalFlip:
    def test_pose_on_x_axis_unchanged(self):
        joints = np.zeros((13, 2))
        joints[:, 0] = np.arange(13.0)
        pose = RawPose2D(joints=joints, joint_scores=np.ones(13))
        out = vertical_flip_2d(pose)
        np.testing.assert_array_equal(out.joints, joints)

    def test_involution_and_sign(self, rng):
        pose = random_pose_2d(rng)
        out = vertical_flip_2d(vertical_flip_2d(pose))
        np.testing.assert_array_equal(out.joints, pose.joints)
        np.testing.assert_array_equal(out.joint_scores, pose.joint_scores)
        single = pose.joints.copy()
        single[0] = (3.0, 4.0)
        flipped = vertical_flip_2d(RawPose2D(joints=single, joint_scores=pose.joint_scores))
        np.testing.assert_allclose(flipped.joints[0], (3.0, -4.0))

    def test_normalized_shortcut_matches_raw_pathway(self, rng):
        for _ in range(100):
            pose = random_pose_2d(rng)
            via_raw = normalize_2d(vertical_flip_2d(pose))
            via_norm = vertical_flip_normalized(normalize_2d(pose))
            np.testing.assert_allclose(via_raw.values, via_norm.values, atol=1e-12)


def no_rotation_features(joints: np.ndarray) -> np.ndarray:
    """Reference features computed with no alignment step at all."""
    spec = DEFAULT_SKELETON
    center = 0.5 * (joints[7] + joints[8])
    local = joints - center
    out = np.zeros((13, 7))
    for j in range(13):
        parent = spec.parent[j]
        parent_pos = np.zeros(3) if parent == -1 else local[parent]
        po = local[j] - parent_pos
        out[j, 0:3] = po / np.linalg.norm(po)
        ho = local[j]
        norm = np.linalg.norm(ho)
        if norm > 1e-9:
            out[j, 3:6] = ho / norm
        incident = [parent_pos - local[j]] + [
            local[c] - local[j] for c, p in enumerate(spec.parent) if p == j
        ]
        if len(incident) >= 2:
            u = incident[0] / np.linalg.norm(incident[0])
            v = incident[1] / np.linalg.norm(incident[1])
            out[j, 6] = np.clip(u @ v, -1, 1)
    return out.reshape(-1)


class TestCanonicalize3D:
    def test_facing_forward_needs_no_rotation(self):
        # the conftest figure faces +z, so the alignment angle is zero and the
        # features equal a computation that skips the rotation entirely
        j = make_humanoid_3d()
        base = canonicalize_3d(j)
        np.testing.assert_allclose(base.features, no_rotation_features(j), atol=1e-9)

    def test_vertical_rotation_invariance(self, rng):
        j = make_humanoid_3d()
        base = canonicalize_3d(j)
        for phi in rng.uniform(-np.pi, np.pi, size=25):
            rotated = j @ rot_y(phi).T
            out = canonicalize_3d(rotated)
            np.testing.assert_allclose(out.features, base.features, atol=1e-6)

    def test_straight_arm_cosine(self):
        j = make_humanoid_3d()
        # make the left arm collinear: shoulder -> elbow -> wrist on one line
        direction = np.array([-1.0, -0.5, 0.0])
        direction /= np.linalg.norm(direction)
        j[3] = j[1] + 0.3 * direction
        j[5] = j[1] + 0.6 * direction
        features = canonicalize_3d(j).features.reshape(13, 7)
        assert features[3, 6] == pytest.approx(-1.0, abs=1e-9)

    def test_unit_norms(self):
        features = canonicalize_3d(make_humanoid_3d()).features.reshape(13, 7)
        for j in range(13):
            assert np.linalg.norm(features[j, 0:3]) == pytest.approx(1.0, abs=1e-9)
            assert np.linalg.norm(features[j, 3:6]) == pytest.approx(1.0, abs=1e-9)
            assert -1.0 <= features[j, 6] <= 1.0

    def test_zero_bone_degenerate(self):
        j = make_humanoid_3d()
        j[5] = j[3]  # wrist collapses onto elbow
        with pytest.raises(DegeneratePose):
            canonicalize_3d(j)


class TestPoseDiffers:
    def test_reflexively_false(self):
        j = make_humanoid_3d()
        assert pose_differs(j, j) is False

    def test_rotated_forearm_detected(self):
        j = make_humanoid_3d()
        k = j.copy()
        # rotate the left forearm (wrist about elbow) by 90 degrees in-plane
        arm = k[5] - k[3]
        k[5] = k[3] + np.array([-arm[1], arm[0], arm[2]])
        assert pose_differs(j, k) is True
        assert pose_differs(k, j) is True

    def test_rigid_rotation_below_threshold(self):
        j = make_humanoid_3d()
        rotated = j @ rot_y(np.radians(10.0)).T
        assert pose_differs(j, rotated, threshold_deg=45.0) is False

    def test_threshold_edge_inclusive(self):
        j = make_humanoid_3d()
        k = j.copy()
        arm = k[5] - k[3]
        # tilt the forearm by exactly 50 degrees toward a perpendicular axis
        perp = np.cross(arm, [0.0, 0.0, 1.0])
        perp /= np.linalg.norm(perp)
        alpha = np.radians(50.0)
        k[5] = k[3] + np.cos(alpha) * arm + np.sin(alpha) * np.linalg.norm(arm) * perp
        assert pose_differs(j, k, threshold_deg=50.0 - 1e-6) is True
        assert pose_differs(j, k, threshold_deg=50.0 + 1e-3) is False

    def test_zero_bone_raises(self):
        j = make_humanoid_3d()
        k = j.copy()
        k[5] = k[3]
        with pytest.raises(DegeneratePose):
            pose_differs(j, k)
