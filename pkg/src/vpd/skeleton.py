"""Deterministic pose geometry.

2D joint normalization, chirality and vertical flips, rotation-canonical 3D
features, and the bone-angle difference predicate. Everything here is a pure
function over numpy arrays; nothing touches pixels or models.

Joint order (13 keypoints, eyes/ears excluded):
    0 Nose, 1 LShoulder, 2 RShoulder, 3 LElbow, 4 RElbow, 5 LWrist, 6 RWrist,
    7 LHip, 8 RHip, 9 LKnee, 10 RKnee, 11 LAnkle, 12 RAnkle
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePose

NUM_JOINTS = 13

JOINT_NAMES = (
    "Nose",
    "LShoulder",
    "RShoulder",
    "LElbow",
    "RElbow",
    "LWrist",
    "RWrist",
    "LHip",
    "RHip",
    "LKnee",
    "RKnee",
    "LAnkle",
    "RAnkle",
)

# Parent index per joint; -1 denotes the virtual root at the hip midpoint.
PARENT = (-1, -1, -1, 1, 2, 3, 4, -1, -1, 7, 8, 9, 10)

LEFT_RIGHT_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12))

NOSE, LSHOULDER, RSHOULDER = 0, 1, 2
LHIP, RHIP = 7, 8


@dataclass(frozen=True)
class SkeletonSpec:
    """Fixed 13-joint skeleton: names, chirality pairs, and kinematic tree.

    ``parent[i] == -1`` parents joint i to the virtual hip-midpoint root, so
    every joint owns exactly one bone (child, parent).
    """

    joint_names: tuple[str, ...] = JOINT_NAMES
    left_right_pairs: tuple[tuple[int, int], ...] = LEFT_RIGHT_PAIRS
    parent: tuple[int, ...] = PARENT
    bones: tuple[tuple[int, int], ...] = field(
        default_factory=lambda: tuple((i, p) for i, p in enumerate(PARENT))
    )

    def __post_init__(self):
        if len(self.joint_names) != NUM_JOINTS or len(self.parent) != NUM_JOINTS:
            raise ValueError("skeleton must have exactly 13 joints")
        lefts = [a for a, _ in self.left_right_pairs]
        rights = [b for _, b in self.left_right_pairs]
        if len(set(lefts)) != len(lefts) or len(set(rights)) != len(rights):
            raise ValueError("left/right pairing must be one-to-one")
        if set(lefts) & set(rights):
            raise ValueError("a joint cannot be both left and right")
        # acyclicity: walking parents from any joint must reach the -1 root
        for j in range(NUM_JOINTS):
            seen = set()
            cur = j
            while cur != -1:
                if cur in seen:
                    raise ValueError("parent relation has a cycle")
                seen.add(cur)
                cur = self.parent[cur]

    def children(self, j: int) -> list[int]:
        return [i for i, p in enumerate(self.parent) if p == j]


DEFAULT_SKELETON = SkeletonSpec()


@dataclass(frozen=True)
class RawPose2D:
    """13 joints in pixel coordinates with per-joint confidence scores."""

    joints: np.ndarray  # (13, 2) float
    joint_scores: np.ndarray  # (13,) in [0, 1]

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=np.float64)
        scores = np.asarray(self.joint_scores, dtype=np.float64)
        if joints.shape != (NUM_JOINTS, 2):
            raise ValueError(f"joints must be (13, 2), got {joints.shape}")
        if scores.shape != (NUM_JOINTS,):
            raise ValueError(f"joint_scores must be (13,), got {scores.shape}")
        if not np.all(np.isfinite(joints)):
            raise ValueError("joint coordinates must be finite")
        if np.any(scores < 0) or np.any(scores > 1):
            raise ValueError("joint scores must lie in [0, 1]")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "joint_scores", scores)

    @property
    def mean_score(self) -> float:
        return float(self.joint_scores.mean())


@dataclass(frozen=True)
class NormalizedPose2D:
    """Hip-centered, scale-normalized pose as a flat 26-vector (x0,y0,x1,y1,...)."""

    values: np.ndarray  # (26,)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (2 * NUM_JOINTS,):
            raise ValueError(f"values must be (26,), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "values", values)

    def as_joints(self) -> np.ndarray:
        return self.values.reshape(NUM_JOINTS, 2)


@dataclass(frozen=True)
class CanonicalPose3D:
    """Rotation-normalized per-joint features.

    Per joint: unit offset from parent (3), unit offset from hip center (3),
    and the cosine of the angle between the two bones meeting at the joint
    (0 where fewer than two bones meet). 13 x 7 = 91 values.
    """

    features: np.ndarray  # (91,)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.shape != (7 * NUM_JOINTS,):
            raise ValueError(f"features must be (91,), got {features.shape}")
        object.__setattr__(self, "features", features)


def hip_center(joints: np.ndarray) -> np.ndarray:
    """Midpoint of the left and right hip joints."""
    return 0.5 * (joints[LHIP] + joints[RHIP])


def normalize_2d(pose: RawPose2D, spec: SkeletonSpec = DEFAULT_SKELETON) -> NormalizedPose2D:
    """Center at the hip midpoint and scale into the [-0.5, 0.5] box.

    The scale is the largest absolute coordinate offset from the center, so
    the output always touches the box boundary (some entry is exactly +-0.5).
    Invariant to translation and positive uniform scaling of the input.

    Raises DegeneratePose when all joints coincide with the hip midpoint.
    """
    joints = pose.joints
    center = hip_center(joints)
    offsets = joints - center
    scale = float(np.abs(offsets).max())
    if scale < 1e-9:
        raise DegeneratePose("pose has zero spatial extent")
    return NormalizedPose2D(values=(offsets / (2.0 * scale)).reshape(-1))


def flip_normalized_2d(
    pose: NormalizedPose2D, spec: SkeletonSpec = DEFAULT_SKELETON
) -> NormalizedPose2D:
    """Mirror a normalized pose about the vertical axis.

    Negates x-coordinates and swaps each left/right joint pair; applying it
    twice returns the original pose exactly.
    """
    joints = pose.as_joints().copy()
    joints[:, 0] = -joints[:, 0]
    for left, right in spec.left_right_pairs:
        joints[[left, right]] = joints[[right, left]]
    return NormalizedPose2D(values=joints.reshape(-1))


def vertical_flip_2d(pose: RawPose2D) -> RawPose2D:
    """Flip a raw pose upside down (y -> -y); chirality and scores unchanged."""
    joints = pose.joints.copy()
    joints[:, 1] = -joints[:, 1]
    return RawPose2D(joints=joints, joint_scores=pose.joint_scores.copy())


def vertical_flip_normalized(pose: NormalizedPose2D) -> NormalizedPose2D:
    """Vertical flip applied directly in normalized space.

    Equals normalize_2d(vertical_flip_2d(raw)) exactly: the hip center's y
    negates with the joints and the scale is preserved, so normalization
    commutes with the flip.
    """
    joints = pose.as_joints().copy()
    joints[:, 1] = -joints[:, 1]
    return NormalizedPose2D(values=joints.reshape(-1))


def _unit(v: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < eps:
        return np.zeros_like(v)
    return v / n


def _bone_vectors(joints3d: np.ndarray, spec: SkeletonSpec) -> np.ndarray:
    """Direction child - parent for every bone; the -1 parent is the hip center."""
    center = hip_center(joints3d)
    out = np.empty((len(spec.bones), 3))
    for k, (child, parent) in enumerate(spec.bones):
        pp = center if parent == -1 else joints3d[parent]
        out[k] = joints3d[child] - pp
    return out


def canonicalize_3d(
    joints3d: np.ndarray, spec: SkeletonSpec = DEFAULT_SKELETON
) -> CanonicalPose3D:
    """Rotation-normalize a 3D pose and emit per-joint offset/angle features.

    The pose is rotated about the vertical (y) axis so the torso normal
    n = (RShoulder - LShoulder) x (hipCenter - shoulderCenter) points along
    +z; poses facing the camera already satisfy this and are left unchanged.
    When the torso normal is parallel to the vertical axis the rotation is
    ill-defined and the identity is used.

    Raises DegeneratePose when any bone is shorter than 1e-9.
    """
    joints3d = np.asarray(joints3d, dtype=np.float64)
    if joints3d.shape != (NUM_JOINTS, 3):
        raise ValueError(f"expected (13, 3) joints, got {joints3d.shape}")
    if not np.all(np.isfinite(joints3d)):
        raise ValueError("3D joints must be finite")

    center = hip_center(joints3d)
    shoulder_center = 0.5 * (joints3d[LSHOULDER] + joints3d[RSHOULDER])
    normal = np.cross(joints3d[RSHOULDER] - joints3d[LSHOULDER], center - shoulder_center)
    planar = float(np.hypot(normal[0], normal[2]))
    if planar < 1e-6:
        theta = 0.0
    else:
        theta = float(np.arctan2(normal[0], normal[2]))

    # R_y(-theta) maps the torso normal's xz-projection onto +z
    c, s = np.cos(-theta), np.sin(-theta)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    local = (joints3d - center) @ rot.T

    bone_dirs = _bone_vectors(local, spec)  # hip center is the origin now
    lengths = np.linalg.norm(bone_dirs, axis=1)
    if np.any(lengths < 1e-9):
        raise DegeneratePose("zero-length bone")

    features = np.zeros((NUM_JOINTS, 7))
    for j in range(NUM_JOINTS):
        parent = spec.parent[j]
        parent_pos = np.zeros(3) if parent == -1 else local[parent]
        features[j, 0:3] = _unit(local[j] - parent_pos)
        features[j, 3:6] = _unit(local[j])
        incident = [parent_pos - local[j]]
        for child in spec.children(j):
            incident.append(local[child] - local[j])
        if len(incident) >= 2:
            u, v = _unit(incident[0]), _unit(incident[1])
            features[j, 6] = float(np.clip(np.dot(u, v), -1.0, 1.0))
    return CanonicalPose3D(features=features.reshape(-1))


def pose_differs(
    a: np.ndarray,
    b: np.ndarray,
    spec: SkeletonSpec = DEFAULT_SKELETON,
    threshold_deg: float = 45.0,
) -> bool:
    """True when any bone direction differs between the poses by >= threshold.

    Symmetric in (a, b) and reflexively false. Raises DegeneratePose on a
    zero-length bone in either pose.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dirs_a = _bone_vectors(a, spec)
    dirs_b = _bone_vectors(b, spec)
    na = np.linalg.norm(dirs_a, axis=1)
    nb = np.linalg.norm(dirs_b, axis=1)
    if np.any(na < 1e-9) or np.any(nb < 1e-9):
        raise DegeneratePose("zero-length bone")
    cosines = np.clip((dirs_a * dirs_b).sum(axis=1) / (na * nb), -1.0, 1.0)
    angles = np.degrees(np.arccos(cosines))
    return bool(np.any(angles >= threshold_deg))
