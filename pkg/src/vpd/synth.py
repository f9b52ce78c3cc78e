"""Synthetic articulated-figure oracle.

Generates clips of a stick figure performing one of six motion programs,
with known 3D pose, pinhole multi-camera 2D projections, deterministic
rendered crops, exact per-pixel flow, and a controllable model of teacher
noise whose emitted confidences are honestly coupled to the applied error.

Everything is a pure function of its arguments and the seed, so clips are
bit-reproducible and safe to generate in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import BehindCamera, OutOfBounds, UnknownClass
from .skeleton import DEFAULT_SKELETON, RawPose2D, hip_center

MOTION_CLASSES = (
    "arm_swing",
    "fast_wave",
    "squat",
    "jumping_jack",
    "lunge",
    "torso_twist",
)

FIGURE_THICKNESS = 2.6

# One fixed color per limb TYPE, shared by every class (appearance carries no
# class signal) and by left/right partners (mirroring an image then yields a
# render the generator itself could have produced, so horizontal-flip
# augmentation with label-swapped targets stays consistent, as with real
# footage where the two arms look alike).
_LIMB_COLORS = {
    "head": (240, 240, 90),
    "torso": (80, 160, 230),
    "upper_arm": (230, 80, 80),
    "forearm": (250, 150, 60),
    "pelvis": (160, 110, 250),
    "thigh": (90, 210, 120),
    "shin": (210, 200, 160),
}
# bone order follows the skeleton: nose, shoulders, elbows, wrists, hips,
# knees, ankles (each bone inherits its child's limb type)
BONE_PALETTE = np.array(
    [
        _LIMB_COLORS["head"],
        _LIMB_COLORS["torso"],
        _LIMB_COLORS["torso"],
        _LIMB_COLORS["upper_arm"],
        _LIMB_COLORS["upper_arm"],
        _LIMB_COLORS["forearm"],
        _LIMB_COLORS["forearm"],
        _LIMB_COLORS["pelvis"],
        _LIMB_COLORS["pelvis"],
        _LIMB_COLORS["thigh"],
        _LIMB_COLORS["thigh"],
        _LIMB_COLORS["shin"],
        _LIMB_COLORS["shin"],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class CameraSpec:
    azimuth: float  # radians about the vertical axis
    elevation: float  # radians above the horizon
    distance: float
    image_size: int = 128

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("camera distance must be positive")
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")

    @property
    def focal(self) -> float:
        return 1.25 * self.image_size

    def position(self) -> np.ndarray:
        ce = np.cos(self.elevation)
        return self.distance * np.array(
            [ce * np.sin(self.azimuth), np.sin(self.elevation), ce * np.cos(self.azimuth)]
        )

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right/up/forward unit vectors of a camera looking at the origin."""
        pos = self.position()
        forward = -pos / np.linalg.norm(pos)
        world_up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, world_up)
        norm = np.linalg.norm(right)
        if norm < 1e-9:  # looking straight down: fall back to +x
            right = np.array([1.0, 0.0, 0.0])
        else:
            right = right / norm
        up = np.cross(right, forward)
        return right, up, forward


@dataclass(frozen=True)
class NoiseModel:
    """Teacher corruption: where the noise goes and what confidence it emits.

    A ``corruption_rate`` fraction of frames receives heavy error; every
    frame receives mild jitter of ``baseline_sigma`` pixels. Heavy error is
    drawn from a mixture of failure modes: isotropic Gaussian scatter,
    left/right swaps, keypoint jumbles, whole-pose drift, and substitution
    of a valid pose from another moment of the clip (a confidently wrong
    estimate - the hardest to spot downstream). Each joint's emitted score
    is a monotone non-increasing function of the magnitude of the
    displacement actually applied to it.
    """

    joint_noise_sigma: float = 6.0
    corruption_rate: float = 0.0
    baseline_sigma: float = 0.0
    coupling_scale: float = 8.0
    # gaussian, swap, jumble, drift, substitute
    mode_weights: tuple[float, ...] = (1.0, 0.0, 0.0, 0.0, 0.0)
    # how strongly corruption concentrates on fast-motion frames (0 = uniform);
    # the per-clip average corruption probability stays corruption_rate
    speed_coupling: float = 0.0
    confidence_coupling: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.joint_noise_sigma < 0 or self.baseline_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must be in [0, 1]")
        if self.speed_coupling < 0:
            raise ValueError("speed_coupling must be >= 0")
        if self.coupling_scale <= 0:
            raise ValueError("coupling_scale must be positive")
        if len(self.mode_weights) != 5 or min(self.mode_weights) < 0 or sum(self.mode_weights) <= 0:
            raise ValueError("mode_weights must be 5 non-negative values, not all zero")
        if self.confidence_coupling is not None:
            probe = np.linspace(0.0, 60.0, 121)
            values = np.asarray(self.confidence_coupling(probe), dtype=np.float64)
            if np.any(np.diff(values) > 1e-12):
                raise ValueError("confidence coupling must be monotone non-increasing")

    def score_for_magnitude(self, magnitude: np.ndarray) -> np.ndarray:
        if self.confidence_coupling is not None:
            return np.clip(self.confidence_coupling(magnitude), 0.0, 1.0)
        return np.exp(-np.asarray(magnitude, dtype=np.float64) / self.coupling_scale)

    def to_config(self) -> dict:
        return {
            "joint_noise_sigma": self.joint_noise_sigma,
            "corruption_rate": self.corruption_rate,
            "baseline_sigma": self.baseline_sigma,
            "coupling_scale": self.coupling_scale,
            "mode_weights": list(self.mode_weights),
            "speed_coupling": self.speed_coupling,
        }


@dataclass
class FigureState:
    """Per-frame pose parameters driving the articulated figure."""

    angles: np.ndarray  # (T, 10) motion parameters
    root: np.ndarray  # (T, 3)
    motion_class: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.angles)) or not np.all(np.isfinite(self.root)):
            raise ValueError("figure state must be finite")
        if len(self.root) > 1:
            step = np.abs(np.diff(self.root, axis=0)).max()
            if step > 0.2:
                raise ValueError("root trajectory must be continuous")


@dataclass
class SyntheticClip:
    frames: np.ndarray  # (T, H, W, 3) uint8
    flows: np.ndarray  # (T, 2, H, W) float32, exact, pre-quantization
    masks: np.ndarray  # (T, H, W) bool figure mask
    gt_pose2d: list[RawPose2D]
    teacher_pose2d: list[RawPose2D]
    gt_pose3d: np.ndarray  # (T, 13, 3)
    action_intervals: list[tuple[int, int, int]]  # inclusive (start, end, class)
    fps: float
    camera: CameraSpec
    state: FigureState
    corrupted_frames: np.ndarray | None = None  # which frames got heavy noise

    def __post_init__(self):
        lengths = {
            len(self.frames),
            len(self.flows),
            len(self.masks),
            len(self.gt_pose2d),
            len(self.teacher_pose2d),
            len(self.gt_pose3d),
        }
        if len(lengths) != 1:
            raise ValueError("per-frame lists must have equal lengths")

    @property
    def length(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# articulated figure


_BONE_LENGTHS = {
    "hip_half": 0.12,
    "torso": 0.55,
    "neck": 0.20,
    "shoulder_half": 0.18,
    "upper_arm": 0.27,
    "forearm": 0.26,
    "thigh": 0.45,
    "shin": 0.45,
}

# angle vector layout
(
    A_L_ABDUCT,
    A_R_ABDUCT,
    A_L_SWING,
    A_R_SWING,
    A_ELBOW,
    A_LEG_SPREAD,
    A_L_HIPSWING,
    A_R_HIPSWING,
    A_KNEE,
    A_YAW,
) = range(10)


def _rot_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    one = 1.0 - c
    return np.array(
        [
            [c + x * x * one, x * y * one - z * s, x * z * one + y * s],
            [y * x * one + z * s, c + y * y * one, y * z * one - x * s],
            [z * x * one - y * s, z * y * one + x * s, c + z * z * one],
        ]
    )


def build_pose3d(angles: np.ndarray, root: np.ndarray) -> np.ndarray:
    """13x3 joint positions for one frame of motion parameters."""
    L = _BONE_LENGTHS
    yaw = angles[A_YAW]
    # anatomical right; the figure faces +z at yaw 0, so its right is -x
    right = np.array([-np.cos(yaw), 0.0, np.sin(yaw)])
    up = np.array([0.0, 1.0, 0.0])
    forward = np.cross(up, right)

    j = np.zeros((13, 3))
    j[7] = root - L["hip_half"] * right  # LHip
    j[8] = root + L["hip_half"] * right  # RHip
    mid_shoulder = root + L["torso"] * up
    j[1] = mid_shoulder - L["shoulder_half"] * right  # LShoulder
    j[2] = mid_shoulder + L["shoulder_half"] * right  # RShoulder
    # the forward nose offset is the facing cue that disambiguates
    # front from back views (and with it left from right limbs)
    j[0] = mid_shoulder + L["neck"] * up + 0.12 * forward  # Nose

    down = -up
    for side, shoulder, abduct, swing in (
        (-1.0, 1, angles[A_L_ABDUCT], angles[A_L_SWING]),
        (1.0, 2, angles[A_R_ABDUCT], angles[A_R_SWING]),
    ):
        # lift sideways in the coronal plane, then swing in the sagittal plane
        rot = _rot_axis(right, swing) @ _rot_axis(forward, -side * abduct)
        upper_dir = rot @ down
        elbow = j[shoulder] + L["upper_arm"] * upper_dir
        bend = _rot_axis(np.cross(upper_dir, forward) + 1e-9 * right, -angles[A_ELBOW])
        wrist = elbow + L["forearm"] * (bend @ upper_dir)
        j[3 if side < 0 else 4] = elbow
        j[5 if side < 0 else 6] = wrist

    for side, hip, hip_swing in (
        (-1.0, 7, angles[A_L_HIPSWING]),
        (1.0, 8, angles[A_R_HIPSWING]),
    ):
        rot = _rot_axis(right, hip_swing) @ _rot_axis(forward, -side * angles[A_LEG_SPREAD])
        thigh_dir = rot @ down
        knee = j[hip] + L["thigh"] * thigh_dir
        bend = _rot_axis(right, angles[A_KNEE])
        ankle = knee + L["shin"] * (bend @ thigh_dir)
        j[9 if side < 0 else 10] = knee
        j[11 if side < 0 else 12] = ankle
    return j


def _class_program(class_id: int, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per-frame motion parameters for one action segment (t in seconds)."""
    freq_jitter = rng.uniform(0.85, 1.15)
    amp_jitter = rng.uniform(0.85, 1.15)
    phase = rng.uniform(0.0, 2 * np.pi)
    out = np.zeros((len(t), 10))
    out[:, A_KNEE] = 0.08

    if class_id == 0:  # arm_swing: both arms rise and fall together
        f = 1.1 * freq_jitter
        lift = 0.35 + 0.85 * amp_jitter * (0.5 + 0.5 * np.sin(2 * np.pi * f * t + phase))
        out[:, A_L_ABDUCT] = lift
        out[:, A_R_ABDUCT] = lift
        out[:, A_ELBOW] = 0.15
    elif class_id == 1:  # fast_wave: quicker, left-dominant, elbows working
        f = 2.0 * freq_jitter
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * f * t + phase)
        out[:, A_L_ABDUCT] = 0.4 + 0.95 * amp_jitter * wave
        out[:, A_R_ABDUCT] = 0.3 + 0.35 * amp_jitter * wave
        out[:, A_ELBOW] = 0.4 + 0.6 * np.sin(2 * np.pi * f * t + phase + 1.1)
    elif class_id == 2:  # squat: knees fold, torso counterbalances, arms forward
        f = 0.9 * freq_jitter
        fold = 0.5 + 0.5 * np.sin(2 * np.pi * f * t + phase)
        out[:, A_KNEE] = 0.15 + 1.1 * amp_jitter * fold
        out[:, A_L_HIPSWING] = -0.45 * fold
        out[:, A_R_HIPSWING] = -0.45 * fold
        out[:, A_L_SWING] = 0.7 * fold
        out[:, A_R_SWING] = 0.7 * fold
    elif class_id == 3:  # jumping_jack: arms and legs spread on the same beat
        f = 1.3 * freq_jitter
        beat = 0.5 + 0.5 * np.sin(2 * np.pi * f * t + phase)
        out[:, A_L_ABDUCT] = 1.3 * amp_jitter * beat
        out[:, A_R_ABDUCT] = 1.3 * amp_jitter * beat
        out[:, A_LEG_SPREAD] = 0.5 * amp_jitter * beat
    elif class_id == 4:  # lunge: alternating leg swings, arms counter-swinging
        f = 1.0 * freq_jitter
        swing = 0.8 * amp_jitter * np.sin(2 * np.pi * f * t + phase)
        out[:, A_L_HIPSWING] = swing
        out[:, A_R_HIPSWING] = -swing
        out[:, A_L_SWING] = -0.5 * swing
        out[:, A_R_SWING] = 0.5 * swing
        out[:, A_KNEE] = 0.25
    elif class_id == 5:  # torso_twist: yaw oscillation with arms held out
        f = 0.9 * freq_jitter
        out[:, A_YAW] = 0.75 * amp_jitter * np.sin(2 * np.pi * f * t + phase)
        out[:, A_L_ABDUCT] = 1.15
        out[:, A_R_ABDUCT] = 1.15
        out[:, A_ELBOW] = 0.2
    else:
        raise UnknownClass(f"class_id {class_id} outside 0..{len(MOTION_CLASSES) - 1}")
    return out


def _idle_program(t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    phase = rng.uniform(0.0, 2 * np.pi)
    out = np.zeros((len(t), 10))
    sway = 0.05 * np.sin(2 * np.pi * 0.3 * t + phase)
    out[:, A_L_ABDUCT] = 0.12 + sway
    out[:, A_R_ABDUCT] = 0.12 - sway
    out[:, A_KNEE] = 0.08 + 0.02 * np.sin(2 * np.pi * 0.2 * t + phase)
    return out


def make_figure_state(
    class_id: int,
    length: int,
    fps: float,
    rng: np.random.Generator,
    actions_per_clip: int | None = None,
) -> tuple[FigureState, list[tuple[int, int, int]]]:
    """Idle/action timeline with smooth 5-frame blends at the boundaries."""
    if class_id < 0 or class_id >= len(MOTION_CLASSES):
        raise UnknownClass(f"class_id {class_id} outside 0..{len(MOTION_CLASSES) - 1}")
    if actions_per_clip is None:
        actions_per_clip = max(1, length // 100)

    min_gap = 8
    # shrink to fit short clips: a lone action may drop to 10 frames
    max_len = max(length - 2 * min_gap, 10)
    action_lens = [min(int(rng.integers(30, 45)), max_len) for _ in range(actions_per_clip)]
    while sum(action_lens) + (len(action_lens) + 1) * min_gap > length and len(action_lens) > 1:
        action_lens = action_lens[:-1]
    if action_lens and sum(action_lens) + (len(action_lens) + 1) * min_gap > length:
        action_lens = [max(length - 2 * min_gap, 2)] if length > 2 * min_gap + 2 else []
    slack = length - sum(action_lens) - (len(action_lens) + 1) * min_gap
    cuts = np.sort(rng.integers(0, slack + 1, size=len(action_lens))) if slack > 0 else np.zeros(
        len(action_lens), dtype=int
    )

    intervals = []
    cursor = 0
    for i, alen in enumerate(action_lens):
        gap = min_gap + (int(cuts[i]) - (int(cuts[i - 1]) if i else 0))
        start = cursor + gap
        intervals.append((start, start + alen - 1, class_id))
        cursor = start + alen

    t = np.arange(length) / fps
    angles = _idle_program(t, rng)
    for start, end, _ in intervals:
        seg = _class_program(class_id, t[start : end + 1], rng)
        angles[start : end + 1] = seg
        # linear blend into and out of the action over up to 5 frames
        for offset in range(1, 6):
            w = 1.0 - offset / 6.0
            if start - offset >= 0:
                angles[start - offset] = (1 - w) * angles[start - offset] + w * seg[0]
            if end + offset < length:
                angles[end + offset] = (1 - w) * angles[end + offset] + w * seg[-1]

    drift_phase = rng.uniform(0.0, 2 * np.pi, size=2)
    root = np.zeros((length, 3))
    root[:, 0] = 0.18 * np.sin(2 * np.pi * 0.12 * t + drift_phase[0])
    root[:, 2] = 0.12 * np.sin(2 * np.pi * 0.09 * t + drift_phase[1])
    state = FigureState(angles=angles, root=root, motion_class=class_id)
    return state, intervals


# ---------------------------------------------------------------------------
# projection and rendering


def project_points(points3d: np.ndarray, camera: CameraSpec) -> np.ndarray:
    """Pinhole projection of world points into pixel coordinates."""
    points3d = np.atleast_2d(np.asarray(points3d, dtype=np.float64))
    right, up, forward = camera.basis()
    rel = points3d - camera.position()
    depth = rel @ forward
    if np.any(depth <= 1e-6):
        raise BehindCamera("point at or behind the camera plane")
    cx = cy = camera.image_size / 2.0
    u = camera.focal * (rel @ right) / depth + cx
    v = cy - camera.focal * (rel @ up) / depth
    return np.stack([u, v], axis=-1)


def project_pose(pose3d: np.ndarray, camera: CameraSpec) -> RawPose2D:
    """Project a 13x3 pose; emitted joint scores are 1 (projection is exact)."""
    joints = project_points(pose3d, camera)
    return RawPose2D(joints=joints, joint_scores=np.ones(13))


def _bone_segments(joints2d: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    center = hip_center(joints2d)
    segments = []
    for child, parent in DEFAULT_SKELETON.bones:
        a = center if parent == -1 else joints2d[parent]
        segments.append((a, joints2d[child]))
    return segments


def render_frame(
    pose2d: RawPose2D,
    size: int,
    prev_pose2d: RawPose2D | None = None,
    thickness: float = FIGURE_THICKNESS,
    palette: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterize a stick figure and its exact flow from the previous pose.

    Every figure pixel belongs to its nearest bone; its position in the
    previous frame is the same (along-bone fraction, perpendicular offset)
    coordinate evaluated on the previous bone, which reproduces rigid limb
    motion exactly and maps joint pixels to the previous joint positions.

    Returns (rgb uint8 HxWx3, flow float32 2xHxW, mask bool HxW). The flow
    is zero wherever the figure is absent and on the first frame of a clip.
    """
    joints = pose2d.joints
    if joints.min() < 0 or joints.max() >= size:
        raise OutOfBounds("pose joints must lie inside the image")
    if palette is None:
        palette = BONE_PALETTE

    segments = _bone_segments(joints)
    prev_segments = _bone_segments(prev_pose2d.joints) if prev_pose2d is not None else None

    best_d2 = np.full((size, size), np.inf)
    best_bone = np.full((size, size), -1, dtype=np.int32)
    best_s = np.zeros((size, size))
    best_n = np.zeros((size, size))

    for k, (a, b) in enumerate(segments):
        x0 = max(int(np.floor(min(a[0], b[0]) - thickness - 1)), 0)
        x1 = min(int(np.ceil(max(a[0], b[0]) + thickness + 1)) + 1, size)
        y0 = max(int(np.floor(min(a[1], b[1]) - thickness - 1)), 0)
        y1 = min(int(np.ceil(max(a[1], b[1]) + thickness + 1)) + 1, size)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px = np.stack([xs, ys], axis=-1).astype(np.float64)
        ab = b - a
        ab_len2 = max(float(ab @ ab), 1e-12)
        rel = px - a
        s = (rel @ ab) / ab_len2
        s_clip = np.clip(s, 0.0, 1.0)
        closest = a + s_clip[..., None] * ab
        d2 = ((px - closest) ** 2).sum(-1)
        tangent = ab / np.sqrt(ab_len2)
        normal = np.array([-tangent[1], tangent[0]])
        n = rel @ normal
        window = best_d2[y0:y1, x0:x1]
        better = d2 < window
        window[better] = d2[better]
        best_bone[y0:y1, x0:x1][better] = k
        best_s[y0:y1, x0:x1][better] = s[better]
        best_n[y0:y1, x0:x1][better] = n[better]

    mask = best_d2 <= thickness * thickness
    rgb = np.zeros((size, size, 3), dtype=np.float64)
    shade = np.zeros((size, size))
    shade[mask] = 1.0 - 0.45 * (best_d2[mask] / (thickness * thickness))
    for k in range(len(segments)):
        sel = mask & (best_bone == k)
        rgb[sel] = palette[k % len(palette)] * shade[sel, None]

    flow = np.zeros((2, size, size), dtype=np.float32)
    if prev_segments is not None and mask.any():
        ys, xs = np.nonzero(mask)

        def reconstruct(seg_a, seg_b, s, n):
            ab = seg_b - seg_a
            length = np.linalg.norm(ab)
            if length < 1e-9:
                return np.broadcast_to(seg_a, (len(s), 2))
            tangent = ab / length
            normal = np.array([-tangent[1], tangent[0]])
            return seg_a + s[:, None] * ab + n[:, None] * normal

        for k in range(len(segments)):
            sel = best_bone[ys, xs] == k
            if not sel.any():
                continue
            s = best_s[ys[sel], xs[sel]]
            n = best_n[ys[sel], xs[sel]]
            # same reconstruction formula on both frames, so identical poses
            # cancel to exactly zero and rigid motion maps exactly
            cur_pos = reconstruct(*segments[k], s, n)
            prev_pos = reconstruct(*prev_segments[k], s, n)
            delta = cur_pos - prev_pos
            flow[0, ys[sel], xs[sel]] = delta[:, 0]
            flow[1, ys[sel], xs[sel]] = delta[:, 1]
    return rgb.astype(np.uint8), flow, mask


# ---------------------------------------------------------------------------
# teacher noise


def _corruption_probabilities(gt: list[RawPose2D], noise: NoiseModel) -> np.ndarray:
    """Per-frame heavy-corruption probability.

    With speed coupling, fast-motion frames (where real estimators blur and
    fail) are proportionally more likely to be corrupted; probabilities are
    rescaled so their clip mean stays at corruption_rate.
    """
    total = len(gt)
    if noise.speed_coupling <= 0 or total < 2:
        return np.full(total, noise.corruption_rate)
    speeds = np.zeros(total)
    for t in range(1, total):
        speeds[t] = np.linalg.norm(gt[t].joints - gt[t - 1].joints, axis=1).mean()
    speeds[0] = speeds[1]
    mean_speed = max(speeds.mean(), 1e-9)
    weights = 1.0 + noise.speed_coupling * (speeds / mean_speed - 1.0)
    weights = np.maximum(weights, 0.05)
    probs = noise.corruption_rate * weights / weights.mean()
    return np.clip(probs, 0.0, 1.0)


def _apply_noise(
    gt: list[RawPose2D], noise: NoiseModel, rng: np.random.Generator
) -> tuple[list[RawPose2D], np.ndarray]:
    """Corrupt projected poses; returns teacher poses and corruption flags."""
    total = len(gt)
    corrupted = rng.uniform(size=total) < _corruption_probabilities(gt, noise)
    weights = np.asarray(noise.mode_weights, dtype=np.float64)
    weights = weights / weights.sum()
    teacher: list[RawPose2D] = []
    for t in range(total):
        joints = gt[t].joints.copy()
        displaced = joints.copy()
        if noise.baseline_sigma > 0:
            displaced = displaced + rng.normal(0.0, noise.baseline_sigma, size=(13, 2))
        if corrupted[t]:
            mode = int(rng.choice(4, p=weights))
            if mode == 0:  # isotropic scatter
                displaced = displaced + rng.normal(0.0, noise.joint_noise_sigma, size=(13, 2))
            elif mode == 1:  # left/right swap
                for left, right in DEFAULT_SKELETON.left_right_pairs:
                    displaced[[left, right]] = displaced[[right, left]]
            elif mode == 2:  # jumbled keypoints
                displaced = displaced[rng.permutation(13)]
            else:  # whole-pose drift
                displaced = displaced + rng.normal(0.0, 1.5 * noise.joint_noise_sigma, size=2)
        magnitude = np.linalg.norm(displaced - joints, axis=1)
        scores = np.clip(noise.score_for_magnitude(magnitude), 0.0, 1.0)
        teacher.append(RawPose2D(joints=displaced, joint_scores=scores))
    return teacher, corrupted


# ---------------------------------------------------------------------------
# clip generation and the on-disk archive


def generate_clip(
    class_id: int,
    length: int,
    camera: CameraSpec,
    noise: NoiseModel,
    seed: int,
    fps: float = 25.0,
    actions_per_clip: int | None = None,
) -> SyntheticClip:
    """Deterministically generate one clip with ground truth and teacher views."""
    if length < 2:
        raise ValueError("clip length must be >= 2")
    rng = np.random.default_rng(seed)
    state, intervals = make_figure_state(class_id, length, fps, rng, actions_per_clip)

    pose3d = np.stack([build_pose3d(state.angles[t], state.root[t]) for t in range(length)])
    gt_pose2d = [project_pose(pose3d[t], camera) for t in range(length)]

    size = camera.image_size
    frames = np.zeros((length, size, size, 3), dtype=np.uint8)
    flows = np.zeros((length, 2, size, size), dtype=np.float32)
    masks = np.zeros((length, size, size), dtype=bool)
    for t in range(length):
        prev = gt_pose2d[t - 1] if t > 0 else None
        frames[t], flows[t], masks[t] = render_frame(gt_pose2d[t], size, prev)

    teacher, corrupted = _apply_noise(gt_pose2d, noise, rng)
    return SyntheticClip(
        frames=frames,
        flows=flows,
        masks=masks,
        gt_pose2d=gt_pose2d,
        teacher_pose2d=teacher,
        gt_pose3d=pose3d,
        action_intervals=intervals,
        fps=fps,
        camera=camera,
        state=state,
        corrupted_frames=corrupted,
    )


def _pose_to_json(pose: RawPose2D) -> dict:
    return {
        "joints": [[float(x), float(y)] for x, y in pose.joints],
        "scores": [float(s) for s in pose.joint_scores],
    }


def _pose_from_json(obj: dict) -> RawPose2D:
    return RawPose2D(
        joints=np.asarray(obj["joints"], dtype=np.float64),
        joint_scores=np.asarray(obj["scores"], dtype=np.float64),
    )


def write_clip_archive(root, clip_id: str, clip: SyntheticClip) -> Path:
    """One directory per clip: PNG frames, a float32 flow binary, PNG masks,
    and line-delimited JSON metadata (header record, then one per frame)."""
    from PIL import Image

    clip_dir = Path(root) / clip_id
    frames_dir = clip_dir / "frames"
    masks_dir = clip_dir / "masks"
    frames_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)

    for t in range(clip.length):
        Image.fromarray(clip.frames[t]).save(frames_dir / f"{t:05d}.png")
        Image.fromarray((clip.masks[t] * 255).astype(np.uint8)).save(masks_dir / f"{t:05d}.png")

    flow = np.ascontiguousarray(clip.flows, dtype="<f4")
    header = np.asarray(flow.shape, dtype="<u4").tobytes()
    (clip_dir / "flow.bin").write_bytes(header + flow.tobytes())

    corrupted = clip.corrupted_frames
    if corrupted is None:
        corrupted = np.zeros(clip.length, dtype=bool)
    with open(clip_dir / "metadata.jsonl", "w") as fh:
        head = {
            "type": "clip",
            "clip_id": clip_id,
            "length": clip.length,
            "fps": clip.fps,
            "class": clip.state.motion_class,
            "camera": {
                "azimuth": clip.camera.azimuth,
                "elevation": clip.camera.elevation,
                "distance": clip.camera.distance,
                "image_size": clip.camera.image_size,
            },
            "intervals": [[int(s), int(e), int(c)] for s, e, c in clip.action_intervals],
        }
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for t in range(clip.length):
            record = {
                "type": "frame",
                "t": t,
                "gt": _pose_to_json(clip.gt_pose2d[t]),
                "teacher": _pose_to_json(clip.teacher_pose2d[t]),
                "gt3d": [[float(v) for v in row] for row in clip.gt_pose3d[t]],
                "corrupted": bool(corrupted[t]),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return clip_dir


@dataclass
class ArchivedClip:
    """Lazily-loading view of one clip directory."""

    clip_dir: Path
    clip_id: str
    length: int
    fps: float
    motion_class: int
    camera: CameraSpec
    action_intervals: list[tuple[int, int, int]]
    gt_pose2d: list[RawPose2D]
    teacher_pose2d: list[RawPose2D]
    gt_pose3d: np.ndarray
    corrupted: np.ndarray

    _flow_memmap: np.ndarray | None = field(default=None, repr=False)

    def frame(self, t: int) -> np.ndarray:
        from PIL import Image

        with Image.open(self.clip_dir / "frames" / f"{t:05d}.png") as image:
            return np.asarray(image.convert("RGB"))

    def mask(self, t: int) -> np.ndarray:
        from PIL import Image

        with Image.open(self.clip_dir / "masks" / f"{t:05d}.png") as image:
            return np.asarray(image) > 127

    def flow(self, t: int) -> np.ndarray:
        if self._flow_memmap is None:
            path = self.clip_dir / "flow.bin"
            shape = tuple(np.frombuffer(path.read_bytes()[:16], dtype="<u4"))
            self._flow_memmap = np.memmap(path, dtype="<f4", mode="r", offset=16, shape=shape)
        return np.asarray(self._flow_memmap[t])


def read_clip_archive(clip_dir) -> ArchivedClip:
    clip_dir = Path(clip_dir)
    gt, teacher, gt3d, corrupted = [], [], [], []
    head = None
    with open(clip_dir / "metadata.jsonl") as fh:
        for line in fh:
            record = json.loads(line)
            if record["type"] == "clip":
                head = record
            else:
                gt.append(_pose_from_json(record["gt"]))
                teacher.append(_pose_from_json(record["teacher"]))
                gt3d.append(record["gt3d"])
                corrupted.append(record["corrupted"])
    if head is None:
        raise ValueError(f"{clip_dir}: metadata has no clip header")
    camera = CameraSpec(**head["camera"])
    return ArchivedClip(
        clip_dir=clip_dir,
        clip_id=head["clip_id"],
        length=head["length"],
        fps=head["fps"],
        motion_class=head["class"],
        camera=camera,
        action_intervals=[tuple(iv) for iv in head["intervals"]],
        gt_pose2d=gt,
        teacher_pose2d=teacher,
        gt_pose3d=np.asarray(gt3d, dtype=np.float64),
        corrupted=np.asarray(corrupted, dtype=bool),
    )
