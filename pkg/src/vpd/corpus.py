"""Frame data model, weak-supervision selection, preprocessing, feature store.

The feature store is the binary currency shared by every downstream head:

    magic "VPDF" | version u16 LE | dim u16 LE | kind u8 | fps f32 LE
    then per video: id_len u16 LE | utf-8 id | frame_count u32 LE
                    | frame_count x dim f32 LE

Videos are written sorted by id so identical inputs produce identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptHeader,
    DimensionMismatch,
    EmptyBBox,
    EmptySelection,
)
from .skeleton import RawPose2D

STORE_MAGIC = b"VPDF"
STORE_VERSION = 1

FEATURE_KINDS = {"2d-joints": 0, "vipe": 1, "2d-vpd": 2, "vi-vpd": 3, "raw": 4}
_KIND_FROM_TAG = {v: k for k, v in FEATURE_KINDS.items()}
_BUILTIN_DIMS = {26, 64, 128}

FLOW_CLIP = 20.0  # pixels
FLOW_LEVELS = 256
CROP_SIZE = 128


@dataclass(frozen=True)
class FeatureSpec:
    dim: int
    kind: str
    fps: float = 25.0

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.kind != "raw" and self.dim not in _BUILTIN_DIMS:
            raise ValueError(f"kind {self.kind!r} requires dim in {sorted(_BUILTIN_DIMS)}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")


@dataclass(frozen=True)
class FrameRecord:
    """Per-frame metadata: where the athlete is and what the teacher saw."""

    video_id: str
    frame_index: int
    bbox: tuple[float, float, float, float]  # x0, y0, x1, y1 pixels
    teacher_pose: RawPose2D
    fps: float = 25.0
    mask_path: str | None = None

    @property
    def mean_joint_score(self) -> float:
        return self.teacher_pose.mean_score


@dataclass
class Corpus:
    """All frame records plus a video-level train/val/test split."""

    records: list[FrameRecord]
    splits: dict[str, str]  # video_id -> "train" | "val" | "test"

    def __post_init__(self):
        if not self.records:
            raise ValueError("corpus must contain at least one record")
        valid = {"train", "val", "test"}
        for video_id, split in self.splits.items():
            if split not in valid:
                raise ValueError(f"bad split {split!r} for {video_id}")
        missing = {r.video_id for r in self.records} - set(self.splits)
        if missing:
            raise ValueError(f"records reference unsplit videos: {sorted(missing)[:3]}")

    def split_records(self, split: str) -> list[FrameRecord]:
        return [r for r in self.records if self.splits[r.video_id] == split]

    def video_ids(self, split: str | None = None) -> list[str]:
        ids = sorted(self.splits)
        if split is None:
            return ids
        return [v for v in ids if self.splits[v] == split]


@dataclass(frozen=True)
class SelectionPolicy:
    score_threshold: float = 0.5
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score threshold must be in [0, 1]")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation fraction must be in (0, 1)")


def select_training_frames(
    corpus: Corpus, policy: SelectionPolicy
) -> tuple[list[FrameRecord], list[FrameRecord]]:
    """Split train-split frames into (supervision, validation) sets.

    Frames below the confidence threshold are excluded entirely; of the
    eligible frames, round(fraction * count) are withheld uniformly at random
    (seeded) for validation. Deterministic given (corpus, policy).
    """
    eligible = [
        r for r in corpus.split_records("train") if r.mean_joint_score >= policy.score_threshold
    ]
    if not eligible:
        raise EmptySelection(
            f"no train frame has mean joint score >= {policy.score_threshold}"
        )
    n_val = int(round(policy.validation_fraction * len(eligible)))
    rng = np.random.default_rng(policy.seed)
    val_idx = set(rng.choice(len(eligible), size=n_val, replace=False).tolist())
    supervision = [r for i, r in enumerate(eligible) if i not in val_idx]
    validation = [r for i, r in enumerate(eligible) if i in val_idx]
    return supervision, validation


def crop_window(bbox: tuple[float, float, float, float]) -> tuple[float, float, float]:
    """Square crop geometry for a bounding box: (center_x, center_y, side).

    The box is expanded to a square and padded on each side by 10% of the
    square side or 25 pixels, whichever is greater.
    """
    x0, y0, x1, y1 = bbox
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise EmptyBBox(f"bbox has no area: {bbox}")
    side = max(w, h)
    pad = max(0.10 * side, 25.0)
    return (0.5 * (x0 + x1), 0.5 * (y0 + y1), side + 2.0 * pad)


def make_crop(frame: np.ndarray, bbox: tuple[float, float, float, float]) -> np.ndarray:
    """Extract the padded square crop and resize it to 128x128.

    The window is clipped to the frame; content outside the frame stays zero
    so the pre-resize canvas is always square.
    """
    from PIL import Image

    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError("frame must be HxWx3")
    cx, cy, side = crop_window(bbox)
    half = side / 2.0
    ix0, iy0 = int(np.floor(cx - half)), int(np.floor(cy - half))
    ilen = int(np.ceil(side))
    canvas = np.zeros((ilen, ilen, 3), dtype=frame.dtype)
    # overlap between the window and the frame
    fx0, fy0 = max(ix0, 0), max(iy0, 0)
    fx1 = min(ix0 + ilen, frame.shape[1])
    fy1 = min(iy0 + ilen, frame.shape[0])
    if fx1 > fx0 and fy1 > fy0:
        canvas[fy0 - iy0 : fy1 - iy0, fx0 - ix0 : fx1 - ix0] = frame[fy0:fy1, fx0:fx1]
    image = Image.fromarray(canvas.astype(np.uint8))
    resized = image.resize((CROP_SIZE, CROP_SIZE), Image.BILINEAR)
    return np.asarray(resized)


def quantize_flow(values_px: np.ndarray) -> np.ndarray:
    """Clip flow to +-20 px and quantize into 256 uniform levels (uint8)."""
    clipped = np.clip(values_px, -FLOW_CLIP, FLOW_CLIP)
    levels = np.floor((clipped + FLOW_CLIP) / (2 * FLOW_CLIP) * FLOW_LEVELS)
    return np.clip(levels, 0, FLOW_LEVELS - 1).astype(np.uint8)


def dequantize_flow(levels: np.ndarray) -> np.ndarray:
    """Reconstruct pixel displacements at bucket centers."""
    return ((levels.astype(np.float64) + 0.5) / FLOW_LEVELS) * (2 * FLOW_CLIP) - FLOW_CLIP


def flow_to_input(levels: np.ndarray) -> np.ndarray:
    """Quantized flow as the student's +-0.5 centered float32 input."""
    return ((levels.astype(np.float32) + 0.5) / FLOW_LEVELS) - 0.5


def preprocess_flow(raw_flow: np.ndarray) -> np.ndarray:
    """Median-subtract each channel, then clip and quantize (2xHxW uint8)."""
    raw_flow = np.asarray(raw_flow, dtype=np.float64)
    if raw_flow.ndim != 3 or raw_flow.shape[0] != 2:
        raise ValueError("flow must be 2xHxW")
    medians = np.median(raw_flow.reshape(2, -1), axis=1).reshape(2, 1, 1)
    return quantize_flow(raw_flow - medians)


def rgb_to_unit(rgb_uint8: np.ndarray) -> np.ndarray:
    """Scale uint8 RGB (HxWx3) to +-1 float32, channel-first (3xHxW)."""
    scaled = rgb_uint8.astype(np.float32) / 255.0 * 2.0 - 1.0
    return np.ascontiguousarray(scaled.transpose(2, 0, 1))


def standardize_rgb(unit_rgb: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (unit_rgb - mean.reshape(3, 1, 1)) / std.reshape(3, 1, 1)


def compute_rgb_stats(frames) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of +-1 scaled RGB over an iterable of HxWx3 uint8."""
    count = 0
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    for frame in frames:
        unit = frame.astype(np.float64) / 255.0 * 2.0 - 1.0
        total += unit.reshape(-1, 3).sum(axis=0)
        total_sq += (unit.reshape(-1, 3) ** 2).sum(axis=0)
        count += unit.shape[0] * unit.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 1e-8)
    return mean.astype(np.float32), np.sqrt(var).astype(np.float32)


@dataclass(frozen=True)
class FrameSample:
    """One assembled student input: standardized RGB plus centered flow."""

    rgb: np.ndarray  # (3, 128, 128) float32
    flow: np.ndarray  # (2, 128, 128) float32 in [-0.5, 0.5]
    record: FrameRecord | None = None

    def __post_init__(self):
        if self.rgb.shape != (3, CROP_SIZE, CROP_SIZE):
            raise ValueError(f"rgb must be (3, {CROP_SIZE}, {CROP_SIZE})")
        if self.flow.shape != (2, CROP_SIZE, CROP_SIZE):
            raise ValueError(f"flow must be (2, {CROP_SIZE}, {CROP_SIZE})")
        if not (np.isfinite(self.rgb).all() and np.isfinite(self.flow).all()):
            raise ValueError("sample values must be finite")


def resample_indices(length: int, src_fps: float, target_fps: float = 25.0) -> np.ndarray:
    """Nearest-frame indices mapping a sequence onto the target timeline."""
    if length <= 0:
        raise ValueError("length must be positive")
    if src_fps <= 0:
        raise ValueError("src_fps must be positive")
    out_len = int(round(length / src_fps * target_fps))
    out_len = max(out_len, 1)
    idx = np.round(np.arange(out_len) * (src_fps / target_fps)).astype(np.int64)
    return np.clip(idx, 0, length - 1)


def write_features(path, spec: FeatureSpec, sequences: dict[str, np.ndarray]) -> None:
    """Serialize per-video float32 feature sequences; round-trips bit-exactly."""
    path = Path(path)
    blobs = []
    for video_id in sorted(sequences):
        array = np.ascontiguousarray(sequences[video_id], dtype=np.float32)
        if array.ndim != 2 or array.shape[1] != spec.dim:
            raise DimensionMismatch(
                f"{video_id}: expected (*, {spec.dim}), got {array.shape}"
            )
        encoded = video_id.encode("utf-8")
        blobs.append(struct.pack("<H", len(encoded)))
        blobs.append(encoded)
        blobs.append(struct.pack("<I", array.shape[0]))
        blobs.append(array.tobytes())
    header = STORE_MAGIC + struct.pack(
        "<HHBf", STORE_VERSION, spec.dim, FEATURE_KINDS[spec.kind], spec.fps
    )
    path.write_bytes(header + b"".join(blobs))


def read_features(path) -> tuple[FeatureSpec, dict[str, np.ndarray]]:
    """Load a feature store; raises CorruptHeader on truncation or bad magic."""
    data = Path(path).read_bytes()
    header_len = 4 + struct.calcsize("<HHBf")
    if len(data) < header_len or data[:4] != STORE_MAGIC:
        raise CorruptHeader(f"{path}: bad magic or truncated header")
    version, dim, kind_tag, fps = struct.unpack("<HHBf", data[4:header_len])
    if version != STORE_VERSION:
        raise CorruptHeader(f"{path}: unsupported version {version}")
    if kind_tag not in _KIND_FROM_TAG:
        raise CorruptHeader(f"{path}: unknown kind tag {kind_tag}")
    spec = FeatureSpec(dim=dim, kind=_KIND_FROM_TAG[kind_tag], fps=fps)
    sequences: dict[str, np.ndarray] = {}
    offset = header_len
    while offset < len(data):
        try:
            (id_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            video_id = data[offset : offset + id_len].decode("utf-8")
            if len(data) < offset + id_len:
                raise CorruptHeader(f"{path}: truncated video id")
            offset += id_len
            (count,) = struct.unpack_from("<I", data, offset)
            offset += 4
            nbytes = count * dim * 4
            if len(data) < offset + nbytes:
                raise CorruptHeader(f"{path}: truncated feature block for {video_id}")
            array = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
            sequences[video_id] = array.reshape(count, dim).copy()
            offset += nbytes
        except struct.error as exc:
            raise CorruptHeader(f"{path}: truncated record ({exc})") from exc
    return spec, sequences
