"""Student feature extractor and its distillation training loop.

The student is a residual conv encoder over 5-channel (RGB + flow) 128x128
crops emitting a d-dimensional descriptor. During training an auxiliary
fully-connected decoder regresses the teacher's pose feature and its
temporal difference from the descriptor; the decoder is discarded for
inference. With motion disabled the student regresses the pose directly and
no decoder is used.

Frames whose predecessor fails selection (or sit at a clip boundary) carry
no motion target: they contribute the pose half of the loss only.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np

from .errors import EmptySelection, MissingTeacherModel, ShapeMismatch
from .skeleton import NormalizedPose2D, flip_normalized_2d

PRESETS = {
    "desk": {"channels": (16, 32, 64, 128), "blocks": (1, 1, 1, 1)},
    "reference": {"channels": (64, 128, 256, 512), "blocks": (3, 4, 6, 3)},
}

INPUT_CHANNELS = 5
INPUT_SIZE = 128


@dataclass(frozen=True)
class StudentConfig:
    output_dim: int = 26
    preset: str = "desk"
    channels: tuple[int, ...] | None = None  # overrides the preset when set
    blocks: tuple[int, ...] | None = None
    use_motion: bool = True
    lr: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 100
    frames_per_epoch: int = 20_000
    epochs: int = 1000
    seed: int = 0
    flip_prob: float = 0.5
    scale_jitter: float = 0.1
    brightness_jitter: float = 0.1
    pixel_noise_sigma: float = 0.02
    background_jitter_sigma: float = 0.05

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")

    def resolved_arch(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        preset = PRESETS[self.preset]
        return (self.channels or preset["channels"], self.blocks or preset["blocks"])

    def to_dict(self) -> dict:
        channels, blocks = self.resolved_arch()
        return {
            "output_dim": self.output_dim,
            "preset": self.preset,
            "channels": list(channels),
            "blocks": list(blocks),
            "use_motion": self.use_motion,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "frames_per_epoch": self.frames_per_epoch,
            "epochs": self.epochs,
            "seed": self.seed,
            "flip_prob": self.flip_prob,
            "scale_jitter": self.scale_jitter,
            "brightness_jitter": self.brightness_jitter,
            "pixel_noise_sigma": self.pixel_noise_sigma,
            "background_jitter_sigma": self.background_jitter_sigma,
        }


@dataclass(frozen=True)
class DistillTarget:
    """Teacher pose feature and its temporal difference for one frame."""

    pose: np.ndarray  # (d,) float32
    motion: np.ndarray  # (d,) float32; zeros when invalid
    motion_valid: bool = True

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float32)
        motion = np.asarray(self.motion, dtype=np.float32)
        if pose.shape != motion.shape:
            raise ValueError("pose and motion must have equal dims")
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "motion", motion)


def make_targets(pose_seq: np.ndarray, selected: np.ndarray) -> list[DistillTarget]:
    """Per-frame targets from a clip's teacher features.

    ``selected[t]`` marks frames that passed weak-supervision selection. The
    motion target at t is pose[t] - pose[t-1] (float32 arithmetic, matching
    store precision) and is valid only when frame t-1 exists and passed
    selection.
    """
    pose_seq = np.asarray(pose_seq, dtype=np.float32)
    out = []
    for t in range(len(pose_seq)):
        valid = t > 0 and bool(selected[t - 1])
        motion = pose_seq[t] - pose_seq[t - 1] if valid else np.zeros_like(pose_seq[t])
        out.append(DistillTarget(pose=pose_seq[t], motion=motion, motion_valid=valid))
    return out


# ---------------------------------------------------------------------------
# networks


def build_student(config: StudentConfig):
    import torch.nn as nn

    channels, blocks = config.resolved_arch()

    def norm(c):
        return nn.GroupNorm(min(4, c), c)

    class BasicBlock(nn.Module):
        def __init__(self, c_in, c_out, stride):
            super().__init__()
            self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
            self.norm1 = norm(c_out)
            self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
            self.norm2 = norm(c_out)
            self.act = nn.ReLU(inplace=True)
            self.shortcut = None
            if stride != 1 or c_in != c_out:
                self.shortcut = nn.Sequential(
                    nn.Conv2d(c_in, c_out, 1, stride, bias=False), norm(c_out)
                )

        def forward(self, x):
            identity = x if self.shortcut is None else self.shortcut(x)
            y = self.act(self.norm1(self.conv1(x)))
            y = self.norm2(self.conv2(y))
            return self.act(y + identity)

    class StudentNet(nn.Module):
        def __init__(self):
            super().__init__()
            self.stem = nn.Sequential(
                nn.Conv2d(INPUT_CHANNELS, channels[0], 5, 2, 2, bias=False),
                norm(channels[0]),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            )
            stages = []
            prev = channels[0]
            for i, (width, depth) in enumerate(zip(channels, blocks)):
                for b in range(depth):
                    stride = 2 if (i > 0 and b == 0) else 1
                    stages.append(BasicBlock(prev, width, stride))
                    prev = width
            self.stages = nn.Sequential(*stages)
            self.projection = nn.Linear(prev, config.output_dim)
            self.output_dim = config.output_dim

        def forward(self, x):
            if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
                raise ShapeMismatch(f"expected (B, 5, {INPUT_SIZE}, {INPUT_SIZE})")
            y = self.stages(self.stem(x))
            return self.projection(y.mean(dim=(2, 3)))

    return StudentNet()


def build_decoder(output_dim: int, hidden: int = 128):
    """Auxiliary decoder mapping a descriptor to the 2d regression target.

    The pose half is the descriptor itself, which pins the descriptor to the
    teacher's feature space (the student must keep producing usable pose
    features after the decoder is discarded); the motion half is a learned
    two-hidden-layer head.
    """
    import torch
    import torch.nn as nn

    class AuxiliaryDecoder(nn.Module):
        def __init__(self):
            super().__init__()
            self.motion_head = nn.Sequential(
                nn.Linear(output_dim, hidden),
                nn.ReLU(inplace=True),
                nn.Linear(hidden, hidden),
                nn.ReLU(inplace=True),
                nn.Linear(hidden, output_dim),
            )
            self.output_dim = output_dim

        def forward(self, descriptor):
            if descriptor.shape[-1] != output_dim:
                raise ShapeMismatch(f"decoder expects dim {output_dim}")
            return torch.cat([descriptor, self.motion_head(descriptor)], dim=-1)

    return AuxiliaryDecoder()


def student_forward(inputs: np.ndarray, model) -> np.ndarray:
    """Descriptors for a batch of assembled 5-channel inputs (inference)."""
    import torch

    inputs = np.asarray(inputs, dtype=np.float32)
    squeeze = inputs.ndim == 3
    if squeeze:
        inputs = inputs[None]
    if inputs.shape[1:] != (INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE):
        raise ShapeMismatch(f"expected (B, 5, {INPUT_SIZE}, {INPUT_SIZE}), got {inputs.shape}")
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(inputs)).numpy()
    return out[0] if squeeze else out


def decoder_forward(descriptors: np.ndarray, decoder) -> np.ndarray:
    import torch

    descriptors = np.asarray(descriptors, dtype=np.float32)
    squeeze = descriptors.ndim == 1
    if squeeze:
        descriptors = descriptors[None]
    decoder.eval()
    with torch.no_grad():
        out = decoder(torch.from_numpy(descriptors)).numpy()
    return out[0] if squeeze else out


def distill_loss(prediction, pose_target, motion_target=None, motion_valid=None):
    """Mean over the batch of the squared L2 error against [pose; motion].

    With ``motion_target`` None the prediction is pose-only. Frames with
    ``motion_valid`` False contribute only their pose residual.
    """
    import torch

    if prediction.shape[0] == 0:
        raise EmptySelection("empty batch")
    if motion_target is None:
        residual = prediction - pose_target
        return (residual**2).sum(dim=1).mean()
    dim = pose_target.shape[1]
    pose_res = prediction[:, :dim] - pose_target
    motion_res = prediction[:, dim:] - motion_target
    mask = motion_valid.to(motion_res.dtype).unsqueeze(1)
    per_sample = (pose_res**2).sum(dim=1) + ((motion_res * mask) ** 2).sum(dim=1)
    return per_sample.mean()


# ---------------------------------------------------------------------------
# augmentation


def flip_input_arrays(rgb: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal flip of student inputs: mirror RGB and flow, negate flow-x."""
    rgb_f = rgb[:, :, ::-1].copy()
    flow_f = flow[:, :, ::-1].copy()
    flow_f[0] = -flow_f[0]
    return rgb_f, flow_f


@dataclass
class FlipContext:
    """How to flip a teacher target consistently with a horizontal image flip.

    For 2D-joint teachers the pose vectors flip in closed form. For embedded
    teachers, the normalized 2D poses of the frame and its predecessor are
    flipped and re-embedded, and the motion target is recomputed.
    """

    teacher_kind: str  # "2d" | "vipe"
    embedder: object = None
    vertical_concat: bool = False
    norm_pose: NormalizedPose2D | None = None
    norm_pose_prev: NormalizedPose2D | None = None


def flip_target(target: DistillTarget, context: FlipContext) -> DistillTarget:
    if context.teacher_kind == "2d":
        pose = flip_normalized_2d(NormalizedPose2D(values=target.pose.astype(np.float64)))
        flipped_pose = pose.values.astype(np.float32)
        if target.motion_valid:
            prev = target.pose - target.motion
            prev_flipped = flip_normalized_2d(
                NormalizedPose2D(values=prev.astype(np.float64))
            ).values.astype(np.float32)
            motion = flipped_pose - prev_flipped
        else:
            motion = np.zeros_like(flipped_pose)
        return DistillTarget(pose=flipped_pose, motion=motion, motion_valid=target.motion_valid)
    if context.teacher_kind == "vipe":
        if context.embedder is None:
            raise MissingTeacherModel("flipping an embedded target requires the embedder")
        from .vipe import embed_pose

        pose = embed_pose(
            flip_normalized_2d(context.norm_pose),
            context.embedder,
            vertical_concat=context.vertical_concat,
        ).values
        if target.motion_valid and context.norm_pose_prev is not None:
            prev = embed_pose(
                flip_normalized_2d(context.norm_pose_prev),
                context.embedder,
                vertical_concat=context.vertical_concat,
            ).values
            motion = pose - prev
        else:
            motion = np.zeros_like(pose)
        return DistillTarget(pose=pose, motion=motion, motion_valid=target.motion_valid)
    raise ValueError(f"unknown teacher kind {context.teacher_kind!r}")


def _resize_channel(channel: np.ndarray, size: int) -> np.ndarray:
    from PIL import Image

    image = Image.fromarray(channel.astype(np.float32), mode="F")
    return np.asarray(image.resize((size, size), Image.BILINEAR))


def augment_sample(
    rgb: np.ndarray,
    flow: np.ndarray,
    mask: np.ndarray | None,
    target: DistillTarget,
    rng: np.random.Generator,
    config: StudentConfig,
    flip_context: FlipContext | None = None,
) -> tuple[np.ndarray, np.ndarray, DistillTarget, bool]:
    """Randomized resize-crop, jitters, and chirality-consistent flips.

    Operates on the +-1 scaled RGB (3xHxW) and centered flow (2xHxW) before
    dataset standardization. Returns (rgb, flow, target, flipped).
    """
    size = rgb.shape[1]

    if config.scale_jitter > 0:
        scale = float(rng.uniform(1.0 - config.scale_jitter, 1.0))
        if scale < 1.0:
            crop = max(int(round(size * scale)), 8)
            x0 = int(rng.integers(0, size - crop + 1))
            y0 = int(rng.integers(0, size - crop + 1))
            rgb = np.stack(
                [_resize_channel(c[y0 : y0 + crop, x0 : x0 + crop], size) for c in rgb]
            )
            # displacements magnify with the crop: scale flow values too
            flow = np.stack(
                [_resize_channel(c[y0 : y0 + crop, x0 : x0 + crop], size) for c in flow]
            ) / scale
            if mask is not None:
                mask = (
                    _resize_channel(
                        mask[y0 : y0 + crop, x0 : x0 + crop].astype(np.float32), size
                    )
                    > 0.5
                )

    flipped = False
    if config.flip_prob > 0 and rng.uniform() < config.flip_prob:
        rgb, flow = flip_input_arrays(rgb, flow)
        if mask is not None:
            mask = mask[:, ::-1].copy()
        if flip_context is not None:
            target = flip_target(target, flip_context)
        flipped = True

    if config.brightness_jitter > 0:
        rgb = rgb * float(
            rng.uniform(1.0 - config.brightness_jitter, 1.0 + config.brightness_jitter)
        )
    if config.pixel_noise_sigma > 0:
        rgb = rgb + rng.normal(0.0, config.pixel_noise_sigma, size=rgb.shape)
    if config.background_jitter_sigma > 0 and mask is not None:
        noise = rng.normal(0.0, config.background_jitter_sigma, size=rgb.shape)
        rgb = rgb + noise * (~mask)[None, :, :]

    return rgb.astype(np.float32), flow.astype(np.float32), target, flipped


# ---------------------------------------------------------------------------
# training


def augment_frame_sample(
    sample,
    target: DistillTarget,
    rng: np.random.Generator,
    config: StudentConfig,
    flip_context: FlipContext | None = None,
    mask: np.ndarray | None = None,
):
    """FrameSample-level wrapper around augment_sample.

    The sample's RGB is expected pre-standardization (the +-1 scale);
    the figure mask gates background jitter when provided.
    """
    from .corpus import FrameSample

    rgb, flow, target, _ = augment_sample(
        sample.rgb, sample.flow, mask, target, rng, config, flip_context
    )
    return FrameSample(rgb=rgb, flow=flow, record=sample.record), target


class DistillDataset(Protocol):
    """What the training loop needs from a data source."""

    output_dim: int
    supervision_size: int

    def training_batch(
        self, indices: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(inputs (B,5,128,128), pose (B,d), motion (B,d), motion_valid (B,))."""
        ...

    def validation_batches(
        self, batch_size: int
    ) -> Iterable[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]:
        ...


@dataclass
class TrainState:
    config: StudentConfig
    student_state: dict
    decoder_state: dict | None
    best_student_state: dict
    best_decoder_state: dict | None
    epoch: int = 0
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    best_val_pose_loss: float = float("inf")
    history: dict = field(default_factory=lambda: {"train": [], "val": [], "val_pose": []})


def _validation_losses(dataset, student, decoder, config) -> tuple[float, float]:
    """(total loss, pose-only reconstruction loss) over the validation set."""
    import torch

    student.eval()
    if decoder is not None:
        decoder.eval()
    total = total_pose = count = 0
    with torch.no_grad():
        for inputs, pose, motion, valid in dataset.validation_batches(config.batch_size):
            x = torch.from_numpy(inputs)
            pose_t = torch.from_numpy(pose)
            descriptors = student(x)
            if config.use_motion:
                prediction = decoder(descriptors)
                loss = distill_loss(
                    prediction,
                    pose_t,
                    torch.from_numpy(motion),
                    torch.from_numpy(valid.astype(np.float32)),
                )
                pose_loss = ((prediction[:, : dataset.output_dim] - pose_t) ** 2).sum(
                    dim=1
                ).mean()
            else:
                loss = distill_loss(descriptors, pose_t)
                pose_loss = loss
            batch = len(inputs)
            total += loss.item() * batch
            total_pose += pose_loss.item() * batch
            count += batch
    student.train()
    if decoder is not None:
        decoder.train()
    if count == 0:
        return float("inf"), float("inf")
    return total / count, total_pose / count


def train_student(dataset: DistillDataset, config: StudentConfig) -> TrainState:
    """Optimize the student (and decoder) and keep the best-epoch weights by
    validation loss. Deterministic given the config seed."""
    import torch

    if dataset.supervision_size == 0:
        raise EmptySelection("no supervision frames")

    torch.manual_seed(config.seed)
    student = build_student(config)
    decoder = build_decoder(config.output_dim) if config.use_motion else None
    params = list(student.parameters()) + (list(decoder.parameters()) if decoder else [])
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    state = TrainState(
        config=config,
        student_state=copy.deepcopy(student.state_dict()),
        decoder_state=copy.deepcopy(decoder.state_dict()) if decoder else None,
        best_student_state=copy.deepcopy(student.state_dict()),
        best_decoder_state=copy.deepcopy(decoder.state_dict()) if decoder else None,
    )
    if config.epochs == 0:
        val, val_pose = _validation_losses(dataset, student, decoder, config)
        state.best_val_loss = val
        state.best_val_pose_loss = val_pose
        return state

    student.train()
    if decoder is not None:
        decoder.train()
    for epoch in range(config.epochs):
        rng = np.random.default_rng((config.seed, epoch))
        n = dataset.supervision_size
        picks = rng.choice(n, size=config.frames_per_epoch, replace=config.frames_per_epoch > n)
        running = 0.0
        batches = 0
        for start in range(0, len(picks), config.batch_size):
            idx = picks[start : start + config.batch_size]
            inputs, pose, motion, valid = dataset.training_batch(idx, rng)
            x = torch.from_numpy(inputs)
            pose_t = torch.from_numpy(pose)
            optimizer.zero_grad()
            if config.use_motion:
                prediction = decoder(student(x))
                loss = distill_loss(
                    prediction,
                    pose_t,
                    torch.from_numpy(motion),
                    torch.from_numpy(valid.astype(np.float32)),
                )
            else:
                loss = distill_loss(student(x), pose_t)
            loss.backward()
            optimizer.step()
            running += loss.item()
            batches += 1
        val, val_pose = _validation_losses(dataset, student, decoder, config)
        state.history["train"].append(running / max(batches, 1))
        state.history["val"].append(val)
        state.history["val_pose"].append(val_pose)
        state.epoch = epoch + 1
        if val < state.best_val_loss:
            state.best_val_loss = val
            state.best_val_pose_loss = val_pose
            state.best_epoch = epoch
            state.best_student_state = copy.deepcopy(student.state_dict())
            if decoder is not None:
                state.best_decoder_state = copy.deepcopy(decoder.state_dict())
    state.student_state = copy.deepcopy(student.state_dict())
    if decoder is not None:
        state.decoder_state = copy.deepcopy(decoder.state_dict())
    return state


def load_student(state: TrainState, best: bool = True):
    student = build_student(state.config)
    student.load_state_dict(state.best_student_state if best else state.student_state)
    student.eval()
    return student


def extract_features(
    inputs_iter: Iterable[np.ndarray], model, batch_size: int = 256, flip: bool = False
) -> np.ndarray:
    """Descriptors for every assembled input; ``flip`` mirrors inputs first
    (chirality-flipped store for downstream augmentation and inference)."""
    import torch

    model.eval()
    out = []
    batch: list[np.ndarray] = []

    def run(stack):
        with torch.no_grad():
            return model(torch.from_numpy(np.stack(stack))).numpy()

    for item in inputs_iter:
        if flip:
            rgb, flow = flip_input_arrays(item[:3], item[3:])
            item = np.concatenate([rgb, flow], axis=0)
        batch.append(item.astype(np.float32))
        if len(batch) == batch_size:
            out.append(run(batch))
            batch = []
    if batch:
        out.append(run(batch))
    if not out:
        return np.zeros((0, model.output_dim), dtype=np.float32)
    return np.concatenate(out, axis=0)
