"""Pipeline stages tying the modules into reproducible batch runs.

Every stage writes its outputs plus a manifest recording the config subset
it saw, the hashes of its inputs (chained through upstream manifests), and
the hash of every output file. Re-running a stage with identical config and
inputs is a no-op; a manifest whose outputs no longer match the disk raises
StaleManifest.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from . import align as align_mod
from . import detect as detect_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import (
    Corpus,
    FeatureSpec,
    FrameRecord,
    SelectionPolicy,
    compute_rgb_stats,
    flow_to_input,
    preprocess_flow,
    read_features,
    rgb_to_unit,
    select_training_frames,
    standardize_rgb,
    write_features,
)
from .distill import (
    DistillTarget,
    FlipContext,
    StudentConfig,
    augment_sample,
    build_student,
    extract_features,
    flip_input_arrays,
    make_targets,
    train_student,
)
from .errors import BadConfig, MissingArtifact, StaleManifest
from .recognize import (
    ActionClip,
    ClassifierConfig,
    FewShotConfig,
    resample_sequence,
    run_fewshot_protocol,
    train_classifier,
)
from .skeleton import flip_normalized_2d, normalize_2d, canonicalize_3d
from .synth import (
    CameraSpec,
    NoiseModel,
    generate_clip,
    read_clip_archive,
    write_clip_archive,
)
from .vipe import EmbedderConfig, MultiViewPoseCorpus, build_embedder, embed_batch, train_embedder

MANIFEST_NAME = "manifest.json"

# bumped whenever a stage's algorithm changes, so stale caches recompute
PIPELINE_VERSION = 4


# ---------------------------------------------------------------------------
# manifests and caching


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _scan_outputs(out_dir: Path) -> dict:
    outputs = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != MANIFEST_NAME:
            rel = str(path.relative_to(out_dir))
            outputs[rel] = {"sha256": file_sha256(path), "size": path.stat().st_size}
    return outputs


def write_manifest(out_dir, stage: str, config: dict, inputs: dict) -> dict:
    out_dir = Path(out_dir)
    outputs = _scan_outputs(out_dir)
    combined = hashlib.sha256(
        json.dumps(outputs, sort_keys=True).encode()
    ).hexdigest()
    manifest = {
        "stage": stage,
        "version": PIPELINE_VERSION,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "combined": combined,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_manifest(out_dir) -> dict | None:
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        return None
    return json.loads(path.read_text())


def manifest_hash(artifact_dir) -> str:
    """Combined output hash of an upstream stage, verifying file presence.

    Sizes are checked (cheap); a mismatch means someone edited the artifact
    after its manifest was written.
    """
    artifact_dir = Path(artifact_dir)
    manifest = load_manifest(artifact_dir)
    if manifest is None:
        raise MissingArtifact(f"{artifact_dir}: no manifest (stage not run?)")
    for rel, info in manifest["outputs"].items():
        path = artifact_dir / rel
        if not path.exists():
            raise StaleManifest(f"{artifact_dir}: missing output {rel}")
        if path.stat().st_size != info["size"]:
            raise StaleManifest(f"{artifact_dir}: output {rel} changed since manifest")
    return manifest["combined"]


def stage_is_cached(out_dir, stage: str, config: dict, inputs: dict) -> bool:
    manifest = load_manifest(out_dir)
    if manifest is None:
        return False
    if manifest.get("version") != PIPELINE_VERSION:
        return False
    if manifest["stage"] != stage or manifest["config"] != config:
        return False
    if manifest["inputs"] != inputs:
        return False
    out_dir = Path(out_dir)
    for rel, info in manifest["outputs"].items():
        path = out_dir / rel
        if not path.exists() or path.stat().st_size != info["size"]:
            return False
    return True


# ---------------------------------------------------------------------------
# archive access


@dataclasses.dataclass
class Archive:
    root: Path
    clips: list[dict]  # {"id", "class", "split"}
    fps: float
    image_size: int

    def __post_init__(self):
        self._cache = {}

    def ids(self, split: str | None = None) -> list[str]:
        return [c["id"] for c in self.clips if split is None or c["split"] == split]

    def split_of(self, clip_id: str) -> str:
        for c in self.clips:
            if c["id"] == clip_id:
                return c["split"]
        raise KeyError(clip_id)

    def clip(self, clip_id: str):
        if clip_id not in self._cache:
            self._cache[clip_id] = read_clip_archive(self.root / clip_id)
        return self._cache[clip_id]


def load_archive(archive_dir) -> Archive:
    archive_dir = Path(archive_dir)
    index = archive_dir / "archive.json"
    if not index.exists():
        raise MissingArtifact(f"{archive_dir}: archive.json not found")
    head = json.loads(index.read_text())
    return Archive(
        root=archive_dir,
        clips=head["clips"],
        fps=head["fps"],
        image_size=head["image_size"],
    )


# ---------------------------------------------------------------------------
# synth stage


def _noise_from_config(config: RunConfig) -> NoiseModel:
    return NoiseModel(
        joint_noise_sigma=config["noise.sigma"],
        corruption_rate=config["noise.corruption_rate"],
        baseline_sigma=config["noise.baseline_sigma"],
        coupling_scale=config["noise.coupling_scale"],
        mode_weights=tuple(config["noise.mode_weights"]),
        speed_coupling=config["noise.speed_coupling"],
    )


def stage_synth(config: RunConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    subset = {k: v for k, v in config.to_dict().items() if k.split(".")[0] in
              ("synth", "noise", "split")}
    inputs: dict = {}
    if stage_is_cached(out_dir, "synth", subset, inputs):
        return load_manifest(out_dir)

    classes = config["synth.classes"]
    per_class = config["synth.clips_per_class"]
    n_train = config["split.train_per_class"]
    n_val = config["split.val_per_class"]
    n_test = config["split.test_per_class"]
    if n_train + n_val + n_test != per_class:
        raise BadConfig("split.* must sum to synth.clips_per_class")

    out_dir.mkdir(parents=True, exist_ok=True)
    noise = _noise_from_config(config)
    az_lo, az_hi = config["synth.azimuth_range"]
    el_lo, el_hi = config["synth.elevation_range"]
    di_lo, di_hi = config["synth.distance_range"]
    clip_meta = []
    for class_id in range(classes):
        for i in range(per_class):
            clip_id = f"c{class_id}_{i:03d}"
            cam_rng = np.random.default_rng((config["synth.seed"], class_id, i))
            camera = CameraSpec(
                azimuth=float(cam_rng.uniform(az_lo, az_hi)),
                elevation=float(cam_rng.uniform(el_lo, el_hi)),
                distance=float(cam_rng.uniform(di_lo, di_hi)),
                image_size=config["synth.image_size"],
            )
            clip = generate_clip(
                class_id,
                config["synth.length"],
                camera,
                noise,
                seed=config["synth.seed"] * 1_000_003 + class_id * 1009 + i,
                fps=config["synth.fps"],
                actions_per_clip=config["synth.actions_per_clip"],
            )
            write_clip_archive(out_dir, clip_id, clip)
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            clip_meta.append({"id": clip_id, "class": class_id, "split": split})

    (out_dir / "archive.json").write_text(
        json.dumps(
            {
                "clips": clip_meta,
                "fps": config["synth.fps"],
                "image_size": config["synth.image_size"],
                "noise": noise.to_config(),
            },
            sort_keys=True,
            indent=1,
        )
    )
    config.dump(out_dir / "resolved_config.txt")
    return write_manifest(out_dir, "synth", subset, inputs)


# ---------------------------------------------------------------------------
# teacher stage


def _normalized_teacher_sequences(archive: Archive, which: str):
    """Per-clip (T, 26) arrays of normalized poses and their flips."""
    plain, flipped = {}, {}
    for clip_id in archive.ids():
        clip = archive.clip(clip_id)
        poses = clip.teacher_pose2d if which == "teacher" else clip.gt_pose2d
        rows, rows_f = [], []
        for pose in poses:
            normalized = normalize_2d(pose)
            rows.append(normalized.values)
            rows_f.append(flip_normalized_2d(normalized).values)
        plain[clip_id] = np.asarray(rows, dtype=np.float32)
        flipped[clip_id] = np.asarray(rows_f, dtype=np.float32)
    return plain, flipped


def build_vipe_corpus(archive: Archive, config: RunConfig) -> MultiViewPoseCorpus:
    """Multi-camera projections of train-split 3D poses for embedder training."""
    rng = np.random.default_rng(config["vipe.seed"])
    cameras = [
        CameraSpec(
            azimuth=float(rng.uniform(0, 2 * np.pi)),
            elevation=float(rng.uniform(0.1, 0.5)),
            distance=float(rng.uniform(4.3, 5.0)),
            image_size=archive.image_size,
        )
        for _ in range(config["vipe.cameras"])
    ]
    views, canonical, joints, seq_ids = [], [], [], []
    from .synth import project_pose

    stride = config["vipe.pose_stride"]
    for seq, clip_id in enumerate(archive.ids("train")):
        clip = archive.clip(clip_id)
        for t in range(0, clip.length, stride):
            pose3d = clip.gt_pose3d[t]
            views.append(
                np.stack([normalize_2d(project_pose(pose3d, cam)).values for cam in cameras])
            )
            canonical.append(canonicalize_3d(pose3d).features)
            joints.append(pose3d)
            seq_ids.append(seq)
    return MultiViewPoseCorpus(
        views=np.asarray(views, dtype=np.float32),
        canonical=np.asarray(canonical, dtype=np.float32),
        joints3d=np.asarray(joints),
        sequence_ids=np.asarray(seq_ids),
    )


def _embedder_config(config: RunConfig) -> EmbedderConfig:
    return EmbedderConfig(
        embed_dim=config["vipe.embed_dim"],
        hidden_dims=tuple(config["vipe.hidden_dims"]),
        margin=config["vipe.margin"],
        loss_weights=tuple(config["vipe.loss_weights"]),
        lr=config["vipe.lr"],
        batch_size=config["vipe.batch_size"],
        epochs=config["vipe.epochs"],
        seed=config["vipe.seed"],
    )


def stage_teacher(config: RunConfig, archive_dir, out_dir) -> dict:
    out_dir = Path(out_dir)
    kind = config["teacher.kind"]
    if kind not in ("2d-joints", "vipe"):
        raise BadConfig(f"teacher.kind must be 2d-joints or vipe, got {kind!r}")
    subset = {k: v for k, v in config.to_dict().items() if k.split(".")[0] in
              ("teacher", "vipe")}
    inputs = {"archive": manifest_hash(archive_dir)}
    if stage_is_cached(out_dir, "teacher", subset, inputs):
        return load_manifest(out_dir)

    archive = load_archive(archive_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    teacher_plain, teacher_flip = _normalized_teacher_sequences(archive, "teacher")
    gt_plain, gt_flip = _normalized_teacher_sequences(archive, "gt")

    if kind == "2d-joints":
        spec = FeatureSpec(dim=26, kind="2d-joints", fps=archive.fps)
        stores = {
            "teacher.vpdf": teacher_plain,
            "teacher_flip.vpdf": teacher_flip,
            "gt.vpdf": gt_plain,
            "gt_flip.vpdf": gt_flip,
        }
        for name, data in stores.items():
            write_features(out_dir / name, spec, data)
    else:
        embedder_config = _embedder_config(config)
        corpus = build_vipe_corpus(archive, config)
        model, history = train_embedder(corpus, embedder_config)
        save_checkpoint(
            out_dir / "vipe.ckpt", model.state_dict(), embedder_config.to_dict(), kind="vipe"
        )
        (out_dir / "vipe_history.json").write_text(json.dumps(history, sort_keys=True))
        vertical = config["teacher.vertical_concat"]
        dim = embedder_config.embed_dim * (2 if vertical else 1)
        spec = FeatureSpec(dim=dim, kind="vipe", fps=archive.fps)

        def embed_store(sequences: dict) -> dict:
            out = {}
            for clip_id, rows in sequences.items():
                embedded = embed_batch(rows.astype(np.float32), model)
                if vertical:
                    flipped_rows = rows.reshape(len(rows), 13, 2).copy()
                    flipped_rows[:, :, 1] *= -1.0
                    embedded_v = embed_batch(
                        flipped_rows.reshape(len(rows), 26).astype(np.float32), model
                    )
                    embedded = np.concatenate([embedded, embedded_v], axis=1)
                out[clip_id] = embedded
            return out

        for name, data in (
            ("teacher.vpdf", teacher_plain),
            ("teacher_flip.vpdf", teacher_flip),
            ("gt.vpdf", gt_plain),
            ("gt_flip.vpdf", gt_flip),
        ):
            write_features(out_dir / name, spec, embed_store(data))

    config.dump(out_dir / "resolved_config.txt")
    return write_manifest(out_dir, "teacher", subset, inputs)


# ---------------------------------------------------------------------------
# distillation stage


def build_frame_corpus(archive: Archive) -> Corpus:
    records = []
    size = float(archive.image_size)
    for clip_id in archive.ids():
        clip = archive.clip(clip_id)
        for t in range(clip.length):
            records.append(
                FrameRecord(
                    video_id=clip_id,
                    frame_index=t,
                    bbox=(0.0, 0.0, size, size),
                    teacher_pose=clip.teacher_pose2d[t],
                    fps=archive.fps,
                )
            )
    splits = {c["id"]: c["split"] for c in archive.clips}
    return Corpus(records=records, splits=splits)


class ArchiveDistillDataset:
    """Assembles augmented student inputs and teacher targets from a clip
    archive plus a teacher feature store."""

    def __init__(
        self,
        archive: Archive,
        teacher_sequences: dict,
        supervision: list[FrameRecord],
        validation: list[FrameRecord],
        selected_flags: dict,
        student_config: StudentConfig,
        rgb_mean: np.ndarray,
        rgb_std: np.ndarray,
        teacher_kind: str,
        embedder=None,
        vertical_concat: bool = False,
    ):
        self.archive = archive
        self.config = student_config
        self.rgb_mean = rgb_mean
        self.rgb_std = rgb_std
        self.teacher_kind = "2d" if teacher_kind == "2d-joints" else "vipe"
        self.embedder = embedder
        self.vertical_concat = vertical_concat
        self.targets = {
            clip_id: make_targets(rows, selected_flags[clip_id])
            for clip_id, rows in teacher_sequences.items()
        }
        self.supervision_pairs = [(r.video_id, r.frame_index) for r in supervision]
        self.validation_pairs = [(r.video_id, r.frame_index) for r in validation]
        self.output_dim = next(iter(teacher_sequences.values())).shape[1]

    @property
    def supervision_size(self) -> int:
        return len(self.supervision_pairs)

    def _flip_context(self, clip, t: int) -> FlipContext:
        if self.teacher_kind == "2d":
            return FlipContext(teacher_kind="2d")
        prev = normalize_2d(clip.teacher_pose2d[t - 1]) if t > 0 else None
        return FlipContext(
            teacher_kind="vipe",
            embedder=self.embedder,
            vertical_concat=self.vertical_concat,
            norm_pose=normalize_2d(clip.teacher_pose2d[t]),
            norm_pose_prev=prev,
        )

    def _assemble(self, clip_id: str, t: int, rng, augment: bool):
        clip = self.archive.clip(clip_id)
        rgb = rgb_to_unit(clip.frame(t))
        flow = flow_to_input(preprocess_flow(clip.flow(t)))
        target = self.targets[clip_id][t]
        if augment:
            mask = clip.mask(t)
            rgb, flow, target, _ = augment_sample(
                rgb, flow, mask, target, rng, self.config, self._flip_context(clip, t)
            )
        rgb = standardize_rgb(rgb, self.rgb_mean, self.rgb_std)
        x = np.concatenate([rgb, flow], axis=0).astype(np.float32)
        return x, target

    def _batch(self, pairs, rng, augment):
        xs, poses, motions, valids = [], [], [], []
        for clip_id, t in pairs:
            x, target = self._assemble(clip_id, t, rng, augment)
            xs.append(x)
            poses.append(target.pose)
            motions.append(target.motion)
            valids.append(target.motion_valid)
        return (
            np.stack(xs),
            np.stack(poses),
            np.stack(motions),
            np.asarray(valids, dtype=bool),
        )

    def training_batch(self, indices, rng):
        return self._batch([self.supervision_pairs[i] for i in indices], rng, augment=True)

    def validation_batches(self, batch_size):
        rng = np.random.default_rng(0)  # unused: no augmentation on validation
        for start in range(0, len(self.validation_pairs), batch_size):
            pairs = self.validation_pairs[start : start + batch_size]
            yield self._batch(pairs, rng, augment=False)


def compute_archive_rgb_stats(archive: Archive, stride: int = 25):
    def frames():
        for clip_id in archive.ids("train"):
            clip = archive.clip(clip_id)
            for t in range(0, clip.length, stride):
                yield clip.frame(t)

    return compute_rgb_stats(frames())


def _student_config(config: RunConfig, output_dim: int) -> StudentConfig:
    return StudentConfig(
        output_dim=output_dim,
        preset=config["student.preset"],
        use_motion=config["student.use_motion"],
        lr=config["student.lr"],
        weight_decay=config["student.weight_decay"],
        batch_size=config["student.batch_size"],
        frames_per_epoch=config["student.frames_per_epoch"],
        epochs=config["student.epochs"],
        seed=config["student.seed"],
        flip_prob=config["student.flip_prob"],
        scale_jitter=config["student.scale_jitter"],
        brightness_jitter=config["student.brightness_jitter"],
        pixel_noise_sigma=config["student.pixel_noise_sigma"],
        background_jitter_sigma=config["student.background_jitter_sigma"],
    )


def stage_distill(config: RunConfig, archive_dir, teacher_dir, out_dir) -> dict:
    out_dir = Path(out_dir)
    subset = {k: v for k, v in config.to_dict().items() if k.split(".")[0] in
              ("student", "policy")}
    inputs = {
        "archive": manifest_hash(archive_dir),
        "teacher": manifest_hash(teacher_dir),
    }
    if stage_is_cached(out_dir, "distill", subset, inputs):
        return load_manifest(out_dir)

    archive = load_archive(archive_dir)
    teacher_dir = Path(teacher_dir)
    spec, teacher_sequences = read_features(teacher_dir / "teacher.vpdf")

    corpus = build_frame_corpus(archive)
    policy = SelectionPolicy(
        score_threshold=config["policy.score_threshold"],
        validation_fraction=config["policy.validation_fraction"],
        seed=config["policy.seed"],
    )
    supervision, validation = select_training_frames(corpus, policy)
    # epoch selection only needs a stable validation estimate; cap the
    # per-epoch evaluation cost on large corpora (deterministic prefix)
    validation_eval = validation[:1500]
    threshold = policy.score_threshold
    selected_flags = {}
    for clip_id in archive.ids():
        clip = archive.clip(clip_id)
        selected_flags[clip_id] = np.array(
            [pose.mean_score >= threshold for pose in clip.teacher_pose2d], dtype=bool
        )

    rgb_mean, rgb_std = compute_archive_rgb_stats(archive)
    student_config = _student_config(config, spec.dim)

    embedder = None
    vertical = config["teacher.vertical_concat"]
    if spec.kind == "vipe":
        header, state_dict = load_checkpoint(teacher_dir / "vipe.ckpt")
        embedder_config = EmbedderConfig(
            embed_dim=header["config"]["embed_dim"],
            hidden_dims=tuple(header["config"]["hidden_dims"]),
        )
        embedder = build_embedder(embedder_config)
        embedder.load_state_dict(state_dict)
        embedder.eval()

    dataset = ArchiveDistillDataset(
        archive=archive,
        teacher_sequences=teacher_sequences,
        supervision=supervision,
        validation=validation_eval,
        selected_flags=selected_flags,
        student_config=student_config,
        rgb_mean=rgb_mean,
        rgb_std=rgb_std,
        teacher_kind=spec.kind,
        embedder=embedder,
        vertical_concat=vertical,
    )
    import time as _time

    train_start = _time.perf_counter()
    state = train_student(dataset, student_config)
    train_seconds = _time.perf_counter() - train_start

    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        out_dir / "student.ckpt",
        state.best_student_state,
        {**student_config.to_dict(), "teacher_kind": spec.kind, "teacher_dim": spec.dim},
        kind="student",
    )
    if state.best_decoder_state is not None:
        save_checkpoint(
            out_dir / "decoder.ckpt",
            state.best_decoder_state,
            student_config.to_dict(),
            kind="decoder",
        )
    log = {
        "history": state.history,
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val_loss,
        "best_val_pose_loss": state.best_val_pose_loss,
        "supervision_frames": len(supervision),
        "validation_frames": len(validation),
        "train_seconds": train_seconds,
        "rgb_mean": rgb_mean.tolist(),
        "rgb_std": rgb_std.tolist(),
    }
    (out_dir / "training_log.json").write_text(json.dumps(log, sort_keys=True, indent=1))
    config.dump(out_dir / "resolved_config.txt")
    return write_manifest(out_dir, "distill", subset, inputs)


# ---------------------------------------------------------------------------
# feature extraction stage


def stage_extract(config: RunConfig, archive_dir, distill_dir, out_dir) -> dict:
    out_dir = Path(out_dir)
    subset: dict = {}
    inputs = {
        "archive": manifest_hash(archive_dir),
        "distill": manifest_hash(distill_dir),
    }
    if stage_is_cached(out_dir, "extract", subset, inputs):
        return load_manifest(out_dir)

    archive = load_archive(archive_dir)
    distill_dir = Path(distill_dir)
    header, state_dict = load_checkpoint(distill_dir / "student.ckpt")
    cfg = header["config"]
    student_config = StudentConfig(
        output_dim=cfg["output_dim"],
        preset=cfg["preset"],
        channels=tuple(cfg["channels"]),
        blocks=tuple(cfg["blocks"]),
        use_motion=cfg["use_motion"],
    )
    model = build_student(student_config)
    model.load_state_dict(state_dict)
    model.eval()

    log = json.loads((distill_dir / "training_log.json").read_text())
    rgb_mean = np.asarray(log["rgb_mean"], dtype=np.float32)
    rgb_std = np.asarray(log["rgb_std"], dtype=np.float32)

    kind = "2d-vpd" if cfg["teacher_kind"] == "2d-joints" else "vi-vpd"
    spec = FeatureSpec(dim=cfg["output_dim"], kind=kind, fps=archive.fps)

    def inputs_for(clip):
        for t in range(clip.length):
            rgb = standardize_rgb(rgb_to_unit(clip.frame(t)), rgb_mean, rgb_std)
            flow = flow_to_input(preprocess_flow(clip.flow(t)))
            yield np.concatenate([rgb, flow], axis=0).astype(np.float32)

    plain, flipped = {}, {}
    for clip_id in archive.ids():
        clip = archive.clip(clip_id)
        plain[clip_id] = extract_features(inputs_for(clip), model)
        flipped[clip_id] = extract_features(inputs_for(clip), model, flip=True)

    out_dir.mkdir(parents=True, exist_ok=True)
    write_features(out_dir / "features.vpdf", spec, plain)
    write_features(out_dir / "features_flip.vpdf", spec, flipped)
    config.dump(out_dir / "resolved_config.txt")
    return write_manifest(out_dir, "extract", subset, inputs)


# ---------------------------------------------------------------------------
# action clips and the downstream heads


def build_action_clips(
    archive: Archive, store_path, flip_store_path=None
) -> list[ActionClip]:
    spec, sequences = read_features(store_path)
    flip_sequences = None
    if flip_store_path is not None:
        _, flip_sequences = read_features(flip_store_path)
    clips = []
    for clip_id in archive.ids():
        clip = archive.clip(clip_id)
        feats = sequences[clip_id]
        flips = flip_sequences[clip_id] if flip_sequences is not None else None
        for start, end, class_id in clip.action_intervals:
            segment = feats[start : end + 1]
            flipped = flips[start : end + 1] if flips is not None else None
            if spec.fps != 25.0:
                segment = resample_sequence(segment, spec.fps)
                if flipped is not None:
                    flipped = resample_sequence(flipped, spec.fps)
            clips.append(
                ActionClip(
                    video_id=clip_id,
                    start=start,
                    end=end,
                    label=class_id,
                    features=segment,
                    flipped_features=flipped,
                )
            )
    return clips


def _split_action_clips(archive: Archive, clips: list[ActionClip]):
    split_of = {c["id"]: c["split"] for c in archive.clips}
    train = [c for c in clips if split_of[c.video_id] == "train"]
    test = [c for c in clips if split_of[c.video_id] == "test"]
    return train, test


def _classifier_config(config: RunConfig) -> ClassifierConfig:
    return ClassifierConfig(
        hidden_dim=config["cls.hidden_dim"],
        epochs=config["cls.epochs"],
        batch_size=config["cls.batch_size"],
        lr=config["cls.lr"],
        normalize_features=config["cls.normalize_features"],
        seed=config["cls.seed"],
    )


def stage_train_cls(config: RunConfig, archive_dir, store_path, flip_store_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    subset = {k: v for k, v in config.to_dict().items() if k.startswith("cls.")}
    inputs = {
        "archive": manifest_hash(archive_dir),
        "store": file_sha256(store_path),
        "flip_store": file_sha256(flip_store_path),
    }
    if stage_is_cached(out_dir, "train-cls", subset, inputs):
        return load_manifest(out_dir)

    archive = load_archive(archive_dir)
    clips = build_action_clips(archive, store_path, flip_store_path)
    train, test = _split_action_clips(archive, clips)
    model = train_classifier(train, _classifier_config(config))
    from .recognize import classify

    out_dir.mkdir(parents=True, exist_ok=True)
    hits = 0
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for clip in test:
            predicted, _ = classify(clip, model)
            hits += int(predicted == clip.label)
            fh.write(
                json.dumps(
                    {
                        "clip": f"{clip.video_id}:{clip.start}",
                        "label": clip.label,
                        "predicted": predicted,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    accuracy = hits / len(test) if test else 0.0
    metrics = {"train_clips": len(train), "test_clips": len(test), "test_accuracy": accuracy}
    (out_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1))
    config.dump(out_dir / "resolved_config.txt")
    return write_manifest(out_dir, "train-cls", subset, inputs)


def stage_fewshot(config: RunConfig, archive_dir, store_path, flip_store_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    subset = {k: v for k, v in config.to_dict().items() if k.split(".")[0] in
              ("cls", "fewshot")}
    inputs = {
        "archive": manifest_hash(archive_dir),
        "store": file_sha256(store_path),
        "flip_store": file_sha256(flip_store_path),
    }
    if stage_is_cached(out_dir, "fewshot", subset, inputs):
        return load_manifest(out_dir)

    archive = load_archive(archive_dir)
    clips = build_action_clips(archive, store_path, flip_store_path)
    train, test = _split_action_clips(archive, clips)
    results = run_fewshot_protocol(
        train,
        test,
        list(config["fewshot.ks"]),
        _classifier_config(config),
        FewShotConfig(subsets=config["fewshot.subsets"], base_seed=config["fewshot.seed"]),
    )

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "fewshot.jsonl", "w") as fh:
        for k, entry in sorted(results.items()):
            for record in entry["per_subset"]:
                fh.write(
                    json.dumps(
                        {"k": k, "seed": record["seed"], "accuracy": record["accuracy"]},
                        sort_keys=True,
                    )
                    + "\n"
                )
    summary = {
        str(k): {"mean": entry["mean"], "std": entry["std"]} for k, entry in results.items()
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    config.dump(out_dir / "resolved_config.txt")
    return write_manifest(out_dir, "fewshot", subset, inputs)


def stage_eval(config: RunConfig, archive_dir, teacher_dir, extract_dir, out_dir) -> dict:
    """Fill-in-the-gaps metric: on heavily-corrupted frames, is the student
    closer to the clean ground-truth features than the corrupted teacher?"""
    out_dir = Path(out_dir)
    subset: dict = {}
    inputs = {
        "archive": manifest_hash(archive_dir),
        "teacher": manifest_hash(teacher_dir),
        "extract": manifest_hash(extract_dir),
    }
    if stage_is_cached(out_dir, "eval", subset, inputs):
        return load_manifest(out_dir)

    archive = load_archive(archive_dir)
    teacher_dir, extract_dir = Path(teacher_dir), Path(extract_dir)
    _, teacher_store = read_features(teacher_dir / "teacher.vpdf")
    _, gt_store = read_features(teacher_dir / "gt.vpdf")
    _, student_store = read_features(extract_dir / "features.vpdf")

    out_dir.mkdir(parents=True, exist_ok=True)
    sq_teacher, sq_student, total = 0.0, 0.0, 0
    sq_teacher_clean, sq_student_clean, total_clean = 0.0, 0.0, 0
    per_clip = open(out_dir / "metrics.jsonl", "w")
    for clip_id in archive.ids():
        clip = archive.clip(clip_id)
        corrupted = clip.corrupted
        gt = gt_store[clip_id].astype(np.float64)
        teacher = teacher_store[clip_id].astype(np.float64)
        student = student_store[clip_id].astype(np.float64)
        err_teacher = ((teacher - gt) ** 2).sum(axis=1)
        err_student = ((student - gt) ** 2).sum(axis=1)
        sq_teacher += err_teacher[corrupted].sum()
        sq_student += err_student[corrupted].sum()
        total += int(corrupted.sum())
        clean = ~corrupted
        sq_teacher_clean += err_teacher[clean].sum()
        sq_student_clean += err_student[clean].sum()
        total_clean += int(clean.sum())
        per_clip.write(
            json.dumps(
                {
                    "clip": clip_id,
                    "corrupted_frames": int(corrupted.sum()),
                    "teacher_mse_corrupted": float(err_teacher[corrupted].mean())
                    if corrupted.any() else None,
                    "student_mse_corrupted": float(err_student[corrupted].mean())
                    if corrupted.any() else None,
                },
                sort_keys=True,
            )
            + "\n"
        )
    per_clip.close()

    metrics = {
        "corrupted_frames": total,
        "teacher_mse_corrupted": sq_teacher / max(total, 1),
        "student_mse_corrupted": sq_student / max(total, 1),
        "relative_reduction": 1.0 - (sq_student / sq_teacher) if sq_teacher > 0 else 0.0,
        "clean_frames": total_clean,
        "teacher_mse_clean": sq_teacher_clean / max(total_clean, 1),
        "student_mse_clean": sq_student_clean / max(total_clean, 1),
    }
    (out_dir / "metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=1))
    config.dump(out_dir / "resolved_config.txt")
    return write_manifest(out_dir, "eval", subset, inputs)


def stage_retrieve(config: RunConfig, archive_dir, store_path, flip_store_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    subset = {k: v for k, v in config.to_dict().items() if k.startswith("retrieve.")}
    inputs = {
        "archive": manifest_hash(archive_dir),
        "store": file_sha256(store_path),
        "flip_store": file_sha256(flip_store_path),
    }
    if stage_is_cached(out_dir, "retrieve", subset, inputs):
        return load_manifest(out_dir)

    archive = load_archive(archive_dir)
    clips = build_action_clips(archive, store_path, flip_store_path)
    queries_lib = [
        align_mod.AlignmentQuery(features=c.features, flipped=c.flipped_features)
        for c in clips
    ]
    labels = [c.label for c in clips]
    max_queries = min(config["retrieve.max_queries"], len(clips))

    out_dir.mkdir(parents=True, exist_ok=True)
    rankings = []
    with open(out_dir / "rankings.jsonl", "w") as fh:
        for qi in range(max_queries):
            results = align_mod.retrieve(queries_lib[qi], queries_lib, exclude=qi)
            ranked_labels = [labels[r.index] for r in results]
            rankings.append(ranked_labels)
            for rank, result in enumerate(results):
                fh.write(
                    json.dumps(
                        {
                            "query": f"{clips[qi].video_id}:{clips[qi].start}",
                            "rank": rank,
                            "match": f"{clips[result.index].video_id}:{clips[result.index].start}",
                            "cost": result.cost if np.isfinite(result.cost) else "inf",
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
    precisions = align_mod.precision_at_k(
        rankings, [labels[i] for i in range(max_queries)], list(config["retrieve.ks"])
    )
    (out_dir / "metrics.json").write_text(
        json.dumps({str(k): v for k, v in precisions.items()}, sort_keys=True, indent=1)
    )
    config.dump(out_dir / "resolved_config.txt")
    return write_manifest(out_dir, "retrieve", subset, inputs)


def stage_detect(config: RunConfig, archive_dir, store_path, out_dir) -> dict:
    out_dir = Path(out_dir)
    subset = {k: v for k, v in config.to_dict().items() if k.startswith("detect.")}
    inputs = {
        "archive": manifest_hash(archive_dir),
        "store": file_sha256(store_path),
    }
    if stage_is_cached(out_dir, "detect", subset, inputs):
        return load_manifest(out_dir)

    archive = load_archive(archive_dir)
    _, sequences = read_features(store_path)

    def labels_for(clip) -> np.ndarray:
        marks = np.zeros(clip.length, dtype=np.int64)
        for start, end, _ in clip.action_intervals:
            marks[start : end + 1] = 1
        return marks

    rng = np.random.default_rng(config["detect.seed"])
    train_ids = archive.ids("train")
    picked = sorted(
        rng.choice(len(train_ids), size=min(config["detect.train_videos"], len(train_ids)),
                   replace=False).tolist()
    )
    train_videos = [train_ids[i] for i in picked]
    test_videos = archive.ids("test")

    train_seqs = [sequences[v] for v in train_videos]
    train_labels = [labels_for(archive.clip(v)) for v in train_videos]
    detector_config = detect_mod.DetectorConfig(
        window=config["detect.window"],
        steps=config["detect.steps"],
        batch_size=config["detect.batch_size"],
        lr=config["detect.lr"],
        folds=config["detect.folds"],
        activation_threshold=config["detect.threshold"],
        seed=config["detect.seed"],
    )
    ensemble = detect_mod.train_detector_ensemble(train_seqs, train_labels, detector_config)

    lengths = [
        end - start + 1
        for v in train_videos
        for start, end, _ in archive.clip(v).action_intervals
    ]
    mean_len = float(np.mean(lengths))

    proposals, ground_truth = [], []
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "detections.jsonl", "w") as fh:
        for video in test_videos:
            clip = archive.clip(video)
            activations = ensemble.activations(sequences[video])
            for prop in detect_mod.propose(activations, detector_config, mean_len, video):
                proposals.append(prop)
                fh.write(
                    json.dumps(
                        {
                            "video": video,
                            "start": prop.start,
                            "end": prop.end,
                            "score": prop.score,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
            for start, end, _ in clip.action_intervals:
                ground_truth.append(detect_mod.GroundTruthInterval(start, end, video))

    ap = detect_mod.evaluate_ap(proposals, ground_truth)
    (out_dir / "ap.json").write_text(
        json.dumps({f"{t:.1f}": v for t, v in ap.items()}, sort_keys=True, indent=1)
    )
    config.dump(out_dir / "resolved_config.txt")
    return write_manifest(out_dir, "detect", subset, inputs)


# ---------------------------------------------------------------------------
# threshold sweep


def stage_sweep(config: RunConfig, archive_dir, teacher_dir, out_dir) -> dict:
    """Selection-threshold sweep: per threshold, report the supervision set
    size and (distill -> extract -> fewshot) accuracy on distilled features."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    archive = load_archive(archive_dir)
    corpus = build_frame_corpus(archive)
    records = []
    for threshold in config["sweep.thresholds"]:
        sweep_config = RunConfig(dict(config.values))
        sweep_config.set("policy.score_threshold", threshold, raw=False)
        tag = f"thr_{threshold:.2f}".replace(".", "p")
        try:
            supervision, validation = select_training_frames(
                corpus,
                SelectionPolicy(
                    score_threshold=threshold,
                    validation_fraction=config["policy.validation_fraction"],
                    seed=config["policy.seed"],
                ),
            )
            selected = len(supervision) + len(validation)
        except Exception:
            selected = 0
        record = {"threshold": threshold, "selected_frames": selected}
        if selected > 0:
            distill_dir = out_dir / tag / "distill"
            extract_dir = out_dir / tag / "extract"
            fewshot_dir = out_dir / tag / "fewshot"
            stage_distill(sweep_config, archive_dir, teacher_dir, distill_dir)
            stage_extract(sweep_config, archive_dir, distill_dir, extract_dir)
            stage_fewshot(
                sweep_config,
                archive_dir,
                extract_dir / "features.vpdf",
                extract_dir / "features_flip.vpdf",
                fewshot_dir,
            )
            summary = json.loads((fewshot_dir / "summary.json").read_text())
            record["fewshot"] = summary
            record["mean_accuracy"] = float(
                np.mean([entry["mean"] for entry in summary.values()])
            )
        records.append(record)

    with open(out_dir / "sweep.jsonl", "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    (out_dir / "sweep_summary.json").write_text(json.dumps(records, sort_keys=True, indent=1))
    config.dump(out_dir / "resolved_config.txt")
    subset = {k: v for k, v in config.to_dict().items() if k.split(".")[0] in
              ("sweep", "student", "policy", "cls", "fewshot")}
    inputs = {
        "archive": manifest_hash(archive_dir),
        "teacher": manifest_hash(teacher_dir),
    }
    return write_manifest(out_dir, "sweep", subset, inputs)
