"""Sequence classification over per-frame pose features.

A two-layer bidirectional GRU encodes the sequence; hidden states are
max-pooled over time and classified by a BN-Dropout-FC-ReLU-BN-Dropout-FC
head. Training adds the horizontally-flipped feature sequences as extra
examples; inference sums the softmax of the regular and flipped passes.

The few-shot protocol trains on fixed, seeded, class-balanced subsets of k
examples per class and reports top-1 accuracy on the full test set.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .corpus import resample_indices
from .errors import (
    EmptySequence,
    EmptyTrainingSet,
    MissingFlippedFeatures,
    NoTestData,
    SingleClass,
)


@dataclass(frozen=True)
class ActionClip:
    """One labeled action: per-frame d-vectors on the 25 fps timeline."""

    video_id: str
    start: int
    end: int  # inclusive
    label: int
    features: np.ndarray  # (T, d) float32
    flipped_features: np.ndarray | None = None

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("interval is empty")
        features = np.asarray(self.features, dtype=np.float32)
        if features.ndim != 2 or len(features) == 0:
            raise EmptySequence("clip has no feature frames")
        object.__setattr__(self, "features", features)
        if self.flipped_features is not None:
            flipped = np.asarray(self.flipped_features, dtype=np.float32)
            if flipped.shape != features.shape:
                raise ValueError("flipped features must match the regular shape")
            object.__setattr__(self, "flipped_features", flipped)


@dataclass(frozen=True)
class ClassifierConfig:
    hidden_dim: int = 128
    layers: int = 2
    dropout_dense: float = 0.5
    dropout_input: float = 0.2
    batch_size: int = 50
    epochs: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.01
    normalize_features: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if not 0 <= self.dropout_dense < 1 or not 0 <= self.dropout_input < 1:
            raise ValueError("dropout rates must be in [0, 1)")


@dataclass(frozen=True)
class FewShotConfig:
    subsets: int = 5
    base_seed: int = 0


def resample_sequence(
    features: np.ndarray, src_fps: float, target_fps: float = 25.0
) -> np.ndarray:
    """Nearest-frame resampling of a feature sequence onto the target rate."""
    features = np.asarray(features)
    if len(features) == 0:
        raise EmptySequence("cannot resample an empty sequence")
    return features[resample_indices(len(features), src_fps, target_fps)]


def temporal_max_pool(hidden, lengths):
    """Max over the valid time steps of each padded sequence.

    Invariant to any permutation of a sequence's (valid) hidden states, so
    the pooled encoding carries no step ordering of its own.
    """
    import torch

    mask = (
        torch.arange(hidden.shape[1], device=hidden.device)[None, :]
        < torch.as_tensor(lengths)[:, None]
    )
    return hidden.masked_fill(~mask.unsqueeze(-1), float("-inf")).max(dim=1).values


def _build_classifier(feature_dim: int, num_classes: int, config: ClassifierConfig):
    import torch
    import torch.nn as nn

    class SequenceClassifier(nn.Module):
        def __init__(self):
            super().__init__()
            self.input_dropout = nn.Dropout(config.dropout_input)
            self.gru = nn.GRU(
                feature_dim,
                config.hidden_dim,
                num_layers=config.layers,
                batch_first=True,
                bidirectional=True,
            )
            width = 2 * config.hidden_dim
            self.head = nn.Sequential(
                nn.BatchNorm1d(width),
                nn.Dropout(config.dropout_dense),
                nn.Linear(width, width),
                nn.ReLU(inplace=True),
                nn.BatchNorm1d(width),
                nn.Dropout(config.dropout_dense),
                nn.Linear(width, num_classes),
            )
            self.feature_dim = feature_dim
            self.num_classes = num_classes
            self.feature_mean: np.ndarray | None = None
            self.feature_std: np.ndarray | None = None

        def forward(self, x, lengths):
            if self.training:
                # drop whole feature vectors per timestep
                keep = self.input_dropout(x.new_ones(x.shape[:2])).unsqueeze(-1)
                x = x * keep
            packed = nn.utils.rnn.pack_padded_sequence(
                x, lengths, batch_first=True, enforce_sorted=False
            )
            hidden, _ = self.gru(packed)
            hidden, _ = nn.utils.rnn.pad_packed_sequence(hidden, batch_first=True)
            return self.head(temporal_max_pool(hidden, lengths))

    return SequenceClassifier()


def _pad_batch(sequences: list[np.ndarray]):
    import torch

    lengths = [len(s) for s in sequences]
    width = max(lengths)
    dim = sequences[0].shape[1]
    out = np.zeros((len(sequences), width, dim), dtype=np.float32)
    for i, seq in enumerate(sequences):
        out[i, : len(seq)] = seq
    return torch.from_numpy(out), lengths


def _apply_normalization(model, features: np.ndarray) -> np.ndarray:
    if model.feature_mean is None:
        return features
    return (features - model.feature_mean) / model.feature_std


def train_classifier(clips: list[ActionClip], config: ClassifierConfig = ClassifierConfig()):
    """Fit the classifier; flipped sequences join the training set.

    Labels may be any ints; the model maps them to contiguous class indices
    stored as ``model.classes``. Deterministic given the config seed.
    """
    import torch

    if not clips:
        raise EmptyTrainingSet("no training clips")
    classes = sorted({c.label for c in clips})
    if len(classes) < 2:
        raise SingleClass(f"need >= 2 classes, got {classes}")
    label_index = {label: i for i, label in enumerate(classes)}

    sequences: list[np.ndarray] = []
    labels: list[int] = []
    for clip in clips:
        sequences.append(clip.features)
        labels.append(label_index[clip.label])
        if clip.flipped_features is not None:
            sequences.append(clip.flipped_features)
            labels.append(label_index[clip.label])

    torch.manual_seed(config.seed)
    model = _build_classifier(sequences[0].shape[1], len(classes), config)
    model.classes = classes

    if config.normalize_features:
        stacked = np.concatenate(sequences, axis=0)
        model.feature_mean = stacked.mean(axis=0)
        model.feature_std = np.maximum(stacked.std(axis=0), 1e-6)
        sequences = [_apply_normalization(model, s) for s in sequences]

    if config.epochs == 0:
        model.eval()
        return model

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    loss_fn = torch.nn.CrossEntropyLoss()
    label_tensor = np.asarray(labels, dtype=np.int64)

    model.train()
    rng = np.random.default_rng(config.seed)
    for _ in range(config.epochs):
        order = rng.permutation(len(sequences))
        for start in range(0, len(order), config.batch_size):
            ids = order[start : start + config.batch_size]
            if len(ids) < 2:
                continue  # BatchNorm needs more than one row
            x, lengths = _pad_batch([sequences[i] for i in ids])
            y = torch.from_numpy(label_tensor[ids])
            optimizer.zero_grad()
            loss = loss_fn(model(x, lengths), y)
            loss.backward()
            optimizer.step()
        scheduler.step()
    model.eval()
    return model


def classify(clip: ActionClip, model) -> tuple[int, np.ndarray]:
    """Predicted label and summed softmax scores over both chirality passes.

    Raises MissingFlippedFeatures when the clip lacks its flipped sequence.
    Ties break toward the lowest class index.
    """
    import torch

    if clip.flipped_features is None:
        raise MissingFlippedFeatures(f"{clip.video_id}: no flipped feature sequence")
    model.eval()
    with torch.no_grad():
        scores = np.zeros(model.num_classes, dtype=np.float64)
        for seq in (clip.features, clip.flipped_features):
            seq = _apply_normalization(model, seq)
            x, lengths = _pad_batch([seq.astype(np.float32)])
            logits = model(x, lengths)[0]
            scores += torch.softmax(logits, dim=-1).numpy().astype(np.float64)
    return model.classes[int(np.argmax(scores))], scores


def evaluate_accuracy(clips: list[ActionClip], model) -> float:
    if not clips:
        raise NoTestData("no evaluation clips")
    hits = sum(1 for clip in clips if classify(clip, model)[0] == clip.label)
    return hits / len(clips)


def sample_fewshot_subset(
    clips: list[ActionClip], k: int, seed: int
) -> list[ActionClip]:
    """Class-balanced draw of k clips per class; smaller classes contribute
    everything they have. Deterministic given the seed."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, clip in enumerate(clips):
        by_class.setdefault(clip.label, []).append(i)
    chosen: list[int] = []
    for label in sorted(by_class):
        members = by_class[label]
        if len(members) <= k:
            chosen.extend(members)
        else:
            chosen.extend(rng.choice(members, size=k, replace=False).tolist())
    return [clips[i] for i in sorted(chosen)]


def run_fewshot_protocol(
    train_clips: list[ActionClip],
    test_clips: list[ActionClip],
    k_values: list[int],
    classifier_config: ClassifierConfig = ClassifierConfig(),
    fewshot: FewShotConfig = FewShotConfig(),
) -> dict[int, dict]:
    """Mean/std top-1 accuracy over the fixed subsets, for each k."""
    if not test_clips:
        raise NoTestData("protocol needs a test set")
    results: dict[int, dict] = {}
    for k in k_values:
        per_subset = []
        for s in range(fewshot.subsets):
            subset_seed = fewshot.base_seed * 1_000_003 + 101 * k + s
            subset = sample_fewshot_subset(train_clips, k, subset_seed)
            run_config = dataclasses.replace(classifier_config, seed=classifier_config.seed + s)
            model = train_classifier(subset, run_config)
            accuracy = evaluate_accuracy(test_clips, model)
            per_subset.append({"seed": subset_seed, "accuracy": accuracy})
        accuracies = np.array([p["accuracy"] for p in per_subset])
        results[k] = {
            "mean": float(accuracies.mean()),
            "std": float(accuracies.std()),
            "per_subset": per_subset,
        }
    return results
