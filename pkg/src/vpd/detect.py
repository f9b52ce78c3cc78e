"""Few-shot temporal action detection.

A small ensemble of bidirectional recurrent per-frame classifiers produces
activation traces; maximal super-threshold runs become proposals, which are
length-adjusted toward the mean training action length and scored by their
mean activation. Evaluation is average precision at temporal IoU thresholds
with greedy one-to-one matching.

Intervals are inclusive frame ranges throughout: [start, end] covers
end - start + 1 frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientPositives, NoGroundTruth


@dataclass(frozen=True)
class DetectorConfig:
    window: int = 250
    steps: int = 10_000
    batch_size: int = 100
    lr: float = 1e-3
    dropout_dense: float = 0.5
    dropout_input: float = 0.2
    hidden_dim: int = 128
    folds: int = 5
    activation_threshold: float = 0.2
    min_proposal_len: int = 3
    length_band: tuple[float, float] = (0.67, 1.33)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.activation_threshold < 1.0:
            raise ValueError("activation threshold must be in (0, 1)")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        low, high = self.length_band
        if not low < 1.0 < high:
            raise ValueError("length band must bracket 1.0")


@dataclass(frozen=True)
class Proposal:
    start: int
    end: int  # inclusive
    score: float
    video_id: str = ""

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("proposal interval is empty")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be in [0, 1]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class GroundTruthInterval:
    start: int
    end: int  # inclusive
    video_id: str = ""

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("ground-truth interval is empty")


def temporal_iou(a_start: int, a_end: int, b_start: int, b_end: int) -> float:
    """IoU on inclusive frame intervals."""
    inter = min(a_end, b_end) - max(a_start, b_start) + 1
    if inter <= 0:
        return 0.0
    union = (a_end - a_start + 1) + (b_end - b_start + 1) - inter
    return inter / union


def propose(
    activations: np.ndarray,
    config: DetectorConfig,
    mean_action_length: float,
    video_id: str = "",
) -> list[Proposal]:
    """Turn a per-frame activation trace into scored proposals.

    Maximal runs of consecutive frames strictly above the threshold are kept
    when at least ``min_proposal_len`` long. Runs whose length falls outside
    the band around ``mean_action_length`` are resized to the mean length,
    symmetrically about the run center and clipped to the trace bounds. The
    score is the mean activation over the original run either way.
    """
    activations = np.asarray(activations, dtype=np.float64)
    if mean_action_length <= 0:
        raise ValueError("mean_action_length must be positive")
    above = activations > config.activation_threshold
    proposals: list[Proposal] = []
    total = len(activations)
    start = None
    for t in range(total + 1):
        active = t < total and above[t]
        if active and start is None:
            start = t
        elif not active and start is not None:
            end = t - 1
            run_len = end - start + 1
            if run_len >= config.min_proposal_len:
                score = float(activations[start : end + 1].mean())
                low, high = config.length_band
                if run_len < low * mean_action_length or run_len > high * mean_action_length:
                    target = int(round(mean_action_length))
                    center = 0.5 * (start + end)
                    new_start = int(round(center - (target - 1) / 2.0))
                    new_end = new_start + target - 1
                    new_start = max(0, new_start)
                    new_end = min(total - 1, new_end)
                    start, end = new_start, new_end
                proposals.append(
                    Proposal(start=start, end=end, score=score, video_id=video_id)
                )
            start = None
    return proposals


def evaluate_ap(
    proposals: list[Proposal],
    ground_truth: list[GroundTruthInterval],
    tiou_thresholds: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7),
) -> dict[float, float]:
    """Average precision per tIoU threshold.

    Proposals are visited in descending score order and greedily matched
    one-to-one to the unmatched same-video ground-truth interval with the
    highest overlap at or above the threshold. AP is the area under the
    precision-recall curve with all-point interpolation.
    """
    if not ground_truth:
        raise NoGroundTruth("evaluation needs at least one ground-truth interval")
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, i))
    out = {}
    for threshold in tiou_thresholds:
        matched = [False] * len(ground_truth)
        tp = np.zeros(len(proposals))
        for rank, pi in enumerate(order):
            prop = proposals[pi]
            best_iou, best_gt = 0.0, None
            for gi, gt in enumerate(ground_truth):
                if matched[gi] or gt.video_id != prop.video_id:
                    continue
                iou = temporal_iou(prop.start, prop.end, gt.start, gt.end)
                if iou >= threshold and iou > best_iou:
                    best_iou, best_gt = iou, gi
            if best_gt is not None:
                matched[best_gt] = True
                tp[rank] = 1.0
        out[threshold] = _ap_from_matches(tp, len(ground_truth))
    return out


def _ap_from_matches(tp: np.ndarray, num_gt: int) -> float:
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / num_gt
    # all-point interpolation: precision envelope integrated over recall steps
    ap = 0.0
    prev_recall = 0.0
    for i in range(len(tp)):
        if tp[i]:
            envelope = precision[i:].max()
            ap += (recall[i] - prev_recall) * envelope
            prev_recall = recall[i]
    return float(ap)


@dataclass
class DetectorEnsemble:
    """Mean of per-fold recurrent frame classifiers."""

    fold_models: list = field(default_factory=list)
    fold_train_ids: list = field(default_factory=list)
    feature_dim: int = 0
    config: DetectorConfig = field(default_factory=DetectorConfig)

    def activations(self, features: np.ndarray) -> np.ndarray:
        """Averaged per-frame action probability over the folds."""
        import torch

        features = np.asarray(features, dtype=np.float32)
        x = torch.from_numpy(features).unsqueeze(0)
        acc = np.zeros(features.shape[0], dtype=np.float64)
        with torch.no_grad():
            for model in self.fold_models:
                model.eval()
                logits = model(x)[0]
                acc += torch.softmax(logits, dim=-1)[:, 1].numpy().astype(np.float64)
        return acc / max(len(self.fold_models), 1)


def _build_frame_classifier(feature_dim: int, config: DetectorConfig):
    import torch.nn as nn

    class FrameClassifier(nn.Module):
        def __init__(self):
            super().__init__()
            self.input_dropout = nn.Dropout(config.dropout_input)
            self.gru = nn.GRU(
                feature_dim,
                config.hidden_dim,
                num_layers=2,
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
                nn.Linear(width, 2),
            )

        def forward(self, x):
            if self.training:
                keep = self.input_dropout(x.new_ones(x.shape[:2])).unsqueeze(-1)
                x = x * keep
            hidden, _ = self.gru(x)
            flat = hidden.reshape(-1, hidden.shape[-1])
            logits = self.head(flat)
            return logits.reshape(hidden.shape[0], hidden.shape[1], 2)

    return FrameClassifier()


def train_detector_ensemble(
    sequences: list[np.ndarray],
    frame_labels: list[np.ndarray],
    config: DetectorConfig = DetectorConfig(),
) -> DetectorEnsemble:
    """Train one fold per cross-validation split and average their outputs.

    Each fold holds out one slice of the training sequences and fits on the
    rest, sampling fixed-length windows biased toward containing at least one
    positive frame. Deterministic given the config seed.
    """
    import torch

    if len(sequences) != len(frame_labels):
        raise ValueError("sequences and frame_labels must align")
    if len(sequences) < config.folds:
        raise InsufficientPositives(
            f"need at least {config.folds} sequences for {config.folds}-fold training"
        )
    positives = sum(int(np.asarray(l).sum()) for l in frame_labels)
    if positives < config.folds:
        raise InsufficientPositives("too few positive frames to train the folds")

    feature_dim = int(np.asarray(sequences[0]).shape[1])
    ensemble = DetectorEnsemble(feature_dim=feature_dim, config=config)
    fold_assign = [i % config.folds for i in range(len(sequences))]

    for fold in range(config.folds):
        torch.manual_seed(config.seed * 1000 + fold)
        rng = np.random.default_rng(config.seed * 1000 + fold)
        train_ids = [i for i in range(len(sequences)) if fold_assign[i] != fold]
        if not train_ids:
            train_ids = list(range(len(sequences)))
        ensemble.fold_train_ids.append(train_ids)
        model = _build_frame_classifier(feature_dim, config)
        optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr)
        loss_fn = torch.nn.CrossEntropyLoss()
        model.train()
        for _ in range(config.steps):
            xs, ys = [], []
            for _ in range(config.batch_size):
                sid = int(rng.choice(train_ids))
                seq = np.asarray(sequences[sid], dtype=np.float32)
                lab = np.asarray(frame_labels[sid], dtype=np.int64)
                if len(seq) <= config.window:
                    pad = config.window - len(seq)
                    seq = np.pad(seq, ((0, pad), (0, 0)))
                    lab = np.pad(lab, (0, pad))
                    start = 0
                else:
                    start = int(rng.integers(0, len(seq) - config.window + 1))
                xs.append(seq[start : start + config.window])
                ys.append(lab[start : start + config.window])
            x = torch.from_numpy(np.stack(xs))
            y = torch.from_numpy(np.stack(ys))
            optimizer.zero_grad()
            logits = model(x)
            loss = loss_fn(logits.reshape(-1, 2), y.reshape(-1))
            loss.backward()
            optimizer.step()
        ensemble.fold_models.append(model)
    return ensemble
