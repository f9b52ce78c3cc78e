"""View-invariant pose embedder.

An MLP encoder maps normalized 2D joints to an embedding trained with two
losses: reconstruction of rotation-canonical 3D features through a
dataset-specific decoder head, and a contrastive term that pulls together
embeddings of different camera views of the same 3D pose while pushing
pose-differing pairs from the same sequence at least ``margin`` apart.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyBatch, InsufficientViews
from .skeleton import NormalizedPose2D, pose_differs, vertical_flip_normalized

INPUT_DIM = 26
CANONICAL_DIM = 91


@dataclass(frozen=True)
class EmbedderConfig:
    embed_dim: int = 64
    hidden_dims: tuple[int, ...] = (256, 256)
    reconstruction_heads: dict = field(default_factory=lambda: {"synth": CANONICAL_DIM})
    margin: float = 1.0
    loss_weights: tuple[float, float] = (1.0, 1.0)  # (reconstruction, contrastive)
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 128
    epochs: int = 30
    validation_fraction: float = 0.15
    negatives_per_pose: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if min(self.loss_weights) < 0 or max(self.loss_weights) <= 0:
            raise ValueError("loss weights must be >= 0 and not both zero")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "hidden_dims": list(self.hidden_dims),
            "reconstruction_heads": dict(self.reconstruction_heads),
            "margin": self.margin,
            "loss_weights": list(self.loss_weights),
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "validation_fraction": self.validation_fraction,
            "negatives_per_pose": self.negatives_per_pose,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class PoseEmbedding:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding must be finite")
        object.__setattr__(self, "values", values)


def build_embedder(config: EmbedderConfig):
    import torch.nn as nn

    class PoseEmbedder(nn.Module):
        def __init__(self):
            super().__init__()
            layers = []
            prev = INPUT_DIM
            for width in config.hidden_dims:
                layers += [nn.Linear(prev, width), nn.ReLU(inplace=True)]
                prev = width
            layers.append(nn.Linear(prev, config.embed_dim))
            self.encoder = nn.Sequential(*layers)
            self.decoder_hidden = nn.Sequential(
                nn.Linear(config.embed_dim, 128), nn.ReLU(inplace=True)
            )
            self.heads = nn.ModuleDict(
                {name: nn.Linear(128, dim) for name, dim in config.reconstruction_heads.items()}
            )
            self.input_dim = INPUT_DIM
            self.embed_dim = config.embed_dim

        def forward(self, x):
            return self.encoder(x)

        def decode(self, embedding, dataset: str):
            return self.heads[dataset](self.decoder_hidden(embedding))

    return PoseEmbedder()


def embed_batch(values: np.ndarray, model) -> np.ndarray:
    """Embed (B, 26) normalized pose vectors; pure and deterministic."""
    import torch

    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2 or values.shape[1] != model.input_dim:
        raise DimensionMismatch(f"expected (*, {model.input_dim}), got {values.shape}")
    model.eval()
    with torch.no_grad():
        return model(torch.from_numpy(values)).numpy()


def embed_pose(pose: NormalizedPose2D, model, vertical_concat: bool = False) -> PoseEmbedding:
    """Embed one pose; with ``vertical_concat`` the embedding of the
    vertically-flipped pose is appended, doubling the dimension.

    The two halves are embedded in separate forward passes so the first half
    equals the plain embedding bit-for-bit.
    """
    parts = [embed_batch(pose.values[None, :].astype(np.float32), model)[0]]
    if vertical_concat:
        flipped = vertical_flip_normalized(pose)
        parts.append(embed_batch(flipped.values[None, :].astype(np.float32), model)[0])
    return PoseEmbedding(values=np.concatenate(parts))


@dataclass
class VipeBatch:
    """Positive view pairs with canonical targets, plus negative pose pairs."""

    view_a: np.ndarray  # (B, 26)
    view_b: np.ndarray  # (B, 26)
    canonical: np.ndarray  # (B, 91)
    dataset: str = "synth"
    negatives_a: np.ndarray | None = None  # (K, 26)
    negatives_b: np.ndarray | None = None  # (K, 26)


def vipe_losses(batch: VipeBatch, model, config: EmbedderConfig):
    """(reconstruction, contrastive) loss tensors for one batch.

    reconstruction: mean squared error of both decoded views against the
    canonical features. contrastive: mean squared positive distance plus
    mean squared hinge max(0, margin - negative distance).
    """
    import torch

    if len(batch.view_a) == 0:
        raise EmptyBatch("vipe batch has no positive pairs")
    view_a = torch.as_tensor(batch.view_a, dtype=torch.float32)
    view_b = torch.as_tensor(batch.view_b, dtype=torch.float32)
    canonical = torch.as_tensor(batch.canonical, dtype=torch.float32)

    emb_a = model(view_a)
    emb_b = model(view_b)
    recon = 0.5 * (
        ((model.decode(emb_a, batch.dataset) - canonical) ** 2).mean()
        + ((model.decode(emb_b, batch.dataset) - canonical) ** 2).mean()
    )
    contrastive = ((emb_a - emb_b) ** 2).sum(dim=1).mean()
    if batch.negatives_a is not None and len(batch.negatives_a) > 0:
        neg_a = model(torch.as_tensor(batch.negatives_a, dtype=torch.float32))
        neg_b = model(torch.as_tensor(batch.negatives_b, dtype=torch.float32))
        distance = torch.linalg.vector_norm(neg_a - neg_b, dim=1)
        hinge = torch.clamp(config.margin - distance, min=0.0)
        contrastive = contrastive + (hinge**2).mean()
    return recon, contrastive


@dataclass
class MultiViewPoseCorpus:
    """Poses with >= 2 camera views each, grouped into motion sequences."""

    views: np.ndarray  # (P, C, 26) normalized 2D projections
    canonical: np.ndarray  # (P, 91)
    joints3d: np.ndarray  # (P, 13, 3)
    sequence_ids: np.ndarray  # (P,)
    dataset: str = "synth"

    def __post_init__(self):
        if self.views.ndim != 3 or self.views.shape[2] != INPUT_DIM:
            raise DimensionMismatch("views must be (P, C, 26)")
        if self.views.shape[1] < 2:
            raise InsufficientViews("need at least 2 camera views per pose")

    @property
    def num_poses(self) -> int:
        return len(self.views)


def _negative_partners(corpus: MultiViewPoseCorpus, rng: np.random.Generator, limit: int):
    """For each pose, a few same-sequence partners that genuinely differ."""
    partners = [[] for _ in range(corpus.num_poses)]
    by_seq: dict[int, list[int]] = {}
    for i, sid in enumerate(corpus.sequence_ids):
        by_seq.setdefault(int(sid), []).append(i)
    for members in by_seq.values():
        for i in members:
            candidates = rng.permutation(members)
            for j in candidates:
                if j == i or len(partners[i]) >= limit:
                    continue
                if pose_differs(corpus.joints3d[i], corpus.joints3d[j]):
                    partners[i].append(int(j))
    return partners


def train_embedder(corpus: MultiViewPoseCorpus, config: EmbedderConfig):
    """Fit the embedder; returns (model, history) with the best-epoch weights.

    Validation poses are withheld up front; after each epoch the total
    validation loss decides whether to snapshot the parameters. Negatives
    come from the same sequence when a pose-differing partner exists there,
    falling back to a batch neighbor otherwise.
    """
    import torch

    torch.manual_seed(config.seed)
    model = build_embedder(config)
    history = {"train": [], "val": []}
    if config.epochs == 0:
        return model, history

    rng = np.random.default_rng(config.seed)
    partners = _negative_partners(corpus, rng, config.negatives_per_pose)

    n_val = max(1, int(round(config.validation_fraction * corpus.num_poses)))
    order = rng.permutation(corpus.num_poses)
    val_ids, train_ids = order[:n_val], order[n_val:]

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    weight_recon, weight_con = config.loss_weights

    def assemble(ids: np.ndarray, sample_rng: np.random.Generator) -> VipeBatch:
        cams = corpus.views.shape[1]
        pick = sample_rng.integers(0, cams, size=(len(ids), 2))
        same = pick[:, 0] == pick[:, 1]
        pick[same, 1] = (pick[same, 0] + 1) % cams
        view_a = corpus.views[ids, pick[:, 0]]
        view_b = corpus.views[ids, pick[:, 1]]
        neg_a, neg_b = [], []
        for row, i in enumerate(ids):
            if partners[i]:
                j = int(sample_rng.choice(partners[i]))
            else:  # no qualifying same-sequence partner: use a batch neighbor
                j = int(ids[(row + 1) % len(ids)])
                if j == i:
                    continue
            neg_a.append(corpus.views[i, sample_rng.integers(0, cams)])
            neg_b.append(corpus.views[j, sample_rng.integers(0, cams)])
        return VipeBatch(
            view_a=view_a,
            view_b=view_b,
            canonical=corpus.canonical[ids],
            dataset=corpus.dataset,
            negatives_a=np.asarray(neg_a, dtype=np.float32) if neg_a else None,
            negatives_b=np.asarray(neg_b, dtype=np.float32) if neg_b else None,
        )

    def validation_loss() -> float:
        model.eval()
        val_rng = np.random.default_rng(config.seed + 7)
        with torch.no_grad():
            total, count = 0.0, 0
            for start in range(0, len(val_ids), config.batch_size):
                ids = val_ids[start : start + config.batch_size]
                batch = assemble(ids, val_rng)
                recon, contrastive = vipe_losses(batch, model, config)
                total += (weight_recon * recon + weight_con * contrastive).item() * len(ids)
                count += len(ids)
        model.train()
        return total / max(count, 1)

    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(config.epochs):
        epoch_rng = np.random.default_rng((config.seed, epoch))
        shuffled = epoch_rng.permutation(train_ids)
        running = 0.0
        batches = 0
        for start in range(0, len(shuffled), config.batch_size):
            ids = shuffled[start : start + config.batch_size]
            if len(ids) == 0:
                continue
            batch = assemble(ids, epoch_rng)
            recon, contrastive = vipe_losses(batch, model, config)
            loss = weight_recon * recon + weight_con * contrastive
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += loss.item()
            batches += 1
        val = validation_loss()
        history["train"].append(running / max(batches, 1))
        history["val"].append(val)
        if val < best_val:
            best_val = val
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model, history
