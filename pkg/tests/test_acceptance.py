"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy fixtures build a shared desk-scale corpus and its derived
artifacts under VPD_ACCEPT_DIR (default /tmp/vpd_acceptance). Every stage is
manifest-cached, so re-runs only recompute what changed. Run with ``-s`` to
see the per-criterion lines as they complete.
"""

import itertools
import json
import os
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from vpd import pipeline
from vpd.config import RunConfig
from vpd.corpus import read_features
from vpd.align import dtw_cost
from vpd.detect import (
    DetectorConfig,
    GroundTruthInterval,
    Proposal,
    evaluate_ap,
    propose,
)
from vpd.skeleton import (
    RawPose2D,
    canonicalize_3d,
    flip_normalized_2d,
    normalize_2d,
    pose_differs,
)
from vpd.synth import CameraSpec, NoiseModel, generate_clip, project_pose
from vpd.vipe import (
    EmbedderConfig,
    MultiViewPoseCorpus,
    VipeBatch,
    embed_batch,
    train_embedder,
    vipe_losses,
)

from test_align import enumerate_paths_cost

ACCEPT_DIR = Path(os.environ.get("VPD_ACCEPT_DIR", Path(tempfile.gettempdir()) / "vpd_acceptance"))


def report(criterion: int, ok: bool, detail: str):
    print(f"\n[ACCEPTANCE {criterion}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# shared desk-scale artifacts


@pytest.fixture(scope="session")
def desk_config():
    return RunConfig()


@pytest.fixture(scope="session")
def desk_archive(desk_config):
    pipeline.stage_synth(desk_config, ACCEPT_DIR / "archive")
    return ACCEPT_DIR / "archive"


@pytest.fixture(scope="session")
def desk_teacher(desk_config, desk_archive):
    pipeline.stage_teacher(desk_config, desk_archive, ACCEPT_DIR / "teacher")
    return ACCEPT_DIR / "teacher"


def _distill_and_extract(config, archive, teacher, tag):
    distill_dir = ACCEPT_DIR / f"distill_{tag}"
    extract_dir = ACCEPT_DIR / f"extract_{tag}"
    pipeline.stage_distill(config, archive, teacher, distill_dir)
    pipeline.stage_extract(config, archive, distill_dir, extract_dir)
    return distill_dir, extract_dir


@pytest.fixture(scope="session")
def desk_student(desk_config, desk_archive, desk_teacher):
    return _distill_and_extract(desk_config, desk_archive, desk_teacher, "thr0p50")


def _fewshot(config, archive, store, flip_store, tag):
    out = ACCEPT_DIR / f"fewshot_{tag}"
    pipeline.stage_fewshot(config, archive, store, flip_store, out)
    return json.loads((out / "summary.json").read_text())


@pytest.fixture(scope="session")
def fewshot_distilled(desk_config, desk_archive, desk_student):
    _, extract_dir = desk_student
    return _fewshot(
        desk_config,
        desk_archive,
        extract_dir / "features.vpdf",
        extract_dir / "features_flip.vpdf",
        "distilled",
    )


@pytest.fixture(scope="session")
def fewshot_teacher(desk_config, desk_archive, desk_teacher):
    return _fewshot(
        desk_config,
        desk_archive,
        desk_teacher / "teacher.vpdf",
        desk_teacher / "teacher_flip.vpdf",
        "teacher",
    )


def _sweep_point(desk_config, desk_archive, desk_teacher, threshold: str):
    config = RunConfig(dict(desk_config.values))
    config.set("policy.score_threshold", threshold)
    tag = f"thr{float(threshold):.2f}".replace(".", "p")
    _, extract_dir = _distill_and_extract(config, desk_archive, desk_teacher, tag)
    return _fewshot(
        config,
        desk_archive,
        extract_dir / "features.vpdf",
        extract_dir / "features_flip.vpdf",
        tag,
    )


def _mean_accuracy(summary: dict) -> float:
    return float(np.mean([entry["mean"] for entry in summary.values()]))


# ---------------------------------------------------------------------------
# 1. reference alignment equals exhaustive path enumeration


def test_criterion_1_dtw_oracle_equivalence(rng):
    start = time.perf_counter()
    pairs = 0
    worst = 0.0
    lengths = list(itertools.product(range(1, 7), range(1, 7)))
    while pairs < 2016:
        for n, m in lengths:
            a = rng.normal(size=(n, 2))
            b = rng.normal(size=(m, 2))
            got = dtw_cost(a, b)
            want = enumerate_paths_cost(a, b)
            if np.isinf(want) or np.isinf(got):
                assert np.isinf(want) and np.isinf(got), (n, m)
            else:
                worst = max(worst, abs(got - want))
                assert abs(got - want) <= 1e-9, (n, m, got, want)
            pairs += 1
    elapsed = time.perf_counter() - start
    report(
        1,
        worst <= 1e-9 and elapsed < 60.0,
        f"{pairs} pairs, max |dp - enumeration| = {worst:.2e}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. geometry invariances


def test_criterion_2_geometry_invariances(rng):
    from conftest import make_humanoid_3d, rot_y

    start = time.perf_counter()
    worst_norm = worst_canon = 0.0
    box_ok = True
    for _ in range(1000):
        joints = rng.normal(0, 40, size=(13, 2)) + rng.uniform(-200, 200, size=2)
        pose = RawPose2D(joints=joints, joint_scores=np.ones(13))
        base = normalize_2d(pose)
        scale = float(rng.uniform(0.1, 10.0))
        shift = rng.uniform(-500, 500, size=2)
        moved = normalize_2d(
            RawPose2D(joints=scale * joints + shift, joint_scores=np.ones(13))
        )
        worst_norm = max(worst_norm, float(np.abs(base.values - moved.values).max()))
        flipped_twice = flip_normalized_2d(flip_normalized_2d(base))
        assert np.array_equal(flipped_twice.values, base.values)
        box_ok &= bool(np.all(np.abs(base.values) <= 0.5 + 1e-12))
        box_ok &= abs(np.abs(base.values).max() - 0.5) < 1e-9

    figure = make_humanoid_3d()
    base3d = canonicalize_3d(figure)
    for _ in range(200):
        phi = float(rng.uniform(-np.pi, np.pi))
        rotated = canonicalize_3d(figure @ rot_y(phi).T)
        worst_canon = max(worst_canon, float(np.abs(rotated.features - base3d.features).max()))
    elapsed = time.perf_counter() - start
    ok = worst_norm <= 1e-9 and worst_canon <= 1e-6 and box_ok and elapsed < 10.0
    report(
        2,
        ok,
        f"normalize drift {worst_norm:.2e}, canonical drift {worst_canon:.2e}, "
        f"box ok = {box_ok}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. gradient checks on small probes


def _central_difference_check(loss_fn, params: list[torch.Tensor], eps=1e-6) -> float:
    """Max relative error between autograd and central differences."""
    loss = loss_fn()
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss.backward()
    worst = 0.0
    for p in params:
        grad = p.grad.detach().clone()
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            with torch.no_grad():
                flat[i] += eps
                up = loss_fn().item()
                flat[i] -= 2 * eps
                down = loss_fn().item()
                flat[i] += eps
            fd = (up - down) / (2 * eps)
            denominator = max(abs(fd), abs(grad.view(-1)[i].item()), 1e-8)
            worst = max(worst, abs(fd - grad.view(-1)[i].item()) / denominator)
    return worst


class _TinyEmbedder:
    """Duck-typed 4-parameter embedder probe for the vipe loss."""

    def __init__(self):
        torch.manual_seed(0)
        self.w = torch.randn(2, dtype=torch.float64, requires_grad=True)
        self.v = torch.randn(2, dtype=torch.float64, requires_grad=True)

    def __call__(self, x):
        return (x[:, :2].double() * self.w).sum(dim=1, keepdim=True)

    def decode(self, embedding, dataset):
        return embedding * self.v[0] + self.v[1]


def test_criterion_3_gradient_checks(rng):
    worst = 0.0

    # distillation loss through a 6-parameter linear student
    from vpd.distill import distill_loss

    weight = torch.randn(6, 1, dtype=torch.float64, requires_grad=True)
    x = torch.randn(4, 1, dtype=torch.float64)
    pose = torch.randn(4, 3, dtype=torch.float64)
    motion = torch.randn(4, 3, dtype=torch.float64)
    valid = torch.tensor([1.0, 0.0, 1.0, 1.0], dtype=torch.float64)
    worst = max(
        worst,
        _central_difference_check(lambda: distill_loss(x @ weight.T, pose, motion, valid),
                                  [weight]),
    )

    # vipe losses through a 4-parameter duck-typed embedder
    probe = _TinyEmbedder()
    config = EmbedderConfig(embed_dim=1, hidden_dims=(), margin=1.0)
    batch = VipeBatch(
        view_a=rng.normal(size=(3, 26)).astype(np.float32),
        view_b=rng.normal(size=(3, 26)).astype(np.float32),
        canonical=rng.normal(size=(3, 1)).astype(np.float32),
        negatives_a=rng.normal(size=(2, 26)).astype(np.float32),
        negatives_b=rng.normal(size=(2, 26)).astype(np.float32),
    )

    def vipe_total():
        recon, contrastive = vipe_losses(batch, probe, config)
        return recon + contrastive

    worst = max(worst, _central_difference_check(vipe_total, [probe.w, probe.v]))

    # recurrent head: 6-parameter bias-free GRU driven to a scalar loss
    torch.manual_seed(1)
    gru = torch.nn.GRU(1, 1, bias=False).double()
    seq = torch.randn(5, 1, 1, dtype=torch.float64)
    target = torch.randn(5, 1, 1, dtype=torch.float64)

    def gru_loss():
        out, _ = gru(seq)
        return ((out - target) ** 2).mean()

    worst = max(worst, _central_difference_check(gru_loss, list(gru.parameters())))

    report(3, worst < 1e-4, f"max relative gradient error {worst:.2e} over 3 probes")


# ---------------------------------------------------------------------------
# 8. detection evaluator (cheap; runs before the heavy criteria)


def test_criterion_8_detection_evaluator(rng):
    gt = [GroundTruthInterval(0, 9, "v"), GroundTruthInterval(50, 59, "v")]
    props = [
        Proposal(1, 14, 0.9, "v"),   # IoU(A) = 9/15 = 0.6
        Proposal(0, 9, 0.8, "v"),    # duplicate of A
        Proposal(100, 109, 0.7, "v"),  # false positive
    ]
    ap = evaluate_ap(props, gt, tiou_thresholds=(0.3, 0.4, 0.5, 0.6, 0.7))
    hand_ok = all(ap[t] == pytest.approx(0.5) for t in (0.3, 0.4, 0.5, 0.6)) and ap[
        0.7
    ] == pytest.approx(0.25)

    monotone_ok = True
    for trial in range(20):
        gt_rand = [GroundTruthInterval(int(s), int(s) + 19, "v") for s in range(0, 300, 60)]
        props_rand = [
            Proposal(
                max(0, int(s + rng.integers(-10, 11))),
                max(0, int(s + rng.integers(-10, 11))) + 19,
                float(rng.uniform(0.1, 1.0)),
                "v",
            )
            for s in range(0, 300, 30)
        ]
        values = evaluate_ap(props_rand, gt_rand, tiou_thresholds=(0.1, 0.3, 0.5, 0.7, 0.9))
        ordered = [values[t] for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
        monotone_ok &= all(a >= b - 1e-12 for a, b in zip(ordered, ordered[1:]))

    config = DetectorConfig()
    trace = np.zeros(200)
    trace[10:12] = 0.9  # below min length: dropped
    trace[50:60] = 0.8  # length 10 < 0.67 * 40: resized to 40
    trace[100:140] = 0.6  # length 40: kept as-is
    proposals = propose(trace, config, mean_action_length=40.0)
    rules_ok = (
        len(proposals) == 2
        and proposals[0].length == 40
        and (proposals[0].start, proposals[0].end) == (35, 74)
        and (proposals[1].start, proposals[1].end) == (100, 139)
        and proposals[0].score == pytest.approx(0.8)
    )
    threshold_ok = propose(np.full(20, 0.2), config, 10.0) == []  # 0.2 is not above 0.2

    ok = hand_ok and monotone_ok and rules_ok and threshold_ok
    report(
        8,
        ok,
        f"hand AP case = {hand_ok}, monotone = {monotone_ok}, proposal rules = {rules_ok}",
    )


# ---------------------------------------------------------------------------
# 7. view-invariance margin after desk training


def test_criterion_7_view_invariance_margin():
    cameras = [
        CameraSpec(azimuth=a, elevation=e, distance=4.6)
        for a, e in ((0.0, 0.15), (1.5, 0.3), (3.1, 0.2), (4.6, 0.25))
    ]
    clean = NoiseModel(joint_noise_sigma=0.0, corruption_rate=0.0)

    def build(num_clips, length, seed):
        views, canonical, joints, seq_ids = [], [], [], []
        for c in range(num_clips):
            clip = generate_clip(c % 6, length, cameras[0], clean, seed=seed + c)
            for t in range(0, length, 2):
                pose3d = clip.gt_pose3d[t]
                views.append(
                    np.stack(
                        [normalize_2d(project_pose(pose3d, cam)).values for cam in cameras]
                    )
                )
                canonical.append(canonicalize_3d(pose3d).features)
                joints.append(pose3d)
                seq_ids.append(c)
        return MultiViewPoseCorpus(
            views=np.asarray(views, dtype=np.float32),
            canonical=np.asarray(canonical, dtype=np.float32),
            joints3d=np.asarray(joints),
            sequence_ids=np.asarray(seq_ids),
        )

    train = build(58, 70, seed=100)  # ~2000 poses x 4 cameras
    assert train.num_poses >= 2000
    model, _ = train_embedder(train, EmbedderConfig())

    holdout = build(10, 70, seed=9000)
    margin_rng = np.random.default_rng(0)
    wins = total = 0
    for i in range(holdout.num_poses):
        embeddings = embed_batch(holdout.views[i].astype(np.float32), model)
        positive = max(
            float(np.linalg.norm(embeddings[a] - embeddings[b]))
            for a in range(4)
            for b in range(a + 1, 4)
        )
        negatives = []
        for _ in range(10):
            j = int(margin_rng.integers(0, holdout.num_poses))
            if j == i or not pose_differs(holdout.joints3d[i], holdout.joints3d[j]):
                continue
            cam = int(margin_rng.integers(0, 4))
            other = embed_batch(holdout.views[j][cam : cam + 1].astype(np.float32), model)
            negatives.append(float(np.linalg.norm(embeddings[0] - other[0])))
        if negatives:
            wins += int(positive < min(negatives))
            total += 1
    fraction = wins / total
    report(7, fraction >= 0.9, f"margin holds for {wins}/{total} = {fraction:.1%} of held-out poses")


# ---------------------------------------------------------------------------
# 4. distillation fills the gaps left by the noisy teacher


def test_criterion_4_distillation_fills_gaps(desk_config, desk_archive, desk_teacher, desk_student):
    distill_dir, extract_dir = desk_student
    log = json.loads((distill_dir / "training_log.json").read_text())
    eval_dir = ACCEPT_DIR / "eval_thr0p50"
    pipeline.stage_eval(desk_config, desk_archive, desk_teacher, extract_dir, eval_dir)
    metrics = json.loads((eval_dir / "metrics.json").read_text())

    reduction = metrics["relative_reduction"]
    strictly_lower = metrics["student_mse_corrupted"] < metrics["teacher_mse_corrupted"]
    in_budget = log["train_seconds"] <= 1800.0
    ok = strictly_lower and reduction >= 0.20 and in_budget
    report(
        4,
        ok,
        f"corrupted-frame MSE: student {metrics['student_mse_corrupted']:.4f} vs "
        f"teacher {metrics['teacher_mse_corrupted']:.4f} "
        f"({reduction:.1%} reduction, >= 20% required); "
        f"training {log['train_seconds']:.0f}s <= 1800s",
    )


# ---------------------------------------------------------------------------
# 5. few-shot ordering: distilled >= noisy teacher features


def _per_subset_records(tag: str, k: int) -> dict:
    """seed -> accuracy for one k, read from a fewshot stage's records."""
    records = {}
    for line in (ACCEPT_DIR / f"fewshot_{tag}" / "fewshot.jsonl").read_text().splitlines():
        record = json.loads(line)
        if record["k"] == k:
            records[record["seed"]] = record["accuracy"]
    return records


def test_criterion_5_fewshot_ordering(fewshot_distilled, fewshot_teacher):
    details = []
    ok = True
    for k in (8, 16):
        distilled = _per_subset_records("distilled", k)
        teacher = _per_subset_records("teacher", k)
        assert set(distilled) == set(teacher), "subset seeds must pair up"
        wins = sum(1 for seed in distilled if distilled[seed] >= teacher[seed])
        details.append(
            f"k={k}: distilled mean {np.mean(list(distilled.values())):.3f} vs "
            f"teacher {np.mean(list(teacher.values())):.3f}, wins {wins}/{len(distilled)}"
        )
        ok &= wins >= 4
    report(5, ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 6. motion head: validation pose loss no worse than the no-motion ablation


def test_criterion_6_motion_head_value(desk_config, desk_archive, desk_teacher, desk_student):
    distill_dir, _ = desk_student
    with_motion = json.loads((distill_dir / "training_log.json").read_text())

    ablated = RunConfig(dict(desk_config.values))
    ablated.set("student.use_motion", "false")
    nomotion_dir = ACCEPT_DIR / "distill_nomotion"
    pipeline.stage_distill(ablated, desk_archive, desk_teacher, nomotion_dir)
    without_motion = json.loads((nomotion_dir / "training_log.json").read_text())

    a = with_motion["best_val_pose_loss"]
    b = without_motion["best_val_pose_loss"]
    report(6, a <= b, f"val pose loss with motion {a:.5f} <= without {b:.5f}")


# ---------------------------------------------------------------------------
# 9. selection-threshold sweep has an interior maximum


def test_criterion_9_threshold_sweep(desk_config, desk_archive, desk_teacher, fewshot_distilled):
    acc_mid = _mean_accuracy(fewshot_distilled)
    acc_low = _mean_accuracy(_sweep_point(desk_config, desk_archive, desk_teacher, "0.0"))
    acc_high = _mean_accuracy(_sweep_point(desk_config, desk_archive, desk_teacher, "0.9"))
    ok = acc_mid >= acc_low and acc_mid >= acc_high
    report(
        9,
        ok,
        f"accuracy at threshold 0.5 = {acc_mid:.3f} vs 0.0 = {acc_low:.3f} "
        f"and 0.9 = {acc_high:.3f} (interior maximum required)",
    )


# ---------------------------------------------------------------------------
# 10. end-to-end determinism


def test_criterion_10_end_to_end_determinism(tmp_path):
    from test_pipeline import mini_config

    def run(root: Path) -> dict:
        config = mini_config()
        pipeline.stage_synth(config, root / "archive")
        pipeline.stage_teacher(config, root / "archive", root / "teacher")
        pipeline.stage_distill(config, root / "archive", root / "teacher", root / "distill")
        pipeline.stage_extract(config, root / "archive", root / "distill", root / "extract")
        pipeline.stage_fewshot(
            config,
            root / "archive",
            root / "extract" / "features.vpdf",
            root / "extract" / "features_flip.vpdf",
            root / "fewshot",
        )
        return {
            "teacher store": (root / "teacher" / "teacher.vpdf").read_bytes(),
            "teacher flip store": (root / "teacher" / "teacher_flip.vpdf").read_bytes(),
            "feature store": (root / "extract" / "features.vpdf").read_bytes(),
            "flip feature store": (root / "extract" / "features_flip.vpdf").read_bytes(),
            "fewshot records": (root / "fewshot" / "fewshot.jsonl").read_bytes(),
            "fewshot summary": (root / "fewshot" / "summary.json").read_bytes(),
        }

    first = run(tmp_path / "run_a")
    second = run(tmp_path / "run_b")
    mismatched = [name for name in first if first[name] != second[name]]
    report(
        10,
        not mismatched,
        "bit-identical stores and metric records"
        if not mismatched
        else f"mismatch in: {mismatched}",
    )
