"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The pretrained 64x64 network used by criteria 4 to 7 is built once per
session and cached under pytest's cache directory (``pytest --cache-clear``
forces a rebuild).
"""

import json
import math
import time

import numpy as np
import pytest

from depth_tta import tensor as T
from depth_tta.adaptation import (
    Hyperparams,
    SelectionSpec,
    compute_losses,
    depth_refining_loss,
    edge_guided_loss,
    resolve_selection,
    run_stream,
)
from depth_tta.cli import main
from depth_tta.metrics import METRIC_NAMES, compute_metrics
from depth_tta.net import DepthNet, DepthNetConfig, pretrain_on_source
from depth_tta.scene import LABEL_IDS, DomainShift, SceneConfig, generate_frame, generate_stream, scene_objects
from depth_tta.segmentation import DYNAMIC_LABELS, extract_instance_masks
from depth_tta.signal import MedianConfig, edge_map, gray_mean, mask_depth, median_filter, project
from depth_tta.tensor import Tensor

from data.make_golden import CONFIG
from oracles import (
    batch_norm_eval_scalar,
    batch_norm_train_scalar,
    central_difference,
    conv2d_direct,
    edge_map_loops,
    median_loops,
    metrics_loops,
    rel_error,
)

SIZE = 64
PRETRAIN_STEPS = 2000
SOURCE_SEED = 100
STREAM_SEED = 1
N_FRAMES = 500
SHIFT = "fog:0.04"
LR = 1e-5
LAMBDA_GRID = [0.0, 0.1, 0.2, 0.5, 1.0, math.inf]


@pytest.fixture
def verdict(capsys):
    """``verdict(n, ok, detail)`` prints the criterion line, then asserts."""

    def emit(n, ok, detail=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE criterion {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        assert ok, f"criterion {n}: {detail}"

    return emit


# ------------------------------------------------------------- shared runs


@pytest.fixture(scope="session")
def checkpoint(request):
    cache = request.config.cache.mkdir("depth-tta-acceptance")
    path = cache / f"net{SIZE}_{PRETRAIN_STEPS}_{SOURCE_SEED}.ckpt"
    if not path.exists():
        net = DepthNet.build(DepthNetConfig(input_size=(SIZE, SIZE, 3)), seed=0)
        source = generate_stream(SceneConfig(resolution=(SIZE, SIZE), seed=SOURCE_SEED), PRETRAIN_STEPS)
        pretrain_on_source(net, source, PRETRAIN_STEPS, lr=1e-3, checkpoint=path)
    return path


@pytest.fixture(scope="session")
def stream():
    scene = SceneConfig(resolution=(SIZE, SIZE), seed=STREAM_SEED)
    return list(generate_stream(scene, N_FRAMES, DomainShift.parse(SHIFT)))


@pytest.fixture(scope="session")
def runs(checkpoint, stream):
    """``{key: (net after the run, StreamResult, seconds)}`` for the baseline and the lambda grid."""
    out = {}
    for key, hyper in [("baseline", Hyperparams(lr=0.0))] + [
        (lam, Hyperparams(lambda_=lam, lr=LR)) for lam in LAMBDA_GRID
    ]:
        net = DepthNet.load(checkpoint)
        start = time.perf_counter()
        result = run_stream(net, stream, hyper)
        out[key] = (net, result, time.perf_counter() - start)
    return out


# ------------------------------------------------------------- criterion 1


def test_criterion_1_gradient_matches_finite_differences(verdict):
    net = DepthNet.build(CONFIG, seed=0).astype(np.float64)
    resolve_selection(SelectionSpec(), net.store)
    frame = next(generate_stream(SceneConfig(resolution=(32, 32), n_dynamic=(2, 4), seed=3), 1,
                                 DomainShift("fog", 0.03)))
    hyper = Hyperparams(lambda_=0.2, min_instance_area=4)
    start = time.perf_counter()
    with T.precision(np.float64):
        terms = compute_losses(net, frame, hyper)
        assert terms.n > 0
        pseudo = terms.pseudo
        terms.loss.backward()

        def value():
            return float(compute_losses(net, frame, hyper, pseudo=pseudo).loss.data)

        rng = np.random.default_rng(0)
        names = net.store.adaptable_names()
        errors, fine = [], []
        for _ in range(12):
            name = names[int(rng.integers(len(names)))]
            arr = net.store.array(name)
            idx = tuple(int(rng.integers(s)) for s in arr.shape)
            analytic = float(net.store.tensor(name).grad[idx])
            errors.append(rel_error(analytic, central_difference(value, arr, idx, 1e-3)))
            fine.append(rel_error(analytic, central_difference(value, arr, idx, 1e-6)))
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-3 and elapsed < 60
    verdict(1, ok, f"max rel err h=1e-3 {max(errors):.2e} ({sum(e >= 1e-3 for e in errors)}/12 over), "
                   f"h=1e-6 {max(fine):.2e}, {elapsed:.1f}s")


# ------------------------------------------------------------- criterion 2


def test_criterion_2_kernel_oracles(verdict):
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = {}

    def check(kernel, got, want, exact=False):
        got, want = np.asarray(got, np.float64), np.asarray(want, np.float64)
        err = 0.0 if np.array_equal(got, want) else (
            np.inf if exact else float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-12))))
        if not np.isfinite(err):
            err = np.inf
        worst[kernel] = max(worst.get(kernel, 0.0), err)

    with T.precision(np.float64):
        for _ in range(200):
            h, w = (int(v) for v in rng.integers(3, 8, size=2))
            cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
            k = int(rng.choice([1, 3]))
            stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
            x = rng.normal(size=(h, w, cin))
            kern = rng.normal(size=(k, k, cin, cout))
            bias = rng.normal(size=cout)
            got = T.conv2d(Tensor(x), Tensor(kern), stride, pad, Tensor(bias)).data
            check("conv2d", got, conv2d_direct(x, kern, stride, pad, bias))

            gamma, beta = rng.normal(size=cin), rng.normal(size=cin)
            mean, var = rng.normal(size=cin), rng.uniform(0.1, 2.0, size=cin)
            got = T.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), mean.copy(), var.copy(), mode="eval").data
            check("batch_norm", got, batch_norm_eval_scalar(x, gamma, beta, mean, var, 1e-5))
            got = T.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), mean.copy(), var.copy(), mode="train").data
            check("batch_norm", got, batch_norm_train_scalar(x, gamma, beta, 1e-5))

            f = rng.normal(size=(h, w))
            wts = rng.uniform(0, 2, size=(h, w))
            check("edge_map", edge_map(f, wts).values.data, edge_map_loops(f, wts))

            s = int(rng.choice([1, 3, 5, 7]))
            d = np.where(rng.random((h, w)) < 0.4, 0.0, rng.uniform(1, 50, (h, w)))
            check("median_filter", median_filter(d, MedianConfig(s)), median_loops(d, s), exact=True)

            pred = rng.uniform(0.01, 120, (h, w))
            gt = np.where(rng.random((h, w)) < 0.2, 0.0, rng.uniform(0.01, 120, (h, w)))
            gt.flat[0] = 5.0
            rec = compute_metrics(pred, gt)
            want = metrics_loops(pred, gt)
            check("compute_metrics", [getattr(rec, m) for m in METRIC_NAMES], [want[m] for m in METRIC_NAMES])
    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-6 for v in worst.values()) and elapsed < 60
    verdict(2, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" {elapsed:.1f}s")


# ------------------------------------------------------------- criterion 3


def test_criterion_3_identity_projection(verdict):
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        f = rng.uniform(10, 1000, size=2)
        K = np.array([[f[0], 0, rng.uniform(0, 640)], [0, f[1], rng.uniform(0, 480)], [0, 0, 1]])
        x, y = rng.uniform(0, 640), rng.uniform(0, 480)
        z = rng.uniform(1e-3, 1e3)
        (xp, yp), zp = project((x, y), z, K, np.eye(3), np.zeros(3))
        bad += not (xp == x and yp == y and zp == z)
    verdict(3, bad == 0, f"{bad}/1000 draws not exact")


# ------------------------------------------------------------- criterion 4


def test_criterion_4_adaptation_beats_baseline(runs, verdict):
    base = runs["baseline"][1].cumulative().abs_rel
    adapted = runs[0.2][1].cumulative().abs_rel
    seconds = runs[0.2][2]
    ok = adapted <= 0.9 * base and seconds < 600
    verdict(4, ok, f"AbsRel adapted {adapted:.4f} vs baseline {base:.4f} "
                   f"(ratio {adapted / base:.3f}), run {seconds:.0f}s")


# ------------------------------------------------------------- criterion 5


def test_criterion_5_lambda_ablation_shape(runs, verdict):
    scores = {lam: runs[lam][1].cumulative().abs_rel for lam in LAMBDA_GRID}
    ends = min(scores[0.0], scores[math.inf])
    interior = min(scores[lam] for lam in LAMBDA_GRID[1:-1])
    total = sum(runs[lam][2] for lam in LAMBDA_GRID)
    ok = interior < ends and total < 1800
    verdict(5, ok, " ".join(f"{lam:g}:{v:.4f}" for lam, v in scores.items()) + f" ({total:.0f}s)")


# ------------------------------------------------------------- criterion 6


def test_criterion_6_frozen_parameters(runs, checkpoint, verdict):
    original = DepthNet.load(checkpoint)
    net = runs[0.2][0]
    theta = set(resolve_selection(SelectionSpec(), original.store))
    changed = [n for n in original.store if n not in theta
               and not np.array_equal(original.store.array(n), net.store.array(n))]
    moved = sum(not np.array_equal(original.store.array(n), net.store.array(n)) for n in theta)
    verdict(6, not changed and moved > 0,
            f"{len(changed)} non-theta entries changed, {moved}/{len(theta)} theta entries moved")


# ------------------------------------------------------------- criterion 7


def test_criterion_7_deterministic_reports(checkpoint, tmp_path, verdict):
    # identical configs, including the output directory that the header records
    out = tmp_path / "run"
    bodies = []
    for _ in range(2):
        assert main(["adapt", "--checkpoint", str(checkpoint), "--frames", "100", "--seed", str(STREAM_SEED),
                     "--domain-shift", SHIFT, "--lambda", "0.2", "--lr", str(LR), "--out", str(out)]) == 0
        lines = (out / "steps.jsonl").read_bytes().split(b"\n")
        header = json.loads(lines[0])
        header.pop("timing")
        bodies.append((json.dumps(header, sort_keys=True).encode(), b"\n".join(lines[1:])))
    n_lines = bodies[0][1].count(b"\n")
    verdict(7, bodies[0] == bodies[1], f"{n_lines} step lines compared")


# ------------------------------------------------------------- criterion 8


def test_criterion_8_instance_masks(verdict):
    dynamic = {LABEL_IDS[n] for n in DYNAMIC_LABELS}
    problems = 0
    for t in range(100):
        cfg = SceneConfig(resolution=(SIZE, SIZE), seed=800 + t // 25)
        frame = generate_frame(cfg, t)
        # visible region of every object by exhaustive nearest-object search
        best = np.full(cfg.resolution, np.inf)
        owner = np.zeros(cfg.resolution, int)
        objects = scene_objects(cfg, t)
        for obj in objects:
            fp = obj.footprint(cfg)
            closer = fp & ((obj.depth < best) | ((obj.depth == best) & (obj.instance_id > owner)))
            best[closer] = obj.depth
            owner[closer] = obj.instance_id
        expected = {o.instance_id: owner == o.instance_id for o in objects
                    if LABEL_IDS[o.label] in dynamic and (owner == o.instance_id).any()}
        masks = extract_instance_masks(frame.panoptic, min_area=1)
        got = {i: m.astype(bool) for i, m in zip(masks.instance_ids, masks.masks)}
        problems += set(got) != set(expected)
        problems += any(not np.array_equal(got[i], expected[i]) for i in set(got) & set(expected))
        stack = np.sum([m for m in masks.masks], axis=0) if masks.n else np.zeros(cfg.resolution)
        problems += bool((stack > 1).any())
        union = stack > 0
        problems += not set(np.unique(frame.panoptic.label[union])) <= dynamic
    verdict(8, problems == 0, f"{problems} mismatches over 100 frames")


# ------------------------------------------------------------- criterion 9


def test_criterion_9_loss_identities(runs, verdict):
    bad = 0
    for lam in LAMBDA_GRID:
        for step in runs[lam][1].steps:
            want = step.loss_edge if math.isinf(lam) else step.loss_depth + lam * step.loss_edge
            bad += not math.isclose(step.loss_total, want, rel_tol=1e-6, abs_tol=1e-12)
    n_reports = sum(len(runs[lam][1].steps) for lam in LAMBDA_GRID)

    # pseudo-labels equal to the masked depth give a zero depth loss
    frame = generate_frame(SceneConfig(resolution=(SIZE, SIZE), seed=9), 3)
    masks = extract_instance_masks(frame.panoptic)
    depth = Tensor(frame.gt_depth.astype(np.float64))
    masked = mask_depth(depth, masks)
    ld = float(depth_refining_loss(masked, [m.data.copy() for m in masked]).data)
    # a depth field with the image's own edge map gives a zero edge loss
    gray = gray_mean(frame.image)
    le = float(edge_guided_loss(edge_map(gray), edge_map(Tensor(np.asarray(gray, np.float64)))).data)
    ok = bad == 0 and ld == 0.0 and le == 0.0 and masks.n > 0
    verdict(9, ok, f"{bad}/{n_reports} reports off; L_d={ld} with N={masks.n}; L_e={le}")
