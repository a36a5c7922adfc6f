"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture.

Tolerances and runtime budgets are pinned; run with ``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest
import torch

from oracles import (
    box_reference, caa_reference, cal_reference, central_diff, mcl_reference_mp, miou_reference,
    mp_gradient, qsp_reference, rel_err, seed_reference,
)
from promptseed import sams
from promptseed.backend import ToyEncoder, compute_logit, oracle_cams
from promptseed.cam import box_mask, caa_refine, gradcam_stack, gradcam_weights, softmax_scores
from promptseed.evalio import codecs, metrics, synth
from promptseed.losses import cal_loss, mcl_loss
from promptseed.pipeline import Framework, TrainConfig
from promptseed.sams import PART, SUBPART, WHOLE, MaskEntry, SeedMap


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def test_criterion_1_loss_gradients(report):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    mcl_worst = cal_worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        present = sorted(rng.choice(n, size=rng.integers(1, n), replace=False).tolist())
        y0 = rng.normal(scale=3, size=n)
        y = torch.tensor(y0, requires_grad=True)
        (g,) = torch.autograd.grad(mcl_loss(y, present), y)
        mcl_worst = max(mcl_worst, rel_err(g.numpy(), mp_gradient(lambda v: mcl_reference_mp(v, present), y0)))

        present = sorted(rng.choice(3, size=rng.integers(1, 4), replace=False).tolist())
        labels = rng.choice([0] + [c + 1 for c in present], size=(4, 5))
        maps0 = rng.random((len(present), 4, 5)) + 0.01
        m = torch.tensor(maps0, requires_grad=True)
        (g,) = torch.autograd.grad(cal_loss(SeedMap(labels), m, present)[2], m)
        # detached-max contract: the oracle holds each class peak fixed
        peaks = [maps0[k][labels == c + 1].max() if (labels == c + 1).any() else None
                 for k, c in enumerate(present)]
        fd = central_diff(lambda v: cal_reference(labels, v, present, peaks)[2], maps0, eps=1e-7)
        cal_worst = max(cal_worst, rel_err(g.numpy(), fd))
    # the peak pixel itself receives no gradient from the foreground term
    m = torch.tensor([[[0.2, 0.9, 0.0]]], dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(cal_loss(SeedMap(np.array([[1, 1, 0]])), m, [0])[0], m)
    detached = g.tolist() == [[[-1.0, 0.0, 0.0]]]
    elapsed = time.perf_counter() - start
    ok = mcl_worst < 1e-6 and cal_worst < 1e-6 and detached and elapsed < 30
    report(1, ok, f"MCL rel err {mcl_worst:.2e}, CAL rel err {cal_worst:.2e} (< 1e-6), "
                  f"detached max {detached}, {elapsed:.1f}s (< 30s)")


def test_criterion_2_softmax_gradcam(report):
    start = time.perf_counter()
    encoder = ToyEncoder(seed=0)
    rng = np.random.default_rng(12)
    sum_err = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 9))
        y = torch.as_tensor(rng.normal(scale=20, size=n))
        k = int(rng.integers(1, n + 1))
        present, background = list(range(k)), list(range(k, n))
        total = softmax_scores(y, present, background).scores.sum()
        rest = softmax_scores(y, background, present).scores.sum() if background else 0.0
        sum_err = max(sum_err, abs(float(total + rest) - 1))
    worst, min_map = 0.0, 0.0
    for inst in range(50):
        out = encoder.encode_image(np.random.default_rng(inst).random((64, 64, 3)), "first_order")
        g = torch.Generator().manual_seed(inst)
        t = torch.nn.functional.normalize(torch.randn(4, 32, generator=g, dtype=torch.float64), dim=1)
        logits = compute_logit(out.image_embedding[None], t, 0.01)
        scores = softmax_scores(logits, [0, 1], [2, 3])
        min_map = min(min_map, float(gradcam_stack(scores, out).maps.min()))
        c = inst % 2
        s = softmax_scores(logits, [0, 1], [2, 3]).scores[c]
        w = gradcam_weights(s, out).numpy()
        fmap = out.feature_map.detach()
        _, h, wd = fmap.shape
        ch = inst % fmap.shape[0]
        near_one = float(s.detach()) > 0.5

        def score_at(shift):
            f = fmap.clone()
            f[ch] += shift
            y = compute_logit(encoder.last_block(f)[1][None], t, 0.01).numpy()
            rest = np.exp(np.delete(y, c) - y[c]).sum()
            return -rest / (1 + rest) if near_one else 1 / (1 + rest)

        fd = (score_at(1e-6) - score_at(-1e-6)) / 2e-6 / (h * wd)
        worst = max(worst, rel_err(w[ch], fd))
    elapsed = time.perf_counter() - start
    ok = sum_err < 1e-6 and min_map >= 0 and worst < 1e-3 and elapsed < 60
    report(2, ok, f"score sum err {sum_err:.1e} (< 1e-6), min map {min_map}, "
                  f"weight rel err {worst:.2e} (< 1e-3), {elapsed:.1f}s (< 60s)")


def test_criterion_3_caa_oracle(report):
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(50):
        cam = rng.random((4, 4))
        attn = rng.random((16, 16))
        attn /= attn.sum(1, keepdims=True)
        for t in (0, 1, 2, 3):
            got = caa_refine(torch.as_tensor(cam), torch.as_tensor(attn), t, 0.4).numpy()
            worst = max(worst, np.abs(got - caa_reference(cam, attn, t, box_reference(cam, 0.4))).max())
    cam = torch.as_tensor(rng.random((4, 4)))
    full = torch.ones(4, 4, dtype=torch.bool)
    eye = torch.eye(16, dtype=torch.float64)
    identity = all(torch.allclose(caa_refine(cam, eye, t, box=full), cam, atol=0) for t in (0, 1, 2))
    t0 = torch.equal(caa_refine(cam, torch.as_tensor(attn), 0), cam * box_mask(cam, 0.4))
    lin = 0.0
    for _ in range(50):
        m1, m2 = torch.as_tensor(rng.random((4, 4))), torch.as_tensor(rng.random((4, 4)))
        a, b = rng.normal(size=2)
        box = torch.as_tensor(rng.random((4, 4)) > 0.3)
        A = torch.as_tensor(attn)
        lhs = caa_refine(a * m1 + b * m2, A, 2, box=box)
        rhs = a * caa_refine(m1, A, 2, box=box) + b * caa_refine(m2, A, 2, box=box)
        lin = max(lin, float((lhs - rhs).abs().max()))
    ok = worst < 1e-10 and identity and t0 and lin < 1e-10
    report(3, ok, f"max abs err vs dense oracle {worst:.1e} (< 1e-10), t=0 {t0}, "
                  f"identity {identity}, linearity err {lin:.1e}")


def _random_masks(rng, h, w, n):
    out = []
    for _ in range(n):
        m = np.zeros((h, w), dtype=bool)
        t, l = rng.integers(0, h), rng.integers(0, w)
        m[t:t + rng.integers(1, h + 1), l:l + rng.integers(1, w + 1)] = True
        if rng.random() < 0.3 and out:
            m = out[int(rng.integers(len(out)))].mask ^ (rng.random((h, w)) < 0.05)
        if not m.any():
            m[t, l] = True
        out.append(MaskEntry(m, int(rng.choice([WHOLE, PART, SUBPART])),
                             float(rng.choice([rng.uniform(0.6, 1.0), 0.70, 0.88]))))
    return out


def test_criterion_4_sams_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(14)
    mismatches = invariant_failures = 0
    for _ in range(200):
        h, w = int(rng.integers(4, 33)), int(rng.integers(4, 33))
        masks = _random_masks(rng, h, w, int(rng.integers(1, 11)))
        present = sorted(rng.choice(4, size=rng.integers(0, 5), replace=False).tolist())
        cams = rng.random((len(present), h, w))
        qsp = sams.generate_quasi_superpixels(masks)
        trip = [(m.mask, m.level, m.confidence) for m in masks]
        admitted = qsp_reference(trip)
        got = sams.seed_from_cams(qsp, cams, present).labels
        same = [id(e) for e in qsp.entries] == [id(masks[i]) for i in admitted]
        mismatches += not (same and np.array_equal(got, seed_reference(trip, admitted, cams, present)))
        union = np.zeros((h, w), dtype=bool)
        for e in qsp.entries:
            invariant_failures += (e.mask & union).sum() / e.area >= sams.DEFAULT_T_R
            union |= e.mask
        gated = [m for m in masks if m.confidence >= (0.70 if m.level == WHOLE else 0.88)]
        kept = [gated[i] for i in sams.whole_priority_nms(gated)]
        for m in gated:
            # a whole mask is suppressed only by an overlapping kept whole mask
            if m.level == WHOLE and all(m is not k for k in kept):
                invariant_failures += not any(
                    k.level == WHOLE and (k.mask & m.mask).sum() / (k.mask | m.mask).sum() >= 0.7 for k in kept)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and invariant_failures == 0 and elapsed < 60
    report(4, ok, f"{mismatches}/200 oracle mismatches, {invariant_failures} invariant failures, "
                  f"{elapsed:.1f}s (< 60s)")


def test_criterion_5_seeding_gain(report):
    start = time.perf_counter()
    scenes = synth.make_scenes(5, 20)
    results = {}
    for sigma in (0.0, 0.25):
        ours, base = [], []
        for i, s in enumerate(scenes):
            masks = np.stack([s.gt.labels == c + 1 for c in s.present])
            cams = oracle_cams(masks, s.present, sigma, i).numpy()
            ours.append(sams.seed_from_cams(sams.generate_quasi_superpixels(s.masks), cams, s.present))
            base.append(sams.threshold_seed_map(cams, s.present))
        gts = [s.gt for s in scenes]
        exact = all(np.array_equal(p.labels, g.labels) for p, g in zip(ours, gts))
        results[sigma] = (metrics.miou(ours, gts, 4).mean_iou, metrics.miou(base, gts, 4).mean_iou, exact)
    elapsed = time.perf_counter() - start
    ours, base, _ = results[0.25]
    ok = ours - base >= 0.05 and results[0.0][2] and elapsed < 60
    report(5, ok, f"sigma 0.25 mIoU {100 * ours:.1f} vs baseline {100 * base:.1f} (gain >= 5.0), "
                  f"sigma 0 exact {results[0.0][2]}, {elapsed:.1f}s (< 60s)")


@pytest.fixture(scope="module")
def toy_task():
    """3 classes, 24 training images, 30 steps (15 epochs of batch 16)."""
    registry = synth.default_registry(3)
    probe = Framework(registry, TrainConfig())
    train = [probe.prepare_scene(s, f"train{i}") for i, s in enumerate(synth.make_scenes(1, 24))]
    held = [(f"held{i}", s) for i, s in enumerate(synth.make_scenes(2, 20))]
    return registry, train, held


def _cross_stream_zero(fw, sample, state):
    for p in (state.cls_ctx.vectors, state.seg_ctx.vectors):
        p.requires_grad_(True)
    br, _ = fw.sample_losses(sample, state)
    params = [state.cls_ctx.vectors, state.seg_ctx.vectors]
    g_mcl = torch.autograd.grad(br.mcl, params, retain_graph=True, allow_unused=True)
    g_cal = torch.autograd.grad(br.cal, params, allow_unused=True)
    return ((g_mcl[1] is None or torch.count_nonzero(g_mcl[1]) == 0)
            and (g_cal[0] is None or torch.count_nonzero(g_cal[0]) == 0))


def test_criterion_6_coarse_to_fine(report, toy_task):
    start = time.perf_counter()
    registry, train, held = toy_task
    fw = Framework(registry, TrainConfig(epochs=15))
    snapshot = fw.encoder.weight_snapshot()
    state = fw.init_state()
    before = fw.evaluate_loss(train, state)
    state = fw.train(train, state)
    after = fw.evaluate_loss(train, state)
    frozen = fw.encoder.weight_snapshot() == snapshot
    samples = [fw.prepare_scene(s, k) for k, s in held]
    gts = [s.gt for _, s in held]
    coarse = metrics.miou([fw.seeds(s, state, "coarse") for s in samples], gts, 4).mean_iou
    fine = metrics.miou([fw.seeds(s, state, "fine") for s in samples], gts, 4).mean_iou
    zero = all(_cross_stream_zero(fw, s, state) for s in train[:4])
    elapsed = time.perf_counter() - start
    ok = state.step == 30 and after <= 0.5 * before and fine >= coarse and frozen and zero and elapsed < 300
    report(6, ok, f"{state.step} steps, loss {before:.3f} -> {after:.3f} (ratio {after / before:.3f} <= 0.5), "
                  f"held-out mIoU coarse {100 * coarse:.1f} fine {100 * fine:.1f}, encoder frozen {frozen}, "
                  f"cross-stream grads zero {zero}, {elapsed:.1f}s (< 300s)")


def test_criterion_7_baseline_loss_pathology(report, toy_task):
    registry, train, _ = toy_task
    fw = Framework(registry, TrainConfig(epochs=15, seg_loss="sigmoid_ce"))
    state = fw.init_state()
    peaks = np.array([float(fw.fine_stream(s, state, with_seed=False).cams.maps.max()) for s in train])

    def seg_term(st):
        return float(np.mean([float(fw.sample_losses(s, st)[0].cal.detach()) for s in train]))

    before = seg_term(state)
    state = fw.train(train, state)
    after = seg_term(state)
    reduction = 1 - after / before
    # raw maps are tiny on typical images; a few images peak higher (see notes)
    typical = float(np.median(peaks)) <= 1e-3
    ok = state.step == 30 and reduction < 0.05 and typical
    report(7, ok, f"sigmoid CE on raw maps {before:.5f} -> {after:.5f} (reduction {100 * reduction:.3f}% < 5%), "
                  f"raw per-image peak median {np.median(peaks):.1e} max {peaks.max():.1e}; "
                  f"CAL counterpart is criterion 6")


def test_criterion_8_formats_and_metrics(report, tmp_path):
    rng = np.random.default_rng(18)
    roundtrip = True
    for _ in range(200):
        h, w = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        masks = [MaskEntry(rng.random((h, w)) < rng.random(), int(rng.integers(3)), float(rng.random()))
                 for _ in range(int(rng.integers(1, 4)))]
        back, bh, bw = codecs.masks_from_dict(codecs.masks_to_dict(masks, h, w))
        roundtrip &= (bh, bw) == (h, w) and all(
            np.array_equal(a.mask, b.mask) and a.level == b.level and a.confidence == b.confidence
            for a, b in zip(masks, back))
        arr = rng.normal(size=(int(rng.integers(1, 4)), h, w)).astype(np.float32)
        data = codecs.encode_tensor(arr, class_ids=[0])
        got, _ = codecs.decode_tensor(data)
        roundtrip &= got.dtype == arr.dtype and got.tobytes() == arr.tobytes()
        seed = SeedMap(rng.integers(0, 21, size=(h, w)))
        roundtrip &= np.array_equal(codecs.decode_seed_png(codecs.encode_seed_png(seed)), seed.labels)
    preds = [rng.integers(0, 5, size=(6, 7)) for _ in range(10)]
    gts = [rng.integers(0, 5, size=(6, 7)) for _ in range(10)]
    rep = metrics.miou(preds, gts, 5)
    per, mean = miou_reference(preds, gts, 5)
    exact = rep.per_class_iou == per and rep.mean_iou == mean
    fw = Framework(synth.default_registry(3), TrainConfig())
    items = [(f"s{i}", fw.prepare_scene(s, f"s{i}")) for i, s in enumerate(synth.make_scenes(8, 3))]
    state = fw.init_state()
    first = [p.read_bytes() for p in fw.generate_seeds(items, state, tmp_path / "a")]
    second = [p.read_bytes() for p in fw.generate_seeds(items, state, tmp_path / "b")]
    ok = roundtrip and exact and first == second
    report(8, ok, f"codec round-trips bitwise {roundtrip}, mIoU equals counting oracle {exact}, "
                  f"seed rerun byte-identical {first == second}")
