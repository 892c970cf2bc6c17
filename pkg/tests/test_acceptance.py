"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import json
import time

import numpy as np
import pytest

import end_to_end
from grad_cases import CASES
from gradcheck import max_grad_error
from oracles import naive_conv2d, zero_stuff
from patchforge import functional as F
from patchforge.checkpoint import checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint
from patchforge.data.manifest import Manifest, PatchRecord, patch_id
from patchforge.data.patches import augment_records, crop_patches
from patchforge.data.slides import Slide
from patchforge.errors import CheckpointError
from patchforge.models import build_adn, build_refinenet
from patchforge.ral import CONFIDENCE, GROUP, RALConfig, RALState, ral_iteration
from patchforge.tensor import Tensor, no_grad
from patchforge.train import (TrainConfig, fuse_slice_vote, predict_logits, report_from_predictions,
                              train_arrays)


@pytest.fixture
def verdict(capsys):
    """``verdict(n, ok, detail)`` prints one line and fails the test when ``ok`` is false."""
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail

    return emit


def _conv_instance(rng):
    c, o = (int(v) for v in rng.integers(1, 4, size=2))
    k = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    d = int(rng.integers(1, 4))
    s = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    pad = tuple(int(p) for p in rng.integers(0, 3, size=4))
    bias = bool(rng.integers(0, 2))
    spec = F.ConvSpec(c, o, k, s, d, pad, bias)
    eh, ew = F.receptive_extent(spec)
    h = int(rng.integers(max(1, eh - pad[0] - pad[1]), eh + 6))
    w = int(rng.integers(max(1, ew - pad[2] - pad[3]), ew + 6))
    x = rng.uniform(-1, 1, size=(int(rng.integers(1, 3)), c, h, w))
    wt = rng.uniform(-1, 1, size=spec.weight_shape)
    b = rng.uniform(-1, 1, size=o) if bias else None
    return spec, x, wt, b


def test_criterion_1_convolution_oracle(verdict):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst32 = worst64 = 0.0
    dilations = set()
    for _ in range(200):
        spec, x, w, b = _conv_instance(rng)
        dilations.add(spec.dilation)
        ref = naive_conv2d(x, w, b, spec.stride, spec.dilation, spec.padding)
        for dtype in (np.float32, np.float64):
            bt = Tensor(b, dtype=dtype) if b is not None else None
            got = F.conv2d(Tensor(x, dtype=dtype), Tensor(w, dtype=dtype), bt, spec).data
            err = float(np.max(np.abs(got.astype(np.float64) - ref)))
            if dtype is np.float32:
                worst32 = max(worst32, err)
            else:
                worst64 = max(worst64, err)
    elapsed = time.perf_counter() - t0
    ok = worst32 <= 1e-5 and worst64 <= 1e-10 and elapsed < 60 and dilations == {1, 2, 3}
    verdict(1, ok, f"200 instances, max err f32 {worst32:.2e} (<=1e-5), f64 {worst64:.2e} (<=1e-10), "
                   f"{elapsed:.1f}s (<60s)")


def test_criterion_2_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, make in CASES.items():
        rng = np.random.default_rng(7)
        worst[name] = max(max_grad_error(*make(rng), seed=i) for i in range(100))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v <= 1e-4}
    ok = not bad and elapsed < 300
    top = max(worst, key=worst.get)
    verdict(2, ok, f"{len(CASES)} operators x 100 instances, worst rel err {worst[top]:.2e} ({top}), "
                   f"failing {sorted(bad)}, {elapsed:.1f}s (<300s)")


def test_criterion_3_dilation_is_zero_insertion(verdict):
    rng = np.random.default_rng(3)
    exact = True
    for d in (2, 3):
        for _ in range(10):
            x = rng.integers(-9, 10, size=(2, 3, 14, 13)).astype(np.float64)
            w = rng.integers(-5, 6, size=(4, 3, 3, 3)).astype(np.float64)
            pad = tuple(int(p) for p in rng.integers(0, 4, size=4))
            stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
            dil = F.conv2d(Tensor(x), Tensor(w), None, F.ConvSpec(3, 4, 3, stride, d, pad, False)).data
            ws = zero_stuff(w, d)
            plain = F.conv2d(Tensor(x), Tensor(ws), None,
                             F.ConvSpec(3, 4, ws.shape[2:], stride, 1, pad, False)).data
            exact &= np.array_equal(dil, plain)
    extents = [F.receptive_extent(F.ConvSpec(1, 1, 3, dilation=d))[0] for d in (2, 3)]
    verdict(3, exact and extents == [5, 7],
            f"dilated == zero-stuffed exactly: {exact}; receptive extents {extents} (expect [5, 7])")


def test_criterion_4_channel_laws(verdict):
    model = build_adn(num_classes=4, seed=0)
    seen = {}
    for blk in model.blocks:
        for unit in blk.units:
            orig = unit.forward

            def spy(x, unit=unit, orig=orig):
                seen[id(unit)] = x.shape[1]
                return orig(x)

            unit.forward = spy
    with no_grad():
        out = model.body(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))
    ok = out.shape[1] == 128
    lines = []
    for blk, k in zip(model.blocks, (8, 16, 32)):
        k0 = blk.in_channels
        want = [k0 + k * (i - 1) for i in range(1, 5)]
        weights = [u.conv.weight.shape[1] for u in blk.units]
        runtime = [seen[id(u)] for u in blk.units]
        ok &= blk.growth == k and weights == want and runtime == want and blk.out_channels == k0 + 4 * k
        lines.append(f"k={k}: k0={k0} units {runtime} out {blk.out_channels}")
    verdict(4, ok, "; ".join(lines))


def test_criterion_5_augmented_count_arithmetic(verdict):
    raster = np.zeros((1536, 2048, 3), dtype=np.uint8)
    per_image = len(crop_patches(Slide("s", raster, 0, "s.ppm"), 512, 0.5))
    records = []
    for c in range(4):
        for i in range(80):
            records += crop_patches(Slide(f"c{c}_{i}", raster, c, f"c{c}_{i}.ppm"), 512, 0.5,
                                    start_index=len(records))
    per_class = len(records) // 4
    augmented = len(augment_records(records))
    ok = (per_image, per_class, augmented) == (35, 2800, 89_600)
    verdict(5, ok, f"patches/image {per_image} (35), per class {per_class} (2800), "
                   f"augmented total {augmented} (89600)")


def _ral_manifest(n_orig, variants=8):
    recs = [PatchRecord(patch_id(i, j), "s.ppm", 0, 0, 32, 1, j, i, True, None)
            for i in range(n_orig) for j in range(1, variants + 1)]
    return Manifest(recs, ["a", "b", "c", "d"])


def _seeded_scorer(seed):
    def scorer(model, records):
        rows = []
        for r in records:
            h = np.random.default_rng([seed, model, r.orig_index, r.variant])
            top = h.uniform(0.3, 0.6) if h.uniform() < 0.2 else h.uniform(0.6, 1.0)
            rows.append([top, *(1 - top) * h.dirichlet(np.ones(3))])
        return np.array(rows)

    return scorer


def test_criterion_6_ral_semantics(verdict):
    cfg = RALConfig(theta=0.5, group_threshold=4)
    checks = {}

    # strict threshold: exactly theta survives, just below is removed
    st = RALState.start(_ral_manifest(1), model=0)
    probs = np.tile([0.5, 0.3, 0.1, 0.1], (8, 1))
    probs[0] = [np.nextafter(0.5, 0), 0.3, 0.2, 0.0]
    ral_iteration(st, cfg, lambda m, r: probs)
    checks["strict"] = [r.alive for r in st.manifest.records] == [False] + [True] * 7

    # cumulative mx with group removal at mx >= g
    st = RALState.start(_ral_manifest(2), model=0)

    def low(ids):
        return lambda m, recs: np.array([[0.3, 0.3, 0.2, 0.2] if r.id in ids else [0.9, 0.05, 0.03, 0.02]
                                         for r in recs])

    ral_iteration(st, cfg, low({"p0000000v1", "p0000000v2", "p0000000v3"}))
    first = (st.mx[0], st.size)
    ral_iteration(st, cfg, low({"p0000000v4"}))
    checks["cumulative+group"] = first == (3, 13) and st.mx[0] == 4 and st.size == 8 and \
        sum(e.reason == GROUP for e in st.audit) == 4

    # monotone sizes, sound audit, replayable runs and fixed point over random scorers
    def drive(seed, iters=6):
        s = RALState.start(_ral_manifest(12), model=0)
        sizes = [s.size]
        for _ in range(iters):
            ral_iteration(s, cfg, _seeded_scorer(seed), lambda recs, m, t: m + 1)
            sizes.append(s.size)
        return s, sizes

    mono = sound = replay = True
    for seed in range(25):
        s, sizes = drive(seed)
        again, sizes2 = drive(seed)
        mono &= all(a >= b for a, b in zip(sizes, sizes[1:]))
        replay &= sizes == sizes2 and [e.to_json() for e in s.audit] == [e.to_json() for e in again.audit]
        removed = sorted(r.id for r in s.manifest.records if not r.alive)
        sound &= sorted(e.patch_id for e in s.audit) == removed
        for e in s.audit:
            sound &= (e.reason == CONFIDENCE and e.confidence < cfg.theta) or \
                     (e.reason == GROUP and e.mx >= cfg.group_threshold)
    checks["monotone"], checks["audit"], checks["replay"] = mono, sound, replay

    st = RALState.start(_ral_manifest(4), model=0)
    confident = lambda m, recs: np.tile([0.8, 0.1, 0.05, 0.05], (len(recs), 1))
    ral_iteration(st, cfg, low({"p0000001v1"}))
    snapshot = [r.alive for r in st.manifest.records], dict(st.mx), len(st.audit)
    ral_iteration(st, cfg, confident)
    ral_iteration(st, cfg, confident)
    checks["fixed point"] = ([r.alive for r in st.manifest.records], dict(st.mx), len(st.audit)) == snapshot

    failed = [k for k, v in checks.items() if not v]
    verdict(6, not failed, f"{len(checks)} semantic checks, failing {failed}")


def test_criterion_7_end_to_end_recovery(verdict, tmp_path):
    cal = json.loads(end_to_end.CALIBRATION.read_text())
    got = end_to_end.run(tmp_path)
    rem = got["removal"]
    thr = cal["thresholds"]
    prec = 0.0 if rem["precision"] != rem["precision"] else rem["precision"]
    ok_a = got["refined_aca"] >= got["baseline_aca"]
    ok_b = prec >= thr["precision"] and rem["recall"] >= thr["recall"]
    ok_t = got["seconds"] <= 600
    verdict(7, ok_a and ok_b and ok_t,
            f"(a) refined ACA {got['refined_aca']:.4f} >= baseline {got['baseline_aca']:.4f}: {ok_a}; "
            f"(b) removed {rem['removed']}, precision {prec:.3f} (>= {thr['precision']}), "
            f"recall {rem['recall']:.3f} (>= {thr['recall']}) of {rem['planted']} planted: {ok_b}; "
            f"best K={got['best_iteration']}, {got['seconds']:.0f}s (<=600s)")


def test_criterion_8_adn_overfits_64_samples(verdict):
    rng = np.random.default_rng(8)
    x = rng.standard_normal((64, 3, 16, 16)).astype(np.float32)
    y = rng.permutation(np.arange(64) % 4)
    model = build_adn(num_classes=4, seed=0)
    acc = []

    def check(epoch, result):
        acc.append(float((predict_logits(model, x).argmax(axis=1) == y).mean()))
        return acc[-1] == 1.0

    train_arrays(model, 64, lambda idx: (x[idx], y[idx]), TrainConfig(epochs=200, seed=0), check)
    verdict(8, acc[-1] == 1.0, f"random-label 64-sample set, training accuracy {acc[-1]:.3f} "
                               f"after {len(acc)} epochs (<=200)")


def test_criterion_9_checkpoint_round_trip(verdict, tmp_path):
    rng = np.random.default_rng(9)
    ok = True
    for name, model, size in (("refinenet", build_refinenet(num_classes=4, seed=1), 64),
                              ("adn", build_adn(num_classes=4, seed=1), 32)):
        x = rng.standard_normal((6, 3, size, size)).astype(np.float32)
        y = np.arange(6) % 4
        train_arrays(model, 6, lambda idx: (x[idx], y[idx]), TrainConfig(epochs=1, batch=3, lr=0.01))
        path = tmp_path / f"{name}.ckpt"
        save_checkpoint(model, path)
        ok &= np.array_equal(predict_logits(model, x), predict_logits(load_checkpoint(path), x))
        data = bytearray(path.read_bytes())
        data[-7] ^= 0x40
        try:
            checkpoint_from_bytes(bytes(data))
            ok = False
        except CheckpointError:
            pass
    ok &= checkpoint_bytes(load_checkpoint(tmp_path / "adn.ckpt")) == (tmp_path / "adn.ckpt").read_bytes()
    verdict(9, ok, "save->load forward bit-identical for RefineNet and ADN; flipped blob byte rejected")


def test_criterion_10_metric_identities(verdict):
    rates = (0.9630, 0.9236, 0.9350, 0.9423)
    n = 10_000
    truth, pred = [], []
    for k, r in enumerate(rates):
        hits = round(r * n)
        truth += [k] * n
        pred += [k] * hits + [(k + 1) % 4] * (n - hits)
    rep = report_from_predictions(truth, pred, 4)
    average = round(100 * rep.aca, 2)

    rng = np.random.default_rng(10)
    t, p = rng.integers(0, 4, 997), rng.integers(0, 4, 997)
    r2 = report_from_predictions(t, p, 4)
    identities = (np.array_equal(r2.confusion.sum(axis=1), np.bincount(t, minlength=4))
                  and r2.aca == np.trace(r2.confusion) / r2.confusion.sum())

    tie = np.array([[0.0, 0.9, 0.0], [0.0, 0.8, 0.0], [0.0, 0.0, 0.95], [0.0, 0.0, 0.95]])
    votes_ok = fuse_slice_vote({"s": np.eye(3)[[1, 1, 2]]})["s"] == 1 and fuse_slice_vote({"s": tie})["s"] == 2
    for _ in range(50):
        probs = rng.dirichlet(np.ones(4), size=int(rng.integers(1, 10)))
        votes_ok &= fuse_slice_vote({"s": probs}) == fuse_slice_vote({"s": rng.permutation(probs)})
    ok = average == 94.10 and identities and votes_ok
    verdict(10, ok, f"replayed per-class rates average {average:.2f} (94.10); confusion identities "
                    f"{identities}; voting order-invariant with deterministic tie-break {votes_ok}")
