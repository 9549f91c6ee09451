"""Acceptance suite: one PASS/FAIL line per criterion, printed even under output capture.

Slow by design (several minutes): it trains the smoke model twice and runs
the four-arm ablation over three seeds.
"""

import itertools
import time

import numpy as np
import pytest

from vphype.backbone import Backbone, MixerKind, ModelConfig, mixer_kind, window_partition, window_reverse
from vphype.bench import build_mixers, core_flops, run_bench
from vphype.data import SplitSpec, load_scene, make_synthetic_scene, save_scene, stratified_split
from vphype.gradcheck import run_gradient_suite
from vphype.metrics import ConfusionMatrix, compute_metrics
from vphype.model import VPHype
from vphype.prompts import ARMS, TCSP, PromptBank, PromptConfig
from vphype.scan import scan_chunked, scan_reference, selective_scan
from vphype.tensor import Tensor, no_grad
from vphype.trainer import TrainConfig, checkpoint_from, load_checkpoint, restore_model, save_checkpoint, train

SMOKE_EPOCHS = 50
ABLATION_EPOCHS = SMOKE_EPOCHS
ABLATION_SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance] {'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}")
        assert ok, detail

    return emit


def scan_inputs(rng, m, c, n, length):
    return (
        rng.normal(size=(m, c, length)),
        rng.uniform(0.05, 1.5, size=(m, c, length)),
        -rng.uniform(0.1, 2.0, size=(c, n)),
        rng.normal(size=(m, n, length)),
        rng.normal(size=(m, n, length)),
        rng.normal(size=c),
    )


def scan(args):
    return selective_scan(*(Tensor(a) for a in args)).data


def test_criterion_1_gradient_suite(report):
    start = time.perf_counter()
    cases = run_gradient_suite(max_coords=8)
    elapsed = time.perf_counter() - start
    worst = max(cases, key=lambda c: c.error)
    ok = all(c.passed for c in cases) and elapsed < 120
    report(1, "gradient suite", ok, f"{len(cases)} cases, worst {worst.name} {worst.error:.2e} < 1e-5, {elapsed:.0f}s < 120s")


def test_criterion_2_scan_oracle(report):
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        args = scan_inputs(rng, int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 70)))
        ref = scan_reference(*args)
        worst = max(worst, np.abs(scan_chunked(*args, chunk=int(rng.integers(1, 20))) - ref).max(), np.abs(scan(args) - ref).max())

    rng = np.random.default_rng(99)
    u, *rest = scan_inputs(rng, 2, 3, 4, 16)
    u2 = rng.normal(size=u.shape)
    linear_err = np.abs(scan((2.0 * u - 0.5 * u2, *rest)) - (2.0 * scan((u, *rest)) - 0.5 * scan((u2, *rest)))).max()

    causal_ok = True
    for length in range(1, 17):
        args = list(scan_inputs(np.random.default_rng(length), 1, 2, 3, length))
        base = scan(args)
        for t, idx in itertools.product(range(length), (0, 3, 4)):
            pert = [a.copy() for a in args]
            pert[idx][..., t] += 1.0
            causal_ok &= np.array_equal(scan(pert)[..., :t], base[..., :t])
    ok = worst <= 1e-10 and linear_err <= 1e-10 and causal_ok
    report(2, "scan oracle", ok, f"max |chunked-seq| {worst:.1e} <= 1e-10, linearity {linear_err:.1e}, causal L<=16 {causal_ok}")


def test_criterion_3_structure(report):
    rng = np.random.default_rng(0)
    roundtrip = True
    for b, c, nh, nw, w in itertools.product((1, 2), (1, 3), (1, 2, 3), (1, 2), (1, 2, 4, 7)):
        x = rng.normal(size=(b, c, nh * w, nw * w))
        roundtrip &= np.array_equal(window_reverse(window_partition(Tensor(x), w), w, b, nh * w, nw * w).data, x)
    kinds = all(
        (mixer_kind(d, i) is MixerKind.MAMBA) == (i < d // 2) for d in range(1, 9) for i in range(d)
    )
    d = 32
    net = Backbone(ModelConfig.tiny(in_bands=3, base_dim=d, depths=[1, 1, 1, 1]), rng)
    shapes = []
    with no_grad():
        feat, _ = net(Tensor(rng.normal(size=(1, 3, 32, 32))), prompt_hook=lambda lvl, x: shapes.append(x.shape[1:]) or x)
    dims = [s[0] for s in shapes] == [d * 2**l for l in range(4)] and feat.shape == (1, 8 * d, 1, 1)
    ok = roundtrip and kinds and dims
    report(3, "structural exactness", ok, f"window round trip {roundtrip}, mixer_kind depths 1..8 {kinds}, dims {shapes} final {feat.shape}")


def test_criterion_4_prompt_wiring(report):
    rng = np.random.default_rng(0)
    tiny = dict(in_bands=4, num_classes=3, base_dim=8, depths=[1, 1, 1, 1])
    bank = PromptBank.synthetic(2, 16, seed=1)
    model = VPHype(ModelConfig.tiny(**tiny), PromptConfig.for_arm("no_prompt", S_p=4), bank)
    x = Tensor(rng.normal(size=(3, 4, 8, 8)))
    with no_grad():
        feat, mask = model.backbone(x)
        identical = np.array_equal(model(x, [0, 1, 0]).data, model.head(feat, False, mask).data)

    scene = make_synthetic_scene(num_classes=3, bands=4, height=16, width=16)
    split = stratified_split(scene, SplitSpec(0.1))
    frozen_ok = True
    for arm in ("visual_only", "text_only", "no_prompt"):
        m = VPHype(ModelConfig.tiny(**tiny), PromptConfig.for_arm(arm, S_p=4), bank)
        frozen = set(m.frozen_parameter_names())
        before = {n: p.data.copy() for n, p in m.named_parameters() if n in frozen}
        train(m, scene, split, TrainConfig(epochs=1, batch_size=8, val_size=8), patch_size=7)
        frozen_ok &= bool(frozen) and all(np.array_equal(p.data, before[n]) for n, p in m.named_parameters() if n in frozen)

    worst = 0.0
    tcsp = TCSP(16, 8, 4, 8, rng)
    tcsp.visual_prompt.data[...] = rng.normal(size=tcsp.visual_prompt.shape)
    for tau in (0.1, 1.0, 10.0):
        tcsp.log_tau.data[...] = np.log(tau)
        w, _ = tcsp.attention(Tensor(rng.normal(size=(2, 16))))
        worst = max(worst, np.abs(w.data.sum(-1) - 1.0).max())
    ok = identical and frozen_ok and worst <= 1e-12
    report(4, "prompt wiring", ok, f"no-prompt bit-identical {identical}, frozen params unchanged {frozen_ok}, row-sum err {worst:.1e}")


def brute(labels, preds, n):
    total = len(labels)
    oa = sum(a == b for a, b in zip(labels, preds)) / total
    rec = [sum(p == c for l, p in zip(labels, preds) if l == c) / labels.count(c) for c in range(n) if labels.count(c)]
    pe = sum(labels.count(c) * preds.count(c) for c in range(n)) / total**2
    return oa, sum(rec) / len(rec), ((oa - pe) / (1 - pe) if pe != 1 else float(oa == 1))


def test_criterion_5_metrics(report):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        labels = rng.integers(0, n, size=int(rng.integers(1, 100)))
        preds = np.where(rng.random(labels.size) < 0.5, labels, rng.integers(0, n, size=labels.size))
        m = compute_metrics(ConfusionMatrix.from_predictions(labels, preds, n))
        want = brute(labels.tolist(), preds.tolist(), n)
        worst = max(worst, *(abs(a - b) for a, b in zip((m.overall_accuracy, m.average_accuracy, m.kappa), want)))
    diag = compute_metrics(ConfusionMatrix(np.diag([4, 9, 2])))
    two = compute_metrics(ConfusionMatrix([[40, 10], [20, 30]]))
    chance = compute_metrics(ConfusionMatrix([[50, 0], [50, 0]]))
    hand = (
        (diag.overall_accuracy, diag.average_accuracy, diag.kappa) == (1.0, 1.0, 1.0)
        and abs(two.overall_accuracy - 0.70) < 1e-15
        and abs(two.average_accuracy - 0.70) < 1e-15
        and abs(two.kappa - 0.40) < 1e-15
        and chance.kappa == 0.0
    )
    ok = worst <= 1e-12 and hand
    report(5, "metrics oracle", ok, f"100 brute-force sets max err {worst:.1e}, hand cases {hand}")


def test_criterion_6_complexity(report):
    mixers = build_mixers(64, heads=1)
    scan_ratio = core_flops(mixers["scan"], 64, 1024) / core_flops(mixers["scan"], 64, 512)
    attn_ratio = core_flops(mixers["attention"], 64, 1024) / core_flops(mixers["attention"], 64, 512)
    start = time.perf_counter()
    rows = run_bench(dim=64, lengths=[256, 512, 1024, 2048, 4096], repeats=5)
    elapsed = time.perf_counter() - start
    slopes = {r.mixer: r.slope for r in rows}
    ok = scan_ratio == 2.0 and attn_ratio == 4.0 and slopes["scan"] < 1.3 and slopes["attention"] > 1.7 and elapsed < 300
    report(
        6,
        "complexity",
        ok,
        f"flop ratios scan {scan_ratio} attn {attn_ratio}, slopes scan {slopes['scan']:.3f} < 1.3 "
        f"attn {slopes['attention']:.3f} > 1.7, {elapsed:.0f}s < 300s",
    )


def smoke_run(seed=0):
    scene = make_synthetic_scene(num_classes=6, bands=32, height=64, width=64, separation=4.0, seed=seed)
    split = stratified_split(scene, SplitSpec(0.02, seed))
    model = VPHype(ModelConfig.tiny(in_bands=32, num_classes=6), PromptConfig(), seed=seed)
    start = time.perf_counter()
    result = train(model, scene, split, TrainConfig(epochs=SMOKE_EPOCHS, seed=seed))
    return result.log, time.perf_counter() - start


def test_criterion_7_smoke_training(report):
    log_a, secs = smoke_run()
    log_b, _ = smoke_run()
    final = log_a[-1]["test"]
    ok = final["OA"] >= 0.95 and final["Kappa"] >= 0.90 and secs < 900 and log_a == log_b
    report(
        7,
        "smoke training",
        ok,
        f"OA {final['OA']:.4f} >= 0.95, Kappa {final['Kappa']:.4f} >= 0.90, {secs:.0f}s < 900s, "
        f"identical logs {log_a == log_b}",
    )


def test_criterion_8_ablation_direction(report):
    oa = {arm: [] for arm in ARMS}
    scene = make_synthetic_scene(num_classes=6, bands=32, height=64, width=64, separation=1.5, seed=0)
    split = stratified_split(scene, SplitSpec(0.02, 0))
    for seed, arm in itertools.product(ABLATION_SEEDS, ARMS):
        model = VPHype(ModelConfig.tiny(in_bands=32, num_classes=6), PromptConfig.for_arm(arm), seed=seed)
        result = train(model, scene, split, TrainConfig(epochs=ABLATION_EPOCHS, seed=seed, val_size=64))
        oa[arm].append(result.log[-1]["test"]["OA"])
    mean = {arm: float(np.mean(v)) for arm, v in oa.items()}
    singles = ("visual_only", "text_only")
    ok = all(mean["full"] >= mean[s] for s in singles) and all(mean[s] >= mean["no_prompt"] - 0.02 for s in singles)
    detail = ", ".join(f"{arm} {mean[arm]:.4f}" for arm in ARMS)
    report(8, "ablation direction", ok, f"mean OA over seeds {list(ABLATION_SEEDS)}: {detail}")


def test_criterion_9_persistence(report, tmp_path):
    scene = make_synthetic_scene(num_classes=4, bands=5, height=12, width=10, seed=3)
    save_scene(scene, tmp_path / "scene")
    loaded = load_scene(tmp_path / "scene")
    scene_ok = np.array_equal(loaded.cube, scene.cube) and np.array_equal(loaded.labels, scene.labels)

    split = stratified_split(scene, SplitSpec(0.2))
    config = ModelConfig.tiny(in_bands=5, num_classes=4, base_dim=8, depths=[1, 1, 1, 1])
    model = VPHype(config, PromptConfig(S_p=4), PromptBank.synthetic(1, 16))
    result = train(model, scene, split, TrainConfig(epochs=1, batch_size=4, val_size=8), patch_size=5)
    save_checkpoint(tmp_path / "m.vpck", checkpoint_from(model, result.optimizer, result.rng))
    ckpt = load_checkpoint(tmp_path / "m.vpck", config)
    arrays_ok = all(
        np.array_equal(ckpt.arrays[f"param/{n}"], p.data) for n, p in model.named_parameters()
    ) and all(np.array_equal(ckpt.arrays[f"adam_m/{n}"], m) for n, (m, _) in result.optimizer.moments.items())
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5, 5, 5)))
    with no_grad():
        logits_ok = np.array_equal(restore_model(ckpt)(x).data, model(x).data)
    ok = scene_ok and arrays_ok and logits_ok
    report(9, "persistence", ok, f"scene bit-exact {scene_ok}, checkpoint arrays {arrays_ok}, logits bit-exact {logits_ok}")
