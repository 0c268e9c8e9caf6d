"""Acceptance suite: one PASS/FAIL line per criterion, printed as each check finishes.

Run ``pytest tests/test_acceptance.py -v`` to see the lines inline.  The CIFAR
direction check needs the real CIFAR-10 binaries; point ``LMF_CIFAR10_DIR`` at
the directory holding ``data_batch_1.bin`` and ``test_batch.bin``.
"""

import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest

from lmfnet import kernels as K
from lmfnet.analysis import (
    LayerSpec,
    LayerStackSpec,
    analyze_network,
    exhaustive_stacks,
    flops_count,
    gradient_support_probe,
    gridding_check,
    param_count,
    receptive_field,
)
from lmfnet.checkpoint import checkpoint_bytes, parse_checkpoint
from lmfnet.dataio import decode_cifar, decode_image, encode_cifar, CifarRecord
from lmfnet.errors import ParseError
from lmfnet.gradcheck import kernel_suite, loss_suite, network_check, relative_error
from lmfnet.losses import bce_loss, hybrid_loss, iou_loss, ssim_loss
from lmfnet.lmft import tensor_from_bytes
from lmfnet.metrics import e_curve, evaluate_pairs, mae, pr_f_curves, s_measure
from lmfnet.network import (
    build_classifier,
    build_network,
    build_sod_network,
    default_sod_config,
    packaged_config,
)
from lmfnet.training import (
    Recipe,
    ScheduleSpec,
    classifier_logits,
    packaged_recipe,
    predict,
    topk_accuracy,
    train_classifier,
    train_sod,
)
from corpus import MALFORMED_CIFAR, MALFORMED_IMAGES, MALFORMED_LMFT, cifar_bytes
from oracles import (
    brute_e,
    brute_pr,
    depthwise_oracle,
    scalar_bce,
    scalar_iou,
    scalar_mae,
    scalar_s_measure,
    scalar_ssim,
)
from synth import synthetic_cifar, synthetic_sod

PRESETS = ["default", "tiny", "width_0.8", "width_1.28", "gridding_fail", "classifier_cifar10",
           "classifier_cifar100", "classifier_cifar100_wide", "tiny_classifier"]


def announce(number, title, ok, detail, started):
    print(f"\n{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}  [{detail}]  "
          f"({time.perf_counter() - started:.1f}s)")


@pytest.fixture
def verdict(capsys):
    """Print the criterion line outside pytest's capture, then fail the test if it failed."""

    def report(number, title, ok, detail, started):
        with capsys.disabled():
            announce(number, title, ok, detail, started)
        assert ok, f"criterion {number} failed: {detail}"

    return report


def test_criterion_01_parameter_identities(verdict):
    t0 = time.perf_counter()
    standard = param_count(LayerSpec("conv", 3, in_channels=256, out_channels=256))
    separable = param_count(LayerSpec("conv", 3, in_channels=256, out_channels=256, separable=True))
    mismatches = []
    for name in PRESETS:
        net = build_network(packaged_config(name))
        if param_count(net) != net.num_parameters():
            mismatches.append(name)
    ok = standard == 589_824 and separable == 67_840 and not mismatches
    verdict(1, "parameter-count identities", ok,
            f"standard {standard:,}, separable {separable:,}, closed form = storage on {len(PRESETS) - len(mismatches)}"
            f"/{len(PRESETS)} networks", t0)


def test_criterion_02_architecture_budget(verdict):
    t0 = time.perf_counter()
    cfg = default_sod_config()
    params = param_count(build_sod_network(cfg))
    flops = flops_count(cfg).flops
    narrow = param_count(packaged_config("width_0.8"))
    wide = param_count(packaged_config("width_1.28"))
    ok = (730_000 <= params <= 890_000 and 3.0e9 <= flops <= 4.6e9
          and abs(narrow - 0.5e6) <= 0.05e6 and abs(wide - 1.31e6) <= 0.131e6)
    verdict(2, "architecture budget", ok,
            f"params {params:,}, FLOPs {flops / 1e9:.3f}G at 256x256, width variants {narrow:,} / {wide:,}", t0)


def test_criterion_03_gradient_suite(verdict):
    t0 = time.perf_counter()
    reports = {f"kernel/{k}": v for k, v in kernel_suite(eps=1e-4).items()}
    reports.update({f"loss/{k}": v for k, v in loss_suite(eps=1e-4).items()})
    net = build_sod_network(packaged_config("tiny"))
    reports["network"] = network_check(net, batch=2, eps=1e-4)
    worst_name = max(reports, key=lambda k: reports[k].max_rel_error)
    ok = all(r.passed(1e-4) for r in reports.values())
    verdict(3, "gradient suite vs central differences", ok,
            f"{len(reports)} checks, worst {worst_name} {reports[worst_name].max_rel_error:.2e}, "
            f"network {reports['network'].max_rel_error:.2e} with ReLU/max-pool gates frozen "
            f"({reports['network'].gate_crossings} gate crossings under the perturbation)", t0)


def test_criterion_04_convolution_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, cases = 0.0, 0
    for k, d, (h, w) in itertools.product([1, 3, 5], [1, 2, 3, 4], [(1, 1), (2, 3), (4, 4), (5, 7), (9, 9)]):
        x = rng.standard_normal((2, 3, h, w))
        wt = rng.standard_normal((3, 1, k, k))
        out, _ = K.conv2d_depthwise(x, wt, K.ConvGeometry(k, d))
        worst = max(worst, relative_error(out, depthwise_oracle(x, wt, k, d)))
        cases += 1
    verdict(4, "depthwise conv vs nested loop", worst <= 1e-6, f"{cases} shapes, max rel error {worst:.1e}", t0)


def test_criterion_05_receptive_field(verdict):
    t0 = time.perf_counter()
    stacks = list(exhaustive_stacks())
    bad = [s for s in stacks if gradient_support_probe(s, per_layer=False)[0] != receptive_field(s).rf_dilated[-1]]
    growing = LayerStackSpec.convs(3, [1, 2, 3])
    rf = receptive_field(growing)
    probe = gradient_support_probe(growing)[-1]
    ok = not bad and probe == 13 == rf.rf_dilated[-1] and rf.rf_composed[-1] == 21
    verdict(5, "receptive field vs gradient-support probe", ok,
            f"{len(stacks) - len(bad)}/{len(stacks)} stacks agree; d=[1,2,3]: probe {probe}, "
            f"recurrence {rf.rf_dilated[-1]}, composed formula {rf.rf_composed[-1]}", t0)


def test_criterion_06_gridding_gate(verdict):
    t0 = time.perf_counter()
    dilations = [1, 4, 12, 36, 108]
    good = gridding_check(LayerStackSpec.convs([5, 3, 3, 3, 3], dilations))
    failing = {}
    for ds in ([1, 4], [1, 6], [2, 12]):
        rep = gridding_check(LayerStackSpec.convs(3, ds))
        failing[tuple(ds)] = (rep.passed, len(rep.stack_gaps))
    default_rep = analyze_network(default_sod_config())
    broken_rep = analyze_network(packaged_config("gridding_fail"))
    ok = (good.passed and default_rep.gridding_passed and not broken_rep.gridding_passed
          and all(not p and gaps for p, gaps in failing.values()))
    detail = (f"k=5 then k=3 over {dilations}: {'PASS' if good.passed else 'FAIL'}; "
              + ", ".join(f"k=3 d={list(d)} {'PASS' if p else 'FAIL'} with {g} gaps" for d, (p, g) in failing.items())
              + f"; default network {'PASS' if default_rep.gridding_passed else 'FAIL'}, "
              f"gridding_fail preset {'PASS' if broken_rep.gridding_passed else 'FAIL'}")
    verdict(6, "gridding gate", ok, detail, t0)


def test_criterion_07_metrics_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    fixtures = []
    for shape in [(4, 4), (4, 4), (5, 7), (8, 8)]:
        s = rng.uniform(0, 1, shape)
        g = (rng.uniform(size=shape) > 0.55).astype(float)
        fixtures.append((s, g))
    hand = np.zeros((8, 8))
    hand[2:6, 3:7] = 1
    fixtures.append((np.clip(0.8 * hand + rng.uniform(0, 0.3, (8, 8)), 0, 1), hand))
    for s, g in fixtures:
        p, r, _ = pr_f_curves(s, g)
        bp, br = brute_pr(s, g)
        worst = max(worst, abs(mae(s, g) - scalar_mae(s, g)), np.max(np.abs(p - bp)), np.max(np.abs(r - br)),
                    np.max(np.abs(e_curve(s, g) - brute_e(s, g))), abs(s_measure(s, g) - scalar_s_measure(s, g)))
    _, g = fixtures[-1]
    same = evaluate_pairs([(g, g)])
    ok = worst < 1e-10 and same.mae == 0 and same.max_f == 1 and abs(same.s_m - 1) < 1e-12
    verdict(7, "metrics vs brute force", ok,
            f"{len(fixtures)} fixtures, max deviation {worst:.1e}; pred=GT gives MAE {same.mae}, "
            f"max F {same.max_f}, S_m {same.s_m:.15f}", t0)


def test_criterion_08_loss_semantics(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    g = (rng.uniform(size=(2, 1, 16, 16)) > 0.5).astype(float)
    at_target = {name: fn(g.copy(), g)[0] for name, fn in
                 [("bce", bce_loss), ("ssim", ssim_loss), ("iou", iou_loss)]}
    s = rng.uniform(0.05, 0.95, g.shape)
    total = hybrid_loss(s, g)[0].total
    parts = bce_loss(s, g)[0] + ssim_loss(s, g)[0] + iou_loss(s, g)[0]
    oracle_gap = max(abs(bce_loss(s[:1], g[:1])[0] - scalar_bce(s[:1], g[:1])),
                     abs(iou_loss(s, g)[0] - scalar_iou(s, g)),
                     abs(ssim_loss(s[0, 0], g[0, 0])[0] - scalar_ssim(s[0, 0], g[0, 0])))
    subsets = {}
    for subset in ("bce", "bce+ssim", "bce+iou"):
        value = hybrid_loss(s, g, subset)[0]
        subsets[subset] = tuple(value.components())
    ok = (max(at_target.values()) < 1e-5 and abs(total - parts) < 1e-12 and oracle_gap < 1e-10
          and subsets == {"bce": ("bce",), "bce+ssim": ("bce", "ssim"), "bce+iou": ("bce", "iou")})
    verdict(8, "loss semantics", ok,
            f"zero at S=G (max {max(at_target.values()):.1e}), |total - sum| {abs(total - parts):.1e}, "
            f"scalar oracles {oracle_gap:.1e}, subsets {sorted(subsets)}", t0)


def test_criterion_09_overfit(verdict):
    t0 = time.perf_counter()
    images, masks = synthetic_sod(8, 32, seed=0)
    net = build_sod_network(packaged_config("tiny"), seed=0)
    recipe = Recipe(lr=5e-3, schedule=ScheduleSpec("constant", 5e-3), batch_size=8, epochs=300,
                    augment=False, strict_deterministic=True)
    res = train_sod(net, images, masks, recipe)
    ratio = res.step_losses[-1] / res.step_losses[0]
    sod_mae = float(np.abs(predict(net, images) - masks).mean())
    sod_time = time.perf_counter() - t0

    raw, labels = synthetic_cifar(256, seed=0)
    clf = build_classifier(packaged_config("tiny_classifier"), seed=0)
    crecipe = Recipe.classifier_default(lr=0.05, batch_size=32, epochs=50, augment=False, strict_deterministic=True,
                                        schedule=ScheduleSpec("constant", 0.05))
    cres = train_classifier(clf, raw / 255.0, labels, crecipe, eval_every=5)
    top1 = cres.train_top1[-1]
    ok = res.steps == 300 and ratio <= 0.1 and sod_mae < 0.05 and top1 >= 0.95
    verdict(9, "overfit training", ok,
            f"SOD {res.steps} steps loss {res.step_losses[0]:.3f} -> {res.step_losses[-1]:.4f} "
            f"(ratio {ratio:.3f}), MAE {sod_mae:.4f} in {sod_time:.0f}s; "
            f"classifier 50 epochs train top-1 {top1:.3f} (per 5 epochs {[round(a, 2) for a in cres.train_top1]})",
            t0)


def _cifar_dir():
    root = os.environ.get("LMF_CIFAR10_DIR")
    if not root:
        return None
    root = Path(root)
    return root if (root / "data_batch_1.bin").exists() and (root / "test_batch.bin").exists() else None


def test_criterion_10_cifar_direction(verdict, capsys):
    t0 = time.perf_counter()
    root = _cifar_dir()
    if root is None:
        with capsys.disabled():
            announce(10, "CIFAR-10 direction check", False,
                     "not run: CIFAR-10 binaries unavailable (set LMF_CIFAR10_DIR)", t0)
        pytest.skip("CIFAR-10 binaries unavailable; set LMF_CIFAR10_DIR to run criterion 10")
    from lmfnet.dataio import load_cifar_arrays

    images, labels = load_cifar_arrays(root / "data_batch_1.bin")
    test_images, test_labels = load_cifar_arrays(root / "test_batch.bin")
    images, labels = images[:5000], labels[:5000]
    net = build_classifier(packaged_config("classifier_cifar10"), seed=0)
    recipe = packaged_recipe("cifar").scaled_to(30)
    train_classifier(net, images, labels, recipe, eval_every=0)
    top1 = topk_accuracy(classifier_logits(net, test_images), test_labels, 1)
    verdict(10, "CIFAR-10 direction check", top1 >= 0.5,
            f"5,000 training images, 30 epochs, test top-1 {top1:.3f}", t0)


def test_criterion_11_determinism(verdict):
    t0 = time.perf_counter()
    images, masks = synthetic_sod(6, 32, seed=3)
    runs = []
    for _ in range(2):
        net = build_sod_network(packaged_config("tiny"), seed=11)
        recipe = Recipe(lr=2e-3, batch_size=4, epochs=3, seed=7, strict_deterministic=True)
        res = train_sod(net, images, masks, recipe)
        runs.append((res.step_losses, predict(net, images), net))
    same_history = runs[0][0] == runs[1][0]
    same_pred = np.array_equal(runs[0][1], runs[1][1])

    raw, labels = synthetic_cifar(32, seed=1)
    cls_runs = []
    for _ in range(2):
        clf = build_classifier(packaged_config("tiny_classifier"), seed=2)
        recipe = Recipe.classifier_default(lr=0.05, batch_size=16, epochs=2, seed=5, strict_deterministic=True)
        cls_runs.append(train_classifier(clf, raw / 255.0, labels, recipe).step_losses)
    same_cls = cls_runs[0] == cls_runs[1]

    net = runs[0][2]
    back = parse_checkpoint(checkpoint_bytes(net)).build()
    params_equal = all(np.array_equal(a.value, b.value) for a, b in zip(net.parameters(), back.parameters()))
    buffers_equal = all(np.array_equal(a, b) for (_, a), (_, b) in zip(net.named_buffers(), back.named_buffers()))
    same_ckpt_pred = np.array_equal(predict(back, images), runs[0][1])
    ok = same_history and same_pred and same_cls and params_equal and buffers_equal and same_ckpt_pred
    verdict(11, "determinism and checkpoint round-trip", ok,
            f"SOD history {'identical' if same_history else 'DIFFERS'}, predictions "
            f"{'identical' if same_pred else 'DIFFER'}, classifier history {'identical' if same_cls else 'DIFFERS'}, "
            f"checkpoint params/buffers/predictions {params_equal}/{buffers_equal}/{same_ckpt_pred}", t0)


def test_criterion_12_parser_robustness(verdict):
    t0 = time.perf_counter()
    corpus = ([(f"image/{k}", decode_image, (data,)) for k, (data, _) in MALFORMED_IMAGES.items()]
              + [(f"cifar/{k}", decode_cifar, (data, n)) for k, (data, n, _) in MALFORMED_CIFAR.items()]
              + [(f"tensor/{k}", tensor_from_bytes, (data,)) for k, (data, _) in MALFORMED_LMFT.items()])
    crashes = []
    for name, parse, args in corpus:
        try:
            parse(*args)
            crashes.append(f"{name} accepted")
        except ParseError:
            pass
        except Exception as exc:  # anything untyped counts as a crash
            crashes.append(f"{name} {type(exc).__name__}")
    blob = cifar_bytes([3, 7, 0, 9], pixel_seed=12)
    images, labels, _ = decode_cifar(blob)
    reencoded = encode_cifar([CifarRecord(int(lab), img / 255.0) for lab, img in zip(labels, images)])
    ok = not crashes and len(corpus) >= 20 and reencoded == blob
    verdict(12, "parser robustness", ok,
            f"{len(corpus) - len(crashes)}/{len(corpus)} malformed inputs raised typed errors"
            + (f" ({', '.join(crashes)})" if crashes else "")
            + f"; CIFAR re-serialization {'byte-exact' if reencoded == blob else 'DIFFERS'}", t0)
