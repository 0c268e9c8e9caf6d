import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lmfnet.checkpoint import (
    checkpoint_bytes,
    load_checkpoint,
    load_into,
    parse_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from lmfnet.errors import (
    BadMagicError,
    CheckpointMismatchError,
    ConfigError,
    LabelRangeError,
    NumericalError,
    ParseError,
    ShapeError,
    TruncatedError,
    VersionError,
)
from lmfnet.network import build_classifier, build_sod_network, packaged_config
from lmfnet.training import (
    AugmentParams,
    OptimizerState,
    Prefetcher,
    Recipe,
    ScheduleSpec,
    adam_step,
    apply_augment,
    augment_cifar,
    augment_sod,
    load_recipe,
    packaged_recipe,
    schedule_lr,
    sgd_momentum_step,
    softmax_cross_entropy,
    topk_accuracy,
    train_classifier,
    train_sod,
)
from synth import synthetic_cifar, synthetic_sod


def adam_state(wd=0.0):
    return OptimizerState("adam", 1e-3, wd, 0.9, 0.999, 1e-8)


def sgd_state(momentum=0.9, wd=0.0):
    return OptimizerState("sgd-momentum", 0.1, wd, momentum=momentum)


def test_adam_scalar_first_step():
    p = [np.array([1.0])]
    adam_step(p, [np.array([1.0])], adam_state(), lr=1e-3)
    assert p[0][0] == pytest.approx(1 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_matches_scalar_recurrence():
    p, state = [np.array([0.7])], adam_state(wd=1e-4)
    x, m, v = 0.7, 0.0, 0.0
    for t, g in enumerate([0.3, -1.2, 0.5, 2.0], start=1):
        adam_step(p, [np.array([g])], state, lr=1e-2)
        g = g + 1e-4 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 1e-2 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p[0][0] == pytest.approx(x, abs=1e-15)
    assert state.step == 4


def test_sgd_scalar_recurrence():
    p, state = [np.array([2.0])], sgd_state()
    sgd_momentum_step(p, [np.array([1.0])], state, lr=0.1)
    sgd_momentum_step(p, [np.array([0.5])], state, lr=0.1)
    # v1 = 1, x1 = 1.9; v2 = 0.9 + 0.5 = 1.4, x2 = 1.9 - 0.14
    assert p[0][0] == pytest.approx(1.76, abs=1e-15)


def test_sgd_without_momentum_is_gradient_descent(rng):
    x, g = rng.standard_normal(5), rng.standard_normal(5)
    p = [x.copy()]
    sgd_momentum_step(p, [g], sgd_state(momentum=0.0), lr=0.3)
    np.testing.assert_array_equal(p[0], x - 0.3 * g)


@pytest.mark.parametrize("make", [adam_state, sgd_state])
def test_zero_gradient_and_zero_lr_are_no_ops(make, rng):
    x = rng.standard_normal((3, 4))
    p = [x.copy()]
    step = adam_step if make is adam_state else sgd_momentum_step
    step(p, [np.zeros_like(x)], make(), lr=0.1)
    np.testing.assert_array_equal(p[0], x)
    step(p, [rng.standard_normal(x.shape)], make(), lr=0.0)
    np.testing.assert_array_equal(p[0], x)


def test_identical_tensors_evolve_identically(rng):
    x = rng.standard_normal(6)
    p, state = [x.copy(), x.copy()], adam_state(wd=1e-4)
    for _ in range(5):
        g = rng.standard_normal(6)
        adam_step(p, [g, g.copy()], state)
    np.testing.assert_array_equal(p[0], p[1])


def test_optimizer_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([np.zeros(3)], [np.zeros(4)], adam_state())
    with pytest.raises(ShapeError):
        sgd_momentum_step([np.zeros(3)], [], sgd_state())


def test_schedule_examples():
    exp = ScheduleSpec("exponential", 1e-3, rate=0.98)
    assert schedule_lr(exp, 0) == 1e-3
    assert schedule_lr(exp, 10) == pytest.approx(8.171e-4, abs=5e-8)
    step = ScheduleSpec("multistep", 0.1, milestones=(60, 120, 160, 200), factor=0.2)
    assert schedule_lr(step, 130) == pytest.approx(0.004, abs=1e-15)
    assert schedule_lr(step, 59) == 0.1 and schedule_lr(step, 200) == pytest.approx(0.1 * 0.2**4)


def test_schedule_matches_closed_form_at_random_epochs(rng):
    exp = ScheduleSpec("exponential", 1e-3, rate=0.98)
    step = ScheduleSpec("multistep", 0.1, milestones=(60, 120, 160, 200), factor=0.2)
    for e in rng.integers(0, 10_000, 1000):
        e = int(e)
        assert schedule_lr(exp, e) == 1e-3 * 0.98**e
        assert schedule_lr(step, e) == 0.1 * 0.2 ** sum(e >= m for m in (60, 120, 160, 200))
        assert schedule_lr(step, e) == schedule_lr(step, e)


def test_schedule_validation():
    for kwargs in (dict(kind="cosine"), dict(rate=1.0), dict(base_lr=0.0),
                   dict(kind="multistep", milestones=(5, 5)), dict(kind="multistep", factor=1.5)):
        with pytest.raises(ConfigError):
            ScheduleSpec(**kwargs)
    with pytest.raises(ValueError):
        schedule_lr(ScheduleSpec(), -1)


def test_noop_augmentation_is_identity(rng):
    img, mask = rng.uniform(0, 1, (3, 12, 10)), (rng.uniform(size=(1, 12, 10)) > 0.5).astype(float)
    out_img, out_mask = apply_augment(img, mask, AugmentParams(0.0, 1.0, (0, 0, 12, 10), False))
    np.testing.assert_array_equal(out_img, img)
    np.testing.assert_array_equal(out_mask, mask)


def test_flip_is_an_involution(rng):
    img, mask = rng.uniform(0, 1, (3, 8, 8)), (rng.uniform(size=(1, 8, 8)) > 0.5).astype(float)
    flip = AugmentParams(flip=True)
    twice = apply_augment(*apply_augment(img, mask, flip), flip)
    np.testing.assert_array_equal(twice[0], img)
    np.testing.assert_array_equal(twice[1], mask)


@given(seed=st.integers(0, 2**32 - 1))
def test_augmented_mask_stays_binary(seed):
    rng = np.random.default_rng(seed)
    img, mask = rng.uniform(0, 1, (3, 16, 16)), (rng.uniform(size=(1, 16, 16)) > 0.5).astype(float)
    out_img, out_mask = augment_sod(img, mask, rng)
    assert out_img.shape == img.shape and out_mask.shape == mask.shape
    assert set(np.unique(out_mask)) <= {0.0, 1.0}
    assert out_img.min() >= 0 and out_img.max() <= 1


def test_cifar_augmentation_preserves_shape(rng):
    x = rng.uniform(0, 1, (5, 3, 32, 32))
    out = augment_cifar(x, np.random.default_rng(3))
    assert out.shape == x.shape
    np.testing.assert_array_equal(out, augment_cifar(x, np.random.default_rng(3)))


def test_prefetcher_keeps_order():
    assert [b for b in Prefetcher(lambda i: i * i, 7, depth=2)] == [i * i for i in range(7)]


def test_prefetcher_reraises_worker_errors():
    def boom(i):
        if i == 2:
            raise RuntimeError("bad batch")
        return i

    with pytest.raises(RuntimeError, match="bad batch"):
        list(Prefetcher(boom, 5))


def test_recipe_json_round_trip(tmp_path):
    for recipe in (Recipe.sod_default(), Recipe.classifier_default(), packaged_recipe("sod"), packaged_recipe("cifar")):
        assert Recipe.from_dict(json.loads(recipe.to_json())) == recipe
    path = tmp_path / "r.json"
    path.write_text(json.dumps({"lr": 0.01, "epochs": 3, "schedule": {"kind": "constant"}}))
    r = load_recipe(path)
    assert r.schedule.base_lr == 0.01 and r.epochs == 3
    path.write_text(json.dumps({"learning_rate": 0.01}))
    with pytest.raises(ConfigError, match="learning_rate"):
        load_recipe(path)


def test_packaged_recipes_follow_published_settings():
    sod, cifar = packaged_recipe("sod"), packaged_recipe("cifar")
    assert (sod.optimizer, sod.lr, sod.weight_decay, sod.batch_size, sod.epochs) == ("adam", 1e-3, 1e-4, 8, 200)
    assert (sod.beta1, sod.beta2, sod.schedule.kind, sod.schedule.rate) == (0.9, 0.999, "exponential", 0.98)
    assert (cifar.optimizer, cifar.lr, cifar.batch_size, cifar.epochs) == ("sgd-momentum", 0.1, 128, 240)
    assert cifar.schedule.milestones == (60, 120, 160, 200) and cifar.schedule.factor == 0.2
    assert cifar.scaled_to(30).schedule.milestones == (8, 15, 20, 25)


def quick_recipe(**kw):
    base = dict(lr=5e-3, schedule=ScheduleSpec("constant", 5e-3), batch_size=4, epochs=2,
                strict_deterministic=True, seed=7)
    base.update(kw)
    return Recipe(**base)


def test_sod_training_is_deterministic(tiny_config):
    x, y = synthetic_sod(6, 32, seed=1)
    runs = []
    for _ in range(2):
        net = build_sod_network(tiny_config, seed=3)
        res = train_sod(net, x, y, quick_recipe())
        runs.append((res.step_losses, [p.value.copy() for p in net.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_sod_history_and_checkpoints(tiny_config, tmp_path):
    x, y = synthetic_sod(5, 32, seed=2)
    net = build_sod_network(tiny_config)
    res = train_sod(net, x, y, quick_recipe(epochs=3, checkpoint_every=2, augment=False), checkpoint_dir=tmp_path)
    assert len(res.epoch_losses) == 3 and res.steps == 6
    assert (tmp_path / "best.lmfk").exists() and (tmp_path / "last.lmfk").exists()
    assert read_checkpoint(tmp_path / "best.lmfk").extra["epoch"] == res.best_epoch
    capped = train_sod(build_sod_network(tiny_config), x, y, quick_recipe(epochs=10, max_steps=3))
    assert capped.steps == 3 and len(capped.epoch_losses) == 2


def test_sod_training_rejects_bad_input(tiny_config):
    net = build_sod_network(tiny_config)
    x, y = synthetic_sod(2, 32)
    with pytest.raises(ConfigError):
        train_sod(net, x[:0], y[:0], quick_recipe())
    with pytest.raises(ShapeError):
        train_sod(net, x, y[:1], quick_recipe())
    x[1, 0, 3, 3] = np.nan
    with pytest.raises(NumericalError, match="batch 0"):
        train_sod(net, x, y, quick_recipe(augment=False))


def test_loss_descends_over_windows(tiny_config):
    """Full-batch training on a fixed fixture: every 50-step window after warmup ends lower than it starts."""
    x, y = synthetic_sod(4, 32, seed=11)
    good = 0
    trials = 10
    for seed in range(trials):
        net = build_sod_network(tiny_config, seed=seed)
        losses = train_sod(net, x, y, quick_recipe(epochs=96, augment=False, seed=seed)).step_losses
        good += all(losses[t + 50] <= losses[t] for t in range(16, len(losses) - 50))
    assert good >= math.ceil(0.95 * trials)


def test_softmax_cross_entropy(rng):
    logits = rng.standard_normal((4, 5))
    labels = np.array([0, 4, 2, 2])
    loss, grad = softmax_cross_entropy(logits, labels)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert loss == pytest.approx(-np.mean(np.log(p[np.arange(4), labels])), abs=1e-12)
    eps = 1e-6
    for i, j in [(0, 0), (1, 3), (3, 2)]:
        lp, lm = logits.copy(), logits.copy()
        lp[i, j] += eps
        lm[i, j] -= eps
        num = (softmax_cross_entropy(lp, labels)[0] - softmax_cross_entropy(lm, labels)[0]) / (2 * eps)
        assert abs(num - grad[i, j]) < 1e-8
    with pytest.raises(LabelRangeError):
        softmax_cross_entropy(logits, np.array([0, 5, 1, 1]))


@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 10))
def test_topk_is_monotone_in_k(seed, k):
    rng = np.random.default_rng(seed)
    logits, labels = rng.standard_normal((20, 10)), rng.integers(0, 10, 20)
    assert topk_accuracy(logits, labels, k) >= topk_accuracy(logits, labels, 1)
    assert topk_accuracy(logits, labels, 10) == 1.0


def test_random_logits_score_chance(rng):
    n = 20_000
    acc = topk_accuracy(rng.standard_normal((n, 10)), rng.integers(0, 10, n), 1)
    assert abs(acc - 0.1) < 4 * math.sqrt(0.09 / n)


def test_classifier_training_records_accuracy():
    images, labels = synthetic_cifar(24, seed=4)
    x = images / 255.0
    net = build_classifier(packaged_config("tiny_classifier"))
    recipe = Recipe.classifier_default(lr=0.05, batch_size=8, epochs=2, strict_deterministic=True,
                                       schedule=ScheduleSpec("constant", 0.05))
    res = train_classifier(net, x, labels, recipe, eval_images=x[:8], eval_labels=labels[:8])
    assert len(res.train_top1) == len(res.eval_top1) == 2
    assert all(t5 >= t1 for t1, t5 in zip(res.train_top1, res.train_top5))
    with pytest.raises(LabelRangeError):
        train_classifier(net, x, np.where(labels == 0, 10, labels), recipe)


def test_checkpoint_round_trip_is_bitwise(tiny_config, tmp_path, rng):
    net = build_sod_network(tiny_config, seed=5)
    x, y = synthetic_sod(4, 32)
    train_sod(net, x, y, quick_recipe(epochs=1, augment=False))
    opt = quick_recipe().make_optimizer(net.parameters())
    opt.step()
    save_checkpoint(tmp_path / "c.lmfk", net, opt.state, {"note": "hi"})
    back, ckpt = load_checkpoint(tmp_path / "c.lmfk")
    for (na, a), (nb, b) in zip(net.named_parameters(), back.named_parameters()):
        assert na == nb and np.array_equal(a.value, b.value)
    for (_, a), (_, b) in zip(net.named_buffers(), back.named_buffers()):
        assert np.array_equal(a, b)
    net.eval()
    back.eval()
    probe = rng.uniform(0, 1, (2, 3, 32, 32))
    assert np.array_equal(net.forward(probe), back.forward(probe))
    assert ckpt.extra == {"note": "hi"} and ckpt.optimizer.step == 1
    for a, b in zip(opt.state.buffers["m"], ckpt.optimizer.buffers["m"]):
        assert np.array_equal(a, b)


def test_classifier_checkpoint_round_trip(tmp_path, rng):
    net = build_classifier(packaged_config("tiny_classifier"), num_classes=7)
    save_checkpoint(tmp_path / "c.lmfk", net)
    back, _ = load_checkpoint(tmp_path / "c.lmfk")
    net.eval()
    back.eval()
    x = rng.uniform(0, 1, (3, 3, 32, 32))
    assert back.num_classes == 7 and np.array_equal(net.forward(x), back.forward(x))


def test_damaged_checkpoints_are_rejected(tiny_config):
    data = checkpoint_bytes(build_sod_network(tiny_config))
    for cut in (0, 3, 9, 40, len(data) // 2, len(data) - 1):
        with pytest.raises(TruncatedError):
            parse_checkpoint(data[:cut])
    with pytest.raises(BadMagicError):
        parse_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(VersionError):
        parse_checkpoint(data[:4] + b"\x02\x00" + data[6:])
    with pytest.raises(ParseError):
        parse_checkpoint(data + b"\x00")


def test_mismatched_checkpoint_leaves_network_untouched(tiny_config, tmp_path):
    save_checkpoint(tmp_path / "c.lmfk", build_sod_network(tiny_config, seed=1))
    d = tiny_config.to_dict()
    d["encoder"][1]["out_channels"] = 12
    from lmfnet.network import NetworkConfig

    other = build_sod_network(NetworkConfig.from_dict(d), seed=2)
    before = [p.value.copy() for p in other.parameters()]
    with pytest.raises(CheckpointMismatchError, match=r"^tensor F2\.branch0\.pw\.weight: checkpoint shape"):
        load_into(other, tmp_path / "c.lmfk")
    assert all(np.array_equal(a, p.value) for a, p in zip(before, other.parameters()))
