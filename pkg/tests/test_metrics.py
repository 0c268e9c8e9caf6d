import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmfnet.dataio import save_image
from lmfnet.errors import DatasetError, ShapeError
from lmfnet.metrics import (
    BETA2,
    N_THRESHOLDS,
    e_curve,
    e_measure,
    evaluate_dataset,
    evaluate_pairs,
    f_beta,
    mae,
    pr_f_curves,
    s_measure,
    s_object,
    s_region,
)
from oracles import brute_e, brute_pr, scalar_s_measure


def random_pair(rng, shape=(8, 8), quantized=False):
    s = rng.uniform(0, 1, shape)
    if quantized:
        s = np.round(s * 255) / 255
    g = (rng.uniform(size=shape) > 0.6).astype(float)
    return s, g


def test_mae_examples(rng):
    g = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    assert mae(g, g) == 0
    assert mae(np.full((4, 4), 0.5), g) == 0.5
    s = np.linspace(0.25, 1.0, 16).reshape(4, 4)
    expected = sum(abs(a - b) for a, b in zip(s.ravel(), g.ravel())) / 16
    assert abs(mae(s, g) - expected) < 1e-12


def test_input_validation():
    with pytest.raises(ShapeError):
        mae(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError, match="binary"):
        mae(np.zeros((4, 4)), np.full((4, 4), 0.5))
    with pytest.raises(DatasetError):
        evaluate_pairs([])


def test_curves_match_brute_force(rng):
    for _ in range(4):
        s, g = random_pair(rng, (4, 4))
        p, r, f = pr_f_curves(s, g)
        bp, br = brute_pr(s, g)
        np.testing.assert_array_equal(p, bp)
        np.testing.assert_array_equal(r, br)
        np.testing.assert_allclose(f, f_beta(bp, br), rtol=0, atol=1e-15)
        np.testing.assert_allclose(e_curve(s, g), brute_e(s, g), rtol=0, atol=1e-12)


def test_two_pair_dataset_curves(rng):
    pairs = [random_pair(rng, (4, 4)) for _ in range(2)]
    rep = evaluate_pairs(pairs)
    bp = np.mean([brute_pr(s, g)[0] for s, g in pairs], axis=0)
    br = np.mean([brute_pr(s, g)[1] for s, g in pairs], axis=0)
    np.testing.assert_allclose(rep.precision, bp, rtol=0, atol=1e-15)
    np.testing.assert_allclose(rep.recall, br, rtol=0, atol=1e-15)
    assert rep.max_f == pytest.approx(np.max(f_beta(bp, br)), abs=1e-15)


def test_f_of_equal_precision_and_recall():
    r = np.linspace(0, 1, 11)
    np.testing.assert_allclose(f_beta(r, r), r, atol=1e-15)
    assert BETA2 == 0.3


def test_perfect_prediction(rng):
    _, g = random_pair(rng)
    rep = evaluate_pairs([(g, g)])
    assert rep.max_f == 1 and rep.mae == 0
    assert rep.max_e == pytest.approx(1.0, abs=1e-12) and rep.s_m == pytest.approx(1.0, abs=1e-12)
    p, r, _ = pr_f_curves(g, g)
    assert np.any((p == 1) & (r == 1))


def test_e_measure_conventions():
    g = np.zeros((4, 4))
    g[:, :2] = 1
    assert e_measure(g, g) == pytest.approx(1.0)
    assert abs(e_curve(1 - g, g)[128]) < 1e-12
    z = np.zeros((4, 4))
    assert e_measure(z, z) == 1.0
    assert e_curve(np.ones((4, 4)) * 0.2, np.ones((4, 4)))[200] == 0.0


def test_s_measure_conventions(rng):
    _, g = random_pair(rng)
    assert s_measure(g, g) == pytest.approx(1.0, abs=1e-12)
    z = np.zeros((5, 5))
    assert s_measure(z, z) == 1.0
    s = rng.uniform(0, 1, (5, 5))
    assert s_measure(s, z) == pytest.approx(1 - s.mean())
    assert s_measure(s, np.ones((5, 5))) == pytest.approx(s.mean())


def test_s_measure_is_mean_of_parts(rng):
    g = np.zeros((8, 8))
    g[2:6, 3:7] = 1
    s = np.clip(g * 0.8 + rng.uniform(0, 0.3, (8, 8)), 0, 1)
    parts = 0.5 * s_object(s, g) + 0.5 * s_region(s, g)
    assert abs(s_measure(s, g) - parts) < 1e-12


@given(seed=st.integers(0, 2**32 - 1), h=st.integers(2, 9), w=st.integers(2, 9), p=st.floats(0, 1))
def test_s_measure_matches_loop_oracle(seed, h, w, p):
    rng = np.random.default_rng(seed)
    s, g = rng.uniform(0, 1, (h, w)), (rng.uniform(size=(h, w)) < p).astype(float)
    assert abs(s_measure(s, g) - scalar_s_measure(s, g)) < 1e-10


@settings(max_examples=60)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(2, 9), w=st.integers(2, 9))
def test_metrics_stay_in_unit_interval(seed, h, w):
    s, g = random_pair(np.random.default_rng(seed), (h, w))
    rep = evaluate_pairs([(s, g)])
    for v in (rep.mae, rep.max_f, rep.max_e, rep.s_m):
        assert 0 <= v <= 1
    for curve in (rep.precision, rep.recall, rep.f_curve, rep.e_curve):
        assert curve.shape == (256,) and np.all((curve >= 0) & (curve <= 1 + 1e-12))


@given(seed=st.integers(0, 2**32 - 1))
def test_mae_complement_symmetry(seed):
    s, g = random_pair(np.random.default_rng(seed))
    assert mae(s, g) == pytest.approx(mae(1 - s, 1 - g), abs=1e-15)


@given(seed=st.integers(0, 2**32 - 1))
def test_curves_survive_threshold_preserving_rescale(seed):
    # 8-bit maps sit at least 7.6e-6 away from every threshold
    s, g = random_pair(np.random.default_rng(seed), quantized=True)
    base = pr_f_curves(s, g)
    for factor in (1.0, 1 - 5e-6):
        for a, b in zip(base, pr_f_curves(s * factor, g)):
            np.testing.assert_array_equal(a, b)


def write_set(root, maps):
    root.mkdir()
    for name, m in maps.items():
        save_image(m, root / f"{name}.pgm")


def test_dataset_against_itself(tmp_path, rng):
    gts = {f"img{i}": random_pair(rng)[1] for i in range(3)}
    write_set(tmp_path / "gt", gts)
    rep = evaluate_dataset(tmp_path / "gt", tmp_path / "gt")
    assert rep.mae == 0 and rep.max_f == 1 and rep.count == 3
    assert rep.s_m == pytest.approx(1.0, abs=1e-12)
    assert rep.names == ["img0", "img1", "img2"]


def test_dataset_is_mean_of_single_reports(tmp_path, rng):
    pairs = {f"p{i}": random_pair(rng, quantized=True) for i in range(3)}
    write_set(tmp_path / "pred", {k: v[0] for k, v in pairs.items()})
    write_set(tmp_path / "gt", {k: v[1] for k, v in pairs.items()})
    rep = evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
    singles = [evaluate_pairs([pairs[k]]) for k in sorted(pairs)]
    assert rep.mae == pytest.approx(np.mean([r.mae for r in singles]), abs=1e-12)
    assert rep.s_m == pytest.approx(np.mean([r.s_m for r in singles]), abs=1e-12)
    np.testing.assert_allclose(rep.precision, np.mean([r.precision for r in singles], axis=0), atol=1e-12)
    np.testing.assert_allclose(rep.e_curve, np.mean([r.e_curve for r in singles], axis=0), atol=1e-12)
    lines = rep.curves_csv().splitlines()
    assert lines[0] == "threshold,precision,recall,f" and len(lines) == 257


def test_dataset_names_unmatched_files(tmp_path, rng):
    write_set(tmp_path / "pred", {"a": random_pair(rng)[0], "stray": random_pair(rng)[0]})
    write_set(tmp_path / "gt", {"a": random_pair(rng)[1], "lonely": random_pair(rng)[1]})
    with pytest.raises(DatasetError, match="stray") as err:
        evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
    assert "lonely" in str(err.value)


def test_dataset_rejects_soft_ground_truth(tmp_path, rng):
    write_set(tmp_path / "pred", {"a": random_pair(rng)[0]})
    write_set(tmp_path / "gt", {"a": np.full((8, 8), 0.5)})
    with pytest.raises(DatasetError, match="binary"):
        evaluate_dataset(tmp_path / "pred", tmp_path / "gt")
