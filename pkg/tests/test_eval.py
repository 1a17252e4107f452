import itertools

import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from comotion.evaluate import (
    config_fingerprint,
    mann_whitney_u,
    mse,
)


def test_mse_identical_is_zero():
    x = np.random.default_rng(0).standard_normal((7, 20))
    assert mse(x, x) == 0.0


def test_mse_constant_offset():
    rng = np.random.default_rng(1)
    gt = rng.standard_normal((5, 12))
    assert mse(gt + 0.3, gt) == pytest.approx(0.09, abs=1e-12)


def test_mse_matches_triple_loop_oracle():
    rng = np.random.default_rng(2)
    pred = rng.standard_normal((4, 5, 3))
    gt = rng.standard_normal((4, 5, 3))
    total = 0.0
    count = 0
    for t in range(4):
        for f in range(5):
            for j in range(3):
                total += (pred[t, f, j] - gt[t, f, j]) ** 2
                count += 1
    assert mse(pred, gt) == pytest.approx(total / count, abs=1e-12)


def test_mse_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        mse(np.zeros((2, 3)), np.zeros((3, 2)))


def test_mse_permutation_equivariant_over_trajectories():
    rng = np.random.default_rng(3)
    preds = [rng.standard_normal((6, 4)) for _ in range(5)]
    gts = [rng.standard_normal((6, 4)) for _ in range(5)]
    vals = [mse(p, g) for p, g in zip(preds, gts)]
    perm = [3, 1, 4, 0, 2]
    vals_perm = [mse(preds[i], gts[i]) for i in perm]
    assert vals_perm == [vals[i] for i in perm]


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------


def test_mw_identical_lists_give_one():
    a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
    assert mann_whitney_u(a, list(a)) == pytest.approx(1.0, abs=0.05)


def test_mw_exact_separated_triplets():
    p = mann_whitney_u([1.0, 2.0, 3.0], [10.0, 11.0, 12.0])
    assert p == pytest.approx(0.1, abs=1e-12)


def test_mw_exact_matches_enumeration_oracle():
    rng = np.random.default_rng(4)
    a = rng.standard_normal(4)
    b = rng.standard_normal(5) + 0.5
    pooled = np.concatenate([a, b])
    ranks = np.argsort(np.argsort(pooled)) + 1.0

    def u_min(idx):
        r = sum(ranks[i] for i in idx)
        u1 = r - len(a) * (len(a) + 1) / 2
        return min(u1, len(a) * len(b) - u1)

    obs = u_min(range(len(a)))
    hits = sum(
        1
        for comb in itertools.combinations(range(9), 4)
        if u_min(comb) <= obs + 1e-12
    )
    expected = hits / 126
    assert mann_whitney_u(a, b) == pytest.approx(expected, abs=1e-12)


def test_mw_shift_invariance():
    rng = np.random.default_rng(5)
    a = rng.standard_normal(10)
    b = rng.standard_normal(12) + 0.8
    assert mann_whitney_u(a, b) == pytest.approx(
        mann_whitney_u(a + 100.0, b + 100.0), abs=1e-12
    )


def test_mw_normal_branch_matches_scipy():
    rng = np.random.default_rng(6)
    for _ in range(5):
        a = rng.standard_normal(15)
        b = rng.standard_normal(20) + rng.uniform(0, 1)
        ours = mann_whitney_u(a, b)
        ref = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic").pvalue
        assert ours == pytest.approx(ref, rel=1e-9)


def test_mw_exact_branch_matches_scipy_without_ties():
    rng = np.random.default_rng(7)
    a = rng.standard_normal(5)
    b = rng.standard_normal(6) + 0.3
    ours = mann_whitney_u(a, b)
    ref = mannwhitneyu(a, b, alternative="two-sided", method="exact").pvalue
    assert ours == pytest.approx(ref, abs=1e-12)


def test_mw_degenerate_all_equal():
    assert mann_whitney_u([2.0] * 5, [2.0] * 5) == 1.0


def test_mw_requires_three_per_sample():
    with pytest.raises(ValueError, match="at least 3"):
        mann_whitney_u([1.0, 2.0], [1.0, 2.0, 3.0])


def test_mw_detects_strong_separation_large_n():
    rng = np.random.default_rng(8)
    a = rng.standard_normal(30)
    b = rng.standard_normal(30) + 3.0
    assert mann_whitney_u(a, b) < 1e-6


# ---------------------------------------------------------------------------
# fingerprints
# ---------------------------------------------------------------------------


def test_fingerprint_depends_on_config_and_seed():
    cfg = {"dataset": "x", "train": {"epochs": 3}}
    f1 = config_fingerprint(cfg, 0)
    f2 = config_fingerprint(cfg, 1)
    f3 = config_fingerprint({**cfg, "train": {"epochs": 4}}, 0)
    assert f1 != f2 and f1 != f3
    assert f1 == config_fingerprint({"train": {"epochs": 3}, "dataset": "x"}, 0)
