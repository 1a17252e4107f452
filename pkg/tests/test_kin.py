import numpy as np
import pytest

from comotion.kin import (
    KinematicChain,
    Joint,
    default_arm_chain,
    fk,
    fk_points,
    fk_pose,
    ik_baseline,
    ik_with_prior,
    jacobian,
    load_chain,
    planar_chain,
    rotation_about,
    translation,
)


def test_fk_two_link_extended():
    c = planar_chain((1.0, 1.0))
    np.testing.assert_allclose(fk(c, [0.0, 0.0]), [2.0, 0.0, 0.0], atol=1e-12)


def test_fk_two_link_quarter_turn():
    c = planar_chain((1.0, 1.0))
    np.testing.assert_allclose(fk(c, [np.pi / 2, 0.0]), [0.0, 2.0, 0.0], atol=1e-12)


def test_fk_matches_explicit_matrix_product():
    chain = default_arm_chain()
    rng = np.random.default_rng(0)
    lo, hi = chain.limits
    for _ in range(10):
        q = rng.uniform(lo, hi)
        t = chain.base.copy()
        for joint, qi in zip(chain.joints, q):
            t = t @ joint.offset @ rotation_about(joint.axis, qi)
        t = t @ chain.tool
        np.testing.assert_allclose(fk(chain, q), t[:3, 3], atol=1e-12)
        np.testing.assert_allclose(fk_pose(chain, q), t, atol=1e-12)


def test_fk_association_order_independent():
    rng = np.random.default_rng(1)
    for _ in range(5):
        joints = tuple(
            Joint(
                translation(rng.uniform(-0.3, 0.3, 3)),
                np.eye(3)[rng.integers(0, 3)],
                -np.pi,
                np.pi,
            )
            for _ in range(4)
        )
        chain = KinematicChain(joints, np.eye(4), translation([0.1, 0, 0]))
        q = rng.uniform(-1, 1, 4)
        mats = [chain.base] + [j.transform(qi) for j, qi in zip(chain.joints, q)] + [chain.tool]
        left = mats[0]
        for m in mats[1:]:
            left = left @ m
        right = mats[-1]
        for m in mats[-2::-1]:
            right = m @ right
        np.testing.assert_allclose(left, right, atol=1e-12)
        np.testing.assert_allclose(fk(chain, q), left[:3, 3], atol=1e-12)


def test_fk_clamps_out_of_limit():
    chain = default_arm_chain()
    lo, hi = chain.limits
    over = hi + 1.0
    np.testing.assert_allclose(fk(chain, over), fk(chain, hi), atol=1e-12)


def test_joint_requires_unit_axis():
    with pytest.raises(ValueError, match="unit"):
        Joint(np.eye(4), np.array([1.0, 1.0, 0.0]), -1.0, 1.0)


def test_ik_already_solved_returns_init():
    c = planar_chain((1.0, 1.0))
    q0 = np.array([0.4, -0.7])
    sol = ik_baseline(c, fk(c, q0), q0)
    np.testing.assert_allclose(sol.q, q0, atol=1e-12)
    assert sol.residual < 1e-10
    assert sol.iterations <= 1 and sol.converged


def test_ik_reachable_targets_converge():
    rng = np.random.default_rng(2)
    for chain in (planar_chain((1.0, 1.0)), default_arm_chain()):
        lo, hi = chain.limits
        for _ in range(25):
            target = fk(chain, rng.uniform(lo, hi))
            sol = ik_baseline(chain, target)
            assert sol.residual < 1e-4
            np.testing.assert_allclose(fk(chain, sol.q), target, atol=2e-4)


def test_ik_unreachable_reports_gap():
    c = planar_chain((1.0, 1.0))
    sol = ik_baseline(c, [3.0, 0.0, 0.0])
    assert not sol.converged
    assert sol.residual == pytest.approx(1.0, abs=1e-3)


def test_ik_rejects_non_finite_target():
    with pytest.raises(ValueError, match="finite"):
        ik_baseline(planar_chain(), [np.nan, 0.0, 0.0])


def test_ik_prior_consistent_target_is_fixed_point():
    chain = default_arm_chain()
    mu_q = np.array([0.3, 0.2, -0.5, 1.0])
    sol = ik_with_prior(chain, fk(chain, mu_q), mu_q)
    np.testing.assert_array_equal(sol.q, mu_q)
    assert sol.iterations == 0 and sol.converged


def test_ik_prior_dominates_at_huge_lambda_q():
    chain = default_arm_chain()
    mu_q = np.array([0.3, 0.2, -0.5, 1.0])
    target = fk(chain, mu_q) + np.array([0.08, 0.0, 0.0])
    sol = ik_with_prior(chain, target, mu_q, 1.0, 1e9)
    assert np.abs(sol.q - mu_q).max() < 1e-4


def test_ik_prior_matches_grid_search_oracle():
    chain = planar_chain((1.0, 1.0))
    rng = np.random.default_rng(3)
    lo, hi = chain.limits
    n = 1000  # 10^6 grid points over the 2-d joint box
    g1 = np.linspace(lo[0], hi[0], n)
    g2 = np.linspace(lo[1], hi[1], n)
    pos_l1 = np.stack([np.cos(g1), np.sin(g1)], axis=1)
    for _ in range(10):
        mu_q = rng.uniform(lo, hi)
        target = fk(chain, rng.uniform(lo, hi))[:2] + rng.normal(0, 0.1, 2)
        lam_x, lam_q = 1.0, 0.01
        sol = ik_with_prior(chain, [target[0], target[1], 0.0], mu_q, lam_x, lam_q)
        obj = lam_x * sol.residual**2 + lam_q * float(((sol.q - mu_q) ** 2).sum())
        # vectorized objective over the full grid
        ang = g1[:, None] + g2[None, :]
        ee_x = pos_l1[:, 0][:, None] + np.cos(ang)
        ee_y = pos_l1[:, 1][:, None] + np.sin(ang)
        task = (ee_x - target[0]) ** 2 + (ee_y - target[1]) ** 2
        prior = (g1[:, None] - mu_q[0]) ** 2 + (g2[None, :] - mu_q[1]) ** 2
        best = float((lam_x * task + lam_q * prior).min())
        assert obj <= best + 1e-3


def test_ik_prior_lambda_q_zero_matches_baseline_residual():
    chain = planar_chain((1.0, 1.0))
    rng = np.random.default_rng(4)
    lo, hi = chain.limits
    for _ in range(10):
        target = fk(chain, rng.uniform(lo, hi))
        base = ik_baseline(chain, target)
        prior = ik_with_prior(chain, target, rng.uniform(lo, hi), 1.0, 0.0, grad_tol=1e-9)
        assert abs(base.residual - prior.residual) < 1e-4


def test_ik_prior_rejects_negative_weights():
    with pytest.raises(ValueError, match="non-negative"):
        ik_with_prior(planar_chain(), [1.0, 0.0, 0.0], [0.0, 0.0], -1.0, 0.01)


def test_jacobian_matches_analytic_planar():
    c = planar_chain((1.0, 1.0))
    q = np.array([0.3, 0.8])
    jac = jacobian(c, q)
    s1, c1 = np.sin(q[0]), np.cos(q[0])
    s12, c12 = np.sin(q.sum()), np.cos(q.sum())
    expected = np.array(
        [[-s1 - s12, -s12], [c1 + c12, c12], [0.0, 0.0]]
    )
    np.testing.assert_allclose(jac, expected, atol=1e-8)


def test_fk_points_ends_at_fk():
    chain = default_arm_chain()
    q = np.array([0.2, -0.1, 0.4, 1.2])
    pts = fk_points(chain, q)
    np.testing.assert_allclose(pts[-1], fk(chain, q), atol=1e-12)
    assert pts.shape == (5, 3)


def test_chain_json_round_trip(tmp_path):
    chain = default_arm_chain()
    doc = {
        "joints": [
            {
                "offset": {"translation": j.offset[:3, 3].tolist()},
                "axis": j.axis.tolist(),
                "limits": [j.lo, j.hi],
            }
            for j in chain.joints
        ],
        "tool": {"translation": chain.tool[:3, 3].tolist()},
    }
    import json

    p = tmp_path / "chain.json"
    p.write_text(json.dumps(doc))
    loaded = load_chain(p)
    q = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_allclose(fk(loaded, q), fk(chain, q), atol=1e-12)
