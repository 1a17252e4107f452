"""Serial-chain forward kinematics and two position-only IK solvers.

A chain is an ordered list of revolute joints, each a fixed offset
transform followed by a rotation about a unit axis, with a final tool
transform. IK is damped least squares (Levenberg-Marquardt style
adaptation) on a numerical Jacobian; the prior-regularized variant trades
task-space error against distance to a preferred joint configuration.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation as a 4x4 homogeneous transform."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    t = np.eye(4)
    t[:3, :3] = [
        [x * x * C + c, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, y * y * C + c, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, z * z * C + c],
    ]
    return t


def translation(xyz) -> np.ndarray:
    t = np.eye(4)
    t[:3, 3] = xyz
    return t


@dataclass(frozen=True)
class Joint:
    offset: np.ndarray  # 4x4 fixed transform preceding the rotation
    axis: np.ndarray  # unit rotation axis
    lo: float
    hi: float

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"joint axis must be a unit vector, |axis|={n}")
        if not self.lo < self.hi:
            raise ValueError(f"joint limits [{self.lo}, {self.hi}] are empty")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))

    def transform(self, q: float) -> np.ndarray:
        return self.offset @ rotation_about(self.axis, q)


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple[Joint, ...]
    base: np.ndarray
    tool: np.ndarray

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([j.lo for j in self.joints])
        hi = np.array([j.hi for j in self.joints])
        return lo, hi

    def clamp(self, q: np.ndarray, warn: bool = False) -> np.ndarray:
        lo, hi = self.limits
        clamped = np.clip(q, lo, hi)
        if warn and not np.allclose(clamped, q):
            log.warning("joint vector clamped to limits: %s -> %s", q, clamped)
        return clamped

    @property
    def reach(self) -> float:
        """Upper bound on distance from base: sum of per-link offsets."""
        total = float(np.linalg.norm(self.tool[:3, 3]))
        for j in self.joints:
            total += float(np.linalg.norm(j.offset[:3, 3]))
        return total


def fk_pose(chain: KinematicChain, q) -> np.ndarray:
    """Full end-effector pose as a 4x4 homogeneous transform."""
    q = chain.clamp(np.asarray(q, dtype=np.float64), warn=True)
    if q.shape[0] != chain.n_joints:
        raise ValueError(f"expected {chain.n_joints} joint values, got {q.shape[0]}")
    t = chain.base.copy()
    for joint, qi in zip(chain.joints, q):
        t = t @ joint.transform(qi)
    return t @ chain.tool


def fk(chain: KinematicChain, q) -> np.ndarray:
    """End-effector position in meters."""
    return fk_pose(chain, q)[:3, 3]


def fk_points(chain: KinematicChain, q) -> np.ndarray:
    """Origins of every joint frame plus the end effector, shape (n+1, 3)."""
    q = chain.clamp(np.asarray(q, dtype=np.float64), warn=True)
    t = chain.base.copy()
    pts = []
    for joint, qi in zip(chain.joints, q):
        t = t @ joint.transform(qi)
        pts.append(t[:3, 3].copy())
    pts.append((t @ chain.tool)[:3, 3])
    return np.asarray(pts)


def jacobian(chain: KinematicChain, q: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical position Jacobian via central differences."""
    n = chain.n_joints
    jac = np.empty((3, n))
    for i in range(n):
        dq = np.zeros(n)
        dq[i] = h
        jac[:, i] = (_fk_unclamped(chain, q + dq) - _fk_unclamped(chain, q - dq)) / (2 * h)
    return jac


def _fk_unclamped(chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    t = chain.base.copy()
    for joint, qi in zip(chain.joints, q):
        t = t @ joint.transform(qi)
    return (t @ chain.tool)[:3, 3]


@dataclass
class IkSolution:
    q: np.ndarray
    residual: float
    iterations: int
    converged: bool


def ik_baseline(
    chain: KinematicChain,
    x_target,
    q_init=None,
    tol: float = 1e-4,
    max_iters: int = 200,
    restarts: int = 12,
) -> IkSolution:
    """Damped-least-squares IK toward a 3D position target.

    Stalls at kinematic folds (e.g. a fully extended start) are escaped by
    deterministic restarts sampled uniformly inside the joint box.
    """
    x_target = np.asarray(x_target, dtype=np.float64)
    if not np.all(np.isfinite(x_target)):
        raise ValueError("target position must be finite")
    q0 = chain.clamp(
        np.zeros(chain.n_joints) if q_init is None else np.asarray(q_init, dtype=np.float64)
    )
    best: IkSolution | None = None
    total_iters = 0
    restart_rng = np.random.default_rng(0)
    lo, hi = chain.limits
    for attempt in range(restarts + 1):
        start = q0 if attempt == 0 else restart_rng.uniform(lo, hi)
        sol = _dls_run(chain, x_target, start, tol, max_iters)
        total_iters += sol.iterations
        if best is None or sol.residual < best.residual:
            best = sol
        if best.converged:
            break
    return IkSolution(best.q, best.residual, total_iters, best.converged)


_MAX_STEP = 0.5  # radians; large unconstrained steps jump into limit traps


def _cap_step(step: np.ndarray) -> np.ndarray:
    biggest = np.abs(step).max()
    if biggest > _MAX_STEP:
        step = step * (_MAX_STEP / biggest)
    return step


def _dls_run(chain, x_target, q, tol, max_iters) -> IkSolution:
    r = _fk_unclamped(chain, q) - x_target
    res = float(np.linalg.norm(r))
    if res < tol:
        return IkSolution(q, res, 0, True)
    lam = 1e-3
    it = 0
    for it in range(1, max_iters + 1):
        jac = jacobian(chain, q)
        g = jac.T @ r
        if np.linalg.norm(g) < 1e-12:
            break
        jtj = jac.T @ jac
        improved = False
        while lam < 1e8:
            step = np.linalg.solve(jtj + lam * np.eye(chain.n_joints), -g)
            cand = chain.clamp(q + _cap_step(step))
            r_cand = _fk_unclamped(chain, cand) - x_target
            res_cand = float(np.linalg.norm(r_cand))
            if res_cand < res:
                q, r, res = cand, r_cand, res_cand
                lam = max(lam * 0.5, 1e-9)
                improved = True
                break
            lam *= 4.0
        if res < tol:
            return IkSolution(q, res, it, True)
        if not improved:
            break
    return IkSolution(q, res, it, False)


def ik_with_prior(
    chain: KinematicChain,
    x_target,
    mu_q,
    lambda_x: float = 1.0,
    lambda_q: float = 0.01,
    q_init=None,
    grad_tol: float = 1e-6,
    max_iters: int = 200,
    restarts: int = 8,
) -> IkSolution:
    """Minimize lambda_x ||x - f(q)||^2 + lambda_q ||mu_q - q||^2.

    Warm-started at the joint-space prior; accepted steps never increase
    the objective within a run. The objective has distinct basins (elbow
    branches), so deterministic restarts are taken and the lowest objective
    wins. ``residual`` reports the task-space error of the result.
    """
    if lambda_x < 0 or lambda_q < 0:
        raise ValueError("lambda weights must be non-negative")
    x_target = np.asarray(x_target, dtype=np.float64)
    mu_q = np.asarray(mu_q, dtype=np.float64)
    q0 = chain.clamp(mu_q if q_init is None else np.asarray(q_init, dtype=np.float64))
    restart_rng = np.random.default_rng(0)
    lo, hi = chain.limits
    best = None
    best_obj = np.inf
    total_iters = 0
    for attempt in range(restarts + 1):
        start = q0 if attempt == 0 else restart_rng.uniform(lo, hi)
        sol, obj = _prior_run(
            chain, x_target, mu_q, lambda_x, lambda_q, start, grad_tol, max_iters
        )
        total_iters += sol.iterations
        if obj < best_obj:
            best, best_obj = sol, obj
        if best_obj == 0.0:
            break
    return IkSolution(best.q, best.residual, total_iters, best.converged)


def _prior_run(
    chain, x_target, mu_q, lambda_x, lambda_q, q, grad_tol, max_iters
) -> tuple[IkSolution, float]:
    n = chain.n_joints

    def objective(qv):
        rx = _fk_unclamped(chain, qv) - x_target
        rq = qv - mu_q
        return lambda_x * float(rx @ rx) + lambda_q * float(rq @ rq), rx, rq

    obj, rx, rq = objective(q)
    if obj == 0.0:
        return IkSolution(q, 0.0, 0, True), 0.0
    lam = 1e-3
    it = 0
    for it in range(1, max_iters + 1):
        jac = jacobian(chain, q)
        g = 2.0 * (lambda_x * jac.T @ rx + lambda_q * rq)
        if np.linalg.norm(g) < grad_tol:
            return IkSolution(q, float(np.linalg.norm(rx)), it, True), obj
        h = 2.0 * (lambda_x * jac.T @ jac + lambda_q * np.eye(n))
        improved = False
        while lam < 1e8:
            step = np.linalg.solve(h + lam * np.eye(n), -g)
            cand = chain.clamp(q + _cap_step(step))
            obj_cand, rx_cand, rq_cand = objective(cand)
            if obj_cand < obj:
                q, obj, rx, rq = cand, obj_cand, rx_cand, rq_cand
                lam = max(lam * 0.5, 1e-9)
                improved = True
                break
            lam *= 4.0
        if not improved:
            break
    grad_ok = bool(
        np.linalg.norm(2.0 * (lambda_x * jacobian(chain, q).T @ rx + lambda_q * rq))
        < grad_tol
    )
    return IkSolution(q, float(np.linalg.norm(rx)), it, grad_ok), obj


# ---------------------------------------------------------------------------
# chain construction and serialization
# ---------------------------------------------------------------------------


def _transform_from_dict(d: dict | None) -> np.ndarray:
    if d is None:
        return np.eye(4)
    t = translation(d.get("translation", [0.0, 0.0, 0.0]))
    rot = d.get("rotation")
    if rot:
        t = t @ rotation_about(
            np.asarray(rot["axis"], dtype=np.float64), float(rot["angle"])
        )
    return t


def chain_from_dict(d: dict) -> KinematicChain:
    joints = tuple(
        Joint(
            _transform_from_dict(j.get("offset")),
            np.asarray(j["axis"], dtype=np.float64),
            float(j["limits"][0]),
            float(j["limits"][1]),
        )
        for j in d["joints"]
    )
    return KinematicChain(
        joints, _transform_from_dict(d.get("base")), _transform_from_dict(d.get("tool"))
    )


def load_chain(path: str | Path) -> KinematicChain:
    with open(path) as f:
        return chain_from_dict(json.load(f))


def default_arm_chain() -> KinematicChain:
    """The packaged 4-DoF arm (shoulder pitch/yaw/roll + elbow)."""
    text = resources.files("comotion").joinpath("chains/arm_4dof.json").read_text()
    return chain_from_dict(json.loads(text))


def planar_chain(lengths=(1.0, 1.0)) -> KinematicChain:
    """N-link planar chain in the xy plane, links along x, z rotation axes."""
    joints = []
    offset = np.eye(4)
    for length in lengths:
        joints.append(Joint(offset, np.array([0.0, 0.0, 1.0]), -np.pi, np.pi))
        offset = translation([length, 0.0, 0.0])
    return KinematicChain(tuple(joints), np.eye(4), offset)
