"""Levenberg-Marquardt least squares, dense and block-sparse (Schur complement).

Both solvers share one control loop and minimise cost = sum(r**2). The damped
normal equations are (J^T J + lam * diag(J^T J)) dx = -J^T r. Once lam has
decayed to ``gauss_newton_below`` the damping term is dropped and a plain
Gauss-Newton step is tried; a rejected step restarts damping from that cutoff.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import NumericFailureError, RankDeficiencyError

log = logging.getLogger(__name__)


@dataclass
class LmConfig:
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_iterations: int = 100
    cost_tolerance: float = 1e-10
    gradient_tolerance: float = 1e-12
    gauss_newton_below: float = 1e-4
    max_damping: float = 1e12
    jacobian: str = "analytic"
    fd_step: float = 1e-6


@dataclass
class LmReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    evaluations: int = 0
    costs: list = field(default_factory=list)

    def as_dict(self):
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "termination": self.termination,
            "evaluations": self.evaluations,
        }


def central_difference(fun, x, step=1e-6):
    """Jacobian of fun at x by central differences with relative step."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2 * h))
    return np.stack(cols, axis=-1)


class ResidualProblem:
    """Dense problem: residual(x) -> (M,), optional jacobian(x) -> (M, N).

    ``layout`` lists (name, size) parameter blocks and is used to name
    unconstrained parameters in error messages.
    """

    def __init__(self, residual: Callable, jacobian: Callable | None = None,
                 layout: list[tuple[str, int]] | None = None):
        self.residual = residual
        self._jacobian = jacobian
        self.layout = layout

    def jacobian(self, x, cfg: LmConfig | None = None):
        if self._jacobian is None or (cfg is not None and cfg.jacobian == "numeric"):
            step = cfg.fd_step if cfg is not None else 1e-6
            return central_difference(self.residual, x, step)
        return self._jacobian(x)

    def parameter_names(self, n):
        if not self.layout:
            return [f"x[{i}]" for i in range(n)]
        names = []
        for name, size in self.layout:
            names.extend([name] if size == 1 else [f"{name}[{i}]" for i in range(size)])
        return names


class BlockSparseProblem:
    """Residual blocks touching the camera vector and exactly one point block.

    ``evaluate(cam, points, jacobian)`` returns residuals (B, m) and, when
    ``jacobian`` is true, camera Jacobians (B, m, n_camera) and point
    Jacobians (B, m, point_size). ``point_index`` (B,) maps blocks to points.
    The parameter vector is the camera vector followed by the flattened points.
    """

    def __init__(self, n_camera: int, n_points: int, point_size: int, point_index,
                 evaluate: Callable, camera_names: list[str] | None = None):
        self.n_camera = n_camera
        self.n_points = n_points
        self.point_size = point_size
        self.point_index = np.asarray(point_index, dtype=int)
        self.evaluate = evaluate
        self.camera_names = camera_names or [f"camera[{i}]" for i in range(n_camera)]

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[: self.n_camera], x[self.n_camera:].reshape(self.n_points, self.point_size)

    def residual(self, x):
        cam, pts = self.split(x)
        return self.evaluate(cam, pts, False)[0].ravel()

    def linearize(self, x):
        cam, pts = self.split(x)
        return self.evaluate(cam, pts, True)

    def dense_jacobian(self, x):
        r, Jc, Jp = self.linearize(x)
        B, m = r.shape
        J = np.zeros((B * m, self.n_camera + self.n_points * self.point_size))
        J[:, : self.n_camera] = Jc.reshape(B * m, -1)
        for b in range(B):
            c0 = self.n_camera + self.point_index[b] * self.point_size
            J[b * m:(b + 1) * m, c0:c0 + self.point_size] = Jp[b]
        return J

    def as_dense(self) -> ResidualProblem:
        layout = [(n, 1) for n in self.camera_names] + [(f"point[{i}]", self.point_size)
                                                        for i in range(self.n_points)]
        return ResidualProblem(self.residual, self.dense_jacobian, layout)


class _DenseSystem:
    def __init__(self, J, r, names):
        self.H = J.T @ J
        self.gradient = J.T @ r
        self.diag = np.diag(self.H).copy()
        zero = np.flatnonzero(~(self.diag > 0))
        if zero.size:
            raise RankDeficiencyError(
                f"parameter {names[zero[0]]} does not influence any residual", block=names[zero[0]])
        self.names = names

    def solve(self, lam):
        A = self.H + lam * np.diag(self.diag)
        try:
            c = scipy.linalg.cho_factor(A, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            if lam > 0:
                raise RankDeficiencyError(
                    f"damped normal equations singular near {_null_direction(A, self.names)}",
                    block=_null_direction(A, self.names))
            raise np.linalg.LinAlgError
        return scipy.linalg.cho_solve(c, -self.gradient, check_finite=False)


def _null_direction(A, names):
    w, V = np.linalg.eigh(A)
    return names[int(np.argmax(np.abs(V[:, 0])))]


class _SchurSystem:
    def __init__(self, problem: BlockSparseProblem, r, Jc, Jp):
        idx = problem.point_index
        P, ps, nc = problem.n_points, problem.point_size, problem.n_camera
        self.problem = problem
        self.U = np.einsum("bmi,bmj->ij", Jc, Jc)
        self.V = np.zeros((P, ps, ps))
        np.add.at(self.V, idx, np.einsum("bmi,bmj->bij", Jp, Jp))
        self.W = np.zeros((P, nc, ps))
        np.add.at(self.W, idx, np.einsum("bmi,bmj->bij", Jc, Jp))
        self.gc = np.einsum("bmi,bm->i", Jc, r)
        self.gp = np.zeros((P, ps))
        np.add.at(self.gp, idx, np.einsum("bmi,bm->bi", Jp, r))
        self.gradient = np.concatenate([self.gc, self.gp.ravel()])
        self.dU = np.diag(self.U).copy()
        self.dV = np.diagonal(self.V, axis1=1, axis2=2).copy()
        bad = np.flatnonzero(~(self.dU > 0))
        if bad.size:
            name = problem.camera_names[bad[0]]
            raise RankDeficiencyError(f"parameter {name} does not influence any residual", block=name)
        bad = np.argwhere(~(self.dV > 0))
        if bad.size:
            name = f"point[{bad[0, 0]}]"
            raise RankDeficiencyError(f"{name} component {bad[0, 1]} is unconstrained", block=name)

    def solve(self, lam):
        Va = self.V + lam * (self.dV[:, :, None] * np.eye(self.V.shape[1]))
        try:
            Vinv = np.linalg.inv(Va)
        except np.linalg.LinAlgError:
            if lam > 0:
                raise RankDeficiencyError("a point block is singular", block="point")
            raise
        WV = np.einsum("pij,pjk->pik", self.W, Vinv)
        S = self.U + lam * np.diag(self.dU) - np.einsum("pik,pjk->ij", WV, self.W)
        rhs = -self.gc + np.einsum("pik,pk->i", WV, self.gp)
        try:
            c = scipy.linalg.cho_factor(S, check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            if lam > 0:
                name = _null_direction(S, self.problem.camera_names)
                raise RankDeficiencyError(
                    f"reduced camera system singular; unconstrained: {name}", block=name)
            raise np.linalg.LinAlgError
        dc = scipy.linalg.cho_solve(c, rhs, check_finite=False)
        dp = np.einsum("pij,pj->pi", Vinv, -self.gp - np.einsum("pik,i->pk", self.W, dc))
        return np.concatenate([dc, dp.ravel()])


def _cost(r):
    return float(r @ r)


def _run(x0, residual, linearize, cfg: LmConfig, stage: str):
    x = np.array(x0, dtype=float)
    r = residual(x)
    if not np.all(np.isfinite(r)):
        raise NumericFailureError("residuals are not finite at the starting point", last_x=x, stage=stage)
    cost = _cost(r)
    report = LmReport(0, cost, cost, "max_iterations", evaluations=1, costs=[cost])
    lam = cfg.initial_damping
    for _ in range(cfg.max_iterations):
        if cost == 0.0:
            report.termination = "zero_cost"
            break
        system = linearize(x, r)
        if not np.all(np.isfinite(system.gradient)):
            raise NumericFailureError("Jacobian is not finite", last_x=x, stage=stage)
        if np.max(np.abs(system.gradient)) < cfg.gradient_tolerance:
            report.termination = "gradient"
            break
        accepted = False
        while True:
            lam_eff = lam if lam > cfg.gauss_newton_below else 0.0
            try:
                step = system.solve(lam_eff)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                x_new = x + step
                r_new = residual(x_new)
                report.evaluations += 1
                cost_new = _cost(r_new) if np.all(np.isfinite(r_new)) else np.inf
                if cost_new < cost:
                    accepted = True
                    break
            lam = max(lam, cfg.gauss_newton_below) * cfg.damping_up
            if lam > cfg.max_damping:
                break
        if not accepted:
            report.termination = "damping_limit"
            break
        decrease = (cost - cost_new) / cost
        x, r, cost = x_new, r_new, cost_new
        lam = lam / cfg.damping_down
        report.iterations += 1
        report.costs.append(cost)
        if decrease < cfg.cost_tolerance:
            report.termination = "cost"
            break
    report.final_cost = cost
    log.debug("%s: %s after %d iterations, cost %.6g -> %.6g", stage, report.termination,
              report.iterations, report.initial_cost, report.final_cost)
    return x, report


def lm_minimize(problem: ResidualProblem, x0, cfg: LmConfig | None = None, stage: str = "lm"):
    """Dense Levenberg-Marquardt. Returns (x, LmReport)."""
    cfg = cfg or LmConfig()
    names = problem.parameter_names(len(np.atleast_1d(x0)))

    def linearize(x, r):
        J = problem.jacobian(x, cfg)
        if not np.all(np.isfinite(J)):
            raise NumericFailureError("Jacobian is not finite", last_x=x, stage=stage)
        return _DenseSystem(J, r, names)

    return _run(x0, problem.residual, linearize, cfg, stage)


def sparse_lm_minimize(problem: BlockSparseProblem, x0, cfg: LmConfig | None = None,
                       stage: str = "sparse_lm"):
    """Levenberg-Marquardt eliminating point blocks through the Schur complement."""
    cfg = cfg or LmConfig()

    def linearize(x, r):
        if cfg.jacobian == "numeric":
            J = central_difference(problem.residual, x, cfg.fd_step)
            return _DenseSystem(J, r, problem.as_dense().parameter_names(len(x)))
        rb, Jc, Jp = problem.linearize(x)
        if not (np.all(np.isfinite(Jc)) and np.all(np.isfinite(Jp))):
            raise NumericFailureError("Jacobian is not finite", last_x=x, stage=stage)
        return _SchurSystem(problem, rb, Jc, Jp)

    return _run(x0, problem.residual, linearize, cfg, stage)
