"""Thin conic-solver contract used by the robust MPC synthesis.

Wraps cvxpy problems with a uniform status vocabulary so the control code
never branches on solver-specific strings: ``optimal``, ``near_optimal``,
``infeasible``, ``unbounded``, ``timeout`` or ``error``.  Dual values stay
available on the constraint objects for diagnostics.
"""

from __future__ import annotations

import dataclasses
import time

import cvxpy as cp

__all__ = ["SdpResult", "run_problem", "solve_sdp", "BackendUnavailableError"]

_STATUS_MAP = {
    cp.OPTIMAL: "optimal",
    cp.OPTIMAL_INACCURATE: "near_optimal",
    cp.INFEASIBLE: "infeasible",
    cp.INFEASIBLE_INACCURATE: "infeasible",
    cp.UNBOUNDED: "unbounded",
    cp.UNBOUNDED_INACCURATE: "unbounded",
    getattr(cp, "USER_LIMIT", "user_limit"): "timeout",
}


class BackendUnavailableError(RuntimeError):
    """Raised when the requested conic solver is not installed."""


@dataclasses.dataclass
class SdpResult:
    status: str
    objective: float | None
    solve_time: float
    num_iters: int | None
    solver_name: str
    raw_status: str


def run_problem(problem: cp.Problem, solver: str = "CLARABEL", **opts) -> SdpResult:
    """Solve a prebuilt cvxpy problem and normalise the outcome."""
    if solver not in cp.installed_solvers():
        raise BackendUnavailableError(f"solver {solver!r} is not installed")
    t0 = time.perf_counter()
    try:
        problem.solve(solver=solver, **opts)
    except cp.error.SolverError as exc:
        return SdpResult("error", None, time.perf_counter() - t0, None, solver, str(exc))
    wall = time.perf_counter() - t0
    stats = problem.solver_stats
    solve_time = stats.solve_time if stats and stats.solve_time else wall
    iters = stats.num_iters if stats else None
    status = _STATUS_MAP.get(problem.status, "error")
    objective = problem.value if status in ("optimal", "near_optimal") else None
    return SdpResult(status, objective, solve_time, iters, solver, str(problem.status))


def solve_sdp(objective, constraints, solver: str = "CLARABEL", **opts):
    """Build and solve ``min objective  s.t. constraints``.

    ``objective`` is an affine cvxpy expression; ``constraints`` a list of
    cvxpy constraints (matrix inequalities, equalities, bounds).  Returns
    ``(SdpResult, problem)`` so callers can read variable and dual values.
    """
    problem = cp.Problem(cp.Minimize(objective), list(constraints))
    return run_problem(problem, solver=solver, **opts), problem
