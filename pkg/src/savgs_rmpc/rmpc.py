"""Min-max robust MPC synthesis via matrix-inequality certificates.

The worst-case tracking cost over the stacked horizon is bounded by a
certificate matrix built from commutant slack variables; constraint rows
are certified either one at a time, aggregated into a single inequality
with diagonal slack ``M`` and scalar coupling ``mu``, or aggregated per
prediction step (the same construction applied to each step's rows, kept
for throughput: certificate cones grow cubically in the row count).  The
remaining bilinearity (decision gains times slack matrices) is removed
with an elimination-style linearization around a feasible pivot, refreshed
from the previous solve in receding-horizon use; any solution certifies
the original nonlinear inequalities with the recovered gain.

Two exact reductions keep the online program tractable.  First, the gain
enters every certificate only through ``Theta = Khat @ Bp``, so the
elimination slack ``X`` can live on the uncertainty-input space (size
``N_p``) instead of the state space (size ``N_n``); the lemma applies
verbatim with ``Bp`` replaced by the identity, and any causal ``Theta``
is realizable by a causal ``Khat`` because the per-step input maps are
onto.  Second, rescaling both pivots by a common factor is absorbed
exactly by ``X``, so pivots are normalised to unit magnitude before every
solve.

All uncertainty blocks of the suspension instance are scalar, which pins
the slack structure to equal diagonal pairs with zero commutant part; the
assembly helpers still accept general ``(S, R, G)`` triples so the full
block form stays exercised by tests.
"""

from __future__ import annotations

import dataclasses
import itertools

import cvxpy as cp
import numpy as np

from .prediction import CausalGainSet, StackedPrediction, causal_mask, from_hatted
from .sdp import SdpResult, run_problem

__all__ = [
    "SlackSet",
    "WarmStart",
    "RmpcSolution",
    "RmpcSolver",
    "LookupTable",
    "assemble_cost_blocks",
    "assemble_constraint_blocks_single",
    "assemble_constraint_blocks_multi",
    "linearize_elimination",
    "nonlinear_certificates",
    "theta_mask",
    "khat_from_theta",
    "warm_from",
    "build_lookup",
    "solve_online",
    "RmpcError",
    "InfeasibleProblemError",
    "NumericalFailureError",
    "SolverTimeoutError",
]


class RmpcError(RuntimeError):
    pass


class InfeasibleProblemError(RmpcError):
    """The certificate program reported infeasibility."""


class NumericalFailureError(RmpcError):
    """Degenerate solve (near-singular slack ``X`` or solver breakdown)."""


class SolverTimeoutError(RmpcError):
    pass


#: reduced-tolerance settings that let the interior-point solver return a
#: usable near-optimal iterate instead of failing near a degenerate face;
#: the optimum sits on such a face here and the solver tends to stall with
#: the duality gap still around a percent, but the iterate at the stall is
#: primal-feasible to ~1e-8.  Optimality may be accepted loosely (it only
#: costs a slightly conservative bound); feasibility must stay tight or
#: the recovered certificates lose validity.
_CLARABEL_SAFE_OPTS = {
    "tol_gap_rel": 1e-7, "tol_feas": 1e-8,
    "reduced_tol_gap_rel": 5e-2, "reduced_tol_gap_abs": 5e-1,
    "reduced_tol_feas": 1e-7, "reduced_tol_infeas_abs": 1e-8,
    "reduced_tol_infeas_rel": 1e-8, "reduced_tol_ktratio": 1e-3,
    "max_iter": 100,
}


# ---------------------------------------------------------------------------
# slack structure
# ---------------------------------------------------------------------------

def _is_expr(x) -> bool:
    return isinstance(x, cp.expressions.expression.Expression)


def slack_expansion(structure: tuple[int, ...]) -> np.ndarray:
    """0/1 matrix mapping one scalar per block to the stacked diagonal."""
    total = sum(structure)
    E = np.zeros((total, len(structure)))
    row = 0
    for b, size in enumerate(structure):
        E[row:row + size, b] = 1.0
        row += size
    return E


@dataclasses.dataclass(frozen=True)
class SlackSet:
    """Commutant-compatible slack triple for a block-diagonal operator set.

    One positive scalar per diagonal block; ``S`` and ``R`` expand it along
    the block sizes and ``G`` is structurally zero, which is exactly the
    set allowed when every block is a distinct (non-repeated) scalar or a
    full square block.
    """

    s: np.ndarray
    structure: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.s.shape != (len(self.structure),):
            raise ValueError("one slack scalar per uncertainty block")
        if np.any(self.s <= 0.0):
            raise ValueError("slack scalars must be positive")

    @property
    def S(self) -> np.ndarray:
        return np.diag(slack_expansion(self.structure) @ self.s)

    @property
    def R(self) -> np.ndarray:
        return self.S

    @property
    def G(self) -> np.ndarray:
        n = sum(self.structure)
        return np.zeros((n, n))

    def commutes_with(self, delta_diag: np.ndarray, atol: float = 1e-12) -> bool:
        """Check ``S @ Delta == Delta @ R`` and ``H(Delta @ G) == 0``."""
        D = np.diag(delta_diag)
        S, R, G = self.S, self.R, self.G
        return (np.allclose(S @ D, D @ R, atol=atol)
                and np.allclose(D @ G + (D @ G).T, 0.0, atol=atol))


# ---------------------------------------------------------------------------
# certificate assembly (numpy arrays or cvxpy expressions)
# ---------------------------------------------------------------------------

def _bmat(rows):
    if any(_is_expr(b) for row in rows for b in row):
        return cp.bmat(rows)
    return np.block(rows)


def _hs(M):
    return M + M.T


def _col(v, m):
    if _is_expr(v):
        return cp.reshape(v, (m, 1), order="F")
    return np.asarray(v).reshape(m, 1)


def _scal(x):
    if _is_expr(x):
        return cp.reshape(x, (1, 1), order="F")
    return np.array([[float(x)]])


def assemble_cost_blocks(stacked: StackedPrediction, q_vec, z_vec, gamma_sq,
                         S, R, G):
    """Blocks of the worst-case cost certificate.

    ``q_vec`` and ``z_vec`` are the affine closed-loop offset vectors for
    the chosen ``(Khat0, vhat)`` at the current initial state; ``gamma_sq``
    is the cost bound.  Returns ``(T1, T2, T3)``: the gain-dependent part
    of the full certificate is ``H(T2 @ Khat @ Bp @ T3)``.
    """
    Nz, Nq, Np, Nu = stacked.N_z, stacked.N_q, stacked.N_p, stacked.N_u
    zc, qc = _col(z_vec, Nz), _col(q_vec, Nq)
    ZGt, ZS = stacked.Dzp @ G.T, stacked.Dzp @ S
    QGt, QS = stacked.Dqp @ G.T, stacked.Dqp @ S
    T1 = _bmat([
        [np.eye(Nz), zc,              ZGt,          ZS],
        [zc.T,       _scal(gamma_sq), qc.T,         np.zeros((1, Np))],
        [ZGt.T,      qc,              R + _hs(QGt), QS],
        [ZS.T,       np.zeros((Np, 1)), QS.T,       S],
    ])
    T2 = np.vstack([stacked.Dzu, np.zeros((1, Nu)), stacked.Dqu, np.zeros((Np, Nu))])
    T3 = _bmat([[np.zeros((Np, Nz)), np.zeros((Np, 1)), G.T, S]])
    return T1, T2, T3


def assemble_constraint_blocks_single(stacked: StackedPrediction, q_vec, f_vec,
                                      f_bar, S, R, G, mu, M_diag,
                                      rows: slice | None = None):
    """Blocks of the aggregated constraint certificate.

    All rows are certified at once through the diagonal slack ``M_diag``
    and the scalar coupling ``mu``; ``rows`` restricts the aggregation to
    a subset of constraint rows (used by the per-step grouped mode), with
    ``f_vec``, ``f_bar`` and ``M_diag`` already restricted to match.
    """
    Nq, Np, Nu = stacked.N_q, stacked.N_p, stacked.N_u
    Dfp = stacked.Dfp if rows is None else stacked.Dfp[rows]
    Dfu = stacked.Dfu if rows is None else stacked.Dfu[rows]
    nf = Dfp.shape[0]
    qc = _col(q_vec, Nq)
    ones = np.ones(nf)
    margin = f_bar - f_vec - M_diag - (ones * mu if not _is_expr(mu)
                                       else cp.multiply(ones, mu))
    mc = _col(margin, nf)
    M2 = (cp.diag(2.0 * M_diag) if _is_expr(M_diag) else np.diag(2.0 * M_diag))
    FGt, FS = Dfp @ G.T, Dfp @ S
    QGt, QS = stacked.Dqp @ G.T, stacked.Dqp @ S
    T1 = _bmat([
        [_scal(2.0 * mu),   mc.T,   qc.T,          np.zeros((1, Np))],
        [mc,                M2,     -FGt,          -FS],
        [qc,                -FGt.T, R + _hs(QGt),  QS],
        [np.zeros((Np, 1)), -FS.T,  QS.T,          S],
    ])
    T2 = np.vstack([np.zeros((1, Nu)), -Dfu, stacked.Dqu, np.zeros((Np, Nu))])
    T3 = _bmat([[np.zeros((Np, 1)), np.zeros((Np, nf)), G.T, S]])
    return T1, T2, T3


def assemble_constraint_blocks_multi(stacked: StackedPrediction, q_vec, f_vec,
                                     f_bar, S, R, G, i: int):
    """Blocks of the certificate for constraint row ``i`` alone."""
    Nq, Np, Nu = stacked.N_q, stacked.N_p, stacked.N_u
    if not 0 <= i < stacked.N_f:
        raise IndexError(f"constraint index {i} out of range")
    qc = _col(q_vec, Nq)
    fp_i = stacked.Dfp[i:i + 1, :]
    fu_i = stacked.Dfu[i:i + 1, :]
    QGt, QS = stacked.Dqp @ G.T, stacked.Dqp @ S
    marg = f_bar[i] - f_vec[i]
    T1 = _bmat([
        [_scal(marg) if not _is_expr(marg) else cp.reshape(marg, (1, 1), order="F"),
         qc.T - 0.5 * (fp_i @ G.T),  -0.5 * (fp_i @ S)],
        [qc - 0.5 * (fp_i @ G.T).T,  R + _hs(QGt),     QS],
        [-0.5 * (fp_i @ S).T,        QS.T,             S],
    ])
    T2 = np.vstack([-0.5 * fu_i, stacked.Dqu, np.zeros((Np, Nu))])
    T3 = _bmat([[np.zeros((Np, 1)), G.T, S]])
    return T1, T2, T3


def linearize_elimination(T1, T2, T3, K_bar, X, Y_star, Bp):
    """Two-by-two block linearization of ``T1 + H(T2 Khat Bp T3) > 0``.

    Substitutes ``K_bar = Khat X`` (or ``Theta X`` with ``Bp = I``) and
    pivots on the fixed ``Y_star``; any solution with ``X + X^T > 0``
    certifies the nonlinear inequality with the recovered gain (congruence
    with ``[I, T2 Khat]``), and the pivot built from a strictly feasible
    solution keeps the linearized program feasible.
    """
    W = Bp @ T3 - (T2 @ K_bar).T - X @ Y_star
    return _bmat([
        [T1 + _hs(T2 @ K_bar @ Y_star), W.T],
        [W, X + X.T],
    ])


# ---------------------------------------------------------------------------
# gain bookkeeping for the uncertainty-space elimination
# ---------------------------------------------------------------------------

def theta_mask(stacked: StackedPrediction) -> np.ndarray:
    """Entry mask of the direct uncertainty-feedback gain ``Theta = Khat Bp``.

    ``u_i`` may react to ``p_j`` only for ``j < i`` (one state-propagation
    delay); the terminal uncertainty input reaches no control move.
    """
    mask = np.zeros((stacked.N_u, stacked.N_p), dtype=bool)
    for i in range(stacked.N):
        for j, sl in enumerate(stacked.p_slices[:stacked.N]):
            if j < i:
                mask[i * stacked.n_u:(i + 1) * stacked.n_u, sl] = True
    return mask


def khat_from_theta(stacked: StackedPrediction, theta: np.ndarray,
                    rtol: float = 1e-6) -> np.ndarray:
    """Recover a causal ``Khat`` with ``Khat @ Bp == Theta`` exactly.

    Row by row: the restriction of ``Bp`` to the causal support is a
    block-triangular onto map (its diagonal blocks are the one-step input
    maps), so a minimum-norm solution always exists; the residual is
    checked against ``rtol`` to catch pattern violations.
    """
    N, n, n_u = stacked.N, stacked.n, stacked.n_u
    Khat = np.zeros((stacked.N_u, stacked.N_n))
    for i in range(1, N):
        rows = slice(i * n_u, (i + 1) * n_u)
        xcols = slice(0, i * n)                         # state blocks 1..i
        pcols = slice(0, stacked.p_slices[i - 1].stop)  # p blocks 0..i-1
        Bp_sub = stacked.Bp[xcols, pcols]
        target = theta[rows, pcols]
        sol, *_ = np.linalg.lstsq(Bp_sub.T, target.T, rcond=None)
        Khat[rows, xcols] = sol.T
        resid = np.linalg.norm(sol.T @ Bp_sub - target)
        if resid > rtol * max(1.0, np.linalg.norm(target)):
            raise NumericalFailureError(
                f"uncertainty-gain row {i} not realizable by a causal state gain")
    return Khat


# ---------------------------------------------------------------------------
# numeric certificate checks and warm starts
# ---------------------------------------------------------------------------

def closed_loop_offsets(stacked: StackedPrediction, K0h, vh, x0):
    """Affine offset vectors ``(q, f, z - zbar)`` for given hatted gains."""
    u0 = K0h @ x0 + vh
    q = stacked.Cq @ x0 + stacked.Dqu @ u0 + stacked.dbar
    f = stacked.Cf @ x0 + stacked.Dfu @ u0
    z = stacked.Cz @ x0 + stacked.Dzu @ u0 - stacked.zbar
    return q, f, z


@dataclasses.dataclass(frozen=True)
class WarmStart:
    """Pivot matrices for the linearized certificates.

    ``Y`` covers the cost certificate; ``Yt`` is a single matrix in the
    aggregated mode or one per group/row otherwise.  ``scaled`` marks
    pivots expressed in the solver's internally scaled coordinates; they
    are not interchangeable across scalings.
    """

    Y: np.ndarray
    Yt: np.ndarray | tuple[np.ndarray, ...]
    source: str = "zero-init"
    scaled: bool = True


@dataclasses.dataclass
class RmpcSolution:
    """Solved certificate program: bound, gains, slacks and diagnostics.

    ``mu``/``M_diag`` hold the aggregation slacks (per-group values are
    concatenated in grouped mode, with ``mu_groups`` keeping the scalars);
    ``slack_constr_multi`` carries per-row or per-group slack vectors when
    the mode has them.
    """

    gamma_sq: float
    K0: np.ndarray
    K: np.ndarray
    v: np.ndarray
    hatted: CausalGainSet
    slack_cost: SlackSet
    slack_constr: SlackSet
    mu: float
    M_diag: np.ndarray
    solver_status: str
    solve_time: float
    u0: np.ndarray
    x0: np.ndarray
    f_bar: np.ndarray
    warm_next: WarmStart | None = None
    num_iters: int | None = None
    slack_constr_multi: np.ndarray | None = None
    mu_groups: tuple[float, ...] | None = None

    @property
    def gains(self) -> CausalGainSet:
        return CausalGainSet(K0=self.K0, K=self.K, v=self.v,
                             N=self.hatted.N, n=self.hatted.n,
                             n_u=self.hatted.n_u, hatted=False)


def _group_slices(stacked: StackedPrediction, mode: str) -> list[slice]:
    if mode == "single":
        return [slice(0, stacked.N_f)]
    if mode == "grouped":
        return list(stacked.f_slices)
    raise ValueError(mode)


def nonlinear_certificates(stacked: StackedPrediction, sol: RmpcSolution,
                           mode: str = "single", f_bar: np.ndarray | None = None):
    """Minimum eigenvalues of the nonlinear certificates at a solution.

    Substitutes the recovered hatted gains and slacks back into the
    original (bilinear) cost and constraint inequalities; both should be
    positive semidefinite up to solver tolerance for a sound solve.
    ``stacked`` and ``f_bar`` must be in the coordinates the slacks refer
    to (a solver's :meth:`RmpcSolver.certificate_view`).  Returns
    ``(cost_eig, constraint_eig)`` with the constraint value the minimum
    over groups or rows for the non-aggregated modes.
    """
    h = sol.hatted
    if f_bar is None:
        f_bar = sol.f_bar
    q, f, z = closed_loop_offsets(stacked, h.K0, h.v, sol.x0)
    sc, st = sol.slack_cost, sol.slack_constr
    T1, T2, T3 = assemble_cost_blocks(stacked, q, z, sol.gamma_sq,
                                      sc.S, sc.R, sc.G)
    M1 = T1 + _hs(T2 @ h.K @ stacked.Bp @ T3)
    eig_cost = float(np.linalg.eigvalsh((M1 + M1.T) / 2.0)[0])

    eig_constr = np.inf
    if mode in ("single", "grouped"):
        groups = _group_slices(stacked, mode)
        mus = sol.mu_groups if sol.mu_groups is not None else (sol.mu,) * len(groups)
        for g, (sl, mu_g) in enumerate(zip(groups, mus)):
            sg = (SlackSet(s=sol.slack_constr_multi[g], structure=st.structure)
                  if sol.slack_constr_multi is not None else st)
            T1c, T2c, T3c = assemble_constraint_blocks_single(
                stacked, q, f[sl], f_bar[sl], sg.S, sg.R, sg.G,
                mu_g, sol.M_diag[sl], rows=sl)
            Mc = T1c + _hs(T2c @ h.K @ stacked.Bp @ T3c)
            eig_constr = min(eig_constr, float(np.linalg.eigvalsh((Mc + Mc.T) / 2.0)[0]))
    else:
        for i in range(stacked.N_f):
            si = (SlackSet(s=sol.slack_constr_multi[i], structure=st.structure)
                  if sol.slack_constr_multi is not None else st)
            T1i, T2i, T3i = assemble_constraint_blocks_multi(
                stacked, q, f, f_bar, si.S, si.R, si.G, i)
            Mi = T1i + _hs(T2i @ h.K @ stacked.Bp @ T3i)
            eig_constr = min(eig_constr, float(np.linalg.eigvalsh((Mi + Mi.T) / 2.0)[0]))
    return eig_cost, eig_constr


def certified_gamma_sq(stacked: StackedPrediction, sol: RmpcSolution,
                       tol: float = 1e-9) -> float:
    """Smallest cost bound the returned slacks and gains actually certify.

    The cost certificate is affine in ``gamma_sq`` (it sits alone on the
    diagonal), so if solver sloppiness left the certificate slightly
    indefinite at the reported bound, bisection on ``gamma_sq`` recovers
    the honest one; returns ``inf`` when no bound is certified.
    """
    h = sol.hatted
    q, _, z = closed_loop_offsets(stacked, h.K0, h.v, sol.x0)
    sc = sol.slack_cost

    def mineig(g2: float) -> float:
        T1, T2, T3 = assemble_cost_blocks(stacked, q, z, g2, sc.S, sc.R, sc.G)
        M = T1 + _hs(T2 @ h.K @ stacked.Bp @ T3)
        return float(np.linalg.eigvalsh((M + M.T) / 2.0)[0])

    if mineig(sol.gamma_sq) >= -tol:
        return sol.gamma_sq
    hi = max(sol.gamma_sq, 1.0)
    for _ in range(60):
        hi *= 2.0
        if mineig(hi) >= -tol:
            break
    else:
        return float("inf")
    lo = sol.gamma_sq
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if mineig(mid) >= -tol:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

def _causal_block_expr(N: int, n_u: int, col_sizes: list[int], active):
    """Strictly causal stacked gain as a bmat of small variable blocks."""
    rows = []
    for i in range(N):
        row = []
        for j, w in enumerate(col_sizes):
            row.append(cp.Variable((n_u, w)) if active(i, j) else np.zeros((n_u, w)))
        rows.append(row)
    return cp.bmat(rows)


def _x_slack_expr(block_sizes: list[int], structure: str):
    """Square slack ``X`` preserving causal recovery of ``Kbar X^-1``.

    ``blt``: full block-lower-triangular; ``blockdiag``: one dense block
    per diagonal position; ``scalar``: one scalar per position times
    identity.  Every choice keeps ``X`` (and its inverse) block-lower-
    triangular, so recovered gains stay causal; tighter structures trade
    conservativeness for a smaller program.
    """
    m = len(block_sizes)
    if structure == "scalar":
        x = cp.Variable(m, name="x_diag")
        rows = []
        for i, ri in enumerate(block_sizes):
            row = [cp.multiply(x[i], np.eye(ri)) if j == i else np.zeros((ri, cj))
                   for j, cj in enumerate(block_sizes)]
            rows.append(row)
        return cp.bmat(rows)
    rows = []
    for i, ri in enumerate(block_sizes):
        row = []
        for j, cj in enumerate(block_sizes):
            if j == i or (j < i and structure == "blt"):
                row.append(cp.Variable((ri, cj)))
            else:
                row.append(np.zeros((ri, cj)))
        rows.append(row)
    return cp.bmat(rows)


def _scale_stacked(stacked: StackedPrediction) -> tuple[StackedPrediction, np.ndarray]:
    """Equilibrate each uncertainty channel pair ``(q_i, p_i)``.

    Diagonal rescaling ``q' = D q``, ``p' = D p`` commutes with every
    diagonal operator sample, so certificates in scaled coordinates map
    back by congruence; the gain product ``Khat Bp' p'`` equals
    ``Khat Bp p``, hence recovered gains need no unscaling.  The scale of
    each channel is the geometric mean between the size of its output row
    (how strongly ``q_i`` is driven) and of its input column (how strongly
    ``p_i`` drives the system), which balances the skew both ways.
    """
    def rowmax(M):
        return np.max(np.abs(M), axis=1) if M.shape[1] else np.zeros(M.shape[0])

    def colmax(M):
        return np.max(np.abs(M), axis=0) if M.shape[0] else np.zeros(M.shape[1])

    row = np.maximum.reduce([rowmax(stacked.Cq), rowmax(stacked.Dqu),
                             np.abs(stacked.dbar), rowmax(stacked.Dqp)])
    col = np.maximum.reduce([colmax(stacked.Bp), colmax(stacked.Dzp),
                             colmax(stacked.Dfp), colmax(stacked.Dqp)])
    row[row == 0.0] = 1.0
    col[col == 0.0] = 1.0
    d = np.sqrt(col / row)
    D = np.diag(d)
    Dinv = np.diag(1.0 / d)
    scaled = dataclasses.replace(
        stacked,
        Cq=D @ stacked.Cq, Dqu=D @ stacked.Dqu, Dqp=D @ stacked.Dqp @ Dinv,
        dbar=d * stacked.dbar,
        Bp=stacked.Bp @ Dinv, Dzp=stacked.Dzp @ Dinv, Dfp=stacked.Dfp @ Dinv,
    )
    return scaled, d


class RmpcSolver:
    """Receding-horizon robust MPC solver over a stacked prediction.

    Compiles the linearized certificate program once with parameters for
    the initial state, the stacked constraint bound and the warm-start
    pivots, then re-solves it each step.

    ``mode`` selects how constraint rows are certified: ``"single"`` is
    the aggregated certificate over all rows, ``"multi"`` one certificate
    per row (the cross-check oracle), ``"grouped"`` the aggregated form
    applied per prediction step, which is feasibility-equivalent to the
    other two and roughly four times faster here (certificate cones grow
    cubically with the aggregated row count).  ``elimination_space``
    chooses where the bilinearity is eliminated: ``"uncertainty"``
    (default, small) or ``"state"`` (the literal reading, much larger).
    """

    def __init__(self, stacked: StackedPrediction, *, mode: str = "single",
                 eps: float = 1e-5, solver: str = "CLARABEL",
                 scale_channels: bool = True, x_structure: str = "blt",
                 elimination_space: str = "uncertainty",
                 slack_floor: float = 1e-7, var_bound: float = 1e5,
                 slack_reg: float = 1e-6, verify_certificates: bool = True,
                 cert_tol: float = 1e-7, solver_opts: dict | None = None):
        if mode not in ("single", "multi", "grouped"):
            raise ValueError("mode must be 'single', 'multi' or 'grouped'")
        if x_structure not in ("blt", "blockdiag", "scalar"):
            raise ValueError("x_structure must be 'blt', 'blockdiag' or 'scalar'")
        if elimination_space not in ("uncertainty", "state"):
            raise ValueError("elimination_space must be 'uncertainty' or 'state'")
        if solver_opts is None and solver == "CLARABEL":
            solver_opts = dict(_CLARABEL_SAFE_OPTS)
        self.stacked = stacked
        self.mode = mode
        self.eps = float(eps)
        self.solver = solver
        self.solver_opts = dict(solver_opts or {})
        self.x_structure = x_structure
        self.elimination_space = elimination_space
        if scale_channels:
            self._sst, self._qscale = _scale_stacked(stacked)
        else:
            self._sst, self._qscale = stacked, np.ones(stacked.N_q)
        self.slack_floor = float(slack_floor)
        self.var_bound = float(var_bound)
        self.slack_reg = float(slack_reg)
        self.verify_certificates = bool(verify_certificates)
        self.cert_tol = float(cert_tol)
        self._nblocks = len(stacked.block_structure)
        self._E = slack_expansion(tuple(b[0] for b in stacked.block_structure))
        self._build()

    # -- problem construction -------------------------------------------
    def _build(self) -> None:
        st = self._sst
        N, n, n_u = st.N, st.n, st.n_u
        Nz, Nq, Np, Nf, Nu, Nn = st.N_z, st.N_q, st.N_p, st.N_f, st.N_u, st.N_n
        self._NT = Nz + 1 + Nq + Np

        if self.elimination_space == "uncertainty":
            # The gain enters every certificate only through Theta =
            # Khat @ Bp, so the bilinearity is eliminated on the (much
            # smaller) uncertainty-input space: Bp is replaced by the
            # identity and X is square of size N_p.
            p_sizes = [sl.stop - sl.start for sl in st.p_slices]
            self._gain_v = _causal_block_expr(
                N, n_u, p_sizes, active=lambda i, j: j < i)
            self.X_v = _x_slack_expr(p_sizes, self.x_structure)
            self._Bp_eff = np.eye(Np)
            self._xdim = Np
        else:
            self._gain_v = _causal_block_expr(
                N, n_u, [n] * N, active=lambda i, j: j < i)
            self.X_v = _x_slack_expr([n] * N, self.x_structure)
            self._Bp_eff = st.Bp
            self._xdim = Nn

        self.x0_p = cp.Parameter(n, name="x0")
        self.fbar_p = cp.Parameter(Nf, name="f_bar")
        self.Y_p = cp.Parameter((self._xdim, self._NT), name="Y_star")

        self.gamma2_v = cp.Variable(nonneg=True, name="gamma_sq")
        self.K0h_v = cp.Variable((Nu, n), name="K0_hat")
        self.vh_v = cp.Variable(Nu, name="v_hat")
        self.s_v = cp.Variable(self._nblocks, name="s_cost")

        u0a = self.K0h_v @ self.x0_p + self.vh_v
        q_vec = st.Cq @ self.x0_p + st.Dqu @ u0a + st.dbar
        z_vec = st.Cz @ self.x0_p + st.Dzu @ u0a - st.zbar
        f_vec = st.Cf @ self.x0_p + st.Dfu @ u0a

        G0 = np.zeros((Nq, Np))
        S = cp.diag(self._E @ self.s_v)
        T1, T2, T3 = assemble_cost_blocks(st, q_vec, z_vec, self.gamma2_v, S, S, G0)
        self._T2_cost = T2
        M_cost = linearize_elimination(T1, T2, T3, self._gain_v, self.X_v,
                                       self.Y_p, self._Bp_eff)
        cons = [M_cost >> self.eps * np.eye(self._NT + self._xdim),
                self.s_v >= self.slack_floor]

        if self.mode in ("single", "grouped"):
            self._groups = _group_slices(st, self.mode)
            ng = len(self._groups)
            self.st_v = cp.Variable((ng, self._nblocks), name="s_constr")
            self.mu_v = cp.Variable(ng, name="mu")
            self.Md_v = cp.Variable(Nf, name="M_diag")
            self._NTg = [1 + (sl.stop - sl.start) + Nq + Np for sl in self._groups]
            self.Yt_p = [cp.Parameter((self._xdim, nt), name=f"Yt_star_{g}")
                         for g, nt in enumerate(self._NTg)]
            self._T2_constr = []
            for g, sl in enumerate(self._groups):
                Sg = cp.diag(self._E @ self.st_v[g])
                T1c, T2c, T3c = assemble_constraint_blocks_single(
                    st, q_vec, f_vec[sl], self.fbar_p[sl], Sg, Sg, G0,
                    self.mu_v[g], self.Md_v[sl], rows=sl)
                self._T2_constr.append(T2c)
                Mg = linearize_elimination(T1c, T2c, T3c, self._gain_v, self.X_v,
                                           self.Yt_p[g], self._Bp_eff)
                cons.append(Mg >> self.eps * np.eye(self._NTg[g] + self._xdim))
            cons.append(self.st_v >= self.slack_floor)
        else:
            # one certificate and one slack triple per constraint row
            self._groups = [slice(i, i + 1) for i in range(Nf)]
            self.st_v = cp.Variable((Nf, self._nblocks), name="s_constr")
            self.mu_v = None
            self.Md_v = None
            self._NTi = 1 + Nq + Np
            self.Yt_p = [cp.Parameter((self._xdim, self._NTi), name=f"Yt_star_{i}")
                         for i in range(Nf)]
            self._T2_constr = []
            for i in range(Nf):
                Si = cp.diag(self._E @ self.st_v[i])
                T1i, T2i, T3i = assemble_constraint_blocks_multi(
                    st, q_vec, f_vec, self.fbar_p, Si, Si, G0, i)
                self._T2_constr.append(T2i)
                Mi = linearize_elimination(T1i, T2i, T3i, self._gain_v, self.X_v,
                                           self.Yt_p[i], self._Bp_eff)
                cons.append(Mi >> self.eps * np.eye(self._NTi + self._xdim))
            cons.append(self.st_v >= self.slack_floor)

        # Box bounds on the gain and elimination variables keep the
        # feasible set compact (the substituted gain scales freely against
        # X otherwise) and the data matrix full column rank even when
        # x0 = 0 silences the K0 columns.
        for v in self._bounded_vars():
            cons.append(cp.abs(v) <= self.var_bound)
        # A tiny slack penalty picks the smallest point of the (flat)
        # optimal slack face; it biases gamma_sq by well under the solver
        # tolerance but keeps successive warm pivots bounded and stable.
        reg = self.slack_reg * (cp.sum(self.s_v) + cp.sum(self.st_v))
        self.problem = cp.Problem(cp.Minimize(self.gamma2_v + reg), cons)
        self._build_bootstrap()

    def _bounded_vars(self):
        out = []
        for v in (self.K0h_v, self.vh_v, self._gain_v, self.X_v):
            out.extend(v.variables() if hasattr(v, "variables") else [v])
        seen: set[int] = set()
        uniq = []
        for v in out:
            if id(v) not in seen:
                seen.add(id(v))
                uniq.append(v)
        return uniq

    def _build_bootstrap(self) -> None:
        """Restricted program with the uncertainty feedback pinned to zero.

        With ``Khat = 0`` the certificates are linear in the remaining
        decision variables, so no elimination pivot is needed; the
        solution provides strictly feasible slacks (hence valid pivots for
        the linearized program) and a conservative fallback control.
        """
        st = self._sst
        Nq, Np, Nf = st.N_q, st.N_p, st.N_f
        groups = (self._groups if self.mode in ("single", "grouped")
                  else [slice(0, Nf)])
        self._boot_groups = groups
        self.b_gamma2_v = cp.Variable(nonneg=True)
        self.b_K0h_v = cp.Variable((st.N_u, st.n))
        self.b_vh_v = cp.Variable(st.N_u)
        self.b_s_v = cp.Variable(self._nblocks)
        self.b_st_v = cp.Variable((len(groups), self._nblocks))
        self.b_mu_v = cp.Variable(len(groups))
        self.b_Md_v = cp.Variable(Nf)

        u0a = self.b_K0h_v @ self.x0_p + self.b_vh_v
        q_vec = st.Cq @ self.x0_p + st.Dqu @ u0a + st.dbar
        z_vec = st.Cz @ self.x0_p + st.Dzu @ u0a - st.zbar
        f_vec = st.Cf @ self.x0_p + st.Dfu @ u0a
        G0 = np.zeros((Nq, Np))
        S = cp.diag(self._E @ self.b_s_v)
        T1, _, _ = assemble_cost_blocks(st, q_vec, z_vec, self.b_gamma2_v, S, S, G0)
        cons = [T1 >> self.eps * np.eye(self._NT),
                self.b_s_v >= self.slack_floor,
                self.b_st_v >= self.slack_floor]
        for g, sl in enumerate(groups):
            Sg = cp.diag(self._E @ self.b_st_v[g])
            T1c, _, _ = assemble_constraint_blocks_single(
                st, q_vec, f_vec[sl], self.fbar_p[sl], Sg, Sg, G0,
                self.b_mu_v[g], self.b_Md_v[sl], rows=sl)
            cons.append(T1c >> self.eps * np.eye(T1c.shape[0]))
        for v in (self.b_K0h_v, self.b_vh_v):
            cons.append(cp.abs(v) <= self.var_bound)
        reg = self.slack_reg * (cp.sum(self.b_s_v) + cp.sum(self.b_st_v))
        self.bootstrap_problem = cp.Problem(cp.Minimize(self.b_gamma2_v + reg), cons)

    # -- warm starts ------------------------------------------------------
    def zero_warm(self) -> WarmStart:
        d = self._xdim
        if self.mode == "single":
            return WarmStart(Y=np.zeros((d, self._NT)),
                             Yt=np.zeros((d, self._NTg[0])))
        if self.mode == "grouped":
            return WarmStart(Y=np.zeros((d, self._NT)),
                             Yt=tuple(np.zeros((d, nt)) for nt in self._NTg))
        return WarmStart(Y=np.zeros((d, self._NT)),
                         Yt=tuple(np.zeros((d, self._NTi))
                                  for _ in range(self._sst.N_f)))

    def _warm_from_values(self, gain: np.ndarray, s: np.ndarray,
                          stl: np.ndarray, source: str) -> WarmStart:
        # ``gain`` is Khat in state space or Theta = Khat Bp in uncertainty
        # space; the pivot formula is the same with Bp_eff absorbed.
        st = self._sst
        Np, Nq = st.N_p, st.N_q
        Sc = np.diag(self._E @ s)
        T3 = np.hstack([np.zeros((Np, st.N_z + 1 + Nq)), Sc])
        Y = self._Bp_eff @ T3 + (self._T2_cost_np @ gain).T
        Yts = []
        for g, sl in enumerate(self._groups):
            nf = sl.stop - sl.start
            Sg = np.diag(self._E @ stl[g])
            T3g = np.hstack([np.zeros((Np, 1 + nf + Nq)), Sg])
            Yts.append(self._Bp_eff @ T3g + (self._T2_constr[g] @ gain).T)
        # Rescaling all pivots by a common factor is exactly absorbed by
        # the slack X (the pair (c Y, X/c) reproduces the same program), so
        # normalising to unit magnitude costs nothing and keeps the solver
        # data well conditioned no matter how large the slacks ran.
        c = max(np.abs(Y).max(), max(np.abs(m).max() for m in Yts), 1e-9)
        Y = Y / c
        Yts = [m / c for m in Yts]
        Yt = Yts[0] if self.mode == "single" else tuple(Yts)
        return WarmStart(Y=Y, Yt=Yt, source=source)

    @property
    def _T2_cost_np(self) -> np.ndarray:
        return self._T2_cost

    def bootstrap(self, x0: np.ndarray, f_bar: np.ndarray) -> RmpcSolution:
        """Solve the zero-feedback restriction at ``(x0, f_bar)``."""
        st = self._sst
        self.x0_p.value = np.asarray(x0, dtype=float)
        self.fbar_p.value = np.asarray(f_bar, dtype=float)
        res = run_problem(self.bootstrap_problem, solver=self.solver,
                          **self.solver_opts)
        if res.status == "infeasible":
            raise InfeasibleProblemError(
                f"zero-feedback restriction infeasible at x0={np.asarray(x0).tolist()}")
        if res.status not in ("optimal", "near_optimal"):
            raise NumericalFailureError(f"bootstrap solve failed: {res.raw_status}")
        N, n, n_u = st.N, st.n, st.n_u
        hatted = CausalGainSet(K0=np.asarray(self.b_K0h_v.value),
                               K=np.zeros((st.N_u, st.N_n)),
                               v=np.asarray(self.b_vh_v.value).ravel(),
                               N=N, n=n, n_u=n_u, hatted=True)
        plain = from_hatted(hatted, st)
        s = np.maximum(np.asarray(self.b_s_v.value).ravel(), self.slack_floor)
        stl = np.maximum(np.asarray(self.b_st_v.value), self.slack_floor)
        gain0 = np.zeros((st.N_u, self._xdim))
        warm_next = self._warm_from_values(gain0, s, stl, source="bootstrap")
        mu_groups = tuple(float(v) for v in np.atleast_1d(self.b_mu_v.value))
        Md = np.asarray(self.b_Md_v.value).ravel()
        sol = self._package(
            gamma_sq=float(self.b_gamma2_v.value), hatted=hatted, plain=plain,
            s=s, stl=stl, mu_groups=mu_groups, Md=Md, res=res,
            x0=np.asarray(x0, dtype=float), f_bar=np.asarray(f_bar, dtype=float),
            warm_next=warm_next)
        return self._verified(sol)

    # -- solve ------------------------------------------------------------
    def solve(self, x0: np.ndarray, f_bar: np.ndarray,
              warm: WarmStart | None = None, refine: int = 0,
              fallback: bool = True) -> RmpcSolution:
        """Solve the certificate program at state ``x0`` with bound ``f_bar``.

        Without a warm pivot, one is bootstrapped from the zero-feedback
        restriction (strict feasibility of the pivot is what the
        elimination lemma needs).  ``refine`` re-pivots the linearization
        on the fresh solution that many extra times (sequential
        tightening; receding-horizon use leaves it at 0 and passes the
        previous step's pivot instead).  With ``fallback``, a failing
        pivot is replaced by a fresh bootstrap pivot and, as a last
        resort, the bootstrap solution itself (zero uncertainty feedback)
        is returned rather than raising.
        """
        st = self._sst
        x0 = np.asarray(x0, dtype=float)
        f_bar = np.asarray(f_bar, dtype=float)
        if x0.shape != (st.n,):
            raise ValueError(f"x0 must have shape ({st.n},)")
        if f_bar.shape != (st.N_f,):
            raise ValueError(f"f_bar must have shape ({st.N_f},)")
        if warm is None:
            if self.mode == "multi":
                warm = self.zero_warm()
            else:
                warm = self.bootstrap(x0, f_bar).warm_next
        try:
            sol = self._solve_once(x0, f_bar, warm)
        except RmpcError:
            # The linearized program can fail on a stale pivot even though
            # the underlying problem is fine; a fresh bootstrap pivot is
            # feasible whenever the zero-feedback restriction is.
            if not fallback or self.mode == "multi" or warm.source == "bootstrap":
                raise
            boot = self.bootstrap(x0, f_bar)
            try:
                sol = self._solve_once(x0, f_bar, boot.warm_next)
            except RmpcError:
                sol = boot
        for _ in range(refine):
            sol = self._solve_once(x0, f_bar, sol.warm_next)
        return sol

    def _solve_once(self, x0, f_bar, warm: WarmStart) -> RmpcSolution:
        self.x0_p.value = x0
        self.fbar_p.value = f_bar
        self.Y_p.value = warm.Y
        if self.mode == "single":
            self.Yt_p[0].value = warm.Yt
        else:
            for par, val in zip(self.Yt_p, warm.Yt):
                par.value = val

        res = run_problem(self.problem, solver=self.solver, **self.solver_opts)
        if res.status == "infeasible":
            raise InfeasibleProblemError(
                f"certificate program infeasible at x0={x0.tolist()}")
        if res.status == "timeout":
            raise SolverTimeoutError("conic solver hit its iteration limit")
        if res.status not in ("optimal", "near_optimal"):
            raise NumericalFailureError(f"solver failed: {res.raw_status}")
        return self._extract(res, x0, f_bar)

    def _extract(self, res: SdpResult, x0, f_bar) -> RmpcSolution:
        st = self._sst
        N, n, n_u = st.N, st.n, st.n_u
        X = np.asarray(self.X_v.value)
        sym_eigs = np.linalg.eigvalsh((X + X.T) / 2.0)
        if sym_eigs[0] <= 0.0 or np.linalg.cond(X) > 1e12:
            raise NumericalFailureError("recovered X is numerically singular")
        gain_bar = np.asarray(self._gain_v.value)
        gain = np.linalg.solve(X.T, gain_bar.T).T
        if self.elimination_space == "uncertainty":
            gain[~theta_mask(st)] = 0.0
            Khat = khat_from_theta(st, gain)
        else:
            gain[~causal_mask(N, n_u, n)] = 0.0
            Khat = gain

        hatted = CausalGainSet(K0=np.asarray(self.K0h_v.value), K=Khat,
                               v=np.asarray(self.vh_v.value).ravel(),
                               N=N, n=n, n_u=n_u, hatted=True)
        plain = from_hatted(hatted, st)
        s = np.maximum(np.asarray(self.s_v.value).ravel(), self.slack_floor)
        stl = np.maximum(np.asarray(self.st_v.value), self.slack_floor)
        warm_next = self._warm_from_values(gain, s, stl, source="previous-solve")
        if self.mu_v is not None:
            mu_groups = tuple(float(v) for v in np.atleast_1d(self.mu_v.value))
            Md = np.asarray(self.Md_v.value).ravel()
        else:
            mu_groups = None
            Md = np.zeros(st.N_f)
        sol = self._package(
            gamma_sq=float(self.gamma2_v.value), hatted=hatted, plain=plain,
            s=s, stl=stl, mu_groups=mu_groups, Md=Md, res=res,
            x0=x0.copy(), f_bar=f_bar.copy(), warm_next=warm_next)
        return self._verified(sol)

    def _verified(self, sol: RmpcSolution) -> RmpcSolution:
        """Back-substitute the solution into the nonlinear certificates.

        Near-optimal iterates can carry more feasibility error than the
        built-in shift absorbs, so validity is enforced here rather than
        trusted: a short cost certificate is repaired by raising the bound
        to the smallest value the slacks do certify, and a violated
        constraint certificate rejects the solve (the caller falls back to
        fresh pivots).
        """
        if not self.verify_certificates:
            return sol
        # The bootstrap of the per-row mode certifies through the
        # aggregated form, which its solution fields reflect.
        cert_mode = self.mode
        if self.mode == "multi" and sol.slack_constr_multi is None:
            cert_mode = "single"
        eig_cost, eig_constr = nonlinear_certificates(self.stacked, sol,
                                                      mode=cert_mode)
        if eig_constr < -self.cert_tol:
            raise NumericalFailureError(
                f"constraint certificate violated after solve ({eig_constr:.2e})")
        if eig_cost < -self.cert_tol:
            g2 = certified_gamma_sq(self.stacked, sol, tol=self.cert_tol)
            if not np.isfinite(g2):
                raise NumericalFailureError("cost certificate not repairable")
            sol.gamma_sq = g2
        return sol

    def _package(self, *, gamma_sq, hatted, plain, s, stl, mu_groups, Md,
                 res, x0, f_bar, warm_next) -> RmpcSolution:
        st = self._sst
        d_blocks = self._block_scale()
        structure = tuple(b[0] for b in self.stacked.block_structure)
        # Slacks are reported in the original (unscaled) coordinates: the
        # channel scaling D acts on the scalars as s_orig = s / d^2.
        slack_cost = SlackSet(s=s / d_blocks**2, structure=structure)
        st_multi = stl / d_blocks[None, :]**2
        slack_constr = SlackSet(s=st_multi[0], structure=structure)
        u0 = plain.K0[:st.n_u] @ x0 + plain.v[:st.n_u]
        return RmpcSolution(
            gamma_sq=gamma_sq, K0=plain.K0, K=plain.K, v=plain.v,
            hatted=hatted, slack_cost=slack_cost, slack_constr=slack_constr,
            mu=(mu_groups[0] if mu_groups else 0.0), M_diag=Md,
            solver_status=res.status, solve_time=res.solve_time,
            u0=u0, x0=x0, f_bar=f_bar, warm_next=warm_next,
            num_iters=res.num_iters,
            slack_constr_multi=st_multi if st_multi.shape[0] > 1 else None,
            mu_groups=mu_groups)

    def _block_scale(self) -> np.ndarray:
        out = np.empty(self._nblocks)
        row = 0
        for b, (size, _, _) in enumerate(self.stacked.block_structure):
            out[b] = self._qscale[row]
            row += size
        return out


def warm_from(solver: RmpcSolver, sol: RmpcSolution) -> WarmStart:
    """Pivot for the next solve, refreshed from a previous solution."""
    return sol.warm_next if sol.warm_next is not None else solver.zero_warm()


# ---------------------------------------------------------------------------
# lookup table over the initial-state box
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class LookupTable:
    """Grid of precomputed warm-start pivots over the operating state box."""

    axes: tuple[np.ndarray, ...]
    warms: dict
    infeasible: list

    def query(self, x0: np.ndarray) -> WarmStart:
        idx = tuple(int(np.argmin(np.abs(ax - xi))) for ax, xi in zip(self.axes, x0))
        if idx in self.warms:
            return self.warms[idx]
        if not self.warms:
            raise InfeasibleProblemError("lookup table holds no feasible cell")
        # nearest feasible neighbour by grid-point distance
        best = min(self.warms, key=lambda c: sum(
            (self.axes[d][c[d]] - x0[d]) ** 2 for d in range(len(self.axes))))
        return self.warms[best]


def build_lookup(solver: RmpcSolver, box: list[tuple[float, float, int]],
                 f_bar: np.ndarray, refine: int = 0) -> LookupTable:
    """Solve at every grid point of ``box`` and store the resulting pivots.

    ``box`` lists ``(low, high, npoints)`` per state dimension.  Cells
    where the program is infeasible are recorded and answered by their
    nearest feasible neighbour at query time.
    """
    axes = tuple(np.linspace(lo, hi, int(k)) for lo, hi, k in box)
    if len(axes) != solver.stacked.n:
        raise ValueError("grid must cover every state dimension")
    warms: dict = {}
    infeasible: list = []
    for idx in itertools.product(*(range(len(ax)) for ax in axes)):
        x0 = np.array([axes[d][i] for d, i in enumerate(idx)])
        try:
            sol = solver.solve(x0, f_bar, warm=None, refine=refine)
        except RmpcError:
            infeasible.append(idx)
            continue
        warms[idx] = dataclasses.replace(sol.warm_next, source="lookup")
    return LookupTable(axes=axes, warms=warms, infeasible=infeasible)


# ---------------------------------------------------------------------------
# convenience one-shot interface
# ---------------------------------------------------------------------------

_solver_cache: dict[tuple, RmpcSolver] = {}


def solve_online(stacked: StackedPrediction, x0: np.ndarray, f_bar: np.ndarray,
                 z_bar: np.ndarray | None = None, warm: WarmStart | None = None,
                 **options) -> RmpcSolution:
    """One receding-horizon solve; reuses a compiled solver per stacking."""
    if z_bar is not None and not np.array_equal(z_bar, stacked.zbar):
        raise ValueError("z_bar must match the reference stored on the stacking")
    key = (id(stacked), repr(sorted(options.items())))
    solver = _solver_cache.get(key)
    if solver is None:
        solver = RmpcSolver(stacked, **options)
        _solver_cache[key] = solver
    return solver.solve(x0, f_bar, warm=warm)
