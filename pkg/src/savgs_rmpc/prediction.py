"""Horizon stacking and causal-feedback algebra for the discrete model.

Builds the block matrices that map ``[x0; u; p; 1]`` to the stacked state,
uncertainty-output, constraint and cost signals over the horizon, converts
between the plain and re-parameterised ("hatted") causal gain triples, and
evaluates the resulting closed loop for sampled uncertainty operators.
Everything here is plain numpy over immutable inputs.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .model import UncertainLtiModel

__all__ = [
    "StackedPrediction",
    "CausalGainSet",
    "reparameterize_disturbance",
    "stack_horizon",
    "to_hatted",
    "from_hatted",
    "realize_closed_loop",
    "closed_loop_maps",
    "realize_uncertain",
    "delta_diag_from_samples",
]


def reparameterize_disturbance(model: UncertainLtiModel, d_bar: float) -> UncertainLtiModel:
    """Fold the bounded disturbance channel into the uncertainty structure.

    Appends ``B_d`` to ``B_p`` and one zero output row per disturbance to
    ``(C_q, D_qu)`` whose affine offset is ``d_bar``; the new diagonal
    block then reproduces every ``d`` with ``|d| <= d_bar`` as
    ``d = Delta_d * d_bar``.  The disturbance channel itself is removed.
    """
    if not model.discrete:
        raise ValueError("re-parameterise the discrete-time model")
    if model.n_d < 1:
        raise ValueError("model has no disturbance channel")
    if d_bar < 0.0:
        raise ValueError("d_bar must be non-negative")
    n_d = model.n_d
    B_p = np.hstack([model.B_p, model.B_d])
    C_q = np.vstack([model.C_q, np.zeros((n_d, model.n))])
    D_qu = np.vstack([model.D_qu, np.zeros((n_d, model.n_u))])
    offset = np.concatenate([model.offset(), np.full(n_d, d_bar)])
    return dataclasses.replace(
        model,
        B_p=B_p, B_d=np.zeros((model.n, 0)), C_q=C_q, D_qu=D_qu,
        q_offset=offset,
        uncertainty_structure=model.uncertainty_structure + (1,) * n_d,
        uncertainty_kinds=model.uncertainty_kinds + ("dist",) * n_d,
    )


@dataclasses.dataclass(frozen=True)
class StackedPrediction:
    """Horizon-stacked system matrices and their block bookkeeping.

    The map ``[x; q; f; z] = M [x0; u; p; 1]`` is stored blockwise.  Row
    blocks for ``q``, ``f`` and ``z`` cover steps ``0..N-1`` followed by
    the terminal rows; the ``p`` columns likewise end with the terminal
    uncertainty input.  ``block_structure`` lists the scalar sizes of the
    diagonal uncertainty blocks in column order, each tagged with the step
    it belongs to and whether it models dynamics uncertainty or a
    re-parameterised disturbance.
    """

    A: np.ndarray            # (N*n, n)
    Bu: np.ndarray           # (N*n, N_u)
    Bp: np.ndarray           # (N*n, N_p)
    Cq: np.ndarray           # (N_q, n)
    Dqu: np.ndarray
    Dqp: np.ndarray
    dbar: np.ndarray         # (N_q,)
    Cf: np.ndarray
    Dfu: np.ndarray
    Dfp: np.ndarray
    Cz: np.ndarray
    Dzu: np.ndarray
    Dzp: np.ndarray
    zbar: np.ndarray         # (N_z,)
    N: int
    n: int
    n_u: int
    block_structure: tuple[tuple[int, int, str], ...]  # (size, step, kind)
    q_slices: tuple[slice, ...]
    f_slices: tuple[slice, ...]
    z_slices: tuple[slice, ...]
    p_slices: tuple[slice, ...]

    @property
    def N_u(self) -> int:
        return self.Bu.shape[1]

    @property
    def N_n(self) -> int:
        return self.A.shape[0]

    @property
    def N_p(self) -> int:
        return self.Bp.shape[1]

    @property
    def N_q(self) -> int:
        return self.Cq.shape[0]

    @property
    def N_f(self) -> int:
        return self.Cf.shape[0]

    @property
    def N_z(self) -> int:
        return self.Cz.shape[0]

    def save(self, path) -> None:
        """Dump all block matrices to an ``.npz`` file (test fixtures)."""
        arrays = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                  if isinstance(getattr(self, f.name), np.ndarray)}
        np.savez(path, **arrays)


def stack_horizon(model: UncertainLtiModel, N: int) -> StackedPrediction:
    """Unroll the discrete dynamics over ``N`` steps.

    Builds, for each step, the affine map from ``[x0; u; p; 1]`` to the
    state and from there to the stage signals, with the terminal rows
    appended.  The ``p`` feedthrough blocks are strictly lower triangular
    in the step index: uncertainty at step ``j`` can only reach signals at
    later steps through the state.
    """
    if not model.discrete:
        raise ValueError("stack_horizon expects a discrete-time model")
    if model.n_d != 0:
        raise ValueError("re-parameterise the disturbance before stacking")
    if N < 1:
        raise ValueError("horizon must be at least 1")

    n, n_u, n_p = model.n, model.n_u, model.n_p
    N_u = N * n_u
    # Terminal uncertainty input spans the blocks of the plain model
    # structure (no disturbance block at the terminal step).
    n_p_term = model.nq_hat
    N_p = N * n_p + n_p_term
    width = n + N_u + N_p + 1

    u_cols = [slice(n + k * n_u, n + (k + 1) * n_u) for k in range(N)]
    p_cols = [slice(n + N_u + k * n_p, n + N_u + (k + 1) * n_p) for k in range(N)]
    p_cols.append(slice(n + N_u + N * n_p, n + N_u + N_p))

    # E[k] maps [x0; u; p; 1] -> x_k.
    E = np.zeros((N + 1, n, width))
    E[0, :, :n] = np.eye(n)
    for k in range(N):
        E[k + 1] = model.A @ E[k]
        E[k + 1][:, u_cols[k]] += model.B_u
        E[k + 1][:, p_cols[k]] += model.B_p

    def stack_signal(C, Du, offs, C_hat):
        rows = []
        for k in range(N):
            blk = C @ E[k]
            blk[:, u_cols[k]] += Du
            if offs is not None:
                blk[:, -1] += offs
            rows.append(blk)
        rows.append(C_hat @ E[N])
        return np.vstack(rows)

    X = np.vstack([E[k] for k in range(1, N + 1)])
    Q = stack_signal(model.C_q, model.D_qu, model.offset(), model.Cq_hat)
    F = stack_signal(model.C_f, model.D_fu, None, model.Cf_hat)
    Z = stack_signal(model.C_z, model.D_zu, None, model.Cz_hat)

    def parts(M):
        return M[:, :n], M[:, n:n + N_u], M[:, n + N_u:n + N_u + N_p], M[:, -1]

    A_s, Bu_s, Bp_s, _ = parts(X)
    Cq_s, Dqu_s, Dqp_s, dbar_s = parts(Q)
    Cf_s, Dfu_s, Dfp_s, _ = parts(F)
    Cz_s, Dzu_s, Dzp_s, _ = parts(Z)

    def sig_slices(per_step: int, terminal: int):
        out = [slice(k * per_step, (k + 1) * per_step) for k in range(N)]
        out.append(slice(N * per_step, N * per_step + terminal))
        return tuple(out)

    blocks: list[tuple[int, int, str]] = []
    for k in range(N):
        for size, kind in zip(model.uncertainty_structure, model.uncertainty_kinds):
            blocks.append((size, k, kind))
    # Terminal step: dynamics-uncertainty blocks only (no disturbance acts
    # past the last predicted state).
    term = [(size, N, kind) for size, kind in
            zip(model.uncertainty_structure, model.uncertainty_kinds) if kind == "model"]
    if sum(size for size, _, _ in term) != n_p_term:
        raise ValueError("terminal uncertainty blocks do not tile the terminal q rows")
    blocks.extend(term)

    return StackedPrediction(
        A=A_s, Bu=Bu_s, Bp=Bp_s,
        Cq=Cq_s, Dqu=Dqu_s, Dqp=Dqp_s, dbar=dbar_s,
        Cf=Cf_s, Dfu=Dfu_s, Dfp=Dfp_s,
        Cz=Cz_s, Dzu=Dzu_s, Dzp=Dzp_s, zbar=np.zeros(Cz_s.shape[0]),
        N=N, n=n, n_u=n_u,
        block_structure=tuple(blocks),
        q_slices=sig_slices(model.n_q, model.nq_hat),
        f_slices=sig_slices(model.n_f, model.nf_hat),
        z_slices=sig_slices(model.n_z, model.nz_hat),
        p_slices=tuple(sl for sl in (
            [slice(k * n_p, (k + 1) * n_p) for k in range(N)]
            + [slice(N * n_p, N_p)]
        )),
    )


def causal_mask(N: int, n_u: int, n: int) -> np.ndarray:
    """Boolean mask of the allowed entries of ``K`` (u_i may use x_1..x_i)."""
    mask = np.zeros((N * n_u, N * n), dtype=bool)
    for i in range(N):
        for j in range(1, N + 1):
            if j <= i:
                mask[i * n_u:(i + 1) * n_u, (j - 1) * n:j * n] = True
    return mask


@dataclasses.dataclass(frozen=True)
class CausalGainSet:
    """Gain triple of the causal feedback ``u = K0 x0 + K x + v``.

    ``hatted`` marks the re-parameterised triple acting on the uncertainty
    input instead of the state stack (``u = K0 x0 + K Bp p + v``).
    """

    K0: np.ndarray
    K: np.ndarray
    v: np.ndarray
    N: int
    n: int
    n_u: int
    hatted: bool = False

    def __post_init__(self) -> None:
        mask = causal_mask(self.N, self.n_u, self.n)
        if self.K.shape != mask.shape:
            raise ValueError(f"K has shape {self.K.shape}, expected {mask.shape}")
        if np.any(np.abs(self.K[~mask]) > 0.0):
            raise ValueError("K violates the causal block-triangular pattern")
        if self.K0.shape != (self.N * self.n_u, self.n):
            raise ValueError("K0 has the wrong shape")
        if self.v.shape != (self.N * self.n_u,):
            raise ValueError("v has the wrong shape")


def to_hatted(gains: CausalGainSet, stacked: StackedPrediction) -> CausalGainSet:
    """Map ``(K0, K, v)`` to the hatted triple via ``(I - K Bu)^{-1}``."""
    if gains.hatted:
        raise ValueError("gains are already hatted")
    M = np.eye(stacked.N_u) - gains.K @ stacked.Bu
    sol = np.linalg.solve(M, np.hstack([gains.K0 + gains.K @ stacked.A,
                                        gains.K,
                                        gains.v[:, None]]))
    n = stacked.n
    return CausalGainSet(K0=sol[:, :n], K=_zero_offpattern(sol[:, n:-1], gains),
                         v=sol[:, -1], N=gains.N, n=gains.n, n_u=gains.n_u, hatted=True)


def from_hatted(hatted: CausalGainSet, stacked: StackedPrediction) -> CausalGainSet:
    """Inverse of :func:`to_hatted`."""
    if not hatted.hatted:
        raise ValueError("gains are not hatted")
    M = np.eye(stacked.N_u) + hatted.K @ stacked.Bu
    sol = np.linalg.solve(M, np.hstack([hatted.K0 - hatted.K @ stacked.A,
                                        hatted.K,
                                        hatted.v[:, None]]))
    n = stacked.n
    return CausalGainSet(K0=sol[:, :n], K=_zero_offpattern(sol[:, n:-1], hatted),
                         v=sol[:, -1], N=hatted.N, n=hatted.n, n_u=hatted.n_u, hatted=False)


def _zero_offpattern(K: np.ndarray, like: CausalGainSet) -> np.ndarray:
    # The triangular solve preserves causality exactly; scrub the float
    # zeros so the constructor's pattern check stays strict.
    out = K.copy()
    out[~causal_mask(like.N, like.n_u, like.n)] = 0.0
    return out


def closed_loop_maps(stacked: StackedPrediction, hatted: CausalGainSet,
                     x0: np.ndarray):
    """Affine closed-loop coefficient blocks for ``u = K0 x0 + K Bp p + v``.

    Returns ``(q0, Qp, f0, Fp, z0, Zp)`` such that ``q = q0 + Qp p``,
    ``f = f0 + Fp p`` and ``z - zbar = z0 + Zp p``.
    """
    KB = hatted.K @ stacked.Bp
    u0 = hatted.K0 @ x0 + hatted.v
    q0 = stacked.Cq @ x0 + stacked.Dqu @ u0 + stacked.dbar
    f0 = stacked.Cf @ x0 + stacked.Dfu @ u0
    z0 = stacked.Cz @ x0 + stacked.Dzu @ u0 - stacked.zbar
    Qp = stacked.Dqp + stacked.Dqu @ KB
    Fp = stacked.Dfp + stacked.Dfu @ KB
    Zp = stacked.Dzp + stacked.Dzu @ KB
    return q0, Qp, f0, Fp, z0, Zp


def realize_closed_loop(stacked: StackedPrediction, hatted: CausalGainSet,
                        x0: np.ndarray, p: np.ndarray):
    """Evaluate ``(u, f, z)`` for a given uncertainty input sequence ``p``."""
    q0, Qp, f0, Fp, z0, Zp = closed_loop_maps(stacked, hatted, x0)
    del q0, Qp
    u = hatted.K0 @ x0 + hatted.K @ (stacked.Bp @ p) + hatted.v
    f = f0 + Fp @ p
    z = z0 + Zp @ p + stacked.zbar
    return u, f, z


def realize_uncertain(stacked: StackedPrediction, hatted: CausalGainSet,
                      x0: np.ndarray, delta_diag: np.ndarray):
    """Resolve ``p = Delta q`` for diagonal operator samples and realize.

    ``delta_diag`` holds the diagonal of the stacked operator, of shape
    ``(N_q,)`` or batched ``(S, N_q)``.  The coupling ``q = q0 + Qp p`` is
    strictly causal in the step index, so the fixed point is resolved by
    forward substitution over the step blocks.  Returns ``(p, u, f, cost)``
    where ``cost = ||z - zbar||^2`` per sample.
    """
    q0, Qp, f0, Fp, z0, Zp = closed_loop_maps(stacked, hatted, x0)
    single = delta_diag.ndim == 1
    D = np.atleast_2d(delta_diag)
    if D.shape[1] != stacked.N_q:
        raise ValueError("delta_diag must have one entry per q row")
    S = D.shape[0]
    p = np.zeros((S, stacked.N_p))
    for sl_q, sl_p in zip(stacked.q_slices, stacked.p_slices):
        q_blk = q0[sl_q][None, :] + p @ Qp[sl_q].T
        p[:, sl_p] = D[:, sl_q] * q_blk
    f = f0[None, :] + p @ Fp.T
    zerr = z0[None, :] + p @ Zp.T
    cost = np.einsum("ij,ij->i", zerr, zerr)
    u = hatted.K0 @ x0 + (p @ stacked.Bp.T) @ hatted.K.T + hatted.v
    if single:
        return p[0], u[0], f[0], cost[0]
    return p, u, f, cost


def delta_diag_from_samples(stacked: StackedPrediction, delta_model: np.ndarray,
                            d_over_dbar: np.ndarray) -> np.ndarray:
    """Assemble stacked diagonal operators from physical samples.

    ``delta_model``: scalar dynamics-uncertainty value per sample, shape
    ``(S,)`` (time-invariant across the horizon).  ``d_over_dbar``:
    normalised disturbance per step, shape ``(S, N)`` with entries in
    ``[-1, 1]``.  Returns ``(S, N_q)`` diagonals aligned with the block
    structure.
    """
    delta_model = np.atleast_1d(delta_model)
    d_over_dbar = np.atleast_2d(d_over_dbar)
    S = delta_model.shape[0]
    out = np.zeros((S, stacked.N_q))
    col = 0
    for size, step, kind in stacked.block_structure:
        for _ in range(size):
            if kind == "model":
                out[:, col] = delta_model
            else:
                out[:, col] = d_over_dbar[:, step]
            col += 1
    return out
