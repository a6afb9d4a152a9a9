"""Linear-equivalent quarter-car models with structured uncertainty.

The state of the base model is ``x = [zs_dot, zu_dot, dl_s, dl_t, dz_lin]``:
sprung/unsprung vertical velocities, suspension and tire deflection
increments, and the equivalent linear actuator displacement increment.
The control input is ``u = dz_lin_dot`` and the road excitation enters as
``d = zr_dot``.  Damping deviation around its nominal value is captured by
a scalar norm-bounded feedback block acting through the channels
``p = Delta q``.

The PI-augmented model appends the tracking-error integral
``x6 = integral of (0 - dz_lin)`` so that a proportional-integral loop on
the actuator displacement becomes part of the prediction model; the
augmentation uses the error convention (negative feedback on ``dz_lin``),
which is the sign that makes the drift loop stable.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.linalg import expm

from .params import QuarterCarParams

__all__ = [
    "UncertainLtiModel",
    "AugmentedModel",
    "build_nominal",
    "build_uncertain",
    "augment_pi",
    "discretize_zoh",
]


@dataclasses.dataclass(frozen=True)
class UncertainLtiModel:
    """LTI model with uncertainty, disturbance, constraint and cost channels.

    Dynamics (continuous or discrete according to ``discrete``)::

        x+ = A x + B_u u + B_p p + B_d d
        q  = C_q x + D_qu u + q_offset,   p = Delta q
        f  = C_f x + D_fu u
        z  = C_z x + D_zu u

    plus terminal rows ``q_N = Cq_hat x_N``, ``f_N = Cf_hat x_N``,
    ``z_N = Cz_hat x_N``.  Feedthrough of ``p`` and ``d`` into ``f`` and
    ``z`` is structurally zero for the suspension instance (uncertainty
    and disturbances act on the state dynamics only).

    ``uncertainty_structure`` lists the square block sizes of the
    block-diagonal operator set; the suspension instance has a single
    scalar block.  ``q_offset`` carries the affine term introduced when a
    bounded disturbance is re-parameterised as an extra uncertainty block.
    """

    A: np.ndarray
    B_u: np.ndarray
    B_p: np.ndarray
    B_d: np.ndarray
    C_q: np.ndarray
    D_qu: np.ndarray
    C_f: np.ndarray
    D_fu: np.ndarray
    C_z: np.ndarray
    D_zu: np.ndarray
    Cq_hat: np.ndarray
    Cf_hat: np.ndarray
    Cz_hat: np.ndarray
    uncertainty_structure: tuple[int, ...] = ()
    uncertainty_kinds: tuple[str, ...] = ()   # "model" or "dist" per block
    q_offset: np.ndarray | None = None
    discrete: bool = False
    Ts: float = 0.0

    def __post_init__(self) -> None:
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        checks = {
            "B_u": (n, self.n_u), "B_p": (n, self.n_p), "B_d": (n, self.n_d),
            "C_q": (self.n_q, n), "D_qu": (self.n_q, self.n_u),
            "C_f": (self.n_f, n), "D_fu": (self.n_f, self.n_u),
            "C_z": (self.n_z, n), "D_zu": (self.n_z, self.n_u),
            "Cq_hat": (self.nq_hat, n), "Cf_hat": (self.nf_hat, n),
            "Cz_hat": (self.nz_hat, n),
        }
        for name, shape in checks.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if sum(self.uncertainty_structure) != self.n_p:
            raise ValueError("uncertainty blocks must tile the p channel")
        kinds = self.uncertainty_kinds or ("model",) * len(self.uncertainty_structure)
        object.__setattr__(self, "uncertainty_kinds", kinds)
        if len(self.uncertainty_kinds) != len(self.uncertainty_structure):
            raise ValueError("one kind tag per uncertainty block is required")
        if self.q_offset is not None and self.q_offset.shape != (self.n_q,):
            raise ValueError("q_offset must match the q dimension")

    # -- dimensions ------------------------------------------------------
    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B_u.shape[1]

    @property
    def n_p(self) -> int:
        return self.B_p.shape[1]

    @property
    def n_d(self) -> int:
        return self.B_d.shape[1]

    @property
    def n_q(self) -> int:
        return self.C_q.shape[0]

    @property
    def n_f(self) -> int:
        return self.C_f.shape[0]

    @property
    def n_z(self) -> int:
        return self.C_z.shape[0]

    @property
    def nq_hat(self) -> int:
        return self.Cq_hat.shape[0]

    @property
    def nf_hat(self) -> int:
        return self.Cf_hat.shape[0]

    @property
    def nz_hat(self) -> int:
        return self.Cz_hat.shape[0]

    def offset(self) -> np.ndarray:
        return np.zeros(self.n_q) if self.q_offset is None else self.q_offset


@dataclasses.dataclass(frozen=True)
class AugmentedModel:
    """PI-augmented model: six states, the last one the tracking-error integral."""

    base: UncertainLtiModel
    r: np.ndarray       # actuator displacement selector [0 0 0 0 1]
    Kp: float
    Ki: float


def _signal_rows(p: QuarterCarParams) -> tuple[np.ndarray, ...]:
    """Stage/terminal cost and constraint rows of the suspension instance."""
    cs, ks = p.c_eq_nom / p.m_s, p.k_eq / p.m_s
    acc_row = np.array([-cs, cs, ks, 0.0, -ks])
    C_z = np.vstack([p.w1 * acc_row,
                     [0.0, 0.0, 0.0, p.w2, 0.0],
                     np.zeros(5)])
    D_zu = np.array([[-cs * p.w1], [0.0], [p.w3]])
    Cz_hat = np.vstack([p.w4 * acc_row, [0.0, 0.0, 0.0, p.w5, 0.0]])
    C_f = np.array([
        [0.0, 0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0, -1.0],
        [0.0, 0.0, 1.0, 0.0, -1.0],
        [0.0, 0.0, -1.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ])
    D_fu = np.array([[0.0], [0.0], [0.0], [0.0], [1.0], [-1.0]])
    Cf_hat = C_f[:4].copy()
    return C_z, D_zu, Cz_hat, C_f, D_fu, Cf_hat


def _state_matrices(p: QuarterCarParams, c_eq: float) -> tuple[np.ndarray, ...]:
    A = np.array([
        [-c_eq / p.m_s, c_eq / p.m_s, p.k_eq / p.m_s, 0.0, -p.k_eq / p.m_s],
        [c_eq / p.m_u, -(c_eq + p.c_t) / p.m_u, -p.k_eq / p.m_u, p.k_t / p.m_u, p.k_eq / p.m_u],
        [-1.0, 1.0, 0.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ])
    B_u = np.array([[-c_eq / p.m_s], [c_eq / p.m_u], [0.0], [0.0], [1.0]])
    B_d = np.array([[0.0], [p.c_t / p.m_u], [0.0], [1.0], [0.0]])
    return A, B_u, B_d


def build_nominal(params: QuarterCarParams) -> UncertainLtiModel:
    """Continuous nominal model: no uncertainty channel (``n_p = n_q = 0``)."""
    A, B_u, B_d = _state_matrices(params, params.c_eq_nom)
    C_z, D_zu, Cz_hat, C_f, D_fu, Cf_hat = _signal_rows(params)
    return UncertainLtiModel(
        A=A, B_u=B_u, B_p=np.zeros((5, 0)), B_d=B_d,
        C_q=np.zeros((0, 5)), D_qu=np.zeros((0, 1)),
        C_f=C_f, D_fu=D_fu, C_z=C_z, D_zu=D_zu,
        Cq_hat=np.zeros((0, 5)), Cf_hat=Cf_hat, Cz_hat=Cz_hat,
        uncertainty_structure=(),
    )


def build_uncertain(params: QuarterCarParams) -> UncertainLtiModel:
    """Continuous uncertain model with the scalar damping-deviation block.

    The closed feedback ``A + B_p * Delta * C_q`` (and ``B_u + B_p * Delta
    * D_qu`` on the input channel) reproduces the nominal model with
    damping ``c_eq_nom + Delta * c_eq_dev`` for any ``|Delta| <= 1``.
    """
    A, B_u, B_d = _state_matrices(params, params.c_eq_nom)
    C_z, D_zu, Cz_hat, C_f, D_fu, Cf_hat = _signal_rows(params)
    dev = params.c_eq_dev
    B_p = np.array([[1.0 / params.m_s], [-1.0 / params.m_u], [0.0], [0.0], [0.0]])
    C_q = np.array([[-dev, dev, 0.0, 0.0, 0.0]])
    D_qu = np.array([[-dev]])
    return UncertainLtiModel(
        A=A, B_u=B_u, B_p=B_p, B_d=B_d,
        C_q=C_q, D_qu=D_qu, C_f=C_f, D_fu=D_fu, C_z=C_z, D_zu=D_zu,
        Cq_hat=C_q.copy(), Cf_hat=Cf_hat, Cz_hat=Cz_hat,
        uncertainty_structure=(1,),
    )


def augment_pi(model: UncertainLtiModel, Kp: float, Ki: float) -> AugmentedModel:
    """Close a PI drift loop around the model and append its integral state.

    The integral state accumulates the tracking error ``0 - dz_lin``; the
    PI output ``u_pi = Kp*(0 - dz_lin) + Ki*x6`` is absorbed into the state
    matrix, so the remaining input ``u`` is the perturbation commanded on
    top of the PI.  Output rows gain one zero column; the actuator
    displacement selector row is exposed as ``r``.
    """
    if model.discrete:
        raise ValueError("augment_pi expects a continuous-time model")
    n = model.n
    if n != 5:
        raise ValueError("expected the 5-state quarter-car model")
    r = np.zeros((1, n))
    r[0, -1] = 1.0

    A_t = np.zeros((n + 1, n + 1))
    A_t[:n, :n] = model.A - model.B_u @ (Kp * r)   # proportional action on the error
    A_t[:n, n:] = model.B_u * Ki                   # integral action
    A_t[n, :n] = -r                                # error integral: d(x6)/dt = -dz_lin

    pad = lambda M: np.vstack([M, np.zeros((1, M.shape[1]))])
    ext = lambda M: np.hstack([M, np.zeros((M.shape[0], 1))])

    base = UncertainLtiModel(
        A=A_t, B_u=pad(model.B_u), B_p=pad(model.B_p), B_d=pad(model.B_d),
        C_q=ext(model.C_q), D_qu=model.D_qu.copy(),
        C_f=ext(model.C_f), D_fu=model.D_fu.copy(),
        C_z=ext(model.C_z), D_zu=model.D_zu.copy(),
        Cq_hat=ext(model.Cq_hat), Cf_hat=ext(model.Cf_hat), Cz_hat=ext(model.Cz_hat),
        uncertainty_structure=model.uncertainty_structure,
        q_offset=model.q_offset,
    )
    return AugmentedModel(base=base, r=r[0].copy(), Kp=Kp, Ki=Ki)


def discretize_zoh(model: UncertainLtiModel, Ts: float) -> UncertainLtiModel:
    """Zero-order-hold discretization of all input channels.

    ``A_d = exp(A*Ts)`` and ``[B_u B_p B_d]_d = int_0^Ts exp(A*tau) dtau @
    [B_u B_p B_d]``, evaluated through a single exponential of the
    augmented matrix ``[[A, B], [0, 0]]``.  Output rows are unchanged.
    """
    if model.discrete:
        raise ValueError("model is already discrete")
    if Ts <= 0.0:
        raise ValueError("Ts must be positive")
    n = model.n
    B = np.hstack([model.B_u, model.B_p, model.B_d])
    m = B.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = model.A
    aug[:n, n:] = B
    phi = expm(aug * Ts)
    A_d = phi[:n, :n]
    B_d_all = phi[:n, n:]
    splits = np.cumsum([model.n_u, model.n_p])
    B_u_d, B_p_d, B_dd = np.hsplit(B_d_all, splits)
    return dataclasses.replace(model, A=A_d, B_u=B_u_d, B_p=B_p_d, B_d=B_dd,
                               discrete=True, Ts=Ts)
