"""Independent small-signal oracle.

The full nonlinear inverter dynamics are linearized numerically (central
finite differences with a Richardson step-halving check) at a Newton-refined
equilibrium. The same right-hand side that the simulator integrates is
differentiated, so there is no model drift between the simulated plant and
its linearization. Admittance sign convention: current positive out of the
inverter, matching the measurement pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .extract import AdmittanceTable
from .plant import (
    InverterParams,
    OperatingPoint,
    equilibrium_state,
    inverter_rhs,
)
from .statespace import StateSpaceModel


class LinearizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Equilibrium:
    """Solved operating state with its defining inputs and residual norm."""

    x: np.ndarray
    v_t: np.ndarray
    residual: float
    converged: bool


def find_equilibrium(params: InverterParams, op: OperatingPoint,
                     x_seed: np.ndarray | None = None,
                     tol: float = 1e-12) -> Equilibrium:
    """Newton solve of the plant right-hand side at the terminal voltage.

    Seeded from a provided state (typically a settled snapshot) or from the
    closed-form equilibrium. On divergence the seed is reported with its own
    residual instead of raising.
    """
    v_t = np.array([op.V_t, 0.0])
    seed = np.asarray(x_seed, float) if x_seed is not None \
        else equilibrium_state(params, op)

    def f(x):
        return inverter_rhs(x, v_t, params, op.P_ref, op.Q_ref)

    sol = optimize.root(f, seed, method="hybr", tol=tol)
    if sol.success:
        resid = float(np.linalg.norm(f(sol.x)))
        if resid < 1e-10:
            return Equilibrium(x=sol.x, v_t=v_t, residual=resid, converged=True)
    resid = float(np.linalg.norm(f(seed)))
    return Equilibrium(x=seed, v_t=v_t, residual=resid, converged=False)


def _central_jacobian(func, x0, h_vec):
    cols = []
    for i, h in enumerate(h_vec):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((func(xp) - func(xm)) / (2.0 * h))
    return np.column_stack(cols)


def _checked_jacobian(func, x0, what: str, rich_tol: float = 1e-5):
    """Central-difference Jacobian with a step-halving consistency check."""
    x0 = np.asarray(x0, dtype=float)
    h = np.maximum(1e-6, 1e-6 * np.abs(x0))
    J1 = _central_jacobian(func, x0, h)
    J2 = _central_jacobian(func, x0, 0.5 * h)
    scale = np.maximum(np.abs(J2), 1e-6 * max(np.abs(J2).max(), 1.0))
    bad = np.abs(J1 - J2) > rich_tol * scale
    if np.any(bad):
        r, c = np.argwhere(bad)[0]
        raise LinearizationError(
            f"{what} entry ({r},{c}) failed the step-halving check: "
            f"h={J1[r, c]:.9g} vs h/2={J2[r, c]:.9g}")
    return J2


def linearize(rhs, output, x0, u0, rich_tol: float = 1e-5) -> StateSpaceModel:
    """Numerical linearization of x' = rhs(x, u), y = output(x, u).

    A, B, C, D by central differences with per-entry adaptive step
    h = max(1e-6, 1e-6 |x_i|); every entry must pass the step-halving
    (Richardson) check to rich_tol relative.
    """
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    A = _checked_jacobian(lambda x: rhs(x, u0), x0, "A", rich_tol)
    B = _checked_jacobian(lambda u: rhs(x0, u), u0, "B", rich_tol)
    C = _checked_jacobian(lambda x: output(x, u0), x0, "C", rich_tol)
    D = _checked_jacobian(lambda u: output(x0, u), u0, "D", rich_tol)
    return StateSpaceModel(A=A, B=B, C=C, D=D)


def oracle_admittance(params: InverterParams, op: OperatingPoint,
                      x_seed: np.ndarray | None = None
                      ) -> tuple[Equilibrium, StateSpaceModel]:
    """Linearized terminal admittance of the inverter at the operating point.

    Input: dq terminal-voltage perturbation; output: dq current out of the
    inverter.
    """
    eq = find_equilibrium(params, op, x_seed=x_seed)
    if eq.residual > 1e-8:
        raise LinearizationError(
            f"equilibrium residual {eq.residual:.3e} too large to linearize")

    def rhs(x, u):
        return inverter_rhs(x, u, params, op.P_ref, op.Q_ref)

    def output(x, u):
        return x[0:2].copy()

    ss = linearize(rhs, output, eq.x, eq.v_t)
    return eq, ss


def freq_response(ss: StateSpaceModel, freqs) -> AdmittanceTable:
    """Evaluate a state-space admittance on a frequency grid as a table."""
    freqs = np.asarray(freqs, dtype=float)
    Y = ss.response(freqs)
    return AdmittanceTable(freqs=freqs, Y=Y, meta={"source": "state-space"})
