"""Minimal real LTI state-space container shared by the oracle, the fitted
model realization, and the closed-loop assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class StateSpaceModel:
    """x' = A x + B u, y = C x + D u (all real).

    For admittance models: u is the dq terminal-voltage perturbation and y
    the dq current perturbation, current positive out of the inverter.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        if B.shape[0] != n or C.shape[1] != n:
            raise ValueError("B/C dimensions do not match A")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError("D dimensions do not match B/C")
        for name, M in (("A", A), ("B", B), ("C", C), ("D", D)):
            M = M.copy()
            M.flags.writeable = False
            object.__setattr__(self, name, M)

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)

    def response(self, f_hz) -> np.ndarray:
        """Frequency response C (j*2*pi*f I - A)^-1 B + D.

        Returns shape (len(f), ny, nu); raises if j*omega hits an eigenvalue.
        """
        f = np.atleast_1d(np.asarray(f_hz, dtype=float))
        n = self.n_states
        eye = np.eye(n)
        out = np.empty((f.size, self.C.shape[0], self.B.shape[1]), dtype=complex)
        for k, fk in enumerate(f):
            s = 2j * np.pi * fk
            M = s * eye - self.A
            try:
                sol = np.linalg.solve(M, self.B)
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"response singular at {fk} Hz "
                                 "(j*omega equals an eigenvalue)") from exc
            out[k] = self.C @ sol + self.D
        return out


def static_gain_model(D) -> StateSpaceModel:
    """A state-free system y = D u."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    n_out, n_in = D.shape
    return StateSpaceModel(A=np.zeros((0, 0)), B=np.zeros((0, n_in)),
                          C=np.zeros((n_out, 0)), D=D)
