"""Common-pole rational fitting of measured 2x2 frequency responses.

Classic two-stage relocated-pole scheme: a scaling function sigma(s) with
unit asymptote is fitted jointly with scaled responses by linear least
squares, the relocated poles are the zeros of sigma (eigenvalues of the
sigma realization's A - b c^T), unstable relocations are reflected into the
left half-plane, and after n_iterations a final least squares recovers one
residue matrix per pole plus constant and proportional terms shared across
all four matrix elements through the common pole set.

Real arithmetic throughout: conjugate pole pairs use the paired basis
    phi'  = 1/(s-p) + 1/(s-conj(p)),
    phi'' = j/(s-p) - j/(s-conj(p)),
so fitted coefficients are real and the model satisfies
Y(-j w) = conj(Y(j w)) by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .extract import AdmittanceTable
from .statespace import StateSpaceModel

_REAL_TOL = 1e-9


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class RationalModel:
    """Pole-residue model Y(s) = sum_k R_k / (s - p_k) + D + s E.

    Poles in rad/s, closed under conjugation (reals first, then pairs with
    the +imag member leading); residues conjugate-paired consistently; D and
    E real 2x2.
    """

    poles: np.ndarray
    residues: np.ndarray
    D: np.ndarray
    E: np.ndarray
    fit_rms: float = np.nan

    def __post_init__(self):
        poles = np.asarray(self.poles, dtype=complex)
        residues = np.asarray(self.residues, dtype=complex)
        if residues.shape != (poles.size, 2, 2):
            raise ValueError("residues must have shape (n_poles, 2, 2)")
        _check_conjugate_closure(poles, residues)
        object.__setattr__(self, "poles", poles)
        object.__setattr__(self, "residues", residues)
        object.__setattr__(self, "D", np.asarray(self.D, dtype=float).reshape(2, 2))
        object.__setattr__(self, "E", np.asarray(self.E, dtype=float).reshape(2, 2))

    @property
    def n_poles(self) -> int:
        return self.poles.size

    def evaluate(self, f_hz) -> np.ndarray:
        """Model response at real frequencies, shape (nf, 2, 2)."""
        s = 2j * np.pi * np.atleast_1d(np.asarray(f_hz, dtype=float))
        out = np.zeros((s.size, 2, 2), dtype=complex)
        for p, R in zip(self.poles, self.residues):
            out += R[None, :, :] / (s - p)[:, None, None]
        out += self.D[None, :, :]
        out += s[:, None, None] * self.E[None, :, :]
        return out


@dataclass(frozen=True)
class FitReport:
    """Order-selection record: rms-vs-order curve and the final choice."""

    orders: tuple[int, ...]
    rms: tuple[float, ...]
    selected: int
    underfit: bool
    rms_target: float


def _check_conjugate_closure(poles, residues):
    k = 0
    n = poles.size
    while k < n:
        if abs(poles[k].imag) <= _REAL_TOL * max(1.0, abs(poles[k])):
            if np.max(np.abs(residues[k].imag)) > 1e-6 * max(
                    1.0, np.max(np.abs(residues[k]))):
                raise ValueError(f"real pole {poles[k]:.6g} has complex residue")
            k += 1
            continue
        if k + 1 >= n or abs(poles[k + 1] - np.conj(poles[k])) > 1e-6 * abs(poles[k]):
            raise ValueError("complex poles must come in conjugate pairs")
        if np.max(np.abs(residues[k + 1] - np.conj(residues[k]))) > 1e-6 * max(
                1.0, np.max(np.abs(residues[k]))):
            raise ValueError("conjugate pair residues must be conjugates")
        k += 2


def _canonical_poles(raw) -> np.ndarray:
    """Order poles reals-first and force exact conjugate pairing."""
    raw = np.asarray(raw, dtype=complex)
    reals = [p.real + 0.0j for p in raw if abs(p.imag) <= _REAL_TOL * max(1.0, abs(p))]
    uppers = [p for p in raw if p.imag > _REAL_TOL * max(1.0, abs(p))]
    lowers = [p for p in raw if p.imag < -_REAL_TOL * max(1.0, abs(p))]
    if len(uppers) != len(lowers):
        # an almost-real straggler: demote the smallest-imag complex to real
        pool = sorted(uppers + lowers, key=lambda p: abs(p.imag))
        while len(pool) % 2:
            reals.append(pool.pop(0).real + 0.0j)
        uppers = [p for p in pool if p.imag > 0]
        lowers = [p for p in pool if p.imag < 0]
    uppers.sort(key=lambda p: (abs(p.imag), p.real))
    lowers.sort(key=lambda p: (abs(p.imag), p.real))
    out = sorted(reals, key=lambda p: p.real)
    for pu, pl in zip(uppers, lowers):
        p = 0.5 * (pu + np.conj(pl))
        out.extend([p, np.conj(p)])
    return np.array(out)


def _cindex(poles) -> np.ndarray:
    """0 real, 1 first of a conjugate pair, 2 second."""
    idx = np.zeros(poles.size, dtype=np.int64)
    k = 0
    while k < poles.size:
        if abs(poles[k].imag) <= _REAL_TOL * max(1.0, abs(poles[k])):
            k += 1
        else:
            idx[k] = 1
            idx[k + 1] = 2
            k += 2
    return idx


def _basis(poles, s) -> np.ndarray:
    """Real-coefficient partial-fraction basis, shape (ns, n_poles)."""
    cidx = _cindex(poles)
    ns = s.size
    Phi = np.zeros((ns, poles.size), dtype=complex)
    for k, p in enumerate(poles):
        if cidx[k] == 0:
            Phi[:, k] = 1.0 / (s - p.real)
        elif cidx[k] == 1:
            Phi[:, k] = 1.0 / (s - p) + 1.0 / (s - np.conj(p))
            Phi[:, k + 1] = 1j / (s - p) - 1j / (s - np.conj(p))
    return Phi


def initial_poles(n_poles: int, f_min: float = 1.0, f_max: float = 200.0) -> np.ndarray:
    """Conjugate pairs, imaginary parts log-spaced over the band,
    real part -imag/100; one real pole absorbs an odd count."""
    if n_poles < 1:
        raise ValueError("n_poles must be >= 1")
    poles = []
    n_pairs = n_poles // 2
    if n_poles % 2:
        poles.append(complex(-2.0 * np.pi * np.sqrt(f_min * f_max) / 100.0, 0.0))
    if n_pairs:
        ims = 2.0 * np.pi * np.geomspace(f_min, f_max, n_pairs)
        for w in ims:
            poles.extend([complex(-w / 100.0, w), complex(-w / 100.0, -w)])
    return _canonical_poles(np.array(poles))


def _scale_columns(M):
    scale = np.linalg.norm(M, axis=0)
    scale[scale == 0.0] = 1.0
    return M / scale, scale


def _relocate_poles(poles, s, F, weights) -> np.ndarray:
    """One sigma-fit iteration; returns the relocated pole set.

    F has shape (n_el, ns); weights likewise (or None). sigma keeps a unit
    asymptote, so the residues of sigma are the only shared unknowns.
    """
    n = poles.size
    n_el, ns = F.shape
    Phi = _basis(poles, s)
    # unknown layout: per element [c_m (n), d_m] then shared sigma residues
    n_lhs = n_el * (n + 1)
    rows = []
    rhs = []
    for m in range(n_el):
        w = np.ones(ns) if weights is None else weights[m]
        block = np.zeros((ns, n_lhs + n), dtype=complex)
        block[:, m * (n + 1): m * (n + 1) + n] = Phi * w[:, None]
        block[:, m * (n + 1) + n] = w
        block[:, n_lhs:] = -Phi * (w * F[m])[:, None]
        rows.append(block)
        rhs.append(w * F[m])
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    A = np.vstack([A.real, A.imag])
    b = np.concatenate([b.real, b.imag])
    A, col_scale = _scale_columns(A)
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    if rank < A.shape[1]:
        raise FitError(
            f"pole-identification least squares is rank deficient "
            f"({rank}/{A.shape[1]}); try fewer poles")
    c_sigma = sol[n_lhs:] / col_scale[n_lhs:]

    # zeros of sigma: eigenvalues of A_sigma - b_sigma c_sigma^T
    cidx = _cindex(poles)
    A_sig = np.zeros((n, n))
    b_sig = np.zeros(n)
    k = 0
    while k < n:
        if cidx[k] == 0:
            A_sig[k, k] = poles[k].real
            b_sig[k] = 1.0
            k += 1
        else:
            sr, si = poles[k].real, poles[k].imag
            A_sig[k, k] = sr
            A_sig[k + 1, k + 1] = sr
            A_sig[k, k + 1] = si
            A_sig[k + 1, k] = -si
            b_sig[k] = 2.0
            k += 2
    H = A_sig - np.outer(b_sig, c_sigma)
    new_poles = np.linalg.eigvals(H)
    # reflect unstable relocations into the left half-plane
    new_poles = np.where(new_poles.real > 0.0,
                         -new_poles.real + 1j * new_poles.imag, new_poles)
    return _canonical_poles(new_poles)


def _fit_residues(poles, s, F, weights, fit_constant=True,
                  fit_proportional=False):
    """Least-squares residues (plus D, E) for a fixed pole set."""
    n = poles.size
    n_el, ns = F.shape
    Phi = _basis(poles, s)
    n_extra = int(fit_constant) + int(fit_proportional)
    coeffs = np.zeros((n_el, n + n_extra))
    fit = np.zeros_like(F)
    for m in range(n_el):
        w = np.ones(ns) if weights is None else weights[m]
        cols = [Phi * w[:, None]]
        if fit_constant:
            cols.append(w[:, None].astype(complex))
        if fit_proportional:
            cols.append((w * s)[:, None])
        A = np.hstack(cols)
        A = np.vstack([A.real, A.imag])
        b = np.concatenate([(w * F[m]).real, (w * F[m]).imag])
        A, col_scale = _scale_columns(A)
        sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
        if rank < A.shape[1]:
            raise FitError("residue least squares is rank deficient; "
                           "try fewer poles")
        sol = sol / col_scale
        coeffs[m] = sol
        fit[m] = _eval_coeffs(poles, s, sol, fit_constant, fit_proportional)
    return coeffs, fit


def _eval_coeffs(poles, s, sol, fit_constant, fit_proportional):
    Phi = _basis(poles, s)
    y = Phi @ sol[: poles.size].astype(complex)
    k = poles.size
    if fit_constant:
        y = y + sol[k]
        k += 1
    if fit_proportional:
        y = y + sol[k] * s
    return y


def _coeffs_to_residues(poles, coeffs_row) -> np.ndarray:
    """Real paired coefficients -> complex residues aligned with poles."""
    cidx = _cindex(poles)
    res = np.zeros(poles.size, dtype=complex)
    k = 0
    while k < poles.size:
        if cidx[k] == 0:
            res[k] = coeffs_row[k]
            k += 1
        else:
            res[k] = coeffs_row[k] + 1j * coeffs_row[k + 1]
            res[k + 1] = np.conj(res[k])
            k += 2
    return res


def vector_fit(table: AdmittanceTable, n_poles: int, n_iterations: int = 8,
               fit_constant: bool = True, fit_proportional: bool = False,
               inverse_magnitude_weighting: bool = False,
               reloc_tol: float = 1e-8) -> RationalModel:
    """Fit a common-pole rational model to a 2x2 admittance table.

    Runs n_iterations of pole relocation then one residue solve. Emits a
    warning (with the last iterate kept) if the poles are still moving by
    more than reloc_tol relative when the iterations run out.
    """
    if n_poles < 1:
        raise FitError("n_poles must be >= 1")
    if len(table) < 2 * n_poles:
        raise FitError(f"need at least {2 * n_poles} frequencies for "
                       f"{n_poles} poles, table has {len(table)}")
    s = 2j * np.pi * table.freqs
    F = table.Y.reshape(len(table), 4).T.copy()   # rows: dd, dq, qd, qq
    weights = None
    if inverse_magnitude_weighting:
        weights = 1.0 / np.maximum(np.abs(F), 1e-12)

    poles = initial_poles(n_poles,
                          max(table.freqs[0], 1e-3), table.freqs[-1])
    moved = np.inf
    for _ in range(n_iterations):
        new_poles = _relocate_poles(poles, s, F, weights)
        moved = float(np.max(np.abs(np.sort_complex(new_poles)
                                    - np.sort_complex(poles))
                             / np.maximum(np.abs(poles), 1.0)))
        poles = new_poles
        if moved < reloc_tol:
            break
    if moved >= 1e-3:
        warnings.warn(
            f"pole relocation not converged after {n_iterations} iterations "
            f"(last relative movement {moved:.2e}); keeping last iterate",
            stacklevel=2)

    coeffs, fit = _fit_residues(poles, s, F, weights,
                                fit_constant, fit_proportional)
    if fit_constant:
        # a constant term buried in the fit error is an artifact of the
        # least squares, and a noise-level feedthrough wrecks closed-loop
        # use (its inverse enters the interconnection); drop and refit
        abs_err = np.sqrt(np.mean(np.abs(fit - F) ** 2))
        d_vals = coeffs[:, n_poles]
        if np.max(np.abs(d_vals)) < 10.0 * max(abs_err, 1e-300):
            fit_constant = False
            coeffs, fit = _fit_residues(poles, s, F, weights,
                                        fit_constant, fit_proportional)
    residues = np.zeros((n_poles, 2, 2), dtype=complex)
    D = np.zeros((2, 2))
    E = np.zeros((2, 2))
    for m, (r, c) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        residues[:, r, c] = _coeffs_to_residues(poles, coeffs[m, :n_poles])
        k = n_poles
        if fit_constant:
            D[r, c] = coeffs[m, k]
            k += 1
        if fit_proportional:
            E[r, c] = coeffs[m, k]
    rms = float(np.sqrt(np.mean(np.abs(fit - F) ** 2))
                / np.sqrt(np.mean(np.abs(F) ** 2)))
    return RationalModel(poles=poles, residues=residues, D=D, E=E, fit_rms=rms)


def auto_order_fit(table: AdmittanceTable, rms_target: float = 1e-3,
                   max_poles: int = 20, **kw) -> tuple[RationalModel, FitReport]:
    """Increase the pole count by conjugate pairs until the fit is good.

    Returns the first model with fit_rms <= rms_target; if max_poles is
    reached first, the best model is returned flagged as underfit.
    """
    if rms_target <= 0.0:
        raise FitError("rms_target must be positive")
    orders: list[int] = []
    rms: list[float] = []
    best: RationalModel | None = None
    n = 2
    while n <= max_poles:
        if len(table) < 2 * n:
            break
        model = vector_fit(table, n, **kw)
        orders.append(n)
        rms.append(model.fit_rms)
        if best is None or model.fit_rms < best.fit_rms:
            best = model
        if model.fit_rms <= rms_target:
            report = FitReport(orders=tuple(orders), rms=tuple(rms),
                               selected=n, underfit=False,
                               rms_target=rms_target)
            return model, report
        n += 2
    if best is None:
        raise FitError("table too small for even a 2-pole fit")
    report = FitReport(orders=tuple(orders), rms=tuple(rms),
                       selected=best.n_poles, underfit=True,
                       rms_target=rms_target)
    return best, report


def realize_state_space(model: RationalModel) -> StateSpaceModel:
    """Block-diagonal modal realization of a proper rational model.

    Real poles contribute one rotation-free state per input column;
    conjugate pairs a 2x2 rotation block per input column. A nonzero E term
    cannot be realized and is rejected.
    """
    if np.max(np.abs(model.E)) > 0.0:
        raise ValueError("improper model (nonzero proportional term) cannot "
                         "be realized; refit without E")
    blocks_A: list[np.ndarray] = []
    blocks_B: list[np.ndarray] = []
    blocks_C: list[np.ndarray] = []
    cidx = _cindex(model.poles)
    k = 0
    while k < model.n_poles:
        p = model.poles[k]
        R = model.residues[k]
        if cidx[k] == 0:
            for j in range(2):
                blocks_A.append(np.array([[p.real]]))
                b = np.zeros((1, 2))
                b[0, j] = 1.0
                blocks_B.append(b)
                blocks_C.append(R.real[:, j].reshape(2, 1))
            k += 1
        else:
            rot = np.array([[p.real, p.imag], [-p.imag, p.real]])
            for j in range(2):
                blocks_A.append(rot)
                b = np.zeros((2, 2))
                b[0, j] = 2.0
                blocks_B.append(b)
                blocks_C.append(np.column_stack([R[:, j].real, R[:, j].imag]))
            k += 2
    n = sum(blk.shape[0] for blk in blocks_A)
    A = np.zeros((n, n))
    B = np.zeros((n, 2))
    C = np.zeros((2, n))
    at = 0
    for bA, bB, bC in zip(blocks_A, blocks_B, blocks_C):
        m = bA.shape[0]
        A[at:at + m, at:at + m] = bA
        B[at:at + m, :] = bB
        C[:, at:at + m] = bC
        at += m
    return StateSpaceModel(A=A, B=B, C=C, D=model.D.copy())


def save_model(model: RationalModel, path) -> None:
    """Plain-text export; round-trips losslessly through load_model."""
    with open(path, "w") as fp:
        fp.write("# rational admittance model, poles in rad/s\n")
        fp.write(f"n_poles {model.n_poles}\n")
        fp.write("D " + " ".join(f"{v:.17g}" for v in model.D.ravel()) + "\n")
        fp.write("E " + " ".join(f"{v:.17g}" for v in model.E.ravel()) + "\n")
        fp.write(f"fit_rms {model.fit_rms:.17g}\n")
        for p, R in zip(model.poles, model.residues):
            fp.write(f"pole {p.real:.17g} {p.imag:.17g}\n")
            for name, v in zip(("dd", "dq", "qd", "qq"), R.ravel()):
                fp.write(f"res_{name} {v.real:.17g} {v.imag:.17g}\n")


def load_model(path) -> RationalModel:
    poles: list[complex] = []
    residues: list[np.ndarray] = []
    D = np.zeros(4)
    E = np.zeros(4)
    fit_rms = np.nan
    cur: np.ndarray | None = None
    order = {"dd": 0, "dq": 1, "qd": 2, "qq": 3}
    with open(path) as fp:
        for line in fp:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            key = parts[0]
            if key == "n_poles":
                continue
            if key == "D":
                D = np.array([float(v) for v in parts[1:5]])
            elif key == "E":
                E = np.array([float(v) for v in parts[1:5]])
            elif key == "fit_rms":
                fit_rms = float(parts[1])
            elif key == "pole":
                poles.append(complex(float(parts[1]), float(parts[2])))
                cur = np.zeros(4, dtype=complex)
                residues.append(cur)
            elif key.startswith("res_"):
                if cur is None:
                    raise ValueError("residue line before any pole line")
                cur[order[key[4:]]] = complex(float(parts[1]), float(parts[2]))
            else:
                raise ValueError(f"unrecognized model line: {line!r}")
    if not poles:
        raise ValueError("model file contains no poles")
    return RationalModel(
        poles=np.array(poles),
        residues=np.array(residues).reshape(-1, 2, 2),
        D=D.reshape(2, 2), E=E.reshape(2, 2), fit_rms=fit_rms)
