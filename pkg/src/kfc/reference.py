"""Reference cartpole Koopman matrices and the self-consistency check built on them.

The two matrices below are the identity-observable Koopman operators of
cartpole for the physical actions -1 and +1. Both keep the first basis
vector fixed (position does not feed back into the dynamics), so the
first-row generator ``(-1, c1, c2, c3)`` is a left eigenvector with
eigenvalue 1 and squares to its own negative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .koopman import identity_model
from .linalg import eig, matrix_exp
from .symmetry import first_row_ansatz, kfc_generator

K_MINUS = np.array([
    [1.0, 0.02, -0.01, 0.001],
    [0.0, 1.0, 0.6, 0.8],
    [0.0, 0.0, 1.0, 0.02],
    [0.0, -0.01, -0.7, -0.2],
])
K_PLUS = np.array([
    [1.0, 0.02, -0.009, 0.0],
    [0.0, 1.0, 0.6, 0.8],
    [0.0, 0.0, 1.0, 0.02],
    [0.0, -0.009, -0.7, -0.2],
])
C_MINUS = (-2.35, -25.95, -2.0)
C_PLUS = (-2.60759, -29.0296, -2.22222)
C_PLUS_TOL = 1e-4  # reported to six significant digits
EXP_TIMES = (-1.0, 0.1, 1.0, 5.0)


def reference_model():
    """Identity-codec model with ``K(-1) = K_MINUS`` and ``K(+1) = K_PLUS``."""
    k0 = 0.5 * (K_PLUS + K_MINUS)
    k1 = 0.5 * (K_PLUS - K_MINUS)
    return identity_model(k0, k1[None])


def first_row_generator(model, a) -> np.ndarray:
    """First-row commutant generator scaled so that its (0, 0) entry is -1."""
    g = kfc_generator(model, np.atleast_1d(float(a)), ansatz=first_row_ansatz(model.latent_dim)).sigma
    return g / -g[0, 0]


def first_row_coefficients(model, a) -> np.ndarray:
    return first_row_generator(model, a)[0, 1:]


@dataclass
class CheckItem:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name}: error {self.error:.3e} (tolerance {self.tolerance:.1e})"


def _unit_eigvec_error(k: np.ndarray) -> tuple[float, float]:
    ed = eig(k)
    i = int(np.argmin(np.abs(ed.eigenvalues - 1.0)))
    v = ed.eigenvectors[:, i]
    v = v / v[np.argmax(np.abs(v))]
    e0 = np.zeros(len(v))
    e0[0] = 1.0
    return float(abs(ed.eigenvalues[i] - 1.0)), float(np.linalg.norm(v - e0))


def cartpole_check(tolerance: float = 1e-9) -> list[CheckItem]:
    model = reference_model()
    items = []
    c_minus = first_row_coefficients(model, -1.0)
    items.append(CheckItem("K(-1) first-row generator (c1, c2, c3) = (-2.35, -25.95, -2)",
                           float(np.max(np.abs(c_minus - C_MINUS))), tolerance))
    c_plus = first_row_coefficients(model, 1.0)
    items.append(CheckItem("K(+1) first-row generator (c1, c2, c3) = (-2.60759, -29.0296, -2.22222)",
                           float(np.max(np.abs(c_plus - C_PLUS))), max(tolerance, C_PLUS_TOL)))
    sigma0 = first_row_generator(model, -1.0)
    eye = np.eye(4)
    for t in EXP_TIMES:
        err = np.linalg.norm(matrix_exp(t * sigma0) - (eye + (1.0 - np.exp(-t)) * sigma0))
        items.append(CheckItem(f"exp(sigma0 t) = I + (1 - e^-t) sigma0 at t={t:g}", float(err), tolerance))
    for label, k in (("K(-1)", K_MINUS), ("K(+1)", K_PLUS)):
        lam_err, vec_err = _unit_eigvec_error(k)
        items.append(CheckItem(f"{label} has eigenvalue 1 with eigenvector (1,0,0,0)",
                               max(lam_err, vec_err), tolerance))
    # eigenbasis shift with only the eigenvalue-1 component switched on
    eps1 = 1e-4
    ed = eig(K_MINUS)
    i = int(np.argmin(np.abs(ed.eigenvalues - 1.0)))
    e = np.zeros(4)
    e[i] = eps1
    sig = ((ed.eigenvectors * e) @ ed.inverse).real
    want = np.zeros((4, 4))
    want[0] = eps1 * np.array([1.0, *(-np.asarray(C_MINUS))])
    items.append(CheckItem("K(-1) eigenbasis shift with eps=(eps1,0,0,0) is eps1 (1, -c1, -c2, -c3) on row 0",
                           float(np.max(np.abs(sig - want)) / eps1), tolerance))
    return items
