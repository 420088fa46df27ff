"""Shared dense linear algebra helpers: guarded SPD factorization, PSD
projection, and a deterministic symmetric eigendecomposition."""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

from .errors import NumericalError

RIDGE_START = 1e-8
RIDGE_MAX = 1e-4


class SpdFactor:
    """Cholesky factor of an SPD matrix, ridged only if factorization fails.

    The ridge is delta * I with delta = scale * trace(A)/dim, where scale
    starts at 1e-8 and escalates tenfold up to 1e-4 before giving up.
    """

    def __init__(self, a: np.ndarray):
        a = np.asarray(a, dtype=float)
        dim = a.shape[0]
        tbar = float(np.trace(a)) / dim if dim else 0.0
        self.delta = 0.0
        scale = RIDGE_START
        while True:
            try:
                self._cf = sla.cho_factor(a + self.delta * np.eye(dim), lower=True)
                break
            except np.linalg.LinAlgError:
                pass
            except ValueError as exc:
                raise NumericalError(f"factorization failed: {exc}") from exc
            if self.delta and scale > RIDGE_MAX:
                raise NumericalError(
                    f"observed block singular beyond ridge repair (delta={self.delta:g})")
            self.delta = scale * max(tbar, np.finfo(float).tiny)
            scale *= 10.0

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._cf, b)

    @property
    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._cf[0]))))


def sym_eig_desc(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition, eigenvalues descending.

    Each eigenvector is signed so its largest-magnitude entry (first such
    index on ties) is positive, making the decomposition reproducible.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[0] != a.shape[1] or not np.allclose(a, a.T, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise NumericalError("eigendecomposition requires a symmetric matrix")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    for k in range(vecs.shape[1]):
        j = int(np.argmax(np.abs(vecs[:, k])))
        if vecs[j, k] < 0:
            vecs[:, k] = -vecs[:, k]
    return vals, vecs


def psd_project(a: np.ndarray, clip_rel: float = 1e-6,
                restore_diag: bool = True) -> np.ndarray:
    """Nearest-ish PSD repair: clip eigenvalues below clip_rel * max_eig,
    then optionally rescale so the original diagonal is restored."""
    a = 0.5 * (np.asarray(a, dtype=float) + np.asarray(a, dtype=float).T)
    vals, vecs = np.linalg.eigh(a)
    top = max(float(vals.max()), np.finfo(float).tiny)
    clipped = (vecs * np.maximum(vals, clip_rel * top)) @ vecs.T
    clipped = 0.5 * (clipped + clipped.T)
    if restore_diag:
        target = np.maximum(np.diag(a), 1e-12)
        have = np.maximum(np.diag(clipped), 1e-12)
        s = np.sqrt(target / have)
        clipped = clipped * np.outer(s, s)
        np.fill_diagonal(clipped, target)
    return clipped
