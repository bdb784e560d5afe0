"""Covariance spectra of feature maps, split across a projection subspace S and
its complement, plus the |covariance| grid of the S coordinates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import NotOrthonormal, TooFewSamples
from .linalg import SeededRng, as_matrix, centered_covariance, complete_basis, symmetric_eigen
from .projection import ORTHO_TOL, max_orthonormality_error

SMALL_EIG = 1e-12


@dataclass(frozen=True)
class EigenSpectrum:
    eigenvalues: np.ndarray
    trace: float
    source: str = ""
    subspace: str = "full"  # full | S | S_perp

    @property
    def anisotropy(self) -> float:
        """lambda_1 / lambda_last, ``inf`` when the smallest is ~0."""
        if len(self.eigenvalues) == 0:
            return math.nan
        low = self.eigenvalues[-1]
        if low <= SMALL_EIG:
            return math.inf
        return float(self.eigenvalues[0] / low)

    def clamped(self) -> np.ndarray:
        return np.maximum(self.eigenvalues, 0.0)


@dataclass(frozen=True)
class CovarianceGrid:
    grid: np.ndarray
    dominance: float


def _spectrum_of(f, source, tag) -> EigenSpectrum:
    cov = centered_covariance(f)
    vals, _ = symmetric_eigen(cov)
    return EigenSpectrum(vals, float(np.trace(cov)), source, tag)


def spectrum(features, source: str = "") -> EigenSpectrum:
    f = as_matrix(features, "features")
    if f.shape[0] < 2:
        raise TooFewSamples("need at least 2 rows")
    return _spectrum_of(f, source, "full")


def _check_orthonormal(k):
    k = as_matrix(k, "projection matrix")
    if max_orthonormality_error(k) > ORTHO_TOL:
        raise NotOrthonormal("analysis requires a projector with orthonormal columns")
    return k


def subspace_split_spectra(features, k, source: str = "", rng: SeededRng | None = None):
    """Spectra of F K (inside S) and F K_perp (inside the complement).

    K_perp completes K to an orthonormal basis via Gram-Schmidt against a
    seeded random fill, so trace(S) + trace(S_perp) equals the full trace.
    """
    f = as_matrix(features, "features")
    k = _check_orthonormal(k)
    if f.shape[0] < 2:
        raise TooFewSamples("need at least 2 rows")
    if f.shape[1] != k.shape[0]:
        from .exceptions import DimensionMismatch

        raise DimensionMismatch(f"features have width {f.shape[1]}, projector expects {k.shape[0]}")
    inside = _spectrum_of(f @ k, source, "S")
    k_perp = complete_basis(k, rng if rng is not None else SeededRng(0))
    if k_perp.shape[1] == 0:
        outside = EigenSpectrum(np.zeros(0), 0.0, source, "S_perp")
    else:
        outside = _spectrum_of(f @ k_perp, source, "S_perp")
    return inside, outside


def covariance_heatmap(features, k) -> CovarianceGrid:
    """``|cov(F K)|`` with the ratio sum|diag| / sum|offdiag| (``inf`` if d = 1)."""
    f = as_matrix(features, "features")
    k = _check_orthonormal(k)
    grid = np.abs(centered_covariance(f @ k))
    diag = float(np.trace(grid))
    off = float(np.sum(grid) - diag)
    dominance = math.inf if off <= 0.0 else diag / off
    return CovarianceGrid(grid, dominance)


def _num(v) -> str:
    return repr(float(v))


def spectrum_csv(spectra, header: str = "") -> str:
    out = io.StringIO()
    if header:
        out.write(f"# {header}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["index", "eigenvalue", "subspace_tag"])
    for sp in spectra:
        for i, v in enumerate(sp.clamped()):
            w.writerow([i, _num(v), sp.subspace])
    return out.getvalue()


def heatmap_csv(grid: CovarianceGrid, header: str = "") -> str:
    out = io.StringIO()
    if header:
        out.write(f"# {header} dominance={_num(grid.dominance)}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["row", "col", "abs_cov"])
    d = grid.grid.shape[0]
    for i in range(d):
        for j in range(d):
            w.writerow([i, j, _num(grid.grid[i, j])])
    return out.getvalue()


def read_spectrum_csv(text: str):
    """``{subspace_tag: eigenvalue array}`` from :func:`spectrum_csv` output."""
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    out = {}
    for row in csv.DictReader(rows):
        out.setdefault(row["subspace_tag"], []).append(float(row["eigenvalue"]))
    return {k: np.array(v) for k, v in out.items()}
