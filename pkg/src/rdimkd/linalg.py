"""Dense float64 linear algebra used by the projectors and the analyses.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
Everything here is a pure function of its inputs; randomness goes through
:class:`SeededRng`, whose stream is fully determined by its seed.
"""

from __future__ import annotations

import io

import numpy as np

from .exceptions import (
    InvalidDims,
    NoConvergence,
    NotSymmetric,
    RankDeficient,
    ShapeMismatch,
    TooFewSamples,
)

RANK_TOL = 1e-12
JACOBI_MAX_SWEEPS = 60


class SeededRng:
    """Deterministic random stream (PCG64) keyed by a 64-bit seed.

    ``derive`` produces independent child streams from extra integer keys
    via ``SeedSequence`` hashing, so ``SeededRng(s).derive(i)`` is the same
    stream on every run and every platform.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *(k & 0xFFFFFFFFFFFFFFFF for k in self.keys)]
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def derive(self, *keys: int) -> "SeededRng":
        return SeededRng(self.seed, *self.keys, *keys)

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        return std * self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, keys={self.keys})"


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate external input as a finite 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeMismatch(f"{name} must have positive dimensions, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def gram_schmidt(m) -> np.ndarray:
    """Orthonormalize the columns of a c x d matrix (d <= c).

    Classical Gram-Schmidt with a second projection pass per column
    ("twice is enough"), which keeps ``max|K^T K - I|`` at the 1e-15 level
    even for mildly ill-conditioned inputs.  A column whose residual norm falls to
    ``RANK_TOL`` times its original norm raises :class:`RankDeficient`.
    """
    a = as_matrix(m)
    c, d = a.shape
    if d > c:
        raise InvalidDims(f"cannot orthonormalize {d} columns in dimension {c}")
    q = np.array(a, copy=True)
    for j in range(d):
        v = q[:, j]
        scale = np.linalg.norm(v)
        basis = q[:, :j]
        for _ in range(2):
            v -= basis @ (basis.T @ v)
        nrm = np.linalg.norm(v)
        if scale == 0.0 or nrm <= RANK_TOL * scale:
            raise RankDeficient(f"column {j} is (numerically) dependent on the previous ones")
        q[:, j] = v / nrm
    return q


def complete_basis(k, rng: SeededRng) -> np.ndarray:
    """Orthonormal basis (c x (c-d)) of the complement of span(k).

    ``k`` must already have orthonormal columns.  Random Gaussian fill
    columns are Gram-Schmidt'ed against ``k``; a degenerate fill is redrawn.
    """
    k = as_matrix(k)
    c, d = k.shape
    if d == c:
        return np.zeros((c, 0))
    while True:
        fill = rng.normal((c, c - d))
        try:
            full = gram_schmidt(np.hstack([k, fill]))
        except RankDeficient:
            continue
        return full[:, d:]


def _round_robin_rounds(n: int):
    """Pairings for parallel Jacobi: each round is a set of disjoint (p, q)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p >= n or q >= n:
                continue
            if p > q:
                p, q = q, p
            ps.append(p)
            qs.append(q)
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def symmetric_eigen(a, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi.

    Uses round-robin ordering so each round applies n/2 disjoint rotations
    at once (vectorized).  Sweeps continue until the off-diagonal Frobenius
    norm is below 1e-15 of the total, or stalls at the roundoff floor.

    Returns
    -------
    eigenvalues : ndarray of shape (n,)
        Sorted descending.
    eigenvectors : ndarray of shape (n, n)
        Column ``i`` pairs with ``eigenvalues[i]``; each column's largest
        magnitude entry is positive.

    Raises
    ------
    NotSymmetric
        If ``max|A - A^T| > 1e-9 max|A|``.
    NoConvergence
        If ``max_sweeps`` sweeps are exhausted.
    """
    a = as_matrix(a)
    n, n2 = a.shape
    if n != n2:
        raise ShapeMismatch(f"expected a square matrix, got {a.shape}")
    amax = np.max(np.abs(a))
    if np.max(np.abs(a - a.T)) > 1e-9 * amax:
        raise NotSymmetric("matrix is not symmetric within 1e-9 relative")

    w = 0.5 * (a + a.T)
    v = np.eye(n)
    total = np.linalg.norm(w)
    rounds = _round_robin_rounds(n) if n > 1 else []
    prev_off = np.inf
    for _ in range(max_sweeps):
        off = np.linalg.norm(w - np.diag(np.diag(w)))
        if off <= 1e-15 * total or (off <= 1e-12 * total and off > 0.5 * prev_off):
            break
        prev_off = off
        for p, q in rounds:
            apq = w[p, q]
            live = np.abs(apq) > 1e-300
            if not np.any(live):
                continue
            p, q, apq = p[live], q[live], apq[live]
            theta = (w[q, q] - w[p, p]) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            safe = np.where(big, 0.0, theta)
            t = np.where(
                big,
                0.5 / np.where(big, theta, 1.0),
                np.where(safe >= 0, 1.0, -1.0) / (np.abs(safe) + np.sqrt(safe * safe + 1.0)),
            )
            cs = 1.0 / np.sqrt(t * t + 1.0)
            sn = t * cs
            rp, rq = w[p, :].copy(), w[q, :].copy()
            w[p, :] = cs[:, None] * rp - sn[:, None] * rq
            w[q, :] = sn[:, None] * rp + cs[:, None] * rq
            cp, cq = w[:, p].copy(), w[:, q].copy()
            w[:, p] = cp * cs - cq * sn
            w[:, q] = cp * sn + cq * cs
            w[p, q] = 0.0
            w[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = vp * cs - vq * sn
            v[:, q] = vp * sn + vq * cs
    else:
        raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")

    vals = np.diag(w).copy()
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    v = v[:, order]
    return vals, _fix_signs(v)


def _fix_signs(v: np.ndarray) -> np.ndarray:
    if v.shape[1] == 0:
        return v
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def centered_covariance(f) -> np.ndarray:
    """Sample covariance ``F_hat^T F_hat / (N - 1)`` of column-centered F."""
    f = as_matrix(f, "features")
    n = f.shape[0]
    if n < 2:
        raise TooFewSamples(f"need at least 2 rows for a covariance, got {n}")
    fc = f - f.mean(axis=0)
    cov = fc.T @ fc / (n - 1)
    return 0.5 * (cov + cov.T)


def gaussian_matrix(rng: SeededRng, rows: int, cols: int, std: float) -> np.ndarray:
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return rng.normal((rows, cols), std)


def matrix_to_text(m) -> str:
    """Serialize as ``"rows cols"`` then one line per row, 17 sig. digits."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected 2-D, got {a.shape}")
    out = io.StringIO()
    out.write(f"{a.shape[0]} {a.shape[1]}\n")
    for row in a:
        out.write(" ".join(format(float(x), ".17g") for x in row))
        out.write("\n")
    return out.getvalue()


def read_matrix(lines) -> np.ndarray:
    """Parse one matrix block from an iterator of text lines."""
    header = next(lines).split()
    if len(header) != 2:
        raise ValueError(f"bad matrix header: {' '.join(header)!r}")
    rows, cols = int(header[0]), int(header[1])
    data = np.empty((rows, cols))
    for i in range(rows):
        parts = next(lines).split()
        if len(parts) != cols:
            raise ShapeMismatch(f"row {i} has {len(parts)} values, expected {cols}")
        data[i] = [float(x) for x in parts]
    if not np.all(np.isfinite(data)):
        raise ValueError("matrix contains NaN or Inf")
    return data


def matrix_from_text(text: str) -> np.ndarray:
    return read_matrix(iter(text.splitlines()))


def derive_seed(*keys: int) -> int:
    """Hash integer keys into a single 63-bit seed (stable across runs)."""
    entropy = [int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
    return int(state) >> 1
