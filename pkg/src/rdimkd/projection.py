"""Construction of the c x d projection matrix K used by the distillation loss.

Every constructor returns an immutable :class:`Projector` carrying the
matrix plus enough provenance (method, seed, source) to rebuild it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .exceptions import Diverged, InvalidDims, TooFewSamples
from .linalg import (
    SeededRng,
    as_matrix,
    centered_covariance,
    gaussian_matrix,
    gram_schmidt,
    matrix_to_text,
    read_matrix,
    symmetric_eigen,
)
from .exceptions import RankDeficient

ORTHO_TOL = 1e-10


class Method(str, enum.Enum):
    RANDOM_ORTHOGONAL = "random_orthogonal"
    PCA_FIRST = "pca_first"
    PCA_LAST = "pca_last"
    AUTOENCODER = "autoencoder"
    IDENTITY = "identity"
    GAUSSIAN = "gaussian_nonorthogonal"


# public CLI vocabulary -> (method, per_iteration)
METHOD_NAMES = {
    "random": (Method.RANDOM_ORTHOGONAL, False),
    "pca": (Method.PCA_FIRST, False),
    "pca-last": (Method.PCA_LAST, False),
    "autoencoder": (Method.AUTOENCODER, False),
    "none": (Method.IDENTITY, False),
    "gaussian": (Method.GAUSSIAN, False),
    "rand-each": (Method.RANDOM_ORTHOGONAL, True),
}


def parse_method(name: str):
    """Map a public method name to ``(Method, per_iteration)``."""
    try:
        return METHOD_NAMES[name]
    except KeyError:
        valid = ", ".join(METHOD_NAMES)
        raise ValueError(f"unknown method {name!r}; valid names: {valid}") from None


def method_name(method: Method, per_iteration: bool = False) -> str:
    for name, value in METHOD_NAMES.items():
        if value == (Method(method), bool(per_iteration)):
            return name
    raise ValueError(f"no public name for {method!r} (per_iteration={per_iteration})")


def max_orthonormality_error(k) -> float:
    k = np.asarray(k)
    return float(np.max(np.abs(k.T @ k - np.eye(k.shape[1])))) if k.size else 0.0


@dataclass(frozen=True, eq=False)
class Projector:
    k: np.ndarray
    method: Method
    per_iteration: bool = False
    seed: int | None = None
    source: str | None = None
    orthonormal: bool = False

    def __post_init__(self):
        k = as_matrix(self.k, "projection matrix")
        k.setflags(write=False)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "method", Method(self.method))
        c, d = k.shape
        if d > c:
            raise InvalidDims(f"projector has d={d} > c={c}")
        if d == c and self.method is not Method.IDENTITY and self.method not in (
            Method.PCA_FIRST,
            Method.PCA_LAST,
        ):
            # PCA with d = c is a full rotation, allowed for the reconstruction checks
            raise InvalidDims(f"d = c is only allowed for the identity projector (method {self.method.value})")
        if self.orthonormal and max_orthonormality_error(k) > ORTHO_TOL:
            raise ValueError("projector flagged orthonormal but K^T K deviates from I")
        if self.per_iteration and self.method is not Method.RANDOM_ORTHOGONAL:
            raise ValueError("per-iteration regeneration only applies to random orthogonal K")
        if self.per_iteration and self.seed is None:
            raise ValueError("per-iteration projector needs a seed")

    @property
    def c(self) -> int:
        return self.k.shape[0]

    @property
    def d(self) -> int:
        return self.k.shape[1]

    @property
    def reduction_rate(self) -> float:
        return self.c / self.d

    @property
    def name(self) -> str:
        return method_name(self.method, self.per_iteration)

    def __eq__(self, other):
        if not isinstance(other, Projector):
            return NotImplemented
        return (
            self.method == other.method
            and self.per_iteration == other.per_iteration
            and self.seed == other.seed
            and self.source == other.source
            and self.orthonormal == other.orthonormal
            and self.k.shape == other.k.shape
            and np.array_equal(self.k, other.k)
        )

    __hash__ = None


def _check_reduced_dims(c: int, d: int):
    if not (1 <= d < c):
        raise InvalidDims(f"need 1 <= d < c, got c={c}, d={d}")


def _random_orthonormal(rng: SeededRng, c: int, d: int) -> np.ndarray:
    while True:
        try:
            return gram_schmidt(gaussian_matrix(rng, c, d, 1.0))
        except RankDeficient:
            continue


def make_random_orthogonal(rng: SeededRng, c: int, d: int, per_iteration: bool = False) -> Projector:
    """Gaussian c x d draw followed by Gram-Schmidt (redrawn if degenerate)."""
    _check_reduced_dims(c, d)
    k = _random_orthonormal(rng, c, d)
    return Projector(
        k, Method.RANDOM_ORTHOGONAL, per_iteration=per_iteration, seed=rng.seed, orthonormal=True
    )


def make_pca(features, d: int, which: str = "first", source: str | None = None) -> Projector:
    """Principal axes of the centered teacher features.

    ``which="first"`` keeps the eigenvectors of the ``d`` largest covariance
    eigenvalues, ``which="last"`` the ``d`` smallest.  Columns stay in
    descending eigenvalue order.
    """
    f = as_matrix(features, "features")
    n, c = f.shape
    if n < 2:
        raise TooFewSamples(f"PCA needs at least 2 rows, got {n}")
    if not (1 <= d <= c):
        raise InvalidDims(f"need 1 <= d <= c, got c={c}, d={d}")
    _, vecs = symmetric_eigen(centered_covariance(f))
    if which == "first":
        k, method = vecs[:, :d], Method.PCA_FIRST
    elif which == "last":
        k, method = vecs[:, c - d:], Method.PCA_LAST
    else:
        raise ValueError(f"which must be 'first' or 'last', got {which!r}")
    return Projector(np.ascontiguousarray(k), method, source=source, orthonormal=True)


def make_identity(c: int) -> Projector:
    if c < 1:
        raise InvalidDims(f"c must be positive, got {c}")
    return Projector(np.eye(c), Method.IDENTITY, orthonormal=True)


def make_gaussian_nonorthogonal(rng: SeededRng, c: int, d: int) -> Projector:
    """Entries i.i.d. N(0, 1/c), no orthonormalization (the no_orth ablation)."""
    _check_reduced_dims(c, d)
    k = gaussian_matrix(rng, c, d, 1.0 / np.sqrt(c))
    return Projector(k, Method.GAUSSIAN, seed=rng.seed, orthonormal=False)


def resolve_projector(p: Projector, iteration: int) -> np.ndarray:
    """The K to use at a given training iteration.

    Frozen projectors return their stored matrix.  Per-iteration projectors
    draw a fresh random orthonormal K from ``SeededRng(p.seed, iteration)``,
    so a given (seed, iteration) always yields the same matrix.
    """
    if not p.per_iteration:
        return p.k
    return _random_orthonormal(SeededRng(p.seed, int(iteration)), p.c, p.d)


@dataclass
class AutoencoderFit:
    k: np.ndarray
    k_prime: np.ndarray
    gamma: float
    loss_trace: np.ndarray
    step_size: float
    reconstruction: float = field(default=np.nan)


def autoencoder_objective(f, k, k_prime, gamma):
    """Return ``(J, reconstruction_term)`` for the linear autoencoder."""
    n, c = f.shape
    resid = f - f @ k @ k_prime
    recon = float(np.sum(resid * resid)) / (n * c)
    return recon + gamma * (float(np.sum(k * k)) + float(np.sum(k_prime * k_prime))), recon


def autoencoder_gradients(f, k, k_prime, gamma):
    """Analytic ``(dJ/dK, dJ/dK')``."""
    n, c = f.shape
    fk = f @ k
    resid = f - fk @ k_prime
    scale = -2.0 / (n * c)
    gk = scale * (f.T @ resid @ k_prime.T) + 2.0 * gamma * k
    gkp = scale * (fk.T @ resid) + 2.0 * gamma * k_prime
    return gk, gkp


def fit_autoencoder(
    features,
    d: int,
    gamma: float = 1e-4,
    steps: int = 2000,
    step_size: float = 0.05,
    rng: SeededRng | None = None,
    max_halvings: int = 10,
) -> AutoencoderFit:
    """Fit encoder K (c x d) and decoder K' (d x c) by full-batch gradient descent.

    Both factors start from a seeded N(0, 1/c) draw.  If the objective ever
    exceeds 10x its initial value the run restarts from the same init with
    half the step size; after ``max_halvings`` restarts :class:`Diverged`
    is raised.
    """
    f = as_matrix(features, "features")
    n, c = f.shape
    if not (1 <= d <= c):
        raise InvalidDims(f"need 1 <= d <= c, got c={c}, d={d}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    rng = rng if rng is not None else SeededRng(0)
    std = 1.0 / np.sqrt(c)
    k0 = gaussian_matrix(rng, c, d, std)
    kp0 = gaussian_matrix(rng, d, c, std)

    lr = step_size
    for _ in range(max_halvings + 1):
        k, kp = k0.copy(), kp0.copy()
        j0, _ = autoencoder_objective(f, k, kp, gamma)
        trace = [j0]
        ok = True
        for _ in range(steps):
            gk, gkp = autoencoder_gradients(f, k, kp, gamma)
            k -= lr * gk
            kp -= lr * gkp
            j, _ = autoencoder_objective(f, k, kp, gamma)
            if not np.isfinite(j) or j > 10.0 * j0:
                ok = False
                break
            trace.append(j)
        if ok:
            _, recon = autoencoder_objective(f, k, kp, gamma)
            return AutoencoderFit(k, kp, gamma, np.array(trace), lr, recon)
        lr *= 0.5
    raise Diverged(f"autoencoder diverged even at step size {lr * 2:g}")


def make_autoencoder(features, d: int, rng: SeededRng | None = None, source: str | None = None, **kwargs) -> Projector:
    rng = rng if rng is not None else SeededRng(0)
    fit = fit_autoencoder(features, d, rng=rng, **kwargs)
    return Projector(fit.k, Method.AUTOENCODER, seed=rng.seed, source=source, orthonormal=False)


def projector_to_text(p: Projector) -> str:
    """Header ``method c d seed orthonormal per_iteration`` then the matrix."""
    seed = "-" if p.seed is None else str(p.seed)
    lines = []
    if p.source is not None:
        lines.append(f"# source {p.source}\n")
    lines.append(f"{p.method.value} {p.c} {p.d} {seed} {int(p.orthonormal)} {int(p.per_iteration)}\n")
    lines.append(matrix_to_text(p.k))
    return "".join(lines)


def projector_from_text(text: str) -> Projector:
    lines = iter(text.splitlines())
    first = next(lines)
    source = None
    if first.startswith("# source "):
        source = first[len("# source "):]
        first = next(lines)
    parts = first.split()
    if len(parts) != 6:
        raise ValueError(f"bad projector header: {first!r}")
    method, c, d, seed, ortho, per_it = parts
    k = read_matrix(lines)
    if k.shape != (int(c), int(d)):
        raise ValueError(f"header says {c}x{d} but matrix is {k.shape}")
    return Projector(
        k,
        Method(method),
        per_iteration=bool(int(per_it)),
        seed=None if seed == "-" else int(seed),
        source=source,
        orthonormal=bool(int(ortho)),
    )


def save_projector(p: Projector, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(projector_to_text(p))


def load_projector(path) -> Projector:
    with open(path, encoding="utf-8") as fh:
        return projector_from_text(fh.read())
