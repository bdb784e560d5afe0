"""Deterministic experiment engine: data, teacher pretraining, distillation runs,
and seeded ablation grids.

All randomness is keyed by explicit seeds:

* dataset: ``DatasetSpec.seed``
* student/teacher init: ``TrainSpec.seed``; minibatch order: ``(TrainSpec.seed, 1)``
* projectors: ``derive_seed(DistillSpec.seed, tap)``
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import Diverged, EpochOutOfRange, InvalidDims, ShapeMismatch, ValidationError
from .linalg import SeededRng, derive_seed
from .losses import (
    DistillSpec,
    LossBreakdown,
    cross_entropy,
    cross_entropy_grad,
    kl_soft_loss,
    kl_soft_loss_grad,
    mask_to_str,
    softmax,
    total_objective_with_grads,
)
from .nets import Network, _forward, backward, build_network, forward, inherit_init, mlp_specs
from .projection import (
    Method,
    make_autoencoder,
    make_gaussian_nonorthogonal,
    make_identity,
    make_pca,
    make_random_orthogonal,
    parse_method,
)

DATASET_KINDS = ("moons", "spirals", "gaussian_mixture")
PCA_SAMPLE_BUDGET = 512


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "moons"
    n_train: int = 200
    n_test: int = 1000
    noise: float = 0.15
    classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValidationError(f"unknown dataset kind {self.kind!r}; valid: {', '.join(DATASET_KINDS)}")
        if self.classes < 2:
            raise ValidationError("need at least 2 classes")
        if self.kind == "moons" and self.classes != 2:
            raise ValidationError("moons has exactly 2 classes")
        if self.n_train < self.classes or self.n_test < self.classes:
            raise ValidationError("n_train and n_test must be >= classes")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 300
    batch_size: int = 32
    lr_init: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.lr_init > 0:
            raise ValidationError("lr_init must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ValidationError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    lr: float
    task_loss: float
    kd: tuple
    kl_loss: float
    total_loss: float
    test_accuracy: float


@dataclass
class TrialResult:
    metrics: list
    test_accuracy: float
    seed: int
    student: Network = None
    projectors: list = field(default_factory=list)


# -- data ---------------------------------------------------------------------------


def _class_counts(n, k):
    return [n // k + (1 if j < n % k else 0) for j in range(k)]


def _sample(kind, n, classes, noise, rng: SeededRng):
    gen = rng.generator
    xs, ys = [], []
    for j, m in enumerate(_class_counts(n, classes)):
        if kind == "moons":
            t = gen.uniform(0.0, np.pi, m)
            if j == 0:
                pts = np.column_stack([np.cos(t), np.sin(t)])
            else:
                pts = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
        elif kind == "spirals":
            t = gen.uniform(0.05, 1.0, m)
            theta = 4.0 * t + 2.0 * np.pi * j / classes
            pts = np.column_stack([t * np.sin(theta), t * np.cos(theta)])
        else:
            angle = 2.0 * np.pi * j / classes
            pts = np.tile([2.0 * np.cos(angle), 2.0 * np.sin(angle)], (m, 1))
            pts = pts + gen.standard_normal((m, 2))
        pts = pts + noise * gen.standard_normal((m, 2))
        xs.append(pts)
        ys.append(np.full(m, j))
    x, y = np.vstack(xs), np.concatenate(ys)
    order = gen.permutation(n)
    return x[order], y[order].astype(np.int64)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Two-dimensional toy classification data, class-balanced within one sample."""
    rng = SeededRng(spec.seed)
    x_tr, y_tr = _sample(spec.kind, spec.n_train, spec.classes, spec.noise, rng.derive(0))
    x_te, y_te = _sample(spec.kind, spec.n_test, spec.classes, spec.noise, rng.derive(1))
    return Dataset(x_tr, y_tr, x_te, y_te)


# -- optimisation -------------------------------------------------------------------


def cosine_lr(epoch: int, total_epochs: int, lr_init: float) -> float:
    if not 0 <= epoch < total_epochs:
        raise EpochOutOfRange(f"epoch {epoch} outside [0, {total_epochs})")
    return lr_init * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


def _lr(train: TrainSpec, epoch: int) -> float:
    if train.schedule == "constant":
        return train.lr_init
    return cosine_lr(epoch, train.epochs, train.lr_init)


def accuracy(net: Network, x, y) -> float:
    logits, _ = forward(net, x)
    return float(np.mean(np.argmax(logits, axis=1) == y))


class _SGD:
    """SGD with momentum and L2 weight decay (decay added to the gradient)."""

    def __init__(self, params, momentum, weight_decay):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads, lr):
        for p, g, v in zip(self.params, grads, self.velocity):
            if self.weight_decay:
                g = g + self.weight_decay * p
            v *= self.momentum
            v += g
            p -= lr * v


def _flat_grads(net, grads):
    out = []
    for layer, (dw, db) in zip(net.layers, grads):
        out.append(dw)
        if layer.bias is not None:
            out.append(db)
    return out


def _run(net: Network, data: Dataset, train: TrainSpec, teacher=None, distill=None, projectors=None):
    """Shared training loop; KD machinery is skipped entirely when inert."""
    active = teacher is not None and distill is not None and not distill.inert
    n_taps = len(net.tap_indices)
    opt = _SGD(net.parameters(), train.momentum, train.weight_decay)
    order_rng = SeededRng(train.seed, 1)
    n = len(data.y_train)
    metrics = []
    first_loss = None
    strikes = 0
    iteration = 0
    for epoch in range(train.epochs):
        lr = _lr(train, epoch)
        perm = order_rng.permutation(n)
        sums = np.zeros(3 + n_taps)  # task, kl, total, kd...
        for start in range(0, n, train.batch_size):
            idx = perm[start:start + train.batch_size]
            xb, yb = data.x_train[idx], data.y_train[idx]
            logits, taps_s, cache = _forward(net, xb)
            task = cross_entropy(logits, yb)
            g_logits = cross_entropy_grad(logits, yb)
            tap_grads = [None] * n_taps
            if active:
                logits_t, taps_t = forward(teacher, xb)
                kl = 0.0
                if distill.beta > 0:
                    q, p = softmax(logits_t), softmax(logits)
                    kl = kl_soft_loss(q, p, distill.beta)
                    g_logits = g_logits + kl_soft_loss_grad(q, p, distill.beta)
                pairs = list(zip(taps_t, taps_s, projectors))
                br, tap_grads = total_objective_with_grads(task, pairs, distill, iteration, kl)
            else:
                br = LossBreakdown(task, (0.0,) * n_taps, 0.0, task)
            grads = backward(net, xb, g_logits, tap_grads, cache)
            opt.step(_flat_grads(net, grads), lr)
            iteration += 1
            m = len(idx)
            sums[0] += br.task * m
            sums[1] += br.kl * m
            sums[2] += br.total * m
            sums[3:] += np.asarray(br.kd_per_position, dtype=np.float64) * m
        sums /= n
        task_loss = float(sums[0])
        if not np.isfinite(sums).all():
            raise Diverged(f"non-finite loss at epoch {epoch}")
        if first_loss is None:
            first_loss = task_loss
        strikes = strikes + 1 if task_loss > 10.0 * first_loss else 0
        if strikes >= 3:
            raise Diverged(f"task loss above 10x its initial value for 3 epochs (epoch {epoch})")
        metrics.append(
            MetricsRecord(
                epoch,
                lr,
                task_loss,
                tuple(float(v) for v in sums[3:]),
                float(sums[1]),
                float(sums[2]),
                accuracy(net, data.x_test, data.y_test),
            )
        )
    return metrics


def train_teacher(net_specs, data: Dataset, train: TrainSpec, with_metrics: bool = False):
    """Pretrain a network on the task loss alone.

    Returns the trained network, or ``(network, metrics)`` with ``with_metrics``.
    """
    net = build_network(net_specs, train.seed)
    metrics = _run(net, data, train)
    net.meta = {
        "role": "teacher",
        "epochs": train.epochs,
        "final_task_loss": metrics[-1].task_loss if metrics else float("nan"),
        "train_accuracy": accuracy(net, data.x_train, data.y_train),
        "test_accuracy": accuracy(net, data.x_test, data.y_test),
    }
    return (net, metrics) if with_metrics else net


def teacher_features(teacher: Network, x, tap: int, seed: int, budget: int = PCA_SAMPLE_BUDGET):
    """Teacher tap activations on up to ``budget`` rows chosen by a seeded shuffle."""
    rows = SeededRng(seed, tap, 2).permutation(len(x))[:budget]
    _, taps = forward(teacher, x[np.sort(rows)])
    return taps[tap]


def build_projectors(teacher: Network, x_train, distill: DistillSpec, tap_dims, source: str | None = None):
    """One projector per tap pair, built once before training."""
    method, per_iteration = parse_method(distill.method)
    projectors = []
    for i, c in enumerate(tap_dims):
        d = distill.d_for(c)
        seed = derive_seed(distill.seed, i)
        rng = SeededRng(seed)
        if method is Method.IDENTITY:
            p = make_identity(c)
        elif d == c:
            if method in (Method.RANDOM_ORTHOGONAL, Method.PCA_FIRST, Method.PCA_LAST):
                # orthonormal K with d = c gives exactly the unprojected loss
                p = make_identity(c)
            else:
                raise InvalidDims(f"method {distill.method!r} needs d < c (c={c}, r={distill.r})")
        elif method is Method.RANDOM_ORTHOGONAL:
            p = make_random_orthogonal(rng, c, d, per_iteration=per_iteration)
        elif method is Method.GAUSSIAN:
            p = make_gaussian_nonorthogonal(rng, c, d)
        elif method in (Method.PCA_FIRST, Method.PCA_LAST):
            feats = teacher_features(teacher, x_train, i, distill.seed)
            which = "first" if method is Method.PCA_FIRST else "last"
            p = make_pca(feats, d, which, source=source)
        else:
            feats = teacher_features(teacher, x_train, i, distill.seed)
            p = make_autoencoder(feats, d, rng=rng, source=source)
        projectors.append(p)
    return projectors


def distill_student(
    student_specs, teacher: Network, data: Dataset, train: TrainSpec, distill: DistillSpec | None,
    inherit: bool = False, source: str | None = None,
) -> TrialResult:
    """Train a student on task loss plus masked subspace KD terms.

    ``distill=None`` is the plain baseline.  The teacher is only read.
    """
    student = build_network(student_specs, train.seed)
    if inherit:
        student, _ = inherit_init(student, teacher)
    projectors = []
    if distill is not None:
        if len(teacher.tap_indices) != len(student.tap_indices):
            raise ShapeMismatch(
                f"teacher exposes {len(teacher.tap_indices)} taps, student {len(student.tap_indices)}"
            )
        if len(distill.mask) != len(student.tap_indices):
            raise ShapeMismatch(f"mask length {len(distill.mask)} != {len(student.tap_indices)} taps")
        for i, (ct, cs) in enumerate(zip(teacher.tap_dims, student.tap_dims)):
            if ct != cs:
                raise ShapeMismatch(f"tap {i}: teacher width {ct} != student width {cs}")
        projectors = build_projectors(teacher, data.x_train, distill, teacher.tap_dims, source)
    metrics = _run(student, data, train, teacher, distill, projectors)
    acc = metrics[-1].test_accuracy if metrics else accuracy(student, data.x_test, data.y_test)
    student.meta = {
        "role": "student",
        "epochs": train.epochs,
        "final_task_loss": metrics[-1].task_loss if metrics else float("nan"),
        "test_accuracy": acc,
    }
    return TrialResult(metrics, acc, train.seed, student, projectors)


def train_baseline(student_specs, data: Dataset, train: TrainSpec) -> TrialResult:
    # a dummy teacher is never consulted when distill is None
    return distill_student(student_specs, None, data, train, None)


# -- presets ------------------------------------------------------------------------


def toy_teacher_specs(hidden=(64, 64)):
    return mlp_specs(2, list(hidden), 2, taps=(0, 1))


def toy_student_specs(hidden=(8, 8), teacher_width=64):
    """Student whose last two linear maps are split through the teacher width."""
    return mlp_specs(2, list(hidden), 2, taps=(1, 2), splits={1: teacher_width, 2: teacher_width})


# -- metrics I/O --------------------------------------------------------------------


def _num(v) -> str:
    return repr(float(v))


def metrics_csv(results) -> str:
    """Per-epoch rows: trial_seed, epoch, lr, task_loss, kd_0..kd_T, kl_loss, total_loss, test_accuracy."""
    results = list(results)
    n_kd = len(results[0].metrics[0].kd) if results and results[0].metrics else 0
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["trial_seed", "epoch", "lr", "task_loss", *[f"kd_{i}" for i in range(n_kd)],
                "kl_loss", "total_loss", "test_accuracy"])
    for res in results:
        for m in res.metrics:
            w.writerow([res.seed, m.epoch, _num(m.lr), _num(m.task_loss), *map(_num, m.kd),
                        _num(m.kl_loss), _num(m.total_loss), _num(m.test_accuracy)])
    return out.getvalue()


# -- ablation grid ------------------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    method: str
    r: float
    alpha: float
    mask: str


@dataclass
class GridResult:
    cells: list
    seeds: list
    accuracies: dict  # (cell index, seed) -> accuracy
    reference: str

    def rows(self):
        """Aggregated rows in cell order."""
        out = []
        for ci, cell in enumerate(self.cells):
            accs = np.array([self.accuracies[(ci, s)] for s in self.seeds])
            deltas = np.array(self.deltas(ci))
            out.append({
                "method": cell.method, "r": cell.r, "alpha": cell.alpha, "mask": cell.mask,
                "mean_acc": _mean(accs), "std_acc": _std(accs), "n_seeds": len(self.seeds),
                "mean_delta": _mean(deltas), "std_delta": _std(deltas), "reference": self.reference,
                "n_diverged": int(np.sum(np.isnan(accs))),
            })
        return out

    def _reference_index(self, ci):
        cell = self.cells[ci]
        for j, other in enumerate(self.cells):
            if other.method == self.reference and (other.r, other.alpha, other.mask) == (cell.r, cell.alpha, cell.mask):
                return j
        return ci

    def deltas(self, ci):
        ref = self._reference_index(ci)
        return [self.accuracies[(ci, s)] - self.accuracies[(ref, s)] for s in self.seeds]

    def trial_rows(self):
        out = []
        for ci, cell in enumerate(self.cells):
            deltas = self.deltas(ci)
            for s, delta in zip(self.seeds, deltas):
                out.append({"method": cell.method, "r": cell.r, "alpha": cell.alpha, "mask": cell.mask,
                            "seed": s, "test_accuracy": self.accuracies[(ci, s)], "paired_delta": delta})
        return out

    def grid_csv(self) -> str:
        cols = ["method", "r", "alpha", "mask", "mean_acc", "std_acc", "n_seeds", "mean_delta", "std_delta", "reference",
                "n_diverged"]
        return _dict_csv(cols, self.rows())

    def trials_csv(self) -> str:
        cols = ["method", "r", "alpha", "mask", "seed", "test_accuracy", "paired_delta"]
        return _dict_csv(cols, self.trial_rows())


def _mean(a) -> float:
    """Mean over finite entries (diverged trials are NaN); NaN if there are none."""
    a = np.asarray(a, dtype=np.float64)
    a = a[np.isfinite(a)]
    return float(a.mean()) if len(a) else math.nan


def _std(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    a = a[np.isfinite(a)]
    return float(np.std(a, ddof=1)) if len(a) > 1 else 0.0


def _dict_csv(cols, rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_num(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    return out.getvalue()


def _cell_distill(cell: GridCell, seed: int, beta: float):
    if cell.method == "baseline":
        return None
    return DistillSpec(cell.method, cell.r, cell.alpha, beta, cell.mask, seed)


def _trial(args):
    student_specs, teacher, data, train, distill, record = args
    try:
        return distill_student(student_specs, teacher, data, train, distill).test_accuracy
    except Diverged:
        if not record:
            raise
        return math.nan


def run_ablation_grid(
    teacher: Network, student_specs, data: Dataset, train: TrainSpec,
    methods, rs, alphas, masks, seeds, beta: float = 0.0, jobs: int = 1, reference: str | None = None,
    on_diverge: str = "raise",
) -> GridResult:
    """Every (method, r, alpha, mask) cell trained once per seed.

    The trial seed drives student init, batch order and projector draws, so
    cells are paired seed by seed.  ``method="baseline"`` means no KD.
    Identical effective runs (e.g. baseline across r values) are computed once.

    ``on_diverge="record"`` stores a diverged trial as a NaN accuracy instead
    of raising; aggregates then skip it and ``n_diverged`` counts it.
    """
    if on_diverge not in ("raise", "record"):
        raise ValidationError(f"on_diverge must be 'raise' or 'record', got {on_diverge!r}")
    record = on_diverge == "record"
    methods, seeds = list(methods), list(seeds)
    if not methods or not rs or not alphas or not masks or not seeds:
        raise ValidationError("grid and seed list must be non-empty")
    masks = [m if isinstance(m, str) else mask_to_str(m) for m in masks]
    cells = [
        GridCell(m, float(r), float(a), mk)
        for m in methods
        for r in sorted(rs)
        for a in sorted(alphas)
        for mk in masks
    ]
    jobs_by_key, order = {}, []
    for ci, cell in enumerate(cells):
        for s in seeds:
            distill = _cell_distill(cell, s, beta)
            t = replace(train, seed=s)
            key = ("inert", s) if distill is None or distill.inert else (cell, s)
            if key not in jobs_by_key:
                jobs_by_key[key] = (student_specs, teacher, data, t, distill, record)
            order.append(((ci, s), key))
    keys = sorted(jobs_by_key, key=repr)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = dict(zip(keys, pool.map(_trial, [jobs_by_key[k] for k in keys])))
    else:
        accs = {k: _trial(jobs_by_key[k]) for k in keys}
    accuracies = {idx: accs[key] for idx, key in order}
    return GridResult(cells, seeds, accuracies, reference or methods[0])
