"""scikit-learn style wrappers around the projector builders and the trainers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .exceptions import InvalidDims, TooFewSamples
from .linalg import SeededRng
from .losses import DistillSpec, mask_to_str, reduced_dim, softmax
from .nets import Network, forward, merge_network, mlp_specs
from .projection import (
    Method,
    make_autoencoder,
    make_gaussian_nonorthogonal,
    make_identity,
    make_pca,
    make_random_orthogonal,
    parse_method,
)
from .train import Dataset, TrainSpec, distill_student, train_teacher


class SubspaceProjection(TransformerMixin, BaseEstimator):
    """Project features onto a d-dimensional subspace, ``X -> X K``.

    Parameters
    ----------
    method : str, default="random"
        ``random``, ``pca``, ``pca-last``, ``autoencoder``, ``none`` or
        ``gaussian`` (``rand-each`` behaves like ``random`` here; the
        per-iteration redraw only matters inside training).
    reduction_rate : float, default=4.0
        ``d = max(1, round(c / reduction_rate))`` unless ``n_components``
        is given.
    n_components : int, optional
    gamma, ae_steps, ae_step_size : autoencoder settings.
    random_state : int, default=0

    Attributes
    ----------
    projector_ : Projector
    components_ : ndarray of shape (n_features, n_components)
    """

    def __init__(self, method="random", reduction_rate=4.0, n_components=None, gamma=1e-4,
                 ae_steps=2000, ae_step_size=0.05, random_state=0):
        self.method = method
        self.reduction_rate = reduction_rate
        self.n_components = n_components
        self.gamma = gamma
        self.ae_steps = ae_steps
        self.ae_step_size = ae_step_size
        self.random_state = random_state

    def fit(self, X, y=None):
        X = validate_data(self, X, dtype=np.float64)
        n, c = X.shape
        d = self.n_components if self.n_components is not None else reduced_dim(c, self.reduction_rate)
        method, per_iteration = parse_method(self.method)
        if method in (Method.PCA_FIRST, Method.PCA_LAST) and n < 2:
            raise TooFewSamples(f"PCA needs at least 2 rows, got n_samples={n}")
        if method not in (Method.IDENTITY, Method.PCA_FIRST, Method.PCA_LAST) and not 1 <= d < c:
            raise InvalidDims(f"{self.method} needs 1 <= n_components < n_features, got n_components={d}, "
                              f"n_features={c}")
        rng = SeededRng(self.random_state)
        if method is Method.IDENTITY:
            proj = make_identity(c)
        elif method is Method.RANDOM_ORTHOGONAL:
            proj = make_random_orthogonal(rng, c, d, per_iteration=per_iteration)
        elif method is Method.GAUSSIAN:
            proj = make_gaussian_nonorthogonal(rng, c, d)
        elif method is Method.PCA_FIRST:
            proj = make_pca(X, d, "first")
        elif method is Method.PCA_LAST:
            proj = make_pca(X, d, "last")
        else:
            proj = make_autoencoder(X, d, rng=rng, gamma=self.gamma, steps=self.ae_steps,
                                    step_size=self.ae_step_size)
        self.projector_ = proj
        self.components_ = np.array(proj.k)
        self.n_components_ = proj.d
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return X @ self.components_


class _MLPBase(ClassifierMixin, BaseEstimator):
    def _encode(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        return X, y_enc

    def _train_spec(self):
        return TrainSpec(self.epochs, self.batch_size, self.lr_init, self.momentum, self.weight_decay,
                         self.schedule, self.random_state)

    def _check(self, X):
        check_is_fitted(self, "network_")
        return validate_data(self, X, dtype=np.float64, reset=False)

    def _logits(self, X):
        X = self._check(X)
        logits, _ = forward(self.network_, X)
        return logits

    def decision_function(self, X):
        """Output logits; for two classes, the margin of the second class over the first."""
        logits = self._logits(X)
        if logits.shape[1] == 2:
            return logits[:, 1] - logits[:, 0]
        return logits

    def predict_proba(self, X):
        return softmax(self._logits(X))

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def features(self, X):
        """Tap activations, one ``(n_samples, width)`` array per tap."""
        X = self._check(X)
        _, taps = forward(self.network_, X)
        return taps


class MLPTeacherClassifier(_MLPBase):
    """ReLU MLP trained on cross-entropy; every hidden layer is tapped by default."""

    def __init__(self, hidden_layer_sizes=(64, 64), taps=None, epochs=300, batch_size=32, lr_init=0.02,
                 momentum=0.9, weight_decay=5e-4, schedule="cosine", random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.taps = taps
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.random_state = random_state

    def fit(self, X, y):
        X, y_enc = self._encode(X, y)
        hidden = list(self.hidden_layer_sizes)
        taps = tuple(range(len(hidden))) if self.taps is None else tuple(self.taps)
        specs = mlp_specs(X.shape[1], hidden, len(self.classes_), taps=taps)
        data = Dataset(X, y_enc, X, y_enc)
        self.network_, self.metrics_ = train_teacher(specs, data, self._train_spec(), with_metrics=True)
        return self


class RdimKDClassifier(_MLPBase):
    """Student MLP distilled from a fitted teacher through projected features.

    Parameters
    ----------
    teacher : MLPTeacherClassifier or Network
        Already trained; only read.
    hidden_layer_sizes : tuple, default=(8, 8)
    taps : tuple of int, default=(1, 2)
        Student linear layers whose outputs are paired with the teacher taps.
    split_through : dict or "auto", default="auto"
        ``{layer: t}`` factorizations; ``"auto"`` splits each tapped layer
        through the matching teacher tap width when the widths differ.
    method, reduction_rate, alpha, beta, mask :
        Distillation settings (``mask`` defaults to all taps on).
    inherit : bool, default=False
        Copy same-shape teacher layers into the student before training.
    """

    def __init__(self, teacher=None, hidden_layer_sizes=(8, 8), taps=(1, 2), split_through="auto",
                 method="random", reduction_rate=4.0, alpha=1.0, beta=0.0, mask=None, inherit=False,
                 epochs=300, batch_size=32, lr_init=0.02, momentum=0.9, weight_decay=5e-4,
                 schedule="cosine", random_state=0):
        self.teacher = teacher
        self.hidden_layer_sizes = hidden_layer_sizes
        self.taps = taps
        self.split_through = split_through
        self.method = method
        self.reduction_rate = reduction_rate
        self.alpha = alpha
        self.beta = beta
        self.mask = mask
        self.inherit = inherit
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.random_state = random_state

    def _teacher_network(self) -> Network:
        if isinstance(self.teacher, Network):
            return self.teacher
        check_is_fitted(self.teacher, "network_")
        return self.teacher.network_

    def fit(self, X, y):
        X, y_enc = self._encode(X, y)
        teacher = self._teacher_network()
        hidden = list(self.hidden_layer_sizes)
        taps = tuple(self.taps)
        if self.split_through == "auto":
            dims = [X.shape[1], *hidden, len(self.classes_)]
            splits = {
                layer: t for layer, t in zip(taps, teacher.tap_dims) if dims[layer + 1] != t
            }
        else:
            splits = dict(self.split_through or {})
        specs = mlp_specs(X.shape[1], hidden, len(self.classes_), taps=taps, splits=splits)
        mask = self.mask if self.mask is not None else "1" * len(taps)
        if not isinstance(mask, str):
            mask = mask_to_str(mask)
        distill = DistillSpec(self.method, self.reduction_rate, self.alpha, self.beta, mask, self.random_state)
        data = Dataset(X, y_enc, X, y_enc)
        result = distill_student(specs, teacher, data, self._train_spec(), distill, inherit=self.inherit)
        self.network_ = result.student
        self.metrics_ = result.metrics
        self.projectors_ = result.projectors
        return self

    @property
    def merged_network_(self) -> Network:
        """Inference network with every split pair multiplied back together."""
        check_is_fitted(self, "network_")
        return merge_network(self.network_)
