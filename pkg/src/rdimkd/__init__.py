"""Knowledge distillation through reduced-dimensional projections of teacher
and student features."""

from .analysis import (
    CovarianceGrid,
    EigenSpectrum,
    covariance_heatmap,
    spectrum,
    subspace_split_spectra,
)
from .estimators import MLPTeacherClassifier, RdimKDClassifier, SubspaceProjection
from .exceptions import RdimKDError
from .linalg import SeededRng, gram_schmidt, symmetric_eigen
from .losses import DistillSpec, kl_soft_loss, rdimkd_loss, total_objective
from .nets import Network, build_network, forward, merge_network, mlp_specs
from .projection import (
    Method,
    Projector,
    fit_autoencoder,
    make_autoencoder,
    make_gaussian_nonorthogonal,
    make_identity,
    make_pca,
    make_random_orthogonal,
    resolve_projector,
)
from .train import (
    DatasetSpec,
    TrainSpec,
    distill_student,
    generate_dataset,
    run_ablation_grid,
    train_baseline,
    train_teacher,
)

__version__ = "0.1.0"

__all__ = [
    "CovarianceGrid", "DatasetSpec", "DistillSpec", "EigenSpectrum", "MLPTeacherClassifier", "Method",
    "Network", "Projector", "RdimKDClassifier", "RdimKDError", "SeededRng", "SubspaceProjection",
    "TrainSpec", "build_network", "covariance_heatmap", "distill_student", "fit_autoencoder", "forward",
    "generate_dataset", "gram_schmidt", "kl_soft_loss", "make_autoencoder", "make_gaussian_nonorthogonal",
    "make_identity", "make_pca", "make_random_orthogonal", "merge_network", "mlp_specs", "rdimkd_loss",
    "resolve_projector", "run_ablation_grid", "spectrum", "subspace_split_spectra", "symmetric_eigen",
    "total_objective", "train_baseline", "train_teacher",
]
