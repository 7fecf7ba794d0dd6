"""NMF with continuous neural factors for irregularly sampled T-F data."""

from .tfpoints import (
    NormalizationInfo,
    PointsFormatError,
    TFPoint,
    TFPointSet,
    compute_normalization,
    load_points,
    save_points,
)
from .transforms import (
    AudioBuffer,
    CqtConfig,
    StftGrid,
    cqt_to_points,
    istft,
    read_wav,
    sinusoidal_model_points,
    stft,
    stft_to_points,
    write_wav,
)
from .inr import (
    EncodingConfig,
    GradientBuffer,
    InrFunction,
    fourier_encode,
    geometric_encoding,
    inr_backward,
    inr_evaluate,
    inr_evaluate_batch,
    inr_init,
)
from .factorize import (
    ActivationMatrix,
    FitResult,
    InnmfModel,
    MatrixNmfModel,
    ModelFormatError,
    TabulatedFunction,
    TrainConfig,
    TrainingDivergedError,
    grid_collapse_check,
    innmf_fit,
    kl_pointwise,
    load_model,
    matrix_nmf_refit_h,
    mean_kl,
    nmf_multiplicative,
    refit_activations,
    save_model,
    tabulated_model,
)
from .separate import (
    BssMetrics,
    SeparationJob,
    SeparationResult,
    bss_metrics,
    fit_mixture_activations,
    make_zero_db_mixture,
    run_separation,
    run_separation_nmf,
    soft_mask_reconstruct,
    soft_masks,
)

__version__ = "0.1.0"
