"""Gated relational feature learning on image pairs.

Multiplicative three-way models relate two inputs through a factored
interaction tensor: mapping units pool evidence for transformations
(shifts, rotations, motion) independently of image content.  Submodules:

- datagen: synthetic transforming dot pairs/movies, whitening, dataset IO
- tensor_core: dense interaction tensor and its factored form, weight IO
- gae: gated autoencoder with analytic gradients and SGD training
- grbm: gated Boltzmann machine trained by single-step contrastive
  divergence
- energy_isa: energy (square-pooling) models and subspace analysis
- spectral: commuting warp families, shared eigenbases, rotation
  detectors, filter diagnostics
- infer_tools: flow fields and analogy-making from trained models
- viz: filter grids, flow renders, analogy strips
- cli: the `relate` command line
"""

from .datagen import (
    PairBatch,
    Patch,
    WhiteningTransform,
    apply_whitening,
    fit_whitening,
    gen_dot_movies,
    gen_rotated_pairs,
    gen_shifted_dots,
    gen_splitscreen_dots,
    load_batch,
    normalize,
    rotate_image,
    save_batch,
    shift_image,
)
from .energy_isa import (
    EnergyModel,
    block_diagonal_pooling,
    energy_response,
    expand_energy,
    init_energy_model,
    isa_objective,
    load_isa,
    orthonormalize,
    save_isa,
    train_isa,
)
from .errors import (
    ConfigError,
    DataError,
    DegenerateDataWarning,
    NotNormalizedWarning,
    NotWhitenedWarning,
    NumericalError,
    RelateError,
    TrainingDivergedError,
)
from .gae import (
    GaeModel,
    TrainConfig,
    apply_norm_constraint,
    corrupt_inputs,
    decode,
    decode_reverse,
    encode,
    finite_difference_check,
    gradients,
    init_gae,
    load_gae,
    loss,
    save_gae,
    train,
)
from .grbm import (
    GbmModel,
    binarize_batch,
    cd1_step,
    energy,
    init_gbm,
    load_gbm,
    p_y_given_xz,
    p_z_given_xy,
    save_gbm,
    train_cd1,
)
from .infer_tools import FlowField, analogy, code_warp, infer_flow
from .spectral import (
    DetectorBank,
    EigenStructure,
    WarpMatrix,
    commute_residual,
    detector_response,
    dft_concentration,
    energy_detector_response,
    energy_rotation_response,
    filter_diagnostics,
    make_2d_shift,
    make_cyclic_shift,
    make_detector_bank,
    rotation_response,
    rotation_response_curve,
    shared_eigenbasis,
    spacetime_phase_drift,
)
from .tensor_core import (
    DenseTensor,
    FactoredParams,
    MappingCode,
    expand_factored,
    load_params,
    oracle_decode,
    oracle_encode,
    save_params,
    warp_from_code,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
