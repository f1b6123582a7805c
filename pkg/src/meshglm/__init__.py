"""Classical and spatial Bayesian GLMs on triangulated surface meshes."""

from .activation import (
    ActivationMap,
    classical_ttest,
    combine_hemispheres,
    correct_bonferroni,
    correct_fdr,
    correct_permutation,
    excursion_set,
)
from .inference import (
    ClassicalFit,
    GroupContrast,
    Hyperparams,
    PosteriorField,
    averaging_contrast,
    fit_classical,
    fit_classical_multi,
    group_classical,
    group_posterior,
    marginal_loglik,
    optimize_hyperparams,
    posterior,
)
from .mesh import (
    FemMatrices,
    SurfaceMesh,
    assemble_fem,
    edge_distance_distortion,
    read_mesh,
    surface_smooth,
    vertex_adjacency,
    write_mesh,
)
from .reliability import (
    dice,
    icc,
    icc_map,
    icc_quality_bins,
    paired_dice_difference,
    proxy_accuracy,
)
from .signal import (
    ArModel,
    SessionData,
    TaskParadigm,
    build_design,
    condition,
    fit_ar_yule_walker,
    prewhiten,
    regularize_ar,
    select_ar_order,
)
from .simulate import (
    PopulationSpec,
    SimSpec,
    block_paradigm,
    make_grid_mesh,
    make_icosphere,
    make_mesh,
    simulate_population,
    simulate_session,
)
from .spde import SpdeHyper, SpdeOperator, build_precision, matern_cov, sample_gmrf

__version__ = "0.1.0"
