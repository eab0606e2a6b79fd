"""Cross-fitted one-step estimation and confidence-set inference for
function-valued causal targets: counterfactual densities, bandlimited
counterfactual densities, and counterfactual kernel mean embeddings."""

from .hilbert import (
    Basis,
    L2Fn,
    QuadGrid,
    RegSeq,
    eval_basis,
    gamma_beta,
    gamma_beta_inv,
    inner,
    norm,
    project_callable,
    seminorm_beta,
    sinc_kernel,
    sobolev_norm_u,
)
from .nuisance import Dataset, FoldSplit, read_csv, split_folds
from .density import density_difference, projection_onestep, regularized_onestep
from .rkhs import GaussianKernel, KmeElement, band_onestep, kme_inner, kme_onestep, median_heuristic
from .inference import (
    band_uniform_radius,
    bootstrap_threshold,
    build_standardizer,
    cs_membership,
    cs_regularized_membership,
    equality_test,
    mmd_test,
    quad_form,
    szekely_threshold,
)
from .cv import CvConfig, cv_select
from .simlab import DgpConfig, TruthFn, gen_data, mise, run_experiment

__version__ = "0.1.0"
