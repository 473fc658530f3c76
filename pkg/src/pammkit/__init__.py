"""Piece-wise exponential additive mixed models.

The package turns right-censored survival data into piece-wise exponential
data (PED), fits penalized Poisson additive models on it, post-processes
fits into hazard, cumulative hazard and survival curves, and simulates
survival times from user-written hazard expressions, including cumulative
(time-lagged) exposure effects.
"""

__version__ = "0.1.0"

#: on-disk format version shared by PED bundles and model files
FORMAT_VERSION = 1

from . import errors
from .formula import (
    DefaultLagLead,
    LaggedLagLead,
    WindowLagLead,
    parse_hazard_expression,
    parse_lag_lead,
    parse_model_formula,
    parse_transform_formula,
)
from .ped import (
    PedDataset,
    PedTransformer,
    default_cuts,
    int_info,
    make_lag_lead,
    read_ped_bundle,
    split_concurrent,
    split_cumulative,
    split_tcc,
    to_ped,
    write_ped_bundle,
)
from .simulate import (
    PexpDist,
    add_tdc,
    rpexp_inverse,
    sim_pexp,
)
from .fit import (
    FittedPamm,
    PammModel,
    fit_pamm,
    load_model,
    posterior_draws,
    save_model,
)
from .predict import (
    add_cumu_hazard,
    add_hazard,
    add_surv_prob,
    export_cumu_effect,
    export_laglead,
    export_partial_effect,
    get_cumu_coef,
    kaplan_meier,
    make_newdata,
    ped_info,
    sample_info,
)

__all__ = [
    "errors",
    "FORMAT_VERSION",
    "DefaultLagLead",
    "LaggedLagLead",
    "WindowLagLead",
    "parse_hazard_expression",
    "parse_lag_lead",
    "parse_model_formula",
    "parse_transform_formula",
    "PedDataset",
    "PedTransformer",
    "default_cuts",
    "int_info",
    "make_lag_lead",
    "read_ped_bundle",
    "split_concurrent",
    "split_cumulative",
    "split_tcc",
    "to_ped",
    "write_ped_bundle",
    "PexpDist",
    "add_tdc",
    "rpexp_inverse",
    "sim_pexp",
    "FittedPamm",
    "PammModel",
    "fit_pamm",
    "load_model",
    "posterior_draws",
    "save_model",
    "add_cumu_hazard",
    "add_hazard",
    "add_surv_prob",
    "export_cumu_effect",
    "export_laglead",
    "export_partial_effect",
    "get_cumu_coef",
    "kaplan_meier",
    "make_newdata",
    "ped_info",
    "sample_info",
]
