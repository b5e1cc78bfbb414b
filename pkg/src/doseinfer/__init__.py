"""Nonparametric tests and simultaneous confidence bands for causal dose-response curves."""

from .bands import BandConfig, BandResult, band_at, build_band, critical_value
from .basis import (
    BasisFunction,
    FunctionClassSpec,
    SobolevBasis,
    eval_basis,
    gram_matrices,
    project_membership,
    roughness,
)
from .data import DataError, NullCurve, ObservationSet, load_csv, rescale_from_unit, rescale_to_unit, write_csv
from .estimators import (
    EifMatrix,
    PsiVector,
    TmlUpdate,
    build_workspace,
    eif_evaluate,
    psi_one_step,
    psi_plugin,
    psi_tml,
    tml_update,
)
from .kappa import KappaSelection, select_kappa
from .nuisance import (
    NuisanceFit,
    PluginCurve,
    fit_conditional_density,
    fit_conditional_mean,
    fit_nuisance,
    plugin_curve,
    stability_weights,
)
from .qcqp import QcqpSolution, solve_qcqp
from .simulation import DgpConfig, McReport, gen_data, oracle_kappa, run_mc
from .sup_test import (
    BootstrapDistribution,
    TestConfig,
    TestResult,
    bootstrap_null,
    p_value,
    primitive_function_test,
    run_test,
)

__version__ = "0.1.0"
