"""Quantile mediation analysis under a Gaussian-copula structural equation model."""

__version__ = "0.1.0"

from ._validation import Dataset, DataFormatError, read_dataset, write_dataset
from .diagnostics import (SensitivityCurve, bh_fdr, cauchy_combination, gof_test, screen,
                          sensitivity_curve)
from .estimands import EstimandQuery, EstimandValue, delta_term, effects, estimand_curve, qnde, qnie, qte
from .estimation import FitResult, GsemMediation, fit, fit_dag
from .glm import GLMMarginal, fit_marginal
from .gsem import (DagParams, GsemModel, adjacency, gaussian_copula_log_density, implied_correlation,
                   joint_log_likelihood, normal_score)
from .marginals import (Family, Link, MarginalModel, marginal_cdf, marginal_log_density, marginal_quantile,
                        marginal_sample)
from .mediation_tests import (AbConfig, MediationTest, Method, TestResult, ab_test, classical_bootstrap_test,
                              joint_significance_tests, lambda_n, poc_bootstrap_test, pretest_stats, r_star,
                              run_tests, sobel_poc_test)
from .simulation import (SimScenario, StudyReport, counterfactual_oracle, run_mixture_null_study,
                         run_mse_study, run_null_study, run_power_study, sample_gsem)

__all__ = [
    "Dataset", "DataFormatError", "read_dataset", "write_dataset",
    "SensitivityCurve", "bh_fdr", "cauchy_combination", "gof_test", "screen", "sensitivity_curve",
    "EstimandQuery", "EstimandValue", "delta_term", "effects", "estimand_curve", "qnde", "qnie", "qte",
    "FitResult", "GsemMediation", "fit", "fit_dag", "GLMMarginal", "fit_marginal",
    "DagParams", "GsemModel", "adjacency", "gaussian_copula_log_density", "implied_correlation",
    "joint_log_likelihood", "normal_score",
    "Family", "Link", "MarginalModel", "marginal_cdf", "marginal_log_density", "marginal_quantile",
    "marginal_sample",
    "AbConfig", "MediationTest", "Method", "TestResult", "ab_test", "classical_bootstrap_test",
    "joint_significance_tests", "lambda_n", "poc_bootstrap_test", "pretest_stats", "r_star", "run_tests",
    "sobel_poc_test",
    "SimScenario", "StudyReport", "counterfactual_oracle", "run_mixture_null_study", "run_mse_study",
    "run_null_study", "run_power_study", "sample_gsem",
]
