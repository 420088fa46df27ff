"""Missing-data imputation, dimensionality diagnostics, and rolling
principal-components-regression backtests for cross-sectional predictor
panels."""

from .backtest import (PortfolioSeries, StrategySpec, TuningSpec,
                       decile_portfolio, ols_forecast, pcr_forecast,
                       rolling_run, single_predictor_strategy, spcr_forecast)
from .em import (ConditionalMoments, CovModel, conditional_moments, em_fit,
                 impute_em, quasi_loglik)
from .errors import (DataError, DegenerateSortError, EmptyCrossSectionError,
                     NumericalError, XimputeError)
from .imputers import (ImputedCrossSection, ImputerSpec, impute_ar1_em,
                       impute_group_mean, impute_last_observed, impute_mvn_em,
                       impute_ppca_em, impute_simple_mean, run_imputer)
from .panel import (CrossSection, PredictorPanel, add_months, combine_j_summary,
                    cross_section, load_panel, missingness_map, month_span,
                    observed_share_percentiles, panel_from_frames)
from .pipeline import TransformCache
from .simlab import (DimReport, SimConfig, drop_observations, random_corr,
                     rng_for, run_dim_experiment, synth_panel)
from .spectral import (SlopeDistribution, Spectrum, available_case_corr,
                       corr_difference_stats, em_corr, imputation_slopes,
                       pca_spectrum, pooled_covariance, scaled_predictors)
from .transform import (TransformParams, apply_transform, box_cox_core,
                        fit_transform, hawkins_map, invert_transform,
                        winsorize)

__version__ = "0.1.0"
