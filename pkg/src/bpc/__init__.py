"""Inference for the bivariate Poisson-conditionals distribution."""

from bpc.series import (
    DeltaParams,
    LambdaParams,
    SeriesControl,
    SeriesError,
    from_delta,
    j_value,
    log_j_value,
    log_pmf,
    marginal_pmf_y,
    moments,
    pmf,
    to_delta,
)

__version__ = "0.1.0"
