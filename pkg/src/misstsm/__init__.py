"""Imputation-free modelling of irregularly sampled multivariate time series.

Each observed (time, variate) scalar becomes its own token; a masked
cross-attention with one learnable query pools the observed tokens of
every time step into a dense vector, so missing values are never filled.
"""
from .layer import MissTSMConfig, MissTSMLayer, misstsm_layer, pos_encode_2d, tfi_embed
from .dataio import TimeSeries, load_forecast_csv, load_classification
from .masking import MaskSpec, gen_mcar, gen_periodic
from .backbone import BackboneConfig, MissTSMModel, TrainConfig

__all__ = [
    "MissTSMConfig", "MissTSMLayer", "misstsm_layer", "pos_encode_2d", "tfi_embed",
    "TimeSeries", "load_forecast_csv", "load_classification",
    "MaskSpec", "gen_mcar", "gen_periodic",
    "BackboneConfig", "MissTSMModel", "TrainConfig",
]
__version__ = "0.1.0"
