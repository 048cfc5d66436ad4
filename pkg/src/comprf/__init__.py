"""Comparison-based random forests.

Classification and regression that touch the data only through triplet
distance comparisons ("is x closer to a or to b?"), plus the evaluation
and theory-simulation tooling built on top.
"""

__version__ = "0.1.0"

from .comptree import (
    SUPERVISED,
    UNSUPERVISED,
    BuildParams,
    CompTree,
    PivotPolicy,
    build,
)
from .dataset import (
    CLASSIFY,
    REGRESS,
    LabeledDataset,
    SplitSpec,
    load_csv,
    load_libsvm,
    split,
    subsample,
)
from .errors import (
    ComprfError,
    ConfigError,
    DataError,
    FingerprintMismatchError,
    ModelFormatError,
    OracleError,
    TaskMismatchError,
)
from .evaluation import (
    CVResult,
    EvalReport,
    GridSpec,
    cross_validate,
    error_rate,
    knn_baseline,
    load_table,
    rmse,
    run_experiment,
)
from .forest import Forest, ForestParams, Prediction, fit, load, save
from .oracle import (
    CachingOracle,
    CountingOracle,
    DistanceMatrixOracle,
    EuclideanOracle,
    TripletOracle,
    caching,
    counting,
    distance_matrix_oracle,
    euclidean_oracle,
    gram_oracle,
)
from .theorysim import (
    ContinuousCell,
    ContinuousTree,
    HalvingCurve,
    SimConfig,
    TrendResult,
    consistency_trend,
    diameter_halving_curve,
    estimate_diameter,
    grow,
)

__all__ = [name for name in dir() if not name.startswith("_")]
