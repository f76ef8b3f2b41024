"""Meta-analysis of p-values when some studies report only whether p < alpha."""

from .imputation import (
    CLTWarning,
    Method,
    NullCdf,
    TruncatedMoments,
    mean_expected_statistic,
    mean_impute_statistic,
    mean_null_cdf,
    method_pvalue,
    multiple_impute_statistic,
    multiple_null_cdf,
    single_impute_statistic,
    truncated_moments,
)
from .inference import FeatureResult, bh_adjust, by_adjust, meta_analyze_matrix, true_fdr
from .ingest import DataError, ingest_csv, ingest_de_lists
from .model import Schema, StudyMatrix, StudyObservation, StudyPanel, Transform, combine_available, combine_complete
from .store import CompressionReport, StoreError, TruncatedStore, read_store, truncate_matrix, write_store

__version__ = "0.1.0"
