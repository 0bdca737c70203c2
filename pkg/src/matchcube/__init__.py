"""matchcube: an in-memory columnar causal-matching engine.

Covariate matching and subclassification (coarsened exact matching, exact
matching, propensity-score methods, nearest-neighbor matching under a
caliper), treatment-effect and balance estimation, and multi-treatment
optimizations (covariate factoring, partial data cubes, offline store
preparation with online subpopulation queries).
"""

from .coarsen import (
    CutpointSpec,
    INCOMPARABLE,
    coarse_name,
    coarsen,
    coarsened_distance,
    equal_width_cutpoints,
)
from .cube import CuboidLattice, cem_from_cube, materialize_cuboids
from .errors import (
    ConfigError,
    DataError,
    EstimationError,
    MatchcubeError,
    SchemaError,
)
from .estimate import (
    BalanceReport,
    ate_matched,
    ate_subclass,
    awmd,
    balance_report,
    raw_awmd,
    treated_share,
)
from .factoring import (
    FactoredPartition,
    TreatmentGroup,
    TreatmentSet,
    covariate_factor,
    mcem,
    partition_treatments,
    phi,
)
from .matching import (
    CoarsenedDistance,
    MahalanobisDistance,
    MatchedPairs,
    PropensityScoreDistance,
    covariance_inverse,
    mahalanobis,
    nnm_with_replacement,
    nnm_without_replacement,
)
from .predicates import And, Comparison, Or, parse_predicate
from .propensity import (
    FitConfig,
    LogisticModel,
    fit_logistic,
    load_model,
    save_model,
    score,
    trim,
)
from .store import (
    PreparedStore,
    load_store,
    prepare_database,
    query_prepared,
    save_store,
)
from .subclass import (
    SubclassifiedTable,
    cem,
    cem_pushdown,
    exact_match,
    pairs_to_subclasses,
    subclassify_ps,
)
from .tables import (
    Column,
    ColumnKind,
    JoinSpec,
    UnitTable,
    join,
    load_csv,
    select,
    tables_equal,
    write_csv,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
