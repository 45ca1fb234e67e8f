"""Training-free evolutionary neural architecture search."""

__version__ = "0.1.0"

from .benchio import (
    TabularBenchmark,
    correlation_report,
    exhaustive_best,
    kendall_tau,
    load_tabular,
    spearman_rho,
)
from .evolve import (
    ConstraintSpec,
    Individual,
    MetricFitness,
    ScalarFitness,
    SearchConfig,
    SearchResult,
    feasible,
    run_search,
)
from .fitness import ExploredRegistry, fitness
from .metrics import (
    MetricVector,
    evaluate,
    linear_regions,
    log_synflow,
    skip_score,
    synflow,
)
from .netbuilder import (
    CostReport,
    MacroSkeleton,
    build_network,
    count_flops,
    count_params,
    default_skeleton,
    deep_skeleton,
    genotype_cost,
)
from .searchspace import (
    Family,
    Genotype,
    NatsGenotype,
    Nb101Genotype,
    Op,
    SpaceDescriptor,
    canonical_hash,
    canonicalize,
    crossover,
    enumerate_space,
    format_genotype,
    mutate,
    parse_genotype,
    random_genotype,
)
