"""Tree-reweighted inference on pairwise MRFs via monotone dual coordinate descent."""

from .model import (
    Graph,
    IsingSpec,
    ModelFormatError,
    PairwiseMRF,
    assignment_score,
    gen_ising_grid,
    grid_graph,
    parse_model,
    read_model,
    serialize_model,
    validate_model,
    write_model,
)
from .spanning import (
    DirectedTree,
    EdgeProbabilities,
    enumerate_directed_trees,
    parse_rho,
    probs_from_trees,
    serialize_rho,
    uniform_tree_probs,
    validate_probs,
)
from .dual import (
    DualState,
    PrimalMarginals,
    consistency_check,
    dual_gradient,
    dual_objective,
    optimality_residual,
    primal_objective,
    to_primal,
    tree_entropy,
)
from .solver import GpConfig, SolveTrace, reparam_product, solve, step_size, update_edge_beta
from .baselines import MpConfig, exact_log_partition, exact_marginals, solve_gradient_descent, solve_trw_mp

__version__ = "0.1.0"
