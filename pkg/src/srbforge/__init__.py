"""srbforge: invariant densities for weakly expanding maps, built through
expansion-time detection, inverse-branch pre-balls, an exact inductive
partition with protection collars, the induced Markov map, and the finite
tower reconstruction, validated against independent density oracles."""

from .dynamics import (MapSystem, OrbitCache, builtin_map_names,
                       evaluate_orbit, get_map, iterate_map,
                       truncated_distance, verify_nondegeneracy)
from .hyperbolic import (HyperbolicConfig, expansion_sum, hyperbolic_density,
                         hyperbolic_times_up_to, is_hyperbolic_time,
                         lyapunov_statistics, slow_recurrence_average)
from .partition import (BasePartition, PartitionState, algorithm_step,
                        audit_no_deep_overlap, forbidden_mass_series,
                        make_base_partition, ring_index, run_partitioning)
from .preballs import (PreBall, compute_preball, jacobian_distortion,
                       verify_backward_contraction)
from .regions import IntStepField, RegionSet
from .tower import (DensityEstimate, InducedMarkovMap, assemble_induced_map,
                    birkhoff_check, hyperbolic_vs_return_statistics,
                    induced_invariant_density, l1_distance, time_integral,
                    tower_pushforward)
from .cli import ExperimentConfig, compare_densities, run_experiment

__version__ = "0.1.0"
