"""Numerics for almost periodic functions and their set-valued selections.

Submodules: core (symbolic functions, frequency modules), metrics (Besicovitch
/ Stepanov / sup metrics, densities, coefficient probes), perturb (fast-sine
level-avoidance series), partition (measurable sets and partitions), selection
(selections of set-valued maps), cli (scenario runner), verify (invariant
suite).
"""

from .core import (ApCertificateError, ApConfigError, ApError,
                   ApNumericalError, DistTo, FrequencyBasis, FrequencyModule,
                   FuncExpr, MetricSpaceCfg, MultiMap, PerturbedSum,
                   ScalarProd, Sgn, Shift, Stack, StepCompose, Sum, TrigPoly,
                   Truncate, circle_exp, const, cos_wave, eval_batch,
                   evaluate, freq_module, module_contains, real_spectrum,
                   sgn_op, shift, sin_wave, trig_real, truncate)
from .metrics import (AverageEstimate, AveragingScheme, almost_periods,
                      capped_DB, default_scheme, density_upper,
                      dist_hausdorff, fourier_bohr, metric_DB_p, metric_DS_p,
                      metric_Dinf, time_average)
from .partition import (BlockMaxDistance, Complement, Diff, Empty, FullLine,
                        Intersect, LevelSet, PartitionFamily, SetExpr, Union,
                        UnionN, build_partition, cover_points, level_split,
                        membership)
from .perturb import (AvoidanceParams, PerturbationSeries, avoidance_alpha,
                      avoidance_density, avoidance_params, build_perturbation,
                      level_density, tau0_estimate, verify_level_density)
from .selection import (GammaSchedule, SelectionResult, build_selection,
                        dense_selections, gamma_schedule, gamma_tail_bound)

__version__ = "0.1.0"
