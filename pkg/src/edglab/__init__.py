"""edglab: simulation and numerical analysis of exchange-driven growth.

Exact kinetic Monte Carlo for monomer-exchange dynamics on the complete
graph, a truncated mean-field ODE integrator for the limiting cluster-size
distribution (including the size-biased and tagged-particle limits), and a
statistical verification layer for law-of-large-numbers, coarsening and
gelation diagnostics.
"""

from .kernels import (
    Kernel,
    make_product_kernel,
    make_table_kernel,
    load_table_kernel,
    verify_kernel,
)
from .particle import CountState, RandomStream, init_iid, replica_seed, run_until
from .sites import SiteSystem, site_reference_run
from .observables import empirical_measure, size_biased_measure, moment, pair_with
from .meanfield import (
    MeanFieldState,
    MeanFieldTrajectory,
    coarsening_scale,
    edg_rhs,
    edg_rhs_product,
    integrate,
    poisson_profile,
    sbm_rhs,
)
from .tagged import (
    TaggedCountState,
    init_tagged,
    limit_tagged_rates,
    run_tagged,
    simulate_limit_tagged,
    tagged_event_rates,
    compare_tagged_laws,
)

__version__ = "0.1.0"
