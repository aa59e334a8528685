"""evisynth: Bayesian multi-source evidence synthesis for stratified HIV burden.

Estimates, per exposure-group/age/gender/region/year stratum, the population
share of each exposure group (rho), HIV prevalence (pi) and the proportion of
infections diagnosed (delta), by combining surveillance, registry and survey
datasets in one posterior. Ships a synthetic-data simulator and a
simulation-based calibration harness for end-to-end verification.
"""

__version__ = "0.1.0"

RNG_NAME = "Philox4x64-10 (numpy), substreams via SeedSequence.spawn"


def kernel_backend() -> str:
    """Name of the active numerical core ('compiled' or 'pure')."""
    from . import kernels

    return kernels.BACKEND
