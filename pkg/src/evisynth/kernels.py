"""Numerical kernel backend selection.

Imports the compiled core if present, otherwise the numpy fallback.
Set ``EVISYNTH_PURE=1`` to force the fallback (used by the benchmark and
the parity tests). ``BACKEND`` names the active implementation and is
recorded in every run manifest.
"""

import os

if os.environ.get("EVISYNTH_PURE", "") == "1":
    from . import _core_py as _impl

    BACKEND = "pure"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import _core_py as _impl

        BACKEND = "pure"

expit_into = _impl.expit_into
logit_into = _impl.logit_into
softplus_into = _impl.softplus_into
softmax_rows = _impl.softmax_rows
binom_sum_p = _impl.binom_sum_p
binom_sum_logit = _impl.binom_sum_logit
poisson_sum = _impl.poisson_sum
normal_sum = _impl.normal_sum
csr_weighted_sum = _impl.csr_weighted_sum
csr_gather_sum = _impl.csr_gather_sum
sum_arr = _impl.sum_arr
scatter_add = _impl.scatter_add
csr_scatter_add = _impl.csr_scatter_add
softmax_rows_backward = _impl.softmax_rows_backward
