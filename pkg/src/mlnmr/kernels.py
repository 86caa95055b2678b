"""Likelihood kernel dispatch.

Re-exports the kernel functions from the build selected by
:mod:`mlnmr.backend`: compiled scalar loops under numba, vectorized numpy
otherwise.  Both builds satisfy identical contracts, so callers import from
here and stay backend-agnostic.
"""

from .backend import USE_NUMBA

if USE_NUMBA:
    from ._kernels_nb import (
        agd_row_ll,
        agd_row_ll_mspline,
        agd_terms,
        agd_terms_mspline,
        ipd_row_ll,
        ipd_row_ll_mspline,
        ipd_terms,
        ipd_terms_mspline,
        surv_curves,
        surv_curves_mspline,
    )
else:
    from ._kernels_np import (
        agd_row_ll,
        agd_row_ll_mspline,
        agd_terms,
        agd_terms_mspline,
        ipd_row_ll,
        ipd_row_ll_mspline,
        ipd_terms,
        ipd_terms_mspline,
        surv_curves,
        surv_curves_mspline,
    )

from ._kernels_np import logmeanexp

__all__ = [
    "agd_row_ll",
    "agd_row_ll_mspline",
    "agd_terms",
    "agd_terms_mspline",
    "ipd_row_ll",
    "ipd_row_ll_mspline",
    "ipd_terms",
    "ipd_terms_mspline",
    "logmeanexp",
    "surv_curves",
    "surv_curves_mspline",
]
