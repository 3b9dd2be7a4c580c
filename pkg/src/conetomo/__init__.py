"""Numerical geodesic X-ray tomography on asymptotically conic collars."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    FrameWeights,
    LinkMetric,
    MetricBlocks,
    MetricSpec,
    frame_weights,
    metric_at,
    sc_1c_inner_product,
)
from .geodesic import (  # noqa: F401
    GeodesicPath,
    GeodesicState,
    concavity_alpha,
    conic_closed_form,
    conjugate_scan,
    shoot,
)
from .field import (  # noqa: F401
    AnalyticField,
    Grid,
    TensorField,
    apply_conjugation,
    chi_cutoff,
    pair_velocity,
    phi_weight,
)
