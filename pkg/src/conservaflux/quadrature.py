"""Gauss quadrature on the reference triangle and the unit segment.

Triangle rules are collapsed Gauss-Legendre x Gauss-Jacobi product rules
(Duffy map of the unit square), which gives positive weights and any
requested polynomial exactness without tabulated constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

_MAX_EXACTNESS = 60


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray   # (m, 2) for triangles, (m,) for segments
    weights: np.ndarray  # (m,), positive
    exactness: int

    def __post_init__(self):
        self.points.setflags(write=False)
        self.weights.setflags(write=False)


@lru_cache(maxsize=None)
def segment_rule(npoints):
    """Gauss-Legendre rule on [0, 1] with the given point count.

    Exact for polynomials of degree 2*npoints - 1.
    """
    if not isinstance(npoints, (int, np.integer)) or npoints < 1:
        raise ValueError(f"segment rule needs a positive point count, got {npoints!r}")
    x, w = roots_legendre(int(npoints))
    return QuadratureRule((x + 1.0) / 2.0, w / 2.0, 2 * int(npoints) - 1)


@lru_cache(maxsize=None)
def triangle_rule(exactness):
    """Rule on the reference triangle {x, y >= 0, x + y <= 1}.

    Integrates all polynomials up to the requested total degree; the
    weights sum to the reference area 1/2.
    """
    if (not isinstance(exactness, (int, np.integer)) or exactness < 0
            or exactness > _MAX_EXACTNESS):
        raise ValueError(f"unsupported triangle exactness request: {exactness!r} "
                         f"(supported: 0..{_MAX_EXACTNESS})")
    m = int(exactness) // 2 + 1  # 2m - 1 >= exactness
    xu, wu = roots_legendre(m)
    xu = (xu + 1.0) / 2.0
    wu = wu / 2.0
    # Jacobi weight (1 - v) absorbs the Duffy-map Jacobian exactly.
    xv, wv = roots_jacobi(m, 1.0, 0.0)
    xv = (xv + 1.0) / 2.0
    wv = wv / 4.0
    u, v = np.meshgrid(xu, xv, indexing="ij")
    pts = np.column_stack([(u * (1.0 - v)).ravel(), v.ravel()])
    w = np.outer(wu, wv).ravel()
    return QuadratureRule(pts, w, int(exactness))
