"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used.  Setting ``VARISTEP_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _pykernels as python_backend

__all__ = [
    "BACKEND",
    "backends",
    "cell_density",
    "raster_coverage",
    "bilinear_weights",
    "invert_bilinear",
]

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and not os.environ.get("VARISTEP_PURE_PYTHON"):
    _active = compiled_backend
    BACKEND = "compiled"
else:
    _active = python_backend
    BACKEND = "python"


def backends():
    """Return a dict of the available backend modules by name."""
    out = {"python": python_backend}
    if compiled_backend is not None:
        out["compiled"] = compiled_backend
    return out


def cell_density(F, G, lam, mu, a, q, w_svk, w_bar, w_reg):
    import numpy as np
    F = np.ascontiguousarray(F, dtype=float)
    G = np.ascontiguousarray(G, dtype=float)
    return _active.cell_density(F, G, float(lam), float(mu), float(a),
                                float(q), float(w_svk), float(w_bar),
                                float(w_reg))


def raster_coverage(quads, x0, y0, ds, nx, ny):
    import numpy as np
    quads = np.ascontiguousarray(quads, dtype=float)
    return _active.raster_coverage(quads, float(x0), float(y0), float(ds),
                                   int(nx), int(ny))


def bilinear_weights(px, py, x0, y0, dx, dy, nx, ny):
    import numpy as np
    px = np.ascontiguousarray(px, dtype=float).ravel()
    py = np.ascontiguousarray(py, dtype=float).ravel()
    return _active.bilinear_weights(px, py, float(x0), float(y0), float(dx),
                                    float(dy), int(nx), int(ny))


def invert_bilinear(quads, points):
    import numpy as np
    quads = np.ascontiguousarray(quads, dtype=float)
    points = np.ascontiguousarray(points, dtype=float).reshape(-1, 2)
    return _active.invert_bilinear(quads, points)
