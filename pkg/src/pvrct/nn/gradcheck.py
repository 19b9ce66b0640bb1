"""Central finite-difference gradient checking (float64)."""

import numpy as np


def numerical_grad(f, x, h=1e-6, indices=None):
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (perturbed
    in place and restored). With ``indices`` only those flat entries are
    probed; the rest of the result stays zero."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic, numeric, floor=1e-12):
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)
