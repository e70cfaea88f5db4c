"""Independent reference implementations used as test oracles."""

import numpy as np


def grid_search_poca(o1, d1, o2, d2, span=1e4, rounds=20, n=41):
    """Brute-force closest approach by nested grid refinement over t.

    With ``w(t)`` the residual from ``o1 + t d1`` to its foot on line 2, the
    minimizer is where ``w(t) . d1`` changes sign (it increases with t).
    Each round keeps the bracketing grid cell.  Searching on the sign avoids
    the flat bottom of the distance itself, which float64 cannot resolve
    below ~1e-6.
    """
    def residual(ts):
        p = o1 + ts[:, None] * d1
        return p - (o2 + np.outer((p - o2) @ d2, d2))

    lo, hi = -span, span
    for _ in range(rounds):
        ts = np.linspace(lo, hi, n)
        g = residual(ts) @ d1
        k = int(np.searchsorted(g, 0.0))
        lo, hi = ts[max(k - 1, 0)], ts[min(k, n - 1)]
    t = 0.5 * (lo + hi)
    p = o1 + t * d1
    return p - 0.5 * residual(np.array([t]))[0]
