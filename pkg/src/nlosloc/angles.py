"""Angle arithmetic helpers. All angles are radians; degrees only at config boundaries."""

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_2pi(a):
    """Wrap angle(s) to [0, 2*pi)."""
    return np.mod(a, TWO_PI)


def wrap_pi(a):
    """Wrap angle(s) to (-pi, pi]."""
    w = np.mod(a + np.pi, TWO_PI) - np.pi
    # np.mod maps the upper boundary to -pi; fold it back so the range is (-pi, pi]
    if np.isscalar(w) or w.ndim == 0:
        return np.pi if w == -np.pi else float(w)
    w = np.asarray(w)
    w[w == -np.pi] = np.pi
    return w


def bearing(v):
    """Bearing (angle w.r.t. the horizontal, in [0, 2*pi)) of a 2-vector."""
    v = np.asarray(v, dtype=float)
    return float(wrap_2pi(np.arctan2(v[1], v[0])))


def unit(a):
    """Unit vector at angle a."""
    return np.array([np.cos(a), np.sin(a)], dtype=float)
