"""Independent reference computations used by the tests.

None of these call into the package; they re-derive quantities from first
principles (quadrature, root finding, finite differences).
"""
import math

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

SQRT2 = math.sqrt(2.0)


def phi_cdf(x):
    return 0.5 * math.erfc(-x / SQRT2)


def exponent_measure_2d(y1, y2, g):
    """``V(y1, y2) = E[max(X1 / y1, X2 / y2)]`` for the log-Gaussian pair.

    With site 1 as origin of the pinned process ``X1 = 1`` and
    ``X2 = exp(W - g)``, ``W ~ N(0, 2 g)``.  The expectation is split at the
    crossing point and the upper part integrated numerically.
    """
    s = math.sqrt(2.0 * g)
    zstar = (math.log(y2 / y1) + g) / s
    lower = phi_cdf(zstar) / y1
    dens = lambda z: math.exp(s * z - g - 0.5 * z * z) / math.sqrt(2 * math.pi)
    upper, _ = quad(dens, zstar, math.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    return lower + upper / y2


def dependence_part_2d(y1, y2, g):
    """``V(y1, y2) - 1/y1 - 1/y2``, computed directly by quadrature.

    This equals ``-(pr(Z > z*) / y1 + E[exp(s Z - g); Z < z*] / y2)`` and has
    the same mixed partial as ``V`` without carrying the large independent
    part, so finite differences of it do not cancel when ``g`` is large.
    """
    s = math.sqrt(2.0 * g)
    zstar = (math.log(y2 / y1) + g) / s
    pdf = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    upper, _ = quad(lambda t: pdf(zstar + t), 0.0, math.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    lower, _ = quad(lambda t: pdf(zstar - s - t), 0.0, math.inf, epsabs=0.0, epsrel=1e-13, limit=200)
    return -(upper / y1 + lower / y2)


def intensity_2d_fd(y1, y2, g, rel_step=1e-3):
    """``-d2 V / dy1 dy2`` by central differences of the quadrature."""
    h, k = rel_step * y1, rel_step * y2
    v = dependence_part_2d
    mixed = (v(y1 + h, y2 + k, g) - v(y1 + h, y2 - k, g) - v(y1 - h, y2 + k, g)
             + v(y1 - h, y2 - k, g)) / (4 * h * k)
    return -mixed


def chi_cutoff_gamma(cutoff=0.05):
    """Semivariogram value at which ``2 - 2 Phi(sqrt(g/2))`` equals ``cutoff``."""
    return brentq(lambda g: 2.0 - 2.0 * phi_cdf(math.sqrt(g / 2.0)) - cutoff, 1e-6, 100.0, xtol=1e-14)


def central_gradient(f, x, step):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = step
        out[j] = (f(x + e) - f(x - e)) / (2 * step)
    return out


def angular_tail_moment(w, g, rel_step=1e-4):
    """``E[W 1{W > w}]`` for the sum-normalised angular law of the bivariate pair.

    From ``V(x1, x2) = 2 E[max(W / x1, (1 - W) / x2)]`` one gets
    ``-dV/dx1 (w, 1 - w) = 2 E[W 1{W > w}] / w**2``.
    """
    h = rel_step * w
    dv = (exponent_measure_2d(w + h, 1 - w, g) - exponent_measure_2d(w - h, 1 - w, g)) / (2 * h)
    return -0.5 * w * w * dv
