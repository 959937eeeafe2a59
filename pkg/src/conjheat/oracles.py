"""Independent reference solutions used to cross-check the solver.

The circle heat kernel is built as an image sum (theta series), which
converges like exp(-(mL)^2 / 4t) and is exact to double precision for the
diffusion times used here.  Heat evolution of (mixtures of) periodized
Gaussians stays closed form: diffusing for time s adds 2s to each variance.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import solve_ivp

__all__ = [
    "periodized_gaussian",
    "circle_heat_kernel",
    "evolved_gaussian_mixture",
    "sphere_constant_solution",
    "sphere_constant_solution_ode",
]


def _image_count(variance: float, length: float) -> int:
    # images beyond exp(-745) underflow; keep a 2-image cushion
    reach = math.sqrt(2.0 * 745.0 * variance)
    return int(math.ceil((0.5 * length + reach) / length)) + 2


def periodized_gaussian(
    x, variance: float, length: float, center: float = 0.0
) -> np.ndarray:
    """Unit-mass Gaussian of the given variance wrapped onto a circle."""
    if not variance > 0.0:
        raise ValueError(f"variance must be positive, got {variance}")
    x = np.asarray(x, dtype=float)
    m_max = _image_count(variance, length)
    out = np.zeros_like(x)
    for m in range(-m_max, m_max + 1):
        out += np.exp(-((x - center + m * length) ** 2) / (2.0 * variance))
    return out / math.sqrt(2.0 * math.pi * variance)


def circle_heat_kernel(x, t: float, length: float, x0: float = 0.0) -> np.ndarray:
    """Heat kernel on the circle of the given length (image-sum form)."""
    if not t > 0.0:
        raise ValueError(f"kernel time must be positive, got {t}")
    return periodized_gaussian(x, 2.0 * t, length, center=x0)


def evolved_gaussian_mixture(
    x, components, length: float, added_time: float
) -> np.ndarray:
    """Closed-form heat evolution of a weighted periodized-Gaussian mixture.

    ``components`` is a sequence of (center, variance, weight); diffusing for
    time ``added_time`` turns each variance v into v + 2 * added_time.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for center, variance, weight in components:
        out += weight * periodized_gaussian(
            x, variance + 2.0 * added_time, length, center
        )
    return out


def sphere_constant_solution(n: int, r0: float, T: float, c_terminal: float, t) -> np.ndarray:
    """Spatially constant solution on the shrinking sphere, closed form.

    The reduction of the conjugate equation is c'(t) = R(t) c(t) with
    R(t) = n(n-1) / r(t)^2, integrated backward from c(T); the solution is
    c(t) = c(T) * (r(T) / r(t))^n.
    """
    t = np.asarray(t, dtype=float)
    r_sq = r0 ** 2 - 2.0 * (n - 1) * t
    r_sq_T = r0 ** 2 - 2.0 * (n - 1) * T
    return c_terminal * (r_sq_T / r_sq) ** (n / 2.0)


def sphere_constant_solution_ode(
    n: int, r0: float, T: float, c_terminal: float, t_eval
) -> np.ndarray:
    """Same scalar reduction integrated numerically (independent route)."""
    t_eval = np.sort(np.asarray(t_eval, dtype=float))

    def rhs(t, c):
        return n * (n - 1) / (r0 ** 2 - 2.0 * (n - 1) * t) * c

    sol = solve_ivp(
        rhs,
        (T, float(t_eval[0])),
        [c_terminal],
        t_eval=t_eval[::-1],
        rtol=1e-12,
        atol=1e-14,
        method="DOP853",
    )
    if not sol.success:
        raise RuntimeError(f"scalar reference integration failed: {sol.message}")
    return sol.y[0][::-1]
