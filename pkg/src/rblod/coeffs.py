"""Parameter-affine diffusion coefficients and Brooks-Corey soil laws.

Both built-in model problems share the same four rapidly oscillating
permeability components on the unit square; they differ in the parameter
functions combined with them.  The first uses four smooth functions of a
scalar parameter, the second a Brooks-Corey relative-permeability law per
soil type with the nodal pressure playing the role of the parameter.
Component fields are evaluated pointwise (typically at fine element
barycenters) and treated as element-wise constant afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoercivityError, InvalidArgumentError

__all__ = [
    "Soil",
    "RICHARDS_SOILS",
    "AffineCoefficient",
    "model_problem_1",
    "model_problem_2",
    "brooks_corey_theta",
    "brooks_corey_kr",
    "theta_q_richards",
    "theta_q_richards_derivative",
    "coercivity_lower_bound",
]

EPSILON = 0.1


# ── permeability components (shared by both model problems) ────────────


def _component_a1(x):
    cosx = np.cos(2.0 * np.pi * x[:, 0] / EPSILON)
    d11 = 5.0 / np.pi**2 / (4.0 + 2.0 * cosx)
    d22 = (5.0 + 2.5 * cosx) / (4.0 * np.pi)
    out = np.zeros((x.shape[0], 2, 2))
    out[:, 0, 0] = d11
    out[:, 1, 1] = d22
    return out


def _component_a2(x):
    s = 10.0 + 9.0 * np.sin(2.0 * np.pi * np.sqrt(2.0 * np.abs(x[:, 0])) / EPSILON) * np.sin(
        4.5 * np.pi * x[:, 1] ** 2 / EPSILON
    )
    return s[:, None, None] / 100.0 * np.eye(2)[None]


def _component_a3(x):
    x1, x2 = x[:, 0], x[:, 1]
    g = np.sin(np.floor(x1 + x2) + np.floor(x1 / EPSILON) + np.floor(x2 / EPSILON)) + np.cos(
        np.floor(x2 - x1) + np.floor(x1 / EPSILON) + np.floor(x2 / EPSILON)
    )
    s = 3.0 / 25.0 + g / 20.0
    return s[:, None, None] * np.eye(2)[None]


def _c_eps(x):
    x1, x2 = x[:, 0], x[:, 1]
    acc = np.zeros(x.shape[0])
    for j in range(5):
        for i in range(j + 1):
            acc += (2.0 / (j + 1)) * np.cos(
                np.floor(i * x2 - x1 / (1 + i))
                + np.floor(i * x1 / EPSILON)
                + np.floor(x2 / EPSILON)
            )
    return 1.0 + acc / 10.0


def _component_a4(x):
    t = _c_eps(x)
    s = np.where(
        (0.5 < t) & (t < 1.0),
        t**4,
        np.where((1.0 < t) & (t < 1.5), np.abs(t) ** 1.5, t),
    )
    return s[:, None, None] * np.eye(2)[None]


_COMPONENTS = (_component_a1, _component_a2, _component_a3, _component_a4)


def _component_fields(points):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.stack([comp(points) for comp in _COMPONENTS])


# ── Brooks-Corey soil laws ──────────────────────────────────────────────


@dataclass(frozen=True)
class Soil:
    """Brooks-Corey parameters of one soil type."""

    name: str
    theta_m: float  # residual saturation
    theta_M: float  # maximal saturation
    lam: float      # pore size distribution factor
    p_b: float      # bubbling pressure (negative)


RICHARDS_SOILS = (
    Soil("sandy soil", 0.21, 0.95, 1.0, -0.1),
    Soil("sand", 0.0458, 1.0, 0.694, -0.0726),
    Soil("sandy loam", 0.091, 1.0, 0.378, -0.147),
    Soil("loamy sand", 0.08, 1.0, 0.553, -0.087),
)


def brooks_corey_theta(p, soil):
    """Water content at pressure ``p``: saturation curve of ``soil``.

    Constant at the maximal saturation above the bubbling pressure and
    decaying with rate ``lam`` below it.
    """
    p = np.asarray(p, dtype=np.float64)
    wet = p >= soil.p_b
    ratio = np.where(wet, 1.0, p / soil.p_b)
    theta = soil.theta_m + (soil.theta_M - soil.theta_m) * ratio ** (-soil.lam)
    return np.where(wet, soil.theta_M, theta)[()]


def brooks_corey_kr(theta, soil):
    """Relative permeability as a function of the water content.

    Defined for ``theta`` in [theta_m, theta_M]; anything outside is a
    caller error.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < soil.theta_m - 1e-12) or np.any(theta > soil.theta_M + 1e-12):
        raise InvalidArgumentError(
            f"water content outside [{soil.theta_m}, {soil.theta_M}] for {soil.name}"
        )
    eff = np.clip((theta - soil.theta_m) / (soil.theta_M - soil.theta_m), 0.0, 1.0)
    return (eff ** (3.0 + 2.0 / soil.lam))[()]


def theta_q_richards(p, soil):
    """Composite relative permeability ``kr(theta(p))`` in closed form.

    Equals ``(p/p_b)^-(3*lam+2)`` below the bubbling pressure and 1 above.
    """
    p = np.asarray(p, dtype=np.float64)
    wet = p >= soil.p_b
    ratio = np.where(wet, 1.0, p / soil.p_b)
    c = 3.0 * soil.lam + 2.0
    return np.where(wet, 1.0, ratio ** (-c))[()]


def theta_q_richards_derivative(p, soil):
    """Pressure derivative of :func:`theta_q_richards`.

    Zero above the bubbling pressure; the kink at ``p_b`` takes the
    left-hand value.
    """
    p = np.asarray(p, dtype=np.float64)
    wet = p > soil.p_b
    ratio = np.where(wet, 1.0, p / soil.p_b)
    c = 3.0 * soil.lam + 2.0
    deriv = -c / soil.p_b * ratio ** (-c - 1.0)
    return np.where(wet, 0.0, deriv)[()]


# ── parameter-affine coefficients ───────────────────────────────────────


@dataclass(eq=False)
class AffineCoefficient:
    """A coefficient ``a(x; mu) = sum_q theta_q(mu) a_q(x)``.

    Attributes
    ----------
    name : str
    n_terms : int
        Number of affine terms Q.
    parameter_range : (float, float)
        The compact parameter interval.
    epsilon : float
        Oscillation length scale of the components.
    """

    name: str
    n_terms: int
    parameter_range: tuple
    epsilon: float = EPSILON
    _theta: callable = None
    _theta_prime: callable = None
    _fields: callable = None

    def theta(self, mu):
        """Parameter functions, shape (Q,) for scalar ``mu``, else (Q, S)."""
        return self._theta(np.asarray(mu, dtype=np.float64))

    def theta_prime(self, mu):
        """Derivative of the parameter functions, or None if undefined."""
        if self._theta_prime is None:
            return None
        return self._theta_prime(np.asarray(mu, dtype=np.float64))

    def component_fields(self, points):
        """Component matrices at sample points, shape (Q, len(points), 2, 2)."""
        return self._fields(points)

    def evaluate(self, points, mu):
        """Full coefficient ``sum_q theta_q(mu) a_q(x)`` at scalar ``mu``."""
        thetas = self.theta(mu)
        fields = self.component_fields(points)
        return np.einsum("q,qmab->mab", thetas, fields)

    def source(self, points):
        """Right-hand side load; both model problems drive with f = 1."""
        points = np.atleast_2d(np.asarray(points))
        return np.ones(points.shape[0])


def model_problem_1():
    """Linear parametrized diffusion on the unit square.

    Four smooth parameter functions on D = [0, 5] weight the four
    oscillatory permeability components.
    """

    def theta(mu):
        mu = np.asarray(mu, dtype=np.float64)
        root = np.sqrt(np.abs(mu))
        return np.stack(
            [
                2.0 + np.sin(4.0 * mu),
                2.0 + mu**2 - np.cos(root),
                2.0 + np.cos(root),
                1.0 + root + np.abs(mu) ** 1.5 / 10.0,
            ]
        )

    return AffineCoefficient(
        name="mp1",
        n_terms=4,
        parameter_range=(0.0, 5.0),
        _theta=theta,
        _fields=_component_fields,
    )


def _subdomain_masks(points):
    """Membership of each point in the four overlapping soil subdomains."""
    x1, x2 = points[:, 0], points[:, 1]
    lo, hi = 0.5 - EPSILON, 0.5 + EPSILON
    left = x1 <= hi
    right = x1 >= lo
    bottom = x2 <= hi
    top = x2 >= lo
    return np.stack([left & bottom, right & bottom, left & top, right & top])


def model_problem_2():
    """Stationary infiltration (Richards-type) coefficient.

    The unit square is covered by four overlapping soil subdomains; each
    affine term is the indicator of one subdomain times its oscillatory
    permeability, weighted by the soil's Brooks-Corey relative
    permeability evaluated at the pressure.  Parameter interval bounded
    above by the largest bubbling pressure.
    """

    def theta(p):
        return np.stack([theta_q_richards(p, soil) for soil in RICHARDS_SOILS])

    def theta_prime(p):
        return np.stack(
            [theta_q_richards_derivative(p, soil) for soil in RICHARDS_SOILS]
        )

    def fields(points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        base = _component_fields(points)
        masks = _subdomain_masks(points)
        return base * masks[:, :, None, None]

    return AffineCoefficient(
        name="mp2",
        n_terms=4,
        parameter_range=(-2.0, -0.0726),
        _theta=theta,
        _theta_prime=theta_prime,
        _fields=fields,
    )


def get_problem(name):
    """Look up a built-in model problem by name."""
    if name == "mp1":
        return model_problem_1()
    if name == "mp2":
        return model_problem_2()
    raise InvalidArgumentError(f"unknown problem {name!r}; expected 'mp1' or 'mp2'")


# ── coercivity ──────────────────────────────────────────────────────────


def _eigmin_2x2(mats):
    a = mats[..., 0, 0]
    d = mats[..., 1, 1]
    b = mats[..., 0, 1]
    return 0.5 * ((a + d) - np.sqrt((a - d) ** 2 + 4.0 * b * b))


def coercivity_lower_bound(fields, thetas, points=None, mus=None, per_sample=False):
    """Smallest eigenvalue of ``sum_q thetas[q] * fields[q]`` over all samples.

    Parameters
    ----------
    fields : (Q, M, 2, 2) array
        Component matrices at M sample points.
    thetas : (Q,) or (Q, S) array
        Parameter function values at one or S parameter samples.
    points, mus : optional arrays
        Sample locations/parameters, only used to report the offending
        sample when the result is not positive.
    per_sample : bool
        When true, additionally return the (S,) array of per-parameter
        minima.

    Returns
    -------
    float, or (float, (S,) array) when per_sample
        min over samples; raises if it is not strictly positive.
    """
    fields = np.asarray(fields, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    if thetas.ndim == 1:
        thetas = thetas[:, None]
    if fields.shape[0] != thetas.shape[0]:
        raise InvalidArgumentError(
            f"{fields.shape[0]} component fields vs {thetas.shape[0]} theta rows"
        )
    combined = np.einsum("qs,qmab->smab", thetas, fields)
    lam = _eigmin_2x2(combined)
    s_idx, m_idx = np.unravel_index(np.argmin(lam), lam.shape)
    alpha = float(lam[s_idx, m_idx])
    if alpha <= 0.0:
        x = None if points is None else np.asarray(points)[m_idx]
        mu = None if mus is None else np.asarray(mus).reshape(-1)[s_idx]
        raise CoercivityError(
            f"coefficient not coercive: min eigenvalue {alpha:.3e}"
            + (f" at x={x}" if x is not None else "")
            + (f", mu={mu}" if mu is not None else ""),
            x=x,
            mu=mu,
        )
    if per_sample:
        return alpha, lam.min(axis=1)
    return alpha
