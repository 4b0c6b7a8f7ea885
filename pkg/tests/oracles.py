"""Closed-form reference values used as test oracles."""

import math


def heston_closed_form(u, T, lam, theta, zeta, rho, v0):
    """``(phi(T), psi(T))`` of the Heston Riccati ODE for ``0 < u < 1``.

    ``psi' = c0 + c1 psi + c2 psi**2`` with ``psi(0) = 0`` runs from 0 to the
    negative root ``x_m`` of the quadratic; with ``d`` the discriminant root
    and ``g = x_m / x_p`` the solution is
    ``psi = x_m (1 - e^{-dt}) / (1 - g e^{-dt})`` and ``phi = lam theta int psi``.
    """
    c0 = 0.5 * (u * u - u)
    c1 = zeta * rho * u - lam
    c2 = 0.5 * zeta * zeta
    d = math.sqrt(c1 * c1 - 4.0 * c0 * c2)
    x_m = (-c1 - d) / (2.0 * c2)
    x_p = (-c1 + d) / (2.0 * c2)
    g = x_m / x_p
    e = math.exp(-d * T)
    psi = x_m * (1.0 - e) / (1.0 - g * e)
    int_psi = x_m * (T - (1.0 - g) / (g * d) * math.log((1.0 - g * e) / (1.0 - g)))
    return lam * theta * int_psi, psi


def heston_cgf(u, T, lam, theta, zeta, rho, v0):
    phi, psi = heston_closed_form(u, T, lam, theta, zeta, rho, v0)
    return phi + v0 * psi
