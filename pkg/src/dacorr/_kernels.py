"""Jitted numerical kernels for the Lorenz tendencies and RK4 loops.

All kernels take 2-d arrays (rows are independent batch members) and use
the exact same per-element arithmetic order as a straightforward numpy
implementation, so fast paths and tape paths agree bit-for-bit.  The
*_vjp kernels are hand-derived transposes of the tendency linearisations;
they are verified against central finite differences in the test suite.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def l96_rhs(x, forcing):
    m, n = x.shape
    out = np.empty_like(x)
    for r in range(m):
        for i in range(n):
            out[r, i] = (x[r, (i - 1) % n] * (x[r, (i + 1) % n]
                                              - x[r, (i - 2) % n])
                         - x[r, i] + forcing)
    return out


@njit(cache=True)
def l96_vjp(x, g):
    m, n = x.shape
    out = np.empty_like(x)
    for r in range(m):
        for i in range(n):
            out[r, i] = (g[r, (i + 1) % n] * (x[r, (i + 2) % n]
                                              - x[r, (i - 1) % n])
                         + g[r, (i - 1) % n] * x[r, (i - 2) % n]
                         - g[r, (i + 2) % n] * x[r, (i + 1) % n]
                         - g[r, i])
    return out


@njit(cache=True)
def two_scale_rhs(z, forcing, h, c, b, n_x, n_u):
    m = z.shape[0]
    nu_total = n_x * n_u
    gamma = h * c / b
    cb = c * b
    out = np.empty_like(z)
    for r in range(m):
        for i in range(n_x):
            coupling = 0.0
            for j in range(n_u):
                coupling += z[r, n_x + i * n_u + j]
            out[r, i] = (z[r, (i - 1) % n_x] * (z[r, (i + 1) % n_x]
                                                - z[r, (i - 2) % n_x])
                         - z[r, i] + forcing - gamma * coupling)
        for k in range(nu_total):
            uk = z[r, n_x + k]
            up1 = z[r, n_x + (k + 1) % nu_total]
            um1 = z[r, n_x + (k - 1) % nu_total]
            up2 = z[r, n_x + (k + 2) % nu_total]
            out[r, n_x + k] = (cb * (up1 * (um1 - up2)) - c * uk
                               + gamma * z[r, k // n_u])
    return out


@njit(cache=True)
def two_scale_vjp(z, g, forcing, h, c, b, n_x, n_u):
    m = z.shape[0]
    nu_total = n_x * n_u
    gamma = h * c / b
    cb = c * b
    out = np.empty_like(z)
    for r in range(m):
        for i in range(n_x):
            acc = (g[r, (i + 1) % n_x] * (z[r, (i + 2) % n_x]
                                          - z[r, (i - 1) % n_x])
                   + g[r, (i - 1) % n_x] * z[r, (i - 2) % n_x]
                   - g[r, (i + 2) % n_x] * z[r, (i + 1) % n_x]
                   - g[r, i])
            for j in range(n_u):
                acc += gamma * g[r, n_x + i * n_u + j]
            out[r, i] = acc
        for k in range(nu_total):
            gm1 = g[r, n_x + (k - 1) % nu_total]
            gp1 = g[r, n_x + (k + 1) % nu_total]
            gm2 = g[r, n_x + (k - 2) % nu_total]
            um2 = z[r, n_x + (k - 2) % nu_total]
            um1 = z[r, n_x + (k - 1) % nu_total]
            up1 = z[r, n_x + (k + 1) % nu_total]
            up2 = z[r, n_x + (k + 2) % nu_total]
            out[r, n_x + k] = (cb * (gm1 * (um2 - up1) + gp1 * up2
                                     - gm2 * um1)
                               - c * g[r, n_x + k]
                               - gamma * g[r, k // n_u])
    return out


# ---------------------------------------------------------------------------
# fused RK4 loops (same stage arithmetic as dynamics.rk4_step)

@njit(cache=True)
def l96_integrate(x, forcing, dt, n_steps):
    h2 = 0.5 * dt
    c1 = dt / 6.0
    c2 = dt / 3.0
    for _ in range(n_steps):
        k1 = l96_rhs(x, forcing)
        k2 = l96_rhs(x + h2 * k1, forcing)
        k3 = l96_rhs(x + h2 * k2, forcing)
        k4 = l96_rhs(x + dt * k3, forcing)
        x = x + c1 * k1 + c2 * k2 + c2 * k3 + c1 * k4
    return x


@njit(cache=True)
def two_scale_integrate(z, forcing, h, c, b, n_x, n_u, dt, n_steps):
    h2 = 0.5 * dt
    c1 = dt / 6.0
    c2 = dt / 3.0
    for _ in range(n_steps):
        k1 = two_scale_rhs(z, forcing, h, c, b, n_x, n_u)
        k2 = two_scale_rhs(z + h2 * k1, forcing, h, c, b, n_x, n_u)
        k3 = two_scale_rhs(z + h2 * k2, forcing, h, c, b, n_x, n_u)
        k4 = two_scale_rhs(z + dt * k3, forcing, h, c, b, n_x, n_u)
        z = z + c1 * k1 + c2 * k2 + c2 * k3 + c1 * k4
    return z


# ---------------------------------------------------------------------------
# fused multi-step resolvents with stored stages for the reverse sweep

@njit(cache=True)
def l96_resolvent_fwd(x, forcing, dt, n_steps):
    h2 = 0.5 * dt
    c1 = dt / 6.0
    c2 = dt / 3.0
    m, n = x.shape
    stages = np.empty((n_steps, 4, m, n))
    for s in range(n_steps):
        k1 = l96_rhs(x, forcing)
        k2 = l96_rhs(x + h2 * k1, forcing)
        k3 = l96_rhs(x + h2 * k2, forcing)
        k4 = l96_rhs(x + dt * k3, forcing)
        stages[s, 0] = x
        stages[s, 1] = k1
        stages[s, 2] = k2
        stages[s, 3] = k3
        x = x + c1 * k1 + c2 * k2 + c2 * k3 + c1 * k4
    return x, stages


@njit(cache=True)
def l96_resolvent_bwd(stages, forcing, dt, g):
    h2 = 0.5 * dt
    c1 = dt / 6.0
    c2 = dt / 3.0
    n_steps = stages.shape[0]
    for s in range(n_steps - 1, -1, -1):
        s0 = stages[s, 0]
        k1 = stages[s, 1]
        k2 = stages[s, 2]
        k3 = stages[s, 3]
        gk4 = c1 * g
        gs4 = l96_vjp(s0 + dt * k3, gk4)
        gk3 = c2 * g + dt * gs4
        gs3 = l96_vjp(s0 + h2 * k2, gk3)
        gk2 = c2 * g + h2 * gs3
        gs2 = l96_vjp(s0 + h2 * k1, gk2)
        gk1 = c1 * g + h2 * gs2
        g = g + gs2 + gs3 + gs4 + l96_vjp(s0, gk1)
    return g


@njit(cache=True)
def two_scale_resolvent_fwd(z, forcing, h, c, b, n_x, n_u, dt, n_steps):
    h2 = 0.5 * dt
    c1 = dt / 6.0
    c2 = dt / 3.0
    m, n = z.shape
    stages = np.empty((n_steps, 4, m, n))
    for s in range(n_steps):
        k1 = two_scale_rhs(z, forcing, h, c, b, n_x, n_u)
        k2 = two_scale_rhs(z + h2 * k1, forcing, h, c, b, n_x, n_u)
        k3 = two_scale_rhs(z + h2 * k2, forcing, h, c, b, n_x, n_u)
        k4 = two_scale_rhs(z + dt * k3, forcing, h, c, b, n_x, n_u)
        stages[s, 0] = z
        stages[s, 1] = k1
        stages[s, 2] = k2
        stages[s, 3] = k3
        z = z + c1 * k1 + c2 * k2 + c2 * k3 + c1 * k4
    return z, stages


@njit(cache=True)
def two_scale_resolvent_bwd(stages, forcing, h, c, b, n_x, n_u, dt, g):
    h2 = 0.5 * dt
    c1 = dt / 6.0
    c2 = dt / 3.0
    n_steps = stages.shape[0]
    for s in range(n_steps - 1, -1, -1):
        s0 = stages[s, 0]
        k1 = stages[s, 1]
        k2 = stages[s, 2]
        k3 = stages[s, 3]
        gk4 = c1 * g
        gs4 = two_scale_vjp(s0 + dt * k3, gk4, forcing, h, c, b, n_x, n_u)
        gk3 = c2 * g + dt * gs4
        gs3 = two_scale_vjp(s0 + h2 * k2, gk3, forcing, h, c, b, n_x, n_u)
        gk2 = c2 * g + h2 * gs3
        gs2 = two_scale_vjp(s0 + h2 * k1, gk2, forcing, h, c, b, n_x, n_u)
        gk1 = c1 * g + h2 * gs2
        g = g + gs2 + gs3 + gs4 + two_scale_vjp(s0, gk1, forcing, h, c, b,
                                                n_x, n_u)
    return g
