"""Lorenz-family dynamics: the two-scale truth model and its one-scale
approximation, classical RK4 integration, resolvent composition and
climatological utilities.

State conventions (all zero-based, periodic):
  * slow state: array of shape (..., 36)
  * full two-scale state: array of shape (..., 396) laid out [slow, fast],
    with slow variable i owning fast variables 10*i .. 10*i+9

Tendencies accept plain arrays (any leading batch shape) or autodiff
nodes; the node path registers one fused primitive per call with an exact
hand-written adjoint (verified against finite differences in the tests).
The numerical work is jitted in :mod:`dacorr._kernels`; the kernel loops
use the same per-element arithmetic order as the generic ``rk4_step``
here, so fast paths and tape paths agree bit-for-bit.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import _kernels as k

N_SLOW = 36
OBS_INTERVAL = 0.05  # time between observation batches


@dataclass(frozen=True)
class ModelConfig:
    """Model parametrisation; two-scale-only fields are None for L96."""

    n_x: int = N_SLOW
    forcing: float = 8.0
    dt: float = 0.05
    n_u: int | None = None
    coupling: float | None = None            # h
    time_scale_ratio: float | None = None    # c
    space_scale_ratio: float | None = None   # b

    @property
    def two_scale(self):
        return self.n_u is not None

    @property
    def state_size(self):
        return self.n_x * (1 + (self.n_u or 0))

    @property
    def steps_per_obs(self):
        return int(round(OBS_INTERVAL / self.dt))


L96 = ModelConfig(n_x=36, forcing=8.0, dt=0.05)
L05III = ModelConfig(n_x=36, forcing=10.0, dt=0.005, n_u=10,
                     coupling=1.0, time_scale_ratio=10.0,
                     space_scale_ratio=10.0)


def validate_slow_state(x, n_x=N_SLOW):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n_x:
        raise ValueError(f"slow state must have {n_x} components, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("slow state contains non-finite entries")
    return x


def validate_full_state(z, cfg=L05III):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != cfg.state_size:
        raise ValueError(f"full state must have {cfg.state_size} components, "
                         f"got {z.shape[-1]}")
    if not np.all(np.isfinite(z)):
        raise ValueError("full state contains non-finite entries")
    return z


def join_full(x, u):
    return np.concatenate([x, u], axis=-1)


def split_full(z, cfg=L05III):
    return z[..., :cfg.n_x], z[..., cfg.n_x:]


def project_slow(z, n_x=N_SLOW):
    """Projection onto the slow variables (works on arrays and nodes)."""
    if isinstance(z, ad.Node):
        return ad.take_block(z, 0, n_x)
    return z[..., :n_x]


def _rows(x):
    """View (..., n) as a contiguous 2-d batch for the kernels."""
    x = np.ascontiguousarray(x, dtype=float)
    return x.reshape(-1, x.shape[-1]), x.shape


# ---------------------------------------------------------------------------
# tendencies

def l96_tendency(x, forcing=8.0):
    """One-scale tendency x_{n-1}(x_{n+1} - x_{n-2}) - x_n + F."""
    if not isinstance(x, ad.Node):
        rows, shape = _rows(x)
        return k.l96_rhs(rows, forcing).reshape(shape)
    rows, shape = _rows(x.value)

    def vjp_fn(g):
        grows = np.ascontiguousarray(g, dtype=float).reshape(rows.shape)
        return (k.l96_vjp(rows, grows).reshape(shape),)

    return ad.lift(k.l96_rhs(rows, forcing).reshape(shape), [x], vjp_fn)


def two_scale_tendency(z, cfg=L05III):
    """Two-scale tendency of the coupled slow/fast system, flat layout."""
    args = (cfg.forcing, cfg.coupling, cfg.time_scale_ratio,
            cfg.space_scale_ratio, cfg.n_x, cfg.n_u)
    if not isinstance(z, ad.Node):
        rows, shape = _rows(z)
        return k.two_scale_rhs(rows, *args).reshape(shape)
    rows, shape = _rows(z.value)

    def vjp_fn(g):
        grows = np.ascontiguousarray(g, dtype=float).reshape(rows.shape)
        return (k.two_scale_vjp(rows, grows, *args).reshape(shape),)

    return ad.lift(k.two_scale_rhs(rows, *args).reshape(shape), [z], vjp_fn)


# ---------------------------------------------------------------------------
# integration

def rk4_step(f, s, dt):
    """One classical fourth-order Runge-Kutta step of ds/dt = f(s)."""
    if isinstance(s, ad.Node):
        k1 = f(s)
        k2 = f(ad.axpy(0.5 * dt, k1, s))
        k3 = f(ad.axpy(0.5 * dt, k2, s))
        k4 = f(ad.axpy(dt, k3, s))
        return _rk4_combine(s, k1, k2, k3, k4, dt)
    k1 = f(s)
    k2 = f(s + (0.5 * dt) * k1)
    k3 = f(s + (0.5 * dt) * k2)
    k4 = f(s + dt * k3)
    return s + (dt / 6.0) * k1 + (dt / 3.0) * k2 + (dt / 3.0) * k3 \
        + (dt / 6.0) * k4


def _rk4_combine(s, k1, k2, k3, k4, dt):
    # same association order as the array path so both agree bit-for-bit
    value = (s.value + (dt / 6.0) * k1.value + (dt / 3.0) * k2.value
             + (dt / 3.0) * k3.value + (dt / 6.0) * k4.value)

    def vjp_fn(g):
        return (g, (dt / 6.0) * g, (dt / 3.0) * g, (dt / 3.0) * g,
                (dt / 6.0) * g)

    return ad.lift(value, [s, k1, k2, k3, k4], vjp_fn)


def resolvent(f, s, dt, n_steps):
    """n_steps-fold composition of rk4_step; n_steps = 0 is the identity."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    for _ in range(n_steps):
        s = rk4_step(f, s, dt)
    return s


def l96_resolvent(x, n_steps, forcing=8.0, dt=0.05):
    """Fused multi-step L96 resolvent (one tape record on the node path)."""
    if n_steps == 0:
        return x
    if not isinstance(x, ad.Node):
        rows, shape = _rows(x)
        return k.l96_integrate(rows, forcing, dt, n_steps).reshape(shape)
    rows, shape = _rows(x.value)
    out, stages = k.l96_resolvent_fwd(rows, forcing, dt, n_steps)

    def vjp_fn(g):
        grows = np.ascontiguousarray(g, dtype=float).reshape(rows.shape)
        return (k.l96_resolvent_bwd(stages, forcing, dt, grows).reshape(shape),)

    return ad.lift(out.reshape(shape), [x], vjp_fn)


def two_scale_resolvent(z, n_steps, cfg=L05III):
    """Fused multi-step two-scale resolvent (one tape record on the node path)."""
    if n_steps == 0:
        return z
    args = (cfg.forcing, cfg.coupling, cfg.time_scale_ratio,
            cfg.space_scale_ratio, cfg.n_x, cfg.n_u)
    if not isinstance(z, ad.Node):
        rows, shape = _rows(z)
        return k.two_scale_integrate(rows, *args, cfg.dt, n_steps).reshape(shape)
    rows, shape = _rows(z.value)
    out, stages = k.two_scale_resolvent_fwd(rows, *args, cfg.dt, n_steps)

    def vjp_fn(g):
        grows = np.ascontiguousarray(g, dtype=float).reshape(rows.shape)
        return (k.two_scale_resolvent_bwd(stages, *args, cfg.dt,
                                          grows).reshape(shape),)

    return ad.lift(out.reshape(shape), [z], vjp_fn)


def sample_trajectory(f, s0, dt, n_samples, steps_per_sample,
                      include_initial=True):
    """Integrate and keep every steps_per_sample-th state.

    Returns an array of shape (n_samples + include_initial,) + s0.shape.
    """
    s = np.asarray(s0, dtype=float)
    out = np.empty((n_samples + bool(include_initial),) + s.shape)
    i = 0
    if include_initial:
        out[0] = s
        i = 1
    for _ in range(n_samples):
        s = resolvent(f, s, dt, steps_per_sample)
        out[i] = s
        i += 1
    return out


class IntegrationBlowup(RuntimeError):
    """Raised when a trajectory leaves the attractor and turns non-finite."""


# ---------------------------------------------------------------------------
# model wrappers with the assimilation step protocol:
#   control_size, observed(state), step(state), window_states(x0, n_obs),
#   forecast(state, n_obs)

class PhysicalModel:
    """Imperfect one-scale model advanced by one observation interval per step."""

    name = "l96"

    def __init__(self, cfg=L96):
        self.cfg = cfg
        self.control_size = cfg.n_x

    def observed(self, x):
        return x

    def step(self, x):
        return l96_resolvent(x, self.cfg.steps_per_obs, self.cfg.forcing,
                             self.cfg.dt)

    def window_states(self, x0, n_obs):
        states = [x0]
        for _ in range(n_obs - 1):
            states.append(self.step(states[-1]))
        return states

    def forecast(self, x, n_obs):
        return l96_resolvent(np.asarray(x, dtype=float),
                             n_obs * self.cfg.steps_per_obs,
                             self.cfg.forcing, self.cfg.dt)


class TruthModel:
    """Two-scale truth model; the control carries slow and fast variables."""

    name = "l05iii"

    def __init__(self, cfg=L05III):
        self.cfg = cfg
        self.control_size = cfg.state_size

    def observed(self, z):
        return project_slow(z, self.cfg.n_x)

    def step(self, z):
        return two_scale_resolvent(z, self.cfg.steps_per_obs, self.cfg)

    def window_states(self, z0, n_obs):
        states = [z0]
        for _ in range(n_obs - 1):
            states.append(self.step(states[-1]))
        return states

    def forecast(self, z, n_obs):
        return two_scale_resolvent(np.asarray(z, dtype=float),
                                   n_obs * self.cfg.steps_per_obs, self.cfg)


# ---------------------------------------------------------------------------
# climatology

SPIN_UP_DURATION = 30.0
SPIN_UP_NOISE = 0.01


def _tendency_of(cfg):
    if cfg.two_scale:
        return lambda z: two_scale_tendency(z, cfg)
    return lambda x: l96_tendency(x, cfg.forcing)


def _integrate(cfg, s, n_steps):
    rows, shape = _rows(s)
    if cfg.two_scale:
        out = k.two_scale_integrate(rows, cfg.forcing, cfg.coupling,
                                    cfg.time_scale_ratio,
                                    cfg.space_scale_ratio, cfg.n_x, cfg.n_u,
                                    cfg.dt, n_steps)
    else:
        out = k.l96_integrate(rows, cfg.forcing, cfg.dt, n_steps)
    return out.reshape(shape)


def spin_up(cfg=L05III, seed=0, duration=SPIN_UP_DURATION):
    """On-attractor state: zero start, tiny slow-variable noise, integrate
    for ``duration`` time units and discard the transient."""
    rng = np.random.default_rng(seed)
    z = np.zeros(cfg.state_size)
    z[:cfg.n_x] = SPIN_UP_NOISE * rng.standard_normal(cfg.n_x)
    n_steps = int(round(duration / cfg.dt))
    chunk = max(1, n_steps // 20)
    done = 0
    while done < n_steps:
        take = min(chunk, n_steps - done)
        z = _integrate(cfg, z, take)
        done += take
        if not np.all(np.isfinite(z)):
            raise IntegrationBlowup(
                f"non-finite state after {done} steps of spin-up")
    return z


def sample_states(cfg, z0, n_samples, interval, include_initial=False):
    """States every ``interval`` time units along one trajectory of cfg."""
    per = int(round(interval / cfg.dt))
    out = np.empty((n_samples + bool(include_initial),) + z0.shape)
    i = 0
    z = z0
    if include_initial:
        out[0] = z
        i = 1
    for _ in range(n_samples):
        z = _integrate(cfg, z, per)
        out[i] = z
        i += 1
    return out


def climatology_states(cfg=L05III, seed=0, n_states=64, interval=1.0):
    """Decorrelated draws from the model climatology (one long run,
    sampled every ``interval`` time units after spin-up)."""
    z0 = spin_up(cfg, seed)
    return sample_states(cfg, z0, n_states, interval)


def model_variability(cfg=L05III, seed=0, duration=2000.0, interval=0.2):
    """Climatological std of the state, averaged over the slow variables."""
    z0 = spin_up(cfg, seed)
    n = int(round(duration / interval))
    states = sample_states(cfg, z0, n, interval)
    slow = states[..., :cfg.n_x]
    return float(np.mean(np.std(slow, axis=0)))


# ---------------------------------------------------------------------------
# leading Lyapunov exponent (finite-difference Benettin)

class LyapunovEstimate(NamedTuple):
    exponent: float
    duration: float
    short_duration: bool  # set when duration < 500 time units


LYAPUNOV_DELTA = 1e-7
LYAPUNOV_RENORM = 0.1


def lyapunov_exponent(step_fn, s0, leg_time, n_legs, seed=0,
                      delta=LYAPUNOV_DELTA):
    """Average exponential growth rate of a small perturbation, renormalised
    after every leg (finite differences, no tangent model).

    ``step_fn(pair)`` advances a (2, n) array by one leg of ``leg_time``.
    """
    rng = np.random.default_rng(seed)
    s0 = np.asarray(s0, dtype=float)
    direction = rng.standard_normal(s0.shape)
    direction /= np.linalg.norm(direction)
    pair = np.stack([s0, s0 + delta * direction])
    log_sum = 0.0
    for _ in range(n_legs):
        pair = step_fn(pair)
        diff = pair[1] - pair[0]
        dist = np.linalg.norm(diff)
        if not np.isfinite(dist) or dist == 0.0:
            raise IntegrationBlowup("perturbation growth became degenerate")
        log_sum += np.log(dist / delta)
        pair[1] = pair[0] + (delta / dist) * diff
    return log_sum / (n_legs * leg_time)


def leading_lyapunov(cfg=L05III, seed=0, duration=5000.0,
                     renorm_interval=LYAPUNOV_RENORM):
    """Leading exponent of the configured model from an on-attractor start."""
    s0 = spin_up(cfg, seed)
    steps_per_leg = max(1, int(round(renorm_interval / cfg.dt)))
    n_legs = int(round(duration / (steps_per_leg * cfg.dt)))
    value = lyapunov_exponent(lambda pair: _integrate(cfg, pair, steps_per_leg),
                              s0, steps_per_leg * cfg.dt, n_legs,
                              seed=seed + 1)
    return LyapunovEstimate(value, duration, duration < 500.0)
