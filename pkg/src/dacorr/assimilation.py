"""Cycled variational assimilation.

Strong-constraint mode estimates the window-start state of a (possibly
hybrid) model from consecutive windows of noisy observations of the slow
variables; weak-constraint mode additionally carries the correction
network's parameter vector in the control, with persistence forecasting
of parameters between windows.

Observation geometry throughout: identity observation operator on the
slow variables, unit observation error covariance, batches every 0.05
time units.  Background covariances are spherical, so the minimiser
works in spread-scaled deviation variables (each control block divided
by its spread), which keeps the parameter and state blocks comparably
conditioned.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import surrogates as sg
from .lbfgs import LbfgsConfig, lbfgs_minimize


class AssimilationDiverged(RuntimeError):
    """Cycling left the attractor; carries the partial result for diagnosis."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


# ---------------------------------------------------------------------------
# cost functions (generic over arrays and tape nodes)

def sc4dvar_cost(model, x, background, spread, obs_window):
    """Strong-constraint window cost

        1/(2 b^2) |x - xb|^2 + 1/2 sum_l |y_l - M_l(x)|^2

    with the l = 0 model term the identity.  ``x`` may be an array or a
    tape node; everything else is constant.
    """
    states = model.window_states(x, len(obs_window))
    total = ad.sum_sq(x - background) * (1.0 / spread ** 2)
    for y, state in zip(obs_window, states):
        total = total + ad.sum_sq(model.observed(state) - y)
    return total * 0.5


def wc4dvar_cost(surrogate, params, x, param_background, state_background,
                 param_spread, state_spread, obs_window):
    """Joint parameter/state window cost with block-diagonal prior."""
    layers = sg.unflatten(surrogate.spec, params)
    states = surrogate.window_states(layers, x, len(obs_window))
    total = ad.sum_sq(params - param_background) * (1.0 / param_spread ** 2)
    total = total + ad.sum_sq(x - state_background) * (1.0 / state_spread ** 2)
    for y, state in zip(obs_window, states):
        total = total + ad.sum_sq(state - y)
    return total * 0.5


# ---------------------------------------------------------------------------
# spread schedules for the online experiments

def schedule_spread(kind, t):
    """Background-spread schedules; t counts windows after the switch."""
    if t < 0:
        raise ValueError("schedule time must be non-negative")
    if kind == "bx_cnnb":
        return 0.28 + 0.15 * math.exp(-t / 256.0)
    if kind == "bp_cnnb":
        return min(0.05, 0.001 + 0.1 * math.exp(-t / 1024.0))
    if kind == "bx_cnnc":
        return 0.26 + 0.20 * math.exp(-t / 256.0)
    if kind == "bp_cnnc":
        return min(0.05, 0.01 + 0.05 * math.exp(-t / 3072.0))
    raise ValueError(f"unknown schedule {kind!r}")


SCHEDULE_KINDS = ("bx_cnnb", "bp_cnnb", "bx_cnnc", "bp_cnnc")


def _spread_at(spread, t):
    return spread(t) if callable(spread) else spread


# ---------------------------------------------------------------------------
# configurations and records

@dataclass(frozen=True)
class ScConfig:
    window: int = 6
    spread: float = 0.4
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    spin_up_cycles: int = 0  # leading cycles excluded from the sRMSE mean

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must hold at least one batch")
        if self.spread <= 0:
            raise ValueError("background spread must be positive")


@dataclass(frozen=True)
class WcConfig:
    window: int = 6
    state_spread: Callable | float = 0.3
    param_spread: Callable | float = 0.05
    prelim_spread: float = 0.4
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    spin_up_cycles: int = 0
    guard_factor: float = 10.0   # divergence when sRMSE exceeds
    guard_cycles: int = 10       # factor * variability this many cycles running


class CycleRecord(NamedTuple):
    window_start: int
    background: np.ndarray
    analysis: np.ndarray
    iterations: int
    converged: bool
    srmse: float


@dataclass
class ScResult:
    window: int
    spread: float
    spin_up_cycles: int
    backgrounds: np.ndarray   # (n_cycles, control)
    analyses: np.ndarray
    srmse: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def n_cycles(self):
        return len(self.srmse)

    @property
    def analysis_slow(self):
        return self.analyses[:, :36]

    @property
    def srmse_mean(self):
        return float(np.mean(self.srmse[self.spin_up_cycles:]))

    def records(self):
        for c in range(self.n_cycles):
            yield CycleRecord(c * self.window, self.backgrounds[c],
                              self.analyses[c], int(self.iterations[c]),
                              bool(self.converged[c]), float(self.srmse[c]))


@dataclass
class WcResult:
    window: int
    n_preliminary: int
    srmse: np.ndarray            # preliminary + joint cycles
    analyses_slow: np.ndarray
    backgrounds_slow: np.ndarray
    param_analyses: np.ndarray   # (n_cycles, P), joint cycles only
    param_backgrounds: np.ndarray
    state_spreads: np.ndarray    # per joint cycle
    param_spreads: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def n_cycles(self):
        return len(self.srmse) - self.n_preliminary

    @property
    def joint_srmse(self):
        return self.srmse[self.n_preliminary:]

    @property
    def final_params(self):
        return self.param_analyses[-1]


def _rmse(a, b):
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _objective(program):
    def obj(v):
        res = ad.evaluate_with_gradient(program, {"q": v})
        return res.value, res.grads["q"]
    return obj


# ---------------------------------------------------------------------------
# cycled strong-constraint 4D-Var

def run_sc4dvar(model, obs, truth_slow, cfg, n_cycles, initial_background):
    """Assimilate consecutive windows, forecasting each analysis to become
    the next background.  Returns per-cycle records and the sRMSE series
    (analysis-minus-truth RMSE at each window start)."""
    obs = np.asarray(obs, dtype=float)
    truth_slow = np.asarray(truth_slow, dtype=float)
    L = cfg.window
    if len(obs) < n_cycles * L:
        raise ValueError(f"observation stream has {len(obs)} batches; "
                         f"{n_cycles * L} needed")
    if len(truth_slow) < n_cycles * L:
        raise ValueError("truth stream too short for the requested cycles")

    xb = np.asarray(initial_background, dtype=float).copy()
    n_ctl = model.control_size
    backgrounds = np.empty((n_cycles, n_ctl))
    analyses = np.empty((n_cycles, n_ctl))
    srmse = np.empty(n_cycles)
    iters = np.empty(n_cycles, dtype=int)
    conv = np.empty(n_cycles, dtype=bool)

    def partial(c):
        return ScResult(L, cfg.spread, cfg.spin_up_cycles, backgrounds[:c],
                        analyses[:c], srmse[:c], iters[:c], conv[:c])

    for c in range(n_cycles):
        k0 = c * L
        window = obs[k0:k0 + L]
        xb_const = xb

        def program(nodes, xb_const=xb_const, window=window):
            x = ad.axpy(cfg.spread, nodes["q"], xb_const)
            return sc4dvar_cost(model, x, xb_const, cfg.spread, window)

        res = lbfgs_minimize(_objective(program), np.zeros(n_ctl), cfg.lbfgs)
        xa = xb + cfg.spread * res.x
        if not np.all(np.isfinite(xa)):
            raise AssimilationDiverged(
                f"non-finite analysis at cycle {c}", partial(c))
        backgrounds[c] = xb
        analyses[c] = xa
        iters[c] = res.iterations
        conv[c] = res.converged
        srmse[c] = _rmse(model.observed(xa), truth_slow[k0])
        xb = model.forecast(xa, L)

    return partial(n_cycles)


# ---------------------------------------------------------------------------
# weak-constraint 4D-Var with joint parameter estimation

def run_wc4dvar(surrogate, obs, truth_slow, cfg, n_preliminary, n_cycles,
                initial_background, initial_params, physical_model):
    """Preliminary strong-constraint cycles with the uncorrected physical
    model, then joint state/parameter cycling with the hybrid surrogate.

    Parameters are forecast by persistence; the state is forecast by the
    surrogate with the analysed parameters.  A schedule value of exactly
    zero for the parameter spread freezes the parameters for that cycle.
    """
    obs = np.asarray(obs, dtype=float)
    truth_slow = np.asarray(truth_slow, dtype=float)
    L = cfg.window
    total = n_preliminary + n_cycles
    if len(obs) < total * L:
        raise ValueError("observation stream too short for the requested cycles")

    n_params = sg.param_count(surrogate.spec)
    initial_params = np.asarray(initial_params, dtype=float)
    if initial_params.shape != (n_params,):
        raise ValueError("initial parameter vector does not match the network")

    srmse = np.empty(total)
    analyses_slow = np.empty((total, 36))
    backgrounds_slow = np.empty((total, 36))
    param_analyses = np.empty((n_cycles, n_params))
    param_backgrounds = np.empty((n_cycles, n_params))
    state_spreads = np.empty(n_cycles)
    param_spreads = np.empty(n_cycles)
    iters = np.empty(total, dtype=int)
    conv = np.empty(total, dtype=bool)

    def partial(done, joint_done):
        return WcResult(L, min(done, n_preliminary), srmse[:done],
                        analyses_slow[:done], backgrounds_slow[:done],
                        param_analyses[:joint_done],
                        param_backgrounds[:joint_done],
                        state_spreads[:joint_done], param_spreads[:joint_done],
                        iters[:done], conv[:done])

    if n_preliminary:
        sc_cfg = ScConfig(window=L, spread=cfg.prelim_spread, lbfgs=cfg.lbfgs)
        try:
            prelim = run_sc4dvar(physical_model, obs[:n_preliminary * L],
                                 truth_slow, sc_cfg, n_preliminary,
                                 initial_background)
        except AssimilationDiverged as err:
            done = err.partial.n_cycles if err.partial is not None else 0
            if err.partial is not None:
                srmse[:done] = err.partial.srmse
                analyses_slow[:done] = err.partial.analysis_slow
                backgrounds_slow[:done] = err.partial.backgrounds[:, :36]
                iters[:done] = err.partial.iterations
                conv[:done] = err.partial.converged
            raise AssimilationDiverged(str(err), partial(done, 0)) from None
        srmse[:n_preliminary] = prelim.srmse
        analyses_slow[:n_preliminary] = prelim.analysis_slow
        backgrounds_slow[:n_preliminary] = prelim.backgrounds
        iters[:n_preliminary] = prelim.iterations
        conv[:n_preliminary] = prelim.converged
        xb = physical_model.forecast(prelim.analyses[-1], L)
    else:
        xb = np.asarray(initial_background, dtype=float).copy()

    pb = initial_params.copy()
    guard_level = cfg.guard_factor * float(np.std(truth_slow))
    guard_run = 0

    for c in range(n_cycles):
        k0 = (n_preliminary + c) * L
        window = obs[k0:k0 + L]
        bx = _spread_at(cfg.state_spread, c)
        bp = _spread_at(cfg.param_spread, c)
        if bx <= 0:
            raise ValueError("state spread must stay positive")
        if bp < 0:
            raise ValueError("parameter spread must be non-negative")

        if bp == 0.0:
            # parameters frozen: plain strong-constraint step with the
            # current surrogate
            def program(nodes, xb=xb, pb=pb, window=window, bx=bx):
                x = ad.axpy(bx, nodes["q"], xb)
                layers = sg.unflatten(surrogate.spec, pb)
                states = surrogate.window_states(layers, x, L)
                total_ = ad.sum_sq(nodes["q"])
                for y, state in zip(window, states):
                    total_ = total_ + ad.sum_sq(state - y)
                return total_ * 0.5

            res = lbfgs_minimize(_objective(program), np.zeros(36), cfg.lbfgs)
            pa = pb.copy()
            xa = xb + bx * res.x
        else:
            def program(nodes, xb=xb, pb=pb, window=window, bx=bx, bp=bp):
                qp = ad.take_block(nodes["q"], 0, n_params)
                qx = ad.take_block(nodes["q"], n_params, n_params + 36)
                p = ad.axpy(bp, qp, pb)
                x = ad.axpy(bx, qx, xb)
                return wc4dvar_cost(surrogate, p, x, pb, xb, bp, bx, window)

            res = lbfgs_minimize(_objective(program),
                                 np.zeros(n_params + 36), cfg.lbfgs)
            pa = pb + bp * res.x[:n_params]
            xa = xb + bx * res.x[n_params:]

        idx = n_preliminary + c
        if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(pa))):
            raise AssimilationDiverged(
                f"non-finite analysis at joint cycle {c}", partial(idx, c))
        backgrounds_slow[idx] = xb
        analyses_slow[idx] = xa
        param_backgrounds[c] = pb
        param_analyses[c] = pa
        state_spreads[c] = bx
        param_spreads[c] = bp
        iters[idx] = res.iterations
        conv[idx] = res.converged
        srmse[idx] = _rmse(xa, truth_slow[k0])

        guard_run = guard_run + 1 if srmse[idx] > guard_level else 0
        if guard_run >= cfg.guard_cycles:
            raise AssimilationDiverged(
                f"sRMSE above {cfg.guard_factor} x variability for "
                f"{cfg.guard_cycles} consecutive cycles", partial(idx + 1, c + 1))

        pb = pa
        xb = surrogate.resolvent(pa, xa, L)

    return partial(total, n_cycles)
