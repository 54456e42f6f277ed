import numpy as np
import pytest

from dacorr import assimilation as asm
from dacorr import autodiff as ad
from dacorr import dynamics as dyn
from dacorr import surrogates as sg
from dacorr.lbfgs import LbfgsConfig


def make_stream(n_batches, seed, noise=True):
    """Truth from the one-scale model plus unit observation noise (the
    perfect-model playground for the cycling tests)."""
    rng = np.random.default_rng(seed)
    x0 = dyn.climatology_states(dyn.L96, seed=seed, n_states=1)[0]
    truth = dyn.sample_states(dyn.L96, x0, n_batches, dyn.OBS_INTERVAL,
                              include_initial=True)[:-1]
    obs = truth + (rng.standard_normal(truth.shape) if noise else 0.0)
    return truth, obs, rng


# ---------------------------------------------------------------------------
# window costs

def test_sc_cost_zero_at_consistent_point():
    model = dyn.PhysicalModel()
    x = dyn.climatology_states(dyn.L96, seed=0, n_states=1)[0]
    obs = np.stack([np.asarray(s) for s in model.window_states(x, 6)])
    assert asm.sc4dvar_cost(model, x, x, 0.5, obs) == 0.0


def test_sc_cost_nonnegative_and_matches_resummation():
    rng = np.random.default_rng(1)
    model = dyn.PhysicalModel()
    x = dyn.climatology_states(dyn.L96, seed=1, n_states=1)[0]
    xb = x + rng.standard_normal(36)
    obs = rng.standard_normal((4, 36)) + x
    b = 0.7
    got = asm.sc4dvar_cost(model, x, xb, b, obs)
    # independent summation: explicit resolvent calls, plain python loop
    expected = float(np.sum((x - xb) ** 2)) / (2 * b ** 2)
    for l in range(4):
        pred = dyn.l96_resolvent(x, l)
        expected += 0.5 * float(np.sum((obs[l] - pred) ** 2))
    assert got >= 0.0
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_sc_cost_l1_quadratic_minimizer():
    # L = 1, b = 1: cost is a decoupled quadratic with minimiser (xb + y)/2
    truth, obs, rng = make_stream(1, seed=2)
    model = dyn.PhysicalModel()
    xb = truth[0] + rng.standard_normal(36)
    cfg = asm.ScConfig(window=1, spread=1.0)
    out = asm.run_sc4dvar(model, obs[:1], truth, cfg, 1, xb)
    np.testing.assert_allclose(out.analyses[0], 0.5 * (xb + obs[0]),
                               atol=1e-8)


def test_wc_cost_zero_at_consistent_point():
    tc = sg.TcSurrogate(sg.CNN_B)
    p = sg.init_params(sg.CNN_B, seed=3)
    x = dyn.climatology_states(dyn.L96, seed=3, n_states=1)[0]
    obs = np.stack([np.asarray(s) for s in tc.window_states(p, x, 6)])
    assert asm.wc4dvar_cost(tc, p, x, p, x, 0.05, 0.3, obs) == 0.0


def test_wc_cost_gradient_matches_fd():
    rng = np.random.default_rng(4)
    tc = sg.TcSurrogate(sg.CNN_B)
    x = dyn.climatology_states(dyn.L96, seed=4, n_states=1)[0]
    p = 0.2 * rng.standard_normal(113)
    pb = p + 0.1 * rng.standard_normal(113)
    xb = x + 0.3 * rng.standard_normal(36)
    obs = x + rng.standard_normal((6, 36))

    def cost_program(n):
        return asm.wc4dvar_cost(tc, n["p"], n["x"], pb, xb, 0.05, 0.3, obs)

    res = ad.evaluate_with_gradient(cost_program, {"p": p, "x": x})

    def scalar(pv, xv):
        return asm.wc4dvar_cost(tc, pv, xv, pb, xb, 0.05, 0.3, obs)

    h = 1e-5
    for name, base in (("p", p), ("x", x)):
        fd = np.zeros_like(base)
        for i in range(base.size):
            up = base.copy()
            dn = base.copy()
            up[i] += h
            dn[i] -= h
            if name == "p":
                fd[i] = (scalar(up, x) - scalar(dn, x)) / (2 * h)
            else:
                fd[i] = (scalar(p, up) - scalar(p, dn)) / (2 * h)
        rel = np.max(np.abs(res.grads[name] - fd) / (np.abs(fd) + 1e-8))
        assert rel < 1e-6, f"{name} gradient off by {rel}"


# ---------------------------------------------------------------------------
# schedules

def test_schedule_values_from_the_formulas():
    assert asm.schedule_spread("bx_cnnb", 0) == pytest.approx(0.43)
    assert asm.schedule_spread("bp_cnnb", 0) == pytest.approx(0.05)
    assert asm.schedule_spread("bx_cnnc", 0) == pytest.approx(0.46)
    assert asm.schedule_spread("bp_cnnc", 0) == pytest.approx(0.05)
    # the cap releases once the exponential decays below it
    assert asm.schedule_spread("bp_cnnb", 1e9) == pytest.approx(0.001)
    assert asm.schedule_spread("bp_cnnc", 1e9) == pytest.approx(0.01)
    assert asm.schedule_spread("bx_cnnb", 256) == pytest.approx(
        0.28 + 0.15 / np.e)


def test_schedule_validation():
    with pytest.raises(ValueError, match="non-negative"):
        asm.schedule_spread("bx_cnnb", -1)
    with pytest.raises(ValueError, match="unknown schedule"):
        asm.schedule_spread("bx_cnnd", 0)


# ---------------------------------------------------------------------------
# cycled strong-constraint runs

def test_self_consistent_cycling_stays_on_truth():
    # perfect model, noiseless observations, background already the truth:
    # cycling must reproduce the truth indefinitely
    truth, obs, _ = make_stream(30, seed=5, noise=False)
    model = dyn.PhysicalModel()
    cfg = asm.ScConfig(window=6, spread=0.05)
    out = asm.run_sc4dvar(model, obs, truth, cfg, 5, truth[0])
    assert out.srmse_mean < 1e-8


def test_perfect_model_converges_to_truth():
    truth, obs, rng = make_stream(120, seed=6, noise=False)
    model = dyn.PhysicalModel()
    cfg = asm.ScConfig(window=6, spread=1.0, spin_up_cycles=10)
    xb0 = truth[0] + rng.standard_normal(36)
    out = asm.run_sc4dvar(model, obs, truth, cfg, 20, xb0)
    assert out.srmse_mean < 1e-3
    assert np.all(out.srmse >= 0.0)


def test_srmse_accounting_recomputable_from_records():
    truth, obs, rng = make_stream(60, seed=7)
    model = dyn.PhysicalModel()
    cfg = asm.ScConfig(window=6, spread=0.4, spin_up_cycles=3)
    out = asm.run_sc4dvar(model, obs, truth, cfg, 10, truth[0])
    recomputed = [np.sqrt(np.mean((r.analysis[:36] - truth[r.window_start]) ** 2))
                  for r in out.records()]
    np.testing.assert_allclose(out.srmse, recomputed, rtol=1e-15)
    assert out.srmse_mean == pytest.approx(np.mean(recomputed[3:]))


def test_cycled_background_identity():
    truth, obs, _ = make_stream(48, seed=8)
    model = dyn.PhysicalModel()
    cfg = asm.ScConfig(window=6, spread=0.4)
    out = asm.run_sc4dvar(model, obs, truth, cfg, 8, truth[0])
    for c in range(7):
        np.testing.assert_array_equal(out.backgrounds[c + 1],
                                      model.forecast(out.analyses[c], 6))


def test_analysis_optimality_flag():
    truth, obs, _ = make_stream(12, seed=9)
    model = dyn.PhysicalModel()
    relaxed = asm.run_sc4dvar(model, obs, truth,
                              asm.ScConfig(window=6, spread=0.4), 2, truth[0])
    assert np.all(relaxed.converged)
    capped = asm.run_sc4dvar(
        model, obs, truth,
        asm.ScConfig(window=6, spread=0.4,
                     lbfgs=LbfgsConfig(max_iterations=1)), 2, truth[0])
    assert not np.any(capped.converged)
    assert np.all(capped.iterations == 1)


def test_run_determinism():
    truth, obs, _ = make_stream(36, seed=10)
    model = dyn.PhysicalModel()
    cfg = asm.ScConfig(window=6, spread=0.4)
    a = asm.run_sc4dvar(model, obs, truth, cfg, 6, truth[0])
    b = asm.run_sc4dvar(model, obs, truth, cfg, 6, truth[0])
    np.testing.assert_array_equal(a.analyses, b.analyses)
    np.testing.assert_array_equal(a.srmse, b.srmse)


def test_stream_length_validated():
    truth, obs, _ = make_stream(10, seed=11)
    model = dyn.PhysicalModel()
    with pytest.raises(ValueError, match="observation stream"):
        asm.run_sc4dvar(model, obs, truth, asm.ScConfig(window=6, spread=0.4),
                        5, truth[0])


# ---------------------------------------------------------------------------
# weak-constraint runs

def test_wc_frozen_parameters_reduce_to_sc():
    truth, obs, rng = make_stream(72, seed=12)
    xb0 = truth[0] + rng.standard_normal(36)
    tc = sg.TcSurrogate(sg.CNN_B)
    cfg = asm.WcConfig(window=6, state_spread=0.4, param_spread=0.0,
                       prelim_spread=0.4)
    wc = asm.run_wc4dvar(tc, obs, truth, cfg, 0, 12, xb0,
                         sg.zero_params(sg.CNN_B), dyn.PhysicalModel())
    sc = asm.run_sc4dvar(dyn.PhysicalModel(), obs, truth,
                         asm.ScConfig(window=6, spread=0.4), 12, xb0)
    np.testing.assert_allclose(wc.analyses_slow, sc.analysis_slow,
                               rtol=1e-5, atol=1e-7)
    np.testing.assert_array_equal(wc.param_analyses,
                                  np.zeros_like(wc.param_analyses))


def test_wc_tiny_param_spread_tapers_update():
    truth, obs, rng = make_stream(36, seed=13)
    tc = sg.TcSurrogate(sg.CNN_B)
    p0 = sg.init_params(sg.CNN_B, seed=13)
    cfg = asm.WcConfig(window=6, state_spread=0.4, param_spread=1e-7,
                       prelim_spread=0.4)
    out = asm.run_wc4dvar(tc, obs, truth, cfg, 0, 6, truth[0], p0,
                          dyn.PhysicalModel())
    assert np.max(np.abs(out.param_analyses - p0)) < 1e-4


def test_wc_parameter_persistence():
    truth, obs, rng = make_stream(48, seed=14)
    tc = sg.TcSurrogate(sg.CNN_B)
    p0 = sg.init_params(sg.CNN_B, seed=14)
    cfg = asm.WcConfig(window=6, state_spread=0.35, param_spread=0.05,
                       prelim_spread=0.4)
    out = asm.run_wc4dvar(tc, obs, truth, cfg, 0, 8, truth[0], p0,
                          dyn.PhysicalModel())
    np.testing.assert_array_equal(out.param_backgrounds[0], p0)
    np.testing.assert_array_equal(out.param_backgrounds[1:],
                                  out.param_analyses[:-1])
    # joint estimation actually moves the parameters
    assert np.max(np.abs(out.param_analyses[-1] - p0)) > 1e-4


def test_wc_preliminary_phase_matches_sc():
    truth, obs, rng = make_stream(72, seed=15)
    xb0 = truth[0] + rng.standard_normal(36)
    tc = sg.TcSurrogate(sg.CNN_B)
    cfg = asm.WcConfig(window=6, state_spread=0.35, param_spread=0.05,
                       prelim_spread=0.4)
    wc = asm.run_wc4dvar(tc, obs, truth, cfg, 8, 4, xb0,
                         sg.init_params(sg.CNN_B, seed=15),
                         dyn.PhysicalModel())
    sc = asm.run_sc4dvar(dyn.PhysicalModel(), obs, truth,
                         asm.ScConfig(window=6, spread=0.4), 8, xb0)
    np.testing.assert_array_equal(wc.srmse[:8], sc.srmse)
    assert wc.n_preliminary == 8
    assert wc.n_cycles == 4
    assert len(wc.joint_srmse) == 4


def test_wc_schedules_recorded():
    truth, obs, _ = make_stream(24, seed=16)
    tc = sg.TcSurrogate(sg.CNN_B)
    cfg = asm.WcConfig(window=6,
                       state_spread=lambda t: asm.schedule_spread("bx_cnnb", t),
                       param_spread=lambda t: asm.schedule_spread("bp_cnnb", t),
                       prelim_spread=0.4)
    out = asm.run_wc4dvar(tc, obs, truth, cfg, 0, 4, truth[0],
                          sg.zero_params(sg.CNN_B), dyn.PhysicalModel())
    np.testing.assert_allclose(out.state_spreads[0], 0.43)
    np.testing.assert_allclose(out.param_spreads[0], 0.05)
    assert out.state_spreads[3] < out.state_spreads[0]


def test_wc_divergence_guard_aborts_with_partial_result():
    truth, obs, _ = make_stream(36, seed=17)
    tc = sg.TcSurrogate(sg.CNN_B)
    cfg = asm.WcConfig(window=6, state_spread=0.4, param_spread=0.05,
                       prelim_spread=0.4, guard_factor=1e-6, guard_cycles=3)
    with pytest.raises(asm.AssimilationDiverged) as err:
        asm.run_wc4dvar(tc, obs, truth, cfg, 0, 6, truth[0],
                        sg.zero_params(sg.CNN_B), dyn.PhysicalModel())
    partial = err.value.partial
    assert partial is not None
    assert len(partial.srmse) == 3  # aborted after guard_cycles cycles
