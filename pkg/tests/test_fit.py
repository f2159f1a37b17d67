import math

import numpy as np
import pytest

from ehsim import FitDivergenceError
from ehsim.fit import (
    FitConfig,
    FitWeights,
    LossComponents,
    ParamCodec,
    SimulatorFitter,
    TargetPair,
    fit_groups,
    fit_loss_components,
    fit_simulator,
    medoid_index,
    normalize_params,
    numeric_gradient,
    total_fit_loss,
    zscore,
)
from ehsim.integrate import Waveform, simulate_window
from ehsim.simcore import GaussianComponent, PpgParams, default_params, random_params

SHORT = dict(warmup_s=0.5)


def target_from(params, duration=3.0, warmup=0.5):
    e, p = simulate_window(params, duration, warmup=warmup)
    return TargetPair(e, p)


def with_r_amplitude(params, a):
    comps = dict(params.ecg.components)
    r = comps["R"]
    comps["R"] = GaussianComponent(r.center, a, r.width)
    return params.replace(ecg=type(params.ecg)(comps, params.ecg.baseline))


def test_components_zero_at_truth():
    p = random_params(1)
    c = fit_loss_components(p, target_from(p), FitConfig(**SHORT))
    assert max(c.as_tuple()) <= 1e-8
    assert not c.peak_fallback


def test_constant_offset_gives_c_squared():
    p = random_params(2)
    e, g = simulate_window(p, 3.0, warmup=0.5)
    c0 = 0.3
    target = TargetPair(Waveform(e.samples + c0, e.fs), g)
    comps = fit_loss_components(p, target, FitConfig(zscore=False, **SHORT))
    assert comps.ecg == pytest.approx(c0 ** 2, rel=1e-12)
    assert comps.deriv_e == pytest.approx(0.0, abs=1e-20)
    assert comps.peak_e == pytest.approx(c0 ** 2, rel=1e-12)


def test_flat_target_falls_back():
    t = TargetPair(Waveform(np.zeros(360), 120), Waveform(np.zeros(120), 40))
    comps = fit_loss_components(default_params(), t, FitConfig(zscore=False, **SHORT))
    assert comps.peak_fallback
    assert comps.peak_e == pytest.approx(comps.ecg)
    assert comps.peak_p == pytest.approx(comps.ppg)


def test_total_fit_loss_examples():
    assert total_fit_loss((1, 1, 1, 1)) == pytest.approx(20.25)
    assert total_fit_loss((0, 0, 0, 0)) == 0.0
    c = LossComponents(ecg=1, ppg=1, deriv_e=0.5, deriv_p=0.5, peak_e=0.5, peak_p=0.5)
    assert total_fit_loss(c) == pytest.approx(20.25)
    assert total_fit_loss(c, stage="warmup") == pytest.approx(12.5)


def test_numeric_gradient_examples():
    assert numeric_gradient(lambda th: float(th[0] ** 2), [3.0])[0] == pytest.approx(6.0, abs=1e-6)
    np.testing.assert_array_equal(numeric_gradient(lambda th: 1.0, [1.0, 2.0]), [0.0, 0.0])
    g = numeric_gradient(lambda th: float(np.sum(th ** 2)), [1.0, 2.0], mask=[False, True])
    assert g[0] == 0.0 and g[1] == pytest.approx(4.0)


def test_numeric_gradient_names_bad_coordinate():
    def f(th):
        return math.nan if th[1] > 1.0 else 0.0

    with pytest.raises(FitDivergenceError, match="beta"):
        numeric_gradient(f, [0.0, 1.0], names=["alpha", "beta"])


def test_gradient_matches_dense_sweep():
    truth = random_params(4)
    target = target_from(truth)
    cfg = FitConfig(**SHORT)
    a0 = 27.0
    start = with_r_amplitude(truth, a0)

    def l_ecg(a):
        return fit_loss_components(with_r_amplitude(start, a), target, cfg).ecg

    g = numeric_gradient(lambda th: l_ecg(th[0]), [a0], fd_eps=1e-4)[0]
    grid = a0 + np.linspace(-0.2, 0.2, 41)
    vals = np.array([l_ecg(a) for a in grid])
    poly = np.polynomial.Polynomial.fit(grid - a0, vals, 4)
    oracle = poly.deriv()(0.0)
    assert g == pytest.approx(oracle, rel=1e-4)


def test_warmup_objective_ignores_ppg():
    p = random_params(6)
    target = target_from(random_params(7))
    cfg = FitConfig(**SHORT)
    q = p.replace(ppg=PpgParams(p.ppg.components, delta_pat=0.3, lambda_p=2.5, baseline=1.0))
    a = fit_loss_components(p, target, cfg)
    b = fit_loss_components(q, target, cfg)
    assert total_fit_loss(a, stage="warmup") == total_fit_loss(b, stage="warmup")
    assert total_fit_loss(a) != total_fit_loss(b)


def test_codec_roundtrip():
    p = random_params(8)
    codec = ParamCodec(p)
    q = codec.decode(codec.encode(p))
    assert q.omega == pytest.approx(p.omega, rel=1e-12)
    for k, c in p.ecg.components.items():
        assert q.ecg.components[k].amplitude == pytest.approx(c.amplitude, rel=1e-12)
        assert q.ecg.components[k].width == pytest.approx(c.width, rel=1e-12)
    assert q.ppg.lambda_p == pytest.approx(p.ppg.lambda_p, rel=1e-12)
    assert codec.ppg_mask.sum() == 4 * 3 + 3


def test_normalize_params_zscores_window():
    p = normalize_params(default_params(), 3.0, warmup=0.5)
    e, g = simulate_window(p, 3.0, warmup=0.5)
    assert abs(e.samples.mean()) < 1e-9 and e.samples.std() == pytest.approx(1.0, rel=1e-9)
    assert abs(g.samples.mean()) < 1e-9 and g.samples.std() == pytest.approx(1.0, rel=1e-9)


def test_fit_at_optimum_stays():
    p = random_params(9)
    res = fit_simulator(target_from(p), p, FitConfig(max_iters=4, **SHORT))
    assert res.best_loss <= 1e-6
    assert res.best_iter == 0
    e0, g0 = simulate_window(p, 3.0, warmup=0.5)
    e1, g1 = simulate_window(res.params, 3.0, warmup=0.5)
    np.testing.assert_allclose(e1.samples, zscore(e0.samples), atol=1e-6)
    np.testing.assert_allclose(g1.samples, zscore(g0.samples), atol=1e-6)


def test_staged_schedule_counts():
    p = random_params(10)
    init = p.replace(omega=p.omega * 1.02)
    res = fit_simulator(target_from(p, 2.0), init, FitConfig(max_iters=200, **SHORT))
    stages = [r["stage"] for r in res.trace]
    assert len(stages) == 200
    assert stages.count("warmup") == 100
    assert stages[:100] == ["warmup"] * 100
    assert res.trace_rows()[0][:2] == (0, "warmup")
    assert res.best_loss <= total_fit_loss(fit_loss_components(init, target_from(p, 2.0), FitConfig(**SHORT)))
    for c in res.params.ecg.components.values():
        assert c.width > 0
    assert res.params.omega > 0 and res.params.ppg.lambda_p > 0


def test_medoid():
    assert medoid_index([np.ones(5)] * 3) == 0
    assert medoid_index([np.zeros(4), np.ones(4), 10 * np.ones(4)]) == 1


def _pair(params, gid):
    e, g = simulate_window(params, 3.0, warmup=0.5)
    return TargetPair(Waveform(zscore(e.samples), e.fs), Waveform(zscore(g.samples), g.fs), gid)


def test_fit_groups_direction_and_warnings():
    slow, fast = default_params(60), default_params(90)
    data = [_pair(slow, "a"), _pair(fast, "b")]
    cfg = FitConfig(max_iters=6, **SHORT)
    out, warns = fit_groups(data, cfg, init=default_params(75), groups=["a", "b", "c"])
    assert out["b"].omega > out["a"].omega
    assert "c" not in out and len(warns) == 1


def test_fit_groups_single_pair_matches_fit_simulator():
    p = random_params(12)
    pair = _pair(p, "g")
    cfg = FitConfig(max_iters=3, **SHORT)
    out, _ = fit_groups([pair], cfg, init=default_params())
    assert out["g"] == fit_simulator(pair, default_params(), cfg).params


def test_estimator_interface():
    p = random_params(13)
    e, g = simulate_window(p, 3.0, warmup=0.5)
    est = SimulatorFitter(max_iters=3)
    assert est.get_params()["w_peak"] == 12.0
    est.fit(e.samples, g.samples)
    ee, gg = est.predict()
    assert len(ee) == 360 and len(gg) == 120


def test_config_roundtrip():
    cfg = FitConfig(weights=FitWeights(1, 2, 3, 4), max_iters=10)
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.n_warmup == 5
