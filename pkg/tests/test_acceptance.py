"""Acceptance criteria, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (shown even
under output capture) and then asserts.  Criterion 3 is expected to fail:
explicit Euler at 480 Hz settles on an invariant circle of radius ~1.041,
not 1; see the companion unit tests in test_integrate.py.
"""
import itertools
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from ehsim.config import default_config
from ehsim.fit import FitConfig, TargetPair, fit_loss_components, fit_simulator, zscore
from ehsim.flow import LinearFlowModel, euler_sample, gaussian_oracle_velocity
from ehsim.integrate import (
    euler_residual,
    field_lipschitz,
    gronwall_bound,
    simulate,
    simulate_window,
)
from ehsim.latentlosses import (
    DiagGaussian,
    PaeWeights,
    gpa_loss,
    infonce_bidirectional,
    kl_to_standard,
    pae_total,
)
from ehsim.metrics import LANDMARKS, MEASUREMENTS, WAVEFORM_METRICS, delineate, oracle_fiducials, qtcf
from ehsim.peaks import r_peaks
from ehsim.simcore import (
    EcgParams,
    GaussianComponent,
    PhaseState,
    PpgParams,
    SimParams,
    circ_sq_dist,
    default_params,
    random_params,
)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, elapsed, limit):
        ok = ok and elapsed < limit
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail} ({elapsed:.2f}s, limit {limit}s)")
        return ok
    return emit


def refs_of(traj):
    return np.column_stack([traj.x, traj.y])


def test_criterion_01_residual_zero_closure(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        p = random_params(seed)
        traj = simulate(p, 10.0, 480)
        for mod, h in (("e", traj.e), ("p", traj.p)):
            worst = max(worst, euler_residual(h, refs_of(traj), mod, p, traj.grid.dt).max_abs)
    ok = report(1, worst <= 1e-9, f"max |r| = {worst:.2e} over 20 draws x 2 modalities",
                time.perf_counter() - t0, 10)
    assert ok


def test_criterion_02_gronwall_dominance(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_ratio, failures = 0.0, 0
    for k in range(100):
        p = random_params(k)
        mod = "e" if k % 2 == 0 else "p"
        traj = simulate(p, 2.0, 480)
        base = traj.e if mod == "e" else traj.p
        kind = k % 3
        scale = 10 ** rng.uniform(-4, -1)
        if kind == 0:
            noise = scale * rng.standard_normal(len(base))
        elif kind == 1:
            noise = np.full(len(base), scale)
        else:
            noise = scale * np.sin(2 * np.pi * rng.uniform(0.5, 5) * traj.times)
        h = base + noise
        h[0] = base[0]
        res = euler_residual(h, refs_of(traj), mod, p, traj.grid.dt)
        rep = gronwall_bound(res, field_lipschitz(p, mod), h, p, refs_of(traj), mod)
        failures += not rep.holds
        worst_ratio = max(worst_ratio, rep.ratio)
    ok = report(2, failures == 0, f"{100 - failures}/100 dominated, max deviation/bound = {worst_ratio:.3f}",
                time.perf_counter() - t0, 30)
    assert ok


def test_criterion_03_limit_cycle_convergence(report):
    t0 = time.perf_counter()
    p = default_params()
    radii = {}
    for r0 in (0.1, 0.5, 1.5, 2.0):
        traj = simulate(p, 10.0, 480, init=(PhaseState(r0, 0.0), 0.0, 0.0))
        radii[r0] = math.hypot(traj.x[-1], traj.y[-1])
    worst = max(abs(r - 1.0) for r in radii.values())
    detail = "final radii " + ", ".join(f"{r0}->{r:.5f}" for r0, r in radii.items()) + f"; max |r-1| = {worst:.2e}"
    ok = report(3, worst <= 1e-3, detail, time.perf_counter() - t0, 5)
    assert ok


def _scale_amplitudes(p: SimParams, f):
    ecg = EcgParams({k: GaussianComponent(c.center, f * c.amplitude, c.width)
                     for k, c in p.ecg.components.items()}, p.ecg.baseline)
    ppg = PpgParams({k: GaussianComponent(c.center, f * c.amplitude, c.width)
                     for k, c in p.ppg.components.items()},
                    p.ppg.delta_pat, p.ppg.lambda_p, p.ppg.baseline)
    return SimParams(p.omega, ecg, ppg)


@pytest.mark.slow
def test_criterion_04_fit_recovery(report):
    t0 = time.perf_counter()
    cfg = FitConfig()
    assert (cfg.rho_ecg, cfg.peak_pre, cfg.peak_post) == (0.5, 0.20, 0.60)
    lines, successes = [], 0
    for seed in range(10):
        truth = random_params(seed)
        e, g = simulate_window(truth)
        target = TargetPair(e, g)
        init = _scale_amplitudes(truth, 1.5).replace(omega=truth.omega * 1.1)
        res = fit_simulator(target, init, cfg)
        l_ecg = fit_loss_components(res.params, target, cfg).ecg
        fe, _ = simulate_window(res.params)
        rt, rf = r_peaks(zscore(e.samples), 120), r_peaks(fe.samples, 120)
        errs = [min(abs(rf - i)) for i in rt] if len(rf) else [math.inf]
        t_err = 1000.0 * max(errs) / 120
        good = l_ecg < 1e-2 and t_err < 10 and len(rf) == len(rt)
        successes += good
        lines.append(f"{seed}:{l_ecg:.1e}/{t_err:.0f}ms")
    ok = report(4, successes >= 8, f"{successes}/10 recovered (L_ecg/R-timing: {' '.join(lines)})",
                time.perf_counter() - t0, 300)
    assert ok


def test_criterion_05_flow_conditional_mean(report):
    t0 = time.perf_counter()
    outcomes = list(itertools.product([-1.0, 1.0], repeat=2))
    z0 = np.array([[a] for a, _ in outcomes])
    ze = np.array([[b] for _, b in outcomes])
    times = [0.1, 0.3, 0.6, 0.85]
    model = LinearFlowModel(degree=3, time_degree=3, use_cond=False, ridge=0.0, times=times).fit(z0, ze)
    worst = 0.0
    for t in times:
        for a, b in outcomes:
            z = (1 - t) * a + t * b
            hits = [bb - aa for aa, bb in outcomes if abs((1 - t) * aa + t * bb - z) < 1e-12]
            worst = max(worst, abs(model.velocity(np.array([z]), t)[0] - np.mean(hits)))
    ok = report(5, worst <= 1e-6, f"max |v - E[ze-z0 | z_t]| = {worst:.2e} at 16 support points",
                time.perf_counter() - t0, 5)
    assert ok


def test_criterion_06_gaussian_transport(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    cases = [(np.array([2.0]), np.array([0.5])), (np.array([1.0, -1.0]), np.array([2.0, 0.5]))]
    errs = []
    good = True
    for mean, var in cases:
        z0 = rng.standard_normal((10_000, len(mean)))
        z = euler_sample(lambda z, t, zc: gaussian_oracle_velocity(z, t, mean, var), z0, n_steps=100)
        me = float(np.max(np.abs(z.mean(axis=0) - mean)))
        ve = float(np.max(np.abs(z.var(axis=0) / var - 1)))
        errs.append(f"{len(mean)}-D mean err {me:.3f}, var err {100 * ve:.2f}%")
        good &= me < 0.05 and ve < 0.05
    ok = report(6, good, "; ".join(errs), time.perf_counter() - t0, 30)
    assert ok


def test_criterion_07_exact_rectified_field(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    z0, ze = rng.standard_normal((2, 256, 16))
    worst = {n: float(np.max(np.abs(euler_sample(lambda z, t, zc: ze - z0, z0, n_steps=n) - ze)))
             for n in (1, 4, 100)}
    ok = report(7, max(worst.values()) <= 1e-12,
                "max |z_N - ze| " + ", ".join(f"N={n}: {e:.1e}" for n, e in worst.items()) + " (roundoff)",
                time.perf_counter() - t0, 1)
    assert ok


def test_criterion_08_loss_identities(report):
    t0 = time.perf_counter()
    q = DiagGaussian(np.array([0.2, -0.4]), np.array([0.1, -0.3]))
    checks = {
        "KL(std||std)": (kl_to_standard(DiagGaussian.standard((3, 4))), 0.0),
        "KL(mu=1,s=1)": (kl_to_standard(DiagGaussian(np.array([1.0]), np.array([0.0]))), 0.5),
        "InfoNCE B=1": (infonce_bidirectional(np.array([[0.6, 0.8]]), np.array([[0.0, 1.0]])), 0.0),
        "GPA(q,q)": (gpa_loss(q, q), 0.0),
        "d_circ": (circ_sq_dist(math.pi - 0.05, -math.pi + 0.05), 0.01),
        "pae_total": (pae_total(dict.fromkeys(("pat", "rec", "kl", "gpa", "lid", "csd"), 1.0),
                                PaeWeights(w_pat=1e-2)), 1.0116),
    }
    bad = [k for k, (v, ref) in checks.items() if abs(v - ref) > 1e-9]
    ok = report(8, not bad, f"{len(checks) - len(bad)}/{len(checks)} identities exact to 1e-9" +
                (f" (failed: {bad})" if bad else ""), time.perf_counter() - t0, 1)
    assert ok


def test_criterion_09_delineation_oracle(report):
    t0 = time.perf_counter()
    passed, worst_all = 0, []
    for seed in range(10):
        ecg, oracle = oracle_fiducials(random_params(seed))
        found = delineate(ecg)
        worst = 0 if oracle else math.inf
        for ob in oracle:
            if not found:
                worst = math.inf
                break
            gb = min(found, key=lambda b: abs(b.R - ob.R))
            for name in LANDMARKS:
                g, o = getattr(gb, name), getattr(ob, name)
                if g is not None and o is not None:
                    worst = max(worst, abs(g - o))
        worst_all.append(worst)
        passed += worst <= 2
    exact = qtcf(400.0, 1.0) == 400.0
    ok = report(9, passed >= 9 and exact,
                f"{passed}/10 draws within 2 samples (worst per draw {worst_all}); QTcF(400, 1) = {qtcf(400.0, 1.0)}",
                time.perf_counter() - t0, 10)
    assert ok


def _pipeline(workdir):
    def run(*args):
        out = subprocess.run([sys.executable, "-m", "ehsim.cli", *map(str, args)], cwd=workdir,
                             capture_output=True, text=True)
        return out.returncode, out.stderr

    steps = [
        ("gen-data", "--out", "data", "--n-groups", 3, "--n-per-group", 50, "--seed", 7),
        ("fit-groups", "--data", "data", "--out", "groups.json"),
        ("flow-train", "--data", "data", "--params", "groups.json", "--out", "model.json"),
        ("flow-sample", "--data", "data", "--model", "model.json", "--out", "gen"),
        ("eval", "--ref", "data", "--gen", "gen", "--out", "report.json"),
    ]
    codes = []
    for step in steps:
        code, err = run(*step)
        codes.append(code)
        if code != 0:
            return codes, err
    return codes, ""


OUTPUTS = ("data/records.jsonl", "data/meta.json", "groups.json", "model.json", "gen/records.jsonl",
           "gen/meta.json", "report.json")


@pytest.mark.slow
def test_criterion_10_end_to_end(report, tmp_path):
    t0 = time.perf_counter()
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    codes_a, err_a = _pipeline(a)
    codes_b, err_b = _pipeline(b)
    all_zero = codes_a == codes_b == [0] * 5
    same = all_zero and all((a / f).read_bytes() == (b / f).read_bytes() for f in OUTPUTS)
    names_ok = False
    if all_zero:
        rep = json.loads((a / "report.json").read_text())
        names_ok = (set(WAVEFORM_METRICS) <= set(rep["table1"]) and set(MEASUREMENTS) <= set(rep["table2"])
                    and "FID" in rep["excluded"])
    ok = report(10, all_zero and same and names_ok,
                f"exit codes {codes_a}/{codes_b}, byte-identical={same}, metric names present={names_ok}"
                + (f" stderr: {err_a or err_b}" if not all_zero else ""),
                time.perf_counter() - t0, 600)
    assert ok


def test_criterion_11_default_config(report):
    t0 = time.perf_counter()
    cfg = default_config().to_dict()
    snapshot = {
        "fit.weights": {"w_ecg": 5.0, "w_ppg": 0.25, "w_deriv": 3.0, "w_peak": 12.0},
        "fit.rho_ecg": 0.5,
        "fit.peak_pre": 0.20,
        "fit.peak_post": 0.60,
        "pae_weights.w_kl": 5e-5,
        "pae_weights.w_gpa": 5e-5,
        "pae_weights.w_lid": 1e-3,
        "pae_weights.w_csd": 5e-4,
        "flow.time_samples": 4,
        "sim.ppg_len": 400,
        "sim.ppg_fs": 40,
        "sim.ecg_len": 1200,
        "sim.ecg_fs": 120,
    }
    sim = default_config().sim
    actual = {
        "fit.weights": cfg["fit"]["weights"],
        "fit.rho_ecg": cfg["fit"]["rho_ecg"],
        "fit.peak_pre": cfg["fit"]["peak_pre"],
        "fit.peak_post": cfg["fit"]["peak_post"],
        "pae_weights.w_kl": cfg["pae_weights"]["w_kl"],
        "pae_weights.w_gpa": cfg["pae_weights"]["w_gpa"],
        "pae_weights.w_lid": cfg["pae_weights"]["w_lid"],
        "pae_weights.w_csd": cfg["pae_weights"]["w_csd"],
        "flow.time_samples": cfg["flow"]["time_samples"],
        "sim.ppg_len": sim.ppg_len,
        "sim.ppg_fs": cfg["sim"]["ppg_fs"],
        "sim.ecg_len": sim.ecg_len,
        "sim.ecg_fs": cfg["sim"]["ecg_fs"],
    }
    diff = {k: (actual[k], v) for k, v in snapshot.items() if actual[k] != v}
    ok = report(11, not diff, f"{len(snapshot) - len(diff)}/{len(snapshot)} defaults match" +
                (f"; mismatches {diff}" if diff else ""), time.perf_counter() - t0, 1)
    assert ok
