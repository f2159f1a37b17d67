"""Command-line interface.

Exit codes: 0 success, 1 domain/data error, 2 usage error.  Set
``EHSIM_LOG_LEVEL`` (e.g. ``INFO``) for progress logging.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config
from .dataio import (
    Dataset,
    gen_dataset,
    load_dataset,
    read_waveform_csv,
    save_dataset,
    write_waveform_csv,
)
from .exceptions import EhsimError
from .fit import TargetPair, fit_groups, fit_simulator, zscore
from .flow import (
    ForwardMapper,
    LinearFlowModel,
    ToyLatentCodec,
    crop_beat,
    flow_total,
    ppg_crop_for,
    rf_loss,
    sim_guided_losses,
    terminal_estimate,
)
from .integrate import (
    Waveform,
    euler_residual,
    field_lipschitz,
    gronwall_bound,
    phase_track,
    sample_modalities,
    simulate,
)
from .latentlosses import (
    DiagGaussian,
    csd_loss,
    gpa_loss,
    infonce_bidirectional,
    kl_to_standard,
    pae_total,
    pat_loss,
    pool_normalize,
    rec_loss,
)
from .metrics import (
    LANDMARKS,
    MEASUREMENTS,
    delineate,
    fiducial_mae,
    frechet_curve_distance,
    frechet_gaussian_distance,
    hr_from_peaks,
    hr_mae,
    mae,
    measure,
    pair_beats,
    rmse,
)
from .peaks import r_peaks
from .simcore import SimParams, default_params, random_params

log = logging.getLogger("ehsim")


class UsageError(Exception):
    """Bad command-line usage detected after parsing."""


# -- helpers -------------------------------------------------------------------

def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, doc):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _params(path) -> SimParams:
    return default_params() if path is None else SimParams.from_dict(_read_json(path))


def _group_params(path):
    return {g: SimParams.from_dict(d) for g, d in _read_json(path).items()}


def _clean(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


# -- subcommands ------------------------------------------------------------------

def cmd_simulate(args, cfg: Config):
    p = _params(args.params)
    fine_fs = args.fine_fs or cfg.sim.fine_fs
    traj = simulate(p, args.warmup + args.duration, fine_fs)
    start = int(round(args.warmup * fine_fs))
    e, g = sample_modalities(traj[start:], cfg.sim.ecg_fs, cfg.sim.ppg_fs)
    write_waveform_csv(args.out_ecg, e.samples)
    write_waveform_csv(args.out_ppg, g.samples)
    log.info("wrote %d ECG and %d PPG samples", len(e), len(g))


def _fit_cfg(cfg: Config, args):
    fc = cfg.fit
    if getattr(args, "max_iters", None):
        fc = type(fc).from_dict(dict(fc.to_dict(), max_iters=args.max_iters))
    return fc


def cmd_fit(args, cfg: Config):
    ecg = Waveform(read_waveform_csv(args.ecg), cfg.sim.ecg_fs)
    ppg = Waveform(read_waveform_csv(args.ppg), cfg.sim.ppg_fs)
    res = fit_simulator(TargetPair(ecg, ppg), _params(args.init), _fit_cfg(cfg, args))
    Path(args.out_params).write_text(res.params.to_json(indent=2, sort_keys=True) + "\n")
    if args.out_trace:
        with open(args.out_trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("iter", "stage", "L_ecg", "L_ppg", "L_deriv", "L_peak", "total"))
            for row in res.trace_rows():
                w.writerow([row[0], row[1]] + [format(v, ".9g") for v in row[2:]])


def cmd_fit_groups(args, cfg: Config):
    ds = load_dataset(args.data)
    params, warnings = fit_groups(ds.targets(), _fit_cfg(cfg, args), _params(args.init))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    _write_json(args.out, {g: p.to_dict() for g, p in params.items()})


def cmd_gen_data(args, cfg: Config):
    if args.groups:
        groups = _group_params(args.groups)
    else:
        if args.n_groups < 1:
            raise UsageError("--n-groups must be at least 1")
        rng = np.random.default_rng(args.seed)
        groups = {f"g{i}": random_params(rng, hr_range=cfg.sim.hr_range) for i in range(args.n_groups)}
    ds = gen_dataset(groups, args.n_per_group, cfg.noise, args.seed, cfg.sim.duration,
                     cfg.sim.warmup, cfg.sim.fine_fs, cfg.sim.ecg_fs, cfg.sim.ppg_fs)
    save_dataset(ds, args.out)
    if ds.meta["skipped"]:
        print(f"skipped {len(ds.meta['skipped'])} records", file=sys.stderr)


def cmd_residual_check(args, cfg: Config):
    p = _params(args.params)
    h = read_waveform_csv(args.waveform)
    dt = 1.0 / args.fs
    n0 = int(round(args.warmup * args.fs))
    xs, ys = phase_track(p.omega, dt, n0 + len(h))
    refs = np.column_stack([xs[n0:], ys[n0:]])
    t0 = n0 * dt
    res = euler_residual(h, refs, args.modality, p, dt, t0)
    rep = gronwall_bound(res, field_lipschitz(p, args.modality), h, p, refs, args.modality, t0)
    _write_json(args.out, {
        "modality": args.modality, "n": len(h), "max_abs": res.max_abs, "mean_sq": res.mean_sq,
        "gronwall": {"bound": rep.bound, "deviation": rep.deviation,
                     "ratio": _clean(rep.ratio), "holds": rep.holds},
    })


def _codecs(cfg: Config, ds: Dataset):
    return ToyLatentCodec(cfg.flow.down_factor), ToyLatentCodec(cfg.flow.ppg_down_factor)


def _latents(cfg: Config, ds: Dataset):
    ce, cp = _codecs(cfg, ds)
    ze = ce.encode(np.stack([r.ecg for r in ds.records]))
    zc = cp.encode(np.stack([r.ppg for r in ds.records]))
    return ze, zc


def _noise(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape)


def _mapper_crops(ds: Dataset, cfg: Config):
    stride = int(round(ds.ecg_fs / ds.ppg_fs))
    pre, post = cfg.flow.crop_pre, cfg.flow.crop_post
    xe, xp = [], []
    for r in ds.records:
        ecg = Waveform(r.ecg, ds.ecg_fs)
        ppg = Waveform(r.ppg, ds.ppg_fs)
        for i in r_peaks(ecg):
            a = stride * int(round(i / stride))
            if a >= len(r.ecg):
                continue
            ce = crop_beat(ecg, a, pre, post)
            cp = ppg_crop_for(ppg, a, pre, post, stride)
            if not (ce.padded or cp.padded):
                xe.append(ce.samples)
                xp.append(cp.samples)
    if not xe:
        raise EhsimError("no complete beats available to fit the forward mapper")
    return np.stack(xe), np.stack(xp)


def _flow_losses(model, mapper, ds: Dataset, params_by_group, cfg: Config, seed):
    ze, zc = _latents(cfg, ds)
    z0 = _noise(seed, ze.shape)
    t = np.random.default_rng(seed + 1).uniform(0, 1, len(ze))
    l_rf = rf_loss(model, z0, ze, zc, t)
    ce, _ = _codecs(cfg, ds)
    _, xt = terminal_estimate(model, z0, zc, cfg.flow.K, ce, len(ds.records[0].ecg))
    le, lp = [], []
    for r, x in zip(ds.records, xt):
        p = params_by_group.get(r.group_id)
        if p is None:
            continue
        res = sim_guided_losses(Waveform(x, ds.ecg_fs), p, mapper, cfg.flow.crop_pre, cfg.flow.crop_post,
                                cfg.sim.warmup, ds.ppg_fs)
        le.append(res.l_sim_e)
        lp.append(res.l_sim_p)
    l_e = float(np.mean(le)) if le else 0.0
    l_p = float(np.mean(lp)) if lp else 0.0
    return {"L_RF": l_rf, "L_sim_e": l_e, "L_sim_p": l_p,
            "L_Flow": flow_total(l_rf, l_e, l_p, cfg.flow.lambda_e, cfg.flow.lambda_p)}


def _flow_model(cfg: Config):
    fl = cfg.flow
    return LinearFlowModel(kind=fl.kind, degree=fl.degree, time_degree=fl.time_degree,
                           inverse_time=fl.inverse_time, ridge=fl.ridge,
                           time_samples=fl.time_samples, seed=fl.seed)


def cmd_flow_train(args, cfg: Config):
    ds = load_dataset(args.data)
    ze, zc = _latents(cfg, ds)
    model = _flow_model(cfg).fit(_noise(args.seed, ze.shape), ze, zc)
    mapper = ForwardMapper(cfg.flow.mapper_ridge, int(round(ds.ecg_fs / ds.ppg_fs)))
    mapper.fit(*_mapper_crops(ds, cfg))
    doc = {"flow": model.to_dict(), "mapper": mapper.to_dict(),
           "codec": {"down_factor": cfg.flow.down_factor, "ppg_down_factor": cfg.flow.ppg_down_factor},
           "train_seed": args.seed}
    if args.params:
        doc["train_losses"] = _flow_losses(model, mapper, ds, _group_params(args.params), cfg, args.seed)
    _write_json(args.out, doc)


def _load_model(path):
    doc = _read_json(path)
    return LinearFlowModel.from_dict(doc["flow"]), ForwardMapper.from_dict(doc["mapper"]), doc


def cmd_flow_sample(args, cfg: Config):
    ds = load_dataset(args.data)
    model, _, doc = _load_model(args.model)
    ze, zc = _latents(cfg, ds)
    ce, _ = _codecs(cfg, ds)
    n_steps = args.n_steps or cfg.flow.n_steps
    z = _noise(args.seed, ze.shape)
    _, xs = terminal_estimate(model, z, zc, n_steps, ce, len(ds.records[0].ecg))
    recs = [type(r)(r.group_id, r.seed, r.ppg, zscore(x)) for r, x in zip(ds.records, xs)]
    meta = dict(ds.meta, generated={"model": str(args.model), "seed": args.seed, "n_steps": n_steps})
    save_dataset(Dataset(recs, meta), args.out)


def cmd_flow_eval(args, cfg: Config):
    ds = load_dataset(args.data)
    model, mapper, _ = _load_model(args.model)
    _write_json(args.out, _flow_losses(model, mapper, ds, _group_params(args.params), cfg, args.seed))


def cmd_eval(args, cfg: Config):
    ref = load_dataset(args.ref)
    gen = load_dataset(args.gen)
    if len(ref) != len(gen):
        raise EhsimError("reference and generated datasets differ in size")
    fs = ref.ecg_fs
    maes, rmses, fds, hr_g, hr_r = [], [], [], [], []
    gen_meas, ref_meas, beat_rows = [], [], []
    kw = {"deriv_frac": cfg.flow.deriv_frac, "amp_frac": cfg.flow.amp_frac}
    for k, (g, r) in enumerate(zip(gen.records, ref.records)):
        maes.append(mae(g.ecg, r.ecg))
        rmses.append(rmse(g.ecg, r.ecg))
        if args.fd == "curve":
            fds.append(frechet_curve_distance(g.ecg, r.ecg))
        gw, rw = Waveform(g.ecg, fs), Waveform(r.ecg, fs)
        gb, rb = delineate(gw, **kw), delineate(rw, **kw)
        hr_g.append(hr_from_peaks([b.R for b in gb], fs))
        hr_r.append(hr_from_peaks([b.R for b in rb], fs))
        gm = dict(zip((b.R for b in gb), measure(gw, gb)))
        rm = measure(rw, rb)
        tol = int(round(0.15 * fs))
        for (gbeat, rbeat), rmeas in zip(pair_beats(gb, rb, tol), rm):
            gen_meas.append(None if gbeat is None else gm[gbeat.R])
            ref_meas.append(rmeas)
        for side, beats in (("gen", gb), ("ref", rb)):
            for b in beats:
                beat_rows.append([k, side] + [b.as_dict()[n] for n in LANDMARKS])
    if args.fd == "gaussian":
        fd = frechet_gaussian_distance(np.stack([g.ecg for g in gen.records]),
                                       np.stack([r.ecg for r in ref.records]))
    else:
        fd = float(np.mean(fds))
    table = fiducial_mae(gen_meas, ref_meas)
    report = {
        "table1": {"MAE": float(np.mean(maes)), "RMSE": float(np.mean(rmses)), "FD": fd,
                   "HR MAE": _clean(hr_mae(hr_g, hr_r))},
        "table2": {m: table[m]["mae"] for m in MEASUREMENTS},
        "coverage": {m: table[m]["coverage"] for m in MEASUREMENTS},
        "fd_mode": args.fd,
        "n_segments": len(ref),
        "excluded": ["FID"],
    }
    _write_json(args.out, report)
    if args.beats_csv:
        with open(args.beats_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment", "side"] + list(LANDMARKS))
            for row in beat_rows:
                w.writerow(["" if v is None else v for v in row])


def _block_latent(x, n_channels, n_time):
    """View each signal as ``(C, T)`` pooled blocks with within-block variance."""
    B, n = x.shape
    blocks = x.reshape(B, n_channels * n_time, -1)
    mu = blocks.mean(axis=2).reshape(B, n_channels, n_time)
    var = blocks.var(axis=2).reshape(B, n_channels, n_time) + 1e-6
    return DiagGaussian(mu, np.log(var))


def cmd_losses(args, cfg: Config):
    ds = load_dataset(args.data)
    recs = ds.records[:args.batch] if args.batch else ds.records
    xe = np.stack([r.ecg for r in recs])
    xp = np.stack([r.ppg for r in recs])
    C, T = 4, 10
    qe, qp = _block_latent(xe, C, T), _block_latent(xp, C, T)
    fe, fp = xe.shape[1] // (C * T), xp.shape[1] // (C * T)
    ce, cp = ToyLatentCodec(fe), ToyLatentCodec(fp)
    xe_hat = ce.decode(qe.mu.reshape(len(recs), -1), xe.shape[1])
    xp_hat = cp.decode(qp.mu.reshape(len(recs), -1), xp.shape[1])
    xe_from_p = ce.decode(qp.mu.reshape(len(recs), -1), xe.shape[1])
    xp_from_e = cp.decode(qe.mu.reshape(len(recs), -1), xp.shape[1])
    if args.params:
        gp = _group_params(args.params)
        delta = [gp[r.group_id].ppg.delta_pat for r in recs]
        omega = [gp[r.group_id].omega for r in recs]
    else:
        delta, omega = [default_params().ppg.delta_pat] * len(recs), None
    fl = cfg.flow
    terms = {
        "pat": pat_loss([Waveform(x, ds.ecg_fs) for x in xe_hat], [Waveform(x, ds.ppg_fs) for x in xp_hat],
                        delta, omega, fl.phase_temperature),
        "rec": rec_loss(xp_hat, xp, xe_hat, xe),
        "kl": 0.5 * (kl_to_standard(qe) + kl_to_standard(qp)),
        "gpa": gpa_loss(qe, qp),
        "lid": infonce_bidirectional(pool_normalize(qp.mu), pool_normalize(qe.mu), fl.tau),
        "csd": csd_loss(xe_from_p, xe, xp_from_e, xp),
    }
    terms["total"] = pae_total(terms, cfg.pae_weights)
    _write_json(args.out, terms)


# -- parser -----------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="ehsim", description="ECG/PPG simulator, fitting, latent flow and metrics")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--config", help="JSON config (sections sim, fit, pae_weights, flow, noise)")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("simulate", help="simulate a window and write ECG/PPG CSVs")
    s.add_argument("--params", help="SimParams JSON (default: built-in)")
    s.add_argument("--duration", type=float, default=10.0)
    s.add_argument("--warmup", type=float, default=2.0)
    s.add_argument("--fine-fs", type=int, default=None)
    s.add_argument("--out-ecg", required=True)
    s.add_argument("--out-ppg", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit simulator parameters to an ECG/PPG pair")
    s.add_argument("--ecg", required=True)
    s.add_argument("--ppg", required=True)
    s.add_argument("--init", help="initial SimParams JSON")
    s.add_argument("--max-iters", type=int)
    s.add_argument("--out-params", required=True)
    s.add_argument("--out-trace")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("fit-groups", help="fit one parameter set per dataset group")
    s.add_argument("--data", required=True)
    s.add_argument("--init")
    s.add_argument("--max-iters", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_groups)

    s = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--groups", help="JSON map group_id -> SimParams (default: random groups)")
    s.add_argument("--n-groups", type=int, default=3)
    s.add_argument("--n-per-group", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("residual-check", help="Euler residual and Gronwall report of a waveform")
    s.add_argument("--waveform", required=True)
    s.add_argument("--params")
    s.add_argument("--modality", choices=("e", "p"), default="e")
    s.add_argument("--fs", type=float, default=120.0, help="waveform rate; also the Euler step rate")
    s.add_argument("--warmup", type=float, default=0.0, help="seconds of phase track before the waveform")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_residual_check)

    s = sub.add_parser("flow-train", help="fit the latent flow and the forward mapper")
    s.add_argument("--data", required=True)
    s.add_argument("--params", help="group params JSON; adds training losses to the output")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_flow_train)

    s = sub.add_parser("flow-sample", help="generate ECG windows from each record's PPG")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--n-steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_flow_sample)

    s = sub.add_parser("flow-eval", help="report L_RF, L_sim_e, L_sim_p and L_Flow")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_flow_eval)

    s = sub.add_parser("eval", help="waveform and fiducial metrics of generated vs reference ECG")
    s.add_argument("--ref", required=True)
    s.add_argument("--gen", required=True)
    s.add_argument("--fd", choices=("curve", "gaussian"), default="curve")
    s.add_argument("--beats-csv")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("losses", help="dump latent loss terms for a dataset batch")
    s.add_argument("--data", required=True)
    s.add_argument("--params")
    s.add_argument("--batch", type=int, default=0, help="first N records (0: all)")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_losses)
    return ap


def main(argv=None):
    level = os.environ.get("EHSIM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        ap.print_usage(sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (EhsimError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
