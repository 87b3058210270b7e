"""Command-line entry point wiring all modules together.

Every subcommand writes its outputs plus a manifest (config + seed +
version) into the output directory; rerunning a command with the same
arguments produces byte-identical files.  Exit codes: 0 success, 1 threshold
failure (reproduce), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .calibration import (
    CalibOptions,
    QuoteSurface,
    calibrate_slicewise,
    calibrate_surface,
    eval_volatility,
    fit_timeseries_price,
    fit_timeseries_vol,
    joint_calibrate,
)
from .expected_signature import CorrelationSpec, expected_sig
from .experiments import EXPERIMENTS
from .market_sim import SVParams, estimate_spot_qv, extract_drivers, simulate
from .models import ModelSpec, eval_model
from .pricing import (
    SigPayoff,
    cv_price,
    fit_sig_payoff,
    implied_vol,
    mc_price,
    model_sig_samples,
    sig_payoff_price,
    simulate_features,
    terminal_samples,
)
from .signature import SamplePath, path_signature
from .tensor_algebra import iter_words, word_str


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_manifest(outdir: str, args: argparse.Namespace) -> None:
    os.makedirs(outdir, exist_ok=True)
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {"version": __version__, "config": config}
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _write_json(outdir: str, name: str, doc) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, name), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_path_csv(path: str) -> SamplePath:
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = data.dtype.names
    t = np.asarray(data[names[0]], dtype=float)
    vals = np.column_stack([data[c] for c in names[1:]])
    return SamplePath(t, vals)


def _read_market_csv(path: str):
    data = np.genfromtxt(path, delimiter=",", names=True)
    t = np.asarray(data["t"], dtype=float)
    s = np.asarray(data["S"], dtype=float)
    v = np.asarray(data["V"], dtype=float) if "V" in data.dtype.names else None
    return t, s, v


def _grid(T: float, step: float) -> np.ndarray:
    n = int(round(T / step))
    return np.linspace(0.0, T, n + 1)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    with open(args.params) as fh:
        doc = json.load(fh)
    params = SVParams(
        model=args.model,
        **{k: (np.asarray(v) if isinstance(v, list) else v) for k, v in doc.items()},
    )
    times = _grid(args.T, args.grid_step)
    S, V = simulate(params, times, args.npaths, args.seed)
    _write_manifest(args.out, args)
    out = os.path.join(args.out, "paths.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        if args.model == "multibs":
            d = S.shape[2]
            w.writerow(["path", "t"] + [f"S{i+1}" for i in range(d)])
            for i in range(args.npaths):
                for m, t in enumerate(times):
                    w.writerow([i, _fmt(t)] + [_fmt(x) for x in S[i, m]])
        else:
            w.writerow(["path", "t", "S", "V"])
            for i in range(args.npaths):
                for m, t in enumerate(times):
                    w.writerow([i, _fmt(t), _fmt(S[i, m]), _fmt(V[i, m])])
    print(out)
    return 0


def cmd_extract_bm(args) -> int:
    t, s, v = _read_market_csv(args.prices)
    if v is None:
        raise SystemExit("extract-bm needs a CSV with columns t,S,V")
    qv_s = estimate_spot_qv(s, t, window=args.window)
    qv_v = estimate_spot_qv(v, t, window=args.window)
    drv = extract_drivers(s, v, qv_s, qv_v, t)
    _write_manifest(args.out, args)
    out = os.path.join(args.out, "drivers.csv")
    rows = np.column_stack([t, drv.values])
    np.savetxt(out, rows, delimiter=",", header="t,x1,x2", comments="",
               fmt="%.17g")
    print(out)
    return 0


def cmd_sig(args) -> int:
    path = _read_path_csv(args.path)
    stream = path_signature(path, args.level)
    words = list(iter_words(args.level, path.d))
    _write_manifest(args.out, args)
    out = os.path.join(args.out, "signature.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [word_str(word) for word in words])
        for m in range(len(stream)):
            w.writerow([_fmt(stream.times[m])] + [_fmt(x) for x in stream.coeffs[m]])
    print(out)
    return 0


def cmd_expected_sig(args) -> int:
    if args.rho:
        rho = CorrelationSpec(args.d, np.loadtxt(args.rho, delimiter=",", ndmin=2))
    else:
        rho = CorrelationSpec.identity(args.d)
    es = expected_sig(args.level, args.t, rho)
    _write_manifest(args.out, args)
    out = os.path.join(args.out, "expected_sig.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["word", "value"])
        for word in iter_words(args.level, args.d):
            w.writerow([word_str(word), _fmt(es.coeff(word))])
    print(out)
    return 0


def cmd_fit_ts(args) -> int:
    t, s, v = _read_market_csv(args.paths)
    if v is None:
        raise SystemExit("fit-ts needs a CSV with columns t,S,V")
    qv_s = estimate_spot_qv(s, t, window=args.window)
    qv_v = estimate_spot_qv(v, t, window=args.window)
    drv = extract_drivers(s, v, qv_s, qv_v, t)
    stream = path_signature(drv, args.n if args.target == "price" else args.n)
    if args.target == "price":
        spec = fit_timeseries_price(stream, s, n=args.n, penalty=args.penalty,
                                    lam=args.lam)
        fitted = eval_model(spec, stream)
        mse = float(np.mean((fitted - s) ** 2))
        target = s
    else:
        target = np.sqrt(qv_s)
        spec = fit_timeseries_vol(stream, target, n=args.n, penalty=args.penalty,
                                  lam=args.lam, s0=float(s[0]))
        fitted = eval_volatility(spec, stream)
        mse = float(np.mean((fitted - target) ** 2))
    _write_manifest(args.out, args)
    spec.save(os.path.join(args.out, "model.json"))
    _write_json(args.out, "fit_report.json",
                {"target": args.target, "mse_in_sample": mse, "n": args.n,
                 "penalty": args.penalty, "lambda": args.lam})
    rows = np.column_stack([t, target, fitted])
    np.savetxt(os.path.join(args.out, "fit_path.csv"), rows, delimiter=",",
               header="t,target,model", comments="", fmt="%.17g")
    print(os.path.join(args.out, "model.json"))
    return 0


def cmd_fit_surface(args) -> int:
    surface = QuoteSurface.from_csv(args.quotes, s0=args.s0)
    maturities = sorted(set(float(T) for T in surface.T))
    grid = np.unique(np.concatenate([
        np.linspace(0.0, max(maturities), int(round(max(maturities) * 365)) + 1),
        maturities,
    ]))
    rho = CorrelationSpec(2, np.array([[1.0, args.rho12], [args.rho12, 1.0]]))
    features = simulate_features(2, rho, grid, args.nmc, seed=args.seed, n=args.n,
                                 maturities=maturities)
    opts = CalibOptions(iters=args.iters, seed=args.seed)
    if args.slicewise:
        report = calibrate_slicewise(surface, features, n=args.n, opts=opts)
    else:
        report = calibrate_surface(surface, features, n=args.n, p=args.p,
                                   alpha=args.alpha, opts=opts)
    _write_manifest(args.out, args)
    report.spec.save(os.path.join(args.out, "model.json"))
    with open(os.path.join(args.out, "calib_report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    report.write_csv(os.path.join(args.out, "calib_fit.csv"))
    print(f"max_abs_iv_error_bps={report.max_err_bps():.3f}", file=sys.stderr)
    print(os.path.join(args.out, "calib_report.json"))
    return 0


def cmd_fit_joint(args) -> int:
    surface = QuoteSurface.from_csv(args.quotes, s0=args.s0)
    t, s, v = _read_market_csv(args.paths)
    qv_s = estimate_spot_qv(s, t, window=args.window)
    qv_v = estimate_spot_qv(v, t, window=args.window)
    drv = extract_drivers(s, v, qv_s, qv_v, t)
    stream = path_signature(drv, args.n)
    maturities = sorted(set(float(T) for T in surface.T))
    grid = np.unique(np.concatenate([
        np.linspace(0.0, max(maturities), int(round(max(maturities) * 365)) + 1),
        maturities,
    ]))
    rho = CorrelationSpec(2, np.array([[1.0, args.rho12], [args.rho12, 1.0]]))
    features = simulate_features(2, rho, grid, args.nmc, seed=args.seed, n=args.n,
                                 maturities=maturities)
    report = joint_calibrate(stream, s, surface, features, args.lambda_mix,
                             args.n, opts=CalibOptions(iters=args.iters, seed=args.seed))
    _write_manifest(args.out, args)
    report.spec.save(os.path.join(args.out, "model.json"))
    with open(os.path.join(args.out, "calib_report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    report.write_csv(os.path.join(args.out, "calib_fit.csv"))
    print(os.path.join(args.out, "calib_report.json"))
    return 0


def cmd_price(args) -> int:
    spec = ModelSpec.load(args.model)
    horizon = max(args.T, max((T for T, _ in spec.corrections), default=0.0))
    grid = np.unique(np.concatenate([
        _grid(horizon, 1.0 / 365.0),
        [T for T, _ in spec.corrections], [args.T],
    ]))
    maturities = sorted({args.T, *(T for T, _ in spec.corrections if T <= args.T)})
    raw_level = 2 * spec.n if args.cv else None
    features = simulate_features(spec.d, spec.rho, grid, args.nmc, seed=args.seed,
                                 n=spec.n, maturities=maturities,
                                 raw_level=raw_level)
    if args.payoff == "asian":
        f = SigPayoff.asian_forward(spec.s0, args.K, args.T)
        price = sig_payoff_price(f, spec, args.T)
        doc = {"price": price, "std_error": 0.0, "method": "sig-payoff closed form"}
    elif args.cv:
        samples = terminal_samples(spec, features, args.T)
        payoff = np.maximum(samples - args.K, 0.0)
        sig_rows = model_sig_samples(spec, features, args.T, 2)
        f = fit_sig_payoff(payoff, sig_rows, 2)
        price, se = cv_price(spec, features, f, args.T, args.K)
        if args.payoff == "put":
            price = price - float(samples.mean()) + args.K
        doc = {"price": price, "std_error": se, "method": "mc with sig-payoff control variate"}
    else:
        price, se = mc_price(spec, features, args.payoff, args.T, args.K)
        doc = {"price": price, "std_error": se, "method": "mc"}
    _write_manifest(args.out, args)
    _write_json(args.out, "price.json", doc)
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_implied_vol(args) -> int:
    iv = implied_vol(args.price, args.s0, args.K, args.T)
    print(json.dumps({"implied_vol": iv}, sort_keys=True))
    return 0


def cmd_reproduce(args) -> int:
    runner = EXPERIMENTS[args.experiment]
    _write_manifest(args.out, args)
    kwargs = {}
    if args.seed is not None:
        kwargs["seed"] = args.seed
    metrics, ok = runner(args.out, **kwargs)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sigcal",
        description="Signature-based asset price models: simulation, pricing, calibration",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="simulate heston/sabr/multibs paths")
    sp.add_argument("--model", required=True, choices=["heston", "sabr", "multibs"])
    sp.add_argument("--params", required=True, help="JSON file of model parameters")
    sp.add_argument("--grid-step", type=float, default=1.0 / 1095.0)
    sp.add_argument("--T", type=float, required=True)
    sp.add_argument("--npaths", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="out/simulate")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("extract-bm", help="extract Brownian drivers from t,S,V data")
    sp.add_argument("--prices", required=True)
    sp.add_argument("--window", type=int, default=60)
    sp.add_argument("--out", default="out/extract")
    sp.set_defaults(func=cmd_extract_bm)

    sp = sub.add_parser("sig", help="signature stream of a sampled path CSV")
    sp.add_argument("--path", required=True, help="CSV with header t,x1,...,xd")
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--out", default="out/sig")
    sp.set_defaults(func=cmd_sig)

    sp = sub.add_parser("expected-sig", help="closed-form expected signature of BM")
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--rho", help="CSV file with the correlation matrix")
    sp.add_argument("--t", type=float, required=True)
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--out", default="out/expected-sig")
    sp.set_defaults(func=cmd_expected_sig)

    sp = sub.add_parser("fit-ts", help="time-series regression on t,S,V data")
    sp.add_argument("--paths", required=True)
    sp.add_argument("--target", choices=["price", "vol"], default="price")
    sp.add_argument("--n", type=int, default=2)
    sp.add_argument("--penalty", choices=["l1", "l2"], default="l2")
    sp.add_argument("--lambda", dest="lam", type=float, default=0.0)
    sp.add_argument("--window", type=int, default=60)
    sp.add_argument("--out", default="out/fit-ts")
    sp.set_defaults(func=cmd_fit_ts)

    sp = sub.add_parser("fit-surface", help="calibrate to an option quote CSV")
    sp.add_argument("--quotes", required=True)
    sp.add_argument("--s0", type=float, required=True)
    sp.add_argument("--n", type=int, default=3)
    sp.add_argument("--nmc", type=int, default=200_000)
    sp.add_argument("--p", type=float, default=2.0)
    sp.add_argument("--alpha", type=float, default=0.0)
    sp.add_argument("--slicewise", action="store_true")
    sp.add_argument("--rho12", type=float, default=-0.5)
    sp.add_argument("--iters", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="out/fit-surface")
    sp.set_defaults(func=cmd_fit_surface)

    sp = sub.add_parser("fit-joint", help="joint path and surface calibration")
    sp.add_argument("--quotes", required=True)
    sp.add_argument("--paths", required=True)
    sp.add_argument("--s0", type=float, required=True)
    sp.add_argument("--lambda-mix", dest="lambda_mix", type=float, default=0.9)
    sp.add_argument("--n", type=int, default=2)
    sp.add_argument("--nmc", type=int, default=200_000)
    sp.add_argument("--window", type=int, default=60)
    sp.add_argument("--rho12", type=float, default=-0.5)
    sp.add_argument("--iters", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="out/fit-joint")
    sp.set_defaults(func=cmd_fit_joint)

    sp = sub.add_parser("price", help="price a payoff under a saved model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--payoff", choices=["call", "put", "asian"], default="call")
    sp.add_argument("--K", type=float, required=True)
    sp.add_argument("--T", type=float, required=True)
    sp.add_argument("--nmc", type=int, default=100_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--cv", action="store_true", help="sig-payoff control variate")
    sp.add_argument("--out", default="out/price")
    sp.set_defaults(func=cmd_price)

    sp = sub.add_parser("implied-vol", help="invert the Black-Scholes formula")
    sp.add_argument("--price", type=float, required=True)
    sp.add_argument("--s0", type=float, required=True)
    sp.add_argument("--K", type=float, required=True)
    sp.add_argument("--T", type=float, required=True)
    sp.set_defaults(func=cmd_implied_vol)

    sp = sub.add_parser("reproduce", help="run a named end-to-end experiment")
    sp.add_argument("experiment", choices=sorted(EXPERIMENTS))
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_reproduce)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None and args.command == "reproduce":
        args.out = os.path.join("out", "reproduce", args.experiment)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
