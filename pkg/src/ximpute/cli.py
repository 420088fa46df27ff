"""Command-line orchestration: transform, impute (parallel month batches),
diagnose, simulate, backtest.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
A flat key=value config file can seed any flag; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import em as em_mod
from . import simlab, spectral
from .backtest import StrategySpec, TuningSpec, rolling_run
from .errors import DataError, NumericalError, XimputeError
from .imputers import ImputerSpec, run_imputer
from .panel import PredictorPanel, load_panel, month_span
from .pipeline import TransformCache
from .transform import params_to_frame

log = logging.getLogger("ximpute")

METHOD_ALIASES = {"mean": "simple_mean", "group": "group_mean",
                  "last": "last_observed", "em": "mvn_em",
                  "ar1em": "ar1_em", "ppca": "ppca_em"}


class UsageError(XimputeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage to 1
        raise UsageError(f"{self.prog}: {message}")


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="flat key=value file seeding these flags")
    p.add_argument("--input", help="predictor observations CSV")
    p.add_argument("--returns", help="returns/market-cap CSV")
    p.add_argument("--meta", help="predictor update-period CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--months", help="inclusive yyyymm range A:B")
    p.add_argument("--predictors", default="all",
                   help="'all', 'topN' (N most observed), or a file of ids")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--transform", default="boxcox",
                   choices=["boxcox", "standardize"])


def _add_imputer_flags(p: _Parser) -> None:
    p.add_argument("--method", default="em", choices=sorted(METHOD_ALIASES))
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-iter", type=int, default=10000)
    p.add_argument("--factors", type=int, default=60, help="ppca factor count")
    p.add_argument("--window", type=int, default=60, help="ar1em window months")
    p.add_argument("--lookback", type=int, default=12, help="last-observed window")


def build_parser() -> _Parser:
    parser = _Parser(prog="ximpute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("transform", "impute", "diagnose"):
        p = sub.add_parser(name)
        _add_common(p)
        if name in ("impute", "diagnose"):
            _add_imputer_flags(p)

    p = sub.add_parser("simulate")
    _add_common(p)
    p.add_argument("--shape", type=float, required=True, help="beta shape parameter")
    p.add_argument("--J", type=int, default=125, dest="dim")
    p.add_argument("--sims", type=int, default=20)
    p.add_argument("--miss", type=float, default=1.0 / 3.0)

    p = sub.add_parser("backtest")
    _add_common(p)
    _add_imputer_flags(p)
    p.add_argument("--forecaster", default="pcr",
                   choices=["single_predictor", "ols", "pcr", "spcr"])
    p.add_argument("--K", type=int, default=10, dest="k")
    p.add_argument("--bt-window", type=int, default=120,
                   help="rolling estimation window (months)")
    p.add_argument("--weighting", default="equal", choices=["equal", "value"])
    p.add_argument("--leg-size", type=int, default=500)
    p.add_argument("--min-obs", type=int, default=1000)
    p.add_argument("--predictor", help="single-predictor mode signal")
    p.add_argument("--handling", default="imputed",
                   choices=["imputed", "drop_missing"])
    p.add_argument("--oos", required=True, help="portfolio months A:B")
    p.add_argument("--tuning", action="store_true")
    p.add_argument("--grid", default="10,30,50,70,90")
    return parser


def _read_config(path: str) -> list[str]:
    tokens = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                tokens.append(flag)
        else:
            tokens.extend([flag, value])
    return tokens


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    if argv and not argv[0].startswith("-"):
        rest = list(argv[1:])
        if "--config" in rest:
            i = rest.index("--config")
            try:
                cfg_path = rest[i + 1]
            except IndexError as exc:
                raise UsageError("--config needs a path") from exc
            del rest[i:i + 2]
            argv = [argv[0]] + _read_config(cfg_path) + rest
    return parser.parse_args(argv)


def _parse_months(spec: str | None) -> list[int] | None:
    if spec is None:
        return None
    try:
        a, b = spec.split(":")
        return month_span(int(a), int(b))
    except ValueError as exc:
        raise UsageError(f"bad month range {spec!r}; expected A:B") from exc


def _load(args) -> PredictorPanel:
    if not args.input:
        raise UsageError("--input is required for this command")
    return load_panel(args.input, args.returns, args.meta)


def _pick_predictors(panel: PredictorPanel, spec: str) -> list[str]:
    if spec == "all":
        return panel.predictor_ids
    if spec.startswith("top") and spec[3:].isdigit():
        return panel.top_predictors(int(spec[3:]))
    path = Path(spec)
    if path.exists():
        return [line.strip() for line in path.read_text().splitlines() if line.strip()]
    raise UsageError(f"bad --predictors value {spec!r}")


def _imputer_spec(args) -> ImputerSpec:
    method = METHOD_ALIASES[args.method]
    params = {"tol": args.tol, "max_iter": args.max_iter,
              "transform": args.transform}
    if method == "ppca_em":
        params["factors"] = args.factors
        params["max_iter"] = min(args.max_iter, 500)
        params["tol"] = 1e-6 if args.tol == 1e-4 else args.tol
    if method == "ar1_em":
        params["window"] = args.window
    if method == "last_observed":
        params["lookback"] = args.lookback
    return ImputerSpec(method, params)


def _months_for(args, panel: PredictorPanel) -> list[int]:
    months = _parse_months(args.months)
    if months is None:
        months = panel.months
    return [m for m in months if m in set(panel.months)]


def _impute_one(payload) -> dict:
    panel, month, spec, predictors, outdir = payload
    outdir = Path(outdir)
    started = time.perf_counter()
    try:
        tcache = TransformCache(panel, mode=dict(spec.params).get("transform", "boxcox"))
        imp = run_imputer(spec, panel, month, predictors, tcache)
        _, params = tcache.cross_section(month, predictors)
        wide = pd.DataFrame(imp.filled, columns=imp.cs.predictor_ids)
        wide.insert(0, "stock_id", imp.cs.stock_ids)
        wide.to_csv(outdir / f"filled_{month}.csv", index=False)
        prov = pd.DataFrame(imp.provenance, columns=imp.cs.predictor_ids)
        prov.insert(0, "stock_id", imp.cs.stock_ids)
        prov.to_csv(outdir / f"provenance_{month}.csv", index=False)
        params_to_frame([params[p] for p in imp.cs.predictor_ids]) \
            .to_csv(outdir / f"transforms_{month}.csv", index=False)
        meta = {"month": month, "status": "ok",
                "n_stocks": imp.cs.n_stocks, "n_predictors": imp.cs.n_predictors}
        model = imp.info.get("model")
        if model is not None:
            em_mod.save_cov_model(model, outdir)
            meta.update(iterations=model.iterations, converged=model.converged,
                        final_delta=model.final_delta)
        if "iterations" in imp.info:
            meta.update(iterations=imp.info["iterations"],
                        converged=imp.info["converged"])
        meta["wall_time"] = round(time.perf_counter() - started, 4)
        return meta
    except XimputeError as exc:
        return {"month": month, "status": "failed", "error": str(exc),
                "wall_time": round(time.perf_counter() - started, 4)}


def cmd_impute(args) -> int:
    panel = _load(args)
    predictors = _pick_predictors(panel, args.predictors)
    months = _months_for(args, panel)
    if not months:
        raise DataError("no requested month has observations")
    spec = _imputer_spec(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    payloads = [(panel, m, spec, predictors, str(outdir)) for m in months]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_impute_one, payloads))
    else:
        results = [_impute_one(p) for p in payloads]
    results.sort(key=lambda r: r["month"])
    for r in results:
        log.info("impute %s status=%s iterations=%s delta=%s wall=%.3fs",
                 r["month"], r["status"], r.get("iterations", "-"),
                 r.get("final_delta", "-"), r["wall_time"])
    (outdir / "manifest.json").write_text(json.dumps(results, indent=1))
    n_failed = sum(r["status"] != "ok" for r in results)
    if n_failed:
        log.warning("%d month(s) failed; see manifest.json", n_failed)
    return 0


def cmd_transform(args) -> int:
    panel = _load(args)
    predictors = _pick_predictors(panel, args.predictors)
    months = _months_for(args, panel)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for month in months:
        tcache = TransformCache(panel, mode=args.transform)
        started = time.perf_counter()
        try:
            _, params = tcache.cross_section(month, predictors)
            params_to_frame([params[p] for p in predictors]) \
                .to_csv(outdir / f"transforms_{month}.csv", index=False)
            manifest.append({"month": month, "status": "ok",
                             "wall_time": round(time.perf_counter() - started, 4)})
        except XimputeError as exc:
            manifest.append({"month": month, "status": "failed", "error": str(exc)})
        log.info("transform %s %s", month, manifest[-1]["status"])
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return 0


def _flat_corr(corr: np.ndarray, ids: list[str]) -> pd.DataFrame:
    iu = np.triu_indices(len(ids), k=1)
    frame = pd.DataFrame({"predictor_a": [ids[i] for i in iu[0]],
                          "predictor_b": [ids[j] for j in iu[1]],
                          "corr": corr[iu]})
    return frame[np.isfinite(frame["corr"])]


def _quantile_frame(quantiles: dict, mean_abs: float) -> pd.DataFrame:
    return pd.DataFrame({"quantile": [*map(str, quantiles)] + ["mean_abs"],
                         "value": [*quantiles.values(), mean_abs]})


def cmd_diagnose(args) -> int:
    panel = _load(args)
    predictors = _pick_predictors(panel, args.predictors)
    months = _months_for(args, panel)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for month in months:
        tcache = TransformCache(panel, mode=args.transform)
        cs, _ = tcache.cross_section(month, predictors)
        model = em_mod.em_fit(cs, tol=args.tol, max_iter=args.max_iter)
        obs_corr, _defined = spectral.available_case_corr(cs)
        emc = spectral.em_corr(model)
        _flat_corr(obs_corr, predictors).to_csv(outdir / f"corr_obs_{month}.csv", index=False)
        _flat_corr(emc, predictors).to_csv(outdir / f"corr_em_{month}.csv", index=False)
        diff = spectral.corr_difference_stats(emc, obs_corr)
        pd.concat([_quantile_frame(diff.level_quantiles, diff.level_mean_abs).assign(panel="level"),
                   _quantile_frame(diff.percent_quantiles, diff.percent_mean_abs).assign(panel="percent")]) \
            .to_csv(outdir / f"corr_diff_{month}.csv", index=False)
        for tag, mat in (("obs", np.nan_to_num(obs_corr)), ("em", emc)):
            spec = spectral.pca_spectrum(0.5 * (mat + mat.T))
            pd.DataFrame({"k": np.arange(1, len(predictors) + 1),
                          "eigenvalue": spec.eigenvalues,
                          "cum_share": spec.variance_share}) \
                .to_csv(outdir / f"spectrum_{tag}_{month}.csv", index=False)
        dist = spectral.imputation_slopes(model, cs.mask)
        pd.DataFrame({"slope": dist.slopes}).to_csv(outdir / f"slopes_{month}.csv", index=False)
        _quantile_frame(dist.quantiles, dist.mean_abs) \
            .to_csv(outdir / f"slope_quantiles_{month}.csv", index=False)
        log.info("diagnose %s: %d slope entries", month, dist.slopes.size)
    return 0


def cmd_simulate(args) -> int:
    cfg = simlab.SimConfig(j=args.dim, beta_shape=args.shape, miss_prob=args.miss,
                           n_sims=args.sims, seed=args.seed)
    report = simlab.run_dim_experiment(cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    tag = f"{args.shape:g}"
    for name, frame in simlab.report_frames(report).items():
        frame.to_csv(outdir / f"{name}_{tag}.csv", index=False)
    summary = {"beta_shape": args.shape, "J": args.dim, "n_sims": args.sims,
               "seed": args.seed, "mean_abs_slope": report.mean_abs_slope}
    (outdir / f"summary_{tag}.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 0


def cmd_backtest(args) -> int:
    panel = _load(args)
    predictors = _pick_predictors(panel, args.predictors)
    oos = _parse_months(args.oos)
    tuning = None
    if args.tuning:
        grid = tuple(int(x) for x in args.grid.split(","))
        tuning = TuningSpec(grid=grid)
    spec = StrategySpec(forecaster=args.forecaster, imputer=_imputer_spec(args),
                        k=args.k, window=args.bt_window, weighting=args.weighting,
                        leg_size=args.leg_size, predictor=args.predictor,
                        handling=args.handling, min_obs=args.min_obs, tuning=tuning)
    series = rolling_run(spec, panel, (oos[0], oos[-1]), predictors)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    name = args.forecaster
    pd.DataFrame({"yyyymm": series.months, "ls_ret": series.returns,
                  "n_long": series.n_long, "n_short": series.n_short}) \
        .to_csv(outdir / f"returns_{name}.csv", index=False)
    pd.DataFrame([{"strategy": name, "annualized_mean_pct": series.annualized_mean,
                   "annualized_sharpe": series.annualized_sharpe,
                   "months": len(series.months)}]) \
        .to_csv(outdir / "summary.csv", index=False)
    if series.tuning_log:
        rows = [{"date": e["date"], "K": k, "rmse": v,
                 "selected": int(k == e["selected"])}
                for e in series.tuning_log for k, v in e["rmse"].items()]
        pd.DataFrame(rows).to_csv(outdir / "tuning_log.csv", index=False)
    log.info("backtest %s: %d months, mean %.2f%% ann, sharpe %.2f", name,
             len(series.months), series.annualized_mean, series.annualized_sharpe)
    return 0


COMMANDS = {"transform": cmd_transform, "impute": cmd_impute,
            "diagnose": cmd_diagnose, "simulate": cmd_simulate,
            "backtest": cmd_backtest}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
