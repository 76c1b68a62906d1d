"""Command-line entry point: ``dynattn <command> [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Errors are also written to stderr as a one-line JSON record.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np
import pandas as pd

from . import config as config_mod
from .autodiff import NonFiniteError
from .config import ConfigError
from .data import DataError, PanelSeries, ingest_panel, month_label, write_panel_csv
from .diagnostics import diagnose, gate_table, write_reports_csv
from .evaluation import (
    EvaluationError,
    make_table,
    persistence_baseline,
    pr_column,
    r2_per_horizon,
    read_table,
    rmse_per_horizon,
    synth_generate,
    write_table,
)
from .likelihoods import LikelihoodError
from .model import ModelState, count_parameters
from .training import default_train_anchors, fit_panel, forecast_many

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODEL_TAG = "dynattn"


def unit_seed(seed: int, unit_id: str) -> int:
    """Stable per-unit seed, independent of unit order and process."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(unit_id.encode())]).generate_state(1)[0])


def split_months(series: PanelSeries, test_months: int, S: int) -> tuple[int, list[int]]:
    """Training cutoff and the test anchors that forecast into the final ``test_months``."""
    if series.T < S + test_months + 1:
        raise DataError(f"{series.unit_id}: {series.T} months is too short for S={S} and {test_months} test months")
    cutoff = int(series.months[-1]) - test_months
    return cutoff, list(range(cutoff, int(series.months[-1])))


def _checkpoint_path(run_dir: Path, unit_id: str) -> Path:
    return run_dir / "checkpoints" / f"{unit_id}.ckpt"


def _load_panel(path, cfg) -> list[PanelSeries]:
    panel = ingest_panel(path, cfg["data"]["schema"], cfg["data"]["format"])
    if not panel:
        raise DataError(f"{path}: no units")
    return panel


def _load_run_config(args) -> dict:
    run_dir = Path(args.run_dir)
    echo = run_dir / "config.json"
    source = args.config or (echo if echo.exists() else None)
    return config_mod.resolve(source, args.set or ())


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_paramcount(args) -> int:
    print(count_parameters(args.F, args.d, args.h))
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = config_mod.resolve(args.config, args.set or ())
    panel = ingest_panel(args.input, cfg["data"]["schema"], args.format or cfg["data"]["format"])
    write_panel_csv(panel, args.out)
    print(f"ingested {len(panel)} units -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    overrides = list(args.set or ())
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    cfg = config_mod.resolve(args.config, overrides)
    panel, truth = synth_generate(config_mod.synth_spec(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_panel_csv(panel, out / "panel.csv")
    _write_json(out / "truth.json", truth.to_dict())
    (out / "config.json").write_text(config_mod.dumps(cfg))
    print(f"wrote {len(panel)} synthetic units -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.set or ())
    if args.seed is not None:
        overrides.append({"seed": args.seed})
    cfg = config_mod.resolve(args.config, overrides)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config_mod.dumps(cfg))
    panel = _load_panel(args.panel, cfg)

    jobs, cutoffs = [], {}
    for series in panel:
        hyper = config_mod.hyper_config(cfg, series.F)
        cutoff, _ = split_months(series, cfg["eval"]["test_months"], hyper.S)
        anchors = default_train_anchors(series, hyper.S, cutoff)
        state = ModelState.initialize(hyper, unit_seed(cfg["seed"], series.unit_id))
        jobs.append((series, state, config_mod.train_config(cfg, anchors)))
        cutoffs[series.unit_id] = cutoff

    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    started = time.time()
    results = fit_panel(jobs, workers)

    units = []
    for (series, _, tc), res in zip(jobs, results):
        ckpt = _checkpoint_path(run_dir, series.unit_id)
        res.state.save(ckpt)
        _write_json(
            ckpt.with_suffix(".manifest.json"),
            {
                "unit_id": series.unit_id,
                "seed": cfg["seed"],
                "init_seed": unit_seed(cfg["seed"], series.unit_id),
                "config": cfg,
                "train_cutoff": month_label(cutoffs[series.unit_id]),
                "anchors": [month_label(a) for a in res.anchors],
                "losses": res.losses,
                "wall_clock_s": res.wall_clock,
                "checkpoint": str(ckpt.relative_to(run_dir)),
                "fingerprint": res.state.fingerprint(),
            },
        )
        units.append({"unit_id": series.unit_id, "checkpoint": str(ckpt.relative_to(run_dir)),
                      "final_loss": res.losses[-1]})
    _write_json(
        run_dir / "manifest.json",
        {"command": "train", "panel": str(args.panel), "seed": cfg["seed"], "units": units,
         "workers": workers, "started_at": started, "elapsed_s": time.time() - started},
    )
    print(f"trained {len(units)} units -> {run_dir / 'checkpoints'}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    cfg = _load_run_config(args)
    run_dir = Path(args.run_dir)
    panel = _load_panel(args.panel, cfg)
    taus = cfg["eval"]["taus"]
    rows = []
    for series in panel:
        ckpt = _checkpoint_path(run_dir, series.unit_id)
        if not ckpt.exists():
            raise DataError(f"no checkpoint for unit {series.unit_id!r} in {run_dir}")
        state = ModelState.load(ckpt)
        H, S = state.config.H, state.config.S
        _, anchors = split_months(series, cfg["eval"]["test_months"], S)
        for fc in forecast_many(series, state, anchors, taus):
            pos = series.position(fc.anchor_t)
            for h in range(1, H + 1):
                row = {"unit": series.unit_id, "anchor": month_label(fc.anchor_t), "h": h,
                       "yhat": float(fc.yhat[h - 1])}
                for tau in taus:
                    row[pr_column(tau)] = float(fc.exceedance[float(tau)][h - 1])
                row["model"] = MODEL_TAG
                row["y_obs"] = float(series.y[pos + h]) if pos + h < series.T else np.nan
                rows.append(row)
        for t in anchors:
            for row in persistence_baseline(series, t, H, S, taus):
                row["anchor"] = month_label(row["anchor"])
                rows.append(row)
    table = make_table(rows, taus)
    out = run_dir / "forecasts" / "forecasts.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(table, out)
    print(f"wrote {len(table)} forecast rows -> {out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _load_run_config(args)
    run_dir = Path(args.run_dir)
    panel = _load_panel(args.panel, cfg)
    dcfg = cfg["diagnostics"]
    out_dir = run_dir / "diagnostics"
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for series in panel:
        state = ModelState.load(_checkpoint_path(run_dir, series.unit_id))
        cutoff, test_anchors = split_months(series, cfg["eval"]["test_months"], state.config.S)
        if dcfg["anchors"] == "test":
            anchors = test_anchors
        else:
            anchors = [a for a in default_train_anchors(series, state.config.S, cutoff) if a <= cutoff]
        rep = diagnose(state, series, anchors, dcfg["rho"], dcfg["delta"])
        rep.write_json(out_dir / f"{series.unit_id}.json")
        reports.append(rep)
    write_reports_csv(reports, out_dir / "report.csv")
    _write_json(out_dir / "gates_by_feature.json", gate_table(reports))
    print(f"wrote diagnostics for {len(reports)} units -> {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir)
    table = read_table(run_dir / "forecasts" / "forecasts.csv")
    rmse = pd.concat([rmse_per_horizon(table, "zero"), rmse_per_horizon(table, "drop")], ignore_index=True)
    r2 = r2_per_horizon(table)
    metrics = rmse.merge(r2[["model", "h", "r2"]], on=["model", "h"], how="left")
    out = run_dir / "metrics"
    out.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(out / "metrics.csv", index=False, float_format="%.17g", na_rep="NA", lineterminator="\n")
    records = {
        f"{r.model}|h={r.h}|{r.mode}": {"rmse": r.rmse, "n_valid": int(r.n_valid),
                                        "r2": None if pd.isna(r.r2) else float(r.r2)}
        for r in metrics.itertuples()
    }
    _write_json(out / "metrics.json", records)
    print(f"wrote {len(metrics)} metric rows -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynattn", description="Gated attention ZINB forecaster for count panels.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_dir=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        if run_dir:
            p.add_argument("--run-dir", required=True, help="run directory")

    p = sub.add_parser("paramcount", help="print the trainable parameter count")
    p.add_argument("--F", type=int, required=True)
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--h", type=int, default=128)
    p.set_defaults(func=cmd_paramcount)

    p = sub.add_parser("ingest", help="normalise a panel file into the canonical CSV")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"))
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic ZINB panel")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit one model per unit")
    common(p, run_dir=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="parallel unit fits (default: CPU count)")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("forecast", cmd_forecast, "forecast the test window"),
        ("diagnose", cmd_diagnose, "gate, ablation and elasticity reports"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p, run_dir=True)
        p.add_argument("--panel", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="RMSE and R^2 per model and horizon")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _fail(code: int, exc: Exception) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DataError, EvaluationError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, exc)
    except (NonFiniteError, LikelihoodError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)


if __name__ == "__main__":
    sys.exit(main())
