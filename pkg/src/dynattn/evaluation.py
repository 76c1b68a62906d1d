"""Rolling-origin scoring, a persistence floor and the synthetic ZINB panel generator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd

from .data import PanelSeries, month_index
from .likelihoods import DistParams, sample

TABLE_COLUMNS = ["unit", "anchor", "h", "yhat", "model", "y_obs"]


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# forecast tables


def make_table(rows: list[dict], taus=()) -> pd.DataFrame:
    """A ForecastTable: one row per (unit, anchor, h, model)."""
    pr_cols = [pr_column(t) for t in taus]
    cols = ["unit", "anchor", "h", "yhat", *pr_cols, "model", "y_obs"]
    table = pd.DataFrame(rows, columns=cols)
    if table.duplicated(["unit", "anchor", "h", "model"]).any():
        raise EvaluationError("duplicate (unit, anchor, h, model) rows in forecast table")
    return table


def pr_column(tau) -> str:
    tau = float(tau)
    return f"pr_tau_{int(tau)}" if tau.is_integer() else f"pr_tau_{tau:g}"


def write_table(table: pd.DataFrame, path) -> None:
    table.to_csv(path, index=False, float_format="%.17g", na_rep="NA", lineterminator="\n")


def read_table(path) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=True, na_values=["NA"], dtype={"unit": str})


# ---------------------------------------------------------------------------
# metrics


def rmse_per_horizon(table: pd.DataFrame, mode: str = "zero") -> pd.DataFrame:
    """RMSE by (model, h) over rows with an observed target.

    ``zero`` replaces missing predictions by 0 (infinite ones are kept and
    make the cell infinite); ``drop`` excludes rows with missing or
    non-finite predictions. ``n_valid`` counts the rows scored.
    """
    if mode not in ("zero", "drop"):
        raise EvaluationError(f"unknown missing-value mode {mode!r}")
    if table.empty:
        raise EvaluationError("empty forecast table")
    scored = table[table["y_obs"].notna()]
    out = []
    for (model, h), grp in scored.groupby(["model", "h"], sort=True):
        yhat = grp["yhat"].to_numpy(dtype=np.float64)
        y = grp["y_obs"].to_numpy(dtype=np.float64)
        if mode == "zero":
            yhat = np.where(np.isnan(yhat), 0.0, yhat)
        else:
            keep = np.isfinite(yhat)
            yhat, y = yhat[keep], y[keep]
            if len(y) == 0:
                raise EvaluationError(f"no valid predictions for model {model!r}, h={h} in drop mode")
        with np.errstate(over="ignore", invalid="ignore"):
            rmse = math.sqrt(float(np.mean((yhat - y) ** 2)))
        out.append({"model": model, "h": int(h), "mode": mode, "rmse": rmse, "n_valid": int(len(y))})
    return pd.DataFrame(out, columns=["model", "h", "mode", "rmse", "n_valid"])


def r_squared(yhat, y) -> float:
    """Squared Pearson correlation on the original scale; NaN when undefined."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2:
        return math.nan
    a, b = yhat - yhat.mean(), y - y.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return math.nan
    return (float(a @ b) / denom) ** 2


def r2_per_horizon(table: pd.DataFrame) -> pd.DataFrame:
    scored = table[table["y_obs"].notna() & np.isfinite(table["yhat"])]
    out = []
    for (model, h), grp in scored.groupby(["model", "h"], sort=True):
        out.append({"model": model, "h": int(h), "r2": r_squared(grp["yhat"], grp["y_obs"]), "n": len(grp)})
    return pd.DataFrame(out, columns=["model", "h", "r2", "n"])


# ---------------------------------------------------------------------------
# persistence baseline


def persistence_baseline(series: PanelSeries, anchor: int, H: int, S: int, taus=()) -> list[dict]:
    """Repeat the anchor's count for every horizon; exceedance from the trailing S months."""
    pos = series.position(anchor)
    y_t = series.y[pos]
    if np.isnan(y_t):
        raise EvaluationError(f"{series.unit_id}: anchor target unobserved")
    trailing = series.y[max(0, pos - S + 1) : pos + 1]
    trailing = trailing[~np.isnan(trailing)]
    rows = []
    for h in range(1, H + 1):
        row = {"unit": series.unit_id, "anchor": int(anchor), "h": h, "yhat": float(y_t)}
        for tau in taus:
            row[pr_column(tau)] = float(np.mean(trailing >= tau))
        row["model"] = "persistence"
        row["y_obs"] = float(series.y[pos + h]) if pos + h < series.T else math.nan
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# synthetic panels


@dataclass(frozen=True)
class SynthSpec:
    units: int = 10
    T: int = 160
    F: int = 50
    informative: tuple[int, ...] = (0, 1, 2, 3, 4)
    effects: tuple[float, ...] = (0.7, -0.6, 0.5, -0.5, 0.6)
    intercept: float = 1.0
    pi: float = 0.3
    theta: float = 2.0
    ar_coef: float = 0.7
    missing_rate: float = 0.0
    start_month: str = "2000-01"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "informative", tuple(int(i) for i in self.informative))
        object.__setattr__(self, "effects", tuple(float(e) for e in self.effects))
        if len(self.informative) != len(self.effects):
            raise ValueError("one effect size per informative feature")
        if any(not 0 <= i < self.F for i in self.informative) or len(set(self.informative)) != len(self.informative):
            raise ValueError("informative indices must be distinct and within 0..F-1")
        if not 0.0 <= self.pi < 1.0 or self.theta <= 0 or not -1.0 < self.ar_coef < 1.0:
            raise ValueError("invalid synthetic process parameters")
        if self.units < 1 or self.T < 2 or self.F < 1:
            raise ValueError("invalid panel dimensions")

    @classmethod
    def from_dict(cls, data: dict) -> SynthSpec:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["informative"] = list(self.informative)
        out["effects"] = list(self.effects)
        return out


@dataclass
class SynthTruth:
    spec: SynthSpec
    mu: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "informative": list(self.spec.informative),
            "mu": {k: [float(x) for x in v] for k, v in self.mu.items()},
        }


def synth_generate(spec: SynthSpec) -> tuple[list[PanelSeries], SynthTruth]:
    """Seeded AR(1) predictors driving a ZINB count through lagged informative features.

    ``log mu_t = intercept + sum_k effect_k * x_{t-1, k}``; the first month
    uses the intercept alone.
    """
    root = np.random.SeedSequence(spec.seed)
    start = month_index(spec.start_month)
    months = np.arange(start, start + spec.T)
    names = [f"x{j:03d}" for j in range(spec.F)]
    panel, truth = [], SynthTruth(spec)
    width = max(2, len(str(spec.units - 1)))
    for u, child in enumerate(root.spawn(spec.units)):
        rng = np.random.default_rng(child)
        X = np.empty((spec.T, spec.F))
        X[0] = rng.standard_normal(spec.F)
        innov = math.sqrt(1.0 - spec.ar_coef**2)
        for t in range(1, spec.T):
            X[t] = spec.ar_coef * X[t - 1] + innov * rng.standard_normal(spec.F)
        log_mu = np.full(spec.T, spec.intercept)
        for j, beta in zip(spec.informative, spec.effects):
            log_mu[1:] += beta * X[:-1, j]
        mu = np.exp(log_mu)
        y = sample(DistParams("zinb", mu, pi=np.full(spec.T, spec.pi), theta=spec.theta), rng)
        if spec.missing_rate > 0:
            X = np.where(rng.random(X.shape) < spec.missing_rate, np.nan, X)
        uid = f"u{u:0{width}d}"
        panel.append(PanelSeries(uid, months, y, X, list(names)))
        truth.mu[uid] = mu
    return panel, truth
