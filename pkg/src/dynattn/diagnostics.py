"""Gate-based feature selection, ablation importance and elasticity."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PanelSeries, build_window, full_series_stats
from .likelihoods import expected_count
from .model import ModelState, predict

SE_FLOOR = 1e-12
ELASTICITY_EPS = 1e-8


@dataclass
class DiagnosticsReport:
    unit_id: str
    gates: np.ndarray
    selected: list[int]
    feature_names: list[str]
    anchors: list[int]
    ablation: np.ndarray
    elasticity: np.ndarray
    normalized: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def num(x):
            x = float(x)
            return None if math.isnan(x) else x

        return {
            "unit_id": self.unit_id,
            "feature_names": list(self.feature_names),
            "gates": [float(g) for g in self.gates],
            "selected": [int(j) for j in self.selected],
            "anchors": [int(a) for a in self.anchors],
            "ablation": [[num(v) for v in row] for row in self.ablation],
            "elasticity": [[num(v) for v in row] for row in self.elasticity],
            "normalized": {k: [float(v) for v in vals] for k, vals in self.normalized.items()},
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def select_features(gates, rho: float = 0.10) -> list[int]:
    """Top ``ceil(rho * #positive)`` positive gates, largest first, ties to the lower index."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    g = np.asarray(gates, dtype=np.float64)
    positive = np.flatnonzero(g > 0)
    if len(positive) == 0:
        return []
    k = math.ceil(round(rho * len(positive), 9))
    order = sorted(positive, key=lambda j: (-g[j], j))
    return [int(j) for j in order[:k]]


def _targets(series: PanelSeries, anchors, H: int) -> np.ndarray:
    out = np.full((len(anchors), H), np.nan)
    for i, t in enumerate(anchors):
        pos = series.position(t)
        for h in range(1, H + 1):
            if pos + h < series.T:
                out[i, h - 1] = series.y[pos + h]
    return out


def _expected(state: ModelState, windows, gate_mask=None) -> np.ndarray:
    return expected_count(predict(state, windows, gate_mask))


def ablation_importance(state: ModelState, series: PanelSeries, j: int, anchors) -> np.ndarray:
    """Mean relative change in squared error when gate ``j`` is forced to zero, per horizon.

    Windows are standardised with statistics from the full series. Anchors
    whose baseline squared error is below 1e-12, or whose target is
    unobserved, are skipped; a horizon with nothing left is NaN.
    """
    cfg = state.config
    anchors = list(anchors)
    if not anchors:
        raise ValueError("ablation needs at least one anchor")
    stats = full_series_stats(series)
    windows = np.stack([build_window(series, int(t), cfg.S, cfg.H, stats=stats).values for t in anchors])
    y = _targets(series, anchors, cfg.H)
    mask = np.ones(cfg.F)
    mask[j] = 0.0
    se = (_expected(state, windows) - y) ** 2
    se_ablated = (_expected(state, windows, mask) - y) ** 2
    usable = np.isfinite(se) & (se >= SE_FLOOR)
    out = np.full(cfg.H, np.nan)
    for h in range(cfg.H):
        u = usable[:, h]
        if u.any():
            out[h] = float(np.mean((se_ablated[u, h] - se[u, h]) / se[u, h]))
    return out


def elasticity(state: ModelState, series: PanelSeries, j: int, anchors, delta: float = 0.10) -> np.ndarray:
    """Mean relative change in expected count after scaling standardised column ``j`` by ``1 + delta``."""
    cfg = state.config
    anchors = list(anchors)
    if not anchors:
        raise ValueError("elasticity needs at least one anchor")
    windows = np.stack([build_window(series, int(t), cfg.S, cfg.H).values for t in anchors])
    shocked = windows.copy()
    shocked[:, :, j] *= 1.0 + delta
    base = _expected(state, windows)
    moved = _expected(state, shocked)
    return np.mean((moved - base) / (np.abs(base) + ELASTICITY_EPS), axis=0)


def normalize_report(kappa) -> np.ndarray:
    """Horizon-average each feature's row, then divide by the largest magnitude.

    Undefined (NaN) horizons are ignored in the average; a row that is
    entirely undefined counts as zero.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    if kappa.ndim == 1:
        kappa = kappa[:, None]
    if kappa.shape[0] == 0:
        return np.zeros(0)
    defined = np.isfinite(kappa)
    counts = defined.sum(axis=1)
    sums = np.where(defined, kappa, 0.0).sum(axis=1)
    avg = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    peak = np.max(np.abs(avg))
    if peak > 0:
        return avg / peak
    return np.zeros_like(avg)


def diagnose(
    state: ModelState,
    series: PanelSeries,
    anchors,
    rho: float = 0.10,
    delta: float = 0.10,
) -> DiagnosticsReport:
    """Gates, selection, per-horizon ablation and elasticity with normalised summaries."""
    gates = state.gates()
    selected = select_features(gates, rho)
    H = state.config.H
    anchors = [int(a) for a in anchors]
    abl = np.array([ablation_importance(state, series, j, anchors) for j in selected]).reshape(len(selected), H)
    ela = np.array([elasticity(state, series, j, anchors, delta) for j in selected]).reshape(len(selected), H)
    return DiagnosticsReport(
        unit_id=series.unit_id,
        gates=gates,
        selected=selected,
        feature_names=list(series.feature_names),
        anchors=anchors,
        ablation=abl,
        elasticity=ela,
        normalized={"ablation": normalize_report(abl), "elasticity": normalize_report(ela)},
    )


def write_reports_csv(reports: list[DiagnosticsReport], path) -> None:
    """One row per (unit, selected feature, horizon), plus the normalised values."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "feature", "gate", "h", "ablation", "elasticity", "ablation_norm", "elasticity_norm"])
        for rep in reports:
            for k, j in enumerate(rep.selected):
                for h in range(rep.ablation.shape[1]):
                    w.writerow([
                        rep.unit_id,
                        rep.feature_names[j],
                        repr(float(rep.gates[j])),
                        h + 1,
                        "NA" if math.isnan(rep.ablation[k, h]) else repr(float(rep.ablation[k, h])),
                        repr(float(rep.elasticity[k, h])),
                        repr(float(rep.normalized["ablation"][k])),
                        repr(float(rep.normalized["elasticity"][k])),
                    ])


def gate_table(reports: list[DiagnosticsReport]) -> dict[str, dict[str, float]]:
    """Mean gate per feature across units (a simple group-by for regional tables)."""
    if not reports:
        return {}
    names = reports[0].feature_names
    stacked = np.stack([r.gates for r in reports])
    return {"mean_gate": {n: float(v) for n, v in zip(names, stacked.mean(axis=0))}}
