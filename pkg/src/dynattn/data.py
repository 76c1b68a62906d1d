"""Panel ingestion, imputation, anchored windows and leakage-free standardisation.

Months are integer indices ``year * 12 + month`` (month in 1..12), so a
contiguous monthly series has step 1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

SIGMA_FLOOR = 1e-8
MISSING_TOKENS = frozenset({"", "NA", "NaN", "nan", "null", "None"})


class DataError(ValueError):
    """Malformed or inconsistent panel data."""


def month_index(label: str) -> int:
    """``"2020-03"`` -> ``2020 * 12 + 3``."""
    try:
        year, month = label.strip().split("-")[:2]
        y, m = int(year), int(month)
    except (ValueError, AttributeError) as exc:
        raise DataError(f"bad month label {label!r}, expected YYYY-MM") from exc
    if not 1 <= m <= 12:
        raise DataError(f"bad month label {label!r}")
    return y * 12 + m


def month_label(index: int) -> str:
    y, m = divmod(int(index) - 1, 12)
    return f"{y:04d}-{m + 1:02d}"


@dataclass
class PanelSeries:
    """One unit's aligned monthly target counts and raw predictors.

    ``y`` and ``X`` use NaN as the missing marker.
    """

    unit_id: str
    months: np.ndarray
    y: np.ndarray
    X: np.ndarray
    feature_names: list[str]

    def __post_init__(self):
        self.months = np.asarray(self.months, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X.reshape(-1, 1)
        T = len(self.months)
        if T and np.any(np.diff(self.months) != 1):
            raise DataError(f"{self.unit_id}: months must be contiguous and increasing")
        if self.y.shape != (T,):
            raise DataError(f"{self.unit_id}: y has shape {self.y.shape}, expected ({T},)")
        if self.X.shape != (T, len(self.feature_names)):
            raise DataError(
                f"{self.unit_id}: X has shape {self.X.shape}, expected ({T}, {len(self.feature_names)})"
            )
        observed = self.y[~np.isnan(self.y)]
        if np.any(~np.isfinite(observed)) or np.any(observed < 0):
            raise DataError(f"{self.unit_id}: targets must be finite and non-negative")

    @property
    def T(self) -> int:
        return len(self.months)

    @property
    def F(self) -> int:
        return len(self.feature_names)

    def position(self, month: int) -> int:
        """Row index of ``month``; raises if it falls outside the series."""
        pos = int(month) - int(self.months[0])
        if pos < 0 or pos >= self.T:
            raise DataError(f"{self.unit_id}: month {month_label(month)} outside series range")
        return pos

    def truncate(self, last_month: int) -> PanelSeries:
        """The prefix ending at ``last_month`` (inclusive)."""
        stop = self.position(last_month) + 1
        return PanelSeries(self.unit_id, self.months[:stop], self.y[:stop], self.X[:stop], list(self.feature_names))

    def imputed(self) -> np.ndarray:
        return impute_matrix(self.X)


@dataclass
class WindowBatch:
    """An ``S x F`` standardised window ending at ``anchor_t``, with its targets."""

    anchor_t: int
    values: np.ndarray
    targets: np.ndarray
    available: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# ingestion


@dataclass(frozen=True)
class Schema:
    unit: str = "unit_id"
    month: str = "month"
    target: str = "target"
    features: tuple[str, ...] | None = None

    @classmethod
    def from_mapping(cls, mapping: Mapping | None) -> Schema:
        if not mapping:
            return cls()
        unknown = set(mapping) - {"unit", "month", "target", "features"}
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        feats = mapping.get("features")
        return cls(
            unit=mapping.get("unit", "unit_id"),
            month=mapping.get("month", "month"),
            target=mapping.get("target", "target"),
            features=None if feats is None else tuple(feats),
        )


def _parse_number(raw, what: str) -> float:
    if raw is None:
        return math.nan
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw)
    text = str(raw).strip()
    if text in MISSING_TOKENS:
        return math.nan
    try:
        return float(text)
    except ValueError as exc:
        raise DataError(f"non-numeric {what}: {raw!r}") from exc


def _read_records(path: Path, fmt: str) -> tuple[list[dict], list[str]]:
    if fmt == "csv":
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise DataError(f"{path}: empty file")
            return list(reader), list(reader.fieldnames)
    if fmt == "jsonl":
        records, columns = [], []
        with path.open() as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
                for key in rec:
                    if key not in columns:
                        columns.append(key)
                records.append(rec)
        return records, columns
    raise DataError(f"unknown panel format {fmt!r}")


def ingest_panel(path, schema: Schema | Mapping | None = None, fmt: str | None = None) -> list[PanelSeries]:
    """Read a long-format panel file into one :class:`PanelSeries` per unit.

    Gaps in a unit's months become rows with missing target and predictors.
    Units are returned sorted by ``unit_id``.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"panel file not found: {path}")
    if not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    if fmt is None:
        fmt = "jsonl" if path.suffix in (".jsonl", ".ndjson") else "csv"
    try:
        records, columns = _read_records(path, fmt)
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    for col in (schema.unit, schema.month, schema.target):
        if col not in columns:
            raise DataError(f"{path}: missing column {col!r}")
    if schema.features is not None:
        features = list(schema.features)
        missing = [c for c in features if c not in columns]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
    else:
        features = [c for c in columns if c not in (schema.unit, schema.month, schema.target)]

    by_unit: dict[str, dict[int, tuple[float, list[float]]]] = {}
    for rec in records:
        unit = str(rec[schema.unit])
        month = month_index(str(rec[schema.month]))
        rows = by_unit.setdefault(unit, {})
        if month in rows:
            raise DataError(f"duplicate row for unit {unit!r}, month {month_label(month)}")
        target = _parse_number(rec.get(schema.target), "target")
        feats = [_parse_number(rec.get(c), f"feature {c!r}") for c in features]
        rows[month] = (target, feats)

    panel = []
    for unit in sorted(by_unit):
        rows = by_unit[unit]
        first, last = min(rows), max(rows)
        months = np.arange(first, last + 1)
        y = np.full(len(months), np.nan)
        X = np.full((len(months), len(features)), np.nan)
        for month, (target, feats) in rows.items():
            y[month - first] = target
            X[month - first] = feats
        panel.append(PanelSeries(unit, months, y, X, list(features)))
    return panel


def write_panel_csv(panel: Iterable[PanelSeries], path) -> None:
    """Write ``panel`` in the canonical CSV schema (``NA`` for missing)."""
    panel = list(panel)
    features = panel[0].feature_names if panel else []
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def fmt(v: float) -> str:
        return "NA" if np.isnan(v) else repr(float(v))

    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit_id", "month", "target", *features])
        for series in panel:
            for i, month in enumerate(series.months):
                y = series.y[i]
                y_txt = "NA" if np.isnan(y) else str(int(y)) if float(y).is_integer() else repr(float(y))
                writer.writerow([series.unit_id, month_label(month), y_txt, *(fmt(v) for v in series.X[i])])


# ---------------------------------------------------------------------------
# imputation and standardisation


def impute_series(raw) -> np.ndarray:
    """Fill missing values: carry previous forward, then leading gaps backward, then 0."""
    col = np.array(raw, dtype=np.float64, copy=True)
    n = len(col)
    ok = np.isfinite(col)
    if not ok.any():
        return np.zeros(n)
    idx = np.where(ok, np.arange(n), -1)
    np.maximum.accumulate(idx, out=idx)
    has_prev = idx >= 0
    col[has_prev] = col[idx[has_prev]]
    col[~has_prev] = col[np.argmax(ok)]
    return col


def impute_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return impute_series(X)
    return np.column_stack([impute_series(X[:, j]) for j in range(X.shape[1])]) if X.shape[1] else X.copy()


def _stats(block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = block.mean(axis=0)
    std = np.sqrt(((block - mean) ** 2).mean(axis=0))
    return mean, np.maximum(std, SIGMA_FLOOR)


def anchor_stats(series: PanelSeries, t: int, j: int | None = None):
    """Mean and population std of imputed predictors over months <= ``t``.

    Imputation is run on the prefix only, so nothing after ``t`` can leak in.
    Returns scalars when ``j`` is given, else length-F arrays.
    """
    if t < series.months[0]:
        raise DataError(f"{series.unit_id}: anchor {month_label(t)} precedes first month")
    stop = min(int(t) - int(series.months[0]), series.T - 1) + 1
    prefix = impute_matrix(series.X[:stop])
    mean, std = _stats(prefix)
    if j is not None:
        return float(mean[j]), float(std[j])
    return mean, std


def full_series_stats(series: PanelSeries) -> tuple[np.ndarray, np.ndarray]:
    """Standardisation statistics over the whole series (used by ablations)."""
    return _stats(impute_matrix(series.X))


def _standardise(block: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    out = (block - mean) / std
    out[:, std <= SIGMA_FLOOR] = 0.0
    return out


def build_window(
    series: PanelSeries,
    t: int,
    S: int,
    H: int,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> WindowBatch:
    """The standardised ``S x F`` window ending at anchor month ``t``.

    ``stats`` overrides the per-anchor (mean, std); by default they come from
    months <= ``t`` only. Targets at ``t + h`` beyond the series, or missing,
    are flagged unavailable.
    """
    pos = series.position(t)
    if pos < S - 1:
        raise DataError(
            f"{series.unit_id}: anchor {month_label(t)} has {pos + 1} months of history, window needs {S}"
        )
    prefix = impute_matrix(series.X[: pos + 1])
    if stats is None:
        mean, std = _stats(prefix)
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    values = _standardise(prefix[pos - S + 1 :], mean, std)

    targets = np.zeros(H)
    available = np.zeros(H, dtype=bool)
    for h in range(1, H + 1):
        if pos + h < series.T and not np.isnan(series.y[pos + h]):
            targets[h - 1] = series.y[pos + h]
            available[h - 1] = True
    return WindowBatch(int(t), values, targets, available, mean, std)


def window_anchors(series: PanelSeries, S: int) -> np.ndarray:
    """All anchor months with a full window of history."""
    return series.months[S - 1 :].copy()
