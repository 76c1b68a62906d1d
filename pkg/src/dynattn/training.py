"""Composite loss, rolling per-unit optimisation and direct multi-horizon forecasts."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import DataError, PanelSeries, build_window, window_anchors
from .likelihoods import DistParams, exceedance, expected_count, log_prob
from .model import HyperConfig, ModelState, effective_gates, elastic_net_penalty, forward


@dataclass(frozen=True)
class TrainConfig:
    anchors: tuple[int, ...] | None = None
    K_cap: int | None = None
    steps_per_anchor: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.anchors is not None:
            object.__setattr__(self, "anchors", tuple(int(a) for a in self.anchors))
            if any(b <= a for a, b in zip(self.anchors, self.anchors[1:])):
                raise ValueError("training anchors must be strictly increasing")
        if self.steps_per_anchor < 1:
            raise ValueError("steps_per_anchor must be >= 1")
        if self.K_cap is not None and self.K_cap < 1:
            raise ValueError("K_cap must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["anchors"] is not None:
            out["anchors"] = list(out["anchors"])
        return out


@dataclass
class FitResult:
    state: ModelState
    anchors: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# loss


def wmse_weights(y, alpha_wmse: float) -> np.ndarray:
    """1 for zero counts, ``1 + alpha_wmse`` for positive ones."""
    return 1.0 + alpha_wmse * (np.asarray(y, dtype=np.float64) > 0)


def loss_terms(params: DistParams, targets, mask, gates, cfg: HyperConfig) -> dict[str, Tensor]:
    """The three loss components, unweighted by ``mse_lambda``.

    ``nll`` and ``wmse`` average over the available (anchor, horizon) pairs
    in ``mask``; ``penalty`` already includes ``en_lambda``.
    """
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("composite loss needs at least one available target")
    y = np.where(mask, targets, 0.0)
    weight = mask / n

    nll = -ad.reduce_sum(ad.as_tensor(log_prob(params, y)) * weight)
    yhat = ad.clip(ad.as_tensor(expected_count(params)), lo=0.0)
    resid = ad.log1p(yhat) - np.log1p(y)
    wmse = ad.reduce_sum(ad.square(resid) * (wmse_weights(y, cfg.wmse_alpha) * weight))
    penalty = elastic_net_penalty(gates, cfg.en_lambda, cfg.en_alpha)
    return {"nll": nll, "wmse": wmse, "penalty": penalty}


def composite_loss(params: DistParams, targets, mask, gates, cfg: HyperConfig) -> Tensor:
    """Mean NLL + ``mse_lambda`` * weighted log1p MSE + elastic-net gate penalty."""
    t = loss_terms(params, targets, mask, gates, cfg)
    return t["nll"] + cfg.mse_lambda * t["wmse"] + t["penalty"]


def loss_and_grads(state: ModelState, windows, targets, mask) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    p = state.watch(tape)
    params = forward(windows, p, state.config)
    loss = composite_loss(params, targets, mask, effective_gates(p), state.config)
    grads = tape.backward(loss)
    return float(loss.data), {name: grads[t] for name, t in p.items()}


def loss_value(state: ModelState, windows, targets, mask) -> float:
    p = state.constants()
    params = forward(windows, p, state.config)
    return float(composite_loss(params, targets, mask, effective_gates(p), state.config).data)


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adaptive moment estimation with decoupled weight decay and global norm clipping.

    Moments persist across calls, so one instance carries optimiser state
    from one rolling anchor to the next. Parameters named in ``no_decay``
    (the gate logits, which the elastic net already regularises) are not
    decayed.
    """

    def __init__(
        self,
        lr=1e-3,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        clip_norm: float | None = 10.0,
        weight_decay: float = 0.0,
        no_decay=("gamma",),
    ):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.no_decay = frozenset(no_decay)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            g = g * scale
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and name not in self.no_decay:
                params[name] *= 1.0 - self.lr * self.weight_decay
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


# ---------------------------------------------------------------------------
# rolling fit


def build_windows(series: PanelSeries, S: int, H: int, anchors=None) -> dict[str, np.ndarray]:
    """Stacked per-anchor windows: values (N, S, F), targets/available (N, H), anchors (N,)."""
    if anchors is None:
        anchors = window_anchors(series, S)
    batches = [build_window(series, int(t), S, H) for t in anchors]
    if not batches:
        return {
            "anchors": np.zeros(0, dtype=np.int64),
            "values": np.zeros((0, S, series.F)),
            "targets": np.zeros((0, H)),
            "available": np.zeros((0, H), dtype=bool),
        }
    return {
        "anchors": np.array([b.anchor_t for b in batches], dtype=np.int64),
        "values": np.stack([b.values for b in batches]),
        "targets": np.stack([b.targets for b in batches]),
        "available": np.stack([b.available for b in batches]),
    }


def default_train_anchors(series: PanelSeries, S: int, cutoff: int | None = None) -> list[int]:
    """Rolling anchors from the first month with an observable target up to ``cutoff``."""
    if series.T < S + 1:
        return []
    last = int(series.months[-1]) if cutoff is None else int(cutoff)
    first = int(series.months[S - 1]) + 1
    return list(range(first, last + 1))


def training_set(windows: dict[str, np.ndarray], anchor: int, H: int, K_cap: int | None):
    """Windows usable at rolling anchor ``anchor``: targets observed no later than it."""
    horizons = np.arange(1, H + 1)
    ok = windows["anchors"] <= anchor
    mask = windows["available"] & (windows["anchors"][:, None] + horizons[None, :] <= anchor)
    mask &= ok[:, None]
    idx = np.flatnonzero(mask.any(axis=1))
    if K_cap is not None:
        idx = idx[-K_cap:]
    return idx, mask[idx]


def rolling_fit(series: PanelSeries, state: ModelState, config: TrainConfig, optimizer: Adam | None = None) -> FitResult:
    """Train over monthly anchors in order, carrying optimiser moments forward.

    At anchor ``a`` the batch is every window anchored at or before ``a``
    (most recent ``K_cap`` if set), with targets after ``a`` masked out.
    """
    cfg = state.config
    state = state.copy()
    anchors = list(config.anchors) if config.anchors is not None else default_train_anchors(series, cfg.S)
    if not anchors:
        raise DataError(f"{series.unit_id}: no valid training anchors")
    window_months = [m for m in window_anchors(series, cfg.S) if m <= anchors[-1]]
    windows = build_windows(series, cfg.S, cfg.H, window_months)
    opt = optimizer or Adam(
        config.learning_rate, config.beta1, config.beta2, config.eps, config.clip_norm, config.weight_decay
    )

    result = FitResult(state)
    for a in anchors:
        idx, mask = training_set(windows, a, cfg.H, config.K_cap)
        if len(idx) == 0:
            continue
        x, y = windows["values"][idx], windows["targets"][idx]
        start = time.perf_counter()
        loss = math.nan
        for _ in range(config.steps_per_anchor):
            loss, grads = loss_and_grads(state, x, y, mask)
            opt.step(state.params, grads)
        result.anchors.append(int(a))
        result.losses.append(loss)
        result.wall_clock.append(time.perf_counter() - start)
    if not result.anchors:
        raise DataError(f"{series.unit_id}: no anchor had an observable target")
    return result


def _fit_job(args):
    series, state, config = args
    return rolling_fit(series, state, config)


def fit_panel(jobs: list[tuple[PanelSeries, ModelState, TrainConfig]], workers: int = 1) -> list[FitResult]:
    """Independent per-unit fits; results come back in job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_fit_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fit_job, jobs))


# ---------------------------------------------------------------------------
# forecasting


@dataclass
class Forecast:
    anchor_t: int
    yhat: np.ndarray
    exceedance: dict[float, np.ndarray]
    params: DistParams


def forecast(
    series: PanelSeries,
    state: ModelState,
    anchor_t: int,
    taus=(25,),
    gate_mask=None,
    pi_override: float | None = None,
) -> Forecast:
    """All H horizons from one forward pass at ``anchor_t``."""
    return forecast_many(series, state, [anchor_t], taus, gate_mask, pi_override)[0]


def forecast_many(series, state: ModelState, anchors, taus=(25,), gate_mask=None, pi_override=None) -> list[Forecast]:
    cfg = state.config
    values = np.stack([build_window(series, int(t), cfg.S, cfg.H).values for t in anchors])
    params = forward(values, state.constants(), cfg, gate_mask).numpy()
    if pi_override is not None:
        if params.family != "zinb":
            raise ValueError("pi_override only applies to the zinb family")
        params.pi = np.full_like(params.mu, float(pi_override))
    yhat = np.maximum(expected_count(params), 0.0)
    probs = {float(tau): np.asarray(exceedance(params, tau)) for tau in taus}
    out = []
    for i, t in enumerate(anchors):
        p_i = DistParams(
            params.family,
            params.mu[i],
            None if params.pi is None else params.pi[i],
            params.theta,
            None if params.sd is None else params.sd[i],
        )
        out.append(Forecast(int(t), yhat[i], {k: v[i] for k, v in probs.items()}, p_i))
    return out
