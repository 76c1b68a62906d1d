import math

import numpy as np
import pytest
from scipy import special

from dynattn.data import PanelSeries
from dynattn.model import HyperConfig, ModelState

TINY = dict(F=3, S=4, d=8, h=4, L=1, n_heads=2, H=2)


def tiny_config(**overrides) -> HyperConfig:
    return HyperConfig(**{**TINY, **overrides})


def jittered_state(cfg: HyperConfig, seed: int = 0, scale: float = 0.1) -> ModelState:
    """Initialised state with every array perturbed, so no parameter sits at a symmetric point."""
    state = ModelState.initialize(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for k, v in state.params.items():
        state.params[k] = v + scale * rng.standard_normal(v.shape)
    return state


def random_series(T=30, F=3, seed=0, unit="u0", start=2000 * 12 + 1, missing=0.0) -> PanelSeries:
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((T, F))
    if missing:
        X[rng.random(X.shape) < missing] = np.nan
    y = rng.poisson(2.0, T).astype(float)
    return PanelSeries(unit, np.arange(start, start + T), y, X, [f"f{j}" for j in range(F)])


# ---------------------------------------------------------------------------
# plain numpy reference forward, written independently of dynattn.autodiff


def _softplus(x):
    return np.logaddexp(0.0, x)


def _gelu(x):
    return x * 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))


def _ln(x, g, b, eps=1e-5):
    m = x.mean(-1, keepdims=True)
    v = ((x - m) ** 2).mean(-1, keepdims=True)
    return (x - m) / np.sqrt(v + eps) * g + b


def _pe(n, d):
    out = np.zeros((n, d))
    for pos in range(1, n + 1):
        for c in range(d):
            angle = pos / 10000.0 ** (2 * (c // 2) / d)
            out[pos - 1, c] = math.sin(angle) if c % 2 == 0 else math.cos(angle)
    return out


def reference_forward(state: ModelState, window: np.ndarray, gates=None):
    """One window (S, F) -> (mu, pi, theta) arrays over horizons, via explicit loops."""
    cfg, p = state.config, state.params
    g = np.maximum(_softplus(p["gamma"]) - 1e-4, 0.0) if gates is None else np.asarray(gates)
    z = window * g * p["in_scale"] + p["in_shift"]
    tokens = z @ p["proj_w"] + p["proj_b"] + _pe(cfg.S, cfg.d)
    x = np.vstack([p["cls"][None, :], tokens])
    dh = cfg.d // cfg.n_heads
    for _ in range(cfg.L):
        xn = _ln(x, p["ln1_g"], p["ln1_b"])
        qkv = xn @ p["qkv_w"] + p["qkv_b"]
        q, k, v = qkv[:, : cfg.d], qkv[:, cfg.d : 2 * cfg.d], qkv[:, 2 * cfg.d :]
        heads = []
        for hh in range(cfg.n_heads):
            sl = slice(hh * dh, (hh + 1) * dh)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            s = np.exp(s - s.max(-1, keepdims=True))
            s /= s.sum(-1, keepdims=True)
            heads.append(s @ v[:, sl])
        x = x + np.hstack(heads) @ p["out_w"] + p["out_b"]
        xn = _ln(x, p["ln2_g"], p["ln2_b"])
        x = x + _gelu(xn @ p["ffn_w1"] + p["ffn_b1"]) @ p["ffn_w2"] + p["ffn_b2"]
    h_t = x[0]
    mus, pis = [], []
    for h in range(1, cfg.H + 1):
        s = h_t + _pe(h, cfg.d)[h - 1]
        mus.append(_softplus(_gelu(s @ p["mu_w1"] + p["mu_b1"]) @ p["mu_w2"] + p["mu_b2"][0]))
        pis.append(special.expit(_gelu(s @ p["pi_w1"] + p["pi_b1"]) @ p["pi_w2"] + p["pi_b2"][0]))
    return np.array(mus), np.array(pis), float(_softplus(p["raw_theta"][0]))


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_state(tiny_cfg):
    return jittered_state(tiny_cfg)


def gradient_violations(state: ModelState, windows, targets, mask, eps=1e-6, rtol=1e-4, atol=1e-8):
    """Entries where the tape gradient and a central difference disagree beyond ``atol + rtol*|fd|``."""
    from dynattn.training import loss_and_grads, loss_value

    _, grads = loss_and_grads(state, windows, targets, mask)
    bad = []
    checked = 0
    for name, arr in state.params.items():
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = loss_value(state, windows, targets, mask)
            arr[idx] = orig - eps
            down = loss_value(state, windows, targets, mask)
            arr[idx] = orig
            fd = (up - down) / (2 * eps)
            checked += 1
            if abs(grads[name][idx] - fd) > atol + rtol * abs(fd):
                bad.append((name, idx, float(grads[name][idx]), fd))
    return bad, checked


def tiny_batch(cfg: HyperConfig, seed: int = 0, B: int = 3):
    rng = np.random.default_rng(seed)
    windows = rng.standard_normal((B, cfg.S, cfg.F))
    targets = rng.poisson(2.0, (B, cfg.H)).astype(float)
    targets[0, 0] = 0.0
    mask = np.ones((B, cfg.H), dtype=bool)
    mask[-1, -1] = False
    return windows, targets, mask


# ---------------------------------------------------------------------------
# acceptance report lines, echoed in the terminal summary

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
