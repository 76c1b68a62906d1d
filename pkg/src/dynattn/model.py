"""The gated, weight-tied attention network and its parameter bookkeeping."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .likelihoods import DistParams, check_family, link

GATE_EPS = 1e-4
GAMMA_INIT = 0.5413
CHECKPOINT_MAGIC = b"DYNATTN-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HyperConfig:
    F: int
    S: int = 48
    d: int = 256
    h: int = 128
    L: int = 2
    n_heads: int = 4
    H: int = 12
    en_lambda: float = 1e-3
    en_alpha: float = 0.5
    mse_lambda: float = 1.0
    wmse_alpha: float = 3.0
    family: str = "zinb"

    def __post_init__(self):
        if self.F < 1 or self.S < 1 or self.H < 1 or self.d < 1 or self.h < 1 or self.L < 0:
            raise ValueError(f"invalid dimensions in {self}")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.en_alpha <= 1.0:
            raise ValueError("en_alpha must lie in [0, 1]")
        if self.en_lambda < 0 or self.mse_lambda < 0 or self.wmse_alpha < 0:
            raise ValueError("loss weights must be non-negative")
        check_family(self.family)

    @classmethod
    def from_dict(cls, data: dict) -> HyperConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: HyperConfig) -> dict[str, tuple[int, ...]]:
    """Every trainable array, in checkpoint order."""
    F, d, h = cfg.F, cfg.d, cfg.h
    return {
        "gamma": (F,),
        "in_scale": (F,),
        "in_shift": (F,),
        "proj_w": (F, d),
        "proj_b": (d,),
        "cls": (d,),
        "ln1_g": (d,),
        "ln1_b": (d,),
        "qkv_w": (d, 3 * d),
        "qkv_b": (3 * d,),
        "out_w": (d, d),
        "out_b": (d,),
        "ln2_g": (d,),
        "ln2_b": (d,),
        "ffn_w1": (d, 4 * d),
        "ffn_b1": (4 * d,),
        "ffn_w2": (4 * d, d),
        "ffn_b2": (d,),
        "mu_w1": (d, h),
        "mu_b1": (h,),
        "mu_w2": (h,),
        "mu_b2": (1,),
        "pi_w1": (d, h),
        "pi_b1": (h,),
        "pi_w2": (h,),
        "pi_b2": (1,),
        "raw_theta": (1,),
    }


BLOCK_KEYS = ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "out_w", "out_b", "ln2_g", "ln2_b",
              "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")
PER_FEATURE_KEYS = ("gamma", "in_scale", "in_shift", "proj_w")


def count_parameters(F: int, d: int = 256, h: int = 128) -> int:
    """Closed-form trainable count; 259 F + 856,323 at d=256, h=128."""
    if min(F, d, h) < 1:
        raise ValueError("dimensions must be positive")
    return F + 2 * F + (F * d + d) + d + (12 * d * d + 13 * d) + 2 * (d * h + 2 * h + 1) + 1


class ModelState:
    """All trainable arrays for one unit's model plus its fixed configuration."""

    def __init__(self, config: HyperConfig, params: dict[str, np.ndarray]):
        shapes = parameter_shapes(config)
        if list(params) != list(shapes):
            missing = set(shapes) ^ set(params)
            if missing:
                raise ValueError(f"parameter set mismatch: {sorted(missing)}")
            params = {k: params[k] for k in shapes}
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            params[name] = arr
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: HyperConfig, seed: int = 0) -> ModelState:
        """Uniform fan-in init; gates start near one, CLS at zero, theta at one."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith("w") or name.endswith(("w1", "w2")):
                fan_in = shape[0]
                bound = 1.0 / math.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
            else:
                params[name] = np.zeros(shape)
        params["gamma"][:] = GAMMA_INIT
        params["in_scale"][:] = 1.0
        params["ln1_g"][:] = 1.0
        params["ln2_g"][:] = 1.0
        params["raw_theta"][:] = math.log(math.expm1(1.0))
        return cls(config, params)

    def copy(self) -> ModelState:
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_trainable(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def gates(self) -> np.ndarray:
        return gate_transform(self.params["gamma"]).data

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        """Write a self-describing binary checkpoint (JSON header + little-endian f8 payload)."""
        header = {
            "format": "dynattn-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "arrays": [[k, list(v.shape)] for k, v in self.params.items()],
            "dtype": "<f8",
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.params.values())
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            fh.write(payload)

    @classmethod
    def load(cls, path) -> ModelState:
        raw = Path(path).read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path}: not a dynattn checkpoint")
        off = len(CHECKPOINT_MAGIC)
        (n,) = struct.unpack("<Q", raw[off : off + 8])
        off += 8
        header = json.loads(raw[off : off + n])
        off += n
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        config = HyperConfig.from_dict(header["config"])
        params = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
        if off != len(raw):
            raise ValueError(f"{path}: trailing bytes in checkpoint")
        return cls(config, params)

    def watch(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.watch(v, name=k) for k, v in self.params.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.params.items()}


# ---------------------------------------------------------------------------
# building blocks


def gate_transform(gamma) -> Tensor:
    """g = max(softplus(gamma) - 1e-4, 0); exact zeros are reachable."""
    return ad.relu(ad.softplus(gamma) - GATE_EPS)


def elastic_net_penalty(g, lambda_en: float, alpha: float) -> Tensor:
    g = ad.as_tensor(g)
    return lambda_en * (alpha * ad.reduce_sum(ad.absolute(g)) + (1.0 - alpha) * ad.reduce_sum(ad.square(g)))


def sinusoidal_encoding(positions, d: int) -> np.ndarray:
    """sin on even channels, cos on odd, base 10000."""
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    channel = np.arange(d)
    rate = 1.0 / np.power(10000.0, (2 * (channel // 2)) / d)
    angle = pos * rate[None, :]
    return np.where(channel % 2 == 0, np.sin(angle), np.cos(angle))


def _attention_block(x: Tensor, p: dict[str, Tensor], n_heads: int) -> Tensor:
    B, N, d = x.shape
    dh = d // n_heads
    xn = ad.layer_norm(x) * p["ln1_g"] + p["ln1_b"]
    qkv = xn @ p["qkv_w"] + p["qkv_b"]

    def heads(part: int) -> Tensor:
        t = qkv[:, :, part * d : (part + 1) * d].reshape(B, N, n_heads, dh)
        return ad.transpose(t, (0, 2, 1, 3))

    q, k, v = heads(0), heads(1), heads(2)
    scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1) @ v
    merged = ad.transpose(attn, (0, 2, 1, 3)).reshape(B, N, d)
    x = x + (merged @ p["out_w"] + p["out_b"])

    xn = ad.layer_norm(x) * p["ln2_g"] + p["ln2_b"]
    hidden = ad.gelu(xn @ p["ffn_w1"] + p["ffn_b1"])
    return x + (hidden @ p["ffn_w2"] + p["ffn_b2"])


def _mlp(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return ad.gelu(x @ w1 + b1) @ w2 + b2


def effective_gates(p: dict[str, Tensor], gate_mask=None) -> Tensor:
    """Gates with optional forced zeros (``gate_mask`` 0 entries)."""
    g = gate_transform(p["gamma"])
    if gate_mask is not None:
        g = g * np.asarray(gate_mask, dtype=np.float64)
    return g


def encode(windows, p: dict[str, Tensor], cfg: HyperConfig, gate_mask=None) -> Tensor:
    """Pooled CLS representation for a batch of ``(B, S, F)`` windows -> ``(B, d)``."""
    x = ad.as_tensor(windows)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    B, S, F = x.shape
    if S != cfg.S or F != cfg.F:
        raise ValueError(f"window shape {(S, F)} does not match config {(cfg.S, cfg.F)}")
    g = effective_gates(p, gate_mask)
    z = x * g
    z = z * p["in_scale"] + p["in_shift"]
    tokens = z @ p["proj_w"] + p["proj_b"] + sinusoidal_encoding(np.arange(1, S + 1), cfg.d)
    cls = ad.broadcast_to(p["cls"], (B, 1, cfg.d))
    seq = ad.concat([cls, tokens], axis=1)
    for _ in range(cfg.L):
        seq = _attention_block(seq, p, cfg.n_heads)
    return seq[:, 0, :]


def horizon_states(h_t, H: int) -> Tensor:
    """``(B, d)`` pooled states -> ``(B, H, d)`` by adding a fixed horizon encoding."""
    h_t = ad.as_tensor(h_t)
    if h_t.ndim == 1:
        h_t = h_t.reshape(1, -1)
    d = h_t.shape[-1]
    enc = sinusoidal_encoding(np.arange(1, H + 1), d)
    return h_t.reshape(h_t.shape[0], 1, d) + enc


def heads_forward(states, p: dict[str, Tensor], family: str) -> DistParams:
    """Distribution parameters for every horizon state; theta is shared."""
    states = ad.as_tensor(states)
    raw_mu = _mlp(states, p["mu_w1"], p["mu_b1"], p["mu_w2"], p["mu_b2"])
    raw_aux = _mlp(states, p["pi_w1"], p["pi_b1"], p["pi_w2"], p["pi_b2"])
    return link(family, raw_mu, raw_aux, p["raw_theta"][0])


def forward(windows, p: dict[str, Tensor], cfg: HyperConfig, gate_mask=None) -> DistParams:
    """Windows ``(B, S, F)`` -> per-(window, horizon) parameters of shape ``(B, H)``."""
    return heads_forward(horizon_states(encode(windows, p, cfg, gate_mask), cfg.H), p, cfg.family)


def predict(state: ModelState, windows, gate_mask=None) -> DistParams:
    """Inference forward pass returning numpy parameters."""
    return forward(np.asarray(windows, dtype=np.float64), state.constants(), state.config, gate_mask).numpy()
