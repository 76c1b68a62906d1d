"""Observation models: links, log-probabilities, means and exceedance.

Every log-probability is built from :mod:`dynattn.autodiff` primitives, so
it differentiates when its inputs are watched tensors and evaluates plainly
on numpy arrays otherwise. The NB component uses the mean/dispersion form
with ``Var = mu + mu**2 / theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor

FAMILIES = ("zinb", "nb", "poisson", "gaussian")

PI_CLAMP = 1e-7
POS_FLOOR = 1e-8
SUMMATION_MAX_TAU = 1000


class LikelihoodError(ValueError):
    """Parameters or observations outside a family's domain."""


def check_family(family: str) -> str:
    if family not in FAMILIES:
        raise LikelihoodError(f"unknown likelihood family {family!r}; expected one of {FAMILIES}")
    return family


@dataclass
class DistParams:
    """Per-(anchor, horizon) distribution parameters.

    ``mu`` is the NB/Poisson mean or the Gaussian location; ``pi`` the
    structural-zero probability (zinb); ``theta`` the global dispersion
    (zinb, nb); ``sd`` the Gaussian scale. Fields hold numpy arrays or
    autodiff tensors.
    """

    family: str
    mu: object
    pi: object = None
    theta: object = None
    sd: object = None

    def numpy(self) -> DistParams:
        def low(v):
            return v.data if isinstance(v, Tensor) else v

        return DistParams(self.family, low(self.mu), low(self.pi), low(self.theta), low(self.sd))


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _out(value: Tensor, keep_tensor: bool):
    if keep_tensor:
        return value
    data = value.data
    return float(data) if data.ndim == 0 else data


def link(family: str, raw_mu, raw_aux, raw_theta) -> DistParams:
    """Map unconstrained head outputs onto valid distribution parameters."""
    check_family(family)
    if family == "gaussian":
        return DistParams(family, ad.as_tensor(raw_mu), sd=ad.softplus(raw_aux))
    mu = ad.softplus(raw_mu)
    if family == "poisson":
        return DistParams(family, mu)
    theta = ad.softplus(raw_theta)
    if family == "nb":
        return DistParams(family, mu, theta=theta)
    return DistParams(family, mu, pi=ad.sigmoid(raw_aux), theta=theta)


# ---------------------------------------------------------------------------
# log probabilities


def _check_counts(y) -> np.ndarray:
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise LikelihoodError("counts must be non-negative integers")
    return y


def _nb_logpmf(y: np.ndarray, mu: Tensor, theta: Tensor) -> Tensor:
    mu = ad.clip(mu, lo=POS_FLOOR)
    theta = ad.clip(theta, lo=POS_FLOOR)
    log_total = ad.log(theta + mu)
    norm = ad.lgamma(theta + y) - ad.lgamma(theta) - special.gammaln(y + 1.0)
    return norm + theta * (ad.log(theta) - log_total) + y * (ad.log(mu) - log_total)


def nb_log_pmf(y, mu, theta):
    """log Pr_NB(y; mu, theta). ``mu == 0`` is a point mass at zero."""
    yv = _check_counts(y)
    theta_v = theta.data if isinstance(theta, Tensor) else np.asarray(theta, dtype=np.float64)
    if np.any(theta_v <= 0):
        raise LikelihoodError("theta must be positive")
    keep = _any_tensor(mu, theta)
    out = _nb_logpmf(yv, ad.as_tensor(mu), ad.as_tensor(theta))
    if keep:
        return out
    mu_v = np.asarray(mu, dtype=np.float64)
    if np.any(mu_v < 0):
        raise LikelihoodError("mu must be non-negative")
    value = np.where(mu_v == 0, np.where(yv == 0, 0.0, -np.inf), out.data)
    return float(value) if value.ndim == 0 else value


def _zinb_logpmf(y: np.ndarray, mu: Tensor, theta: Tensor, pi: Tensor) -> Tensor:
    pi = ad.clip(pi, PI_CLAMP, 1.0 - PI_CLAMP)
    log_pi = ad.log(pi)
    log_keep = ad.log1p(-pi)
    nb = _nb_logpmf(y, mu, theta)
    zero_branch = ad.logaddexp(log_pi, log_keep + nb)
    return ad.where(y == 0, zero_branch, log_keep + nb)


def zinb_log_pmf(y, mu, theta, pi):
    """Zero-inflated NB: inflation mixes only into the zero count."""
    yv = _check_counts(y)
    pi_v = pi.data if isinstance(pi, Tensor) else np.asarray(pi, dtype=np.float64)
    theta_v = theta.data if isinstance(theta, Tensor) else np.asarray(theta, dtype=np.float64)
    if np.any(theta_v <= 0):
        raise LikelihoodError("theta must be positive")
    if np.any(pi_v < 0) or np.any(pi_v > 1):
        raise LikelihoodError("pi must lie in [0, 1]")
    keep = _any_tensor(mu, theta, pi)
    out = _zinb_logpmf(yv, ad.as_tensor(mu), ad.as_tensor(theta), ad.as_tensor(pi))
    return _out(out, keep)


def poisson_log_pmf(y, lam):
    yv = _check_counts(y)
    keep = _any_tensor(lam)
    lam_t = ad.as_tensor(lam)
    if np.any(lam_t.data < 0):
        raise LikelihoodError("lambda must be non-negative")
    out = yv * ad.log(ad.clip(lam_t, lo=POS_FLOOR)) - lam_t - special.gammaln(yv + 1.0)
    return _out(out, keep)


def gaussian_log_pdf(y, mean, sd):
    keep = _any_tensor(mean, sd)
    sd_t = ad.as_tensor(sd)
    if np.any(sd_t.data <= 0):
        raise LikelihoodError("sd must be positive")
    yv = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    z = (yv - ad.as_tensor(mean)) / sd_t
    out = -0.5 * (z * z) - ad.log(sd_t) - 0.5 * math.log(2.0 * math.pi)
    return _out(out, keep)


def log_prob(params: DistParams, y):
    """Log-probability of ``y`` under ``params`` for any supported family."""
    fam = check_family(params.family)
    if fam == "zinb":
        return zinb_log_pmf(y, params.mu, params.theta, params.pi)
    if fam == "nb":
        return nb_log_pmf(y, params.mu, params.theta)
    if fam == "poisson":
        return poisson_log_pmf(y, params.mu)
    return gaussian_log_pdf(y, params.mu, params.sd)


def expected_count(params: DistParams):
    """Mean of the observation model: ``(1 - pi) * mu`` for ZINB."""
    fam = check_family(params.family)
    keep = _any_tensor(params.mu, params.pi)
    if fam == "zinb":
        out = (1.0 - ad.as_tensor(params.pi)) * ad.as_tensor(params.mu)
    else:
        out = ad.as_tensor(params.mu) * 1.0
    return _out(out, keep)


# ---------------------------------------------------------------------------
# survival and exceedance (numpy only)


def _validate_nb(tau: int, mu, theta) -> tuple[np.ndarray, np.ndarray]:
    if tau < 0 or int(tau) != tau:
        raise LikelihoodError("tau must be a non-negative integer")
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(~np.isfinite(mu)) or np.any(mu < 0):
        raise LikelihoodError("mu must be finite and non-negative")
    if np.any(~np.isfinite(theta)) or np.any(theta <= 0):
        raise LikelihoodError("theta must be finite and positive")
    return mu, theta


def nb_survival_sum(tau: int, mu, theta):
    """P(Y >= tau) as one minus the log-space sum of the first ``tau`` masses."""
    mu, theta = _validate_nb(tau, mu, theta)
    mu_b, theta_b = np.broadcast_arrays(mu, theta)
    if tau == 0:
        out = np.ones(mu_b.shape)
    else:
        ys = np.arange(tau, dtype=np.float64)
        logp = _nb_logpmf(ys, ad.as_tensor(mu_b[..., None]), ad.as_tensor(theta_b[..., None])).data
        log_cdf = special.logsumexp(logp, axis=-1)
        out = -np.expm1(np.minimum(log_cdf, 0.0))
        out = np.where(mu_b == 0, 0.0, out)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def nb_survival_beta(tau: int, mu, theta):
    """P(Y >= tau) through the regularised incomplete beta ``I_{mu/(mu+theta)}(tau, theta)``."""
    mu, theta = _validate_nb(tau, mu, theta)
    if tau == 0:
        out = np.ones(np.broadcast(mu, theta).shape)
    else:
        out = special.betainc(float(tau), theta, mu / (mu + theta))
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def nb_survival(tau: int, mu, theta):
    """P(Y >= tau) for NB(mu, theta); summation up to tau=1000, beta route beyond."""
    if tau <= SUMMATION_MAX_TAU:
        return nb_survival_sum(tau, mu, theta)
    return nb_survival_beta(tau, mu, theta)


def poisson_survival(tau: int, lam):
    if tau < 0 or int(tau) != tau:
        raise LikelihoodError("tau must be a non-negative integer")
    lam = np.asarray(lam, dtype=np.float64)
    out = np.ones(lam.shape) if tau == 0 else special.gammainc(float(tau), lam)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def exceedance(params: DistParams, tau: float):
    """P(Y >= tau) under ``params``; tau = 0 gives 1 for count families."""
    p = params.numpy()
    fam = check_family(p.family)
    if fam == "gaussian":
        out = special.ndtr((np.asarray(p.mu) - tau) / np.asarray(p.sd))
        return float(out) if np.ndim(out) == 0 else out
    if tau <= 0:
        out = np.ones(np.shape(p.mu))
        return float(out) if out.ndim == 0 else out
    tau = int(math.ceil(tau))
    if fam == "poisson":
        return poisson_survival(tau, p.mu)
    sf = nb_survival(tau, p.mu, p.theta)
    if fam == "nb":
        return sf
    out = (1.0 - np.asarray(p.pi, dtype=np.float64)) * sf
    return float(out) if np.ndim(out) == 0 else out


def sample(params: DistParams, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw observations (NB as a gamma-Poisson mixture)."""
    p = params.numpy()
    fam = check_family(p.family)
    if fam == "gaussian":
        return rng.normal(p.mu, p.sd, size=size)
    if fam == "poisson":
        return rng.poisson(p.mu, size=size).astype(np.float64)
    mu = np.asarray(p.mu, dtype=np.float64)
    theta = np.asarray(p.theta, dtype=np.float64)
    rate = rng.gamma(theta, mu / theta, size=size)
    y = rng.poisson(rate).astype(np.float64)
    if fam == "zinb":
        zero = rng.random(size=y.shape) < np.asarray(p.pi)
        y = np.where(zero, 0.0, y)
    return y
