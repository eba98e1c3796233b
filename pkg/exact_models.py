"""
Closed-form loss distributions for the solvable Jungle instances

binomial: no couplings
pair contagion: a single coupled pair (1, 2)
Dandelion: one hub coupled to every peripheral node, pmf over the peripheral count
Diamond: homogeneous all-pairs coupling, summed over degenerate states of equal l
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logsumexp

from core import (
    JungleParams,
    LossPmf,
    log_binomial_row,
    sigmoid,
    softplus,
)
from errors import DomainError

logger = logging.getLogger(__name__)


class DandelionParams(BaseModel):
    """Hub field alpha0, peripheral field alpha, hub-spoke coupling beta over n peripheral nodes"""
    model_config = ConfigDict(frozen=True)

    n: int = Field(..., ge=1)
    alpha0: float = Field(..., allow_inf_nan=False)
    alpha: float = Field(..., allow_inf_nan=False)
    beta: float = Field(..., allow_inf_nan=False)

    def to_jungle(self) -> JungleParams:
        """Node 0 is the hub, nodes 1..n the periphery"""
        return JungleParams(
            alpha=[self.alpha0] + [self.alpha] * self.n,
            beta={(0, i): self.beta for i in range(1, self.n + 1)},
        )


class DiamondParams(BaseModel):
    """Homogeneous field alpha and all-pairs coupling beta over n nodes"""
    model_config = ConfigDict(frozen=True)

    n: int = Field(..., ge=2)
    alpha: float = Field(..., allow_inf_nan=False)
    beta: float = Field(..., allow_inf_nan=False)

    def to_jungle(self) -> JungleParams:
        return JungleParams(
            alpha=[self.alpha] * self.n,
            beta={(i, j): self.beta for i in range(self.n) for j in range(i + 1, self.n)},
        )


@dataclass(frozen=True)
class PairContagionSolution:
    pmf: LossPmf
    p1: float
    q12: float
    rho12: float


@dataclass(frozen=True)
class DandelionMoments:
    p0: float
    p: float
    q: float
    rho: float
    log_z: float


@dataclass(frozen=True)
class DiamondMoments:
    """p, q, rho plus the covariance of the sufficient statistics (l, l(l-1)/2)"""
    p: float
    q: float
    rho: float
    mean_l: float
    var_l: float
    covariance: np.ndarray
    log_z: float


def alpha_to_p(alpha: float) -> float:
    """p = 1 / (1 + e^-alpha)"""
    return float(sigmoid(alpha))


def p_to_alpha(p: float) -> float:
    """alpha = ln(p / (1 - p))"""
    _check_probability(p)
    return math.log(p) - math.log1p(-p)


def _check_probability(p: float, name: str = "p"):
    if not (np.isfinite(p) and 0.0 < p < 1.0):
        raise DomainError(f"{name} must lie strictly inside (0, 1) (got {p})")


def _binomial_log_weights(n: int, alpha: float) -> np.ndarray:
    """Unnormalised log weights lnC(n,l) + alpha*l (n may be 0)"""
    ell = np.arange(n + 1, dtype=float)
    return log_binomial_row(n) + alpha * ell


def _log_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Log-space convolution of two log-mass vectors"""
    out = np.full(a.size + b.size - 1, -np.inf)
    for k, log_bk in enumerate(b):
        if np.isfinite(log_bk):
            out[k:k + a.size] = np.logaddexp(out[k:k + a.size], a + log_bk)
    return out


def binomial_pmf(n: int, p: float) -> LossPmf:
    """C(n,l) p^l (1-p)^(n-l)"""
    if n < 1:
        raise DomainError(f"binomial_pmf needs n >= 1 (got {n})")
    _check_probability(p)
    ell = np.arange(n + 1, dtype=float)
    log_mass = log_binomial_row(n) + ell * math.log(p) + (n - ell) * math.log1p(-p)
    return LossPmf.from_log_weights(log_mass)


def pair_contagion_pmf(n: int, alpha: float, beta: float) -> PairContagionSolution:
    """Exact pmf for n nodes sharing alpha with one coupled pair (nodes 1 and 2)"""
    if n < 2:
        raise DomainError(f"pair_contagion_pmf needs n >= 2 (got {n})")

    # pair states summed by pair default count 0, 1, 2
    pair_log = np.array([0.0, math.log(2.0) + alpha, 2.0 * alpha + beta])
    rest_log = _binomial_log_weights(n - 2, alpha)
    pmf = LossPmf.from_log_weights(_log_convolve(rest_log, pair_log))

    log_den = logsumexp(pair_log)
    p1 = math.exp(logsumexp([alpha, 2.0 * alpha + beta]) - log_den)
    q12 = math.exp(2.0 * alpha + beta - log_den)
    rho12 = (q12 - p1 * p1) / (p1 * (1.0 - p1))
    return PairContagionSolution(pmf=pmf, p1=p1, q12=q12, rho12=rho12)


def _dandelion_log_weights(params: DandelionParams) -> np.ndarray:
    ell = np.arange(params.n + 1, dtype=float)
    return log_binomial_row(params.n) + np.logaddexp(
        params.alpha * ell, params.alpha0 + ell * (params.alpha + params.beta)
    )


def dandelion_pmf(params: DandelionParams) -> LossPmf:
    """Pmf of the peripheral default count, hub marginalised out"""
    return LossPmf.from_log_weights(_dandelion_log_weights(params))


def dandelion_log_z(params: DandelionParams) -> float:
    """ln[(1+e^a)^N + e^a0 (1+e^(a+b))^N]"""
    n, a, a0, b = params.n, params.alpha, params.alpha0, params.beta
    return float(np.logaddexp(n * softplus(a), a0 + n * softplus(a + b)))


def dandelion_moments(params: DandelionParams) -> DandelionMoments:
    """Hub probability p0, peripheral p, hub-spoke q and rho from the log-partition derivatives"""
    n, a, a0, b = params.n, params.alpha, params.alpha0, params.beta
    log_z = dandelion_log_z(params)

    p0 = float(sigmoid(a0 + n * (softplus(a + b) - softplus(a))))
    hub_share = math.exp(a0 + (n - 1) * softplus(a + b) - log_z)
    p = float(sigmoid(a)) * (1.0 + math.expm1(b) * hub_share)
    q = p0 * float(sigmoid(a + b))
    rho = (q - p * p0) / math.sqrt(p * (1.0 - p) * p0 * (1.0 - p0))
    return DandelionMoments(p0=p0, p=p, q=q, rho=rho, log_z=log_z)


def _diamond_log_weights(n: int, alpha, beta) -> np.ndarray:
    """Log weights lnC(n,l) + (alpha - beta/2) l + (beta/2) l^2; broadcasts over alpha/beta arrays"""
    ell = np.arange(n + 1, dtype=float)
    alpha = np.asarray(alpha, dtype=float)[..., None]
    beta = np.asarray(beta, dtype=float)[..., None]
    return log_binomial_row(n) + (alpha - 0.5 * beta) * ell + 0.5 * beta * ell * ell


def diamond_pmf(params: DiamondParams) -> LossPmf:
    """Pmf of l summed over the degenerate states of each default count"""
    return LossPmf.from_log_weights(_diamond_log_weights(params.n, params.alpha, params.beta))


def diamond_moment_arrays(n: int, alpha, beta) -> Dict[str, np.ndarray]:
    """Vectorised Diamond forward map over arrays of (alpha, beta)"""
    log_w = _diamond_log_weights(n, alpha, beta)
    log_z = np.asarray(logsumexp(log_w, axis=-1))
    mass = np.exp(log_w - log_z[..., None])
    mass /= mass.sum(axis=-1, keepdims=True)

    ell = np.arange(n + 1, dtype=float)
    pairs = 0.5 * ell * (ell - 1.0)
    mean_l = np.asarray(mass @ ell)
    mean_s = np.asarray(mass @ pairs)
    d_l = ell - mean_l[..., None]
    d_s = pairs - mean_s[..., None]
    var_l = np.sum(mass * d_l * d_l, axis=-1)
    cov_ls = np.sum(mass * d_l * d_s, axis=-1)
    var_s = np.sum(mass * d_s * d_s, axis=-1)

    p = mean_l / n
    # 1 - p summed directly so it stays accurate when p is close to 1
    p_bar = (mass @ (n - ell)) / n
    q = 2.0 * mean_s / (n * (n - 1.0))
    binary_var = p * p_bar
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = np.where(binary_var > 1e-300,
                       (var_l - n * binary_var) / (n * (n - 1.0) * binary_var), 0.0)
    return {
        "p": p, "q": q, "rho": rho, "mean_l": mean_l, "var_l": var_l,
        "cov_ls": cov_ls, "var_s": var_s, "log_z": log_z,
    }


def diamond_moments(params: DiamondParams) -> DiamondMoments:
    stats = diamond_moment_arrays(params.n, params.alpha, params.beta)
    covariance = np.array([[stats["var_l"], stats["cov_ls"]], [stats["cov_ls"], stats["var_s"]]], dtype=float)
    return DiamondMoments(
        p=float(stats["p"]),
        q=float(stats["q"]),
        rho=float(stats["rho"]),
        mean_l=float(stats["mean_l"]),
        var_l=float(stats["var_l"]),
        covariance=covariance,
        log_z=float(stats["log_z"]),
    )


def moments_from_pmf(pmf: LossPmf) -> Tuple[float, float]:
    """(E[l]/n, Var(l))"""
    return pmf.mean() / pmf.n, pmf.variance()
