"""
Heat-bath Gibbs sampling, full-state enumeration and monetary losses

Sweep order is fixed: sites 0, 1, ..., n-1. Each chain advances a batch of
independent walkers in lockstep, and chains run on the shared worker pool.
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, logsumexp

from config import Config
from core import (
    BorrowerSpecificRecovery,
    CentralNodeRecovery,
    ConstantRecovery,
    JungleParams,
    LinearInAggregateRecovery,
    LossPmf,
    PortfolioSpec,
)
from errors import ConfigurationError, DomainError, EnumerationLimitError
from parallel import run_ordered
from utils import total_variation

logger = logging.getLogger(__name__)

ENUMERATION_CHUNK = 1 << 16
KERNEL_MAX_NODES = 10
CHAIN_TV_WARNING = 0.05


class McmcConfig(BaseModel):
    """Chains x walkers x draws retained samples; burn_in and thin are counted in sweeps"""
    model_config = ConfigDict(frozen=True)

    chains: int = Field(4, ge=1)
    walkers: int = Field(1, ge=1)
    burn_in: int = Field(default_factory=lambda: Config.DEFAULT_BURN_IN, ge=0)
    thin: int = Field(default_factory=lambda: Config.DEFAULT_THIN, ge=1)
    draws: int = Field(1000, ge=1)
    seed: int = Field(default_factory=lambda: Config.DEFAULT_SEED, ge=0, lt=2 ** 64)

    @property
    def total_draws(self) -> int:
        return self.chains * self.walkers * self.draws


@dataclass(frozen=True)
class ChainDiagnostics:
    chain: int
    flip_rate: float
    mean_loss_count: float


@dataclass(frozen=True)
class SamplerDiagnostics:
    chains: List[ChainDiagnostics]
    split_rhat: float
    max_chain_tv: float

    @property
    def chains_disagree(self) -> bool:
        return self.max_chain_tv > CHAIN_TV_WARNING

    def to_dict(self) -> Dict[str, object]:
        return {
            "split_rhat": self.split_rhat,
            "max_chain_tv": self.max_chain_tv,
            "chains_disagree": self.chains_disagree,
            "chains": [
                {"chain": c.chain, "flip_rate": c.flip_rate, "mean_loss_count": c.mean_loss_count}
                for c in self.chains
            ],
        }


@dataclass(frozen=True)
class SampleSet:
    """Retained draws ordered by (chain, draw, walker)"""
    states: np.ndarray = field(repr=False)
    chain: np.ndarray = field(repr=False)
    loss_counts: np.ndarray = field(repr=False)
    diagnostics: SamplerDiagnostics
    config: McmcConfig

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def node_means(self) -> np.ndarray:
        return self.states.mean(axis=0)

    def pair_means(self, edges: List[Tuple[int, int]]) -> np.ndarray:
        if not edges:
            return np.zeros(0)
        i, j = np.asarray(edges).T
        return (self.states[:, i] & self.states[:, j]).mean(axis=0)

    def empirical_pmf(self) -> LossPmf:
        counts = np.bincount(self.loss_counts, minlength=self.n + 1)
        return LossPmf.from_mass(counts / counts.sum())


# ---------------------------------------------------------------------------
# Gibbs sampler
# ---------------------------------------------------------------------------

def _run_chain(alpha: np.ndarray, neighbors, config: McmcConfig,
               seed: np.random.SeedSequence) -> Tuple[np.ndarray, float]:
    rng = np.random.default_rng(seed)
    n = alpha.size
    walkers = config.walkers
    state = rng.integers(0, 2, size=(walkers, n)).astype(float)
    retained = np.empty((config.draws, walkers, n), dtype=np.uint8)

    flips = 0
    updates = 0
    total_sweeps = config.burn_in + config.draws * config.thin
    kept = 0
    for sweep in range(1, total_sweeps + 1):
        for i in range(n):
            nbr, weights = neighbors[i]
            field_i = alpha[i] + (state[:, nbr] @ weights if nbr.size else 0.0)
            new = (rng.random(walkers) < expit(field_i)).astype(float)
            flips += int(np.count_nonzero(new != state[:, i]))
            state[:, i] = new
        updates += n * walkers
        if sweep > config.burn_in and (sweep - config.burn_in) % config.thin == 0:
            retained[kept] = state
            kept += 1

    return retained, flips / max(updates, 1)


def split_rhat(traces: np.ndarray) -> float:
    """Gelman-Rubin scale reduction over traces of shape (sequences, length), each split in half"""
    traces = np.asarray(traces, dtype=float)
    half = traces.shape[1] // 2
    if half < 2:
        return float("nan")
    split = np.concatenate([traces[:, :half], traces[:, half:2 * half]], axis=0)
    m, length = split.shape

    within = np.mean(np.var(split, axis=1, ddof=1))
    means = np.mean(split, axis=1)
    between = length / (m - 1.0) * np.sum((means - means.mean()) ** 2)
    if within == 0.0:
        return 1.0 if between == 0.0 else float("inf")
    pooled = within * (length - 1.0) / length + between / length
    return float(np.sqrt(pooled / within))


def _chain_tv(per_chain_counts: List[np.ndarray], n: int) -> float:
    hists = [np.bincount(c, minlength=n + 1) / c.size for c in per_chain_counts]
    if len(hists) == 1:
        counts = per_chain_counts[0]
        half = counts.size // 2
        if half == 0:
            return 0.0
        hists = [np.bincount(counts[:half], minlength=n + 1) / half,
                 np.bincount(counts[half:2 * half], minlength=n + 1) / half]
    return max(total_variation(a, b) for a, b in combinations(hists, 2))


def gibbs_sample(params: JungleParams, config: Optional[McmcConfig] = None,
                 max_workers: Optional[int] = None) -> SampleSet:
    """Draw states from the Jungle distribution by single-site heat-bath updates"""
    config = config or McmcConfig()
    alpha = params.alpha_array()
    neighbors = params.neighbors()
    n = params.n
    seeds = np.random.SeedSequence(config.seed).spawn(config.chains)

    logger.info(
        f"Gibbs sampling n={n}: {config.chains} chains x {config.walkers} walkers x "
        f"{config.draws} draws (burn_in={config.burn_in}, thin={config.thin})"
    )
    results = run_ordered(
        lambda seed: _run_chain(alpha, neighbors, config, seed),
        seeds,
        max_workers=max_workers,
        thread_name_prefix="gibbs",
    )

    chain_states = [retained for retained, _ in results]
    loss_by_chain = [retained.sum(axis=2, dtype=np.int64) for retained in chain_states]

    traces = np.concatenate([counts.T for counts in loss_by_chain], axis=0)
    rhat = split_rhat(traces)
    tv = _chain_tv([counts.ravel() for counts in loss_by_chain], n)
    chains = [
        ChainDiagnostics(chain=k, flip_rate=flip_rate, mean_loss_count=float(loss_by_chain[k].mean()))
        for k, (_, flip_rate) in enumerate(results)
    ]
    diagnostics = SamplerDiagnostics(chains=chains, split_rhat=rhat, max_chain_tv=tv)
    if diagnostics.chains_disagree:
        logger.warning(
            f"Chains disagree: max total variation between per-chain loss histograms is {tv:.3f} "
            f"(> {CHAIN_TV_WARNING}); increase burn_in/draws or check for metastable states"
        )
    logger.debug(f"Split R-hat {rhat:.4f}, max chain TV {tv:.4f}")

    states = np.concatenate([s.reshape(-1, n) for s in chain_states], axis=0)
    chain_index = np.repeat(np.arange(config.chains), config.draws * config.walkers)
    loss_counts = states.sum(axis=1, dtype=np.int64)
    return SampleSet(
        states=states,
        chain=chain_index,
        loss_counts=loss_counts,
        diagnostics=diagnostics,
        config=config,
    )


# ---------------------------------------------------------------------------
# Full-state enumeration
# ---------------------------------------------------------------------------

def index_states(indices: np.ndarray, n: int) -> np.ndarray:
    """Bit i of each index is l_i"""
    return ((indices[:, None] >> np.arange(n)) & 1).astype(np.uint8)


def state_chunks(n: int, chunk: int = ENUMERATION_CHUNK) -> Iterator[Tuple[int, np.ndarray]]:
    """All 2^n states in index order, in blocks of at most `chunk` rows"""
    total = 1 << n
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        yield start, index_states(np.arange(start, stop, dtype=np.int64), n)


def _check_enumerable(n: int):
    if n > Config.ENUMERATION_CAP:
        raise EnumerationLimitError(n, Config.ENUMERATION_CAP)


def state_log_weights(params: JungleParams) -> np.ndarray:
    """Unnormalised log weight of every state, in index order"""
    n = params.n
    _check_enumerable(n)
    alpha = params.alpha_array()
    coupling = params.coupling_matrix()
    log_w = np.empty(1 << n)
    for start, states in state_chunks(n):
        s = states.astype(float)
        log_w[start:start + s.shape[0]] = s @ alpha + 0.5 * np.einsum("ij,ij->i", s @ coupling, s)
    return log_w


@dataclass(frozen=True)
class EnumerationResult:
    """Exact loss pmf with first and second moments of the default indicators"""
    pmf: LossPmf
    p: np.ndarray
    second_moments: np.ndarray
    log_z: float
    entropy: float

    def q(self, i: int, j: int) -> float:
        return float(self.second_moments[i, j])

    def rho(self, i: int, j: int) -> float:
        p_i, p_j = self.p[i], self.p[j]
        return (self.q(i, j) - p_i * p_j) / math.sqrt(p_i * (1 - p_i) * p_j * (1 - p_j))


def enumerate_exact(params: JungleParams) -> EnumerationResult:
    """Brute-force sum over all 2^n states (n capped)"""
    n = params.n
    _check_enumerable(n)
    log_w = state_log_weights(params)
    log_z = float(logsumexp(log_w))
    weights = np.exp(log_w - log_z)

    p = np.zeros(n)
    second = np.zeros((n, n))
    ell = np.empty(1 << n, dtype=np.int64)
    for start, states in state_chunks(n):
        stop = start + states.shape[0]
        s = states.astype(float)
        w = weights[start:stop]
        p += w @ s
        second += s.T @ (w[:, None] * s)
        ell[start:stop] = states.sum(axis=1)

    log_mass = np.array([logsumexp(log_w[ell == k]) for k in range(n + 1)])
    entropy = log_z - float(weights @ log_w)
    return EnumerationResult(
        pmf=LossPmf.from_log_weights(log_mass),
        p=p,
        second_moments=second,
        log_z=log_z,
        entropy=entropy,
    )


# ---------------------------------------------------------------------------
# Monetary losses
# ---------------------------------------------------------------------------

def _monetary_losses(states: np.ndarray, spec: PortfolioSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Per-draw loss L = sum E_i (1 - RR_i) l_i and the per-draw loss-given-default factor"""
    if states.shape[1] != spec.n:
        raise ConfigurationError(
            f"Samples have {states.shape[1]} nodes but the portfolio spec has n={spec.n}"
        )
    exposure = np.asarray(spec.exposure, dtype=float)
    s = states.astype(float)
    defaulted_exposure = s @ exposure
    recovery = spec.recovery

    if isinstance(recovery, ConstantRecovery):
        factor = np.full(s.shape[0], recovery.lgd)
        return defaulted_exposure * recovery.lgd, factor

    if isinstance(recovery, LinearInAggregateRecovery):
        mean_p = spec.mean_p
        if not mean_p > 0.0:
            raise ConfigurationError("linear_in_aggregate recovery needs a positive expected default rate")
        rate = s.sum(axis=1) / spec.n
        factor = 0.5 * (1.0 + rate / mean_p)
        if recovery.capped:
            factor = np.clip(factor, 0.0, 1.0)
        return defaulted_exposure * factor, factor

    if isinstance(recovery, CentralNodeRecovery):
        hub = spec.hub_node()
        if hub is None:
            raise ConfigurationError(
                "central_node recovery needs a Dandelion portfolio with a designated hub "
                "(set \"hub\" in the portfolio spec)"
            )
        factor = recovery.a + recovery.b * s[:, hub]
        return defaulted_exposure * factor, factor

    if isinstance(recovery, BorrowerSpecificRecovery):
        rate = s.sum(axis=1) / spec.n
        lgd = np.asarray(recovery.a)[None, :] + np.outer(rate, np.asarray(recovery.b))
        lgd = np.clip(lgd, 0.0, None)
        return (s * lgd) @ exposure, lgd.mean(axis=1)

    raise ConfigurationError(f"Unsupported recovery model {type(recovery).__name__}")


@dataclass(frozen=True)
class LossDistribution:
    """Empirical distribution of monetary losses over retained draws"""
    losses: np.ndarray = field(repr=False)
    lgd_factors: np.ndarray = field(repr=False)

    @property
    def expected_loss(self) -> float:
        return float(self.losses.mean())

    @property
    def standard_error(self) -> float:
        return float(self.losses.std(ddof=1) / math.sqrt(self.losses.size)) if self.losses.size > 1 else 0.0

    def quantile(self, confidence: float) -> float:
        """Smallest loss whose empirical CDF reaches the confidence"""
        if not 0.0 < confidence < 1.0:
            raise DomainError(f"confidence must lie in (0, 1) (got {confidence})")
        ordered = np.sort(self.losses)
        index = max(int(math.ceil(confidence * ordered.size)) - 1, 0)
        return float(ordered[index])

    def expected_shortfall(self, confidence: float) -> float:
        var = self.quantile(confidence)
        return float(self.losses[self.losses >= var].mean())

    def pmf(self) -> Tuple[np.ndarray, np.ndarray]:
        support, counts = np.unique(self.losses, return_counts=True)
        return support, counts / counts.sum()

    def summary(self, confidences=(0.99, 0.999)) -> Dict[str, float]:
        result = {
            "expected_loss": self.expected_loss,
            "standard_error": self.standard_error,
            "mean_lgd_factor": float(self.lgd_factors.mean()),
        }
        for c in confidences:
            result[f"quantile_{c:g}"] = self.quantile(c)
            result[f"expected_shortfall_{c:g}"] = self.expected_shortfall(c)
        return result


def losses_from_states(samples: SampleSet, spec: PortfolioSpec) -> LossDistribution:
    """Apply exposures and the recovery model to every retained draw"""
    losses, factors = _monetary_losses(samples.states, spec)
    return LossDistribution(losses=losses, lgd_factors=factors)


def monetary_pmf_exact(params: JungleParams, spec: PortfolioSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Exact (support, probabilities) of the monetary loss by full enumeration"""
    if params.n != spec.n:
        raise ConfigurationError(f"Params have n={params.n} but the portfolio spec has n={spec.n}")
    log_w = state_log_weights(params)
    weights = np.exp(log_w - logsumexp(log_w))
    losses = np.concatenate([
        _monetary_losses(states, spec)[0] for _, states in state_chunks(params.n)
    ])
    # merge values that differ only by rounding
    keys = np.round(losses, 9)
    support, inverse = np.unique(keys, return_inverse=True)
    probabilities = np.bincount(inverse, weights=weights, minlength=support.size)
    return support, probabilities


# ---------------------------------------------------------------------------
# Transition kernels for small systems
# ---------------------------------------------------------------------------

def site_kernel(params: JungleParams, site: int) -> np.ndarray:
    """2^n x 2^n heat-bath kernel resampling one site"""
    n = params.n
    if n > KERNEL_MAX_NODES:
        raise DomainError(f"Explicit kernels are limited to n <= {KERNEL_MAX_NODES} (got {n})")
    if not 0 <= site < n:
        raise DomainError(f"site {site} is outside 0..{n - 1}")
    size = 1 << n
    indices = np.arange(size, dtype=np.int64)
    states = index_states(indices, n).astype(float)
    field_i = params.alpha[site] + states @ params.coupling_matrix()[site]
    p_one = expit(field_i)

    bit = 1 << site
    kernel = np.zeros((size, size))
    kernel[indices, indices | bit] += p_one
    kernel[indices, indices & ~bit] += 1.0 - p_one
    return kernel


def sweep_kernel(params: JungleParams) -> np.ndarray:
    """One full sweep in the sampler's fixed site order"""
    kernel = np.eye(1 << params.n)
    for site in range(params.n):
        kernel = kernel @ site_kernel(params, site)
    return kernel
