"""
Model-risk ensembles over uncertain default probabilities and correlations

Every sampled point of the uncertainty box is calibrated, solved and
classified as unimodal, bimodal or near-transition.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import logit, logsumexp

from calibration import (
    CalibrationResult,
    DandelionEmpirical,
    DiamondEmpirical,
    FitConfig,
    calibrate_dandelion,
    calibrate_diamond,
    calibrate_general,
    jacobian_norm,
)
from config import Config
from core import JungleParams, LossPmf, PortfolioSpec, ensure_admissible, validate_portfolio
from errors import DomainError, JungleError
from exact_models import binomial_pmf, dandelion_pmf, diamond_pmf
from parallel import run_ordered
from risk import PhaseGrid, scan_phase, var_es
from sampler import McmcConfig, enumerate_exact, gibbs_sample

logger = logging.getLogger(__name__)

MAX_DRAW_ATTEMPTS = 100
P_CLIP = 1e-6
RHO_CLIP = 0.999
NEAR_TRANSITION_THRESHOLD = 0.25
GRID_RESOLUTION = 48

REGIMES = ("unimodal", "bimodal", "near-transition")


class UncertaintyBox(BaseModel):
    """Half-widths around each p_i and rho_ij; scalars apply to every node or edge"""
    model_config = ConfigDict(frozen=True)

    dp: Union[float, List[float]] = 0.0
    drho: Union[float, Dict[Tuple[int, int], float]] = 0.0
    samples: int = Field(16, ge=1)
    seed: int = Field(default_factory=lambda: Config.DEFAULT_SEED, ge=0)

    @field_validator("dp")
    @classmethod
    def _dp_non_negative(cls, v):
        values = v if isinstance(v, list) else [v]
        if any(w < 0 for w in values):
            raise ValueError("dp half-widths must be >= 0")
        return v

    @field_validator("drho")
    @classmethod
    def _drho_non_negative(cls, v):
        values = list(v.values()) if isinstance(v, dict) else [v]
        if any(w < 0 for w in values):
            raise ValueError("drho half-widths must be >= 0")
        return v

    def dp_for(self, spec: PortfolioSpec) -> np.ndarray:
        if isinstance(self.dp, list):
            if len(self.dp) != spec.n:
                raise DomainError(f"dp has {len(self.dp)} entries, expected n={spec.n}")
            return np.asarray(self.dp, dtype=float)
        return np.full(spec.n, float(self.dp))

    def drho_for(self, spec: PortfolioSpec) -> np.ndarray:
        if isinstance(self.drho, dict):
            widths = {tuple(sorted(k)): w for k, w in self.drho.items()}
            return np.asarray([widths.get((e.i, e.j), 0.0) for e in spec.edges], dtype=float)
        return np.full(len(spec.edges), float(self.drho))


class StressScenario(BaseModel):
    """One-shot map p -> p * p_scale + p_shift, rho -> rho * rho_scale + rho_shift"""
    model_config = ConfigDict(frozen=True)

    name: str
    p_shift: float = 0.0
    p_scale: float = Field(1.0, ge=0.0)
    rho_shift: float = 0.0
    rho_scale: float = Field(1.0, ge=0.0)


@dataclass
class SampleOutcome:
    index: int
    p: List[float]
    rho: Dict[str, float]
    params: Dict[str, float] = field(default_factory=dict)
    residual: Optional[float] = None
    var: Optional[float] = None
    es: Optional[float] = None
    n_modes: Optional[int] = None
    jacobian_norm: Optional[float] = None
    distance_to_ridge: Optional[float] = None
    regime: Optional[str] = None
    scenario: Optional[str] = None
    error: Optional[str] = None
    calibration: Optional[CalibrationResult] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_row(self) -> Dict[str, Any]:
        row = {
            "index": self.index,
            "scenario": self.scenario,
            "regime": self.regime,
            "var": self.var,
            "es": self.es,
            "n_modes": self.n_modes,
            "residual": self.residual,
            "jacobian_norm": self.jacobian_norm,
            "distance_to_ridge": self.distance_to_ridge,
            "error": self.error,
        }
        row.update({f"param_{k}": v for k, v in self.params.items()})
        return row


@dataclass
class EnsembleReport:
    family: str
    confidence: float
    outcomes: List[SampleOutcome]
    dispersion: Dict[str, float]
    grid: Optional[PhaseGrid] = field(default=None, repr=False)

    @property
    def labels(self) -> List[str]:
        present = {o.regime for o in self.outcomes if o.regime is not None}
        return [r for r in REGIMES if r in present]

    @property
    def any_systemic(self) -> bool:
        return any(o.regime in ("bimodal", "near-transition") for o in self.outcomes)

    @property
    def failures(self) -> List[SampleOutcome]:
        return [o for o in self.outcomes if not o.ok]

    def var_range(self) -> Tuple[float, float]:
        values = [o.var for o in self.outcomes if o.ok]
        if not values:
            raise DomainError("No successful ensemble samples")
        return min(values), max(values)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([o.to_row() for o in self.outcomes])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "family": self.family,
            "confidence": self.confidence,
            "samples": len(self.outcomes),
            "failures": len(self.failures),
            "labels": self.labels,
            "any_systemic": self.any_systemic,
            "dispersion": self.dispersion,
            "outcomes": [o.to_row() for o in self.outcomes],
        }


# ---------------------------------------------------------------------------
# Family detection and perturbation
# ---------------------------------------------------------------------------

def _all_equal(values: Sequence[float]) -> bool:
    return len(values) == 0 or (max(values) - min(values)) <= 1e-15


def detect_family(spec: PortfolioSpec) -> str:
    """binomial, dandelion, diamond or general"""
    edges = spec.edges
    if not edges:
        return "binomial" if _all_equal(spec.p) else "general"

    rhos = list(spec.rho.values())
    hub = spec.hub_node()
    if hub is not None and len(edges) == spec.n - 1 and all(hub in e for e in edges):
        periphery = [spec.p[i] for i in range(spec.n) if i != hub]
        if _all_equal(periphery) and _all_equal(rhos):
            return "dandelion"

    if spec.n >= 2 and len(edges) == spec.n * (spec.n - 1) // 2 and _all_equal(spec.p) and _all_equal(rhos):
        return "diamond"
    return "general"


def _rebuild(spec: PortfolioSpec, p: np.ndarray, rho: np.ndarray) -> PortfolioSpec:
    return spec.model_copy(update={
        "p": [float(x) for x in p],
        "rho": {(e.i, e.j): float(r) for e, r in zip(spec.edges, rho)},
    })


def _perturb(spec: PortfolioSpec, family: str, dp: np.ndarray, drho: np.ndarray,
             rng: np.random.Generator) -> PortfolioSpec:
    """One uniform draw per parameter class (homogeneous families) or per node/edge"""
    p0 = np.asarray(spec.p, dtype=float)
    rho0 = np.asarray(list(spec.rho.values()), dtype=float)

    if family == "general":
        u_p = rng.uniform(-1.0, 1.0, size=spec.n)
        u_rho = rng.uniform(-1.0, 1.0, size=rho0.size)
    elif family == "dandelion":
        hub = spec.hub_node()
        u_shared, u_hub, u_r = rng.uniform(-1.0, 1.0, size=3)
        u_p = np.full(spec.n, u_shared)
        u_p[hub] = u_hub
        u_rho = np.full(rho0.size, u_r)
        dp = np.where(np.arange(spec.n) == hub, dp[hub], dp[np.arange(spec.n) != hub].mean())
        drho = np.full(rho0.size, drho.mean() if drho.size else 0.0)
    else:
        u_shared, u_r = rng.uniform(-1.0, 1.0, size=2)
        u_p = np.full(spec.n, u_shared)
        u_rho = np.full(rho0.size, u_r)
        dp = np.full(spec.n, dp.mean())
        drho = np.full(rho0.size, drho.mean() if drho.size else 0.0)

    p = np.clip(p0 + u_p * dp, P_CLIP, 1.0 - P_CLIP)
    rho = np.clip(rho0 + u_rho * drho, -RHO_CLIP, RHO_CLIP)
    return _rebuild(spec, p, rho)


def _draw_point(spec: PortfolioSpec, family: str, box: UncertaintyBox, index: int) -> Optional[PortfolioSpec]:
    rng = np.random.default_rng([box.seed, index])
    dp, drho = box.dp_for(spec), box.drho_for(spec)
    for attempt in range(MAX_DRAW_ATTEMPTS):
        candidate = _perturb(spec, family, dp, drho, rng)
        if validate_portfolio(candidate).valid:
            return candidate
    logger.warning(f"Ensemble sample {index}: no feasible point after {MAX_DRAW_ATTEMPTS} attempts, skipping")
    return None


# ---------------------------------------------------------------------------
# Per-sample pipeline
# ---------------------------------------------------------------------------

def _solve(spec: PortfolioSpec, family: str, fit_config: FitConfig,
           mcmc: Optional[McmcConfig]) -> Tuple[LossPmf, Dict[str, float], Optional[CalibrationResult], Optional[float]]:
    if family == "binomial":
        p = spec.p[0]
        return binomial_pmf(spec.n, p), {"alpha": float(logit(p))}, None, None

    if family == "dandelion":
        hub = spec.hub_node()
        periphery = [i for i in range(spec.n) if i != hub]
        emp = DandelionEmpirical(n=len(periphery), p=spec.p[periphery[0]], p0=spec.p[hub],
                                 rho=next(iter(spec.rho.values())))
        result = calibrate_dandelion(emp)
        params = result.params
        summary = {"alpha0": params.alpha0, "alpha": params.alpha, "beta": params.beta}
        return dandelion_pmf(params), summary, result, None

    if family == "diamond":
        emp = DiamondEmpirical(n=spec.n, p=spec.p[0], rho=next(iter(spec.rho.values())))
        result = calibrate_diamond(emp, multistart=False)
        params = result.params
        summary = {"alpha": params.alpha, "beta": params.beta}
        return diamond_pmf(params), summary, result, jacobian_norm(spec.n, params.alpha, params.beta)

    result = calibrate_general(spec, fit_config)
    params: JungleParams = result.params
    if spec.n <= Config.ENUMERATION_CAP:
        pmf = enumerate_exact(params).pmf
    else:
        pmf = gibbs_sample(params, mcmc or McmcConfig(seed=fit_config.seed)).empirical_pmf()
    betas = params.beta_array()
    summary = {
        "alpha_mean": float(np.mean(params.alpha)),
        "beta_mean": float(betas.mean()) if betas.size else 0.0,
    }
    return pmf, summary, result, None


def _evaluate(index: int, spec: Optional[PortfolioSpec], family: str, confidence: float,
              fit_config: FitConfig, mcmc: Optional[McmcConfig], scenario: Optional[str] = None) -> SampleOutcome:
    if spec is None:
        return SampleOutcome(index=index, p=[], rho={}, scenario=scenario,
                             error=f"no feasible point after {MAX_DRAW_ATTEMPTS} attempts")
    outcome = SampleOutcome(
        index=index,
        p=list(spec.p),
        rho={f"{i}-{j}": r for (i, j), r in spec.rho.items()},
        scenario=scenario,
    )
    try:
        pmf, summary, result, jac = _solve(spec, family, fit_config, mcmc)
    except JungleError as e:
        logger.warning(f"Ensemble sample {index} failed: {e}")
        outcome.error = str(e)
        return outcome

    report = var_es(pmf, confidence)
    outcome.params = summary
    outcome.calibration = result
    outcome.residual = result.residual if result is not None else 0.0
    outcome.var = report.var
    outcome.es = report.es
    outcome.n_modes = report.n_modes
    outcome.jacobian_norm = jac
    return outcome


def _diamond_grid(n: int, outcomes: List[SampleOutcome]) -> Optional[PhaseGrid]:
    """Phase grid enclosing the calibrated sample cloud and the transition line below it"""
    points = [(o.params["alpha"], o.params["beta"]) for o in outcomes if o.ok]
    if not points:
        return None
    alphas, betas = np.array(points).T
    beta_hi = max(2.0 * betas.max(), 8.0 / n)
    beta_lo = min(0.0, betas.min() - 1.0 / n)
    alpha_lo = min(alphas.min() - 1.0, -0.5 * beta_hi * (n - 1) - 0.5)
    alpha_hi = max(alphas.max() + 1.0, 0.5)
    return scan_phase(n, (alpha_lo, alpha_hi), (beta_lo, beta_hi), resolution=GRID_RESOLUTION)


def _classify(outcomes: List[SampleOutcome], family: str, n: int, near_threshold: float) -> Optional[PhaseGrid]:
    grid = _diamond_grid(n, outcomes) if family == "diamond" else None
    for o in outcomes:
        if not o.ok:
            continue
        if grid is not None:
            o.distance_to_ridge = grid.distance_to_ridge(o.params["alpha"], o.params["beta"])
        if o.n_modes >= 2:
            o.regime = "bimodal"
        elif o.distance_to_ridge is not None and o.distance_to_ridge < near_threshold:
            o.regime = "near-transition"
        else:
            o.regime = "unimodal"
    return grid


def _dispersion(outcomes: List[SampleOutcome]) -> Dict[str, float]:
    ok = [o for o in outcomes if o.ok]
    if not ok:
        return {}
    keys = ok[0].params.keys()
    return {f"{k}_std": float(np.std([o.params[k] for o in ok])) for k in keys}


def _finish(spec: PortfolioSpec, family: str, confidence: float, outcomes: List[SampleOutcome],
            near_threshold: float) -> EnsembleReport:
    grid = _classify(outcomes, family, spec.n, near_threshold)
    report = EnsembleReport(family=family, confidence=confidence, outcomes=outcomes,
                            dispersion=_dispersion(outcomes), grid=grid)
    logger.info(f"Ensemble ({family}): {len(outcomes)} samples, {len(report.failures)} failed, "
                f"labels={report.labels}, any_systemic={report.any_systemic}")
    return report


def run_ensemble(spec: PortfolioSpec, box: UncertaintyBox, confidence: float = 0.99,
                 fit_config: Optional[FitConfig] = None, mcmc: Optional[McmcConfig] = None,
                 near_threshold: float = NEAR_TRANSITION_THRESHOLD,
                 max_workers: Optional[int] = None) -> EnsembleReport:
    """Sample the uncertainty box, calibrate and solve each point, and classify its regime"""
    ensure_admissible(spec)
    family = detect_family(spec)
    fit_config = fit_config or FitConfig(seed=box.seed)
    logger.info(f"Running {box.samples}-sample ensemble on a {family} portfolio (n={spec.n})")

    points = [_draw_point(spec, family, box, k) for k in range(box.samples)]
    outcomes = run_ordered(
        lambda item: _evaluate(item[0], item[1], family, confidence, fit_config, mcmc),
        list(enumerate(points)),
        max_workers=max_workers,
        thread_name_prefix="ensemble",
    )
    return _finish(spec, family, confidence, outcomes, near_threshold)


def apply_stress(spec: PortfolioSpec, scenario: StressScenario) -> PortfolioSpec:
    """Stressed copy of the portfolio; raises PortfolioValidationError if the result is infeasible"""
    p = np.clip(np.asarray(spec.p) * scenario.p_scale + scenario.p_shift, P_CLIP, 1.0 - P_CLIP)
    rho = np.clip(np.asarray(list(spec.rho.values()), dtype=float) * scenario.rho_scale + scenario.rho_shift,
                  -RHO_CLIP, RHO_CLIP)
    stressed = _rebuild(spec, p, rho)
    ensure_admissible(stressed)
    return stressed


def run_scenarios(spec: PortfolioSpec, scenarios: Sequence[StressScenario], confidence: float = 0.99,
                  fit_config: Optional[FitConfig] = None, mcmc: Optional[McmcConfig] = None,
                  near_threshold: float = NEAR_TRANSITION_THRESHOLD,
                  max_workers: Optional[int] = None) -> EnsembleReport:
    """Evaluate user-supplied stress scenarios with the ensemble pipeline"""
    ensure_admissible(spec)
    family = detect_family(spec)
    fit_config = fit_config or FitConfig()

    def evaluate(item):
        index, scenario = item
        try:
            stressed = apply_stress(spec, scenario)
        except JungleError as e:
            logger.warning(f"Scenario '{scenario.name}' is infeasible: {e}")
            return SampleOutcome(index=index, p=[], rho={}, scenario=scenario.name, error=str(e))
        return _evaluate(index, stressed, family, confidence, fit_config, mcmc, scenario=scenario.name)

    outcomes = run_ordered(evaluate, list(enumerate(scenarios)), max_workers=max_workers,
                           thread_name_prefix="scenario")
    return _finish(spec, family, confidence, outcomes, near_threshold)


def mixture_pmf(components: Sequence[LossPmf], weights: Sequence[float]) -> LossPmf:
    """Weighted mixture of loss pmfs over the same n"""
    if len(components) == 0 or len(components) != len(weights):
        raise DomainError("mixture_pmf needs one weight per component and at least one component")
    n = components[0].n
    if any(c.n != n for c in components):
        raise DomainError("mixture components must share the same n")
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or not weights.sum() > 0:
        raise DomainError("mixture weights must be non-negative with a positive sum")
    with np.errstate(divide="ignore"):
        log_w = np.log(weights / weights.sum())
    stacked = np.vstack([c.log_mass for c in components]) + log_w[:, None]
    return LossPmf.from_log_weights(logsumexp(stacked, axis=0))
