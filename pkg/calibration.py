"""
Inversion of empirical default probabilities and correlations into Jungle parameters

Dandelion: explicit closed forms
Diamond: damped Newton on (alpha, beta) with a bracketing fallback
General topologies: moment matching on the concave dual, exact or sampled
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import brentq
from scipy.special import logit, logsumexp

from config import Config
from core import (
    Edge,
    JungleParams,
    PortfolioSpec,
    pair_q,
    pair_rho,
    validate_portfolio,
)
from errors import (
    CalibrationDomainError,
    ConvergenceError,
    DomainError,
    EnumerationLimitError,
    PortfolioValidationError,
)
from exact_models import (
    DandelionParams,
    DiamondParams,
    dandelion_moments,
    diamond_moment_arrays,
)
from sampler import McmcConfig, gibbs_sample, state_chunks

logger = logging.getLogger(__name__)

DANDELION_TOLERANCE = 1e-10
DIAMOND_TOLERANCE = 1e-9
ROOT_SEPARATION = 1e-4


class DandelionEmpirical(BaseModel):
    """Peripheral p, hub p0 and hub-spoke correlation rho over n peripheral nodes"""
    model_config = ConfigDict(frozen=True)

    n: int = Field(..., ge=1)
    p: float = Field(..., allow_inf_nan=False)
    p0: float = Field(..., allow_inf_nan=False)
    rho: float = Field(..., allow_inf_nan=False)

    @property
    def q(self) -> float:
        return pair_q(self.p, self.p0, self.rho)


class DiamondEmpirical(BaseModel):
    """Homogeneous p and pairwise correlation rho over n nodes"""
    model_config = ConfigDict(frozen=True)

    n: int = Field(..., ge=2)
    p: float = Field(..., allow_inf_nan=False)
    rho: float = Field(..., allow_inf_nan=False)

    @property
    def q(self) -> float:
        return pair_q(self.p, self.p, self.rho)


class FitConfig(BaseModel):
    """Settings for calibrate_general; tol defaults depend on the resolved mode"""
    model_config = ConfigDict(frozen=True)

    tol: Optional[float] = Field(None, gt=0)
    max_iter: int = Field(500, ge=1)
    mode: Literal["auto", "exact", "sampled"] = "auto"
    seed: int = Field(default_factory=lambda: Config.DEFAULT_SEED, ge=0)
    enumeration_threshold: int = Field(default_factory=lambda: Config.ENUMERATION_THRESHOLD, ge=1)
    mcmc: Optional[McmcConfig] = None
    damping: float = Field(0.5, gt=0.0, le=1.0)

    def resolved_mode(self, n: int) -> str:
        if self.mode == "auto":
            return "exact" if n <= self.enumeration_threshold else "sampled"
        return self.mode

    def tolerance(self, mode: str) -> float:
        if self.tol is not None:
            return self.tol
        return Config.EXACT_TOLERANCE if mode == "exact" else Config.SAMPLED_TOLERANCE


ModelParams = Union[JungleParams, DandelionParams, DiamondParams]


@dataclass
class CalibrationResult:
    params: ModelParams
    residual: float
    iterations: int
    tolerance: float
    method: str
    roots: List[Tuple[float, float]] = field(default_factory=list)
    trace: List[float] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.residual < self.tolerance

    @property
    def multiple_roots(self) -> bool:
        return len(self.roots) > 1

    def to_dict(self) -> Dict[str, Any]:
        params = self.params.model_dump()
        if "beta" in params and isinstance(params["beta"], dict):
            params["beta"] = {f"{i}-{j}": b for (i, j), b in params["beta"].items()}
        return {
            "params": params,
            "residual": self.residual,
            "iterations": self.iterations,
            "tolerance": self.tolerance,
            "success": self.success,
            "method": self.method,
            "roots": [list(r) for r in self.roots],
            "multiple_roots": self.multiple_roots,
        }


def _require_probability(value: float, name: str):
    if not 0.0 < value < 1.0:
        raise CalibrationDomainError(f"{name}={value} must lie strictly inside (0, 1)", bracket=f"0 < {name} < 1")


# ---------------------------------------------------------------------------
# Dandelion
# ---------------------------------------------------------------------------

def calibrate_dandelion(emp: DandelionEmpirical, tol: float = DANDELION_TOLERANCE) -> CalibrationResult:
    """Closed-form (alpha0, alpha, beta) from (p, p0, rho)"""
    _require_probability(emp.p, "p")
    _require_probability(emp.p0, "p0")
    n, p, p0, q = emp.n, emp.p, emp.p0, emp.q
    rest = 1.0 - p0 - p + q

    for bracket, value in (("q > 0", q), ("p - q > 0", p - q), ("p0 - q > 0", p0 - q),
                           ("1 - p0 - p + q > 0", rest)):
        if not value > 0.0:
            raise CalibrationDomainError(
                f"Dandelion targets p={p}, p0={p0}, rho={emp.rho} give q={q:.6g}, "
                f"violating {bracket} (value {value:.6g})",
                bracket=bracket,
            )

    alpha = math.log(p - q) - math.log(rest)
    beta = math.log(q) + math.log(rest) - math.log(p0 - q) - math.log(p - q)
    alpha0 = (n - 1) * (math.log1p(-p0) - math.log(p0)) + n * (math.log(p0 - q) - math.log(rest))
    params = DandelionParams(n=n, alpha0=alpha0, alpha=alpha, beta=beta)

    fwd = dandelion_moments(params)
    residual = max(abs(fwd.p0 - p0), abs(fwd.p - p), abs(fwd.q - q))
    logger.debug(f"Dandelion calibration n={n}: alpha0={alpha0:.6g} alpha={alpha:.6g} beta={beta:.6g} "
                 f"residual={residual:.2e}")
    return CalibrationResult(params=params, residual=residual, iterations=1, tolerance=tol,
                             method="closed-form", trace=[residual])


# ---------------------------------------------------------------------------
# Diamond
# ---------------------------------------------------------------------------

def _diamond_state(n: int, alpha: float, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    """Forward (p, q) and the Jacobian d(p, q)/d(alpha, beta)"""
    s = diamond_moment_arrays(n, alpha, beta)
    pairs = n * (n - 1.0)
    jac = np.array([
        [s["var_l"] / n, s["cov_ls"] / n],
        [2.0 * s["cov_ls"] / pairs, 2.0 * s["var_s"] / pairs],
    ], dtype=float)
    return np.array([float(s["p"]), float(s["q"])]), jac


def forward_jacobian(n: int, alpha: float, beta: float) -> np.ndarray:
    """d(p, rho)/d(alpha, beta) of the Diamond forward map"""
    (p, q), jac_pq = _diamond_state(n, alpha, beta)
    var = p * (1.0 - p)
    d_rho_dp = (-2.0 * p * var - (q - p * p) * (1.0 - 2.0 * p)) / (var * var)
    d_rho_dq = 1.0 / var
    return np.vstack([jac_pq[0], d_rho_dp * jac_pq[0] + d_rho_dq * jac_pq[1]])


def jacobian_norm(n: int, alpha: float, beta: float) -> float:
    return float(np.linalg.norm(forward_jacobian(n, alpha, beta)))


def parameter_sensitivity(n: int, alpha: float, beta: float) -> np.ndarray:
    """d(alpha, beta)/d(p, rho): how far the parameters move per unit change in the targets"""
    jac = forward_jacobian(n, alpha, beta)
    if abs(np.linalg.det(jac)) < 1e-300:
        raise DomainError(f"Forward map is singular at alpha={alpha}, beta={beta}")
    return np.linalg.inv(jac)


def _check_diamond_targets(n: int, p: float, q: float):
    lo = max(0.0, 2.0 * p - 1.0)
    if not lo < q < p:
        raise CalibrationDomainError(
            f"Diamond targets give q={q:.6g} outside ({lo:.6g}, {p:.6g})", bracket="max(0,2p-1) < q < p")
    # (p, q) must sit strictly above the chord between neighbouring integer loss counts
    x = p * n
    k = min(int(math.floor(x)), n - 1)
    q_k = k * (k - 1.0) / (n * (n - 1.0))
    q_k1 = (k + 1.0) * k / (n * (n - 1.0))
    floor_q = q_k + (x - k) * (q_k1 - q_k)
    if not q > floor_q + 1e-15:
        raise CalibrationDomainError(
            f"Diamond targets p={p}, q={q:.6g} lie on or below the exchangeable lower bound {floor_q:.6g}",
            bracket="q above the lower moment hull",
        )


def _diamond_newton(n: int, p_target: float, rho_target: float, start: Tuple[float, float],
                    tol: float, max_iter: int) -> Tuple[float, float, float, int, List[float]]:
    q_target = pair_q(p_target, p_target, rho_target)
    target = np.array([p_target, q_target])
    theta = np.array(start, dtype=float)
    step_cap = np.array([4.0, 8.0 / max(n - 1.0, 1.0)])
    trace: List[float] = []

    value, jac = _diamond_state(n, *theta)
    for it in range(max_iter + 1):
        if 0.0 < value[0] < 1.0:
            residual = max(abs(value[0] - p_target), abs(pair_rho(value[0], value[0], value[1]) - rho_target))
        else:
            residual = float("inf")
        trace.append(residual)
        if residual < tol or it == max_iter:
            return theta[0], theta[1], residual, it, trace

        diff = value - target
        try:
            step = np.linalg.solve(jac, -diff)
        except np.linalg.LinAlgError:
            return theta[0], theta[1], residual, it, trace
        scale = np.max(np.abs(step) / step_cap)
        if scale > 1.0:
            step /= scale

        merit = np.linalg.norm(diff)
        t = 1.0
        for _ in range(40):
            candidate = theta + t * step
            cand_value, cand_jac = _diamond_state(n, *candidate)
            if np.linalg.norm(cand_value - target) < merit:
                theta, value, jac = candidate, cand_value, cand_jac
                break
            t *= 0.5
        else:
            return theta[0], theta[1], residual, it, trace
    return theta[0], theta[1], trace[-1], max_iter, trace


def _expand_bracket(fn, lo: float, hi: float, grow_low: bool, grow_high: bool,
                    limit: int = 80) -> Tuple[float, float]:
    f_lo, f_hi = fn(lo), fn(hi)
    for _ in range(limit):
        if f_lo < 0.0 < f_hi:
            return lo, hi
        width = hi - lo
        if grow_low and f_lo >= 0.0:
            lo -= width
            f_lo = fn(lo)
        if grow_high and f_hi <= 0.0:
            hi += width
            f_hi = fn(hi)
    raise CalibrationDomainError(f"Could not bracket a root in [{lo:.3g}, {hi:.3g}]")


def _diamond_alpha_for(n: int, beta: float, p_target: float) -> float:
    """alpha such that p(alpha, beta) = p_target; p is increasing in alpha"""
    center = math.log(p_target) - math.log1p(-p_target) - beta * (n - 1) * p_target

    def gap(a):
        return float(diamond_moment_arrays(n, a, beta)["p"]) - p_target

    lo, hi = _expand_bracket(gap, center - 1.0, center + 1.0, True, True)
    return brentq(gap, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)


def _diamond_bracketing(n: int, p_target: float, rho_target: float) -> Tuple[float, float]:
    """Bisection in beta (rho increases with beta at fixed p) with a nested solve in alpha"""
    if rho_target == 0.0:
        return _diamond_alpha_for(n, 0.0, p_target), 0.0

    def gap(b):
        a = _diamond_alpha_for(n, b, p_target)
        return float(diamond_moment_arrays(n, a, b)["rho"]) - rho_target

    unit = 1.0 / n
    if rho_target > 0.0:
        lo, hi = _expand_bracket(gap, 0.0, unit, False, True)
    else:
        lo, hi = _expand_bracket(gap, -unit, 0.0, True, False)
    beta = brentq(gap, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
    return _diamond_alpha_for(n, beta, p_target), beta


def calibrate_diamond(emp: DiamondEmpirical, tol: float = DIAMOND_TOLERANCE, max_iter: int = 100,
                      multistart: bool = True) -> CalibrationResult:
    """Solve p(alpha, beta) = p, rho(alpha, beta) = rho from the independent-limit start"""
    _require_probability(emp.p, "p")
    n, p, rho = emp.n, emp.p, emp.rho
    _check_diamond_targets(n, p, emp.q)

    start = (math.log(p) - math.log1p(-p), 0.0)
    alpha, beta, residual, iterations, trace = _diamond_newton(n, p, rho, start, tol, max_iter)
    method = "newton"

    if not residual < tol:
        logger.info(f"Diamond Newton stalled at residual {residual:.2e}; falling back to bracketing")
        try:
            alpha, beta = _diamond_bracketing(n, p, rho)
        except (CalibrationDomainError, ValueError, RuntimeError) as e:
            raise ConvergenceError(f"Diamond calibration failed for n={n}, p={p}, rho={rho}: {e}",
                                   residual, trace)
        s = diamond_moment_arrays(n, alpha, beta)
        residual = max(abs(float(s["p"]) - p), abs(float(s["rho"]) - rho))
        trace.append(residual)
        method = "bracketing"
        if not residual < tol:
            raise ConvergenceError(f"Diamond calibration did not reach tol={tol:g} for n={n}, p={p}, rho={rho}",
                                   residual, trace)

    roots = [(alpha, beta)]
    if multistart:
        for corner in _diamond_corners(n, p):
            a, b, res, _, _ = _diamond_newton(n, p, rho, corner, tol, max_iter)
            if res < tol and all(math.hypot(a - ra, b - rb) > ROOT_SEPARATION for ra, rb in roots):
                roots.append((a, b))
        if len(roots) > 1:
            logger.warning(f"Diamond calibration found {len(roots)} distinct roots for n={n}, p={p}, rho={rho}; "
                           f"returning the independent-limit branch")

    return CalibrationResult(
        params=DiamondParams(n=n, alpha=alpha, beta=beta),
        residual=residual,
        iterations=iterations,
        tolerance=tol,
        method=method,
        roots=roots,
        trace=trace,
    )


def _diamond_corners(n: int, p: float) -> List[Tuple[float, float]]:
    center = math.log(p) - math.log1p(-p)
    return [(center + da, db / n) for da in (-2.0, 2.0) for db in (-2.0, 8.0)]


# ---------------------------------------------------------------------------
# General topologies
# ---------------------------------------------------------------------------

class _ExactMoments:
    """Log weights over all 2^n states for the features (l_i, l_i l_j)"""

    def __init__(self, n: int, edges: Sequence[Edge]):
        self.n = n
        self.edges = list(edges)
        self.first = np.array([e.i for e in self.edges], dtype=int)
        self.second = np.array([e.j for e in self.edges], dtype=int)
        self.dim = n + len(self.edges)
        self.states = np.concatenate([states for _, states in state_chunks(n)], axis=0)

    def _features(self, start: int, stop: int) -> np.ndarray:
        s = self.states[start:stop]
        pairs = s[:, self.first] & s[:, self.second]
        return np.concatenate([s, pairs], axis=1).astype(float)

    def _blocks(self):
        total = self.states.shape[0]
        for start in range(0, total, 1 << 14):
            yield start, min(start + (1 << 14), total)

    def log_weights(self, theta: np.ndarray) -> np.ndarray:
        return self.feature_dot(theta)

    def feature_dot(self, vec: np.ndarray) -> np.ndarray:
        out = np.empty(self.states.shape[0])
        for start, stop in self._blocks():
            out[start:stop] = self._features(start, stop) @ vec
        return out

    def moments(self, log_w: np.ndarray, with_covariance: bool) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        weights = np.exp(log_w - logsumexp(log_w))
        mean = np.zeros(self.dim)
        second = np.zeros((self.dim, self.dim)) if with_covariance else None
        for start, stop in self._blocks():
            feats = self._features(start, stop)
            w = weights[start:stop]
            mean += w @ feats
            if with_covariance:
                second += feats.T @ (w[:, None] * feats)
        cov = second - np.outer(mean, mean) if with_covariance else None
        return mean, cov

    def column(self, k: int) -> np.ndarray:
        if k < self.n:
            return self.states[:, k].astype(bool)
        e = k - self.n
        return (self.states[:, self.first[e]] & self.states[:, self.second[e]]).astype(bool)


def _coordinate_sweep(model: _ExactMoments, theta: np.ndarray, log_w: np.ndarray, targets: np.ndarray):
    """One pass of exact single-feature updates; each sets its feature mean to the target"""
    for k in range(model.dim):
        col = model.column(k)
        log_z = logsumexp(log_w)
        mean_k = math.exp(logsumexp(log_w[col]) - log_z)
        mean_k = min(max(mean_k, 1e-300), 1.0 - 1e-16)
        delta = float(logit(targets[k]) - logit(mean_k))
        theta[k] += delta
        log_w[col] += delta


def _to_params(n: int, edges: Sequence[Edge], theta: np.ndarray) -> JungleParams:
    return JungleParams(
        alpha=[float(a) for a in theta[:n]],
        beta={(e.i, e.j): float(b) for e, b in zip(edges, theta[n:])},
    )


def _fit_exact(n: int, edges: Sequence[Edge], targets: np.ndarray, theta: np.ndarray,
               tol: float, max_iter: int) -> Tuple[np.ndarray, float, int, List[float], str]:
    model = _ExactMoments(n, edges)
    log_w = model.log_weights(theta)
    use_newton = (1 << n) * model.dim * model.dim <= 2e9
    trace: List[float] = []
    warmup = 2

    for it in range(max_iter + 1):
        mean, cov = model.moments(log_w, with_covariance=use_newton and it >= warmup)
        residual = float(np.max(np.abs(mean - targets)))
        trace.append(residual)
        logger.debug(f"exact fit iteration {it}: residual {residual:.3e}")
        if residual < tol or it == max_iter:
            return theta, residual, it, trace, "exact-newton" if use_newton else "exact-coordinate"

        if cov is not None:
            grad = targets - mean
            try:
                step = np.linalg.solve(cov + 1e-12 * np.eye(model.dim), grad)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and _newton_line_search(model, theta, log_w, targets, step, grad):
                continue
        _coordinate_sweep(model, theta, log_w, targets)

    return theta, trace[-1], max_iter, trace, "exact-newton"


def _newton_line_search(model: _ExactMoments, theta: np.ndarray, log_w: np.ndarray,
                        targets: np.ndarray, step: np.ndarray, grad: np.ndarray) -> bool:
    """Backtrack on the dual objective theta.t - log Z; updates theta/log_w in place on success"""
    objective = float(theta @ targets - logsumexp(log_w))
    direction = model.feature_dot(step)
    slope = float(grad @ step)
    t = 1.0
    for _ in range(30):
        cand_log_w = log_w + t * direction
        cand_theta = theta + t * step
        cand_objective = float(cand_theta @ targets - logsumexp(cand_log_w))
        if cand_objective >= objective + 1e-4 * t * slope:
            theta[:] = cand_theta
            log_w[:] = cand_log_w
            return True
        t *= 0.5
    return False


def _sampled_moments(params: JungleParams, edges: Sequence[Edge], mcmc: McmcConfig) -> np.ndarray:
    samples = gibbs_sample(params, mcmc)
    return np.concatenate([samples.node_means(), samples.pair_means([tuple(e) for e in edges])])


def _fit_sampled(n: int, edges: Sequence[Edge], targets: np.ndarray, theta: np.ndarray,
                 config: FitConfig, tol: float) -> Tuple[np.ndarray, float, int, List[float], str]:
    mcmc = config.mcmc or McmcConfig(chains=2, walkers=256, draws=200, burn_in=200, thin=2, seed=config.seed)
    trace: List[float] = []
    best = (theta.copy(), float("inf"))
    target_logits = logit(targets)

    for it in range(config.max_iter):
        seed = int(np.random.SeedSequence([config.seed, it]).generate_state(1, dtype=np.uint64)[0])
        mean = _sampled_moments(_to_params(n, edges, theta), edges, mcmc.model_copy(update={"seed": seed}))
        residual = float(np.max(np.abs(mean - targets)))
        trace.append(residual)
        if residual < best[1]:
            best = (theta.copy(), residual)
        logger.debug(f"sampled fit iteration {it}: residual {residual:.3e}")
        if residual < tol:
            return theta, residual, it, trace, "sampled"
        clipped = np.clip(mean, 0.5 / mcmc.total_draws, 1.0 - 0.5 / mcmc.total_draws)
        theta = theta + config.damping * (target_logits - logit(clipped))

    return best[0], best[1], config.max_iter, trace, "sampled"


def calibrate_general(spec: PortfolioSpec, config: Optional[FitConfig] = None) -> CalibrationResult:
    """Fit alpha_i and beta_ij so that <l_i> = p_i and <l_i l_j> = q_ij on the known edges"""
    config = config or FitConfig()
    report = validate_portfolio(spec)
    if not report.valid:
        q_issues = [i for i in report.issues if i.kind.startswith("q_")]
        if q_issues and len(q_issues) == len(report.issues):
            raise CalibrationDomainError("Infeasible moment targets:\n" +
                                         "\n".join(f"  - {i}" for i in q_issues),
                                         bracket="max(0,p_i+p_j-1) < q_ij < min(p_i,p_j)")
        raise PortfolioValidationError(report)

    n = spec.n
    edges = spec.edges
    p = np.asarray(spec.p, dtype=float)
    targets = np.concatenate([p, [spec.q(e) for e in edges]])
    theta = np.concatenate([logit(p), np.zeros(len(edges))])

    mode = config.resolved_mode(n)
    tol = config.tolerance(mode)

    if not edges:
        params = _to_params(n, edges, theta)
        return CalibrationResult(params=params, residual=0.0, iterations=0, tolerance=tol,
                                 method="independent", trace=[0.0])

    logger.info(f"Calibrating general topology: n={n}, {len(edges)} edges, mode={mode}, tol={tol:g}")
    if mode == "exact":
        if n > Config.ENUMERATION_CAP:
            raise EnumerationLimitError(n, Config.ENUMERATION_CAP)
        theta, residual, iterations, trace, method = _fit_exact(n, edges, targets, theta, tol, config.max_iter)
    else:
        theta, residual, iterations, trace, method = _fit_sampled(n, edges, targets, theta, config, tol)

    if not residual < tol:
        raise ConvergenceError(f"General calibration ({method}) did not reach tol={tol:g}", residual, trace)

    return CalibrationResult(params=_to_params(n, edges, theta), residual=residual, iterations=iterations,
                             tolerance=tol, method=method, trace=trace)
