"""
Risk measures, mode detection and Diamond phase scans
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from scipy.signal import find_peaks

from calibration import DiamondEmpirical, calibrate_diamond, jacobian_norm
from core import LossPmf
from errors import DomainError
from exact_models import DiamondParams, diamond_moment_arrays, diamond_pmf
from parallel import run_ordered

logger = logging.getLogger(__name__)

PEAK_MASS_FLOOR = 1e-6
PEAK_RELATIVE_PROMINENCE = 0.01
PEAK_WINDOW = 2
MIN_SCAN_RESOLUTION = 16
RIDGE_REFINE_CELLS = 8

AxisSpec = Union[Tuple[float, float], Tuple[float, float, int]]


@dataclass(frozen=True)
class Peak:
    location: int
    fraction: float
    height: float
    prominence: float
    window_mass: float


@dataclass(frozen=True)
class RiskReport:
    var: float
    es: float
    confidence: float
    peaks: List[Peak] = field(default_factory=list)

    @property
    def n_modes(self) -> int:
        return len(self.peaks)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "confidence": self.confidence,
            "var": self.var,
            "es": self.es,
            "n_modes": self.n_modes,
            "peaks": [
                {"location": pk.location, "fraction": pk.fraction, "height": pk.height,
                 "prominence": pk.prominence}
                for pk in self.peaks
            ],
        }


def _check_confidence(confidence: float):
    if not 0.0 < confidence < 1.0:
        raise DomainError(f"confidence must lie strictly inside (0, 1) (got {confidence})")


def var_index(pmf: LossPmf, confidence: float) -> int:
    """Smallest default count whose CDF reaches the confidence"""
    _check_confidence(confidence)
    cdf = pmf.cdf()
    return min(int(np.searchsorted(cdf, confidence - 1e-12, side="left")), pmf.n)


def var_es(pmf: LossPmf, confidence: float) -> RiskReport:
    """Discrete VaR and tail expectation (VaR atom included), both as loss fractions"""
    k = var_index(pmf, confidence)
    mass = pmf.mass
    tail = mass[k:]
    ell = pmf.loss_counts[k:]
    es_count = float(np.dot(ell, tail) / tail.sum())
    n = max(pmf.n, 1)
    return RiskReport(var=k / n, es=es_count / n, confidence=confidence, peaks=detect_peaks(pmf))


def detect_peaks(pmf: LossPmf, floor: float = PEAK_MASS_FLOOR,
                 min_relative_prominence: float = PEAK_RELATIVE_PROMINENCE) -> List[Peak]:
    """Local maxima of the pmf (plateaus merged) carrying enough mass and prominence"""
    mass = pmf.mass
    padded = np.concatenate([[0.0], mass, [0.0]])
    indices, props = find_peaks(padded, prominence=0.0, plateau_size=1)

    peaks: List[Peak] = []
    for idx, prominence in zip(indices, props["prominences"]):
        loc = int(idx) - 1
        height = float(mass[loc])
        window = float(mass[max(0, loc - PEAK_WINDOW):loc + PEAK_WINDOW + 1].sum())
        if window < floor or prominence < min_relative_prominence * height:
            continue
        peaks.append(Peak(location=loc, fraction=loc / max(pmf.n, 1), height=height,
                          prominence=float(prominence), window_mass=window))

    if not peaks:
        loc = int(np.argmax(mass))
        peaks.append(Peak(location=loc, fraction=loc / max(pmf.n, 1), height=float(mass[loc]),
                          prominence=float(mass[loc]), window_mass=float(mass[loc])))
    return peaks


# ---------------------------------------------------------------------------
# Phase scans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseGrid:
    """Diamond forward maps on an (alpha, beta) grid; rows index beta, columns alpha"""
    n: int
    alpha_axis: np.ndarray = field(repr=False)
    beta_axis: np.ndarray = field(repr=False)
    p_surface: np.ndarray = field(repr=False)
    rho_surface: np.ndarray = field(repr=False)
    grad_norm: np.ndarray = field(repr=False)
    on_ridge: np.ndarray = field(repr=False)
    transition_line: np.ndarray = field(repr=False)
    ridge_bimodal: np.ndarray = field(repr=False)
    ridge_strength: np.ndarray = field(repr=False)
    critical_point_estimate: Optional[Tuple[float, float]]
    critical_method: str

    def to_frame(self) -> pd.DataFrame:
        beta, alpha = np.meshgrid(self.beta_axis, self.alpha_axis, indexing="ij")
        return pd.DataFrame({
            "alpha": alpha.ravel(),
            "beta": beta.ravel(),
            "p": self.p_surface.ravel(),
            "rho": self.rho_surface.ravel(),
            "grad_norm": self.grad_norm.ravel(),
            "on_ridge": self.on_ridge.ravel().astype(int),
        })

    def transition_beyond_critical(self) -> np.ndarray:
        """Ridge points at or above the critical coupling"""
        if self.critical_point_estimate is None:
            return self.transition_line[:0]
        return self.transition_line[self.transition_line[:, 1] >= self.critical_point_estimate[1]]

    def distance_to_ridge(self, alpha: float, beta: float) -> float:
        """Distance to the nearest transition point, beta measured in units of 2/(n-1)"""
        line = self.transition_beyond_critical()
        if line.size == 0:
            return float("inf")
        scale = 0.5 * (self.n - 1)
        d = np.hypot(line[:, 0] - alpha, (line[:, 1] - beta) * scale)
        return float(d.min())


def _axis(spec: AxisSpec, resolution: Optional[int], name: str) -> np.ndarray:
    if len(spec) == 3:
        lo, hi, steps = float(spec[0]), float(spec[1]), int(spec[2])
    else:
        lo, hi = float(spec[0]), float(spec[1])
        steps = resolution
    if steps is None or steps < MIN_SCAN_RESOLUTION:
        raise DomainError(f"{name} resolution must be >= {MIN_SCAN_RESOLUTION} (got {steps})")
    if not hi > lo:
        raise DomainError(f"{name} range must be increasing (got {lo}..{hi})")
    return np.linspace(lo, hi, steps)


def _var_l(n: int, alpha: float, beta: float) -> float:
    return float(diamond_moment_arrays(n, alpha, beta)["var_l"])


def _is_bimodal(n: int, alpha: float, beta: float) -> bool:
    return len(detect_peaks(diamond_pmf(DiamondParams(n=n, alpha=alpha, beta=beta)))) >= 2


def scan_phase(n: int, alpha_range: AxisSpec, beta_range: AxisSpec,
               resolution: Union[int, Tuple[int, int], None] = 64,
               critical_method: Literal["bimodal", "half_max"] = "bimodal",
               max_workers: Optional[int] = None) -> PhaseGrid:
    """Map (alpha, beta) to (p, rho) and trace the steepest-gradient ridge"""
    if n < 2:
        raise DomainError(f"scan_phase needs n >= 2 (got {n})")
    if isinstance(resolution, (tuple, list)):
        res_a, res_b = resolution
    else:
        res_a = res_b = resolution
    alpha_axis = _axis(alpha_range, res_a, "alpha")
    beta_axis = _axis(beta_range, res_b, "beta")

    logger.info(f"Scanning Diamond phase diagram n={n}: {alpha_axis.size} x {beta_axis.size} grid")
    rows = run_ordered(lambda b: diamond_moment_arrays(n, alpha_axis, b), beta_axis,
                       max_workers=max_workers, thread_name_prefix="scan")
    p_surface = np.vstack([row["p"] for row in rows])
    rho_surface = np.vstack([row["rho"] for row in rows])

    dp_db, dp_da = np.gradient(p_surface, beta_axis, alpha_axis)
    drho_db, drho_da = np.gradient(rho_surface, beta_axis, alpha_axis)
    grad_norm = np.sqrt(dp_da ** 2 + dp_db ** 2 + drho_da ** 2 + drho_db ** 2)

    on_ridge = np.zeros_like(grad_norm, dtype=bool)
    line: List[Tuple[float, float]] = []
    ridge_strength: List[float] = []
    last = alpha_axis.size - 1
    for r, beta in enumerate(beta_axis):
        j = int(np.argmax(grad_norm[r]))
        if j == 0 or j == last:
            continue
        lo = alpha_axis[max(j - RIDGE_REFINE_CELLS, 0)]
        hi = alpha_axis[min(j + RIDGE_REFINE_CELLS, last)]
        res = minimize_scalar(lambda a: -_var_l(n, a, beta), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-7})
        alpha_r = float(res.x)
        # variance maximum pinned to the window edge: no transition crossing in this row
        if min(alpha_r - lo, hi - alpha_r) < 1e-4 * (hi - lo):
            continue
        on_ridge[r, int(np.argmin(np.abs(alpha_axis - alpha_r)))] = True
        line.append((alpha_r, float(beta)))
        ridge_strength.append(float(grad_norm[r, j]))

    transition_line = np.array(line, dtype=float).reshape(-1, 2)
    bimodal = np.array([_is_bimodal(n, a, b) for a, b in transition_line], dtype=bool)

    if critical_method == "bimodal":
        critical = _critical_by_bimodality(transition_line, bimodal)
    elif critical_method == "half_max":
        critical = _critical_by_half_max(transition_line, np.asarray(ridge_strength, dtype=float))
    else:
        raise DomainError(f"Unknown critical_method '{critical_method}' (use bimodal or half_max)")

    if critical is None:
        logger.info("No critical point found on the scanned grid")
    else:
        logger.info(f"Critical point estimate alpha={critical[0]:.4f}, beta={critical[1]:.5f}")

    return PhaseGrid(
        n=n,
        alpha_axis=alpha_axis,
        beta_axis=beta_axis,
        p_surface=p_surface,
        rho_surface=rho_surface,
        grad_norm=grad_norm,
        on_ridge=on_ridge,
        transition_line=transition_line,
        ridge_bimodal=bimodal,
        ridge_strength=np.asarray(ridge_strength, dtype=float),
        critical_point_estimate=critical,
        critical_method=critical_method,
    )


def _critical_by_bimodality(line: np.ndarray, bimodal: np.ndarray) -> Optional[Tuple[float, float]]:
    """Lowest ridge point from which every larger-beta ridge point is bimodal"""
    start = None
    for k in range(len(line) - 1, -1, -1):
        if not bimodal[k]:
            break
        start = k
    if start is None:
        return None
    return float(line[start, 0]), float(line[start, 1])


def _critical_by_half_max(line: np.ndarray, strength: np.ndarray) -> Optional[Tuple[float, float]]:
    """Ridge end where the gradient peak decays below half its maximum, walking down in beta"""
    if len(line) == 0:
        return None
    top = int(np.argmax(strength))
    threshold = 0.5 * strength[top]
    k = top
    while k > 0 and strength[k - 1] >= threshold:
        k -= 1
    return float(line[k, 0]), float(line[k, 1])


# ---------------------------------------------------------------------------
# VaR discontinuities along a calibration path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarJump:
    n: int
    p: float
    confidence: float
    rho_below: float
    rho_above: float
    var_below: float
    var_above: float
    ratio: float
    jacobian_below: float
    jacobian_above: float
    var_path: List[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {k: v for k, v in self.__dict__.items() if k != "var_path"}


def _calibrated_path(n: int, p: float, rho_grid: Sequence[float]) -> List[DiamondParams]:
    return [calibrate_diamond(DiamondEmpirical(n=n, p=p, rho=rho), multistart=False).params
            for rho in rho_grid]


def var_jump(n: int, p: float, rho_grid: Sequence[float], confidence: float = 0.999) -> VarJump:
    """Largest VaR ratio between neighbouring correlations on a fixed-p Diamond path"""
    rho_grid = [float(r) for r in rho_grid]
    if len(rho_grid) < 2:
        raise DomainError("var_jump needs at least two correlations")
    path = _calibrated_path(n, p, rho_grid)
    var_path = [var_es(diamond_pmf(params), confidence).var for params in path]

    floor = 1.0 / n
    ratios = [var_path[k + 1] / max(var_path[k], floor) for k in range(len(path) - 1)]
    k = int(np.argmax(ratios))
    below, above = path[k], path[k + 1]
    return VarJump(
        n=n, p=p, confidence=confidence,
        rho_below=rho_grid[k], rho_above=rho_grid[k + 1],
        var_below=var_path[k], var_above=var_path[k + 1],
        ratio=float(ratios[k]),
        jacobian_below=jacobian_norm(n, below.alpha, below.beta),
        jacobian_above=jacobian_norm(n, above.alpha, above.beta),
        var_path=var_path,
    )


def bimodal_onset(n: int, p: float, rho_grid: Sequence[float]) -> Optional[float]:
    """First correlation on the grid whose calibrated Diamond pmf has two modes"""
    for rho in rho_grid:
        params = calibrate_diamond(DiamondEmpirical(n=n, p=p, rho=float(rho)), multistart=False).params
        if _is_bimodal(n, params.alpha, params.beta):
            return float(rho)
    return None
