"""
Default-rate series ingestion, histograms, synthetic series and output writers
"""

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from calibration import DandelionEmpirical, calibrate_dandelion
from config import Config
from core import LossPmf
from errors import DomainError, JungleError, SeriesParseError
from exact_models import dandelion_pmf
from utils import dump_json

logger = logging.getLogger(__name__)

SERIES_COLUMNS = ("year", "cohort", "rate")
PMF_COLUMNS = ("loss_count", "loss_fraction", "probability")

Output = Union[str, Path, None]


class DefaultRateRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    year: int
    cohort: str = Field(..., min_length=1)
    rate: float = Field(..., ge=0.0, le=1.0, allow_inf_nan=False)
    count: Optional[int] = Field(None, ge=0)


@dataclass
class DefaultRateSeries:
    """Yearly default rates of one cohort, years strictly increasing"""
    cohort: str
    records: List[DefaultRateRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def years(self) -> np.ndarray:
        return np.array([r.year for r in self.records], dtype=int)

    def rates(self) -> np.ndarray:
        return np.array([r.rate for r in self.records], dtype=float)

    def mean_rate(self) -> float:
        return float(self.rates().mean()) if self.records else float("nan")


# ---------------------------------------------------------------------------
# Series CSV
# ---------------------------------------------------------------------------

def _parse_row(line: int, row: Dict[str, str], has_count: bool, problems: List) -> Optional[DefaultRateRecord]:
    try:
        year = int(row["year"].strip())
    except ValueError:
        problems.append((line, f"year '{row['year']}' is not an integer"))
        return None
    cohort = row["cohort"].strip()
    if not cohort:
        problems.append((line, "cohort is empty"))
        return None
    try:
        rate = float(row["rate"].strip())
    except ValueError:
        problems.append((line, f"rate '{row['rate']}' is not a number"))
        return None
    if not (np.isfinite(rate) and 0.0 <= rate <= 1.0):
        problems.append((line, f"rate {rate} out of range [0, 1]"))
        return None

    count = None
    if has_count and row.get("count", "").strip():
        try:
            count = int(row["count"].strip())
        except ValueError:
            problems.append((line, f"count '{row['count']}' is not an integer"))
            return None
        if count < 0:
            problems.append((line, f"count {count} is negative"))
            return None
    return DefaultRateRecord(year=year, cohort=cohort, rate=rate, count=count)


def _undecodable_lines(path: str) -> List[Tuple[int, str]]:
    problems = []
    with open(path, "rb") as f:
        for line, raw in enumerate(f, start=1):
            try:
                raw.decode("utf-8")
            except UnicodeDecodeError as e:
                problems.append((line, f"not valid UTF-8 at byte {e.start}"))
    return problems or [(0, "file is not valid UTF-8")]


def load_series(path: Union[str, Path]) -> List[DefaultRateSeries]:
    """Parse a year,cohort,rate[,count] CSV into per-cohort series (file order)"""
    path = str(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8", skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise SeriesParseError(path, [(1, "file is empty; expected header year,cohort,rate[,count]")])
    except pd.errors.ParserError as e:
        raise SeriesParseError(path, [(0, str(e))])
    except UnicodeDecodeError:
        raise SeriesParseError(path, _undecodable_lines(path))

    df.columns = [c.strip().lower() for c in df.columns]
    missing = [c for c in SERIES_COLUMNS if c not in df.columns]
    if missing:
        raise SeriesParseError(path, [(1, f"missing columns: {', '.join(missing)}")])
    has_count = "count" in df.columns

    problems: List = []
    by_cohort: Dict[str, DefaultRateSeries] = {}
    for offset, row in enumerate(df.to_dict(orient="records")):
        line = offset + 2
        record = _parse_row(line, row, has_count, problems)
        if record is None:
            continue
        series = by_cohort.setdefault(record.cohort, DefaultRateSeries(cohort=record.cohort))
        if series.records and record.year <= series.records[-1].year:
            problems.append((line, f"year {record.year} does not increase within cohort '{record.cohort}'"))
            continue
        series.records.append(record)

    if problems:
        raise SeriesParseError(path, problems)
    logger.info(f"Loaded {sum(len(s) for s in by_cohort.values())} records in {len(by_cohort)} cohorts from {path}")
    return list(by_cohort.values())


def _flatten(series: Union[DefaultRateSeries, Iterable[Any]]) -> List[DefaultRateRecord]:
    if isinstance(series, DefaultRateSeries):
        return list(series.records)
    records: List[DefaultRateRecord] = []
    for item in series:
        if isinstance(item, DefaultRateSeries):
            records.extend(item.records)
        else:
            records.append(item)
    return records


def write_series(series: Union[DefaultRateSeries, Sequence[DefaultRateSeries]], out: Output = None) -> str:
    records = _flatten(series)
    df = pd.DataFrame({
        "year": [r.year for r in records],
        "cohort": [r.cohort for r in records],
        "rate": [r.rate for r in records],
    })
    if any(r.count is not None for r in records):
        df["count"] = pd.array([r.count for r in records], dtype="Int64")
    return write_frame(df, out)


# ---------------------------------------------------------------------------
# Histograms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"bin_lo": self.edges[:-1], "bin_hi": self.edges[1:], "count": self.counts})


def histogram(series, bins: int) -> Histogram:
    """Equal-width bins over [0, max rate]"""
    if bins < 2:
        raise DomainError(f"histogram needs bins >= 2 (got {bins})")
    rates = np.array([r.rate for r in _flatten(series)], dtype=float)
    if rates.size == 0:
        raise DomainError("histogram of an empty series")
    hi = float(rates.max())
    if hi == 0.0:
        hi = 1.0
    counts, edges = np.histogram(rates, bins=bins, range=(0.0, hi))
    return Histogram(edges=edges, counts=counts.astype(int))


# ---------------------------------------------------------------------------
# Synthetic series
# ---------------------------------------------------------------------------

SPECULATIVE_GRADE = {
    "cohort": "SpecGrade",
    "n": Config.SPECULATIVE_GRADE_N,
    "p": 0.028,
    "p_width": 0.01,
    "rho": 0.08,
    "rho_width": 0.06,
    "target_mean": 0.028,
}

CAA_C = {
    "cohort": "Caa-C",
    "n": Config.CAA_C_N,
    "p": 0.25,
    "p_width": 0.1,
    "rho": 0.35,
    "rho_width": 0.15,
    "target_mean": None,
}

PRESETS = {"speculative": SPECULATIVE_GRADE, "caa-c": CAA_C}


def _round_sig(x: float) -> float:
    return float(Config.float_format() % x)


def synthetic_series(cohort: str = "SpecGrade", start_year: int = 1920, end_year: int = 2010,
                     n: int = Config.SPECULATIVE_GRADE_N, p: float = 0.028, p_width: float = 0.01,
                     rho: float = 0.08, rho_width: float = 0.06, target_mean: Optional[float] = 0.028,
                     seed: Optional[int] = None) -> DefaultRateSeries:
    """One Dandelion loss realisation per year with (p, rho) drawn from a box around the centre"""
    if end_year < start_year:
        raise DomainError(f"end_year {end_year} precedes start_year {start_year}")
    rng = np.random.default_rng(Config.DEFAULT_SEED if seed is None else seed)

    rates = []
    for year in range(start_year, end_year + 1):
        for _ in range(100):
            p_y = float(np.clip(p + rng.uniform(-p_width, p_width), 1e-4, 1 - 1e-4))
            rho_y = float(np.clip(rho + rng.uniform(-rho_width, rho_width), 0.0, 0.99))
            try:
                params = calibrate_dandelion(DandelionEmpirical(n=n, p=p_y, p0=p_y, rho=rho_y)).params
                break
            except JungleError:
                continue
        else:
            raise DomainError(f"No feasible (p, rho) drawn for year {year}")
        loss = rng.choice(n + 1, p=dandelion_pmf(params).mass)
        rates.append(loss / n)

    rates = np.asarray(rates, dtype=float)
    if target_mean is not None and rates.mean() > 0:
        rates = np.clip(rates * (target_mean / rates.mean()), 0.0, 1.0)

    records = [
        DefaultRateRecord(year=year, cohort=cohort, rate=_round_sig(rate), count=n)
        for year, rate in zip(range(start_year, end_year + 1), rates)
    ]
    logger.info(f"Generated {len(records)} synthetic {cohort} records, mean rate {np.mean([r.rate for r in records]):.4f}")
    return DefaultRateSeries(cohort=cohort, records=records)


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------

def _emit_text(text: str, out: Output) -> str:
    if out is not None and str(out) != "-":
        with open(out, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    return text


def write_frame(df: pd.DataFrame, out: Output) -> str:
    buffer = io.StringIO()
    df.to_csv(buffer, index=False, float_format=Config.float_format(), lineterminator="\n")
    return _emit_text(buffer.getvalue(), out)


def pmf_frame(pmf: LossPmf) -> pd.DataFrame:
    return pd.DataFrame({
        "loss_count": pmf.loss_counts,
        "loss_fraction": pmf.loss_fractions,
        "probability": pmf.mass,
    })


def write_pmf_csv(pmf: LossPmf, out: Output = None) -> str:
    return write_frame(pmf_frame(pmf), out)


def read_pmf_csv(path: Union[str, Path]) -> LossPmf:
    """Read a loss_count,loss_fraction,probability CSV back into a LossPmf"""
    df = pd.read_csv(path)
    missing = [c for c in ("loss_count", "probability") if c not in df.columns]
    if missing:
        raise DomainError(f"{path}: missing columns {', '.join(missing)}")
    counts = df["loss_count"].to_numpy(dtype=int)
    if not np.array_equal(counts, np.arange(counts.size)):
        raise DomainError(f"{path}: loss_count must run 0..n without gaps")
    return LossPmf.from_mass(df["probability"].to_numpy(dtype=float))


def write_samples_csv(samples, monetary_losses: Optional[np.ndarray] = None, out: Output = None) -> str:
    """One row per retained draw; without monetary_losses every default counts as a unit loss"""
    losses = samples.loss_counts.astype(float) if monetary_losses is None else monetary_losses
    df = pd.DataFrame({
        "draw": np.arange(samples.size),
        "chain": samples.chain,
        "loss_count": samples.loss_counts,
        "monetary_loss": losses,
    })
    return write_frame(df, out)


def write_state_dump(samples, path: Union[str, Path]) -> int:
    """Packed default indicators, little-endian bit order, ceil(n/8) bytes per draw"""
    packed = np.packbits(samples.states, axis=1, bitorder="little")
    with open(path, "wb") as f:
        f.write(packed.tobytes())
    return packed.shape[1]


def read_state_dump(path: Union[str, Path], n: int) -> np.ndarray:
    record = (n + 7) // 8
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % record:
        raise DomainError(f"{path}: size {raw.size} is not a multiple of the {record}-byte record length")
    return np.unpackbits(raw.reshape(-1, record), axis=1, count=n, bitorder="little")


def write_phase_grid_csv(grid, out: Output = None) -> str:
    return write_frame(grid.to_frame(), out)


def write_ensemble_csv(report, out: Output = None) -> str:
    return write_frame(report.to_frame(), out)


def write_json(payload: Dict[str, Any], out: Output = None) -> str:
    return _emit_text(dump_json(payload) + "\n", out)
