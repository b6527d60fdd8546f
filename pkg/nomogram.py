from __future__ import annotations
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
import metrics
import stringworks
import survival

logger = logging.getLogger(__name__)


class NomogramException(Exception): pass
class DegenerateRangeException(NomogramException): pass
class ZeroBetaException(NomogramException): pass
class MissingCovariateException(NomogramException): pass
class CutoffUnsetException(NomogramException): pass
class HorizonBeyondFollowUpException(NomogramException): pass
class NomogramFileException(NomogramException): pass


# the combined model's covariates in chart order
CRN_VARIABLES = ("grade_risk", "os_risk", "grade", "stage")
MAX_POINTS = 100.0
MIN_CUTOFF_MARGIN = 0.5
SCORED_COLUMNS = ["patient_id", "total_points", "group", "surv_12m", "surv_36m", "surv_60m"]
SURVIVAL_HORIZONS = (12, 36, 60)


class StratifiedGroup(Enum):
    WORSE = "Worse"
    FAVORABLE = "Favorable"


@dataclass(frozen=True)
class NomogramVariable:
    name: str
    beta: float
    ref_value: float
    min_value: float
    max_value: float
    center: float = 0.0 # covariate mean used by the Cox fit

    def points(self, value: float, scale: float) -> float:
        return scale * self.beta * (value - self.ref_value)


@dataclass(frozen=True)
class Nomogram:
    variables: Tuple[NomogramVariable, ...]
    scale: float
    baseline_times: Tuple[float, ...]
    baseline_cumhaz: Tuple[float, ...]
    max_time: float
    cutoff_points: Optional[float] = None

    def variable(self, name: str) -> NomogramVariable:
        for variable in self.variables:
            if variable.name == name:
                return variable
        raise MissingCovariateException(f"nomogram has no variable `{name}`")

    def rescaled(self, factor: float) -> Nomogram:
        """
        Same chart with every point value (and the cutoff) multiplied by `factor`
        """
        if factor <= 0:
            raise ValueError("rescaling factor must be positive")
        return dataclasses.replace(
            self,
            scale=self.scale * factor,
            cutoff_points=None if self.cutoff_points is None else self.cutoff_points * factor
        )


def build_nomogram(model: survival.CoxModel, ranges: Mapping[str, Sequence[float]]) -> Nomogram:
    """
    Points chart for a fitted Cox model. The variable with the widest
    |beta·(max − min)| spans 0-100 points; each variable scores 0 at the range
    end with the lower linear predictor unless a third `ref` element is given.

    :param ranges: covariate name -> (min, max) or (min, max, ref)
    :raises: DegenerateRangeException, ZeroBetaException, MissingCovariateException
    """
    if len(model.beta) < 1:
        raise ValueError("model has no covariates")
    spans = []
    for name, beta in zip(model.names, model.beta):
        if name not in ranges:
            raise MissingCovariateException(f"no range given for covariate `{name}`")
        low, high = float(ranges[name][0]), float(ranges[name][1])
        if not high > low:
            raise DegenerateRangeException(f"range of `{name}` is degenerate: ({low}, {high})")
        spans.append(abs(beta * (high - low)))
    widest = max(spans)
    if widest == 0.0:
        raise ZeroBetaException("all coefficients are zero")
    scale = MAX_POINTS / widest

    variables = []
    for index, (name, beta) in enumerate(zip(model.names, model.beta)):
        low, high = float(ranges[name][0]), float(ranges[name][1])
        ref = low if beta >= 0 else high
        if len(ranges[name]) > 2:
            ref = float(ranges[name][2])
            if not low <= ref <= high:
                raise DegenerateRangeException(f"reference {ref} of `{name}` lies outside ({low}, {high})")
        variables.append(NomogramVariable(name=name, beta=float(beta), ref_value=ref,
                                          min_value=low, max_value=high,
                                          center=float(model.means[index])))
    return Nomogram(
        variables=tuple(variables),
        scale=scale,
        baseline_times=tuple(float(t) for t in model.baseline_times),
        baseline_cumhaz=tuple(float(h) for h in model.baseline_cumhaz),
        max_time=model.max_time
    )

def _clamped(nomogram: Nomogram, covariates: Mapping[str, float]) -> dict[str, float]:
    values = {}
    for variable in nomogram.variables:
        if variable.name not in covariates:
            raise MissingCovariateException(f"covariate `{variable.name}` is missing")
        value = float(covariates[variable.name])
        clamped = min(max(value, variable.min_value), variable.max_value)
        if clamped != value:
            logger.warning("%s=%g outside [%g, %g], clamped to %g", variable.name, value,
                           variable.min_value, variable.max_value, clamped)
        values[variable.name] = clamped
    return values

def score(nomogram: Nomogram, covariates: Mapping[str, float]) -> float:
    """
    Total points of one patient; out-of-range values are clamped to the range ends

    :raises: MissingCovariateException
    """
    values = _clamped(nomogram, covariates)
    return float(sum(variable.points(values[variable.name], nomogram.scale)
                     for variable in nomogram.variables))

def stratify(nomogram: Nomogram, total_points: float) -> StratifiedGroup:
    """
    Worse iff total points exceed the cutoff

    :raises: CutoffUnsetException
    """
    if nomogram.cutoff_points is None:
        raise CutoffUnsetException("nomogram cutoff is not set")
    return StratifiedGroup.WORSE if total_points > nomogram.cutoff_points else StratifiedGroup.FAVORABLE

def choose_cutoff(nomogram: Nomogram, points: Sequence[float], labels: Sequence[int]) -> Tuple[Nomogram, metrics.CutoffResult]:
    """
    Cutoff maximizing Youden's J of total points against 5-year status.
    The stored cutoff is the midpoint between the chosen threshold and the next lower
    point total, so `points > cutoff` calls the same patients as `points ≥ threshold`
    and keeps doing so after the chart is rescaled.
    """
    result = metrics.best_cutoff(points, labels)
    lower = np.asarray(points, dtype=np.float64)
    lower = lower[lower < result.threshold]
    if len(lower):
        cutoff = (result.threshold + float(lower.max())) / 2.0
    else:
        # every patient is at or above the threshold
        cutoff = result.threshold - MIN_CUTOFF_MARGIN
    return dataclasses.replace(nomogram, cutoff_points=float(cutoff)), result

def survival_probability(nomogram: Nomogram, covariates: Mapping[str, float], horizon_months: float) -> float:
    """
    S(t|x) = exp(−Λ0(t)·exp(lp)), lp taken around the fit's covariate means

    :raises: HorizonBeyondFollowUpException if the horizon is past the last follow-up time
    """
    if horizon_months > nomogram.max_time:
        raise HorizonBeyondFollowUpException(
            f"horizon {horizon_months} is beyond the last follow-up time {nomogram.max_time}"
        )
    values = _clamped(nomogram, covariates)
    lp = sum(variable.beta * (values[variable.name] - variable.center) for variable in nomogram.variables)
    # left-continuous step: a jump at exactly the horizon is not yet included
    index = int(np.searchsorted(nomogram.baseline_times, horizon_months, side="left"))
    cumhaz = 0.0 if index == 0 else nomogram.baseline_cumhaz[index - 1]
    return math.exp(-cumhaz * math.exp(lp))

def score_records(
        nomogram: Nomogram,
        covariates: Mapping[str, Mapping[str, float]],
        horizons: Sequence[float] = SURVIVAL_HORIZONS
    ) -> list[dict]:
    """
    Scored output rows (patient_id, total_points, group, survival per horizon), sorted by patient_id
    """
    rows = []
    for patient_id in sorted(covariates):
        total = score(nomogram, covariates[patient_id])
        row = {"patient_id": patient_id, "total_points": total,
               "group": stratify(nomogram, total).value}
        for horizon in horizons:
            row[f"surv_{int(horizon)}m"] = survival_probability(nomogram, covariates[patient_id], horizon)
        rows.append(row)
    return rows


# region [nomogram.json]

def nomogram_to_dict(nomogram: Nomogram) -> dict:
    return {
        "variables": [
            {"name": v.name, "beta": v.beta, "ref": v.ref_value, "min": v.min_value,
             "max": v.max_value, "center": v.center}
            for v in nomogram.variables
        ],
        "scale": nomogram.scale,
        "cutoff": nomogram.cutoff_points,
        "max_time": nomogram.max_time,
        "baseline": [{"t": t, "cumhaz": h} for t, h in zip(nomogram.baseline_times, nomogram.baseline_cumhaz)]
    }

def nomogram_from_dict(data: dict) -> Nomogram:
    try:
        return Nomogram(
            variables=tuple(NomogramVariable(name=v["name"], beta=v["beta"], ref_value=v["ref"],
                                             min_value=v["min"], max_value=v["max"],
                                             center=v.get("center", 0.0))
                            for v in data["variables"]),
            scale=float(data["scale"]),
            baseline_times=tuple(float(b["t"]) for b in data["baseline"]),
            baseline_cumhaz=tuple(float(b["cumhaz"]) for b in data["baseline"]),
            max_time=float(data.get("max_time", math.inf)),
            cutoff_points=data.get("cutoff")
        )
    except (KeyError, TypeError, ValueError) as e:
        raise NomogramFileException(f"malformed nomogram file: {e}")

def save_nomogram(nomogram: Nomogram, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(nomogram_to_dict(nomogram), f, indent=2)

def load_nomogram(path: str) -> Nomogram:
    with open(path, "r", encoding="utf-8") as f:
        return nomogram_from_dict(json.load(f))

# endregion


# region [scored.csv]

def write_scored_csv(rows: Sequence[dict], path: str) -> None:
    table = [{column: row[column] if column in ("patient_id", "group") else stringworks.format_float(row[column])
              for column in SCORED_COLUMNS} for row in rows]
    pd.DataFrame(table, columns=SCORED_COLUMNS).to_csv(path, index=False, encoding="utf-8")

def read_scored_csv(path: str) -> dict[str, Tuple[float, StratifiedGroup]]:
    """
    Read scored.csv back as patient_id -> (total points, group)

    :raises: NomogramFileException on missing columns or bad values
    """
    table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [column for column in ("patient_id", "total_points", "group") if column not in table.columns]
    if missing:
        raise NomogramFileException(f"{path}: missing column(s) {', '.join(missing)}")
    scored = {}
    for index, values in enumerate(table.to_dict("records")):
        try:
            scored[values["patient_id"].strip()] = (stringworks.parse_float(values["total_points"]),
                                                    StratifiedGroup(values["group"].strip()))
        except ValueError as e:
            raise NomogramFileException(f"{path}, row {index + 2}: {e}")
    return scored

# endregion
