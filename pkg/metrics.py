from __future__ import annotations
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from scipy import stats
import clinical
import stringworks
import survival

logger = logging.getLogger(__name__)


class MetricsException(Exception): pass
class SingleClassException(MetricsException): pass


DEFAULT_BOOTSTRAP = 2000
COMPARISON_HORIZONS = (60, 36, 12)
COMPARISON_COLUMNS = ["indicator", "auc_5y", "ci_5y", "auc_3y", "ci_3y", "auc_1y", "ci_1y", "c_index"]
ROC_COLUMNS = ["threshold", "fpr", "tpr"]


@dataclass
class RocCurve:
    points: list # (fpr, tpr, threshold), threshold descending
    auc: float


@dataclass
class AucResult:
    auc: float
    ci_low: float
    ci_high: float
    n_pos: int
    n_neg: int


@dataclass
class CutoffResult:
    threshold: float
    sensitivity: float
    specificity: float

    @property
    def youden_j(self) -> float:
        return self.sensitivity + self.specificity - 1.0


def _check_binary(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores for {len(labels)} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise SingleClassException("both classes must be present")
    return scores, labels

def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """
    ROC operating points at every distinct score (score ≥ threshold is positive),
    starting at (0, 0) with an infinite threshold. The trapezoid area is accumulated
    in integer counts so it equals the Mann-Whitney statistic exactly.

    :raises: SingleClassException
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos

    points = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    doubled_area = 0
    for threshold in np.unique(scores)[::-1]:
        at = scores == threshold
        new_tp = tp + int(np.sum(labels[at] == 1))
        new_fp = fp + int(np.sum(labels[at] == 0))
        doubled_area += (new_fp - fp) * (new_tp + tp)
        tp, fp = new_tp, new_fp
        points.append((fp / n_neg, tp / n_pos, float(threshold)))
    return RocCurve(points=points, auc=doubled_area / (2 * n_pos * n_neg))

def mann_whitney_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    AUC from mid-ranks; tied scores count one half
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    ranks = stats.rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)

def auc_ci(
        scores: Sequence[float],
        labels: Sequence[int],
        B: int = DEFAULT_BOOTSTRAP,
        seed: int = 7
    ) -> AucResult:
    """
    AUC with a percentile bootstrap 95% interval. Each resample draws from its own
    substream of `seed`; resamples missing a class are redrawn from the same substream.

    :raises: SingleClassException
    """
    scores, labels = _check_binary(scores, labels)
    if B < 100:
        raise ValueError("at least 100 bootstrap resamples are required")
    auc = roc_curve(scores, labels).auc
    n = len(scores)

    resampled = np.empty(B)
    for index, child in enumerate(np.random.SeedSequence(seed).spawn(B)):
        rng = np.random.default_rng(child)
        while True:
            picks = rng.integers(0, n, size=n)
            n_pos = int(labels[picks].sum())
            if 0 < n_pos < n:
                break
        resampled[index] = mann_whitney_auc(scores[picks], labels[picks])

    ci_low, ci_high = np.percentile(resampled, [2.5, 97.5])
    n_pos = int(labels.sum())
    return AucResult(
        auc=auc,
        ci_low=float(min(ci_low, auc)),
        ci_high=float(max(ci_high, auc)),
        n_pos=n_pos,
        n_neg=n - n_pos
    )

def sens_spec_at(scores: Sequence[float], labels: Sequence[int], threshold: float) -> CutoffResult:
    """
    Sensitivity and specificity when score ≥ threshold is called positive
    """
    scores, labels = _check_binary(scores, labels)
    called = scores >= threshold
    tp = int(np.sum(called & (labels == 1)))
    tn = int(np.sum(~called & (labels == 0)))
    return CutoffResult(
        threshold=float(threshold),
        sensitivity=tp / int(labels.sum()),
        specificity=tn / int(np.sum(labels == 0))
    )

def best_cutoff(scores: Sequence[float], labels: Sequence[int]) -> CutoffResult:
    """
    Distinct score maximizing Youden's J; ties go to higher specificity, then the lower threshold
    """
    scores, labels = _check_binary(scores, labels)
    best = None
    for threshold in np.unique(scores):
        candidate = sens_spec_at(scores, labels, threshold)
        if best is None or \
           (candidate.youden_j, candidate.specificity) > (best.youden_j, best.specificity):
            best = candidate
    return best

def one_vs_rest_auc(probabilities: np.ndarray, labels: Sequence[int]) -> dict:
    """
    One-vs-rest AUC of every class of a multi-class prediction, plus their mean under "mean"

    :param probabilities: n×C class probabilities
    :param labels: class index per row
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    aucs = {c: roc_curve(probabilities[:, c], (labels == c).astype(np.int64)).auc
            for c in range(probabilities.shape[1])}
    aucs["mean"] = float(np.mean(list(aucs.values())))
    return aucs

def write_roc_points_csv(curve: RocCurve, path: str) -> None:
    rows = [{"threshold": stringworks.format_float(t),
             "fpr": stringworks.format_float(fpr),
             "tpr": stringworks.format_float(tpr)} for fpr, tpr, t in curve.points]
    pd.DataFrame(rows, columns=ROC_COLUMNS).to_csv(path, index=False, encoding="utf-8")


# region [indicator comparison]

def _horizon_auc(
        records: Sequence[clinical.ClinicalRecord],
        scores: Mapping[str, float],
        horizon: float,
        B: int,
        seed: int
    ) -> Optional[AucResult]:
    values, labels = [], []
    for record in records:
        if record.patient_id not in scores:
            continue
        label = clinical.horizon_label(record.os_months, record.event, horizon)
        if label is clinical.HorizonLabel.EXCLUDED:
            continue
        values.append(scores[record.patient_id])
        labels.append(int(label is clinical.HorizonLabel.POSITIVE))
    try:
        return auc_ci(values, labels, B=B, seed=seed)
    except SingleClassException:
        logger.warning("single class at %g months, AUC not defined", horizon)
        return None

def indicator_comparison(
        records: Sequence[clinical.ClinicalRecord],
        indicators: Mapping[str, Mapping[str, float]],
        B: int = DEFAULT_BOOTSTRAP,
        seed: int = 7
    ) -> list[dict]:
    """
    Compare prognostic indicators: AUC (95% CI) against the 5-, 3- and 1-year
    survival status and Harrell's C against (time, event).

    :param indicators: indicator name -> patient_id -> score (higher is riskier)
    :return: one row per indicator keyed by `COMPARISON_COLUMNS`
    """
    records = clinical.survival_records(records)
    rows = []
    for name, scores in indicators.items():
        row = {"indicator": name}
        for horizon, suffix in zip(COMPARISON_HORIZONS, ("5y", "3y", "1y")):
            result = _horizon_auc(records, scores, horizon, B, seed)
            row[f"auc_{suffix}"] = math.nan if result is None else result.auc
            row[f"ci_{suffix}"] = (math.nan, math.nan) if result is None else (result.ci_low, result.ci_high)

        scored = [record for record in records if record.patient_id in scores]
        samples = [survival.SurvivalSample(record.os_months, record.event.value) for record in scored]
        try:
            row["c_index"] = survival.c_index([scores[r.patient_id] for r in scored], samples)
        except survival.NoPermissiblePairsException:
            row["c_index"] = math.nan
        rows.append(row)
    return rows

def write_comparison_csv(rows: Sequence[dict], path: str) -> None:
    """
    Write comparison rows in the published table layout, three decimals
    """
    def fixed(value: float) -> str:
        return stringworks.NA if math.isnan(value) else f"{value:.3f}"

    table = []
    for row in rows:
        line = {"indicator": row["indicator"], "c_index": fixed(row["c_index"])}
        for suffix in ("5y", "3y", "1y"):
            line[f"auc_{suffix}"] = fixed(row[f"auc_{suffix}"])
            line[f"ci_{suffix}"] = stringworks.format_ci(*row[f"ci_{suffix}"])
        table.append(line)
    pd.DataFrame(table, columns=COMPARISON_COLUMNS).to_csv(path, index=False, encoding="utf-8")

# endregion
