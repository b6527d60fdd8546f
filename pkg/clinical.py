from __future__ import annotations
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence, Union
import numpy as np
import pandas as pd
import stringworks
from survival import SurvivalSample

logger = logging.getLogger(__name__)


class ClinicalException(Exception): pass
class MissingColumnException(ClinicalException): pass
class UnknownGradeException(ClinicalException): pass
class UnknownEventException(ClinicalException): pass

class RowException(ClinicalException):
    def __init__(self, row: int, field: str, message: str):
        super().__init__(f"row {row}, field `{field}`: {message}")
        self.row = row
        self.field = field

class BadEnumValueException(RowException): pass
class NegativeTimeException(RowException): pass


CLINICAL_COLUMNS = ["patient_id", "cohort", "age_years", "sex", "stage",
                    "grade", "subtype", "os_months", "event"]
SCORE_COLUMNS = ["patient_id", "score"]


class Sex(Enum):
    M = "M"
    F = "F"

class Subtype(Enum):
    CCRCC = "ccRCC"
    PRCC = "pRCC"
    CHRCC = "ChRCC"
    ONCOCYTOMA = "ONCO"
    NORMAL = "NORMAL"

class Event(Enum):
    ALIVE = 0
    DEAD = 1
    UNKNOWN = -1

class HorizonLabel(Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    EXCLUDED = "Excluded"

class Task(Enum):
    DIAGNOSIS = "diagnosis"
    SUBTYPE = "subtype"
    GRADE_RISK = "grade_risk"
    OS_RISK = "os_risk"


# label index of each subtype for the 3-class subtyping head
SUBTYPE_CLASSES = {Subtype.CCRCC: 0, Subtype.PRCC: 1, Subtype.CHRCC: 2}


@dataclass(frozen=True)
class ClinicalRecord:
    patient_id: str
    cohort: str
    age_years: int
    sex: Sex
    stage: int
    grade: Optional[int] # None is Unknown
    subtype: Subtype
    os_months: float
    event: Event

    @property
    def grade_known(self) -> bool:
        return self.grade is not None

    @property
    def event_known(self) -> bool:
        return self.event is not Event.UNKNOWN


def _parse_int(text: str, row: int, field: str, allowed: Iterable[int]) -> int:
    try:
        value = int(text)
    except ValueError:
        raise BadEnumValueException(row, field, f"`{text}` is not an integer")
    if value not in allowed:
        raise BadEnumValueException(row, field, f"`{text}` is not one of {sorted(allowed)}")
    return value

def _parse_enum(enum_cls, text: str, row: int, field: str):
    try:
        return enum_cls(text)
    except ValueError:
        allowed = ", ".join(str(member.value) for member in enum_cls)
        raise BadEnumValueException(row, field, f"`{text}` is not one of {allowed}")

def parse_clinical_row(values: dict, row: int) -> ClinicalRecord:
    """
    Validate one clinical.csv data row

    :param values: column name to raw text
    :param row: 1-based line number in the file, used in error messages
    :return: ClinicalRecord
    :raises: BadEnumValueException, NegativeTimeException
    """
    patient_id = values["patient_id"].strip()
    if not patient_id:
        raise BadEnumValueException(row, "patient_id", "empty patient id")

    age_text = values["age_years"].strip()
    try:
        age = int(age_text)
    except ValueError:
        raise BadEnumValueException(row, "age_years", f"`{age_text}` is not an integer")
    if age < 0:
        raise BadEnumValueException(row, "age_years", f"`{age_text}` is negative")

    grade_text = values["grade"].strip()
    grade = None if grade_text == stringworks.NA else \
        _parse_int(grade_text, row, "grade", range(1, 5))

    time_text = values["os_months"].strip()
    try:
        os_months = float(time_text)
    except ValueError:
        raise BadEnumValueException(row, "os_months", f"`{time_text}` is not a number")
    if not math.isfinite(os_months):
        raise BadEnumValueException(row, "os_months", f"`{time_text}` is not finite")
    if os_months < 0:
        raise NegativeTimeException(row, "os_months", f"follow-up time {time_text} is negative")

    event_text = values["event"].strip()
    if event_text == stringworks.NA:
        event = Event.UNKNOWN
    else:
        event = {"0": Event.ALIVE, "1": Event.DEAD}.get(event_text)
        if event is None:
            raise BadEnumValueException(row, "event", f"`{event_text}` is not one of 0, 1, NA")

    return ClinicalRecord(
        patient_id=patient_id,
        cohort=values["cohort"].strip(),
        age_years=age,
        sex=_parse_enum(Sex, values["sex"].strip(), row, "sex"),
        stage=_parse_int(values["stage"].strip(), row, "stage", range(1, 5)),
        grade=grade,
        subtype=_parse_enum(Subtype, values["subtype"].strip(), row, "subtype"),
        os_months=os_months,
        event=event
    )

def parse_clinical_csv(path: str) -> list[ClinicalRecord]:
    """
    Read a clinical.csv file

    :param path: path to a UTF-8 CSV with the documented header
    :return: one record per data row
    :raises: MissingColumnException if the header differs from the schema
    :raises: BadEnumValueException, NegativeTimeException for invalid rows
    """
    table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    columns = list(table.columns)
    missing = [column for column in CLINICAL_COLUMNS if column not in columns]
    if missing:
        raise MissingColumnException(f"{path}: missing column(s) {', '.join(missing)}")
    if columns != CLINICAL_COLUMNS:
        raise MissingColumnException(
            f"{path}: header must be exactly `{','.join(CLINICAL_COLUMNS)}`, got `{','.join(columns)}`"
        )

    # header is line 1
    records = [parse_clinical_row(values, index + 2)
               for index, values in enumerate(table.to_dict("records"))]
    logger.debug("parsed %d clinical records from %s", len(records), path)
    return records

def write_clinical_csv(records: Sequence[ClinicalRecord], path: str) -> None:
    rows = [
        {
            "patient_id": record.patient_id,
            "cohort": record.cohort,
            "age_years": str(record.age_years),
            "sex": record.sex.value,
            "stage": str(record.stage),
            "grade": stringworks.NA if record.grade is None else str(record.grade),
            "subtype": record.subtype.value,
            "os_months": stringworks.format_float(record.os_months),
            "event": stringworks.NA if record.event is Event.UNKNOWN else str(record.event.value)
        }
        for record in records
    ]
    pd.DataFrame(rows, columns=CLINICAL_COLUMNS).to_csv(path, index=False, encoding="utf-8")

def high_grade_label(grade: Optional[int]) -> bool:
    """
    High-grade training label: grade III and IV are positive.

    :raises: UnknownGradeException when the grade is Unknown
    """
    if grade is None:
        raise UnknownGradeException("grade is Unknown")
    return grade in (3, 4)

def horizon_label(os_months: float, event: Event, horizon_months: float = 60) -> HorizonLabel:
    """
    Survival status at a follow-up horizon.
    A death at exactly the horizon is Positive; alive before the horizon is Excluded.

    :raises: UnknownEventException when the event status is Unknown
    """
    if event is Event.UNKNOWN:
        raise UnknownEventException("event status is Unknown")
    if horizon_months <= 0:
        raise ValueError("horizon_months must be positive")
    if event is Event.DEAD and os_months <= horizon_months:
        return HorizonLabel.POSITIVE
    if os_months >= horizon_months:
        return HorizonLabel.NEGATIVE
    return HorizonLabel.EXCLUDED

def grade_task_records(records: Iterable[ClinicalRecord]) -> list[ClinicalRecord]:
    return [record for record in records if record.grade_known]

def survival_records(records: Iterable[ClinicalRecord]) -> list[ClinicalRecord]:
    """
    Records usable for survival computations: known event, positive follow-up time
    """
    usable = []
    for record in records:
        if not record.event_known:
            continue
        if record.os_months <= 0:
            logger.warning("patient %s has zero follow-up time, dropped from survival analysis",
                           record.patient_id)
            continue
        usable.append(record)
    return usable

def survival_samples(
        records: Iterable[ClinicalRecord],
        covariates: Optional[Mapping[str, Sequence[float]]] = None
    ) -> list[SurvivalSample]:
    """
    Survival samples of the usable records, in record order.
    With `covariates`, patients missing from the mapping are left out.
    """
    samples = []
    for record in survival_records(records):
        if covariates is None:
            values = ()
        elif record.patient_id in covariates:
            values = tuple(covariates[record.patient_id])
        else:
            continue
        samples.append(SurvivalSample(record.os_months, record.event.value, values))
    return samples

def task_labels(
        records: Iterable[ClinicalRecord],
        task: Union[Task, str],
        horizon_months: float = 60
    ) -> dict[str, int]:
    """
    Slide-level training labels for a MIL task, keyed by patient id.
    Records the task cannot label are left out.
    """
    task = Task(task)
    labels = {}
    for record in records:
        if task is Task.DIAGNOSIS:
            labels[record.patient_id] = 0 if record.subtype is Subtype.NORMAL else 1
        elif task is Task.SUBTYPE:
            if record.subtype in SUBTYPE_CLASSES:
                labels[record.patient_id] = SUBTYPE_CLASSES[record.subtype]
        elif task is Task.GRADE_RISK:
            if record.grade_known:
                labels[record.patient_id] = int(high_grade_label(record.grade))
        elif task is Task.OS_RISK:
            if not record.event_known:
                continue
            label = horizon_label(record.os_months, record.event, horizon_months)
            if label is not HorizonLabel.EXCLUDED:
                labels[record.patient_id] = int(label is HorizonLabel.POSITIVE)
    return labels

def parse_scores_csv(path: str) -> dict[str, float]:
    """
    Read a `patient_id,score` file

    :raises: MissingColumnException if a column is missing
    :raises: BadEnumValueException if a score is not a number
    """
    table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [column for column in SCORE_COLUMNS if column not in table.columns]
    if missing:
        raise MissingColumnException(f"{path}: missing column(s) {', '.join(missing)}")
    scores = {}
    for index, values in enumerate(table.to_dict("records")):
        try:
            scores[values["patient_id"].strip()] = stringworks.parse_float(values["score"])
        except ValueError:
            raise BadEnumValueException(index + 2, "score", f"`{values['score']}` is not a number")
    return scores

def write_scores_csv(scores: dict[str, float], path: str) -> None:
    rows = [{"patient_id": patient_id, "score": stringworks.format_float(score)}
            for patient_id, score in sorted(scores.items())]
    pd.DataFrame(rows, columns=SCORE_COLUMNS).to_csv(path, index=False, encoding="utf-8")

def patient_folds(patient_ids: Iterable[str], k: int = 5, seed: int = 7) -> list[list[str]]:
    """
    Split patients into k disjoint folds of near-equal size.
    Every patient lands in exactly one fold.
    """
    ids = sorted(set(patient_ids))
    if k < 2 or k > len(ids):
        raise ValueError(f"cannot split {len(ids)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [sorted(ids[i] for i in order[fold::k]) for fold in range(k)]
