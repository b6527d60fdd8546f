import sys
import os
import tempfile

# prepare sys.path for importing modules from parent directory
current = os.path.dirname(os.path.realpath(__file__))
parent = os.path.dirname(current)
sys.path.append(parent)

import unittest
import clinical
from clinical import Event, HorizonLabel, Subtype, Task

FIXTURE = os.path.join(current, "clinical_fixture.csv")
HEADER = ",".join(clinical.CLINICAL_COLUMNS)


def write_csv(directory: str, text: str, name: str = "clinical.csv") -> str:
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


class TestClinicalParsing(unittest.TestCase):
    maxDiff = None

    records = clinical.parse_clinical_csv(FIXTURE)

    def test_parse_fixture(self):
        self.assertEqual([r.patient_id for r in self.records],
                         ["P001", "P002", "P003", "P004", "P005", "P006", "P007"])
        first = self.records[0]
        self.assertEqual(first.cohort, "TRAIN")
        self.assertEqual(first.age_years, 61)
        self.assertEqual(first.sex, clinical.Sex.M)
        self.assertEqual(first.stage, 1)
        self.assertEqual(first.grade, 2)
        self.assertEqual(first.subtype, Subtype.CCRCC)
        self.assertEqual(first.os_months, 84.5)
        self.assertEqual(first.event, Event.ALIVE)

    def test_unknown_values(self):
        self.assertIsNone(self.records[2].grade)
        self.assertFalse(self.records[2].grade_known)
        self.assertEqual(self.records[5].event, Event.UNKNOWN)
        self.assertFalse(self.records[5].event_known)
        self.assertEqual(self.records[6].subtype, Subtype.ONCOCYTOMA)

    def test_bad_grade_names_row_and_field(self):
        with tempfile.TemporaryDirectory() as directory:
            path = write_csv(directory, f"{HEADER}\nP1,A,50,M,2,2,ccRCC,10,0\nP2,A,50,M,2,5,ccRCC,10,0\n")
            with self.assertRaises(clinical.BadEnumValueException) as context:
                clinical.parse_clinical_csv(path)
        self.assertEqual(context.exception.row, 3)
        self.assertEqual(context.exception.field, "grade")

    def test_bad_enums(self):
        bad_rows = {
            "sex": "P1,A,50,X,2,2,ccRCC,10,0",
            "stage": "P1,A,50,M,0,2,ccRCC,10,0",
            "subtype": "P1,A,50,M,2,2,RCC,10,0",
            "event": "P1,A,50,M,2,2,ccRCC,10,2",
        }
        with tempfile.TemporaryDirectory() as directory:
            for field, row in bad_rows.items():
                path = write_csv(directory, f"{HEADER}\n{row}\n")
                with self.assertRaises(clinical.BadEnumValueException) as context:
                    clinical.parse_clinical_csv(path)
                self.assertEqual(context.exception.field, field)
                self.assertEqual(context.exception.row, 2)

    def test_negative_time(self):
        with tempfile.TemporaryDirectory() as directory:
            path = write_csv(directory, f"{HEADER}\nP1,A,50,M,2,2,ccRCC,-1,0\n")
            with self.assertRaises(clinical.NegativeTimeException) as context:
                clinical.parse_clinical_csv(path)
        self.assertEqual(context.exception.field, "os_months")
        self.assertIsInstance(context.exception, clinical.RowException)

    def test_missing_column(self):
        header = ",".join(c for c in clinical.CLINICAL_COLUMNS if c != "grade")
        with tempfile.TemporaryDirectory() as directory:
            path = write_csv(directory, f"{header}\nP1,A,50,M,2,ccRCC,10,0\n")
            with self.assertRaises(clinical.MissingColumnException) as context:
                clinical.parse_clinical_csv(path)
        self.assertTrue("grade" in str(context.exception))

    def test_write_then_parse_keeps_records(self):
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "copy.csv")
            clinical.write_clinical_csv(self.records, path)
            self.assertEqual(clinical.parse_clinical_csv(path), self.records)


class TestLabels(unittest.TestCase):
    records = clinical.parse_clinical_csv(FIXTURE)

    def test_high_grade_label(self):
        self.assertFalse(clinical.high_grade_label(1))
        self.assertFalse(clinical.high_grade_label(2))
        self.assertTrue(clinical.high_grade_label(3))
        self.assertTrue(clinical.high_grade_label(4))
        with self.assertRaises(clinical.UnknownGradeException):
            clinical.high_grade_label(None)

    def test_horizon_label(self):
        self.assertEqual(clinical.horizon_label(60.0, Event.DEAD, 60), HorizonLabel.POSITIVE)
        self.assertEqual(clinical.horizon_label(12.0, Event.DEAD, 60), HorizonLabel.POSITIVE)
        self.assertEqual(clinical.horizon_label(60.0, Event.ALIVE, 60), HorizonLabel.NEGATIVE)
        self.assertEqual(clinical.horizon_label(61.0, Event.DEAD, 60), HorizonLabel.NEGATIVE)
        self.assertEqual(clinical.horizon_label(59.9, Event.ALIVE, 60), HorizonLabel.EXCLUDED)
        with self.assertRaises(clinical.UnknownEventException):
            clinical.horizon_label(10.0, Event.UNKNOWN, 60)
        with self.assertRaises(ValueError):
            clinical.horizon_label(10.0, Event.DEAD, 0)

    def test_grade_task_records(self):
        kept = [r.patient_id for r in clinical.grade_task_records(self.records)]
        self.assertEqual(kept, ["P001", "P002", "P004", "P005", "P006", "P007"])

    def test_survival_records_drop_unknown_and_zero_time(self):
        with self.assertLogs("clinical", level="WARNING"):
            kept = [r.patient_id for r in clinical.survival_records(self.records)]
        self.assertEqual(kept, ["P001", "P002", "P003", "P004", "P007"])

    def test_survival_samples(self):
        with self.assertLogs("clinical", level="WARNING"):
            plain = clinical.survival_samples(self.records)
        self.assertEqual([(s.time, s.event, s.covariates) for s in plain[:2]],
                         [(84.5, 0, ()), (14.0, 1, ())])
        self.assertEqual(len(plain), 5)
        with self.assertLogs("clinical", level="WARNING"):
            scored = clinical.survival_samples(self.records, {"P002": [0.7], "P005": [0.1], "P007": (0.2,)})
        self.assertEqual([(s.time, s.covariates) for s in scored], [(14.0, (0.7,)), (61.2, (0.2,))])

    def test_task_labels(self):
        self.assertEqual(clinical.task_labels(self.records, Task.DIAGNOSIS),
                         {"P001": 1, "P002": 1, "P003": 1, "P004": 1, "P005": 1, "P006": 0, "P007": 1})
        self.assertEqual(clinical.task_labels(self.records, "subtype"),
                         {"P001": 0, "P002": 0, "P003": 1, "P004": 2, "P005": 0})
        self.assertEqual(clinical.task_labels(self.records, Task.GRADE_RISK),
                         {"P001": 0, "P002": 1, "P004": 0, "P005": 1, "P006": 0, "P007": 1})
        self.assertEqual(clinical.task_labels(self.records, Task.OS_RISK, 60),
                         {"P001": 0, "P002": 1, "P003": 1, "P005": 1, "P007": 0})


class TestScoresAndFolds(unittest.TestCase):

    def test_scores_file(self):
        scores = {"P2": 0.25, "P1": 0.1 + 0.2}
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "scores.csv")
            clinical.write_scores_csv(scores, path)
            with open(path, encoding="utf-8") as f:
                self.assertEqual(f.read().splitlines()[0], "patient_id,score")
            self.assertEqual(clinical.parse_scores_csv(path), scores)

    def test_scores_bad_value(self):
        with tempfile.TemporaryDirectory() as directory:
            path = write_csv(directory, "patient_id,score\nP1,0.5\nP2,high\n", "scores.csv")
            with self.assertRaises(clinical.BadEnumValueException) as context:
                clinical.parse_scores_csv(path)
        self.assertEqual(context.exception.row, 3)

    def test_patient_folds_partition(self):
        ids = [f"P{i:03d}" for i in range(23)]
        folds = clinical.patient_folds(ids, k=5, seed=3)
        self.assertEqual(len(folds), 5)
        self.assertEqual(sorted(p for fold in folds for p in fold), ids)
        self.assertTrue(max(map(len, folds)) - min(map(len, folds)) <= 1)
        self.assertEqual(folds, clinical.patient_folds(reversed(ids), k=5, seed=3))
        with self.assertRaises(ValueError):
            clinical.patient_folds(ids[:3], k=5)


if __name__ == "__main__":
    unittest.main()
