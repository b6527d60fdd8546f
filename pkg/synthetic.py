"""
Seeded synthetic fixtures standing in for the private cohorts:
MIL bags with a planted signal pattern, clinical cohorts whose hazard is a known
linear predictor, and small raster slides for the end-to-end pipeline.
"""
from __future__ import annotations
import math
from typing import Mapping, Optional, Tuple
import numpy as np
import clinical
import survival
from imaging import RasterImage
from mil import Bag

SIGNAL_DIMS = 8
PATCH_GRID = 5

# hazard log-ratios per unit of each covariate
DEFAULT_COEFFICIENTS = {"grade_risk": 1.5, "os_risk": 1.5, "grade": 0.5, "stage": 0.5}

TISSUE_RGB = (228, 160, 200)
TUMOR_RGB = (96, 48, 128)


def signal_pattern(dim: int = 64, strength: float = 3.0) -> np.ndarray:
    pattern = np.zeros(dim)
    pattern[:SIGNAL_DIMS] = strength
    return pattern

def make_signal_bags(
        n_bags: int,
        seed: int,
        dim: int = 64,
        size_range: Tuple[int, int] = (5, 20),
        strength: float = 3.0,
        cell: int = 1024
    ) -> Tuple[list[Bag], list[np.ndarray]]:
    """
    Bags of N(0, 1) patch features; positive bags (label 1) carry the signal
    pattern in one to three of their patches, never more than a third of the bag.

    :return: bags and, per bag, a boolean array marking signal patches in canonical row order
    """
    rng = np.random.default_rng(seed)
    pattern = signal_pattern(dim, strength)
    bags, flags = [], []
    for index in range(n_bags):
        n = int(rng.integers(size_range[0], size_range[1] + 1))
        label = int(rng.integers(0, 2))
        features = rng.normal(0.0, 1.0, size=(n, dim))
        signal = np.zeros(n, dtype=bool)
        if label == 1:
            count = int(rng.integers(1, min(3, max(1, n // 3)) + 1))
            signal[rng.choice(n, size=count, replace=False)] = True
            features[signal] += pattern
        # raster order coordinates, already canonical
        coords = np.array([((k % PATCH_GRID) * cell, (k // PATCH_GRID) * cell) for k in range(n)])
        bags.append(Bag(slide_id=f"S{index:04d}", features=features, coords=coords, label=label))
        flags.append(signal)
    return bags, flags

def make_cohort(
        n_patients: int,
        seed: int,
        coefficients: Optional[Mapping[str, float]] = None,
        median_months: float = 60.0,
        cohort: str = "SYNTH"
    ) -> Tuple[list[clinical.ClinicalRecord], dict[str, dict[str, float]]]:
    """
    Cohort whose true log-hazard is Σ coefficient·covariate over grade_risk,
    os_risk, grade and stage, with exponential event times and uniform censoring.

    :return: clinical records and covariate values keyed by patient id
    """
    coefficients = dict(coefficients or DEFAULT_COEFFICIENTS)
    rng = np.random.default_rng(seed)
    grade = rng.integers(1, 5, size=n_patients)
    stage = rng.integers(1, 5, size=n_patients)
    grade_risk = rng.uniform(0.0, 1.0, size=n_patients)
    os_risk = rng.uniform(0.0, 1.0, size=n_patients)
    lp = coefficients["grade"] * (grade - 2.5) + coefficients["stage"] * (stage - 2.5) + \
        coefficients["grade_risk"] * (grade_risk - 0.5) + coefficients["os_risk"] * (os_risk - 0.5)
    rate = math.log(2.0) / median_months * np.exp(lp)
    event_time = rng.exponential(1.0 / rate)
    censor_time = rng.uniform(12.0, 150.0, size=n_patients)
    ages = rng.integers(30, 85, size=n_patients)
    sexes = rng.integers(0, 2, size=n_patients)

    records, covariates = [], {}
    for i in range(n_patients):
        patient_id = f"P{i:04d}"
        dead = event_time[i] <= censor_time[i]
        os_months = round(float(min(event_time[i], censor_time[i])), 2)
        records.append(clinical.ClinicalRecord(
            patient_id=patient_id,
            cohort=cohort,
            age_years=int(ages[i]),
            sex=clinical.Sex.M if sexes[i] else clinical.Sex.F,
            stage=int(stage[i]),
            grade=int(grade[i]),
            subtype=clinical.Subtype.CCRCC,
            os_months=max(os_months, 0.01),
            event=clinical.Event.DEAD if dead else clinical.Event.ALIVE
        ))
        covariates[patient_id] = {"grade_risk": float(grade_risk[i]), "os_risk": float(os_risk[i]),
                                  "grade": float(grade[i]), "stage": float(stage[i])}
    return records, covariates

def exponential_groups(
        n_per_arm: int,
        rate_ratio: float,
        seed: int,
        base_rate: float = 0.02
    ) -> Tuple[list[survival.SurvivalSample], list[survival.SurvivalSample]]:
    """
    Two uncensored exponential arms; group A's hazard is `rate_ratio` times group B's
    """
    rng = np.random.default_rng(seed)
    a = rng.exponential(1.0 / (base_rate * rate_ratio), size=n_per_arm)
    b = rng.exponential(1.0 / base_rate, size=n_per_arm)
    return ([survival.SurvivalSample(float(t), 1) for t in a],
            [survival.SurvivalSample(float(t), 1) for t in b])

def make_slide(
        seed: int,
        width: int,
        height: int,
        patch_size: int,
        tumor_share: float
    ) -> RasterImage:
    """
    Slide raster: white margins, noisy pink tissue, and dark tumor tiles in
    roughly `tumor_share` of the tissue tiles.
    """
    rng = np.random.default_rng(seed)
    pixels = np.full((height, width, 3), 245, dtype=np.int64)
    margin_x, margin_y = width // 8, height // 8
    tissue = np.zeros((height, width), dtype=bool)
    tissue[margin_y:height - margin_y, margin_x:width - margin_x] = True
    noise = rng.integers(-20, 21, size=(height, width, 3))
    pixels[tissue] = np.array(TISSUE_RGB) + noise[tissue]

    for y in range(0, height - patch_size + 1, patch_size):
        for x in range(0, width - patch_size + 1, patch_size):
            if not tissue[y:y + patch_size, x:x + patch_size].any() or rng.uniform() >= tumor_share:
                continue
            block = np.array(TUMOR_RGB) + noise[y:y + patch_size, x:x + patch_size] * 2
            region = tissue[y:y + patch_size, x:x + patch_size]
            pixels[y:y + patch_size, x:x + patch_size][region] = block[region]
    return RasterImage(np.clip(pixels, 0, 255).astype(np.uint8))
