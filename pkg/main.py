#!/usr/bin/env python3
from __future__ import annotations
import argparse
import logging
import os
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence, Tuple
import pandas as pd
from colorama import Fore, Style
from config import Config
import clinical
import command_help
import imaging
import metrics
import mil
import nomogram
import report
import stringworks
import survival
import synthetic

logger = logging.getLogger(__name__)

config_name = "rcc.cfg"
scriptDir = os.path.dirname(os.path.realpath(__file__))
configPath = os.path.join(scriptDir, config_name)
fallbackConfigPath = os.path.join(scriptDir, "config_example.cfg")

DATA_ERRORS = (
    clinical.ClinicalException,
    imaging.ImagingException,
    mil.MilException,
    survival.SurvivalException,
    metrics.MetricsException,
    nomogram.NomogramException,
    report.ReportException,
    OSError,
    ValueError,
)

# nomogram chart ranges of the combined model's covariates
CRN_RANGES = {"grade_risk": (0.0, 1.0), "os_risk": (0.0, 1.0), "grade": (1.0, 4.0), "stage": (1.0, 4.0)}
CLINICAL_COVARIATES = ("age", "grade", "stage")


class UsageException(Exception):
    def __init__(self, message: str, command: Optional[str] = None):
        super().__init__(message)
        self.command = command


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        command = self.prog.split()[-1]
        raise UsageException(message, command if command in command_help.commands else None)


class LevelFormatter(logging.Formatter):
    COLORS = {logging.DEBUG: Fore.CYAN, logging.WARNING: Fore.YELLOW,
              logging.ERROR: Fore.RED, logging.CRITICAL: Fore.RED}

    def format(self, record):
        text = super().format(record)
        color = self.COLORS.get(record.levelno)
        return f"{color}{text}{Style.RESET_ALL}" if color else text


def setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(LevelFormatter("%(levelname)s %(name)s: %(message)s"))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, handlers=[handler], force=True)

def load_config(path: Optional[str]) -> Config:
    if path is not None:
        return Config(path)
    return Config(configPath if os.path.exists(configPath) else fallbackConfigPath)


#region [helpers]

def _pick(flag, default):
    return default if flag is None else flag

def _slide_id(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]

def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)

def _named_paths(values: Optional[Sequence[str]], command: str) -> dict[str, str]:
    """
    `NAME=path` options as an ordered dict; a bare path is named after its file stem
    """
    named = {}
    for value in values or []:
        name, sep, path = value.partition("=")
        if not sep:
            name, path = _slide_id(value), value
        if not name or not path:
            raise UsageException(f"expected NAME=path, got `{value}`", command)
        if name in named:
            raise UsageException(f"`{name}` given twice", command)
        named[name] = path
    return named

def _read_groups(path: str) -> dict[str, str]:
    table = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [column for column in ("patient_id", "group") if column not in table.columns]
    if missing:
        raise clinical.MissingColumnException(f"{path}: missing column(s) {', '.join(missing)}")
    return {row["patient_id"].strip(): row["group"].strip() for row in table.to_dict("records")}

def _sample(record: clinical.ClinicalRecord, covariates: Sequence[float] = ()) -> survival.SurvivalSample:
    return survival.SurvivalSample(record.os_months, record.event.value, tuple(covariates))

def _covariate_value(record: clinical.ClinicalRecord, name: str,
                     scores: dict[str, dict[str, float]]) -> Optional[float]:
    if name in scores:
        return scores[name].get(record.patient_id)
    if name == "grade":
        return None if record.grade is None else float(record.grade)
    if name == "stage":
        return float(record.stage)
    return float(record.age_years)

def _cox_json(model: survival.CoxModel, samples: Sequence[survival.SurvivalSample]) -> dict:
    events = sum(sample.event for sample in samples)
    return {
        "n": len(samples),
        "events": events,
        "loglik": model.loglik,
        "loglik_null": model.loglik_null,
        "iterations": model.iterations,
        "covariates": {name: report.estimate_dict(result, len(samples), events)
                       for name, result in survival.cox_summary(model).items()}
    }

def _group_comparison(by_group: dict[str, list[survival.SurvivalSample]],
                      group: str, reference: str) -> Tuple[Optional[survival.HazardRatioResult], dict]:
    """
    Hazard ratio and log-rank test of `group` against `reference`.
    A comparison the data cannot support is logged and left out.
    """
    samples = by_group[group] + by_group[reference]
    summary = {}
    try:
        test = survival.logrank(by_group[group], by_group[reference])
        summary["logrank"] = {"chi2": test.chi2, "p": test.p}
    except survival.NoEventsException as e:
        logger.warning("log-rank test skipped: %s", e)
    try:
        hr = survival.hazard_ratio_groups(by_group[group], by_group[reference])
    except (survival.InsufficientEventsException, survival.SeparationException,
            survival.NonConvergenceException) as e:
        logger.warning("hazard ratio of %s vs %s skipped: %s", group, reference, e)
        return None, summary
    summary["hazard_ratio"] = {"group": group, "reference": reference,
                               **report.estimate_dict(hr, len(samples), sum(s.event for s in samples))}
    logger.info("%s vs %s: HR %s", group, reference, stringworks.format_estimate(hr.hr, hr.ci_low, hr.ci_high))
    return hr, summary

#endregion


#region [commands]

def run_synth(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    records, covariates = synthetic.make_cohort(args.patients, seed)
    os.makedirs(args.out_dir, exist_ok=True)
    clinical_path = os.path.join(args.out_dir, "clinical.csv")
    clinical.write_clinical_csv(records, clinical_path)

    slide_dir = os.path.join(args.out_dir, "slides")
    os.makedirs(slide_dir, exist_ok=True)
    outputs = [clinical_path]
    for index, record in enumerate(records):
        # tumor burden follows the patient's true image risk
        slide = synthetic.make_slide(seed + index + 1, args.size, args.size, args.patch_size,
                                     covariates[record.patient_id]["os_risk"])
        path = os.path.join(slide_dir, f"{record.patient_id}.ppm")
        imaging.save_image(slide, path)
        outputs.append(path)
    logger.info("wrote %d synthetic patients to %s", len(records), args.out_dir)
    return outputs, []

def run_tile(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    image = imaging.load_image(args.input)
    tissue = imaging.detect_tissue(image, _pick(args.white_threshold, config.ImagingConfig.white_threshold))
    patches = imaging.tile_image(image, tissue,
                                 _pick(args.patch_size, config.ImagingConfig.patch_size),
                                 _pick(args.min_tissue, config.ImagingConfig.min_tissue))
    os.makedirs(args.out, exist_ok=True)
    slide_id = _slide_id(args.input)
    rows, outputs = [], []
    for patch in patches:
        path = os.path.join(args.out, f"{slide_id}_{patch.origin_x}_{patch.origin_y}.ppm")
        imaging.save_image(imaging.RasterImage(patch.pixels), path)
        outputs.append(path)
        rows.append({"slide_id": slide_id, "patch_x": patch.origin_x, "patch_y": patch.origin_y,
                     "tissue_fraction": stringworks.format_float(patch.tissue_fraction)})
    index_path = os.path.join(args.out, "patches.csv")
    pd.DataFrame(rows, columns=["slide_id", "patch_x", "patch_y", "tissue_fraction"]) \
        .to_csv(index_path, index=False, encoding="utf-8")
    logger.info("%s: %d tissue patches", slide_id, len(patches))
    return outputs + [index_path], [args.input]

def run_featurize(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    patch_size = _pick(args.patch_size, config.ImagingConfig.patch_size)
    min_tissue = _pick(args.min_tissue, config.ImagingConfig.min_tissue)
    white_threshold = _pick(args.white_threshold, config.ImagingConfig.white_threshold)
    paths = sorted(args.input, key=_slide_id)
    slide_ids = [_slide_id(path) for path in paths]
    if len(set(slide_ids)) != len(slide_ids):
        raise ValueError("slide file names must be unique, they become slide ids")

    def featurize(path: str) -> list:
        image = imaging.load_image(path)
        patches = imaging.tile_image(image, imaging.detect_tissue(image, white_threshold), patch_size, min_tissue)
        if not patches:
            logger.warning("%s has no tissue patches, skipped", path)
            return []
        descriptors = imaging.describe_patches(patches)
        return [(_slide_id(path), patch.origin_x, patch.origin_y, descriptor)
                for patch, descriptor in zip(patches, descriptors)]

    workers = _pick(args.workers, config.PipelineConfig.workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_slide = list(pool.map(featurize, paths))
    rows = [row for slide_rows in per_slide for row in slide_rows]
    if not rows:
        raise imaging.FeatureFileException("no slide yielded any tissue patch")
    _ensure_parent(args.out)
    imaging.write_features_csv(rows, args.out)
    logger.info("wrote %d patch descriptors of %d slides", len(rows), len(paths))
    return [args.out], list(paths)

def _class_aucs_json(class_aucs: dict) -> dict:
    names = {index: subtype.value for subtype, index in clinical.SUBTYPE_CLASSES.items()}
    return {names.get(key, key): value for key, value in class_aucs.items()}

def _write_cross_validation(
        out: str,
        bags: Sequence[mil.Bag],
        k: int,
        hyperparams: mil.MilHyperparams,
        n_classes: int,
        task: clinical.Task
    ) -> list[str]:
    """
    `<model>.oof.csv` with out-of-fold scores and `<model>.cv.json` with per-fold and mean AUC, next to the model
    """
    cv = mil.cross_validate(bags, k, hyperparams, n_classes=n_classes, task=task)
    stem = os.path.splitext(out)[0]
    scores_path, summary_path = f"{stem}.oof.csv", f"{stem}.cv.json"
    clinical.write_scores_csv(cv.scores, scores_path)
    summary = {
        "task": task.value,
        "k": k,
        "seed": hyperparams.seed,
        "folds": [{"fold": fold.fold, "n": len(fold.slide_ids), "auc": fold.auc,
                   "class_aucs": _class_aucs_json(fold.class_aucs)} for fold in cv.folds],
        "mean_auc": cv.mean_auc
    }
    if task is clinical.Task.SUBTYPE:
        try:
            summary["pooled_class_aucs"] = _class_aucs_json(cv.pooled_class_aucs())
        except metrics.SingleClassException as e:
            logger.warning("pooled one-vs-rest AUC left out: %s", e)
    report.write_json(summary, summary_path)
    logger.info("%d-fold cross-validation of %s: mean AUC %.4f", k, task.value, cv.mean_auc)
    return [scores_path, summary_path]

def run_train(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    task = clinical.Task(args.task)
    if args.folds is not None and args.folds < 2:
        raise UsageException(f"--folds needs at least 2 folds, got {args.folds}", "train")
    slides = imaging.read_features_csv(args.features)
    records = clinical.parse_clinical_csv(args.clinical)
    labels = clinical.task_labels(records, task, _pick(args.horizon, config.NomogramConfig.horizon))
    bags = mil.bags_from_features(slides, labels)
    skipped = len(slides) - len(bags)
    if skipped:
        logger.warning("%d slide(s) without a %s label left out of training", skipped, task.value)

    hyperparams = mil.MilHyperparams(
        attention_dim=_pick(args.attention_dim, config.MilConfig.attention_dim),
        hidden_dim=_pick(args.hidden_dim, config.MilConfig.hidden_dim),
        learning_rate=_pick(args.lr, config.MilConfig.learning_rate),
        weight_decay=config.MilConfig.weight_decay,
        epochs=_pick(args.epochs, config.MilConfig.epochs),
        seed=seed
    )
    n_classes = len(clinical.SUBTYPE_CLASSES) if task is clinical.Task.SUBTYPE else 2
    model = mil.mil_train(bags, hyperparams, n_classes=n_classes, task=task)
    _ensure_parent(args.out)
    mil.save_model(model, args.out)
    if model.loss_log:
        logger.info("trained %s on %d bags, final mean loss %.4f", task.value, len(bags), model.loss_log[-1])
    outputs = [args.out]
    if args.folds:
        outputs += _write_cross_validation(args.out, bags, args.folds, hyperparams, n_classes, task)
    return outputs, [args.features, args.clinical]

def run_predict(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    model = mil.load_model(args.model)
    bags = mil.bags_from_features(imaging.read_features_csv(args.features))
    scores = mil.predict_bags(bags, model, model.task, _pick(args.workers, config.PipelineConfig.workers))
    _ensure_parent(args.out)
    clinical.write_scores_csv({score.slide_id: score.value for score in scores}, args.out)
    outputs = [args.out]

    if args.heatmaps:
        os.makedirs(args.heatmaps, exist_ok=True)
        cell = _pick(args.cell, config.ImagingConfig.patch_size)
        for bag in bags:
            heatmap = mil.attention_heatmap(bag, mil.mil_forward(bag, model), cell)
            path = os.path.join(args.heatmaps, f"{bag.slide_id}.pgm")
            imaging.save_mask(heatmap, path)
            outputs.append(path)
    logger.info("scored %d slides for %s", len(scores), model.task)
    return outputs, [args.features, args.model]

def run_eval_seg(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    if len(args.pred) != len(args.truth):
        raise UsageException(f"{len(args.pred)} predicted masks for {len(args.truth)} truth masks", "eval-seg")
    if args.tissue and len(args.tissue) != len(args.pred):
        raise UsageException(f"{len(args.tissue)} slides for {len(args.pred)} masks", "eval-seg")
    threshold = _pick(args.threshold, config.ImagingConfig.positive_area)

    cases, pairs = [], []
    for index, (pred_path, truth_path) in enumerate(zip(args.pred, args.truth)):
        pred, truth = imaging.load_mask(pred_path), imaging.load_mask(truth_path)
        pairs.append((pred, truth))
        case = {
            "pred": pred_path,
            "truth": truth_path,
            "dice": imaging.dice_score(pred, truth),
            "dice_loss": imaging.dice_loss(pred, truth),
            "bce": imaging.bce_loss(pred, truth)
        }
        if args.tissue:
            tissue = imaging.detect_tissue(imaging.load_image(args.tissue[index]),
                                           config.ImagingConfig.white_threshold)
            fraction = imaging.tumor_area_fraction(pred, tissue)
            case["tumor_fraction"] = fraction
            case["positive"] = imaging.slide_positive(fraction, threshold)
        cases.append(case)

    result = {"cases": cases, "mean_dice": imaging.mean_dice(pairs), "threshold": threshold}
    _ensure_parent(args.out)
    report.write_json(result, args.out)
    logger.info("mean Dice %.4f over %d masks", result["mean_dice"], len(cases))
    return [args.out], list(args.pred) + list(args.truth) + list(args.tissue or [])

def run_survival(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    records = clinical.parse_clinical_csv(args.clinical)
    named = _named_paths(args.score, "survival")
    if args.mode == "anova" and len(named) != 1:
        raise UsageException("anova takes exactly one --score", "survival")
    scores = {name: clinical.parse_scores_csv(path) for name, path in named.items()}
    inputs = [args.clinical] + list(named.values())
    outputs = []

    if args.mode == "km":
        records = clinical.survival_records(records)
        groups = _read_groups(args.group_by) if args.group_by else {}
        if args.group_by:
            inputs.append(args.group_by)
        by_group: dict[str, list[survival.SurvivalSample]] = {}
        for record in records:
            if args.group_by and record.patient_id not in groups:
                continue
            by_group.setdefault(groups.get(record.patient_id, "All"), []).append(_sample(record))
        if not by_group:
            raise survival.EmptyInputException("no patient has both survival data and a group")
        names = sorted(by_group)
        curves = [(name, survival.km_estimate(by_group[name])) for name in names]
        result = {"groups": {name: report.km_curve_dict(curve) for name, curve in curves}}

        hr = None
        if len(names) == 2:
            reference = _pick(args.reference, names[0])
            if reference not in names:
                raise UsageException(f"reference group `{reference}` is not one of {names}", "survival")
            group = names[1] if reference == names[0] else names[0]
            hr, summary = _group_comparison(by_group, group, reference)
            result.update(summary)
        elif len(names) > 2:
            logger.warning("hazard ratio and log-rank need exactly two groups, got %d", len(names))
        if args.svg:
            _ensure_parent(args.svg)
            with open(args.svg, "wb") as f:
                f.write(report.render_km_svg(curves, hr))
            outputs.append(args.svg)

    elif args.mode == "cox":
        names = list(scores) + list(args.covariate or ("grade", "stage"))
        covariates = {}
        for record in records:
            values = [_covariate_value(record, name, scores) for name in names]
            if all(value is not None for value in values):
                covariates[record.patient_id] = values
        samples = clinical.survival_samples(records, covariates)
        logger.info("Cox model on %d patients, covariates %s", len(samples), ", ".join(names))
        model = survival.cox_fit(samples, names=names)
        print(report.format_summary(survival.cox_summary(model)))
        result = _cox_json(model, samples)

    else:
        name, values = next(iter(scores.items()))
        levels: dict[int, list[float]] = {}
        for record in records:
            level = record.grade if args.by == "grade" else record.stage
            if level is None or record.patient_id not in values:
                continue
            levels.setdefault(level, []).append(values[record.patient_id])
        ordered = sorted(levels)
        anova = survival.anova_oneway([levels[level] for level in ordered])
        result = {
            "score": name,
            "by": args.by,
            "levels": {str(level): {"n": len(levels[level]), "mean": sum(levels[level]) / len(levels[level])}
                       for level in ordered},
            "F": anova.F,
            "p": anova.p,
            "df_between": anova.df_between,
            "df_within": anova.df_within
        }
        logger.info("ANOVA of %s by %s: F = %.4g, p = %.4g", name, args.by, anova.F, anova.p)

    _ensure_parent(args.out)
    report.write_json(result, args.out)
    return outputs + [args.out], inputs

def run_nomogram(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    named = _named_paths(args.score, "nomogram")
    missing = [name for name in ("grade_risk", "os_risk") if name not in named]
    if missing:
        raise UsageException(f"missing --score {', '.join(name + '=...' for name in missing)}", "nomogram")
    scores = {name: clinical.parse_scores_csv(named[name]) for name in ("grade_risk", "os_risk")}
    records = clinical.survival_records(clinical.parse_clinical_csv(args.clinical))

    covariates, samples, usable = {}, [], []
    for record in records:
        values = [_covariate_value(record, name, scores) for name in nomogram.CRN_VARIABLES]
        if any(value is None for value in values):
            continue
        covariates[record.patient_id] = dict(zip(nomogram.CRN_VARIABLES, values))
        samples.append(_sample(record, values))
        usable.append(record)
    logger.info("combined model on %d of %d patients", len(samples), len(records))
    model = survival.cox_fit(samples, names=list(nomogram.CRN_VARIABLES))
    chart = nomogram.build_nomogram(model, CRN_RANGES)

    horizon = config.NomogramConfig.horizon
    points, labels = [], []
    for record in usable:
        label = clinical.horizon_label(record.os_months, record.event, horizon)
        if label is clinical.HorizonLabel.EXCLUDED:
            continue
        points.append(nomogram.score(chart, covariates[record.patient_id]))
        labels.append(int(label is clinical.HorizonLabel.POSITIVE))
    chart, cutoff = nomogram.choose_cutoff(chart, points, labels)
    logger.info("cutoff %.2f points: sensitivity %.3f, specificity %.3f",
                cutoff.threshold, cutoff.sensitivity, cutoff.specificity)

    os.makedirs(args.out_dir, exist_ok=True)
    chart_path = os.path.join(args.out_dir, "nomogram.json")
    scored_path = os.path.join(args.out_dir, "scored.csv")
    cox_path = os.path.join(args.out_dir, "cox.json")
    nomogram.save_nomogram(chart, chart_path)
    nomogram.write_scored_csv(nomogram.score_records(chart, covariates), scored_path)
    report.write_json(_cox_json(model, samples), cox_path)
    return [chart_path, scored_path, cox_path], [args.clinical] + list(named.values())

def run_compare(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    records = clinical.parse_clinical_csv(args.clinical)
    indicators = {
        "Grade": {record.patient_id: float(record.grade) for record in clinical.grade_task_records(records)},
        "Stage": {record.patient_id: float(record.stage) for record in records}
    }
    named = _named_paths(args.indicator, "compare")
    for name, path in named.items():
        indicators[name] = clinical.parse_scores_csv(path)
    inputs = [args.clinical] + list(named.values())
    if args.scored:
        indicators["CRN"] = {patient_id: points
                             for patient_id, (points, _) in nomogram.read_scored_csv(args.scored).items()}
        inputs.append(args.scored)

    rows = metrics.indicator_comparison(records, indicators,
                                        B=_pick(args.bootstrap, config.MetricsConfig.bootstrap), seed=seed)
    _ensure_parent(args.out)
    metrics.write_comparison_csv(rows, args.out)
    for row in rows:
        logger.info("%s: 5-year AUC %.3f, C-index %.3f", row["indicator"], row["auc_5y"], row["c_index"])
    return [args.out], inputs

def run_report(args, config: Config, seed: int) -> Tuple[list[str], list[str]]:
    records = clinical.survival_records(clinical.parse_clinical_csv(args.clinical))
    scored = nomogram.read_scored_csv(args.scored)
    records = [record for record in records if record.patient_id in scored]
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []

    by_group: dict[str, list[survival.SurvivalSample]] = {}
    for record in records:
        by_group.setdefault(scored[record.patient_id][1].value, []).append(_sample(record))
    order = [group.value for group in (nomogram.StratifiedGroup.WORSE, nomogram.StratifiedGroup.FAVORABLE)
             if group.value in by_group]
    curves = [(name, survival.km_estimate(by_group[name])) for name in order]
    km_result = {"groups": {name: report.km_curve_dict(curve) for name, curve in curves}}
    hr = None
    if len(order) == 2:
        hr, summary = _group_comparison(by_group, order[0], order[1])
        km_result.update(summary)
    km_svg = os.path.join(args.out_dir, "km.svg")
    with open(km_svg, "wb") as f:
        f.write(report.render_km_svg(curves, hr))
    km_json = os.path.join(args.out_dir, "km.json")
    report.write_json(km_result, km_json)
    outputs += [km_svg, km_json]

    roc_curves = []
    bootstrap = _pick(args.bootstrap, config.MetricsConfig.bootstrap)
    for horizon in nomogram.SURVIVAL_HORIZONS:
        points, labels = [], []
        for record in records:
            label = clinical.horizon_label(record.os_months, record.event, horizon)
            if label is clinical.HorizonLabel.EXCLUDED:
                continue
            points.append(scored[record.patient_id][0])
            labels.append(int(label is clinical.HorizonLabel.POSITIVE))
        try:
            curve = metrics.roc_curve(points, labels)
            auc = metrics.auc_ci(points, labels, B=bootstrap, seed=seed)
        except metrics.SingleClassException:
            logger.warning("single class at %d months, ROC skipped", horizon)
            continue
        path = os.path.join(args.out_dir, f"roc_points_{horizon}m.csv")
        metrics.write_roc_points_csv(curve, path)
        outputs.append(path)
        roc_curves.append((f"{horizon} months", curve, auc))

    if roc_curves:
        roc_svg = os.path.join(args.out_dir, "roc.svg")
        with open(roc_svg, "wb") as f:
            f.write(report.render_roc_svg(roc_curves, title="Total points"))
        outputs.append(roc_svg)
    return outputs, [args.clinical, args.scored]

#endregion


COMMANDS = {
    "synth": run_synth,
    "tile": run_tile,
    "featurize": run_featurize,
    "train": run_train,
    "predict": run_predict,
    "eval-seg": run_eval_seg,
    "survival": run_survival,
    "nomogram": run_nomogram,
    "compare": run_compare,
    "report": run_report,
}


def build_parser() -> CliParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="overrides [pipeline] seed and RCC_SEED")
    common.add_argument("--workers", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = CliParser(prog=command_help.PROG, description="RCC slide and survival pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    def add(name: str) -> CliParser:
        description, usage = command_help.commands[name]
        return subparsers.add_parser(name, parents=[common], description=description, usage=usage)

    def imaging_options(sub: CliParser) -> None:
        sub.add_argument("--patch-size", type=int)
        sub.add_argument("--min-tissue", type=float)
        sub.add_argument("--white-threshold", type=int)

    sub = add("synth")
    sub.add_argument("--out-dir", required=True)
    sub.add_argument("--patients", type=int, default=40)
    sub.add_argument("--size", type=int, default=256)
    sub.add_argument("--patch-size", type=int, default=32)

    sub = add("tile")
    sub.add_argument("--input", required=True)
    sub.add_argument("--out", required=True)
    imaging_options(sub)

    sub = add("featurize")
    sub.add_argument("--input", nargs="+", required=True)
    sub.add_argument("--out", required=True)
    imaging_options(sub)

    sub = add("train")
    sub.add_argument("--features", required=True)
    sub.add_argument("--clinical", required=True)
    sub.add_argument("--task", required=True, choices=[task.value for task in clinical.Task])
    sub.add_argument("--horizon", type=float)
    sub.add_argument("--out", required=True)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--attention-dim", type=int)
    sub.add_argument("--hidden-dim", type=int)
    sub.add_argument("--folds", type=int, help="also write patient-level k-fold out-of-fold scores")

    sub = add("predict")
    sub.add_argument("--features", required=True)
    sub.add_argument("--model", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--heatmaps")
    sub.add_argument("--cell", type=int)

    sub = add("eval-seg")
    sub.add_argument("--pred", nargs="+", required=True)
    sub.add_argument("--truth", nargs="+", required=True)
    sub.add_argument("--tissue", nargs="+")
    sub.add_argument("--threshold", type=float)
    sub.add_argument("--out", required=True)

    sub = add("survival")
    sub.add_argument("mode", choices=["km", "cox", "anova"])
    sub.add_argument("--clinical", required=True)
    sub.add_argument("--group-by")
    sub.add_argument("--reference")
    sub.add_argument("--score", action="append")
    sub.add_argument("--covariate", action="append", choices=CLINICAL_COVARIATES)
    sub.add_argument("--by", choices=["grade", "stage"], default="grade")
    sub.add_argument("--svg")
    sub.add_argument("--out", required=True)

    sub = add("nomogram")
    sub.add_argument("--clinical", required=True)
    sub.add_argument("--score", action="append", required=True)
    sub.add_argument("--out-dir", required=True)

    sub = add("compare")
    sub.add_argument("--clinical", required=True)
    sub.add_argument("--scored")
    sub.add_argument("--indicator", action="append")
    sub.add_argument("--bootstrap", type=int)
    sub.add_argument("--out", required=True)

    sub = add("report")
    sub.add_argument("--clinical", required=True)
    sub.add_argument("--scored", required=True)
    sub.add_argument("--bootstrap", type=int)
    sub.add_argument("--out-dir", required=True)
    return parser

def _usage_error(e: UsageException) -> int:
    print(stringworks.error_text(f"{command_help.PROG}: {e}"), file=sys.stderr)
    print(command_help.get_commands(e.command), file=sys.stderr)
    return 1

def cli_dispatch(argv: Sequence[str]) -> int:
    """
    Run one subcommand. Exit status 0 on success, 1 on a usage error, 2 on a data error.
    Every output directory gets a manifest.json entry for the files this run wrote there.
    """
    argv = list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageException as e:
        return _usage_error(e)
    except SystemExit as e:
        # --help
        return 0 if e.code in (0, None) else 1

    setup_logging(args.verbose)
    try:
        config = load_config(args.config)
        seed = config.resolve_seed(args.seed)
        outputs, inputs = COMMANDS[args.command](args, config, seed)
        command_line = shlex.join([command_help.PROG] + argv)
        by_dir = {}
        for path in outputs:
            by_dir.setdefault(os.path.dirname(os.path.abspath(path)), []).append(path)
        for out_dir in sorted(by_dir):
            report.write_manifest(out_dir, command_line, config.digest(), seed, inputs, by_dir[out_dir])
    except UsageException as e:
        return _usage_error(e)
    except DATA_ERRORS as e:
        print(stringworks.error_text(f"{command_help.PROG} {args.command}: {e}"), file=sys.stderr)
        logger.debug("%s failed", args.command, exc_info=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(cli_dispatch(sys.argv[1:]))
