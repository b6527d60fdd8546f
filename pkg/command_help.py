from __future__ import annotations
from typing import Optional

PROG = "rcc"

commands = {
    "synth": ("Write a seeded synthetic cohort: clinical.csv and one PPM slide per patient",
              f"{PROG} synth --out-dir DIR [--patients N] [--size PX] [--patch-size PX] [--seed N]"),
    "tile": ("Cut a slide into non-overlapping tissue patches",
             f"{PROG} tile --input SLIDE.ppm --out DIR [--patch-size PX] [--min-tissue F] [--white-threshold V]"),
    "featurize": ("Tile slides and write 64-d patch descriptors to features.csv",
                  f"{PROG} featurize --input SLIDE.ppm [SLIDE.ppm ...] --out features.csv [--patch-size PX]"),
    "train": ("Train an attention MIL model for one slide-level task",
              f"{PROG} train --features features.csv --clinical clinical.csv --task "
              "diagnosis|subtype|grade_risk|os_risk --out model.json [--epochs N] [--lr F] [--folds K]"),
    "predict": ("Score slides with a trained model, optionally writing attention heatmaps",
                f"{PROG} predict --features features.csv --model model.json --out scores.csv [--heatmaps DIR]"),
    "eval-seg": ("Dice and loss metrics of predicted masks plus the tumor-area slide call",
                 f"{PROG} eval-seg --pred P.pgm [...] --truth T.pgm [...] [--tissue SLIDE.ppm ...] --out seg.json"),
    "survival": ("Kaplan-Meier with log-rank and hazard ratio, multivariable Cox, or ANOVA of scores",
                 f"{PROG} survival km|cox|anova --clinical clinical.csv [--group-by strata.csv] "
                 "[--score NAME=scores.csv] [--by grade|stage] --out result.json [--svg km.svg]"),
    "nomogram": ("Fit the combined Cox model, build the points chart, pick the cutoff and score patients",
                 f"{PROG} nomogram --clinical clinical.csv --score grade_risk=G.csv --score os_risk=O.csv --out-dir DIR"),
    "compare": ("AUC at 5/3/1 years and C-index of prognostic indicators",
                f"{PROG} compare --clinical clinical.csv [--scored scored.csv] [--indicator NAME=scores.csv] --out table.csv"),
    "report": ("KM curves of nomogram groups and ROC curves at 1/3/5 years as SVG",
               f"{PROG} report --clinical clinical.csv --scored scored.csv --out-dir DIR"),
}

def get_commands(command: Optional[str] = None) -> str:
    """
    Usage text for one subcommand, or the overview of all of them
    """
    if command is not None:
        description, usage = commands[command]
        return f"{description}\n  {usage}"
    width = max(len(name) for name in commands)
    lines = [f"usage: {PROG} <command> [options]", "", "commands:"]
    lines += [f"  {name.ljust(width)}  {description}" for name, (description, _) in commands.items()]
    return "\n".join(lines)
