from __future__ import annotations
import datetime
import hashlib
import io
import json
import logging
import os
import platform
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Tuple
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from matplotlib.figure import Figure
import numpy as np
import stringworks
from metrics import AucResult, RocCurve
from survival import HazardRatioResult, KmCurve

logger = logging.getLogger(__name__)


class ReportException(Exception): pass
class EmptyCurveException(ReportException): pass


TOOL_VERSION = "1.0.0"
MANIFEST_NAME = "manifest.json"
CURVE_COLORS = ("#1f4e9c", "#c0392b", "#27ae60", "#8e44ad", "#d35400")
SVG_RC = {
    "svg.hashsalt": "rcc-report",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "path.simplify": False,
}


@dataclass
class RunManifest:
    command_line: str
    config_digest: str
    seed: int
    input_digests: dict
    output_digests: dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    python_version: str = field(default_factory=platform.python_version)
    timestamp: str = field(default_factory=lambda: datetime.datetime.now(datetime.timezone.utc).isoformat())


def file_digest(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            sha.update(chunk)
    return sha.hexdigest()

def write_json(data, path: str) -> None:
    """
    Deterministic JSON: sorted keys, floats in shortest round-trip form
    """
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")

def _load_runs(path: str) -> list:
    if not os.path.isfile(path):
        return []
    try:
        with open(path, encoding="utf-8") as f:
            return list(json.load(f).get("runs", []))
    except (ValueError, AttributeError) as e:
        logger.warning("Replacing unreadable %s: %s", path, e)
        return []

def write_manifest(
        out_dir: str,
        command_line: str,
        config_digest: str,
        seed: int,
        inputs: Sequence[str],
        outputs: Sequence[str]
    ) -> RunManifest:
    """
    Add this run to manifest.json in `out_dir`.
    Only the files in `outputs` that sit directly in `out_dir` are recorded for the run.
    Earlier runs keep their entries, minus any file this run has rewritten.
    """
    names = sorted({
        os.path.basename(path) for path in outputs
        if os.path.dirname(os.path.abspath(path)) == os.path.abspath(out_dir) and os.path.isfile(path)
    } - {MANIFEST_NAME})
    manifest = RunManifest(
        command_line=command_line,
        config_digest=config_digest,
        seed=seed,
        input_digests={path: file_digest(path) for path in sorted(set(inputs)) if os.path.isfile(path)},
        output_digests={name: file_digest(os.path.join(out_dir, name)) for name in names}
    )
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    runs = []
    for run in _load_runs(manifest_path):
        kept = {name: digest for name, digest in run.get("output_digests", {}).items() if name not in names}
        if kept:
            runs.append({**run, "output_digests": kept})
    runs.append(asdict(manifest))
    write_json({"runs": runs}, manifest_path)
    return manifest

def _svg_bytes(fig: Figure) -> bytes:
    buffer = io.BytesIO()
    with plt.rc_context(SVG_RC):
        fig.savefig(buffer, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return buffer.getvalue()

def km_step_path(curve: KmCurve, end_time: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Right-continuous staircase coordinates of a KM curve, starting at (0, 1)
    """
    xs, ys = [0.0], [1.0]
    level = 1.0
    for t, s in zip(curve.event_times, curve.surv):
        xs += [float(t), float(t)]
        ys += [level, float(s)]
        level = float(s)
    last = max([xs[-1]] + [float(t) for t in curve.censor_times])
    if end_time is not None:
        last = max(last, end_time)
    if last > xs[-1]:
        xs.append(last)
        ys.append(level)
    return np.array(xs), np.array(ys)

def km_figure(curves: Sequence[Tuple[str, KmCurve]], hr: Optional[HazardRatioResult] = None,
              title: str = "Overall survival") -> Figure:
    """
    :raises: EmptyCurveException if no curves are given
    """
    if not curves:
        raise EmptyCurveException("no KM curves to draw")
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.5))
        for index, (label, curve) in enumerate(curves):
            color = CURVE_COLORS[index % len(CURVE_COLORS)]
            xs, ys = km_step_path(curve)
            ax.plot(xs, ys, color=color, linewidth=1.5, label=f"{label} (n={len(curve.censor_times) + int(curve.events.sum())})",
                    gid=f"km-{index}")
            censored = np.array(curve.censor_times)
            if len(censored):
                ax.plot(censored, [curve.survival_at(t) for t in censored], linestyle="none",
                        marker="|", markersize=8, color=color, gid=f"censor-{index}")
        if hr is not None:
            ax.text(0.03, 0.05, f"HR {stringworks.format_estimate(hr.hr, hr.ci_low, hr.ci_high)}, "
                                f"p = {hr.p_value:.3g}", transform=ax.transAxes, gid="hr-annotation")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlim(left=0.0)
        ax.set_xlabel("Time (months)")
        ax.set_ylabel("Survival probability")
        ax.set_title(title)
        ax.legend(loc="upper right", frameon=False)
        fig.tight_layout()
    return fig

def render_km_svg(curves: Sequence[Tuple[str, KmCurve]], hr: Optional[HazardRatioResult] = None) -> bytes:
    """
    Kaplan-Meier curves with censor ticks, legend and hazard ratio annotation as SVG bytes
    """
    return _svg_bytes(km_figure(curves, hr))

def roc_figure(curves: Sequence[Tuple[str, RocCurve, Optional[AucResult]]], title: str = "ROC") -> Figure:
    """
    :raises: EmptyCurveException if no curves are given
    """
    if not curves:
        raise EmptyCurveException("no ROC curves to draw")
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(4.8, 4.8))
        ax.plot([0.0, 1.0], [0.0, 1.0], linestyle="--", color="#999999", linewidth=1.0, gid="diagonal")
        for index, (label, curve, auc) in enumerate(curves):
            fpr = [p[0] for p in curve.points]
            tpr = [p[1] for p in curve.points]
            if auc is not None:
                text = f"{label}: AUC {stringworks.format_estimate(auc.auc, auc.ci_low, auc.ci_high)}"
            else:
                text = f"{label}: AUC {curve.auc:.3f}"
            ax.plot(fpr, tpr, color=CURVE_COLORS[index % len(CURVE_COLORS)], linewidth=1.5,
                    label=text, gid=f"roc-{index}")
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.0)
        ax.set_aspect("equal")
        ax.set_xlabel("1 - Specificity")
        ax.set_ylabel("Sensitivity")
        ax.set_title(title)
        ax.legend(loc="lower right", frameon=False, fontsize=8)
        fig.tight_layout()
    return fig

def render_roc_svg(curves: Sequence[Tuple[str, RocCurve, Optional[AucResult]]], title: str = "ROC") -> bytes:
    """
    ROC curves over the unit square with the chance diagonal and per-curve AUC legend as SVG bytes
    """
    return _svg_bytes(roc_figure(curves, title))

def km_curve_dict(curve: KmCurve) -> dict:
    return {
        "event_times": [float(t) for t in curve.event_times],
        "surv": [float(s) for s in curve.surv],
        "at_risk": [int(n) for n in curve.at_risk],
        "events": [int(d) for d in curve.events],
        "censor_times": [float(t) for t in curve.censor_times]
    }

def estimate_dict(result: HazardRatioResult, n: int, events: int) -> dict:
    return {"estimate": result.hr, "ci_low": result.ci_low, "ci_high": result.ci_high,
            "p": result.p_value, "n": n, "events": events}

def format_summary(rows: Mapping[str, HazardRatioResult]) -> str:
    """
    Plain-text hazard ratio table for the terminal
    """
    width = max([len(name) for name in rows] + [8])
    lines = [f"{'variable'.ljust(width)}  HR (95% CI)             p"]
    for name, result in rows.items():
        estimate = stringworks.format_estimate(result.hr, result.ci_low, result.ci_high)
        p_text = f"{result.p_value:.4g}"
        if result.p_value < 0.05:
            p_text = stringworks.ok_text(p_text)
        lines.append(f"{name.ljust(width)}  {estimate.ljust(22)}  {p_text}")
    return "\n".join(lines)
