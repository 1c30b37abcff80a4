"""Depth error statistics and run reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError

QUANTILE_RULE = "linear interpolation between order statistics (type 7)"


@dataclass
class Metrics:
    """Signed errors are ``pred - truth``; absolute values in cm, relative in %."""

    median_cm: float = float("nan")
    iqr_cm: float = float("nan")
    p90_abs_cm: float = float("nan")
    density_pct: float = 0.0
    median_rel_pct: float = float("nan")
    iqr_rel_pct: float = float("nan")
    p90_rel_pct: float = float("nan")
    n_pixels: int = 0
    edges: list = field(default_factory=list)
    counts: list = field(default_factory=list)
    empty: bool = True

    @property
    def cum_counts(self):
        return np.cumsum(self.counts).tolist()


def _iqr(x):
    q1, q3 = np.quantile(x, [0.25, 0.75])
    return float(q3 - q1)


def depth_error_stats(pred, truth, mask=None, depth_range=(1.5, 5.0), bins=100) -> Metrics:
    """Error statistics over valid pixels whose true depth lies in ``depth_range``.

    ``pred`` and ``truth`` are depth arrays (or DepthMaps) in meters. Density
    is the valid fraction of the in-range pixels. With nothing to evaluate
    the result has ``empty=True`` and NaN statistics.
    """
    pred = np.asarray(getattr(pred, "depth", pred), dtype=float)
    truth = np.asarray(getattr(truth, "depth", truth), dtype=float)
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction {pred.shape} and truth {truth.shape} differ")
    lo, hi = depth_range
    if not lo < hi:
        raise ConfigError("evaluation range needs lo < hi")
    valid = np.isfinite(pred)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise ConfigError("mask shape does not match depth")
        valid &= mask
    in_range = np.isfinite(truth) & (truth >= lo) & (truth <= hi)
    use = valid & in_range
    n_in = int(in_range.sum())
    m = Metrics(density_pct=100.0 * use.sum() / n_in if n_in else 0.0)
    if not use.any():
        return m
    err = (pred[use] - truth[use]) * 100.0
    rel = (pred[use] - truth[use]) / truth[use] * 100.0
    counts, edges = np.histogram(err, bins=bins)
    m.median_cm = float(np.median(err))
    m.iqr_cm = _iqr(err)
    m.p90_abs_cm = float(np.quantile(np.abs(err), 0.9))
    m.median_rel_pct = float(np.median(rel))
    m.iqr_rel_pct = _iqr(rel)
    m.p90_rel_pct = float(np.quantile(np.abs(rel), 0.9))
    m.n_pixels = int(use.sum())
    m.edges = edges.tolist()
    m.counts = counts.tolist()
    m.empty = False
    return m


def _record(label, m: Metrics) -> dict:
    d = asdict(m)
    return {
        "label": label,
        "median_cm": d["median_cm"],
        "iqr_cm": d["iqr_cm"],
        "p90_abs_cm": d["p90_abs_cm"],
        "density_pct": d["density_pct"],
        "median_rel_pct": d["median_rel_pct"],
        "iqr_rel_pct": d["iqr_rel_pct"],
        "p90_rel_pct": d["p90_rel_pct"],
        "n_pixels": d["n_pixels"],
        "empty": d["empty"],
        "cdf": {"edges": d["edges"], "cum_counts": m.cum_counts},
    }


def format_table(records) -> str:
    head = f"{'label':<24}{'median':>10}{'IQR':>10}{'p90|e|':>10}{'density':>10}"
    lines = [f"# quantiles: {QUANTILE_RULE}; errors in cm, density in %", head]
    for r in records:
        lines.append(f"{r['label']:<24}{r['median_cm']:>10.3f}{r['iqr_cm']:>10.3f}"
                     f"{r['p90_abs_cm']:>10.3f}{r['density_pct']:>10.2f}")
    return "\n".join(lines) + "\n"


def export_report(metrics, labels, out_dir=None):
    """JSON document and text table for several runs, rows in the given order.

    Writes ``report.json`` and ``report.txt`` when ``out_dir`` is set.
    Returns (document, table).
    """
    metrics, labels = list(metrics), list(labels)
    if len(metrics) != len(labels):
        raise ConfigError("need one label per metrics entry")
    if len(set(labels)) != len(labels):
        dup = sorted({l for l in labels if labels.count(l) > 1})
        raise ConfigError(f"duplicate report labels: {dup}")
    records = [_record(l, m) for l, m in zip(labels, metrics)]
    doc = {"quantile_rule": QUANTILE_RULE, "error_sign": "pred - truth", "records": records}
    table = format_table(records)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "report.json").write_text(json.dumps(doc, indent=2, allow_nan=True) + "\n")
        (out / "report.txt").write_text(table)
    return doc, table
