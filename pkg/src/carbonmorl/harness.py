"""Seeded experiment sweeps, results tables and summary reports."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .baselines import METHODS
from .config import Config
from .training import evaluate_policy, train

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("sweep_value", "method", "seed", "emissions_per_bit", "mean_S",
                  "energy_per_bit", "mean_delay", "viol_D1", "viol_D3")
METRICS = RESULT_COLUMNS[3:]
AGGREGATE = "mean±sd"
MODES = ("fig2", "fig3", "fig4")

FIG2_RATES = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
FIG3_RATE = 15.0
FIG3_SLOTS = 2000
FIG3_BIN = 100


def zeta_sweep(points=11):
    """Preferences from delay-heavy (0.1, 0.1, 0.8) to sustainability-heavy (0.8, 0.1, 0.1)."""
    t = np.linspace(0.0, 1.0, points)
    return [(0.1 + 0.7 * s, 0.1, 0.8 - 0.7 * s) for s in t]


@dataclass
class Experiment:
    name: str
    mode: str
    config: Config = field(default_factory=Config)
    methods: tuple = ("proposed", "ee_only")
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 300
    zeta: tuple = (1 / 3, 1 / 3, 1 / 3)
    axis: tuple | None = None
    eval_episodes: int = 4
    out: Path | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown sweep mode '{self.mode}', expected one of {MODES}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.axis is None:
            self.axis = {"fig2": FIG2_RATES, "fig3": (FIG3_RATE,),
                         "fig4": tuple(map(tuple, zeta_sweep()))}[self.mode]
        if len(self.axis) == 0:
            raise ValueError("sweep axis is empty")


def _nan_row(value, method, seed):
    return {"sweep_value": value, "method": method, "seed": seed,
            **{k: float("nan") for k in METRICS}}


def run_point(exp: Experiment, value, method, seed):
    """Train one policy and evaluate it; returns a list of result rows."""
    cfg = exp.config
    zeta = exp.zeta
    if exp.mode in ("fig2", "fig3"):
        cfg = cfg.replace(traffic={"arrival_rate": float(value)})
    else:
        zeta = value
    policy, _, _ = train(cfg, zeta=zeta, epochs=exp.epochs, method=method, seed=seed)
    eval_seed = 10_000 + seed
    if exp.mode == "fig3":
        metrics, slots = evaluate_policy(cfg, policy, eval_seed, slots=FIG3_SLOTS,
                                         episodes=exp.eval_episodes, record=True)
        rows = []
        for start in range(0, FIG3_SLOTS, FIG3_BIN):
            rows.append({"sweep_value": start + FIG3_BIN, "method": method, "seed": seed,
                         **window_metrics(slots[start:start + FIG3_BIN])})
        return rows
    metrics = evaluate_policy(cfg, policy, eval_seed, episodes=exp.eval_episodes)
    sweep_value = value if exp.mode == "fig2" else float(value[0])
    return [{"sweep_value": sweep_value, "method": method, "seed": seed, **metrics}]


def window_metrics(slots):
    emissions = sum(s.emissions.sum() for s in slots)
    energy = sum(s.e_tot.sum() for s in slots)
    bits = sum((s.rate_sum.sum(-1) * s.T).sum() for s in slots)
    return {
        "emissions_per_bit": float(emissions / bits) if bits > 0 else float("nan"),
        "mean_S": float(np.mean([s.S.mean() for s in slots])),
        "energy_per_bit": float(energy / bits) if bits > 0 else float("nan"),
        "mean_delay": float(np.mean([s.mean_delay.mean() for s in slots])),
        "viol_D1": float(np.mean([(s.slack_D1 > 0).mean() for s in slots])),
        "viol_D3": float(np.mean([(s.slack_D3 > 0).mean() for s in slots])),
    }


@dataclass
class Results:
    rows: list
    errors: list = field(default_factory=list)

    def aggregates(self):
        return aggregate(self.rows)


def run_sweep(exp: Experiment, progress=None):
    """Every (sweep point, method, seed) combination; failures become NaN rows."""
    rows, errors = [], []
    for value in exp.axis:
        for method in exp.methods:
            for seed in exp.seeds:
                try:
                    rows.extend(run_point(exp, value, method, seed))
                except Exception as exc:    # keep the sweep going, record the failure
                    log.error("%s %s seed %s failed: %s", value, method, seed, exc)
                    errors.append({"sweep_value": value, "method": method, "seed": seed,
                                   "error": f"{type(exc).__name__}: {exc}"})
                    sv = value if exp.mode != "fig4" else float(value[0])
                    rows.append(_nan_row(sv, method, seed))
                if progress:
                    progress(value, method, seed)
    results = Results(rows, errors)
    if exp.out is not None:
        out = Path(exp.out)
        out.mkdir(parents=True, exist_ok=True)
        write_results(out / f"{exp.name}_results.csv", results)
    return results


def aggregate(rows):
    """One mean±sd row per (sweep point, method), in first-seen order."""
    groups = {}
    for row in rows:
        groups.setdefault((row["sweep_value"], row["method"]), []).append(row)
    out = []
    for (value, method), members in groups.items():
        agg = {"sweep_value": value, "method": method, "seed": AGGREGATE}
        for k in METRICS:
            x = np.array([float(r[k]) for r in members])
            agg[k] = (float(np.mean(x)), float(np.std(x, ddof=1)) if len(x) > 1 else 0.0)
        out.append(agg)
    return out


def _cell(v):
    if isinstance(v, tuple):
        return f"{v[0]!r}±{v[1]!r}"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(path, results: Results):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in list(results.rows) + results.aggregates():
            writer.writerow([_cell(row[k]) for k in RESULT_COLUMNS])
    if results.errors:
        with open(Path(path).with_suffix(".errors.json"), "w") as fh:
            json.dump(results.errors, fh, indent=1)


def read_results(path):
    """Raw (per-seed) rows of a results table; aggregate rows are skipped."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            if row["seed"] == AGGREGATE:
                continue
            rows.append({"sweep_value": float(row["sweep_value"]), "method": row["method"],
                         "seed": int(row["seed"]), **{k: float(row[k]) for k in METRICS}})
    return rows


# -- summaries -----------------------------------------------------------------

def _ci(x, level=0.95):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return float("nan"), (float("nan"), float("nan"))
    m = float(np.mean(x))
    if len(x) < 2:
        return m, (m, m)
    half = stats.t.ppf(0.5 + level / 2, len(x) - 1) * np.std(x, ddof=1) / math.sqrt(len(x))
    return m, (m - half, m + half)


def _by(rows, method, metric):
    """{sweep_value: {seed: value}} for one method."""
    out = {}
    for r in rows:
        if r["method"] == method:
            out.setdefault(r["sweep_value"], {})[r["seed"]] = float(r[metric])
    return out


def reduction(rows, method, baseline, metric="emissions_per_bit"):
    """Percent reduction of ``method`` vs ``baseline`` per sweep point.

    Seeds are paired; the interval is a t-interval over per-seed reductions.
    Also returns the reduction of the sweep-averaged means.
    """
    a, b = _by(rows, method, metric), _by(rows, baseline, metric)
    points = {}
    for value in a:
        if value not in b:
            continue
        seeds = sorted(set(a[value]) & set(b[value]))
        per_seed = [100.0 * (1.0 - a[value][s] / b[value][s]) for s in seeds]
        ma = np.nanmean([a[value][s] for s in seeds])
        mb = np.nanmean([b[value][s] for s in seeds])
        _, ci = _ci(per_seed)
        points[value] = {"reduction": float(100.0 * (1.0 - ma / mb)), "ci": ci,
                         "method_mean": float(ma), "baseline_mean": float(mb)}
    if not points:
        return {"points": {}, "overall": float("nan")}
    ma = np.mean([p["method_mean"] for p in points.values()])
    mb = np.mean([p["baseline_mean"] for p in points.values()])
    return {"points": points, "overall": float(100.0 * (1.0 - ma / mb)),
            "method_mean": float(ma), "baseline_mean": float(mb)}


def pareto_front(points):
    """Indices of points not dominated when minimizing both coordinates,
    ordered by the first coordinate."""
    pts = np.asarray(points, dtype=float)
    keep = []
    for i, p in enumerate(pts):
        if not np.all(np.isfinite(p)):
            continue
        dominated = np.any(np.all(pts <= p, axis=1) & np.any(pts < p, axis=1))
        if not dominated:
            keep.append(i)
    return sorted(keep, key=lambda i: (pts[i, 0], pts[i, 1]))


def summarize(rows, reference="proposed"):
    """Reductions of ``reference`` against every other method plus, for
    preference sweeps, the delay/emissions Pareto front."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    summary = {"comparisons": {}, "notices": []}
    if reference not in methods:
        summary["notices"].append(f"method '{reference}' missing; comparisons omitted")
    else:
        for other in methods:
            if other == reference:
                continue
            summary["comparisons"][other] = {
                "emissions_per_bit": reduction(rows, reference, other, "emissions_per_bit"),
                "mean_delay": reduction(rows, reference, other, "mean_delay"),
            }
    fronts = {}
    for m in methods:
        agg = [a for a in aggregate([r for r in rows if r["method"] == m])]
        pts = [(a["mean_delay"][0], a["emissions_per_bit"][0]) for a in agg]
        idx = pareto_front(pts)
        fronts[m] = [{"sweep_value": agg[i]["sweep_value"], "mean_delay": pts[i][0],
                      "emissions_per_bit": pts[i][1]} for i in idx]
    summary["pareto"] = fronts
    return summary


def format_report(summary, title="report"):
    lines = [f"== {title} =="]
    for note in summary["notices"]:
        lines.append(f"notice: {note}")
    for other, comp in summary["comparisons"].items():
        e, d = comp["emissions_per_bit"], comp["mean_delay"]
        lines.append(f"proposed vs {other}: emissions per bit {e['overall']:.1f}% lower "
                     f"(sweep average); mean delay {-d['overall']:+.1f}%")
        for value, p in e["points"].items():
            lo, hi = p["ci"]
            lines.append(f"  sweep {value:g}: {p['reduction']:.1f}% "
                         f"[95% CI {lo:.1f}, {hi:.1f}]")
    for m, front in summary["pareto"].items():
        if len(front) > 1:
            pts = ", ".join(f"({p['mean_delay']:.4g} s, {p['emissions_per_bit']:.3g})"
                            for p in front)
            lines.append(f"pareto front {m}: {pts}")
    return "\n".join(lines) + "\n"


def write_report(rows, out, title="report"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    (out / f"{title}.txt").write_text(format_report(summary, title))

    def plain(obj):
        if isinstance(obj, dict):
            return {str(k): plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        if isinstance(obj, float) and not math.isfinite(obj):
            return None
        return obj

    (out / f"{title}.json").write_text(json.dumps(plain(summary), indent=1))
    return summary
