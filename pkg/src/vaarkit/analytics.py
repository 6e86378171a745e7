"""Run-level descriptives, stateless drift, cross-group rank tests and the
tabular outputs built from them."""

from __future__ import annotations

import csv
import io
import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import kruskal, spearmanr

from .instruments import DIMENSIONS, KINDS, load_catalog
from .vaar import TIER_LETTERS, VaarResult


class RangeError(ValueError):
    pass


def human_aods_composite(sp: float, pa_0to6: float, fw: float) -> float:
    """Composite of the three AoDS endpoints with PastAcceptance moved from 0..6 to 1..7."""
    for name, v, lo, hi in (("sp", sp, 1, 7), ("pa_0to6", pa_0to6, 0, 6), ("fw", fw, 1, 7)):
        if not (lo <= v <= hi):
            raise RangeError(f"{name}={v} outside [{lo}, {hi}]")
    return (sp + (pa_0to6 + 1.0) + fw) / 3.0


@dataclass(frozen=True)
class HumanBaseline:
    privacy_mean: float = 5.84
    psa_mean: float = 5.82
    published_aods_composite: float = 2.86
    # (SacrificePrivacy, PastAcceptance on 0..6, FutureWillingness); optional
    endpoint_means: tuple[float, float, float] | None = None

    @property
    def aods_composite(self) -> float:
        if self.endpoint_means is not None:
            return human_aods_composite(*self.endpoint_means)
        return self.published_aods_composite

    def mean(self, scale: str) -> float:
        return {"Privacy": self.privacy_mean, "PSA": self.psa_mean, "AoDS": self.aods_composite}[scale]


# ---------------------------------------------------------------------------
# descriptives


@dataclass
class ScaleSummary:
    group: str
    n_runs: int
    status: str  # "ok" or "NA"
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)
    delta: dict[str, float] = field(default_factory=dict)
    record_ids: list[str] = field(default_factory=list)

    @property
    def avg_sd(self) -> float | None:
        if self.status != "ok":
            return None
        return sum(self.sd[k] for k in KINDS) / len(KINDS)

    def direction(self, scale: str) -> str:
        d = self.delta.get(scale)
        if d is None:
            return "NA"
        return "above" if d > 0 else "below" if d < 0 else "equal"


def _cell(rec) -> str:
    return rec.cell


def descriptives(runset: Iterable, baseline: HumanBaseline | None = None,
                 group_of: Callable = _cell) -> list[ScaleSummary]:
    """Mean and sample SD over runs of each session's scale composites.

    Only complete contextual sessions count. Groups keep first-seen order;
    a group with fewer than two runs is reported as NA.
    """
    baseline = baseline or HumanBaseline()
    groups: dict[str, list] = {}
    for rec in runset:
        if rec.mode != "contextual":
            continue
        groups.setdefault(group_of(rec), [])
        if rec.complete:
            groups[group_of(rec)].append(rec)
    out = []
    for g, recs in groups.items():
        ids = [r.record_id for r in recs]
        if len(recs) < 2:
            out.append(ScaleSummary(g, len(recs), "NA", record_ids=ids))
            continue
        s = ScaleSummary(g, len(recs), "ok", record_ids=ids)
        for scale in KINDS:
            vals = [r.scale_scores()[scale] for r in recs]
            s.mean[scale] = statistics.fmean(vals)
            s.sd[scale] = statistics.stdev(vals)
            s.delta[scale] = s.mean[scale] - baseline.mean(scale)
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# stateless drift


@dataclass
class ScaleDrift:
    scale: str
    round_means: list[float]
    sd: float
    drift: float
    trend_rho: float | None
    trend_p: float


@dataclass
class DriftStats:
    group: str
    scales: dict[str, ScaleDrift]

    @property
    def median_sd(self) -> float:
        return float(np.median([s.sd for s in self.scales.values()]))

    @property
    def max_sd(self) -> float:
        return max(s.sd for s in self.scales.values())

    @property
    def median_drift(self) -> float:
        return float(np.median([s.drift for s in self.scales.values()]))

    @property
    def max_drift(self) -> float:
        return max(s.drift for s in self.scales.values())

    @property
    def min_trend_p(self) -> float:
        return min(s.trend_p for s in self.scales.values())


def drift(round_means: Sequence[float]) -> float:
    return float(max(round_means) - min(round_means))


def trend_test(round_means: Sequence[float]) -> tuple[float | None, float]:
    """Spearman correlation of round means with the round index."""
    x = np.asarray(round_means, dtype=float)
    if len(x) < 3 or np.all(x == x[0]):
        return None, 1.0
    rho, p = spearmanr(np.arange(len(x)), x)
    return float(rho), float(p)


def scale_drift(scale: str, round_means: Sequence[float]) -> ScaleDrift:
    if len(round_means) < 2:
        raise ValueError("drift needs at least two rounds")
    rho, p = trend_test(round_means)
    return ScaleDrift(scale, list(map(float, round_means)), statistics.stdev(round_means), drift(round_means), rho, p)


def round_means(records: Iterable, catalog=None) -> dict[str, list[float]]:
    """Per-scale composite for each stateless round (mean of dimension means)."""
    catalog = catalog or load_catalog()
    scores: dict[int, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for rec in records:
        if not rec.complete or rec.item is None:
            continue
        dim = catalog.item(rec.item).dimension
        scores[rec.run][dim].extend(rec.steps[0].scores.values())
    out: dict[str, list[float]] = {k: [] for k in KINDS}
    for rnd in sorted(scores):
        by_dim = scores[rnd]
        for kind in KINDS:
            dims = [statistics.fmean(by_dim[d]) for d in DIMENSIONS[kind] if by_dim.get(d)]
            if len(dims) == len(DIMENSIONS[kind]):
                out[kind].append(statistics.fmean(dims))
    return out


def drift_stats(stateless_runset: Iterable, group_of: Callable = _cell, catalog=None) -> list[DriftStats]:
    groups: dict[str, list] = {}
    for rec in stateless_runset:
        if rec.mode == "stateless":
            groups.setdefault(group_of(rec), []).append(rec)
    out = []
    for g, recs in groups.items():
        means = round_means(recs, catalog)
        out.append(DriftStats(g, {k: scale_drift(k, v) for k, v in means.items()}))
    return out


# ---------------------------------------------------------------------------
# Kruskal-Wallis


@dataclass(frozen=True)
class KruskalResult:
    H: float
    df: int
    p: float


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> KruskalResult:
    """Tie-corrected Kruskal-Wallis H referred to chi-square(k-1).

    Identical values across all groups give H = 0 and p = 1.
    """
    if len(groups) < 2 or any(len(g) < 1 for g in groups):
        raise ValueError("need at least two non-empty groups")
    df = len(groups) - 1
    pooled = np.concatenate([np.asarray(g, dtype=float) for g in groups])
    if np.all(pooled == pooled[0]):
        return KruskalResult(0.0, df, 1.0)
    H, p = kruskal(*[np.asarray(g, dtype=float) for g in groups])
    return KruskalResult(float(H), df, float(p))


# ---------------------------------------------------------------------------
# tables


def _fmt(x, nd=3) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return "NA"
    return f"{x:.{nd}f}"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _markdown(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def descriptives_rows(summaries: Sequence[ScaleSummary], baseline: HumanBaseline | None = None):
    baseline = baseline or HumanBaseline()
    header = ["group", "n_runs"]
    for k in KINDS:
        header += [f"{k} Mean(SD)", f"{k} Delta"]
    header.append("Avg. SD")
    rows = [["Human", ""] + sum(([_fmt(baseline.mean(k), 2), ""] for k in KINDS), []) + [""]]
    for s in summaries:
        row = [s.group, s.n_runs]
        for k in KINDS:
            if s.status == "ok":
                row += [f"{s.mean[k]:.2f} ({s.sd[k]:.2f})", f"{s.delta[k]:+.2f}"]
            else:
                row += ["NA", "NA"]
        row.append(_fmt(s.avg_sd, 2))
        rows.append(row)
    return header, rows


def tier_cell(result: VaarResult | None, nd: int = 3) -> str:
    """``0.123^S`` style cell; NA for missing or unestimable results."""
    if result is None or result.status != "ok":
        return "NA"
    return f"{result.value:.{nd}f}^{TIER_LETTERS[result.tier]}"


def vaar_rows(results: Sequence[VaarResult]):
    """Sorted ascending by VAAR with NA rows last."""
    ok = sorted((r for r in results if r.status == "ok"), key=lambda r: r.value)
    na = [r for r in results if r.status != "ok"]
    header = ["rank", "group", "VAAR", "tier", "n_paths", "excluded", "note"]
    rows = []
    for i, r in enumerate(ok, start=1):
        rows.append([i, r.group, f"{r.value:.3f}", r.tier, r.n_paths, ";".join(r.excluded), ""])
    for r in na:
        rows.append(["", r.group, "NA", "NA", r.n_paths, ";".join(r.excluded), r.reason])
    return header, rows


def vaar_path_rows(results: Sequence[VaarResult]):
    header = ["group", "path", "a", "beta", "se", "z", "q", "ce"]
    rows = []
    for r in results:
        for p, pa in r.paths.items():
            beta, se = r.estimates[p]
            rows.append([r.group, p, pa.a, f"{beta:.6f}", f"{se:.6f}", f"{pa.z:.6f}", f"{pa.q:.6f}", f"{pa.ce:.6f}"])
    return header, rows


def variant_rows(results: Mapping[str, Mapping[str, VaarResult]], columns: Sequence[str]):
    """One row per group, one cell per column (order or temperature) and a
    Range over estimable cells, ``--`` when fewer than two are estimable."""
    header = ["group"] + list(columns) + ["Range"]
    rows = []
    for g, cells in results.items():
        row = [g]
        vals = []
        for c in columns:
            r = cells.get(c)
            row.append(tier_cell(r))
            if r is not None and r.status == "ok":
                vals.append(r.value)
        row.append(f"{max(vals) - min(vals):.3f}" if len(vals) >= 2 else "--")
        rows.append(row)
    return header, rows


def drift_rows(stats: Sequence[DriftStats]):
    header = ["group", "SD median", "SD max", "Drift median", "Drift max", "trend p min"]
    rows = [[d.group, _fmt(d.median_sd), _fmt(d.max_sd), _fmt(d.median_drift), _fmt(d.max_drift),
             _fmt(d.min_trend_p)] for d in stats]
    return header, rows


def convergence_rows(entries: Sequence[Mapping]):
    """Rows of (group, converged, evaluable) from ``{"group", "converged", "evaluable"}`` dicts."""
    header = ["group", "converged", "evaluable"]
    rows = [[e["group"], "Yes" if e["converged"] else "No", "Yes" if e["evaluable"] else "No (NA)"] for e in entries]
    return header, rows


def ladder_rows(ladder_dicts: Sequence[Mapping]):
    header = ["level", "df", "T", "c", "dT_scaled", "ddf", "p", "status"]
    rows = []
    for r in ladder_dicts:
        p = r.get("p")
        rows.append([r["level"], r.get("df") if r.get("df") is not None else "NA", _fmt(r.get("T")),
                     _fmt(r.get("c")), _fmt(r.get("delta_T")), r.get("delta_df") or "",
                     "NA" if p is None else f"{p:.3g}", r["status"]])
    return header, rows


@dataclass
class DispersionTable:
    rows: list[tuple[str, float, float, float]]
    na_groups: list[str]

    def to_csv(self) -> str:
        return _csv(["group", "avg_sd", "vaar", "log_vaar"],
                    [[g, repr(a), repr(v), repr(lv)] for g, a, v, lv in self.rows])

    def sidecar_csv(self) -> str:
        return _csv(["group", "status"], [[g, "NA"] for g in self.na_groups])


def dispersion_vs_vaar(summaries: Sequence[ScaleSummary], vaar_results: Sequence[VaarResult]) -> DispersionTable:
    sd = {s.group: s.avg_sd for s in summaries}
    rows, na = [], []
    for r in vaar_results:
        if r.group not in sd:
            continue
        if r.status != "ok" or sd[r.group] is None:
            na.append(r.group)
            continue
        lv = math.log(r.value) if r.value > 0 else float("-inf")
        rows.append((r.group, float(sd[r.group]), float(r.value), lv))
    return DispersionTable(rows, na)


def to_csv(table) -> str:
    return _csv(*table)


def to_markdown(table) -> str:
    return _markdown(*table)
