"""Command-line entry points: survey, fit, vaar, report, simulate-population."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings
from collections import defaultdict
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analytics
from .parser import strictness_report
from .pipeline import evaluate_group, ladder_for
from .protocol import VARIANTS, order_label, order_variants, run_campaign, stateless_probe
from .respondents import (
    SyntheticPopulationParams,
    all_presets,
    make_backend,
    sample_continuous,
    sample_observed,
    simulate_rows,
)
from .sem import GroupDataset, PathEstimate, read_datasets, write_datasets
from .store import CampaignManifest, CampaignStore, StoreError, load_manifest, safe_name
from .vaar import VaarResult, vaar

log = logging.getLogger("vaarkit")

MIN_ROWS = 30


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# survey


def cmd_survey(manifest: CampaignManifest, store: CampaignStore, parallelism: int | None = None) -> int:
    """Run every grid cell, skipping sessions already in the store. Returns
    the number of new records."""
    done = store.record_ids()
    new = 0
    for cell in manifest.cells():
        backend = make_backend(cell.backend, manifest.base_dir)
        cfg = cell.config
        if parallelism is not None:
            cfg = replace(cfg, parallelism=parallelism)
        if cfg.mode == "contextual":
            rs = run_campaign(backend, cfg, cell=cell.label, store=store, skip=done, require_success=False)
        else:
            rs = stateless_probe(backend, cfg, cell=cell.label, store=store, skip=done)
        new += len(rs)
        if rs and not rs.completed:
            log.warning("cell %s: no session completed (%s)", cell.label, rs.error_report())
        elif rs:
            log.info("cell %s: %d sessions, %d complete", cell.label, len(rs), len(rs.completed))
    return new


# ---------------------------------------------------------------------------
# fit


def _datasets_from_store(store: CampaignStore, groups: Sequence[str] | None):
    rows, ids, meta, failed = defaultdict(list), defaultdict(list), {}, defaultdict(int)
    for rec in store.records():
        if rec.mode != "contextual":
            continue
        if groups and rec.cell not in groups:
            continue
        meta.setdefault(rec.cell, {
            "backend": rec.backend,
            "order": order_label(rec.order),
            "temperature": rec.config.get("temperature"),
            "variant": rec.config.get("variant", "baseline"),
        })
        row = rec.observed_row()
        if row is None:
            failed[rec.cell] += 1
            continue
        rows[rec.cell].append(row)
        ids[rec.cell].append(rec.record_id)
    datasets = [GroupDataset(g, np.array(rows[g]), record_ids=tuple(ids[g])) for g in meta if rows[g]]
    return datasets, meta, dict(failed)


def fit_datasets(datasets: Sequence[GroupDataset], min_rows: int = MIN_ROWS):
    """Evaluate each group, then the invariance ladder over converged groups."""
    kept, excluded = [], []
    for ds in datasets:
        if ds.n < min_rows:
            msg = f"group {ds.label!r} has {ds.n} complete rows (< {min_rows}); excluded"
            warnings.warn(msg, stacklevel=2)
            excluded.append({"group": ds.label, "n": ds.n, "reason": msg})
        else:
            kept.append(ds)
    if not kept:
        raise CommandError("no group has enough complete rows to fit")
    evals = [evaluate_group(ds) for ds in kept]
    if not any(e.converged for e in evals):
        raise CommandError("no group could be estimated")
    ladder = ladder_for(evals, kept) if len(kept) > 1 else None
    return kept, evals, excluded, ladder


def cmd_fit(store: CampaignStore, groups: Sequence[str] | None = None, min_rows: int = MIN_ROWS,
            data: str | Path | None = None) -> dict:
    """Fit every group (or those named) and persist per-group reports plus
    ``fits/summary.json``."""
    if data is not None:
        datasets = read_datasets(data)
        if groups:
            datasets = [d for d in datasets if d.label in groups]
        meta, failed = {d.label: {"backend": d.label, "order": None, "temperature": None, "variant": None}
                        for d in datasets}, {}
    else:
        datasets, meta, failed = _datasets_from_store(store, groups)
    if not datasets:
        raise CommandError("no complete sessions to fit")
    kept, evals, excluded, ladder = fit_datasets(datasets, min_rows)
    by_label = {d.label: d for d in kept}
    group_reports = []
    for ev in evals:
        rep = ev.to_dict()
        rep["record_ids"] = list(by_label[ev.group].record_ids)
        rep["failed_sessions"] = failed.get(ev.group, 0)
        store.write_fit(f"group_{safe_name(ev.group)}.json", rep)
        group_reports.append(rep)
    summary = {
        "groups": group_reports,
        "excluded": excluded,
        "cells": meta,
        "ladder": None if ladder is None else {"status": ladder.status, "rows": [_clean(r) for r in ladder.to_dicts()]},
    }
    store.write_fit("summary.json", summary)
    return summary


def _clean(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


# ---------------------------------------------------------------------------
# vaar


def _path_from_dict(d: dict) -> PathEstimate:
    beta = d.get("beta")
    return PathEstimate(d["path"], float("nan") if beta is None else beta, d.get("se"), d.get("z"),
                        bool(d.get("estimable")), note=d.get("note", ""))


def vaar_from_summary(summary: dict) -> list[VaarResult]:
    out = []
    for g in summary["groups"]:
        res = vaar([_path_from_dict(p) for p in g.get("paths", [])], group=g["group"], fit_ok=g["converged"])
        if res.status != "ok" and g.get("error"):
            res.reason = g["error"]
        out.append(res)
    ok = sorted((r for r in out if r.status == "ok"), key=lambda r: r.value)
    return ok + [r for r in out if r.status != "ok"]


def cmd_vaar(store: CampaignStore) -> list[VaarResult]:
    results = vaar_from_summary(store.read_fit("summary.json"))
    table = analytics.vaar_rows(results)
    store.write_report("vaar.csv", analytics.to_csv(table))
    store.write_report("vaar.md", analytics.to_markdown(table))
    store.write_report("vaar_paths.csv", analytics.to_csv(analytics.vaar_path_rows(results)))
    store.write_report("vaar.json", json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True) + "\n")
    return results


# ---------------------------------------------------------------------------
# report


def _column_key(factor: str):
    if factor == "order":
        known = [order_label(o) for o in order_variants()]
        return lambda c: (known.index(c) if c in known else len(known), c)
    if factor == "temperature":
        return lambda c: float(c[2:])
    known = list(VARIANTS)
    return lambda c: (known.index(c) if c in known else len(known), c)


def _variant_tables(results: dict[str, VaarResult], cells: dict[str, dict]):
    """Order, temperature and framing tables over cells that differ in one factor."""
    tables = {}
    for factor, others in (("order", ("temperature", "variant")), ("temperature", ("order", "variant")),
                           ("variant", ("order", "temperature"))):
        rows: dict[str, dict[str, VaarResult]] = {}
        columns: list[str] = []
        varying = [o for o in others if len({c.get(o) for c in cells.values()}) > 1]
        for label, m in cells.items():
            if label not in results or m.get(factor) is None:
                continue
            key = " ".join([m["backend"]] + [str(m[o]) for o in varying])
            col = str(m[factor]) if factor != "temperature" else f"t={m[factor]:g}"
            rows.setdefault(key, {})[col] = results[label]
            if col not in columns:
                columns.append(col)
        if len(columns) > 1:
            tables[factor] = analytics.variant_rows(rows, sorted(columns, key=_column_key(factor)))
    return tables


def cmd_report(store: CampaignStore, baseline: analytics.HumanBaseline | None = None) -> list[str]:
    """Write descriptive, drift, dispersion, robustness and fit tables; returns the file names."""
    baseline = baseline or analytics.HumanBaseline()
    records = list(store.records())
    written = []

    def emit(name, table):
        store.write_report(f"{name}.csv", analytics.to_csv(table))
        store.write_report(f"{name}.md", analytics.to_markdown(table))
        written.extend([f"{name}.csv", f"{name}.md"])

    contextual = [r for r in records if r.mode == "contextual"]
    summaries = analytics.descriptives(contextual, baseline) if contextual else []
    if summaries:
        emit("descriptives", analytics.descriptives_rows(summaries, baseline))
        groups = [s for s in summaries if s.status == "ok"]
        if len(groups) >= 2:
            by = {s.group: [r for r in contextual if r.cell == s.group and r.complete] for s in groups}
            rows = []
            for scale in ("Privacy", "PSA", "AoDS"):
                kw = analytics.kruskal_wallis([[r.scale_scores()[scale] for r in recs] for recs in by.values()])
                rows.append([scale, f"{kw.H:.4f}", kw.df, f"{kw.p:.4g}"])
            emit("kruskal", (["scale", "H", "df", "p"], rows))
    stateless = [r for r in records if r.mode == "stateless"]
    if stateless:
        emit("drift", analytics.drift_rows(analytics.drift_stats(stateless)))
    if records:
        comp = strictness_report(records)
        store.write_report("compliance.json", json.dumps(comp, indent=2, sort_keys=True) + "\n")
        written.append("compliance.json")

    try:
        summary = store.read_fit("summary.json")
    except StoreError:
        summary = None
    if summary is not None:
        results = vaar_from_summary(summary)
        emit("convergence", analytics.convergence_rows(summary["groups"]))
        if summary.get("ladder"):
            emit("ladder", analytics.ladder_rows(summary["ladder"]["rows"]))
        if summaries:
            disp = analytics.dispersion_vs_vaar(summaries, results)
            store.write_report("dispersion_vs_vaar.csv", disp.to_csv())
            store.write_report("dispersion_vs_vaar_na.csv", disp.sidecar_csv())
            written.extend(["dispersion_vs_vaar.csv", "dispersion_vs_vaar_na.csv"])
        tables = _variant_tables({r.group: r for r in results}, summary.get("cells", {}))
        name = {"order": "orders", "temperature": "temperatures", "variant": "framing"}
        for factor, table in tables.items():
            emit(name[factor], table)
    return written


# ---------------------------------------------------------------------------
# simulate-population


def cmd_simulate(params: SyntheticPopulationParams, n: int, seed: int, group: str,
                 out: str | Path | None, mode: str = "sessions") -> GroupDataset:
    if mode == "sessions":
        rows = simulate_rows(params, range(seed, seed + n))
    elif mode == "fast":
        rows = sample_observed(params, n, np.random.default_rng(seed))
    elif mode == "continuous":
        rows = sample_continuous(params, n, np.random.default_rng(seed))
    else:
        raise ValueError(f"unknown simulation mode {mode!r}")
    ds = GroupDataset(group, rows)
    if out is not None:
        write_datasets([ds], out)
    return ds


# ---------------------------------------------------------------------------
# argument parsing


def _store(path, create=True) -> CampaignStore:
    return CampaignStore(path, create=create)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaarkit", description="Questionnaire campaigns, SEM fits and VAAR scoring.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("survey", help="run the campaign described by a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--store", help="campaign directory (default: manifest 'store' or ./<campaign_id>)")
    s.add_argument("--seed", type=int, help="override the manifest seed")
    s.add_argument("--parallelism", type=int)

    f = sub.add_parser("fit", help="fit the SEM per group and the invariance ladder")
    f.add_argument("--store", required=True)
    f.add_argument("--groups", nargs="*", help="group labels to fit (default: all contextual cells)")
    f.add_argument("--min-rows", type=int, default=MIN_ROWS)
    f.add_argument("--data", help="fit a dataset CSV instead of the store's sessions")

    v = sub.add_parser("vaar", help="score fitted groups against the directional template")
    v.add_argument("--store", required=True)

    r = sub.add_parser("report", help="write descriptive and robustness tables")
    r.add_argument("--store", required=True)
    r.add_argument("--human-endpoints", nargs=3, type=float, metavar=("SP", "PA_0TO6", "FW"),
                   help="human AoDS endpoint means used to recompute the composite")

    m = sub.add_parser("simulate-population", help="draw observed rows from a synthetic population")
    src = m.add_mutually_exclusive_group()
    src.add_argument("--preset", default="aligned", choices=sorted(all_presets()))
    src.add_argument("--params", help="JSON file of population parameters")
    m.add_argument("--n", type=int, default=100)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--group", help="group label (default: preset name)")
    m.add_argument("--mode", choices=("sessions", "fast", "continuous"), default="sessions")
    m.add_argument("--out", help="output CSV (default: stdout)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "survey":
            manifest = load_manifest(args.manifest)
            if args.seed is not None:
                manifest.seed = args.seed
            root = args.store or manifest.store or manifest.campaign_id
            if not Path(root).is_absolute() and args.store is None and manifest.base_dir is not None:
                root = manifest.base_dir / root
            n = cmd_survey(manifest, _store(root), args.parallelism)
            print(f"{n} new session record(s) in {root}")
        elif args.command == "fit":
            summary = cmd_fit(_store(args.store, create=False), args.groups, args.min_rows, args.data)
            for g in summary["groups"]:
                print(f"{g['group']}: n={g['n']} converged={'Yes' if g['converged'] else 'No'}")
            if summary["ladder"]:
                for row in summary["ladder"]["rows"]:
                    print(f"  {row['level']}: df={row['df']} status={row['status']}")
        elif args.command == "vaar":
            for r in cmd_vaar(_store(args.store, create=False)):
                value = "NA" if r.status != "ok" else f"{r.value:.3f} ({r.tier})"
                print(f"{r.group}: {value}")
        elif args.command == "report":
            baseline = analytics.HumanBaseline(endpoint_means=tuple(args.human_endpoints)) \
                if args.human_endpoints else None
            for name in cmd_report(_store(args.store, create=False), baseline):
                print(name)
        elif args.command == "simulate-population":
            if args.params:
                params = SyntheticPopulationParams.from_dict(json.loads(Path(args.params).read_text()))
                group = args.group or Path(args.params).stem
            else:
                params = all_presets()[args.preset]
                group = args.group or args.preset
            ds = cmd_simulate(params, args.n, args.seed, group, args.out, args.mode)
            if args.out is None:
                sys.stdout.write(write_datasets([ds]))
    except (CommandError, StoreError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
