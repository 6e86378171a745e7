"""Structured fit reports (JSON-ready dictionaries)."""

from __future__ import annotations

import json
import math

from .estimation import MgFit, SemFit
from .inference import PathEstimate


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def path_dict(pe: PathEstimate) -> dict:
    return {
        "path": pe.path,
        "beta": _num(pe.beta),
        "se": _num(pe.se),
        "z": _num(pe.z),
        "estimable": pe.estimable,
        "raw": _num(pe.raw),
        "note": pe.note,
    }


def group_report(fit: SemFit, paths=(), indices=None) -> dict:
    params = []
    for k in fit.free_entries:
        label = fit.spec.entries[k].label
        se = fit.ses.get(label)
        est = float(fit.values[k])
        params.append({
            "label": label,
            "estimate": est,
            "se": _num(se),
            "z": _num(est / se) if se else None,
        })
    return {
        "group": fit.group,
        "n": fit.n,
        "converged": bool(fit.converged),
        "message": fit.message,
        "iterations": fit.iterations,
        "grad_norm": _num(fit.grad_norm),
        "rcond": _num(fit.rcond),
        "F": _num(fit.F),
        "T": _num(fit.T),
        "df": fit.df,
        "c": _num(fit.c),
        "indices": {k: _num(v) for k, v in (indices or {}).items()},
        "parameters": params,
        "paths": [path_dict(p) for p in paths],
    }


def mg_report(fit: MgFit, paths_by_group=None, indices=None, ladder=None) -> dict:
    paths_by_group = paths_by_group or {}
    return {
        "level": fit.level,
        "converged": bool(fit.converged),
        "T": _num(fit.T),
        "df": fit.df,
        "c": _num(fit.c),
        "dropped": [{"group": g, "reason": r} for g, r in fit.dropped],
        "indices": {k: _num(v) for k, v in (indices or {}).items()},
        "groups": [group_report(g, paths_by_group.get(g.group, ())) for g in fit.groups],
        "ladder": None if ladder is None else {"status": ladder.status, "rows": [
            {k: (_num(v) if isinstance(v, float) else v) for k, v in r.to_dict().items()} for r in ladder.rows
        ]},
    }


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)


