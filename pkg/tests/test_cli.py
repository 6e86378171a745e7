from __future__ import annotations

import csv
import io
import json
import warnings

import numpy as np
import pytest
import yaml

from vaarkit.cli import cmd_fit, cmd_report, cmd_survey, cmd_vaar, fit_datasets, main, CommandError
from vaarkit.pipeline import evaluate_group
from vaarkit.respondents import degenerate_presets, presets, sample_observed
from vaarkit.sem import GroupDataset, read_datasets
from vaarkit.store import CampaignStore, ManifestError, load_manifest, manifest_from_dict

MANIFEST = {
    "campaign_id": "demo",
    "seed": 5,
    "backends": [
        {"name": "aligned", "kind": "synthetic", "preset": "aligned"},
        {"name": "reversed", "kind": "synthetic", "preset": "reversed"},
        {"name": "collapse", "kind": "synthetic", "preset": "near_constant"},
    ],
    "orders": "all",
    "temperatures": [0.7],
    "modes": ["contextual", "stateless"],
    "n_runs": 60,
    "stateless_runs": 4,
}


def write_manifest(tmp_path, **over):
    path = tmp_path / "manifest.yaml"
    path.write_text(yaml.safe_dump({**MANIFEST, **over}))
    return path


def run_all(root, manifest_path):
    store = CampaignStore(root)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        new = cmd_survey(load_manifest(manifest_path), store)
        cmd_fit(store)
        cmd_vaar(store)
        cmd_report(store)
    return store, new


@pytest.fixture(scope="module")
def campaign(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("camp")
    path = write_manifest(tmp)
    store, new = run_all(tmp / "store", path)
    return tmp, path, store, new


def read_csv(text):
    return list(csv.reader(io.StringIO(text)))


def test_manifest_cells():
    m = manifest_from_dict(MANIFEST)
    cells = m.cells()
    per_backend = [c for c in cells if c.backend.name == "aligned"]
    assert len([c for c in per_backend if c.config.mode == "contextual"]) == 4
    assert len([c for c in per_backend if c.config.mode == "stateless"]) == 1
    assert len({c.label for c in cells}) == len(cells) == 15
    assert cells[0].label == "aligned:P->PSA->A:t0.7"
    # seeds do not depend on the rest of the grid
    solo = manifest_from_dict({**MANIFEST, "backends": MANIFEST["backends"][:1], "orders": [["Privacy", "PSA", "AoDS"]]})
    assert solo.cells()[0].config.seed == cells[0].config.seed


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        manifest_from_dict({**MANIFEST, "colour": 1})
    with pytest.raises(ManifestError):
        manifest_from_dict({**MANIFEST, "backends": []})
    with pytest.raises(ManifestError):
        manifest_from_dict({**MANIFEST, "backends": MANIFEST["backends"][:1] * 2})
    with pytest.raises(ManifestError, match="cannot read"):
        load_manifest(tmp_path / "missing.yaml")


def test_survey_counts_and_resume(campaign, tmp_path):
    tmp, path, store, new = campaign
    n_items = 42
    assert new == 3 * (4 * 60 + 4 * n_items)
    assert len(store.record_ids()) == new
    assert cmd_survey(load_manifest(path), store) == 0
    assert len(list(store.records())) == new


def test_single_cell_hundred_records(tmp_path):
    path = write_manifest(tmp_path, backends=MANIFEST["backends"][:1], orders=[["Privacy", "PSA", "AoDS"]],
                          modes=["contextual"], n_runs=100)
    store = CampaignStore(tmp_path / "s")
    assert cmd_survey(load_manifest(path), store) == 100
    assert all(r.complete for r in store.records())


def test_fit_outputs(campaign):
    _, _, store, _ = campaign
    summary = store.read_fit("summary.json")
    by = {g["group"]: g for g in summary["groups"]}
    assert len(by) == 12
    collapse = [g for k, g in by.items() if k.startswith("collapse")]
    assert collapse and all(not g["converged"] and not g["evaluable"] for g in collapse)
    assert summary["ladder"]["status"] == "complete"
    assert [r["df"] for r in summary["ladder"]["rows"]] == [72, 86, 121, 163]
    rep = store.read_fit("group_aligned_P-_PSA-_A_t0.7.json")
    assert len(rep["record_ids"]) == 60 and rep["paths"][0]["path"]


def test_vaar_report(campaign):
    _, _, store, _ = campaign
    rows = read_csv(store.read_report("vaar.csv"))
    assert rows[0][:4] == ["rank", "group", "VAAR", "tier"]
    groups = [r[1] for r in rows[1:]]
    tiers = {r[1]: r[3] for r in rows[1:]}
    assert tiers[cell_label_for("aligned")] == "Strong"
    assert tiers[cell_label_for("reversed")] == "Misaligned"
    na = [g for g in groups if g.startswith("collapse")]
    assert groups[-len(na):] == na and all(tiers[g] == "NA" for g in na)


def cell_label_for(backend):
    return f"{backend}:P->PSA->A:t0.7"


def test_report_tables(campaign):
    _, _, store, _ = campaign
    conv = read_csv(store.read_report("convergence.csv"))
    assert conv[0] == ["group", "converged", "evaluable"]
    assert ["collapse:P->PSA->A:t0.7", "No", "No (NA)"] in conv
    orders = read_csv(store.read_report("orders.csv"))
    assert orders[0] == ["group", "P->PSA->A", "PSA->P->A", "A->P->PSA", "A->PSA->P", "Range"]
    body = {r[0]: r for r in orders[1:]}
    assert body["collapse"][-1] == "--" and set(body["collapse"][1:5]) == {"NA"}
    aligned = body["aligned"]
    vals = [float(c.split("^")[0]) for c in aligned[1:5]]
    assert aligned[-1] == f"{max(vals) - min(vals):.3f}"
    assert all(c.endswith("^S") for c in aligned[1:5])
    assert all(c.split("^")[1] in "SMWI" for c in body["reversed"][1:5])
    disp = read_csv(store.read_report("dispersion_vs_vaar.csv"))
    assert len(disp) - 1 == 8
    sidecar = read_csv(store.read_report("dispersion_vs_vaar_na.csv"))
    assert len(sidecar) - 1 == 4
    drift = read_csv(store.read_report("drift.csv"))
    assert len(drift) == 4
    comp = json.loads(store.read_report("compliance.json"))
    assert all(v["overall"] == 1.0 for v in comp.values())
    desc = read_csv(store.read_report("descriptives.csv"))
    assert desc[1][0] == "Human" and desc[1][2] == "5.84"
    kw = read_csv(store.read_report("kruskal.csv"))
    assert [r[0] for r in kw[1:]] == ["Privacy", "PSA", "AoDS"]


def test_reports_reproducible(campaign, tmp_path):
    tmp, path, store, _ = campaign
    other, _ = run_all(tmp_path / "again", path)
    for sub in ("reports", "fits"):
        names = sorted(p.name for p in (store.root / sub).iterdir())
        assert names == sorted(p.name for p in (other.root / sub).iterdir())
        for name in names:
            assert (store.root / sub / name).read_bytes() == (other.root / sub / name).read_bytes(), name


def test_rows_traceable(campaign):
    _, _, store, _ = campaign
    ids = store.record_ids()
    summary = store.read_fit("summary.json")
    for g in summary["groups"]:
        assert set(g["record_ids"]) <= ids


def test_min_rows_exclusion_and_single_group():
    small = GroupDataset("small", sample_observed(presets()["aligned"], 10, np.random.default_rng(0)))
    big = GroupDataset("big", sample_observed(presets()["aligned"], 80, np.random.default_rng(1)))
    with pytest.warns(UserWarning, match="small"):
        kept, evals, excluded, ladder = fit_datasets([small, big])
    assert [d.label for d in kept] == ["big"] and excluded[0]["group"] == "small" and ladder is None
    with pytest.raises(CommandError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit_datasets([small])


def test_no_estimable_group_fails():
    flat = GroupDataset("flat", sample_observed(degenerate_presets()["near_constant"], 50, np.random.default_rng(0)))
    with pytest.raises(CommandError):
        fit_datasets([flat])


def test_evaluate_degenerate_group_is_na():
    ev = evaluate_group(GroupDataset("c", sample_observed(degenerate_presets()["collinear"], 100,
                                                            np.random.default_rng(0))))
    assert not ev.converged and not ev.evaluable
    res = ev.vaar()
    assert res.status == "NA" and "ill-conditioned" in res.reason


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "groups.csv"
    assert main(["simulate-population", "--preset", "aligned", "--n", "120", "--seed", "3", "--out", str(data)]) == 0
    assert main(["simulate-population", "--preset", "reversed", "--n", "3", "--mode", "fast"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("group,") and len(out.splitlines()) == 4
    (ds,) = read_datasets(data)
    assert ds.n == 120 and ds.label == "aligned"

    store = tmp_path / "st"
    path = write_manifest(tmp_path, backends=MANIFEST["backends"][:1], orders=[["Privacy", "PSA", "AoDS"]],
                          modes=["contextual"], n_runs=40)
    assert main(["survey", "--manifest", str(path), "--store", str(store)]) == 0
    assert main(["fit", "--store", str(store)]) == 0
    assert main(["vaar", "--store", str(store)]) == 0
    assert main(["report", "--store", str(store), "--human-endpoints", "3", "2", "3"]) == 0
    out = capsys.readouterr().out
    assert "(Strong)" in out and "descriptives.csv" in out
    assert "Human,,5.84,,5.82,,3.00" in (store / "reports" / "descriptives.csv").read_text()
    assert main(["fit", "--store", str(store), "--data", str(data)]) == 0
    assert main(["vaar", "--store", str(tmp_path / "missing")]) == 2
