"""Render ledger cells into Markdown/CSV tables and figures.

Numbers come straight from ledger records; nothing is recomputed here.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import plotting
from .biometrics import DegradationPolicy, ErrorRates, Flag, flag_degradation, load_embeddings, tsne_export
from .exceptions import NothingToReportError, ParameterError
from .taxonomy import load_taxonomy

log = logging.getLogger(__name__)

MATCHER_LABELS = {"arcface": "ArcFace", "adaface": "AdaFace"}
METHOD_LABELS = {"db_base": "DB-base", "db_prop": "DB-prop.", "ti": "TI", "ti_cs": "TI-cs", "cn": "CN",
                 "cn_ti": "CN-TI", "cn_ip": "CN-IP", "original": "Original"}
# improved variant -> the unmitigated method it is judged against for GREEN
DEFAULT_BASELINES = {"db_prop": "db_base", "ti_cs": "ti"}


@dataclass
class ReportBundle:
    directory: Path
    files: list = field(default_factory=list)
    checksums: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)


def _pct(t: float) -> str:
    return f"{t * 100:g}"


def format_cell(rates: ErrorRates, targets) -> str:
    """``0.33/0.09``: FNMR at each target, strictest first."""
    return "/".join(f"{rates.fnmr(t):.2f}" for t in sorted(targets))


def _label(matcher_id: str) -> str:
    return MATCHER_LABELS.get(matcher_id.lower(), matcher_id)


def _md_table(header: list, rows: list) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, fieldnames: list, rows: list) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)
    return path


def _order(ledger, manifest):
    """Methods, attributes and matchers in manifest order (else ledger order)."""
    if manifest is None:
        mpath = ledger.root / "manifest.json"
        manifest_d = json.loads(mpath.read_text()) if mpath.exists() else {}
    else:
        manifest_d = manifest.to_dict()
    rates = ledger.cells("rates", "ok")
    methods = manifest_d.get("methods") or list(dict.fromkeys(r.key[0] for r in rates if r.key[0] != "original"))
    attrs = manifest_d.get("attributes") or list(dict.fromkeys(r.key[1] for r in rates if r.key[1] != "original"))
    matchers = manifest_d.get("matchers") or list(dict.fromkeys(r.key[2] for r in rates))
    dataset = (manifest_d.get("dataset") or {}).get("name", "dataset")
    explicit = manifest_d.get("baseline")
    if explicit:
        baselines = {m: explicit for m in methods if m != explicit}
    else:
        baselines = {m: b for m, b in DEFAULT_BASELINES.items() if m in methods and b in methods}
    return methods, attrs, matchers, dataset, baselines, manifest_d.get("report") or {}


def render_report(ledger, out_dir=None, *, manifest=None,
                  policy: DegradationPolicy = DegradationPolicy()) -> ReportBundle:
    """Tables and plots from completed ``rates`` and ``success`` cells."""
    if not hasattr(ledger, "cells"):  # a run directory
        from .pipeline import RunLedger

        ledger = RunLedger(Path(ledger) / "ledger.jsonl")
    rates_cells = {r.key: r for r in ledger.cells("rates", "ok")}
    success_cells = {r.key: r for r in ledger.cells("success", "ok")}
    if not rates_cells and not success_cells:
        raise NothingToReportError(f"no completed biometric or audit cells in {ledger.path}")
    out = Path(out_dir or ledger.root / "report")
    out.mkdir(parents=True, exist_ok=True)
    tax = load_taxonomy()
    methods, attrs, matchers, dataset, baselines, opts = _order(ledger, manifest)
    bundle = ReportBundle(out)

    def rates(key) -> Optional[ErrorRates]:
        rec = rates_cells.get(key)
        return ErrorRates.from_dict(rec.data["rates"]) if rec else None

    # -- FNMR table ------------------------------------------------------------------
    targets = None
    for rec in rates_cells.values():
        targets = ErrorRates.from_dict(rec.data["rates"]).targets
        break
    md = [f"# {dataset}: identity preservation\n"]
    csv_rows = []
    bar_rows: dict = {m: [] for m in matchers}
    if targets:
        head = "/".join(_pct(t) for t in sorted(targets))
        margins = ", ".join(f"{_label(k)} {v:.2f}" for k, v in policy.thresholds.items())
        text = (f"FNMR at FMR(%) = {head}. RED: FNMR at FMR {_pct(policy.target)}% rises by at least the "
                f"matcher margin ({margins}) over Original.")
        if baselines:
            pairs = ", ".join(f"{METHOD_LABELS.get(m, m)} vs {METHOD_LABELS.get(b, b)}" for m, b in baselines.items())
            text += f" GREEN: the baseline is RED and the method improves on it ({pairs})."
        md.append(text + "\n")
        header = ["Attribute"] + [f"{_label(mid)} {METHOD_LABELS.get(m, m)}" for mid in matchers for m in methods]
        rows = []
        orig_row = ["Original"]
        for mid in matchers:
            o = rates(("original", "original", mid))
            cell = format_cell(o, targets) if o else "n/a"
            orig_row += [cell] * len(methods)
            if o:
                csv_rows.append({"attribute": "Original", "matcher": mid, "method": "original",
                                 **{f"fnmr@{_pct(t)}": o.fnmr(t) for t in sorted(targets)},
                                 "cell": cell, "flag": "", "unresolvable": any(r.unresolvable for r in o.rows),
                                 "ledger_key": "rates/original/original/" + mid})
        rows.append(orig_row)
        unresolved = 0
        for a in attrs:
            row = [tax.get(a).display_name if a in tax else a]
            for mid in matchers:
                o = rates(("original", "original", mid))
                bar = {"attribute": row[0]}
                for m in methods:
                    e = rates((m, a, mid))
                    b = rates((baselines[m], a, mid)) if m in baselines else None
                    if e is None:
                        row.append("n/a")
                        continue
                    flag = Flag.NONE
                    if o is not None:
                        flag = flag_degradation(o, e, mid, b, policy)
                    cell = format_cell(e, targets)
                    row.append(f"{cell} [{flag.value}]" if flag.value else cell)
                    unresolved += any(r.unresolvable for r in e.rows)
                    bar[METHOD_LABELS.get(m, m)] = e.fnmr(policy.target)
                    csv_rows.append({"attribute": row[0], "matcher": mid, "method": m,
                                     **{f"fnmr@{_pct(t)}": e.fnmr(t) for t in sorted(targets)},
                                     "cell": cell, "flag": flag.value,
                                     "unresolvable": any(r.unresolvable for r in e.rows),
                                     "ledger_key": f"rates/{m}/{a}/{mid}"})
                bar_rows[mid].append(bar)
            rows.append(row)
        md.append(_md_table(header, rows))
        if unresolved:
            md.append(f"\nNote: {unresolved} cells have fewer impostor scores than 1/FMR, so the strict "
                      "threshold is unresolvable and the reported FNMR is an upper bound of the sample.\n")
        fields = ["attribute", "matcher", "method", *[f"fnmr@{_pct(t)}" for t in sorted(targets)],
                  "cell", "flag", "unresolvable", "ledger_key"]
        bundle.files.append(_write_csv(out / "fnmr.csv", fields, csv_rows))

    # -- attribute prediction table ---------------------------------------------------
    if success_cells:
        md.append(f"\n# {dataset}: attribute editing success (VQA, %)\n")
        md.append("Unparseable answers count as failures; the CSV also lists the rate with them excluded.\n")
        header = ["Attribute"] + [METHOD_LABELS.get(m, m) for m in methods]
        rows, srows = [], []
        for a in attrs:
            cells = [success_cells.get((m, a)) for m in methods]
            if not any(cells):
                continue
            row = [tax.get(a).display_name]
            for m, rec in zip(methods, cells):
                if rec is None or rec.data.get("failure") is None:
                    row.append("n/a")
                    continue
                row.append(f"{rec.data['failure']:.1f}")
                srows.append({"attribute": tax.get(a).display_name, "method": m,
                              "success_failure_policy": rec.data["failure"],
                              "success_exclude_policy": rec.data["exclude"],
                              "n_images": rec.data["n_images"], "n_unparseable": rec.data["n_unparseable"],
                              "ledger_key": f"success/{m}/{a}"})
            rows.append(row)
        md.append(_md_table(header, rows))
        bundle.files.append(_write_csv(out / "attribute_success.csv",
                                       ["attribute", "method", "success_failure_policy",
                                        "success_exclude_policy", "n_images", "n_unparseable", "ledger_key"],
                                       srows))

    # -- figures ---------------------------------------------------------------------
    figs = []
    for mid, brs in bar_rows.items():
        if brs:
            figs.append(plotting.fnmr_bars(brs, [METHOD_LABELS.get(m, m) for m in methods],
                                           out / f"fnmr_{mid}.png", f"{dataset} / {_label(mid)}"))
    if opts.get("histograms", True):
        for mid in matchers:
            rec = rates_cells.get(("original", "original", mid))
            if rec and "scores" in rec.artifacts:
                gen, imp = _read_scores(ledger.artifact(rec, "scores"))
                thr = {f"FMR {_pct(r['target'])}%": r["threshold"] for r in rec.data["rates"]["rows"]}
                figs.append(plotting.score_histogram(gen, imp, thr, out / f"scores_original_{mid}.png",
                                                     f"Original / {_label(mid)}"))
    if opts.get("tsne"):
        for m in methods:
            for mid in matchers:
                embs, labels = [], []
                for rec in ledger.cells("match", "ok"):
                    if rec.key[0] == m and rec.key[3] == mid:
                        for e in load_embeddings(ledger.artifact(rec, "embeddings")):
                            if e.detect_ok:
                                embs.append(e)
                                labels.append(rec.key[2])
                try:
                    tsne_export(embs, 3, 0, labels, out / f"tsne_{m}_{mid}.csv", out / f"tsne_{m}_{mid}.png")
                    figs += [out / f"tsne_{m}_{mid}.csv", out / f"tsne_{m}_{mid}.png"]
                except ParameterError as exc:
                    bundle.notes.append(f"t-SNE skipped for {m}/{mid}: {exc}")
    bundle.files.extend(figs)

    if bundle.notes:
        md.append("\n" + "\n".join(f"- {n}" for n in bundle.notes) + "\n")
    md_path = out / "report.md"
    md_path.write_text("\n".join(md))
    bundle.files.insert(0, md_path)

    from .pipeline import sha256_file

    bundle.checksums = {p.name: sha256_file(p) for p in bundle.files}
    return bundle


def _read_scores(path):
    gen, imp = [], []
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            (gen if row["kind"] == "genuine" else imp).append(float(row["score"]))
    return gen, imp
