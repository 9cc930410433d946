"""Report files: full JSON, a one-row CSV, a two-column plot-data TSV and a bar chart."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import EvalError, EvalReport  # noqa: E402
from .tasks import CATEGORIES  # noqa: E402

CSV_COLUMNS = ("mode", "seed", "tokens", *CATEGORIES, "average")
TABLE_COLUMNS = ("label", "seed", "tokens", "clip_tokens", *CATEGORIES, "average", "error")
_PNG_META = {"Software": None}  # keeps the PNG bytes independent of the matplotlib version


def _paths(prefix: str | Path) -> dict[str, Path]:
    prefix = Path(prefix)
    return {ext: prefix.with_name(prefix.name + ext) for ext in (".json", ".csv", ".tsv", ".png", ".timing.json")}


def _fmt_acc(x) -> str:
    return "" if x is None else f"{x:.2f}"


def emit_report(report: EvalReport, prefix: str | Path, plot: bool = True) -> dict[str, Path]:
    """Write ``<prefix>.json/.csv/.tsv/.png``; wall-clock goes to ``<prefix>.timing.json`` so the rest is reproducible."""
    if not report.per_category:
        raise EvalError("refusing to write a report for an empty suite")
    paths = _paths(prefix)
    paths[".json"].parent.mkdir(parents=True, exist_ok=True)
    paths[".json"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    row = {"mode": report.mode, "seed": report.seed, "tokens": report.tokens, "average": _fmt_acc(report.average)}
    for c in CATEGORIES:
        row[c] = _fmt_acc(report.per_category[c]["acc"]) if c in report.per_category else ""
    with paths[".csv"].open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        w.writerow(row)

    lines = ["category\taccuracy"]
    lines += [f"{c}\t{report.per_category[c]['acc']!r}" for c in CATEGORIES if c in report.per_category]
    paths[".tsv"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    paths[".timing.json"].write_text(json.dumps({"wall_clock_s": report.wall_clock}) + "\n", encoding="utf-8")
    if plot:
        plot_report(report, paths[".png"])
    else:
        del paths[".png"]
    return paths


def load_report(path: str | Path) -> EvalReport:
    path = Path(path)
    d = json.loads(path.read_text(encoding="utf-8"))
    timing = path.with_name(path.name[: -len(".json")] + ".timing.json") if path.name.endswith(".json") else None
    wall = 0.0
    if timing is not None and timing.is_file():
        wall = json.loads(timing.read_text(encoding="utf-8"))["wall_clock_s"]
    return EvalReport.from_dict(d, wall)


def plot_report(report: EvalReport, path: str | Path) -> None:
    cats = [c for c in CATEGORIES if c in report.per_category]
    acc = [report.per_category[c]["acc"] for c in cats]
    lo = [a - report.per_category[c]["ci"][0] for a, c in zip(acc, cats)]
    hi = [report.per_category[c]["ci"][1] - a for a, c in zip(acc, cats)]
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.bar(range(len(cats)), acc, yerr=[lo, hi], color="0.55", capsize=3)
    ax.axhline(25.0, color="k", lw=0.8, ls="--")
    ax.set_xticks(range(len(cats)), cats, rotation=30, ha="right")
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    ax.set_title(f"{report.mode}  avg {report.average:.1f}  ({report.tokens} tokens)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def ablation_rows(cells: list[dict]) -> list[dict]:
    rows = []
    for cell in cells:
        row = {"label": cell["label"], "seed": cell["seed"], "tokens": cell.get("tokens", ""),
               "clip_tokens": cell.get("clip_tokens", ""), "error": cell.get("error", "")}
        rep = cell.get("report")
        for c in CATEGORIES:
            row[c] = _fmt_acc(rep.per_category[c]["acc"]) if rep and c in rep.per_category else ""
        row["average"] = _fmt_acc(rep.average) if rep else ""
        rows.append(row)
    return rows


def emit_table(cells: list[dict], prefix: str | Path, plot: bool = True) -> dict[str, Path]:
    """Ablation table: one row per (config, seed) with #tokens, per-category accuracy and average."""
    if not cells:
        raise EvalError("refusing to write an empty ablation table")
    paths = _paths(prefix)
    paths[".json"].parent.mkdir(parents=True, exist_ok=True)
    blob = []
    for cell in cells:
        d = {k: v for k, v in cell.items() if k != "report"}
        if "report" in cell:
            d["report"] = cell["report"].to_dict()
        blob.append(d)
    paths[".json"].write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    rows = ablation_rows(cells)
    with paths[".csv"].open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    lines = ["label\taverage"] + [f"{r['label']}/{r['seed']}\t{r['average']}" for r in rows]
    paths[".tsv"].write_text("\n".join(lines) + "\n", encoding="utf-8")
    wall = sum(c["report"].wall_clock for c in cells if "report" in c)
    paths[".timing.json"].write_text(json.dumps({"wall_clock_s": wall}) + "\n", encoding="utf-8")
    scored = [r for r in rows if r["average"] != ""]
    if plot and scored:
        fig, ax = plt.subplots(figsize=(6.4, 3.2))
        ax.bar(range(len(scored)), [float(r["average"]) for r in scored], color="0.55")
        ax.set_xticks(range(len(scored)), [f"{r['label']}\n{r['tokens']} tok" for r in scored], fontsize=7)
        ax.set_ylim(0, 100)
        ax.set_ylabel("average accuracy (%)")
        fig.tight_layout()
        fig.savefig(paths[".png"], dpi=100, metadata=_PNG_META)
        plt.close(fig)
    else:
        del paths[".png"]
    return paths
