"""
Report files: fc matrix CSV and table, per-reference bar charts, PR curve,
per-query matches and the method comparison.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # pylint: disable=wrong-import-position
import numpy as np  # pylint: disable=wrong-import-position
import pandas as pd  # pylint: disable=wrong-import-position

from ..formats import atomic_path  # pylint: disable=wrong-import-position
from ..retrieval import eval_report, match_result, pr_point  # pylint: disable=wrong-import-position

logger = logging.getLogger(__name__)

FC_MATRIX_CSV = "fc_matrix.csv"
FC_TABLE_TXT = "fc_table.txt"
PR_CURVE_CSV = "pr_curve.csv"
PR_CURVE_PNG = "pr_curve.png"
COMPARISON_CSV = "comparison.csv"
LAYER_SWEEP_CSV = "layer_sweep.csv"
MATCHES_DIR = "matches"


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False)
    return path


def _save_figure(fig, path: Path) -> Path:
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format="png", dpi=100)
    plt.close(fig)
    return path


def fc_frame(report: eval_report) -> pd.DataFrame:
    # pylint: disable=missing-function-docstring
    rows = [(q, r, report.fc_matrix[(q, r)]) for q, r in report.combinations()]
    return pd.DataFrame(rows, columns=["input", "reference", "fc"])


def write_fc_matrix(report: eval_report, path: Union[str, Path]) -> Path:
    # pylint: disable=missing-function-docstring
    return _write_csv(fc_frame(report), Path(path))


def read_fc_matrix(path: Union[str, Path]) -> Tuple[List[str], Dict[Tuple[str, str], float]]:
    """
    @brief Load an fc matrix CSV.

    @return (seasons in first-appearance order, (input, reference) -> fc).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"fc matrix not found: {path}")
    frame = pd.read_csv(
        path,
        dtype={"input": str, "reference": str, "fc": np.float64},
        float_precision="round_trip",
    )
    seasons: List[str] = []
    matrix = {}
    for row in frame.itertuples(index=False):
        for season in (row.input, row.reference):
            if season not in seasons:
                seasons.append(season)
        matrix[(row.input, row.reference)] = float(row.fc)
    return seasons, matrix


def write_pr_curve(curve: List[pr_point], path: Union[str, Path]) -> Path:
    # pylint: disable=missing-function-docstring
    frame = pd.DataFrame(curve, columns=["threshold", "precision", "recall"])
    return _write_csv(frame, Path(path))


def read_pr_curve(path: Union[str, Path]) -> List[pr_point]:
    # pylint: disable=missing-function-docstring
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"PR curve not found: {path}")
    frame = pd.read_csv(path, dtype=np.float64, float_precision="round_trip")
    return [pr_point(*map(float, row)) for row in frame.itertuples(index=False)]


def write_matches(report: eval_report, directory: Union[str, Path]) -> List[Path]:
    """
    @brief One query,retrieved,distance,correct CSV per combination, named
           <input>__<reference>.csv.
    """
    directory = Path(directory)
    paths = []
    for query, reference in report.combinations():
        found = report.matches.get((query, reference), [])
        frame = pd.DataFrame(
            [(m.query_index, m.retrieved_index, m.distance, bool(m.correct)) for m in found],
            columns=["query", "retrieved", "distance", "correct"],
        )
        paths.append(_write_csv(frame, directory / f"{query}__{reference}.csv"))
    return paths


def read_matches(path: Union[str, Path]) -> List[match_result]:
    # pylint: disable=missing-function-docstring
    frame = pd.read_csv(path, float_precision="round_trip")
    return [
        match_result(int(r.query), int(r.retrieved), float(r.distance), bool(r.correct))
        for r in frame.itertuples(index=False)
    ]


def format_table(report: eval_report) -> str:
    """
    @brief Fixed-width fc table: one row per input season, one column per
           reference season, "-" on the diagonal.
    """
    seasons = report.seasons
    width = max(10, *(len(s) + 2 for s in seasons))
    lines = [f"fraction of correct matches (tolerance {report.tolerance}, {report.source})"]
    lines.append("input \\ reference".ljust(20) + "".join(s.rjust(width) for s in seasons))
    for query in seasons:
        cells = []
        for reference in seasons:
            fc = report.fc_matrix.get((query, reference))
            cells.append(("-" if fc is None else f"{fc:.4f}").rjust(width))
        lines.append(query.ljust(20) + "".join(cells))
    lines.append(f"mean {report.mean_fc():.4f}")
    return "\n".join(lines) + "\n"


def _bar_chart(report: eval_report, reference: str, path: Path) -> Path:
    inputs = [q for q in report.seasons if (q, reference) in report.fc_matrix]
    values = [report.fc_matrix[(q, reference)] for q in inputs]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(inputs, values, color=plt.cm.Set2(np.arange(len(inputs)) % 8))
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("input season")
    ax.set_ylabel("fraction of correct matches")
    ax.set_title(f"reference: {reference}")
    fig.tight_layout()
    return _save_figure(fig, path)


def _pr_plot(curve: List[pr_point], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([p.recall for p in curve], [p.precision for p in curve], marker=".")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    fig.tight_layout()
    return _save_figure(fig, path)


def emit_report(report: eval_report, outdir: Union[str, Path]) -> List[Path]:
    """
    @brief Write the full report for one evaluation.

    @param report: Non-empty evaluation report with a PR curve.
    @param outdir: Destination directory, created when missing.

    @return Paths written: fc_matrix.csv, fc_table.txt, bar_<reference>.png
            per reference season, pr_curve.csv and pr_curve.png.

    Nothing is written when the report is empty.
    """
    if not report.fc_matrix:
        raise ValueError("cannot emit a report with an empty fc matrix")
    if not report.pr_curve:
        raise ValueError("cannot emit a report without a PR curve")

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = [write_fc_matrix(report, outdir / FC_MATRIX_CSV)]
    with atomic_path(outdir / FC_TABLE_TXT) as tmp:
        tmp.write_text(format_table(report), encoding="utf-8")
    paths.append(outdir / FC_TABLE_TXT)
    references = [r for r in report.seasons if any(k[1] == r for k in report.fc_matrix)]
    for reference in references:
        paths.append(_bar_chart(report, reference, outdir / f"bar_{reference}.png"))
    paths.append(write_pr_curve(report.pr_curve, outdir / PR_CURVE_CSV))
    paths.append(_pr_plot(report.pr_curve, outdir / PR_CURVE_PNG))
    logger.info("report with %d fc entries written to %s", len(report.fc_matrix), outdir)
    return paths


def comparison_frame(reports: Mapping[str, eval_report]) -> pd.DataFrame:
    # pylint: disable=missing-function-docstring
    rows = []
    for method, report in reports.items():
        rows.extend((method, q, r, report.fc_matrix[(q, r)]) for q, r in report.combinations())
    return pd.DataFrame(rows, columns=["method", "input", "reference", "fc"])


def write_comparison(reports: Mapping[str, eval_report], path: Union[str, Path]) -> Path:
    # pylint: disable=missing-function-docstring
    return _write_csv(comparison_frame(reports), Path(path))


def read_comparison(path: Union[str, Path]) -> Dict[str, eval_report]:
    """
    @brief Load a method,input,reference,fc CSV back into one fc-only
           report per method, methods in first-appearance order.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"comparison not found: {path}")
    frame = pd.read_csv(
        path,
        dtype={"method": str, "input": str, "reference": str, "fc": np.float64},
        float_precision="round_trip",
    )
    reports: Dict[str, eval_report] = {}
    for method, rows in frame.groupby("method", sort=False):
        seasons = list(dict.fromkeys(list(rows["input"]) + list(rows["reference"])))
        matrix = {(r.input, r.reference): float(r.fc) for r in rows.itertuples(index=False)}
        reports[method] = eval_report(seasons, matrix, source=method)
    return reports


def emit_comparison(reports: Mapping[str, eval_report], outdir: Union[str, Path]) -> List[Path]:
    """
    @brief Compare methods (pre-trained tap, siamese, triplet, fine-tuned ...)
           on the same season combinations.

    @return comparison.csv (method,input,reference,fc) and one grouped bar
            chart compare_<reference>.png per reference season.
    """
    if not reports or any(not r.fc_matrix for r in reports.values()):
        raise ValueError("cannot compare empty reports")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    paths = [write_comparison(reports, outdir / COMPARISON_CSV)]

    methods = list(reports)
    seasons = next(iter(reports.values())).seasons
    width = 0.8 / len(methods)
    for reference in seasons:
        inputs = [q for q in seasons if q != reference]
        fig, ax = plt.subplots(figsize=(7, 3.5))
        for k, method in enumerate(methods):
            values = [reports[method].fc_matrix.get((q, reference), 0.0) for q in inputs]
            ax.bar(np.arange(len(inputs)) + k * width, values, width, label=method)
        ax.set_xticks(np.arange(len(inputs)) + width * (len(methods) - 1) / 2)
        ax.set_xticklabels(inputs)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("fraction of correct matches")
        ax.set_title(f"reference: {reference}")
        ax.legend(fontsize="small")
        fig.tight_layout()
        paths.append(_save_figure(fig, outdir / f"compare_{reference}.png"))
    return paths
