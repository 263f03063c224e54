"""Atlas region ranking of heatmaps, per-class region tables and the arm ablation table."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..volume import LabelVolume, values

BACKGROUND = "Background"


@dataclass(frozen=True)
class RegionRow:
    region_id: int
    name: str
    mean: float
    rank: int
    voxels: int
    empty: bool = False


@dataclass(frozen=True)
class RegionReport:
    """Rows sorted by mean descending, ties by region id ascending."""

    rows: tuple[RegionRow, ...]
    label: str = ""

    def by_id(self) -> dict[int, RegionRow]:
        return {r.region_id: r for r in self.rows}

    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    @property
    def flagged(self) -> list[str]:
        return [r.name for r in self.rows if r.empty]


def _ranked(entries, label: str = "") -> RegionReport:
    """entries: (region_id, name, mean, voxels, empty)."""
    order = sorted(entries, key=lambda e: (-e[2], e[0]))
    return RegionReport(tuple(RegionRow(rid, name, float(m), k + 1, int(n), bool(empty))
                              for k, (rid, name, m, n, empty) in enumerate(order)), label)


def region_rank(heatmap, atlas: LabelVolume, include_background: bool = False, label: str = "") -> RegionReport:
    """Mean heatmap value inside every atlas region, ranked.

    Regions named in the atlas but without voxels are reported with mean 0
    and flagged ``empty``.
    """
    heat = values(heatmap)
    if heat.shape != atlas.dims:
        raise ValueError(f"heatmap dims {heat.shape} != atlas dims {atlas.dims}")
    labels = atlas.labels.ravel()
    ids = sorted((set(int(k) for k in atlas.names) | set(np.unique(labels).tolist())) - {0})
    if include_background:
        ids = [0] + ids
    size = max(ids, default=0) + 1
    sums = np.bincount(labels, weights=heat.ravel(), minlength=size)
    counts = np.bincount(labels, minlength=size)
    entries = []
    for rid in ids:
        n = int(counts[rid]) if rid < len(counts) else 0
        mean = sums[rid] / n if n else 0.0
        name = BACKGROUND if rid == 0 else atlas.names.get(rid, f"region-{rid}")
        entries.append((rid, name, mean, n, n == 0))
    return _ranked(entries, label)


def aggregate_reports(reports, label: str = "") -> RegionReport:
    """Per-region mean of subject-level means, re-ranked."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    ref = {r.region_id: r.name for r in reports[0].rows}
    for rep in reports[1:]:
        if {r.region_id: r.name for r in rep.rows} != ref:
            raise ValueError("reports come from inconsistent atlases")
    entries = []
    for rid, name in ref.items():
        rows = [rep.by_id()[rid] for rep in reports]
        mean = float(np.mean([r.mean for r in rows]))
        entries.append((rid, name, mean, rows[0].voxels, all(r.empty for r in rows)))
    return _ranked(entries, label or reports[0].label)


def render_region_table(reports: dict, decimals: int = 2) -> str:
    """Markdown table with one column per class; cells read "Name (mean)"."""
    classes = list(reports)
    depth = max(len(reports[c].rows) for c in classes)
    lines = ["| " + " | ".join(classes) + " |", "|" + "---|" * len(classes)]
    for i in range(depth):
        cells = []
        for c in classes:
            rows = reports[c].rows
            cells.append(f"{rows[i].name} ({rows[i].mean:.{decimals}f})" if i < len(rows) else "")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def region_table_csv(reports: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "rank", "region_id", "region", "mean", "voxels", "empty"])
    for c, rep in reports.items():
        for r in rep.rows:
            w.writerow([c, r.rank, r.region_id, r.name, repr(r.mean), r.voxels, int(r.empty)])
    return buf.getvalue()


def read_region_csv(text: str) -> dict[str, RegionReport]:
    """Inverse of :func:`region_table_csv`."""
    grouped: dict[str, list] = {}
    for row in csv.DictReader(io.StringIO(text)):
        grouped.setdefault(row["class"], []).append(
            (int(row["region_id"]), row["region"], float(row["mean"]), int(row["voxels"]), row["empty"] == "1"))
    return {c: _ranked(entries, c) for c, entries in grouped.items()}


def render_ablation_table(arms: dict, classes=("CN", "MCI", "MLD", "MOD")) -> str:
    """Markdown table: per-class accuracy, precision and recall (percent, one
    decimal) for each arm. ``arms`` maps arm name to a Metrics-like object or
    a dict with ``per_class_accuracy``, ``precision`` and ``recall`` in [0, 1]."""
    header = ["Arm"] + [f"{m} {c}" for m in ("Accuracy", "Precision", "Recall") for c in classes]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for name, m in arms.items():
        get = (lambda k: m[k]) if isinstance(m, dict) else (lambda k: getattr(m, k))
        values = [*get("per_class_accuracy"), *get("precision"), *get("recall")]
        lines.append("| " + " | ".join([name] + [f"{100 * float(v):.1f}" for v in values]) + " |")
    return "\n".join(lines) + "\n"
