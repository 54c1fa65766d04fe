"""Dice scoring per structure and combined, median aggregation, reporting."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field

import numpy as np

from .errors import AggregationError, EvaluationError, GridError
from .volio import LabelVolume

METRICS_FORMAT = "slicecast-metrics/1"


@dataclass(frozen=True)
class MetricsRecord:
    volume_id: str
    per_structure: dict  # structure name -> DSC
    combined: float | None  # present iff >= 2 structures evaluated
    voxel_counts: dict = field(default_factory=dict)
    scheme: str | None = None
    backend_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "format": METRICS_FORMAT,
            "volume_id": self.volume_id,
            "per_structure": self.per_structure,
            "combined": self.combined,
            "voxel_counts": self.voxel_counts,
            "scheme": self.scheme,
            "backend_id": self.backend_id,
        }

    @classmethod
    def from_dict(cls, d) -> "MetricsRecord":
        return cls(volume_id=d["volume_id"],
                   per_structure=dict(d["per_structure"]),
                   combined=d.get("combined"),
                   voxel_counts=dict(d.get("voxel_counts", {})),
                   scheme=d.get("scheme"),
                   backend_id=d.get("backend_id"))


@dataclass
class SummaryTable:
    """Rows keyed by (prompt scheme, backend id): medians per structure."""

    rows: dict = field(default_factory=dict)

    def add_row(self, scheme: str, backend_id: str, row: dict) -> None:
        self.rows[(scheme, backend_id)] = row


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """Dice similarity coefficient 2|A∩B| / (|A|+|B|); 1.0 when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise GridError(f"mask dims differ: {a.shape} vs {b.shape}")
    na = int(a.sum())
    nb = int(b.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return 2.0 * inter / (na + nb)


def evaluate_volume(pred, gt: LabelVolume, volume_id: str = "volume",
                    combined_rule: str = "union") -> MetricsRecord:
    """Score one PredictionSet against ground truth labels.

    Per-structure DSC is computed over the full 3D stack. The combined
    score is the DSC of the unions of all predicted vs all reference
    structures; ``combined_rule="macro"`` averages the per-structure scores
    instead.
    """
    if pred.dims != gt.dims:
        raise GridError(f"prediction dims {pred.dims} != labels {gt.dims}")
    if combined_rule not in ("union", "macro"):
        raise ValueError(f"unknown combined rule {combined_rule!r}")
    per_structure = {}
    voxel_counts = {}
    int_objects = []
    for obj in sorted(pred.masks, key=lambda o: (isinstance(o, str), str(o))):
        if not isinstance(obj, (int, np.integer)) or obj not in gt.label_names:
            raise EvaluationError(
                f"predicted object {obj!r} absent from label_names "
                f"{sorted(gt.label_names)}")
        name = gt.label_names[obj]
        gt_mask = gt.mask_for(obj)
        pred_mask = pred.masks[obj]
        per_structure[name] = dsc(pred_mask, gt_mask)
        voxel_counts[name] = {"pred": int(pred_mask.sum()),
                              "gt": int(gt_mask.sum())}
        int_objects.append(obj)
    combined = None
    if len(int_objects) >= 2:
        if combined_rule == "union":
            pred_union = np.zeros(pred.dims, dtype=bool)
            gt_union = np.zeros(pred.dims, dtype=bool)
            for obj in int_objects:
                pred_union |= pred.masks[obj]
                gt_union |= gt.mask_for(obj)
            combined = dsc(pred_union, gt_union)
        else:
            combined = float(np.mean(list(per_structure.values())))
    prov = pred.provenance or {}
    return MetricsRecord(volume_id=volume_id, per_structure=per_structure,
                         combined=combined, voxel_counts=voxel_counts,
                         scheme=prov.get("scheme"),
                         backend_id=prov.get("backend_id"))


def aggregate(records) -> dict:
    """Median per structure and combined; even counts take the mid-mean."""
    records = list(records)
    if not records:
        raise AggregationError("no records to aggregate")
    structures: list[str] = []
    for r in records:
        for name in r.per_structure:
            if name not in structures:
                structures.append(name)
    row = {"n_volumes": len(records)}
    for name in structures:
        vals = [r.per_structure[name] for r in records if name in r.per_structure]
        row[name] = float(statistics.median(vals))
    combined_vals = [r.combined for r in records if r.combined is not None]
    row["combined"] = (float(statistics.median(combined_vals))
                       if combined_vals else None)
    return row


def build_summary(records) -> SummaryTable:
    """Group records by (scheme, backend_id) and aggregate each group."""
    groups: dict = {}
    for r in records:
        key = (r.scheme or "-", r.backend_id or "-")
        groups.setdefault(key, []).append(r)
    table = SummaryTable()
    for key in sorted(groups):
        table.add_row(key[0], key[1], aggregate(groups[key]))
    return table


def _structure_columns(table: SummaryTable) -> list[str]:
    cols: list[str] = []
    for row in table.rows.values():
        for name in row:
            if name not in ("n_volumes", "combined") and name not in cols:
                cols.append(name)
    return cols


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def render_report(table: SummaryTable, fmt: str = "markdown") -> str:
    """Deterministic text table; DSC with 4 decimals."""
    if fmt not in ("markdown", "tsv"):
        raise ValueError(f"unknown report format {fmt!r}")
    structures = _structure_columns(table)
    combined_header = (" + ".join(s.capitalize() for s in structures)
                       if structures else "Combined")
    headers = (["Prompt", "Backend"]
               + [s.capitalize() for s in structures]
               + [combined_header, "n"])
    body = []
    for (scheme, backend_id) in sorted(table.rows):
        row = table.rows[(scheme, backend_id)]
        body.append([scheme, backend_id]
                    + [_fmt(row.get(s)) for s in structures]
                    + [_fmt(row.get("combined")), str(row["n_volumes"])])
    if fmt == "tsv":
        lines = ["\t".join(headers)] + ["\t".join(r) for r in body]
        return "\n".join(lines) + "\n"
    lines = ["| " + " | ".join(headers) + " |",
             "|" + "|".join("---" for _ in headers) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def save_records(records, path, append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_records(path) -> list[MetricsRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(MetricsRecord.from_dict(json.loads(line)))
    return records
