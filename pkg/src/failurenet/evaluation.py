"""Accuracy metrics, per-failure-mode breakdowns, and report files.

Reports carry one row per detection method with overall accuracy, confusion
counts, parameter counts where applicable, and a fixed column order of
failure modes. Failure-mode columns report the fraction of that mode's
windows flagged Unsafe; the Nominal column reports the fraction passed
Safe, so every column reads "higher is better".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "accuracy",
    "confusion",
    "per_mode_accuracy",
    "MethodResult",
    "EvalReport",
    "emit_report",
    "parse_report",
    "MODE_COLUMNS",
]

# Fixed report column order. Keys are internal mode tags, values the
# display names used in the text table.
MODE_COLUMNS = [
    ("periodic", "Periodic"),
    ("lane_shift", "LaneShift"),
    ("reckless", "Reckless"),
    ("speeding", "Speeding"),
    ("nominal", "Nominal"),
]


def _binarize(predictions) -> np.ndarray:
    """Soft scores become verdicts at z_hat > 0.5; 0/1 input passes through."""
    arr = np.asarray(predictions, dtype=np.float64)
    return (arr > 0.5).astype(np.int64)


def accuracy(predictions, labels) -> float:
    preds = _binarize(predictions)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise ValueError("cannot score an empty prediction set")
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: predictions {preds.shape} vs labels {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    correct = int(np.sum(preds == labels.astype(np.int64)))
    return correct / preds.size


def confusion(predictions, labels) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) with Unsafe as the positive class."""
    preds = _binarize(predictions)
    labels = np.asarray(labels).astype(np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: predictions {preds.shape} vs labels {labels.shape}")
    tp = int(np.sum((preds == 1) & (labels == 1)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    return tp, tn, fp, fn


def per_mode_accuracy(predictions, modes) -> dict[str, float]:
    """Per-mode correctness; modes with no windows are simply absent."""
    preds = _binarize(predictions)
    modes = list(modes)
    if len(modes) != preds.size:
        raise ValueError("predictions and mode tags length mismatch")
    out: dict[str, float] = {}
    arr = np.asarray(modes)
    for mode in dict.fromkeys(modes):  # first-seen order, no duplicates
        sel = preds[arr == mode]
        if mode == "nominal":
            out[mode] = float(np.mean(sel == 0))
        else:
            out[mode] = float(np.mean(sel == 1))
    return out


@dataclass
class MethodResult:
    name: str
    overall: float
    per_mode: dict[str, float]
    confusion: tuple[int, int, int, int]
    n_params: int | None = None


@dataclass
class EvalReport:
    methods: list[MethodResult]
    dataset_meta: dict = field(default_factory=dict)

    def total_windows(self) -> int:
        if not self.methods:
            return 0
        return sum(self.methods[0].confusion)


_CSV_HEADER = "method,params,tp,tn,fp,fn,all," + ",".join(tag for tag, _ in MODE_COLUMNS)


def emit_report(report: EvalReport, destination: str | Path) -> tuple[Path, Path]:
    """Write <destination>.csv (machine) and <destination>.txt (aligned text).

    Accuracies are stored at full precision in the CSV; the text table
    shows percentages. A method missing a mode leaves that cell empty.
    """
    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    csv_path = destination.with_suffix(".csv")
    txt_path = destination.with_suffix(".txt")

    lines = [f"# dataset {json.dumps(report.dataset_meta, sort_keys=True)}", _CSV_HEADER]
    for m in report.methods:
        cells = [m.name, "" if m.n_params is None else str(m.n_params)]
        cells += [str(c) for c in m.confusion]
        cells.append(f"{m.overall:.17g}")
        for tag, _ in MODE_COLUMNS:
            v = m.per_mode.get(tag)
            cells.append("" if v is None else f"{v:.17g}")
        lines.append(",".join(cells))
    csv_path.write_text("\n".join(lines) + "\n")

    headers = ["Method", "Params", "All"] + [disp for _, disp in MODE_COLUMNS]
    rows = []
    for m in report.methods:
        row = [m.name, "" if m.n_params is None else f"{m.n_params:,}", f"{100*m.overall:.2f}"]
        for tag, _ in MODE_COLUMNS:
            v = m.per_mode.get(tag)
            row.append("" if v is None else f"{100*v:.2f}")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    table = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    table.append("  ".join("-" * w for w in widths))
    for row in rows:
        table.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)))
    note = "failure-mode columns: fraction flagged Unsafe; Nominal: fraction passed Safe"
    txt_path.write_text("\n".join(table) + "\n\n" + note + "\n")
    return csv_path, txt_path


def parse_report(csv_path: str | Path) -> EvalReport:
    """Inverse of emit_report for the CSV half; exact for %.17g floats."""
    lines = Path(csv_path).read_text().splitlines()
    if not lines or not lines[0].startswith("# dataset "):
        raise ValueError(f"{csv_path}: missing dataset header")
    meta = json.loads(lines[0][len("# dataset ") :])
    if len(lines) < 2 or lines[1] != _CSV_HEADER:
        raise ValueError(f"{csv_path}: unexpected column header")
    methods = []
    for line in lines[2:]:
        if not line.strip():
            continue
        cells = line.split(",")
        name = cells[0]
        n_params = int(cells[1]) if cells[1] else None
        conf = tuple(int(c) for c in cells[2:6])
        overall = float(cells[6])
        per_mode = {}
        for (tag, _), cell in zip(MODE_COLUMNS, cells[7:]):
            if cell:
                per_mode[tag] = float(cell)
        methods.append(
            MethodResult(name=name, overall=overall, per_mode=per_mode, confusion=conf, n_params=n_params)
        )
    return EvalReport(methods=methods, dataset_meta=meta)
