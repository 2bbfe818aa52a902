"""Per-class, per-image and harmonic F1 scores for multi-label annotation.

Counts follow the usual definitions: for class ``j``, ``ni_correct[j]`` is
the number of images correctly labelled ``j``, ``ni_predicted[j]`` the
images predicted ``j`` and ``ni_truth[j]`` those carrying ``j``; the ``nl_*``
arrays hold the same counts per image.  Classes that are never predicted
(or never present) contribute zero precision (recall) rather than NaN.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, DimensionError

COLUMNS = ("C-P", "C-R", "C-F1", "I-P", "I-R", "I-F1", "H-F1", "LQP-Acc", "LQP-MSE")


@dataclass
class CountTable:
    ni_correct: np.ndarray
    ni_predicted: np.ndarray
    ni_truth: np.ndarray
    nl_correct: np.ndarray
    nl_predicted: np.ndarray
    nl_truth: np.ndarray

    @property
    def num_classes(self):
        return len(self.ni_correct)

    @property
    def num_images(self):
        return len(self.nl_correct)

    def check(self):
        pairs = [
            (self.ni_correct, self.nl_correct),
            (self.ni_predicted, self.nl_predicted),
            (self.ni_truth, self.nl_truth),
        ]
        for per_class, per_image in pairs:
            if per_class.sum() != per_image.sum():
                raise ContractError("count table: per-class and per-image totals disagree")
        for arr in (a for pair in pairs for a in pair):
            if np.any(arr < 0):
                raise ContractError("count table: negative count")
        return self


@dataclass
class MetricsReport:
    """Scores in percent.  ``degenerate`` flags an all-zero count table."""

    c_p: float
    c_r: float
    c_f1: float
    i_p: float
    i_r: float
    i_f1: float
    h_f1: float
    lqp_accuracy: float | None = None
    lqp_mse: float | None = None
    degenerate: bool = False
    extra: dict = field(default_factory=dict)

    def row(self):
        return (self.c_p, self.c_r, self.c_f1, self.i_p, self.i_r, self.i_f1, self.h_f1,
                self.lqp_accuracy, self.lqp_mse)


def harmonic_mean(a, b):
    if a == b:
        return a  # exact, so equal precision and recall give F1 bit-for-bit
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def label_matrix(label_sets, num_classes):
    """Binary [N, C] indicator from per-image label collections."""
    mat = np.zeros((len(label_sets), num_classes), dtype=np.int64)
    for i, labels in enumerate(label_sets):
        for j in labels:
            if not 0 <= j < num_classes:
                raise ContractError(f"image {i}: label index {j} outside [0, {num_classes})")
            mat[i, j] = 1
    return mat


def tally(predictions, truth, num_classes):
    """Count table from predicted and true label sets (one collection per image)."""
    if len(predictions) != len(truth):
        raise DimensionError(f"{len(predictions)} predictions for {len(truth)} images")
    pred = label_matrix(predictions, num_classes)
    true = label_matrix(truth, num_classes)
    return tally_matrices(pred, true)


def tally_matrices(pred, true):
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise DimensionError(f"prediction matrix {pred.shape} vs truth {true.shape}")
    hit = pred & true
    return CountTable(
        ni_correct=hit.sum(axis=0),
        ni_predicted=pred.sum(axis=0),
        ni_truth=true.sum(axis=0),
        nl_correct=hit.sum(axis=1),
        nl_predicted=pred.sum(axis=1),
        nl_truth=true.sum(axis=1),
    )


def compute_metrics(table):
    table.check()
    c_p = float(_safe_div(table.ni_correct, table.ni_predicted).mean()) if table.num_classes else 0.0
    c_r = float(_safe_div(table.ni_correct, table.ni_truth).mean()) if table.num_classes else 0.0
    i_p = float(_safe_div(table.nl_correct.sum(), table.nl_predicted.sum()))
    i_r = float(_safe_div(table.nl_correct.sum(), table.nl_truth.sum()))
    c_f1 = harmonic_mean(c_p, c_r)
    i_f1 = harmonic_mean(i_p, i_r)
    degenerate = not (table.ni_predicted.any() or table.ni_truth.any())
    return MetricsReport(
        c_p=100 * c_p,
        c_r=100 * c_r,
        c_f1=100 * c_f1,
        i_p=100 * i_p,
        i_r=100 * i_r,
        i_f1=100 * i_f1,
        h_f1=100 * harmonic_mean(c_f1, i_f1),
        degenerate=degenerate,
    )


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_quantity(m_hat, max_quantity):
    """Nearest integer (half away from zero) clamped to ``[1, max_quantity]``."""
    return np.clip(round_half_away(m_hat), 1, max_quantity).astype(np.int64)


def lqp_quality(m_hat, m, max_quantity):
    """Return ``(accuracy in percent, mse on raw predictions)``."""
    m_hat = np.asarray(m_hat, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if m_hat.shape != m.shape:
        raise DimensionError(f"{m_hat.shape} predictions vs {m.shape} quantities")
    if m.size == 0:
        return 0.0, 0.0
    acc = float(np.mean(quantize_quantity(m_hat, max_quantity) == m)) * 100
    mse = float(np.mean((m_hat - m) ** 2))
    return acc, mse


def _fmt(value, digits):
    return "" if value is None else f"{value:.{digits}f}"


def report_render(reports, label="model"):
    """CSV text: one row per named report, fixed column order."""
    if isinstance(reports, MetricsReport):
        reports = {"": reports}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow((label,) + COLUMNS)
    for name, rep in reports.items():
        cells = [_fmt(v, 2) for v in rep.row()[:8]] + [_fmt(rep.lqp_mse, 4)]
        writer.writerow([name] + cells)
    return buf.getvalue()


def report_table(reports, label="model"):
    """Fixed-width text rendering of the same rows."""
    width = max([len(label)] + [len(n) for n in reports]) + 2
    lines = [label.ljust(width) + "".join(c.rjust(9) for c in COLUMNS)]
    for name, rep in reports.items():
        cells = [_fmt(v, 2) or "-" for v in rep.row()[:8]] + [_fmt(rep.lqp_mse, 4) or "-"]
        lines.append(name.ljust(width) + "".join(c.rjust(9) for c in cells))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# record files: "<id>\t<i,j,k>[\t<extra>...]"
# ----------------------------------------------------------------------
def format_indices(indices):
    return ",".join(str(int(i)) for i in sorted(indices))


def parse_indices(field_text):
    field_text = field_text.strip()
    return tuple(int(v) for v in field_text.split(",")) if field_text else ()


def format_record(record_id, labels, *extra):
    return "\t".join([str(record_id), format_indices(labels)] + [str(e) for e in extra])


def parse_record(line):
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 2 or not parts[0]:
        raise DataError(f"malformed record line {line!r}")
    return parts[0], parse_indices(parts[1]), parts[2:]


@dataclass
class Prediction:
    id: str
    labels: tuple
    m_hat: float | None = None


def write_predictions(path, predictions):
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            extra = () if p.m_hat is None else (repr(float(p.m_hat)),)
            fh.write(format_record(p.id, p.labels, *extra) + "\n")


def read_predictions(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rid, labels, extra = parse_record(line)
            m_hat = float(extra[0]) if extra and extra[0] else None
            out.append(Prediction(rid, labels, m_hat))
    return out


def evaluate_files(pred_path, truth_path, num_classes=None, max_quantity=None):
    """Score a prediction file against a truth file (matched by id)."""
    preds = {p.id: p for p in read_predictions(pred_path)}
    truth = read_predictions(truth_path)
    missing = [t.id for t in truth if t.id not in preds]
    if missing:
        raise DataError(f"predictions missing for ids: {missing[:10]}")
    if num_classes is None:
        num_classes = 1 + max(max((max(r.labels, default=-1) for r in truth), default=-1),
                              max((max(p.labels, default=-1) for p in preds.values()), default=-1))
    report = compute_metrics(tally([preds[t.id].labels for t in truth], [t.labels for t in truth], num_classes))
    m_hat = [preds[t.id].m_hat for t in truth]
    if all(v is not None for v in m_hat) and truth:
        m = [len(t.labels) for t in truth]
        max_q = max_quantity or max(m)
        report.lqp_accuracy, report.lqp_mse = lqp_quality(m_hat, m, max_q)
    return report
