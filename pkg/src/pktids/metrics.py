"""Confusion matrices and accuracy/precision/recall/F1.

Ratios are computed exactly as :class:`fractions.Fraction` from integer
counts; a zero denominator yields 0 and records the metric name in
``undefined``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np


class CodeOutOfRange(ValueError):
    pass


def confusion(actual, predicted, k: int) -> np.ndarray:
    """K x K counts; rows are actual classes, columns predicted."""
    a = np.asarray(actual, dtype=np.int64)
    p = np.asarray(predicted, dtype=np.int64)
    if a.shape != p.shape:
        raise ValueError("actual and predicted differ in length")
    if a.size and (a.min() < 0 or p.min() < 0 or a.max() >= k or p.max() >= k):
        raise CodeOutOfRange(f"class codes must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (a, p), 1)
    return cm


def _ratio(num: int, den: int) -> Optional[Fraction]:
    return Fraction(num, den) if den else None


@dataclass
class BinaryMetrics:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: Fraction
    precision: Fraction
    recall: Fraction
    f1: Fraction
    undefined: tuple[str, ...] = ()

    def as_floats(self) -> dict:
        return {"accuracy": float(self.accuracy), "precision": float(self.precision),
                "recall": float(self.recall), "f1": float(self.f1)}


def metrics_from_counts(tp: int, tn: int, fp: int, fn: int) -> BinaryMetrics:
    if min(tp, tn, fp, fn) < 0:
        raise ValueError("counts must be nonnegative")
    undefined = []
    acc = _ratio(tp + tn, tp + tn + fp + fn)
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    for name, v in (("accuracy", acc), ("precision", prec), ("recall", rec)):
        if v is None:
            undefined.append(name)
    prec0, rec0 = prec or Fraction(0), rec or Fraction(0)
    f1 = _ratio(2 * prec0 * rec0, prec0 + rec0) if prec0 + rec0 else None
    if f1 is None:
        undefined.append("f1")
    return BinaryMetrics(tp, tn, fp, fn, acc or Fraction(0), prec0, rec0, f1 or Fraction(0),
                         tuple(undefined))


def one_vs_rest(cm: np.ndarray, c: int) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) treating class ``c`` as positive."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = int(cm[c, c])
    fp = int(cm[:, c].sum()) - tp
    fn = int(cm[c, :].sum()) - tp
    tn = int(cm.sum()) - tp - fp - fn
    return tp, tn, fp, fn


@dataclass
class EvaluationReport:
    confusion: np.ndarray
    class_names: Sequence[str]
    accuracy: Fraction
    per_class: dict[str, BinaryMetrics] = field(default_factory=dict)
    binary: Optional[BinaryMetrics] = None

    def to_dict(self) -> dict:
        d = {
            "class_names": list(self.class_names),
            "confusion": self.confusion.tolist(),
            "total": int(self.confusion.sum()),
            "accuracy": float(self.accuracy),
            "per_class": {
                name: {**m.as_floats(), "tp": m.tp, "tn": m.tn, "fp": m.fp, "fn": m.fn,
                       "undefined": list(m.undefined)}
                for name, m in self.per_class.items()
            },
        }
        if self.binary is not None:
            b = self.binary
            d["binary"] = {**b.as_floats(), "tp": b.tp, "tn": b.tn, "fp": b.fp, "fn": b.fn,
                           "undefined": list(b.undefined)}
        return d

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def render(self) -> str:
        """Plain-text confusion table with row percentages on the diagonal."""
        names = list(self.class_names)
        cm = self.confusion
        width = max(12, *(len(n) + 2 for n in names))
        lines = ["Actual/Predicted".ljust(width) + "".join(n.rjust(width + 10) for n in names)]
        for i, n in enumerate(names):
            row_total = cm[i].sum()
            cells = []
            for j in range(len(names)):
                txt = str(cm[i, j])
                if row_total and (i == j or cm[i, j]):
                    txt += f" ({100.0 * cm[i, j] / row_total:.3f}%)"
                cells.append(txt.rjust(width + 10))
            lines.append(n.ljust(width) + "".join(cells))
        lines.append("")
        lines.append(f"accuracy {100.0 * float(self.accuracy):.3f}%  ({int(np.trace(cm))}/{int(cm.sum())})")
        for n, m in self.per_class.items():
            flag = f"  undefined: {','.join(m.undefined)}" if m.undefined else ""
            lines.append(f"{n:>{width}}  precision {100 * float(m.precision):.3f}%  "
                         f"recall {100 * float(m.recall):.3f}%  F1 {100 * float(m.f1):.3f}%{flag}")
        return "\n".join(lines)


def evaluate(actual, predicted, class_names: Sequence[str]) -> EvaluationReport:
    k = len(class_names)
    cm = confusion(actual, predicted, k)
    total = int(cm.sum())
    acc = Fraction(int(np.trace(cm)), total) if total else Fraction(0)
    per_class = {name: metrics_from_counts(*one_vs_rest(cm, c)) for c, name in enumerate(class_names)}
    binary = per_class[class_names[1]] if k == 2 else None
    return EvaluationReport(cm, list(class_names), acc, per_class, binary)
