"""Noise-class confusion counts and precision / recall / F1."""

from dataclasses import asdict, dataclass

import numpy as np


def f1_score(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    level: str = "voxel"
    vpp_applied: bool = False

    @property
    def precision_undefined(self):
        return self.tp + self.fp == 0

    @property
    def recall_undefined(self):
        return self.tp + self.fn == 0

    @property
    def precision(self):
        return 0.0 if self.precision_undefined else self.tp / (self.tp + self.fp)

    @property
    def recall(self):
        return 0.0 if self.recall_undefined else self.tp / (self.tp + self.fn)

    @property
    def f1(self):
        return f1_score(self.precision, self.recall)

    def __add__(self, other):
        if (self.level, self.vpp_applied) != (other.level, other.vpp_applied):
            raise ValueError("cannot merge reports of different level / vpp setting")
        return EvalReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.tn + other.tn, self.level, self.vpp_applied)

    def to_dict(self):
        d = asdict(self)
        d.update(precision=self.precision, recall=self.recall, f1=self.f1,
                 precision_undefined=self.precision_undefined,
                 recall_undefined=self.recall_undefined)
        return d


def confusion(pred, truth, level="voxel", vpp_applied=False, void=-1):
    """Counts with noise (1) as the positive class; ``void`` entries are skipped."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    keep = truth != void
    p = pred[keep] == 1
    t = truth[keep] == 1
    return EvalReport(
        tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)),
        fn=int(np.sum(~p & t)), tn=int(np.sum(~p & ~t)),
        level=level, vpp_applied=vpp_applied)


def format_table(rows, columns=("name", "level", "vpp", "recall", "precision", "f1")):
    """Fixed-width text table from a list of dicts."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)
