"""Overlap metrics, threshold selection and split-level reporting."""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _binary(mask, name):
    a = np.asarray(mask)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return a.astype(bool)


def confusion(pred, gt):
    pred = _binary(pred, "pred_mask")
    gt = _binary(gt, "gt_mask")
    if pred.shape != gt.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num, den, exact):
    # empty-vs-empty counts as a perfect score
    if den == 0:
        return Fraction(1) if exact else 1.0
    return Fraction(num, den) if exact else num / den


def dice(c, exact=False):
    """2TP / (2TP + FP + FN). ``exact=True`` returns a Fraction."""
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, exact)


def jac(c, exact=False):
    """TP / (TP + FP + FN)."""
    return _ratio(c.tp, c.tp + c.fp + c.fn, exact)


def bacc(c, exact=False):
    """Mean of sensitivity and specificity."""
    tpr = _ratio(c.tp, c.tp + c.fn, exact)
    tnr = _ratio(c.tn, c.tn + c.fp, exact)
    return (tpr + tnr) / 2


def default_sweep():
    return np.arange(1, 100) / 100.0


def _dice_curve(prob, gt, thresholds):
    # dice for every threshold at once: sort probabilities, count how many
    # positives / predicted pixels sit at or above each threshold
    p = np.asarray(prob, dtype=np.float64).ravel()
    g = _binary(gt, "gt_mask").ravel()
    order = np.argsort(p, kind="stable")
    p_sorted = p[order]
    g_sorted = g[order]
    n_gt = int(g.sum())
    # suffix counts of ground-truth positives
    gt_suffix = np.concatenate([np.cumsum(g_sorted[::-1])[::-1], [0]])
    first = np.searchsorted(p_sorted, thresholds, side="left")
    n_pred = p.size - first
    tp = gt_suffix[first]
    fp = n_pred - tp
    fn = n_gt - tp
    den = 2 * tp + fp + fn
    return np.where(den == 0, 1.0, 2 * tp / np.maximum(den, 1))


def dice_sweep(prob_maps, gt_masks, sweep=None):
    """Sorted thresholds and the mean Dice achieved at each of them."""
    if len(prob_maps) == 0:
        raise ValueError("threshold sweep needs at least one probability map")
    if len(prob_maps) != len(gt_masks):
        raise ValueError(f"{len(prob_maps)} probability maps but {len(gt_masks)} masks")
    thresholds = np.unique(np.asarray(default_sweep() if sweep is None else sweep, dtype=np.float64))
    total = np.zeros(len(thresholds))
    for prob, gt in zip(prob_maps, gt_masks):
        total += _dice_curve(prob, gt, thresholds)
    return thresholds, total / len(prob_maps)


def best_threshold(prob_maps, gt_masks, sweep=None):
    """Threshold maximising mean Dice over a set; ties go to the smallest."""
    thresholds, mean = dice_sweep(prob_maps, gt_masks, sweep)
    return float(thresholds[int(np.argmax(mean))])


@dataclass
class MetricReport:
    sample_ids: list
    dice: list
    jac: list
    bacc: list
    summary: dict = field(default_factory=dict)

    def rows(self):
        return list(zip(self.sample_ids, self.dice, self.jac, self.bacc))

    def to_csv(self):
        lines = ["sample_id,dice,jac,bacc"]
        for sid, d, j, b in self.rows():
            lines.append(f"{sid},{d:.17g},{j:.17g},{b:.17g}")
        return "\n".join(lines) + "\n"

    def to_text(self):
        width = max([len("sample")] + [len(str(s)) for s in self.sample_ids])
        out = [f"{'sample':<{width}}  {'DICE':>8}  {'JAC':>8}  {'BACC':>8}"]
        for sid, d, j, b in self.rows():
            out.append(f"{sid:<{width}}  {d:8.4f}  {j:8.4f}  {b:8.4f}")
        for name in ("dice", "jac", "bacc"):
            mean, sd = self.summary[name]
            out.append(f"{name.upper():<5} {mean * 100:.2f} +- {sd * 100:.2f}")
        return "\n".join(out) + "\n"


def evaluate_split(prob_maps, gt_masks, threshold, sample_ids=None):
    """Per-sample DICE / JAC / BACC plus mean and population SD.

    A pixel is predicted positive when its probability is >= ``threshold``.
    """
    if len(prob_maps) != len(gt_masks):
        raise ValueError(f"{len(prob_maps)} outputs but {len(gt_masks)} ground truths")
    if sample_ids is None:
        sample_ids = [str(i) for i in range(len(prob_maps))]
    d, j, b = [], [], []
    for prob, gt in zip(prob_maps, gt_masks):
        c = confusion(np.asarray(prob) >= threshold, gt)
        d.append(dice(c))
        j.append(jac(c))
        b.append(bacc(c))
    summary = {
        name: (float(np.mean(vals)), float(np.std(vals)))
        for name, vals in (("dice", d), ("jac", j), ("bacc", b))
    }
    return MetricReport(list(sample_ids), d, j, b, summary)
