"""Patch planning, extraction, splicing and seam measurement on the en-face plane."""

from dataclasses import dataclass, field

import numpy as np

from .numerics import ShapeError, resize_h_linear


@dataclass
class PatchGrid:
    """Patch origins covering an ``L x W`` plane with ``l x w`` patches."""

    L: int
    W: int
    l: int
    w: int
    d: int
    origins: list = field(default_factory=list)

    def __len__(self):
        return len(self.origins)


def _axis_origins(n, p, d):
    starts = list(range(0, n - p + 1, d))
    if starts[-1] != n - p:
        # border patch shifted inward so it ends flush with the plane
        starts.append(n - p)
    return starts


def plan_patches(L, W, l, w, d):
    if not (1 <= l <= L and 1 <= w <= W):
        raise ValueError(f"patch {l}x{w} does not fit in plane {L}x{W}")
    if not 1 <= d <= min(l, w):
        raise ValueError(f"step d={d} must lie in [1, min(l, w)={min(l, w)}]")
    xs = _axis_origins(L, l, d)
    ys = _axis_origins(W, w, d)
    origins = sorted({(x, y) for x in xs for y in ys})
    return PatchGrid(L, W, l, w, d, origins)


def extract_patch(volumes, origin, l, w, target_h=None):
    """Crop an ``l x w`` window from each volume and stack them as channels.

    ``volumes`` is a sequence of equally sized ``(L, W, H)`` arrays. When
    ``target_h`` differs from ``H`` the stacked patch is linearly resampled
    along height.
    """
    vols = [np.asarray(v, dtype=np.float64) for v in volumes]
    shapes = {v.shape for v in vols}
    if len(shapes) != 1:
        raise ShapeError(f"volumes must share extents, got {sorted(shapes)}")
    L, W, H = vols[0].shape
    x0, y0 = origin
    if x0 < 0 or y0 < 0 or x0 + l > L or y0 + w > W:
        raise ValueError(f"patch at origin {origin} of size {l}x{w} exceeds plane {L}x{W}")
    patch = np.stack([v[x0:x0 + l, y0:y0 + w, :] for v in vols], axis=-1)
    if target_h is not None and target_h != H:
        patch, _ = resize_h_linear(patch, target_h)
    return patch


class SpliceAccumulator:
    """Running sum and coverage count for averaging overlapping patches."""

    def __init__(self, L, W, c):
        self.sum = np.zeros((L, W, c))
        self.count = np.zeros((L, W), dtype=np.int64)

    def add(self, origin, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[..., None]
        x0, y0 = origin
        l, w = values.shape[:2]
        self.sum[x0:x0 + l, y0:y0 + w] += values
        self.count[x0:x0 + l, y0:y0 + w] += 1

    def merge(self, other):
        self.sum += other.sum
        self.count += other.count
        return self

    def result(self):
        if (self.count < 1).any():
            missing = np.argwhere(self.count < 1)[0]
            raise ValueError(f"pixel {tuple(int(i) for i in missing)} not covered by any patch")
        return self.sum / self.count[..., None]


def splice(patch_outputs, grid):
    """Average per-patch ``(l, w, c)`` outputs back onto the full plane.

    ``patch_outputs`` is a list of ``(origin, array)``; exactly one entry per
    grid origin is required.
    """
    seen = [tuple(o) for o, _ in patch_outputs]
    if len(set(seen)) != len(seen):
        raise ValueError("duplicate patch origin in splice input")
    expected = set(map(tuple, grid.origins))
    if set(seen) != expected:
        missing = sorted(expected - set(seen))
        extra = sorted(set(seen) - expected)
        raise ValueError(f"splice origins do not match grid: missing {missing}, unexpected {extra}")
    first = np.asarray(patch_outputs[0][1])
    c = 1 if first.ndim == 2 else first.shape[-1]
    acc = SpliceAccumulator(grid.L, grid.W, c)
    # row-major origin order keeps the summation order fixed
    for origin, values in sorted(patch_outputs, key=lambda t: tuple(t[0])):
        acc.add(origin, values)
    out = acc.result()
    return out[..., 0] if first.ndim == 2 else out


def _line_sets(starts, size):
    edges = sorted({s for s in starts} | {s + size for s in starts})
    lo, hi = edges[0], edges[-1]
    seams = [e for e in edges[1:-1]]
    refs = []
    for a, b in zip(edges[:-1], edges[1:]):
        m = (a + b) // 2
        if a < m < b:
            refs.append(m)
    return lo, hi, seams, refs


def _mean_abs_step(m, lines, axis, span):
    vals = []
    for p in lines:
        if axis == 0:
            vals.append(np.abs(m[p, span] - m[p - 1, span]))
        else:
            vals.append(np.abs(m[span, p] - m[span, p - 1]))
    return vals


def seam_score(m, grid):
    """Discontinuity excess on patch-boundary lines over reference lines.

    Boundary lines are interior patch edges of ``grid``; reference lines sit
    midway between consecutive patch edges (for a no-overlap grid that is
    each boundary +- l/2). The score is the mean absolute first difference
    across boundary lines minus the same statistic across reference lines,
    floored at zero. Only pixels inside the grid's hull are used.
    """
    m = np.asarray(m, dtype=np.float64)
    xs = [o[0] for o in grid.origins]
    ys = [o[1] for o in grid.origins]
    x_lo, x_hi, x_seams, x_refs = _line_sets(xs, grid.l)
    y_lo, y_hi, y_seams, y_refs = _line_sets(ys, grid.w)
    if not x_seams and not y_seams:
        return 0.0
    span_y = slice(y_lo, y_hi)
    span_x = slice(x_lo, x_hi)
    seam_vals = _mean_abs_step(m, x_seams, 0, span_y) + _mean_abs_step(m, y_seams, 1, span_x)
    ref_vals = _mean_abs_step(m, x_refs, 0, span_y) + _mean_abs_step(m, y_refs, 1, span_x)
    seam = float(np.concatenate(seam_vals).mean())
    ref = float(np.concatenate(ref_vals).mean()) if ref_vals else 0.0
    return max(seam - ref, 0.0)
