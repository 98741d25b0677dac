"""Self-verification suites: gradient checks, brute-force oracles, invariants."""

import time
from dataclasses import dataclass
from fractions import Fraction
from functools import partial

import numpy as np

from . import numerics as nx
from .metrics import ConfusionCounts, bacc, confusion, dice, jac
from .network import (
    GlobalNetConfig,
    IpnConfig,
    ModelConfig,
    PlanePerceptronConfig,
    global_backward,
    global_forward,
    init_global_params,
    init_stage1_params,
    ipnv2_forward,
    stage1_backward,
    stage1_forward,
)
from .projection import PROJECTIONS, LayerSurfaces, Mode, Region, Volume3D, project
from .tiling import plan_patches, splice

OP_TOL = 1e-5
NET_TOL = 1e-4
# Central differences at eps=1e-6 carry roundoff of roughly ulp(loss)/eps,
# about 1e-10 for O(1) losses; whole-network checks divide by at least 1e-6
# so entries with vanishing gradients are not judged on that noise alone.
NET_FLOOR = 1e-6


@dataclass
class Check:
    suite: str
    name: str
    value: float
    limit: float
    passed: bool
    seconds: float = 0.0

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.suite:<10} {self.name:<28} value={self.value:.3g} limit={self.limit:g}"


# ---------------------------------------------------------------- gradients


def _pool_input(rng, shape):
    # distinct, well separated values keep max pooling away from ties
    n = int(np.prod(shape))
    return rng.permutation(n).reshape(shape).astype(np.float64) * 0.1


def _relu_input(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


def op_cases(rng):
    """``name -> (forward, backward, inputs)`` for every differentiable op."""
    return {
        "conv3d": (nx.conv3d, nx.conv3d_backward, dict(
            x=rng.normal(size=(4, 4, 4, 2)), w=rng.normal(size=(3, 3, 3, 2, 3)),
            b=rng.normal(size=3))),
        "conv2d": (nx.conv2d, nx.conv2d_backward, dict(
            x=rng.normal(size=(5, 6, 3)), w=rng.normal(size=(3, 3, 3, 2)),
            b=rng.normal(size=2))),
        "conv2d_1x1": (nx.conv2d, nx.conv2d_backward, dict(
            x=rng.normal(size=(4, 4, 3)), w=rng.normal(size=(1, 1, 3, 2)),
            b=rng.normal(size=2))),
        "uni_pool_h": (partial(nx.uni_pool_h, k=2), nx.uni_pool_h_backward, dict(
            x=_pool_input(rng, (3, 3, 4, 2)))),
        "uni_pool_h_avg": (partial(nx.uni_pool_h, k=3, mode="avg"), nx.uni_pool_h_backward, dict(
            x=rng.normal(size=(2, 3, 6, 2)))),
        "collapse_conv": (nx.collapse_conv, nx.collapse_conv_backward, dict(
            x=rng.normal(size=(3, 4, 5, 2)), w=rng.normal(size=(1, 1, 5, 2, 3)),
            b=rng.normal(size=3))),
        "pool2d": (nx.pool2d, nx.pool2d_backward, dict(x=_pool_input(rng, (4, 6, 2)))),
        "upsample2d": (nx.upsample2d, nx.upsample2d_backward, dict(x=rng.normal(size=(3, 2, 2)))),
        "relu": (nx.relu, nx.relu_backward, dict(x=_relu_input(rng, (4, 5, 3)))),
        "concat": (lambda a, b: nx.concat(a, b), nx.concat_backward, dict(
            a=rng.normal(size=(3, 3, 2)), b=rng.normal(size=(3, 3, 4)))),
        "resize_h_linear": (partial(nx.resize_h_linear, new_h=5), nx.resize_h_linear_backward,
                            dict(x=rng.normal(size=(2, 3, 7, 2)))),
        "softmax_ce": (None, None, dict(logits=rng.normal(size=(4, 4, 3)))),
    }


def _softmax_ce_check(logits, rng, corrupt):
    labels = rng.integers(0, logits.shape[-1], size=logits.shape[:-1])

    def loss_fn(a):
        return nx.softmax_ce(a["logits"], labels)[0]

    def grad_fn(a):
        g = nx.softmax_ce(a["logits"], labels)[1]
        return {"logits": g * corrupt}

    return nx.grad_check(loss_fn, grad_fn, {"logits": logits.copy()})


def _corrupted(backward):
    def wrapped(dout, cache):
        g = backward(dout, cache)
        if isinstance(g, np.ndarray):
            return g * 1.01
        return type(g)(x * 1.01 for x in g)
    return wrapped


def op_gradient_checks(seed=0, corrupt=None):
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    if corrupt is not None and corrupt not in cases:
        raise KeyError(f"unknown op {corrupt!r}; choose from {', '.join(cases)}")
    out = []
    for name, (fwd, bwd, inputs) in cases.items():
        t = time.perf_counter()
        if name == "softmax_ce":
            err = _softmax_ce_check(inputs["logits"], rng, 1.01 if corrupt == name else 1.0)
        else:
            if corrupt == name:
                bwd = _corrupted(bwd)
            err = nx.check_op(fwd, bwd, inputs, seed=seed)
        out.append(Check("gradient", name, err, OP_TOL, err < OP_TOL, time.perf_counter() - t))
    return out


def toy_config(variant, input_channels=2):
    return ModelConfig(
        variant,
        IpnConfig((3, 4, 4), (2, 4, 5), 2, 2, input_channels),
        PlanePerceptronConfig(2, 4, 3),
        GlobalNetConfig(2, 4, 3, 2),
    )


def _jitter_biases(params, rng):
    # zero biases put padded regions exactly on the relu kink; move them off it
    for name, p in params.items():
        if name.endswith(".b"):
            p.value = rng.normal(0.0, 0.1, size=p.value.shape)


def network_gradient_check(kind, seed=0, max_entries=20):
    """End-to-end gradient check of ``ipn``, ``ipnv2`` or ``global`` at toy size."""
    rng = np.random.default_rng(seed)
    if kind == "global":
        cfg = toy_config("ipnv2plus")
        params = init_global_params(cfg, seed)
        x = rng.normal(size=(14, 15, 3))
        y = rng.integers(0, 2, size=(14, 15))

        def fwd(inp, cache=False):
            return global_forward(inp, params, cfg, return_cache=cache)

        def bwd(d, c):
            return global_backward(d, c, params)
    else:
        cfg = toy_config(kind)
        params = init_stage1_params(cfg, seed)
        x = rng.normal(size=(8, 8, 40, 2))
        y = rng.integers(0, 2, size=(8, 8))

        def fwd(inp, cache=False):
            return stage1_forward(inp, params, cfg, return_cache=cache)

        def bwd(d, c):
            return stage1_backward(d, c, params, cfg)
    _jitter_biases(params, rng)
    arrays = {k: p.value for k, p in params.items()}
    arrays["input"] = x

    def loss_fn(a):
        return nx.softmax_ce(fwd(a["input"]), y)[0]

    def grad_fn(a):
        params.zero_grad()
        logits, cache = fwd(a["input"], True)
        _, d = nx.softmax_ce(logits, y)
        dx = bwd(d, cache)
        g = {k: p.grad.copy() for k, p in params.items()}
        g["input"] = dx
        return g

    return nx.grad_check(loss_fn, grad_fn, arrays, max_entries=max_entries, seed=seed,
                         floor=NET_FLOOR)


def gradient_suite(seed=0, corrupt=None):
    checks = op_gradient_checks(seed, corrupt)
    for kind in ("ipn", "ipnv2", "global"):
        t = time.perf_counter()
        err = network_gradient_check(kind, seed)
        checks.append(Check("gradient", f"net:{kind}", err, NET_TOL, err < NET_TOL,
                            time.perf_counter() - t))
    return checks


# ---------------------------------------------------------------- oracles


def brute_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, g = bool(pred[i, j]), bool(gt[i, j])
            if p and g:
                tp += 1
            elif p:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def brute_metrics(tp, fp, fn, tn):
    """Metrics as exact fractions with the empty-denominator convention."""
    def ratio(a, b):
        return Fraction(1) if b == 0 else Fraction(a, b)
    d = ratio(2 * tp, 2 * tp + fp + fn)
    j = ratio(tp, tp + fp + fn)
    b = (ratio(tp, tp + fn) + ratio(tn, tn + fp)) / 2
    return d, j, b


def brute_metrics_float(tp, fp, fn, tn):
    def ratio(a, b):
        return 1.0 if b == 0 else a / b
    return (ratio(2 * tp, 2 * tp + fp + fn), ratio(tp, tp + fp + fn),
            (ratio(tp, tp + fn) + ratio(tn, tn + fp)) / 2)


def metric_oracle(seed=0, n=100, size=64):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        pf, gf = rng.uniform(0.05, 0.95, size=2)
        pred = rng.random((size, size)) < pf
        gt = rng.random((size, size)) < gf
        c = confusion(pred, gt)
        counts = brute_confusion(pred, gt)
        if (c.tp, c.fp, c.fn, c.tn) != counts:
            mismatches += 1
            continue
        exact = (dice(c, exact=True), jac(c, exact=True), bacc(c, exact=True))
        floats = (dice(c), jac(c), bacc(c))
        if exact != brute_metrics(*counts) or floats != brute_metrics_float(*counts):
            mismatches += 1
    return mismatches


def random_surfaces(rng, L, W, H):
    cuts = np.sort(rng.integers(0, H, size=(L, W, 3)), axis=-1)
    return LayerSurfaces(cuts[..., 0], cuts[..., 1], cuts[..., 2])


def brute_projection(data, region, mode, surfaces):
    L, W, H = data.shape
    out = np.zeros((L, W))
    for x in range(L):
        for y in range(W):
            if region is Region.FULL:
                lo, hi = 0, H - 1
            elif region is Region.ILM_OPL:
                lo, hi = surfaces.ilm[x, y], surfaces.opl[x, y]
            else:
                lo, hi = surfaces.opl[x, y], surfaces.bm[x, y]
            if mode is Mode.MAX:
                m = data[x, y, lo]
                for z in range(lo + 1, hi + 1):
                    m = max(m, data[x, y, z])
                out[x, y] = m
            else:
                s = 0.0
                for z in range(lo, hi + 1):
                    s += data[x, y, z]
                out[x, y] = s / (hi - lo + 1)
    return out


def projection_oracle(seed=0, n=20, shape=(8, 8, 12)):
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(n):
        vol = Volume3D(rng.random(shape))
        surf = random_surfaces(rng, *shape)
        for region in Region:
            for mode in Mode:
                got = project(vol, region, mode, surf).data
                if not np.array_equal(got, brute_projection(vol.data, region, mode, surf)):
                    mismatches += 1
    return mismatches


def splice_oracle(seed=0, L=40, W=36, l=8):
    """Worst deviation when re-splicing patches cut from a random map."""
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(L, W, 3))
    worst = 0.0
    for d in (l, l // 2, l // 4):
        grid = plan_patches(L, W, l, l, d)
        outs = [((x0, y0), m[x0:x0 + l, y0:y0 + l]) for x0, y0 in grid.origins]
        worst = max(worst, float(np.abs(splice(outs, grid) - m).max()))
    return worst


def oracle_suite(seed=0):
    checks = []
    for name, fn, limit in (
        ("metrics_vs_bruteforce", metric_oracle, 0),
        ("projection_vs_bruteforce", projection_oracle, 0),
        ("splice_reproduction", splice_oracle, 1e-12),
    ):
        t = time.perf_counter()
        v = fn(seed)
        checks.append(Check("oracle", name, v, limit, v <= limit, time.perf_counter() - t))
    return checks


# ---------------------------------------------------------------- invariants


def dice_jac_identity(seed=0, n=1000):
    """Counts where dice != 2 jac / (1 + jac) in exact rational arithmetic."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n):
        tp, fp, fn, tn = (int(v) for v in rng.integers(0, 5000, size=4))
        c = ConfusionCounts(tp, fp, fn, tn)
        j = jac(c, exact=True)
        if dice(c, exact=True) != 2 * j / (1 + j):
            bad += 1
    return bad


def shape_contract(seed=0, n=50):
    """Variants run on random valid geometries; returns the violation count."""
    rng = np.random.default_rng(seed)
    violations = 0
    for i in range(n):
        nmod = int(rng.integers(1, 4))
        strides = tuple(int(s) for s in rng.integers(1, 4, size=nmod))
        h = int(np.prod(strides))
        l, w = (4 * int(v) for v in rng.integers(1, 4, size=2))
        cin = int(rng.integers(1, 4))
        k = int(rng.integers(2, 4))
        for variant in ("ipn", "ipnv2", "ipnv2plus"):
            cfg = ModelConfig(
                variant,
                IpnConfig(tuple(int(c) for c in rng.integers(1, 4, size=nmod)), strides, 1, k, cin),
                PlanePerceptronConfig(2, 2, 2),
                GlobalNetConfig(2, 2, 2, k),
            )
            params = init_stage1_params(cfg, i)
            x = rng.normal(size=(l, w, h, cin))
            logits = stage1_forward(x, params, cfg)
            if variant == "ipnv2plus":
                _, feat = ipnv2_forward(x, params, cfg)
                logits = global_forward(feat, init_global_params(cfg, i), cfg)
            if logits.shape != (l, w, k):
                violations += 1
    return violations


def op_determinism(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 6, 8, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    b = rng.normal(size=3)
    a1, c1 = nx.conv3d(x, w, b)
    a2, c2 = nx.conv3d(x.copy(), w.copy(), b.copy())
    g1 = nx.conv3d_backward(a1, c1)
    g2 = nx.conv3d_backward(a2, c2)
    same = a1.tobytes() == a2.tobytes() and all(
        p.tobytes() == q.tobytes() for p, q in zip(g1, g2))
    return 0 if same else 1


def projection_kinds():
    return 0 if sorted(PROJECTIONS) == [f"B{i}" for i in range(1, 7)] else 1


def invariant_suite(seed=0):
    checks = []
    for name, fn in (
        ("dice_jac_identity", dice_jac_identity),
        ("shape_contract", shape_contract),
        ("op_determinism", op_determinism),
        ("projection_kinds", lambda s: projection_kinds()),
    ):
        t = time.perf_counter()
        v = fn(seed)
        checks.append(Check("invariant", name, v, 0, v == 0, time.perf_counter() - t))
    return checks


def run_all(seed=0, corrupt=None):
    return gradient_suite(seed, corrupt) + oracle_suite(seed) + invariant_suite(seed)
