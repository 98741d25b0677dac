"""Central finite-difference verification of analytic gradients."""

import numpy as np


def relative_error(analytic, numeric, floor=1e-7):
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), floor)


def grad_check(loss_fn, grad_fn, arrays, eps=1e-6, max_entries=None, seed=0, floor=1e-7):
    """Worst relative error between ``grad_fn`` and central differences of ``loss_fn``.

    ``arrays`` maps names to float64 arrays that are perturbed in place (and
    restored). ``loss_fn(arrays)`` returns a scalar, or an array of terms
    whose sum is the scalar; terms are differenced before summing, which
    keeps roundoff from untouched terms out of the estimate. ``grad_fn(arrays)``
    returns a dict of gradients keyed like ``arrays``. With ``max_entries``
    set, a seeded subset of each array's entries is probed instead of all.
    """
    rng = np.random.default_rng(seed)
    analytic = grad_fn(arrays)
    worst = 0.0
    for name, arr in arrays.items():
        if not arr.flags.c_contiguous:
            raise ValueError(f"array {name!r} must be C-contiguous to perturb in place")
        flat = arr.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(arrays)
            flat[i] = orig - eps
            lm = loss_fn(arrays)
            flat[i] = orig
            num = float(np.sum(np.asarray(lp) - np.asarray(lm))) / (2.0 * eps)
            worst = max(worst, float(relative_error(ga[i], num, floor)))
    return worst


def check_op(forward, backward, inputs, seed=0, eps=1e-6, max_entries=None, floor=1e-7):
    """Gradient-check a single ``(forward, backward)`` op pair.

    ``inputs`` is an ordered dict of differentiable arguments; the op's
    backward must return gradients in the same order. The scalar probed is
    ``sum(out * r)`` for a seeded random ``r``.
    """
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out, _ = forward(**arrays)
    r = rng.normal(size=np.shape(out))

    def loss_fn(a):
        return forward(**a)[0] * r

    def grad_fn(a):
        _, cache = forward(**a)
        grads = backward(r, cache)
        if isinstance(grads, np.ndarray):
            grads = (grads,)
        return dict(zip(a, grads))

    return grad_check(loss_fn, grad_fn, arrays, eps=eps, max_entries=max_entries,
                      seed=seed, floor=floor)
