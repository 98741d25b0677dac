"""Two-stage training loops and patchwise inference."""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import dice_sweep
from .network import (
    ModelParams,
    _derived_seed,
    global_backward,
    global_forward,
    init_global_params,
    init_stage1_params,
    ipnv2_forward,
    stage1_backward,
    stage1_forward,
)
from .numerics import Adam, resize_h_linear, softmax, softmax_ce
from .tiling import plan_patches, splice


@dataclass
class TrainConfig:
    max_iters: int = 2000
    save_every: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 1


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)
    best_iter: int = -1
    val_dice: float = float("nan")
    thresholds: tuple = ()


class PatchDataset:
    """Volumes and label maps from which random training patches are cut.

    ``inputs`` holds ``(L, W, H, cin)`` arrays; they are resampled along
    height to ``target_h`` once, up front. Labels are ``(L, W)`` class maps.
    """

    def __init__(self, inputs, labels, patch_size, target_h=None):
        if len(inputs) == 0:
            raise ValueError("dataset is empty")
        if len(inputs) != len(labels):
            raise ValueError(f"{len(inputs)} volumes but {len(labels)} label maps")
        self.l, self.w = (patch_size, patch_size) if np.isscalar(patch_size) else patch_size
        self.inputs = [prepare_volume(v, target_h) for v in inputs]
        self.labels = [np.asarray(y, dtype=np.int64) for y in labels]
        for v, y in zip(self.inputs, self.labels):
            if v.shape[:2] != y.shape:
                raise ValueError(f"label extents {y.shape} do not match volume plane {v.shape[:2]}")
            if v.shape[0] < self.l or v.shape[1] < self.w:
                raise ValueError(f"patch {self.l}x{self.w} larger than plane {v.shape[:2]}")

    def __len__(self):
        return len(self.inputs)

    def random_patch(self, rng):
        i = int(rng.integers(len(self.inputs)))
        v, y = self.inputs[i], self.labels[i]
        x0 = int(rng.integers(v.shape[0] - self.l + 1))
        y0 = int(rng.integers(v.shape[1] - self.w + 1))
        return v[x0:x0 + self.l, y0:y0 + self.w], y[x0:x0 + self.l, y0:y0 + self.w]


def prepare_volume(volume, target_h=None):
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 4:
        raise ValueError(f"input volume must be (L, W, H, cin), got {v.shape}")
    if target_h is not None and target_h != v.shape[2]:
        v, _ = resize_h_linear(v, target_h)
    return v


# ---------------------------------------------------------------- inference


def patchwise(volume, params, config, patch_size, step, output="probs", batch=64):
    """Run the stage-1 network over a tiling and splice the results.

    ``output`` selects per-class probabilities (``"probs"``) or the
    penultimate features of IPN-V2 (``"features"``). ``volume`` must
    already have the working height.
    """
    l, w = (patch_size, patch_size) if np.isscalar(patch_size) else patch_size
    L, W = volume.shape[:2]
    grid = plan_patches(L, W, l, w, step)
    if output == "features" and config.variant == "ipn":
        raise ValueError("the ipn variant has no penultimate plane features")
    if output not in ("probs", "features"):
        raise ValueError(f"output must be 'probs' or 'features', got {output!r}")
    outs = []
    for i in range(0, len(grid.origins), batch):
        origins = grid.origins[i:i + batch]
        # patches are independent, so a stacked batch gives the same values
        stack = np.stack([volume[x0:x0 + l, y0:y0 + w] for x0, y0 in origins])
        if output == "features":
            res = ipnv2_forward(stack, params, config)[1]
        else:
            res = softmax(stage1_forward(stack, params, config))
        outs.extend(zip(origins, res))
    return splice(outs, grid)


def global_probs(features, gparams, config):
    return softmax(global_forward(features, gparams, config))


def validation_score(prob_maps, labels, num_classes):
    """Mean over foreground classes of the best-threshold Dice.

    Returns ``(score, thresholds)`` with one threshold per foreground class.
    """
    scores, thresholds = [], []
    for k in range(1, num_classes):
        t, mean = dice_sweep([p[..., k] for p in prob_maps], [y == k for y in labels])
        i = int(np.argmax(mean))
        scores.append(float(mean[i]))
        thresholds.append(float(t[i]))
    return float(np.mean(scores)), tuple(thresholds)


# ---------------------------------------------------------------- training


def _run_loop(params, step_fn, validate, cfg, ckpt_prefix):
    opt = Adam(lr=cfg.learning_rate)
    log = []
    best = TrainResult(params.copy())
    best_score = -math.inf
    for it in range(cfg.max_iters):
        params.zero_grad()
        loss = step_fn()
        opt.step(params)
        val = float("nan")
        if (it + 1) % cfg.save_every == 0 or it + 1 == cfg.max_iters:
            if ckpt_prefix is not None:
                params.save(f"{ckpt_prefix}_{it + 1:06d}.ckpt")
            if validate is not None:
                val, thr = validate(params)
                if val > best_score:
                    best_score = val
                    best = TrainResult(params.copy(), best_iter=it + 1, val_dice=val, thresholds=thr)
        log.append((it, loss, val))
    if validate is None:
        best = TrainResult(params.copy(), best_iter=cfg.max_iters)
    best.log = log
    return best


def train_stage1(dataset, config, train_cfg, seed, val=None, checkpoint_dir=None, step=None):
    """Train ``f`` (and ``p``) with Adam on random patches.

    ``val`` is an optional ``(inputs, labels)`` pair; at every checkpoint the
    model is scored by best-threshold validation Dice over spliced full-plane
    predictions, and the best checkpoint is returned.
    """
    if dataset is None or len(dataset) == 0:
        raise ValueError("stage-1 training needs a non-empty dataset")
    params = init_stage1_params(config, seed)
    rng = np.random.default_rng(_derived_seed(seed, 1))
    k = config.ipn.num_classes
    bs = train_cfg.batch_size
    step = step or max(1, dataset.l // 2)

    def step_fn():
        total = 0.0
        for _ in range(bs):
            patch, lab = dataset.random_patch(rng)
            logits, cache = stage1_forward(patch, params, config, return_cache=True)
            loss, d = softmax_ce(logits, lab)
            stage1_backward(d / bs, cache, params, config)
            total += loss
        return total / bs

    validate = None
    if val is not None:
        v_inputs = [prepare_volume(v, config.ipn.patch_height) for v in val[0]]
        v_labels = [np.asarray(y) for y in val[1]]

        def validate(p):
            probs = [patchwise(v, p, config, (dataset.l, dataset.w), step) for v in v_inputs]
            return validation_score(probs, v_labels, k)

    prefix = None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        prefix = str(Path(checkpoint_dir) / "stage1")
    return _run_loop(params, step_fn, validate, train_cfg, prefix)


def train_stage2(stage1_params, config, features, labels, train_cfg, seed,
                 val=None, checkpoint_dir=None):
    """Train the global network ``g`` on spliced penultimate feature maps.

    ``features`` are ``(L, W, c)`` maps produced by the frozen stage-1
    network; ``stage1_params`` is only checked for presence and never
    modified.
    """
    if stage1_params is None or len(stage1_params) == 0:
        raise ValueError("stage-2 training requires a trained stage-1 checkpoint")
    if len(features) == 0:
        raise ValueError("stage-2 training needs at least one feature map")
    gparams = init_global_params(config, _derived_seed(seed, 2))
    rng = np.random.default_rng(_derived_seed(seed, 3))
    labels = [np.asarray(y, dtype=np.int64) for y in labels]
    n = len(features)
    bs = train_cfg.batch_size

    def step_fn():
        idx = rng.choice(n, size=bs, replace=n < bs)
        total = 0.0
        for i in idx:
            logits, cache = global_forward(features[i], gparams, config, return_cache=True)
            loss, d = softmax_ce(logits, labels[i])
            global_backward(d / bs, cache, gparams)
            total += loss
        return total / bs

    validate = None
    if val is not None:
        v_feats, v_labels = val

        def validate(p):
            probs = [global_probs(f, p, config) for f in v_feats]
            return validation_score(probs, v_labels, config.global_net.num_classes)

    prefix = None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        prefix = str(Path(checkpoint_dir) / "stage2")
    return _run_loop(gparams, step_fn, validate, train_cfg, prefix)
