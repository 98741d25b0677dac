"""Scikit-learn style wrapper around the two-stage training pipeline.

``X`` is a sequence of ``(L, W, H, cin)`` volumes (channels already
stacked) and ``y`` a matching sequence of ``(L, W)`` integer class maps.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import confusion, dice
from .network import (
    GlobalNetConfig,
    IpnConfig,
    ModelConfig,
    PlanePerceptronConfig,
    build_distance_map,
    init_stage1_params,
)
from .training import (
    PatchDataset,
    TrainConfig,
    TrainResult,
    global_probs,
    patchwise,
    prepare_volume,
    train_stage1,
    train_stage2,
)

TASKS = ("rv", "faz", "multitask")


def check_volumes(X, input_channels=None):
    """Validate a batch of volumes; returns a list of float64 arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = [X]
    out = []
    for i, v in enumerate(X):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError(f"volume {i} must be (L, W, H, cin), got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError(f"volume {i} contains non-finite values")
        if input_channels is not None and v.shape[3] != input_channels:
            raise ValueError(
                f"volume {i} has {v.shape[3]} channels, the model expects {input_channels}"
            )
        out.append(v)
    if not out:
        raise ValueError("no volumes given")
    return out


def check_label_maps(y, X, num_classes):
    """Validate class maps against their volumes and the class count."""
    if isinstance(y, np.ndarray) and y.ndim == 2:
        y = [y]
    y = [np.asarray(m) for m in y]
    if len(y) != len(X):
        raise ValueError(f"{len(X)} volumes but {len(y)} label maps")
    out = []
    for i, (m, v) in enumerate(zip(y, X)):
        if m.shape != v.shape[:2]:
            raise ValueError(f"label map {i} has shape {m.shape}, volume plane is {v.shape[:2]}")
        if m.dtype.kind == "f" and not np.all(m == np.round(m)):
            raise ValueError(f"label map {i} is not integer valued")
        m = m.astype(np.int64)
        if m.min() < 0 or m.max() >= num_classes:
            raise ValueError(f"label map {i} has classes outside [0, {num_classes})")
        out.append(m)
    return out


def build_inputs(sample, task="rv"):
    """Stack OCT, OCTA and (for faz/multitask) the distance map as channels."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    oct_ = sample.oct.as_float()
    chans = [oct_, sample.octa.as_float()]
    if task != "rv":
        L, W, H = oct_.shape
        chans.append(np.broadcast_to(build_distance_map(L, W)[:, :, None], (L, W, H)))
    return np.stack(chans, axis=-1)


def build_labels(sample, task="rv"):
    if task == "rv":
        return sample.rv_gt.astype(np.int64)
    if task == "faz":
        return sample.faz_gt.astype(np.int64)
    if task == "multitask":
        lab = np.zeros(sample.rv_gt.shape, dtype=np.int64)
        lab[sample.rv_gt] = 1
        lab[sample.faz_gt] = 2
        return lab
    raise ValueError(f"task must be one of {TASKS}, got {task!r}")


class ProjectionSegmenter(BaseEstimator):
    """IPN, IPN-V2 or IPN-V2+ segmenter for 3D volumes with 2D labels.

    ``fit`` trains stage 1 (and stage 2 for ``ipnv2plus``), keeps the
    checkpoints with the best validation Dice and the per-class thresholds
    chosen on the validation split. Without validation data the last
    checkpoint and a threshold of 0.5 are used.
    """

    def __init__(self, variant="ipnv2", num_classes=2, patch_size=16, target_h=16, step=8,
                 val_step=16, plm_channels=(8, 8, 16), plm_strides=(2, 2, 4), convs_per_plm=2,
                 pool_mode="max", unet_depth=2, unet_base_channels=8, penultimate_channels=8,
                 global_depth=2, global_base_channels=16, max_iter=2000, save_every=100,
                 learning_rate=1e-3, batch_size=1, stage2_max_iter=500, stage2_save_every=25,
                 stage2_batch_size=2, random_state=0, checkpoint_dir=None):
        self.variant = variant
        self.num_classes = num_classes
        self.patch_size = patch_size
        self.target_h = target_h
        self.step = step
        self.val_step = val_step
        self.plm_channels = plm_channels
        self.plm_strides = plm_strides
        self.convs_per_plm = convs_per_plm
        self.pool_mode = pool_mode
        self.unet_depth = unet_depth
        self.unet_base_channels = unet_base_channels
        self.penultimate_channels = penultimate_channels
        self.global_depth = global_depth
        self.global_base_channels = global_base_channels
        self.max_iter = max_iter
        self.save_every = save_every
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.stage2_max_iter = stage2_max_iter
        self.stage2_save_every = stage2_save_every
        self.stage2_batch_size = stage2_batch_size
        self.random_state = random_state
        self.checkpoint_dir = checkpoint_dir

    def model_config(self, input_channels):
        ipn = IpnConfig(self.plm_channels, self.plm_strides, self.convs_per_plm,
                        self.num_classes, input_channels, self.pool_mode)
        if ipn.patch_height != self.target_h:
            raise ValueError(
                f"target_h={self.target_h} must equal the stride product "
                f"{ipn.patch_height} of plm_strides {tuple(self.plm_strides)}"
            )
        plane = PlanePerceptronConfig(self.unet_depth, self.unet_base_channels,
                                      self.penultimate_channels)
        gnet = GlobalNetConfig(self.global_depth, self.global_base_channels,
                               self.penultimate_channels, self.num_classes)
        return ModelConfig(self.variant, ipn, plane, gnet)

    def _seed(self):
        rs = self.random_state
        return 0 if rs is None else int(rs)

    def fit(self, X, y, X_val=None, y_val=None, stage1_params=None):
        """Train on volumes ``X`` and class maps ``y``.

        ``stage1_params`` (``ipnv2plus`` only) supplies an already trained
        IPN-V2 stage-1 model; only the global network is then trained.
        """
        X = check_volumes(X)
        cin = X[0].shape[3]
        X = check_volumes(X, cin)
        y = check_label_maps(y, X, self.num_classes)
        val = None
        if X_val is not None:
            X_val = check_volumes(X_val, cin)
            val = (X_val, check_label_maps(y_val, X_val, self.num_classes))
        config = self.model_config(cin)
        seed = self._seed()
        ckdir = self.checkpoint_dir
        if stage1_params is not None:
            if self.variant != "ipnv2plus":
                raise ValueError("stage1_params can only be given for the ipnv2plus variant")
            s1 = self._reuse_stage1(stage1_params, config)
        else:
            ds = PatchDataset(X, y, self.patch_size, self.target_h)
            s1 = train_stage1(
                ds, config,
                TrainConfig(self.max_iter, self.save_every, self.learning_rate, self.batch_size),
                seed, val=val, checkpoint_dir=ckdir, step=self.val_step,
            )
        self.config_ = config
        self.n_features_in_ = cin
        self.params_ = s1.params
        self.stage1_result_ = s1
        self.gparams_ = None
        self.stage2_result_ = None
        fg = self.num_classes - 1
        thresholds = s1.thresholds or (0.5,) * fg
        if self.variant == "ipnv2plus":
            feats = [self._features(v, self.step) for v in X]
            gval = None
            if val is not None:
                gval = ([self._features(v, self.step) for v in val[0]], val[1])
            s2 = train_stage2(
                self.params_, config, feats, y,
                TrainConfig(self.stage2_max_iter, self.stage2_save_every, self.learning_rate,
                            self.stage2_batch_size),
                seed, val=gval, checkpoint_dir=ckdir,
            )
            self.gparams_ = s2.params
            self.stage2_result_ = s2
            thresholds = s2.thresholds or (0.5,) * fg
        self.thresholds_ = tuple(thresholds)
        return self

    def _reuse_stage1(self, params, config):
        expected = init_stage1_params(config, 0)
        if [(k, p.value.shape) for k, p in expected.items()] != [
                (k, p.value.shape) for k, p in params.items()]:
            raise ValueError("stage1_params do not match this estimator's architecture")
        return TrainResult(params.copy())

    def _features(self, volume, step):
        v = prepare_volume(volume, self.target_h)
        return patchwise(v, self.params_, self.config_, self.patch_size, step, output="features")

    def _probs(self, volume, step, stage=None):
        if self.variant == "ipnv2plus" and stage != 1:
            return global_probs(self._features(volume, step), self.gparams_, self.config_)
        v = prepare_volume(volume, self.target_h)
        return patchwise(v, self.params_, self.config_, self.patch_size, step)

    def predict_proba(self, X, step=None, stage=None):
        """Per-class probability maps ``(L, W, K)``, one per volume.

        ``stage=1`` returns the spliced patchwise output of the stage-1
        network even for ``ipnv2plus``.
        """
        check_is_fitted(self, "params_")
        X = check_volumes(X, self.n_features_in_)
        step = self.step if step is None else step
        return [self._probs(v, step, stage) for v in X]

    def transform(self, X, step=None):
        """Spliced ``(L, W, c)`` penultimate feature maps (V2 variants only)."""
        check_is_fitted(self, "params_")
        if self.variant == "ipn":
            raise ValueError("the ipn variant has no penultimate plane features")
        X = check_volumes(X, self.n_features_in_)
        step = self.step if step is None else step
        return [self._features(v, step) for v in X]

    def predict(self, X, step=None):
        """Class maps from the per-class validation thresholds.

        A pixel takes the foreground class with the highest probability
        among those reaching their threshold, otherwise background.
        """
        return [self.labels_from_proba(p) for p in self.predict_proba(X, step)]

    def labels_from_proba(self, prob):
        check_is_fitted(self, "thresholds_")
        fgp = prob[..., 1:]
        passed = fgp >= np.asarray(self.thresholds_)
        best = np.argmax(np.where(passed, fgp, -1.0), axis=-1) + 1
        return np.where(passed.any(axis=-1), best, 0)

    def score(self, X, y):
        """Mean Dice over foreground classes and samples."""
        pred = self.predict(X)
        y = check_label_maps(y, check_volumes(X), self.num_classes)
        scores = [
            dice(confusion(p == k, t == k))
            for k in range(1, self.num_classes)
            for p, t in zip(pred, y)
        ]
        return float(np.mean(scores))
