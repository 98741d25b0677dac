"""IPN, IPN-V2 and the global retraining network, with manual backprop.

The image projection network ``f`` is a chain of projection learning
modules (3D convolutions followed by height-only pooling) that squeezes an
``(l, w, h, cin)`` patch down to an ``(l, w, C)`` plane. IPN-V2 adds a
planar U-Net ``p`` fed with the trunk output and a collapsed copy of the
first module's features. IPN-V2+ trains a second U-Net ``g`` on the
spliced penultimate features of IPN-V2.

Parameter names are prefixed ``f.``, ``p.`` and ``g.`` for the three
networks so they can be frozen or saved separately.
"""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    Param,
    ShapeError,
    collapse_conv,
    collapse_conv_backward,
    concat,
    concat_backward,
    conv2d,
    conv2d_backward,
    conv3d,
    conv3d_backward,
    pool2d,
    pool2d_backward,
    relu,
    relu_backward,
    uni_pool_h,
    uni_pool_h_backward,
    upsample2d,
    upsample2d_backward,
)

VARIANTS = ("ipn", "ipnv2", "ipnv2plus")


@dataclass
class IpnConfig:
    plm_channels: tuple = (16, 32, 64, 128)
    plm_strides: tuple = (2, 4, 4, 5)
    convs_per_plm: int = 2
    num_classes: int = 2
    input_channels: int = 2
    pool_mode: str = "max"

    def __post_init__(self):
        self.plm_channels = tuple(int(c) for c in self.plm_channels)
        self.plm_strides = tuple(int(s) for s in self.plm_strides)
        if len(self.plm_channels) != len(self.plm_strides) or not self.plm_channels:
            raise ValueError("plm_channels and plm_strides must be non-empty and equally long")
        if min(self.plm_channels + self.plm_strides) < 1 or self.convs_per_plm < 1:
            raise ValueError("channel counts, strides and convs_per_plm must be >= 1")
        if self.num_classes < 2 or self.input_channels < 1:
            raise ValueError("need num_classes >= 2 and input_channels >= 1")
        if self.pool_mode not in ("max", "avg"):
            raise ValueError(f"pool_mode must be 'max' or 'avg', got {self.pool_mode!r}")

    @property
    def patch_height(self):
        return int(np.prod(self.plm_strides))


@dataclass
class PlanePerceptronConfig:
    unet_depth: int = 3
    base_channels: int = 32
    penultimate_channels: int = 16
    skip_channels: int = None  # defaults to the first module's channel count

    def __post_init__(self):
        if self.unet_depth < 1 or self.base_channels < 1 or self.penultimate_channels < 1:
            raise ValueError("plane perceptron depth and channel counts must be >= 1")


@dataclass
class GlobalNetConfig:
    unet_depth: int = 2
    base_channels: int = 16
    input_channels: int = 16
    num_classes: int = 2

    def __post_init__(self):
        if self.unet_depth < 1 or self.base_channels < 1 or self.input_channels < 1:
            raise ValueError("global net depth and channel counts must be >= 1")


@dataclass
class ModelConfig:
    variant: str = "ipnv2"
    ipn: IpnConfig = field(default_factory=IpnConfig)
    plane: PlanePerceptronConfig = field(default_factory=PlanePerceptronConfig)
    global_net: GlobalNetConfig = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.global_net is None:
            self.global_net = GlobalNetConfig(
                input_channels=self.plane.penultimate_channels,
                num_classes=self.ipn.num_classes,
            )

    @property
    def skip_channels(self):
        return self.plane.skip_channels or self.ipn.plm_channels[0]

    def to_dict(self):
        return asdict(self)


class ModelParams(OrderedDict):
    """Ordered ``name -> Param`` store; insertion order is serialization order."""

    def zero_grad(self):
        for p in self.values():
            p.zero_grad()

    def subset(self, prefix):
        return ModelParams((k, v) for k, v in self.items() if k.startswith(prefix))

    def copy(self):
        return ModelParams((k, Param(v.value.copy())) for k, v in self.items())

    def to_bytes(self):
        return checkpoint_bytes(self)

    def save(self, path):
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path):
        return load_checkpoint(path)


CHECKPOINT_MAGIC = b"PSEG1\n"


def checkpoint_bytes(params):
    head = [CHECKPOINT_MAGIC, f"{len(params)}\n".encode()]
    for name, p in params.items():
        dims = " ".join(str(d) for d in p.value.shape)
        head.append(f"{name} {p.value.ndim} {dims}\n".encode())
    payload = b"".join(p.value.astype("<f8").tobytes(order="C") for p in params.values())
    return b"".join(head) + payload


def save_checkpoint(params, path):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params))
    tmp.replace(path)


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a PSEG1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    end = raw.index(b"\n", pos)
    count = int(raw[pos:end])
    pos = end + 1
    entries = []
    for _ in range(count):
        end = raw.index(b"\n", pos)
        parts = raw[pos:end].decode().split()
        ndim = int(parts[1])
        entries.append((parts[0], tuple(int(d) for d in parts[2:2 + ndim])))
        pos = end + 1
    params = ModelParams()
    for name, shape in entries:
        n = int(np.prod(shape, dtype=np.int64))
        nbytes = 8 * n
        if pos + nbytes > len(raw):
            raise ValueError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape)
        params[name] = Param(arr.astype(np.float64))
        pos += nbytes
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return params


# ---------------------------------------------------------------- init


def _he(rng, shape):
    fan_in = int(np.prod(shape[:-1]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _add_conv(params, rng, name, kshape, cin, cout):
    params[f"{name}.w"] = Param(_he(rng, tuple(kshape) + (cin, cout)))
    params[f"{name}.b"] = Param(np.zeros(cout))


def _unet_channels(depth, base):
    return [base * 2**i for i in range(depth + 1)]


def _add_unet(params, rng, prefix, cin, depth, base, penult, num_classes):
    ch = _unet_channels(depth, base)
    c = cin
    for i in range(depth):
        _add_conv(params, rng, f"{prefix}.enc{i}.conv0", (3, 3), c, ch[i])
        _add_conv(params, rng, f"{prefix}.enc{i}.conv1", (3, 3), ch[i], ch[i])
        c = ch[i]
    _add_conv(params, rng, f"{prefix}.bottom.conv0", (3, 3), c, ch[depth])
    _add_conv(params, rng, f"{prefix}.bottom.conv1", (3, 3), ch[depth], ch[depth])
    c = ch[depth]
    for i in reversed(range(depth)):
        out = penult if i == 0 else ch[i]
        _add_conv(params, rng, f"{prefix}.dec{i}.conv0", (3, 3), c + ch[i], ch[i])
        _add_conv(params, rng, f"{prefix}.dec{i}.conv1", (3, 3), ch[i], out)
        c = out
    _add_conv(params, rng, f"{prefix}.head", (1, 1), c, num_classes)


def init_stage1_params(config, seed):
    """Parameters of ``f`` (and ``p`` for the V2 variants)."""
    rng = np.random.default_rng(seed)
    cfg = config.ipn
    params = ModelParams()
    cin = cfg.input_channels
    for m, ch in enumerate(cfg.plm_channels):
        for j in range(cfg.convs_per_plm):
            _add_conv(params, rng, f"f.plm{m}.conv{j}", (3, 3, 3), cin, ch)
            cin = ch
    if config.variant == "ipn":
        _add_conv(params, rng, "f.head", (1, 1), cin, cfg.num_classes)
        return params
    skip_h = cfg.patch_height // cfg.plm_strides[0]
    _add_conv(params, rng, "p.skip", (1, 1, skip_h), cfg.plm_channels[0], config.skip_channels)
    pp = config.plane
    _add_unet(params, rng, "p", cin + config.skip_channels, pp.unet_depth,
              pp.base_channels, pp.penultimate_channels, cfg.num_classes)
    return params


def init_global_params(config, seed):
    """Parameters of the global network ``g``."""
    rng = np.random.default_rng(seed)
    g = config.global_net
    params = ModelParams()
    _add_unet(params, rng, "g", g.input_channels, g.unet_depth, g.base_channels,
              g.base_channels, g.num_classes)
    return params


def init_params(config, seed):
    """All parameters the variant needs: f, p for V2, and g for V2+.

    ``g`` is drawn from a seed derived from ``seed`` so the stage-1 weights
    are identical to those of ``init_stage1_params(config, seed)``.
    """
    params = init_stage1_params(config, seed)
    if config.variant == "ipnv2plus":
        params.update(init_global_params(config, _derived_seed(seed, 2)))
    return params


def _derived_seed(seed, stream):
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


# ---------------------------------------------------------------- blocks


def _conv_relu(x, params, name, conv):
    y, cc = conv(x, params[f"{name}.w"].value, params[f"{name}.b"].value)
    y, rc = relu(y)
    return y, (name, cc, rc)


def _conv_relu_backward(dy, cache, params, conv_backward):
    name, cc, rc = cache
    dx, dw, db = conv_backward(relu_backward(dy, rc), cc)
    params[f"{name}.w"].grad += dw
    params[f"{name}.b"].grad += db
    return dx


def _conv2d_relu_backward(dy, cache, params):
    return _conv_relu_backward(dy, cache, params, conv2d_backward)


def _check_patch(x, cfg):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 4:
        raise ShapeError(f"patch must be (l, w, h, cin), got shape {x.shape}")
    h = x.shape[-2]
    if h != cfg.patch_height:
        raise ShapeError(
            f"patch height h={h} incompatible with plm_strides {cfg.plm_strides} "
            f"(stride product {cfg.patch_height})"
        )
    if x.shape[-1] != cfg.input_channels:
        raise ShapeError(f"patch has {x.shape[-1]} channels, config expects {cfg.input_channels}")
    return x


def trunk_forward(x, params, cfg):
    """Projection learning modules of ``f``.

    Returns the collapsed ``(l, w, C)`` features, the first module's 3D
    output (the skip source used by IPN-V2) and the cache.
    """
    x = _check_patch(x, cfg)
    steps = []
    first = None
    for m, stride in enumerate(cfg.plm_strides):
        for j in range(cfg.convs_per_plm):
            x, c = _conv_relu(x, params, f"f.plm{m}.conv{j}", conv3d)
            steps.append(("conv", c))
        x, c = uni_pool_h(x, stride, cfg.pool_mode)
        steps.append(("pool", c))
        if m == 0:
            first = x
            steps.append(("first", None))
    return x[..., 0, :], first, steps


def trunk_backward(dfeat, dfirst, steps, params):
    dx = dfeat[..., None, :]
    for kind, c in reversed(steps):
        if kind == "first":
            if dfirst is not None:
                dx = dx + dfirst
        elif kind == "pool":
            dx = uni_pool_h_backward(dx, c)
        else:
            dx = _conv_relu_backward(dx, c, params, conv3d_backward)
    return dx


def unet_forward(x, params, prefix, depth):
    """Planar U-Net; returns ``(logits, penultimate, cache)``."""
    enc, pools, skips = [], [], []
    for i in range(depth):
        x, c0 = _conv_relu(x, params, f"{prefix}.enc{i}.conv0", conv2d)
        x, c1 = _conv_relu(x, params, f"{prefix}.enc{i}.conv1", conv2d)
        enc.append((c0, c1))
        skips.append(x)
        x, pc = pool2d(x)
        pools.append(pc)
    x, b0 = _conv_relu(x, params, f"{prefix}.bottom.conv0", conv2d)
    x, b1 = _conv_relu(x, params, f"{prefix}.bottom.conv1", conv2d)
    dec = []
    for i in reversed(range(depth)):
        x, us = upsample2d(x)
        x, cs = concat(skips[i], x)
        x, c0 = _conv_relu(x, params, f"{prefix}.dec{i}.conv0", conv2d)
        x, c1 = _conv_relu(x, params, f"{prefix}.dec{i}.conv1", conv2d)
        dec.append((i, us, cs, c0, c1))
    logits, hc = conv2d(x, params[f"{prefix}.head.w"].value, params[f"{prefix}.head.b"].value)
    return logits, x, (prefix, enc, pools, (b0, b1), dec, hc)


def unet_backward(dlogits, cache, params, dpenult=None):
    prefix, enc, pools, (b0, b1), dec, hc = cache
    dx, dw, db = conv2d_backward(dlogits, hc)
    params[f"{prefix}.head.w"].grad += dw
    params[f"{prefix}.head.b"].grad += db
    if dpenult is not None:
        dx = dx + dpenult
    dskips = {}
    for i, us, cs, c0, c1 in reversed(dec):
        dx = _conv2d_relu_backward(dx, c1, params)
        dx = _conv2d_relu_backward(dx, c0, params)
        dskip, dup = concat_backward(dx, cs)
        dskips[i] = dskip
        dx = upsample2d_backward(dup, us)
    dx = _conv2d_relu_backward(dx, b1, params)
    dx = _conv2d_relu_backward(dx, b0, params)
    for i in reversed(range(len(enc))):
        dx = pool2d_backward(dx, pools[i]) + dskips[i]
        c0, c1 = enc[i]
        dx = _conv2d_relu_backward(dx, c1, params)
        dx = _conv2d_relu_backward(dx, c0, params)
    return dx


def _check_plane(l, w, depth, what):
    k = 2**depth
    if l % k or w % k:
        raise ShapeError(f"{what} extents ({l}, {w}) must be divisible by 2**depth = {k}")


# ---------------------------------------------------------------- variants


def ipn_forward(patch, params, config, return_cache=False):
    """IPN: ``(l, w, h, cin)`` patch to ``(l, w, K)`` logits.

    A stack of patches with leading batch axes is handled the same way.
    """
    cfg = config.ipn
    feat, _, steps = trunk_forward(patch, params, cfg)
    logits, hc = conv2d(feat, params["f.head.w"].value, params["f.head.b"].value)
    if return_cache:
        return logits, (steps, hc)
    return logits


def ipn_backward(dlogits, cache, params):
    steps, hc = cache
    dfeat, dw, db = conv2d_backward(dlogits, hc)
    params["f.head.w"].grad += dw
    params["f.head.b"].grad += db
    return trunk_backward(dfeat, None, steps, params)


def plane_forward(feat, skip_source, params, config):
    """Plane perceptron on trunk features plus the collapsed skip path."""
    skip, sc = collapse_conv(skip_source, params["p.skip.w"].value, params["p.skip.b"].value)
    x, cat = concat(feat, skip)
    _check_plane(x.shape[-3], x.shape[-2], config.plane.unet_depth, "patch plane")
    logits, penult, uc = unet_forward(x, params, "p", config.plane.unet_depth)
    return logits, penult, (sc, cat, uc)


def plane_backward(dlogits, cache, params, dpenult=None):
    sc, cat, uc = cache
    dx = unet_backward(dlogits, uc, params, dpenult)
    dfeat, dskip = concat_backward(dx, cat)
    dsrc, dw, db = collapse_conv_backward(dskip, sc)
    params["p.skip.w"].grad += dw
    params["p.skip.b"].grad += db
    return dfeat, dsrc


def ipnv2_forward(patch, params, config, return_cache=False):
    """IPN-V2: returns ``(logits, penultimate)`` for one patch."""
    feat, first, steps = trunk_forward(patch, params, config.ipn)
    logits, penult, pc = plane_forward(feat, first, params, config)
    if return_cache:
        return logits, penult, (steps, pc)
    return logits, penult


def ipnv2_backward(dlogits, cache, params, dpenult=None):
    steps, pc = cache
    dfeat, dfirst = plane_backward(dlogits, pc, params, dpenult)
    return trunk_backward(dfeat, dfirst, steps, params)


def stage1_forward(patch, params, config, return_cache=False):
    """Logits of the stage-1 network for either variant family."""
    if config.variant == "ipn":
        return ipn_forward(patch, params, config, return_cache)
    out = ipnv2_forward(patch, params, config, return_cache)
    if return_cache:
        logits, _, cache = out
        return logits, cache
    return out[0]


def stage1_backward(dlogits, cache, params, config):
    if config.variant == "ipn":
        return ipn_backward(dlogits, cache, params)
    return ipnv2_backward(dlogits, cache, params)


def global_forward(spliced, params, config, return_cache=False):
    """Global U-Net on an ``(L, W, c)`` spliced feature map.

    Planes whose extents are not multiples of ``2**depth`` are zero-padded
    at the far edges and the logits cropped back to ``(L, W, K)``.
    """
    g = config.global_net
    x = np.asarray(spliced, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != g.input_channels:
        raise ShapeError(
            f"global net expects (L, W, {g.input_channels}) features, got {x.shape}"
        )
    L, W, _ = x.shape
    k = 2**g.unet_depth
    pl, pw = -L % k, -W % k
    if pl or pw:
        x = np.pad(x, ((0, pl), (0, pw), (0, 0)))
    logits, _, uc = unet_forward(x, params, "g", g.unet_depth)
    logits = logits[:L, :W]
    if return_cache:
        return logits, (uc, (pl, pw))
    return logits


def global_backward(dlogits, cache, params):
    uc, (pl, pw) = cache
    if pl or pw:
        dlogits = np.pad(dlogits, ((0, pl), (0, pw), (0, 0)))
    dx = unet_backward(dlogits, uc, params)
    L, W = dx.shape[0] - pl, dx.shape[1] - pw
    return dx[:L, :W]


# ---------------------------------------------------------------- inputs


def build_distance_map(L, W):
    """Distance to the en-face centre, scaled so the corners are 1."""
    cx, cy = (L - 1) / 2.0, (W - 1) / 2.0
    x = np.arange(L)[:, None] - cx
    y = np.arange(W)[None, :] - cy
    d = np.sqrt(x * x + y * y)
    corner = np.sqrt(cx * cx + cy * cy)
    if corner == 0:
        return np.zeros((L, W))
    return d / corner


def log_line(it, loss, val_dice):
    return f"{it}\t{loss!r}\t{val_dice!r}"


def write_log(entries, path):
    Path(path).write_text("".join(log_line(*e) + "\n" for e in entries))
