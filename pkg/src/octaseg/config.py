"""Line-oriented ``key = value`` run configuration."""

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .estimator import TASKS
from .network import VARIANTS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data
    seed: int = 1
    n_samples: int = 30
    L: int = 64
    W: int = 64
    H: int = 32
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    vessel_count: int = 5
    vessel_radius_min: float = 1.0
    vessel_radius_max: float = 1.8
    faz_radius: int = 10
    noise_sigma: float = 0.04
    data_dir: str = ""
    # experiment
    task: str = "rv"
    variant: str = "ipnv2"
    # geometry
    patch_size: int = 16
    target_h: int = 16
    step: int = 8
    val_step: int = 16
    # architecture
    plm_channels: tuple = (8, 8, 16)
    plm_strides: tuple = (2, 2, 4)
    convs_per_plm: int = 2
    pool_mode: str = "max"
    unet_depth: int = 2
    unet_base_channels: int = 8
    penultimate_channels: int = 8
    global_depth: int = 2
    global_base_channels: int = 16
    normalization: str = "none"
    # optimisation
    max_iters: int = 2000
    save_every: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 1
    stage2_max_iters: int = 500
    stage2_save_every: int = 25
    stage2_batch_size: int = 2

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {self.task!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.normalization != "none":
            raise ConfigError("normalization layers are not supported; use normalization = none")
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ConfigError("train_frac + val_frac + test_frac must equal 1")
        positive = ("n_samples", "L", "W", "H", "patch_size", "target_h", "step", "val_step",
                    "max_iters", "save_every", "batch_size", "stage2_max_iters",
                    "stage2_save_every", "stage2_batch_size")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    @property
    def num_classes(self):
        return 3 if self.task == "multitask" else 2

    @property
    def input_channels(self):
        return 2 if self.task == "rv" else 3

    def with_overrides(self, **kw):
        return replace(self, **kw)

    def to_text(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def estimator_params(self):
        return dict(
            variant=self.variant, num_classes=self.num_classes, patch_size=self.patch_size,
            target_h=self.target_h, step=self.step, val_step=self.val_step,
            plm_channels=self.plm_channels, plm_strides=self.plm_strides,
            convs_per_plm=self.convs_per_plm, pool_mode=self.pool_mode,
            unet_depth=self.unet_depth, unet_base_channels=self.unet_base_channels,
            penultimate_channels=self.penultimate_channels, global_depth=self.global_depth,
            global_base_channels=self.global_base_channels, max_iter=self.max_iters,
            save_every=self.save_every, learning_rate=self.learning_rate,
            batch_size=self.batch_size, stage2_max_iter=self.stage2_max_iters,
            stage2_save_every=self.stage2_save_every, stage2_batch_size=self.stage2_batch_size,
            random_state=self.seed,
        )


def _format(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name, typ, raw):
    try:
        if typ is tuple:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(text, source="<config>", base=None):
    """Parse ``key = value`` lines over ``base`` (defaults when omitted)."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        values[key] = _coerce(key, _TYPES[key], raw)
    base = base or RunConfig()
    try:
        return replace(base, **values)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, str(path))
