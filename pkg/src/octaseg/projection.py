"""En-face projection maps of OCT / OCTA volumes over layer-bounded regions."""

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Region(str, Enum):
    FULL = "FULL"
    ILM_OPL = "ILM_OPL"
    OPL_BM = "OPL_BM"


class Mode(str, Enum):
    AVG = "AVG"
    MAX = "MAX"


@dataclass
class Volume3D:
    """Dense ``(L, W, H)`` grid; H is the axial direction."""

    data: np.ndarray
    modality: str = "OCTA"
    fov_mm: tuple = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3-D with extents >= 1, got {self.data.shape}")
        if self.data.dtype != np.uint8:
            self.data = self.data.astype(np.float64)
            if not np.isfinite(self.data).all():
                raise ValueError("volume contains non-finite values")

    @property
    def shape(self):
        return self.data.shape

    def as_float(self):
        """Values as float64; 8-bit volumes are scaled to [0, 1]."""
        if self.data.dtype == np.uint8:
            return self.data.astype(np.float64) / 255.0
        return self.data


@dataclass
class LayerSurfaces:
    """Per-pixel axial indices of the ILM, OPL and BM surfaces."""

    ilm: np.ndarray
    opl: np.ndarray
    bm: np.ndarray

    def __post_init__(self):
        self.ilm = np.asarray(self.ilm).astype(np.int64)
        self.opl = np.asarray(self.opl).astype(np.int64)
        self.bm = np.asarray(self.bm).astype(np.int64)
        if not self.ilm.shape == self.opl.shape == self.bm.shape or self.ilm.ndim != 2:
            raise ValueError("surfaces must be equally shaped 2-D arrays")

    @classmethod
    def from_float(cls, ilm, opl, bm):
        """Round sub-voxel surfaces to the nearest index, ties toward the ILM side."""
        return cls(*(np.ceil(np.asarray(s, dtype=np.float64) - 0.5) for s in (ilm, opl, bm)))

    @property
    def shape(self):
        return self.ilm.shape

    def validate(self, H):
        ok = (0 <= self.ilm) & (self.ilm <= self.opl) & (self.opl <= self.bm) & (self.bm < H)
        if not ok.all():
            x, y = (int(i) for i in np.argwhere(~ok)[0])
            raise ValueError(
                f"surface ordering violated at pixel ({x}, {y}): ilm={self.ilm[x, y]}, "
                f"opl={self.opl[x, y]}, bm={self.bm[x, y]}, H={H}"
            )


@dataclass
class Map2D:
    data: np.ndarray
    kind: str = ""


# number: (modality, region, mode)
PROJECTIONS = {
    "B1": ("OCT", Region.FULL, Mode.AVG),
    "B2": ("OCT", Region.ILM_OPL, Mode.AVG),
    "B3": ("OCT", Region.OPL_BM, Mode.AVG),
    "B4": ("OCTA", Region.FULL, Mode.AVG),
    "B5": ("OCTA", Region.ILM_OPL, Mode.MAX),
    "B6": ("OCTA", Region.OPL_BM, Mode.MAX),
}


def _bounds(region, surfaces, shape):
    L, W, H = shape
    if region == Region.FULL:
        return np.zeros((L, W), dtype=np.int64), np.full((L, W), H - 1, dtype=np.int64)
    if surfaces is None:
        raise ValueError(f"region {region.value} requires layer surfaces")
    if surfaces.shape != (L, W):
        raise ValueError(f"surfaces extents {surfaces.shape} do not match volume plane {(L, W)}")
    surfaces.validate(H)
    if region == Region.ILM_OPL:
        return surfaces.ilm, surfaces.opl
    return surfaces.opl, surfaces.bm


def project(volume, region=Region.FULL, mode=Mode.AVG, surfaces=None):
    """Reduce a volume along the axial axis over an inclusive layer range.

    Accumulation runs sequentially in increasing depth so the average
    matches a plain per-column loop exactly.
    """
    region, mode = Region(region), Mode(mode)
    v = volume.as_float() if isinstance(volume, Volume3D) else np.asarray(volume, dtype=np.float64)
    lo, hi = _bounds(region, surfaces, v.shape)
    H = v.shape[2]
    if mode == Mode.AVG:
        acc = np.zeros(v.shape[:2])
        for z in range(H):
            inside = (lo <= z) & (z <= hi)
            acc = acc + np.where(inside, v[:, :, z], 0.0)
        out = acc / (hi - lo + 1)
    else:
        out = np.full(v.shape[:2], -np.inf)
        for z in range(H):
            inside = (lo <= z) & (z <= hi)
            out = np.where(inside, np.maximum(out, v[:, :, z]), out)
    return Map2D(out, kind=f"{region.value}/{mode.value}")


def generate_all(oct_volume, octa_volume, surfaces):
    """The six standard projection maps B1..B6, keyed by number."""
    if oct_volume.shape != octa_volume.shape:
        raise ValueError(
            f"OCT extents {oct_volume.shape} differ from OCTA extents {octa_volume.shape}"
        )
    sources = {"OCT": oct_volume, "OCTA": octa_volume}
    maps = {}
    for number, (modality, region, mode) in PROJECTIONS.items():
        m = project(sources[modality], region, mode, surfaces)
        maps[number] = Map2D(m.data, kind=number)
    return maps
