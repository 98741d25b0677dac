"""Synthetic OCT/OCTA phantoms with vessel and FAZ ground truth, plus dataset I/O.

A phantom is deliberately simple: a random branching tree of tubes that
stops at a central avascular disk, drawn into the inner-retina slab of the
OCTA volume, over speckle. The OCT volume only carries layered
reflectivity. Everything is driven by a seed so samples regenerate bit for
bit.
"""

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .formats import (
    read_manifest,
    read_mask,
    read_vsurf,
    read_vvol,
    write_manifest,
    write_mask,
    write_vsurf,
    write_vvol,
)
from .projection import LayerSurfaces, Volume3D

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    L: int = 64
    W: int = 64
    H: int = 32
    vessel_count: int = 5
    vessel_radius_min: float = 1.0
    vessel_radius_max: float = 1.8
    faz_radius: float = 10.0
    vessel_intensity: float = 0.9
    ilm_depth: float = 6.0
    opl_depth: float = 14.0
    bm_depth: float = 24.0
    surface_amplitude: float = 1.5
    noise_sigma: float = 0.04
    capillary_gain: float = 2.5
    branch_prob: float = 0.03

    def validate(self):
        if min(self.L, self.W, self.H) < 16:
            raise ValueError(f"phantom extents must be >= 16, got {(self.L, self.W, self.H)}")
        if not 0 < self.faz_radius < min(self.L, self.W) / 4:
            raise ValueError(
                f"faz_radius {self.faz_radius} must be in (0, min(L, W)/4 = {min(self.L, self.W) / 4})"
            )
        if self.vessel_radius_min < 1 or self.vessel_radius_max < self.vessel_radius_min:
            raise ValueError("vessel radii must satisfy 1 <= min <= max")
        if self.vessel_count < 0 or self.noise_sigma < 0:
            raise ValueError("vessel_count and noise_sigma must be non-negative")
        if not 0 <= self.ilm_depth < self.opl_depth < self.bm_depth < self.H - 1:
            raise ValueError("slab depths must satisfy 0 <= ilm < opl < bm < H - 1")


@dataclass
class Sample:
    oct: Volume3D
    octa: Volume3D
    surfaces: LayerSurfaces
    rv_gt: np.ndarray
    faz_gt: np.ndarray
    id: str = ""


def _smooth_field(rng, L, W, terms=3):
    x = np.arange(L)[:, None] / L
    y = np.arange(W)[None, :] / W
    f = np.zeros((L, W))
    for _ in range(terms):
        fx, fy = rng.uniform(0.3, 1.5, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        f += np.cos(2 * np.pi * fx * x + px) * np.cos(2 * np.pi * fy * y + py)
    return f / terms


def _faz_disk(spec):
    cx, cy = (spec.L - 1) / 2.0, (spec.W - 1) / 2.0
    x = np.arange(spec.L)[:, None] - cx
    y = np.arange(spec.W)[None, :] - cy
    return x * x + y * y <= spec.faz_radius**2


def _surfaces(rng, spec):
    L, W = spec.L, spec.W
    a = spec.surface_amplitude
    ilm = spec.ilm_depth + a * _smooth_field(rng, L, W)
    opl = spec.opl_depth + a * _smooth_field(rng, L, W)
    bm = spec.bm_depth + a * _smooth_field(rng, L, W)
    surf = LayerSurfaces.from_float(ilm, opl, bm)
    ilm = np.clip(surf.ilm, 0, spec.H - 5)
    opl = np.clip(surf.opl, ilm + 2, spec.H - 3)
    bm = np.clip(surf.bm, opl + 2, spec.H - 1)
    return LayerSurfaces(ilm, opl, bm)


def _vessel_paths(rng, spec):
    """Random branching walks from the border toward the centre.

    Each returned path is a list of ``(x, y, radius)`` points. Walks end on
    leaving the plane or on reaching the avascular disk margin.
    """
    L, W = spec.L, spec.W
    cx, cy = (L - 1) / 2.0, (W - 1) / 2.0
    paths = []
    queue = []
    for _ in range(spec.vessel_count):
        side_angle = rng.uniform(0, 2 * np.pi)
        reach = 0.5 * np.hypot(L, W)
        x = np.clip(cx + reach * np.cos(side_angle), 0, L - 1)
        y = np.clip(cy + reach * np.sin(side_angle), 0, W - 1)
        heading = np.arctan2(cy - y, cx - x) + rng.normal(0, 0.35)
        radius = rng.uniform(spec.vessel_radius_min, spec.vessel_radius_max)
        queue.append((x, y, heading, radius, 0))
    max_branches = 3 * spec.vessel_count
    branches = 0
    while queue:
        x, y, heading, radius, depth = queue.pop(0)
        path = []
        for _ in range(2 * (L + W)):
            if not (0 <= x <= L - 1 and 0 <= y <= W - 1):
                break
            if np.hypot(x - cx, y - cy) < spec.faz_radius + radius + 1.0:
                break
            path.append((x, y, radius))
            heading += rng.normal(0, 0.12)
            x += np.cos(heading)
            y += np.sin(heading)
            if depth < 2 and branches < max_branches and rng.random() < spec.branch_prob:
                branches += 1
                turn = rng.choice((-1.0, 1.0)) * rng.uniform(0.5, 1.1)
                child_r = max(spec.vessel_radius_min, radius * 0.75)
                queue.append((x, y, heading + turn, child_r, depth + 1))
        if path:
            paths.append(path)
    return paths


def _rasterize(paths, L, W):
    mask = np.zeros((L, W), dtype=bool)
    gx = np.arange(L)[:, None]
    gy = np.arange(W)[None, :]
    for path in paths:
        for x, y, r in path:
            x0, x1 = max(int(np.floor(x - r)), 0), min(int(np.ceil(x + r)) + 1, L)
            y0, y1 = max(int(np.floor(y - r)), 0), min(int(np.ceil(y + r)) + 1, W)
            dx = gx[x0:x1] - x
            dy = gy[:, y0:y1] - y
            mask[x0:x1, y0:y1] |= dx * dx + dy * dy <= r * r
    return mask


def _quantize(v):
    return np.round(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)


def gen_phantom(spec):
    """Generate one registered OCT / OCTA phantom and its labels."""
    spec.validate()
    L, W, H = spec.L, spec.W, spec.H
    # independent streams so e.g. changing vessel_count leaves the noise alone
    ss = np.random.SeedSequence(spec.seed)
    r_surf, r_vessel, r_oct, r_octa = (np.random.default_rng(s) for s in ss.spawn(4))

    surfaces = _surfaces(r_surf, spec)
    faz = _faz_disk(spec)
    rv = _rasterize(_vessel_paths(r_vessel, spec), L, W) & ~faz

    z = np.arange(H)[None, None, :]
    ilm = surfaces.ilm[..., None]
    opl = surfaces.opl[..., None]
    bm = surfaces.bm[..., None]
    inner = (z >= ilm) & (z <= opl)
    outer = (z > opl) & (z < bm)

    oct_v = np.full((L, W, H), 0.02)
    oct_v[inner] = 0.55
    oct_v[outer] = 0.35
    oct_v[np.broadcast_to(z == bm, (L, W, H))] = 0.9
    below = np.broadcast_to(z > bm, (L, W, H))
    oct_v[below] = (0.3 * np.exp(-(z - bm) / 6.0))[below]
    oct_v = oct_v + spec.noise_sigma * r_oct.standard_normal((L, W, H))

    sigma = np.full((L, W, 1), spec.noise_sigma)
    speckle = r_octa.standard_normal((L, W, H))
    plexus = inner & ~faz[..., None]
    octa_v = np.maximum(speckle * np.where(plexus, sigma * spec.capillary_gain, sigma), 0.0)
    choroid = np.broadcast_to(z > bm, (L, W, H))
    octa_v[choroid] += 0.3
    vessel_vox = inner & rv[..., None]
    octa_v[vessel_vox] = np.maximum(octa_v[vessel_vox], spec.vessel_intensity)

    return Sample(
        oct=Volume3D(_quantize(oct_v), "OCT"),
        octa=Volume3D(_quantize(octa_v), "OCTA"),
        surfaces=surfaces,
        rv_gt=rv,
        faz_gt=faz,
    )


# ---------------------------------------------------------------- datasets


@dataclass
class Manifest:
    entries: list

    def ids(self, split=None):
        return [sid for sid, s in self.entries if split is None or s == split]

    def save(self, path):
        write_manifest(path, self.entries)

    @classmethod
    def load(cls, path):
        entries = read_manifest(path)
        bad = [s for _, s in entries if s not in SPLITS]
        if bad:
            raise ValueError(f"{path}: unknown split tags {sorted(set(bad))}")
        return cls(entries)


def sample_seed(master_seed, sample_id):
    digest = hashlib.sha256(f"{int(master_seed)}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def split_counts(n, fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    val = int(round(n * fractions[1]))
    test = int(round(n * fractions[2]))
    return n - val - test, val, test


def sample_paths(root, sample_id):
    root = Path(root)
    return {
        "oct": root / f"{sample_id}_oct.vvol",
        "octa": root / f"{sample_id}_octa.vvol",
        "surfaces": root / f"{sample_id}.vsurf",
        "rv": root / f"{sample_id}_rv.pgm",
        "faz": root / f"{sample_id}_faz.pgm",
    }


def save_sample(root, sample):
    p = sample_paths(root, sample.id)
    write_vvol(p["oct"], sample.oct.data)
    write_vvol(p["octa"], sample.octa.data)
    write_vsurf(p["surfaces"], sample.surfaces)
    write_mask(p["rv"], sample.rv_gt)
    write_mask(p["faz"], sample.faz_gt)


def load_sample(root, sample_id):
    p = sample_paths(root, sample_id)
    oct_v = Volume3D(read_vvol(p["oct"]), "OCT")
    octa_v = Volume3D(read_vvol(p["octa"]), "OCTA")
    if oct_v.shape != octa_v.shape:
        raise ValueError(f"{sample_id}: OCT extents {oct_v.shape} != OCTA extents {octa_v.shape}")
    surfaces = read_vsurf(p["surfaces"])
    surfaces.validate(oct_v.shape[2])
    return Sample(oct_v, octa_v, surfaces, read_mask(p["rv"]), read_mask(p["faz"]), sample_id)


def gen_dataset(template, n, fractions=(0.6, 0.2, 0.2), seed=0, out_dir=None):
    """Generate ``n`` phantoms with per-sample seeds derived from ``seed``.

    Splits are contiguous id ranges (train first, then val, then test). When
    ``out_dir`` is given every sample and ``manifest.tsv`` are written there.
    """
    n_train, n_val, n_test = split_counts(n, fractions)
    ids = [f"S{i:04d}" for i in range(n)]
    tags = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    manifest = Manifest(list(zip(ids, tags)))
    samples = []
    for sid in ids:
        s = gen_phantom(replace(template, seed=sample_seed(seed, sid)))
        s.id = sid
        samples.append(s)
        if out_dir is not None:
            try:
                save_sample(out_dir, s)
            except OSError as exc:
                raise OSError(f"failed writing sample {sid} under {out_dir}: {exc}") from exc
    if out_dir is not None:
        manifest.save(Path(out_dir) / "manifest.tsv")
    return manifest, samples


# ---------------------------------------------------------------- OCTA-500 layout


OCTA500_EXTENTS = {"OCTA_6M": (400, 400, 640), "OCTA_3M": (304, 304, 640)}

DEFAULT_LAYOUT = {
    "oct_dir": "OCT/{id}",
    "octa_dir": "OCTA/{id}",
    "bscan_glob": "*.bmp",
    "rv_label": "GroundTruth/RV/{id}.bmp",
    "faz_label": "GroundTruth/FAZ/{id}.bmp",
    "surfaces": "Layers/{id}.vsurf",
    "extents": "auto",
}


def octa500_subset(sample_id):
    """Subset name for a numeric OCTA-500 subject id."""
    n = int(sample_id)
    if 10001 <= n <= 10300:
        return "OCTA_6M"
    if 10301 <= n <= 10500:
        return "OCTA_3M"
    raise ValueError(f"id {sample_id} is outside the OCTA-500 range 10001-10500")


def read_layout(path):
    """Parse a ``key = value`` layout descriptor over the defaults."""
    layout = dict(DEFAULT_LAYOUT)
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULT_LAYOUT:
            raise ValueError(f"{path}:{n}: unknown layout key {key!r}")
        layout[key] = value
    return layout


def _read_image(path):
    from PIL import Image

    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def _read_bscans(folder, pattern):
    files = sorted(folder.glob(pattern))
    if not files:
        raise FileNotFoundError(f"no B-scans matching {pattern!r} in {folder}")
    # each B-scan image is (H rows, W cols); file order runs along L
    return np.stack([_read_image(f).T for f in files], axis=0)


def load_octa500_sample(root, sample_id, layout=None):
    """Assemble a Sample from an OCTA-500 style directory tree.

    ``layout`` is a dict or a descriptor path; see ``DEFAULT_LAYOUT`` for
    the keys. With ``extents = auto`` the volume size must match the
    subset implied by the id; otherwise ``extents = L W H`` is enforced.
    """
    root = Path(root)
    if layout is None:
        layout = dict(DEFAULT_LAYOUT)
    elif not isinstance(layout, dict):
        layout = read_layout(layout)

    def at(key):
        return root / layout[key].format(id=sample_id)

    oct_v = _read_bscans(at("oct_dir"), layout["bscan_glob"])
    octa_v = _read_bscans(at("octa_dir"), layout["bscan_glob"])
    if layout["extents"] == "auto":
        expected = OCTA500_EXTENTS[octa500_subset(sample_id)]
    else:
        expected = tuple(int(v) for v in layout["extents"].split())
    for name, v in (("OCT", oct_v), ("OCTA", octa_v)):
        if v.shape != expected:
            raise ValueError(f"{sample_id}: {name} volume extents {v.shape}, expected {expected}")
    surfaces = read_vsurf(at("surfaces"))
    surfaces.validate(expected[2])
    if surfaces.shape != expected[:2]:
        raise ValueError(f"{sample_id}: surface extents {surfaces.shape}, expected {expected[:2]}")
    rv = _read_image(at("rv_label")) > 0
    faz = _read_image(at("faz_label")) > 0
    for name, m in (("RV", rv), ("FAZ", faz)):
        if m.shape != expected[:2]:
            raise ValueError(f"{sample_id}: {name} label extents {m.shape}, expected {expected[:2]}")
    return Sample(Volume3D(oct_v, "OCT"), Volume3D(octa_v, "OCTA"), surfaces, rv, faz, str(sample_id))
