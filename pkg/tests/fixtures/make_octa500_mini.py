"""Regenerate the 8x8x16 OCTA-500 style fixture next to this file."""

from pathlib import Path

import numpy as np
from PIL import Image

from octaseg.formats import write_vsurf
from octaseg.projection import LayerSurfaces

ROOT = Path(__file__).parent / "octa500_mini"
SID = "10001"
L, W, H = 8, 8, 16


def volume(seed):
    return np.random.default_rng(seed).integers(0, 256, size=(L, W, H), dtype=np.uint8)


def save_bscans(folder, vol):
    folder.mkdir(parents=True, exist_ok=True)
    for i in range(L):
        # B-scan i: rows are depth, columns run along W
        Image.fromarray(np.ascontiguousarray(vol[i].T)).save(folder / f"{i + 1:03d}.bmp")


def main():
    save_bscans(ROOT / "OCT" / SID, volume(1))
    save_bscans(ROOT / "OCTA" / SID, volume(2))
    rv = np.zeros((L, W), np.uint8)
    rv[2, :] = 255
    faz = np.zeros((L, W), np.uint8)
    faz[4:6, 4:6] = 255
    for name, m in (("RV", rv), ("FAZ", faz)):
        (ROOT / "GroundTruth" / name).mkdir(parents=True, exist_ok=True)
        Image.fromarray(m).save(ROOT / "GroundTruth" / name / f"{SID}.bmp")
    s = LayerSurfaces(np.full((L, W), 3), np.full((L, W), 7), np.full((L, W), 12))
    write_vsurf(ROOT / "Layers" / f"{SID}.vsurf", s)
    (ROOT / "layout.txt").write_text("# mini fixture, real subsets use extents = auto\nextents = 8 8 16\n")


if __name__ == "__main__":
    main()
