from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octaseg.metrics import confusion, dice
from octaseg.projection import generate_all
from octaseg.synthdata import (
    Manifest,
    PhantomSpec,
    gen_dataset,
    gen_phantom,
    load_octa500_sample,
    load_sample,
    octa500_subset,
    read_layout,
    split_counts,
)

FIXTURE = Path(__file__).parent / "fixtures" / "octa500_mini"
SMALL = PhantomSpec(L=24, W=24, H=20, faz_radius=4.0, ilm_depth=3, opl_depth=8, bm_depth=14)


def same(a, b):
    return (
        np.array_equal(a.oct.data, b.oct.data)
        and np.array_equal(a.octa.data, b.octa.data)
        and np.array_equal(a.rv_gt, b.rv_gt)
        and np.array_equal(a.faz_gt, b.faz_gt)
        and all(np.array_equal(getattr(a.surfaces, k), getattr(b.surfaces, k))
                for k in ("ilm", "opl", "bm"))
    )


def test_phantom_is_deterministic():
    spec = PhantomSpec(seed=7)
    assert same(gen_phantom(spec), gen_phantom(spec))
    assert not same(gen_phantom(spec), gen_phantom(replace(spec, seed=8)))


def test_degenerate_phantom():
    s = gen_phantom(PhantomSpec(seed=3, noise_sigma=0.0, vessel_count=0))
    b5 = generate_all(s.oct, s.octa, s.surfaces)["B5"].data
    assert not s.rv_gt.any()
    assert np.all(b5 == 0.0)
    c = (np.arange(64) - 31.5)
    disk = c[:, None] ** 2 + c[None, :] ** 2 <= 10.0 ** 2
    assert np.array_equal(s.faz_gt, disk)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_b5_recovers_vessels(seed):
    spec = PhantomSpec(seed=seed)
    s = gen_phantom(spec)
    b5 = generate_all(s.oct, s.octa, s.surfaces)["B5"].data
    assert dice(confusion(b5 >= spec.vessel_intensity / 2, s.rv_gt)) >= 0.95


def test_volumes_are_8bit_and_extents_agree():
    s = gen_phantom(PhantomSpec(seed=4))
    assert s.oct.data.dtype == np.uint8 and s.octa.data.dtype == np.uint8
    assert s.oct.shape == s.octa.shape == (64, 64, 32)
    assert s.surfaces.shape == s.rv_gt.shape == s.faz_gt.shape == (64, 64)


@pytest.mark.parametrize("change", [
    {"L": 8}, {"faz_radius": 16.0}, {"vessel_radius_min": 0.5}, {"noise_sigma": -1.0},
    {"opl_depth": 3.0},
])
def test_bad_spec(change):
    with pytest.raises(ValueError):
        gen_phantom(replace(PhantomSpec(), **change))


def test_split_counts():
    assert split_counts(30, (0.6, 0.2, 0.2)) == (18, 6, 6)
    with pytest.raises(ValueError):
        split_counts(30, (0.5, 0.2, 0.2))


def test_dataset_round_trip(tmp_path):
    m, samples = gen_dataset(SMALL, 5, seed=11, out_dir=tmp_path)
    assert Manifest.load(tmp_path / "manifest.tsv").entries == m.entries
    for s in samples:
        assert same(load_sample(tmp_path, s.id), s)
    m2, again = gen_dataset(SMALL, 5, seed=11)
    assert m2.entries == m.entries and all(same(a, b) for a, b in zip(samples, again))


def test_dataset_splits_are_disjoint():
    m, _ = gen_dataset(SMALL, 10, seed=0)
    parts = [set(m.ids(s)) for s in ("train", "val", "test")]
    assert sum(len(p) for p in parts) == 10
    assert set().union(*parts) == set(m.ids())
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])


def test_manifest_rejects_unknown_split(tmp_path):
    (tmp_path / "m.tsv").write_text("S0\ttrain\nS1\tholdout\n")
    with pytest.raises(ValueError, match="holdout"):
        Manifest.load(tmp_path / "m.tsv")


def test_octa500_subsets():
    assert octa500_subset("10001") == "OCTA_6M"
    assert octa500_subset(10300) == "OCTA_6M"
    assert octa500_subset("10400") == "OCTA_3M"
    with pytest.raises(ValueError):
        octa500_subset("10501")


def test_octa500_fixture_loads():
    s = load_octa500_sample(FIXTURE, "10001", FIXTURE / "layout.txt")
    assert s.oct.shape == s.octa.shape == (8, 8, 16)
    assert s.rv_gt.sum() == 8 and s.faz_gt.sum() == 4
    assert not (s.rv_gt & s.faz_gt).any()
    ref = np.random.default_rng(1).integers(0, 256, size=(8, 8, 16), dtype=np.uint8)
    assert np.array_equal(s.oct.data, ref)
    maps = generate_all(s.oct, s.octa, s.surfaces)
    assert maps["B1"].data.shape == (8, 8)


def test_octa500_auto_extents_reject_mini(tmp_path):
    with pytest.raises(ValueError, match="expected"):
        load_octa500_sample(FIXTURE, "10001")


def test_octa500_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError, match="no B-scans"):
        load_octa500_sample(tmp_path, "10001")


def test_layout_errors(tmp_path):
    p = tmp_path / "layout.txt"
    p.write_text("bogus = 1\n")
    with pytest.raises(ValueError, match="unknown layout key"):
        read_layout(p)
    p.write_text("extents 8 8 16\n")
    with pytest.raises(ValueError, match="key = value"):
        read_layout(p)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6))
def test_label_geometry_and_surface_order(seed, vessels):
    s = gen_phantom(replace(SMALL, seed=seed, vessel_count=vessels))
    assert not (s.rv_gt & s.faz_gt).any()
    c = np.arange(24) - 11.5
    assert np.array_equal(s.faz_gt, c[:, None] ** 2 + c[None, :] ** 2 <= 16.0)
    s.surfaces.validate(20)
