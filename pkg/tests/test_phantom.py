import hashlib

import numpy as np
import pytest

from powdr.maskgen import check_6_connected
from powdr.phantom import PhantomSpec, generate_phantom, head_region, load_dataset, write_phantoms


def test_four_levels_without_texture():
    ex = generate_phantom(PhantomSpec(texture_amplitude=0.0), 0)
    assert set(np.unique(ex.image.data).tolist()) == {np.float32(v) for v in (0.0, 0.2, 0.5, 0.85)}


def test_deterministic():
    spec = PhantomSpec(seed=4)
    a, b = generate_phantom(spec, 3), generate_phantom(spec, 3)
    np.testing.assert_array_equal(a.image.data, b.image.data)
    np.testing.assert_array_equal(a.pathology_mask.data, b.pathology_mask.data)


@pytest.mark.parametrize("idx", range(10))
def test_lesion_constraints(idx):
    spec = PhantomSpec(lesion_volume_range=(10, 60))
    ex = generate_phantom(spec, idx)
    m = ex.pathology_mask.data
    assert 10 <= m.sum() <= 60
    assert check_6_connected(m)
    assert (ex.image.data[m] == np.float32(0.85)).all()
    assert head_region(ex.image)[m].all()
    assert ex.image.data.min() >= 0 and ex.image.data.max() <= 1


def test_distinct_cases():
    spec = PhantomSpec(dims=(8, 8, 8), lesion_volume_range=(3, 10))
    digests = {hashlib.sha256(generate_phantom(spec, i).image.data.tobytes()).hexdigest() for i in range(100)}
    assert len(digests) == 100


@pytest.mark.parametrize("kw", [dict(dims=(15, 16, 16)), dict(lesion_volume_range=(5, 2)),
                                dict(texture_amplitude=0.6)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)


def test_oversized_lesion_rejected():
    with pytest.raises(ValueError, match="cannot fit"):
        generate_phantom(PhantomSpec(dims=(4, 4, 4), lesion_volume_range=(60, 64)), 0)


def test_write_and_load(tmp_path):
    spec = PhantomSpec(dims=(8, 8, 8), n_cases=3, lesion_volume_range=(4, 12), seed=2)
    man = write_phantoms(spec, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == sorted(["case0.pvol", "case0_mask.pvol", "case1.pvol", "case1_mask.pvol", "case2.pvol",
                            "case2_mask.pvol", "manifest.json", "lesion_volumes.txt"])
    exs, man2 = load_dataset(tmp_path)
    assert man2 == man
    vols = [int(v) for v in (tmp_path / "lesion_volumes.txt").read_text().split()]
    assert vols == [e.pathology_mask.count for e in exs]
    np.testing.assert_array_equal(exs[1].image.data, generate_phantom(spec, 1).image.data)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope")
