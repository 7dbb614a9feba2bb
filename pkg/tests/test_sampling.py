import numpy as np
import pytest
from scipy.spatial.distance import pdist

from core.errors import DataError
from core.sampling import (POISSON, REGULAR, SamplingPattern, apply_pattern, gather_lr_volume, poisson_pattern,
                           regular_pattern, trilinear_upsample, zero_filled)
from core.volume import ComplexVolume


def _index_volume(dims):
    return ComplexVolume(np.arange(int(np.prod(dims)), dtype=float).reshape(dims))


@pytest.mark.parametrize("stride, offset, per_axis", [(2, (0, 0, 0), 20), (4, (0, 0, 0), 10), (3, (1, 1, 1), 13)])
def test_regular_pattern_counts(stride, offset, per_axis):
    p = regular_pattern((40, 40, 40), stride, offset)
    assert p.kind == REGULAR
    assert p.count == per_axis ** 3
    assert p.params["lr_dims"] == [per_axis] * 3


def test_regular_stride_three_from_offset_one_stays_inside():
    p = regular_pattern((40, 40, 40), 3, (1, 1, 1))
    coords = np.stack(np.unravel_index(p.indices, p.hr_dims), axis=-1)
    assert coords.min() == 1
    assert coords.max() == 37


def test_regular_pattern_rejects_bad_arguments():
    with pytest.raises(DataError):
        regular_pattern((4, 4, 4), 5)
    with pytest.raises(DataError):
        regular_pattern((8, 8, 8), 2, (2, 0, 0))
    with pytest.raises(DataError):
        regular_pattern((8, 8, 8), 0)


def test_apply_full_pattern_flattens():
    v = _index_volume((3, 4, 5))
    p = regular_pattern((3, 4, 5), 1)
    np.testing.assert_array_equal(apply_pattern(v, p), v.data.reshape(-1))


def test_apply_stride_two_hits_even_coordinates():
    dims = (4, 6, 8)
    p = regular_pattern(dims, 2)
    values = apply_pattern(_index_volume(dims), p).real.astype(int)
    z, y, x = np.unravel_index(values, dims)
    assert np.all(z % 2 == 0) and np.all(y % 2 == 0) and np.all(x % 2 == 0)
    assert values.size == 2 * 3 * 4


def test_apply_pattern_dims_mismatch():
    with pytest.raises(DataError):
        apply_pattern(_index_volume((4, 4, 4)), regular_pattern((8, 8, 8), 2))


def test_gather_lr_volume_shapes():
    v = _index_volume((40, 40, 40))
    lr = gather_lr_volume(v, regular_pattern((40, 40, 40), 2))
    assert lr.dims == (20, 20, 20)
    assert lr.data[1, 2, 3] == np.ravel_multi_index((2, 4, 6), (40, 40, 40))
    same = gather_lr_volume(v, regular_pattern((40, 40, 40), 1))
    np.testing.assert_array_equal(same.data, v.data)


def test_gather_then_scatter_hits_pattern_indices():
    dims = (9, 9, 9)
    p = regular_pattern(dims, 3, (1, 1, 1))
    lr = gather_lr_volume(_index_volume(dims), p)
    back = zero_filled(lr.data.reshape(-1), p)
    np.testing.assert_array_equal(np.flatnonzero(back.data.reshape(-1)), p.indices)


def test_gather_needs_regular_pattern():
    p = poisson_pattern((6, 6, 6), 20, seed=0)
    with pytest.raises(DataError):
        gather_lr_volume(_index_volume((6, 6, 6)), p)


def test_poisson_full_count_is_every_voxel():
    p = poisson_pattern((5, 5, 5), 125, seed=1)
    assert p.count == 125
    assert p.params["radius"] <= 1.0


def test_poisson_is_deterministic_per_seed():
    a = poisson_pattern((10, 10, 10), 100, seed=7)
    b = poisson_pattern((10, 10, 10), 100, seed=7)
    np.testing.assert_array_equal(a.indices, b.indices)
    c = poisson_pattern((10, 10, 10), 100, seed=8)
    assert not np.array_equal(a.indices, c.indices)


def test_poisson_exact_count_and_min_distance():
    dims = (16, 16, 16)
    p = poisson_pattern(dims, 512, seed=3, include_corners=False)
    assert p.kind == POISSON
    assert p.count == 512
    coords = np.stack(np.unravel_index(p.indices, dims), axis=-1).astype(float)
    assert pdist(coords).min() >= p.params["radius"] - 1e-9
    assert p.params["radius"] > 1.0


def test_poisson_includes_corners():
    dims = (12, 12, 12)
    p = poisson_pattern(dims, 200, seed=0)
    assert p.count == 200
    for corner in np.stack(np.meshgrid(*[[0, d - 1] for d in dims], indexing="ij"), -1).reshape(-1, 3):
        assert np.ravel_multi_index(corner, dims) in set(p.indices.tolist())
    coords = np.stack(np.unravel_index(p.indices, dims), axis=-1).astype(float)
    # only the swapped-in corners may violate the radius
    adjusted = set(p.params["adjusted"])
    keep = [i for i, n in enumerate(p.indices) if n not in adjusted]
    assert pdist(coords[keep]).min() >= p.params["radius"] - 1e-9
    assert len(adjusted) <= max(8, int(0.02 * p.count))


def test_poisson_infeasible_count():
    with pytest.raises(DataError):
        poisson_pattern((4, 4, 4), 65, seed=0)
    with pytest.raises(DataError):
        poisson_pattern((4, 4, 4), 0, seed=0)


@pytest.mark.slow
def test_poisson_full_size_geometry():
    dims = (37, 37, 37)
    p = poisson_pattern(dims, 8000, seed=0, include_corners=False)
    assert p.count == 8000
    coords = np.stack(np.unravel_index(p.indices, dims), axis=-1).astype(float)
    assert pdist(coords).min() >= p.params["radius"] - 1e-9


def test_pattern_json_roundtrip(tmp_path):
    p = poisson_pattern((8, 8, 8), 40, seed=2)
    p.save(tmp_path / "with.json")
    p.save(tmp_path / "without.json", include_indices=False)
    np.testing.assert_array_equal(SamplingPattern.load(tmp_path / "with.json").indices, p.indices)
    np.testing.assert_array_equal(SamplingPattern.load(tmp_path / "without.json").indices, p.indices)
    r = regular_pattern((9, 9, 9), 3, (1, 1, 1))
    r.save(tmp_path / "reg.json", include_indices=False)
    np.testing.assert_array_equal(SamplingPattern.load(tmp_path / "reg.json").indices, r.indices)


def test_pattern_rejects_unsorted_indices():
    with pytest.raises(DataError):
        SamplingPattern((2, 2, 2), [3, 1], POISSON)


def test_apply_pattern_is_index_set_semantics():
    dims = (6, 6, 6)
    p = poisson_pattern(dims, 30, seed=4)
    shuffled = np.random.default_rng(0).permutation(p.indices)
    restored = SamplingPattern(dims, np.sort(shuffled), POISSON, p.params)
    v = _index_volume(dims)
    np.testing.assert_array_equal(apply_pattern(v, p), apply_pattern(v, restored))


def test_trilinear_identity_and_constant():
    rng = np.random.default_rng(0)
    v = ComplexVolume(rng.standard_normal((3, 4, 5)) + 1j * rng.standard_normal((3, 4, 5)))
    np.testing.assert_allclose(trilinear_upsample(v, v.dims).data, v.data, atol=1e-12)
    const = ComplexVolume(np.full((3, 3, 3), 2.0 - 1.0j))
    np.testing.assert_allclose(trilinear_upsample(const, (7, 8, 9)).data, 2.0 - 1.0j, atol=1e-12)


def test_trilinear_midpoint_is_corner_mean():
    rng = np.random.default_rng(1)
    corners = rng.standard_normal((2, 2, 2)) + 1j * rng.standard_normal((2, 2, 2))
    up = trilinear_upsample(ComplexVolume(corners), (3, 3, 3))
    np.testing.assert_allclose(up.data[1, 1, 1], corners.mean(), atol=1e-12)


def test_trilinear_with_stride_reproduces_samples():
    rng = np.random.default_rng(2)
    lr = ComplexVolume(rng.standard_normal((4, 4, 4)) + 0j)
    up = trilinear_upsample(lr, (12, 12, 12), stride=3, offset=(1, 1, 1))
    np.testing.assert_allclose(up.data[1::3, 1::3, 1::3], lr.data, atol=1e-12)
