import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kernel_renorm.data import (ConvGeometry, Dataset, Hyperparameters, area_average_matrix, coarse_grain,
                                generate_linear_teacher, generate_patch_template, load_dataset, patch_indices,
                                save_dataset, split)


def test_dataset_rejects_mismatched_labels():
    with pytest.raises(ValueError, match="labels"):
        Dataset(np.zeros((3, 2)), np.zeros(2))


def test_dataset_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        Dataset(np.array([[np.nan, 1.0]]), np.zeros(1))


def test_dataset_is_read_only():
    d = Dataset(np.ones((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        d.inputs[0, 0] = 3.0


def test_linear_teacher_labels_follow_sign():
    d = generate_linear_teacher(50, 7, seed=3)
    expected = (d.inputs.sum(axis=1) > 0).astype(float)
    np.testing.assert_array_equal(d.labels, expected)


def test_linear_teacher_is_reproducible():
    a, b = generate_linear_teacher(5, 4, 11), generate_linear_teacher(5, 4, 11)
    np.testing.assert_array_equal(a.inputs, b.inputs)


def test_split_keeps_order():
    d = generate_linear_teacher(10, 3, 0)
    tr, te = split(d, 7)
    assert tr.n_patterns == 7 and te.n_patterns == 3
    np.testing.assert_array_equal(te.inputs, d.inputs[7:])


def test_one_dimensional_patches_are_centred_and_periodic():
    idx = patch_indices(ConvGeometry(8, 3, 2))
    np.testing.assert_array_equal(idx[0], [7, 0, 1])
    np.testing.assert_array_equal(idx[3], [5, 6, 7])


def test_non_overlapping_one_dimensional_patches_tile_the_input():
    idx = patch_indices(ConvGeometry(16, 4, 4))
    np.testing.assert_array_equal(np.sort(idx.ravel()), np.arange(16))


def test_two_dimensional_tiles_are_row_major():
    idx = patch_indices(ConvGeometry(16, 2, 2, 2))
    np.testing.assert_array_equal(idx[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(idx[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(idx[3], [10, 11, 14, 15])


def test_single_patch_covers_everything():
    g = ConvGeometry.single_patch(9)
    assert g.patch_count == 1
    np.testing.assert_array_equal(np.sort(patch_indices(g)[0]), np.arange(9))


@pytest.mark.parametrize("kwargs", [dict(n0=8, mask=4, stride=2), dict(n0=10, mask=3, stride=3, dimensionality=2),
                                    dict(n0=16, mask=3, stride=3, dimensionality=2), dict(n0=4, mask=5, stride=1)])
def test_invalid_geometries_raise(kwargs):
    with pytest.raises(ValueError):
        ConvGeometry(**kwargs)


@given(n0=st.integers(1, 60), stride=st.integers(1, 10), half=st.integers(0, 4))
def test_patch_indices_within_bounds(n0, stride, half):
    mask = min(2 * half + 1, n0 if n0 % 2 else n0 - 1) or 1
    if stride > n0:
        return
    idx = patch_indices(ConvGeometry(n0, mask, stride))
    assert idx.shape == (n0 // stride, mask)
    assert idx.min() >= 0 and idx.max() < n0


def test_hyperparameters_validate():
    with pytest.raises(ValueError):
        Hyperparameters(lambda0=0.0)
    with pytest.raises(ValueError):
        Hyperparameters(beta=-1.0)
    assert Hyperparameters(beta=np.inf).temperature == 0.0


@given(source=st.integers(1, 40), target=st.integers(1, 40))
def test_area_average_rows_are_stochastic(source, target):
    a = area_average_matrix(source, target)
    assert a.shape == (target, source)
    np.testing.assert_allclose(a.sum(axis=1), 1.0)
    assert np.all(a >= 0)


def test_coarse_grain_preserves_constant_images():
    np.testing.assert_allclose(coarse_grain(np.full((32, 32), 0.3), 28), 0.3)


def test_coarse_grain_block_average():
    img = np.arange(16.0).reshape(4, 4)
    np.testing.assert_allclose(coarse_grain(img, 2), [[2.5, 4.5], [10.5, 12.5]])


def test_dataset_round_trip(tmp_path):
    d = generate_linear_teacher(6, 5, 2)
    save_dataset(d, tmp_path / "x.csv", tmp_path / "y.csv")
    e = load_dataset(tmp_path / "x.csv", tmp_path / "y.csv")
    np.testing.assert_array_equal(d.inputs, e.inputs)
    np.testing.assert_array_equal(d.labels, e.labels)


def test_patch_template_places_signal_only_in_informative_patches():
    geo = ConvGeometry(36, 3, 3, 2)
    d = generate_patch_template(400, geo, 1, 3.0, 0.5, seed=0)
    idx = patch_indices(geo)
    s = 2 * d.labels - 1
    inside = np.abs(np.mean(s[:, None] * (d.inputs[:, idx[0]] - 0.5), axis=0))
    outside = np.abs(np.mean(s[:, None] * (d.inputs[:, idx[1:]].reshape(400, -1) - 0.5), axis=0))
    assert inside.mean() > 1.0 and outside.max() < 0.25
    assert set(np.unique(d.labels)) <= {0.0, 1.0}


def test_patch_template_rejects_too_many_patches():
    with pytest.raises(ValueError):
        generate_patch_template(3, ConvGeometry(16, 4, 4), 5, 1.0, 0.0, 0)


def test_empty_test_split_is_allowed():
    tr, te = split(generate_linear_teacher(4, 3, 0), 4)
    assert te.n_patterns == 0 and te.input_dim == 3
