"""Permeability raster I/O and the synthetic field generators."""

import numpy as np
import pytest

from msforch.fields import (
    SYNTHETIC_KINDS,
    ScalarCellField,
    forchheimer_coeff,
    gen_synthetic,
    load_raster,
    save_raster,
)


def test_field_length_validation():
    with pytest.raises(ValueError):
        ScalarCellField(2, 2, np.ones(3))
    with pytest.raises(ValueError):
        ScalarCellField(2, 2, np.array([1.0, 1.0, np.nan, 1.0]))


def test_require_positive():
    f = ScalarCellField(2, 1, np.array([1.0, -2.0]))
    with pytest.raises(ValueError):
        f.require_positive("perm")
    ScalarCellField(2, 1, np.array([1.0, 2.0])).require_positive()


def test_load_raster_constant(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("1 1\n1 1\n")
    f = load_raster(p, 2, 2)
    assert np.array_equal(f.values, np.ones(4))


def test_load_raster_count_mismatch(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("1 2 3\n")
    with pytest.raises(ValueError, match="3.*4|4.*3"):
        load_raster(p, 2, 2)


def test_load_raster_rejects_nonpositive_kappa(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("1 -1 2 3\n")
    with pytest.raises(ValueError):
        load_raster(p, 2, 2, positive=True)


def test_load_raster_log10(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("# log-scale raster\n0 1\n2 3\n")
    f = load_raster(p, 2, 2, log10=True)
    assert np.allclose(f.values, [1.0, 10.0, 100.0, 1000.0])


def test_raster_round_trip(tmp_path):
    field = gen_synthetic("blobs", 5, 1e3, 12, 7)
    path = tmp_path / "field.txt"
    save_raster(field, path, comment="round trip")
    back = load_raster(path, 12, 7)
    assert np.array_equal(back.values, field.values)


def test_raster_row_order_bottom_first(tmp_path):
    # y increases with the row index of the file
    p = tmp_path / "k.txt"
    p.write_text("1 2\n3 4\n")
    f = load_raster(p, 2, 2)
    grid = f.as_array2d()
    assert grid[0, 0] == 1.0  # bottom-left
    assert grid[1, 1] == 4.0  # top-right


@pytest.mark.parametrize("kind", SYNTHETIC_KINDS)
def test_synthetic_contrast_span(kind):
    f = gen_synthetic(kind, 7, 1e4, 100, 100)
    assert f.values.min() == pytest.approx(1.0)
    assert f.values.max() / f.values.min() == pytest.approx(1e4, rel=0.01)
    assert np.all(f.values > 0)


def test_synthetic_contrast_one_is_constant():
    f = gen_synthetic("channel", 7, 1.0, 40, 40)
    assert np.ptp(f.values) == 0.0
    assert f.values[0] == 1.0


def test_synthetic_determinism():
    a = gen_synthetic("blobs", 3, 100.0, 60, 60)
    b = gen_synthetic("blobs", 3, 100.0, 60, 60)
    assert np.array_equal(a.values, b.values)


def test_synthetic_seeds_and_kinds_differ():
    a = gen_synthetic("blobs", 3, 100.0, 30, 30)
    b = gen_synthetic("blobs", 4, 100.0, 30, 30)
    c = gen_synthetic("layered", 3, 100.0, 30, 30)
    assert not np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_synthetic_validation():
    with pytest.raises(ValueError):
        gen_synthetic("swirl", 1, 10.0, 8, 8)
    with pytest.raises(ValueError):
        gen_synthetic("blobs", 1, 0.5, 8, 8)


def test_forchheimer_coeff_pointwise():
    kappa = ScalarCellField(2, 1, np.array([1.0, 1e4]))
    beta = forchheimer_coeff(kappa, 100.0)
    assert np.allclose(beta.values, [100.0, 0.01])
    zero = forchheimer_coeff(kappa, 0.0)
    assert np.all(zero.values == 0.0)


def test_forchheimer_coeff_monotone_linear():
    rng = np.random.default_rng(0)
    kappa = ScalarCellField(4, 4, rng.uniform(0.5, 5.0, 16))
    b1 = forchheimer_coeff(kappa, 1.0)
    b2 = forchheimer_coeff(kappa, 2.0)
    assert np.allclose(b2.values, 2.0 * b1.values)  # linear in beta0
    order = np.argsort(kappa.values)
    assert np.all(np.diff(b1.values[order]) <= 0)  # decreasing in kappa
