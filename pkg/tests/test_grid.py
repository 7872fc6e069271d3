import numpy as np
import pytest
from hypothesis import given, strategies as st

from gpwarp.grid import (SNAP_TOL, Field, FormatError, Grid, OutOfHullError, bilinear_weights, field_bilinear_sample,
                         field_new_const, field_to_image, quantize, read_pnm, tensor_read, tensor_write)
from gpwarp.streams import generator, hash_keys, hashed_normals


def test_pixel_centres_and_order():
    g = Grid(4, 2)
    c = g.coords()
    assert c.shape == (2, 4, 2)
    assert np.allclose(c[0, 0], [0.125, 0.25])
    assert np.allclose(c[1, 3], [0.875, 0.75])
    # row-major: second point is one column to the right
    assert np.allclose(g.points()[1], [0.375, 0.25])


def test_to_pixel_inverts_coords():
    g = Grid(7, 5)
    q = g.to_pixel(g.coords())
    jj, ii = np.meshgrid(np.arange(7), np.arange(5))
    assert np.array_equal(q[..., 0], jj) and np.array_equal(q[..., 1], ii)


def test_hull_boundaries():
    g = Grid(8, 8)
    assert g.in_hull(np.array([0.5 / 8, 7.5 / 8]))
    assert not g.in_hull(np.array([0.5 / 8 - 1e-6, 0.5]))


def test_grid_rejects_empty():
    with pytest.raises(ValueError):
        Grid(0, 3)


def test_field_read_only_and_finite():
    f = field_new_const(Grid(3, 2), 1, 2.5)
    assert f.values.shape == (2, 3, 1)
    with pytest.raises(ValueError):
        f.values[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        Field(Grid(2, 2), np.array([[0.0, np.nan], [1.0, 2.0]]))
    with pytest.raises(ValueError):
        field_new_const(Grid(2, 2), 1, np.inf)


def test_flat_round_trip(rng):
    g = Grid(5, 3)
    u = rng.standard_normal(15)
    assert np.array_equal(Field.from_flat(g, u).flat(), u)


def test_bilinear_weights_partition_of_unity(rng):
    g = Grid(9, 6)
    lo, hi = g.coords()[0, 0], g.coords()[-1, -1]
    pts = lo + rng.random((50, 2)) * (hi - lo)
    _, _, w = bilinear_weights(g, pts)
    assert np.allclose(w.sum(-1), 1.0)
    assert np.all(w >= -1e-15)


@given(a=st.floats(-3, 3), b=st.floats(-3, 3), c=st.floats(-3, 3),
       x=st.floats(0, 1), y=st.floats(0, 1))
def test_bilinear_reproduces_affine_functions(a, b, c, x, y):
    g = Grid(6, 5)
    p = g.coords()
    f = Field(g, a * p[..., 0] + b * p[..., 1] + c)
    lo, hi = p[0, 0], p[-1, -1]
    q = lo + np.array([x, y]) * (hi - lo)
    # queries within the snap tolerance of a centre move onto it
    assert field_bilinear_sample(f, q)[0] == pytest.approx(a * q[0] + b * q[1] + c, abs=1e-12 + 6 * SNAP_TOL)


def test_bilinear_at_pixel_centres_is_exact(rng):
    g = Grid(6, 4)
    f = Field(g, rng.standard_normal(g.shape))
    assert np.array_equal(field_bilinear_sample(f, g.coords())[..., 0], f.values[..., 0])


def test_bilinear_outside_hull_raises():
    g = Grid(4, 4)
    with pytest.raises(OutOfHullError):
        field_bilinear_sample(field_new_const(g, 1, 0.0), np.array([[0.01, 0.5]]))


def test_snapping_near_lattice():
    g = Grid(10, 10)
    # x = 0.35 lands at pixel 3.0 up to rounding; snapped to the exact index
    q = g.to_pixel(np.array([0.35 + 1e-12, 0.5]))
    assert q[0] == 3.0 and q[1] == 4.5


def test_tensor_round_trip(tmp_path, rng):
    f = Field(Grid(5, 4), rng.standard_normal((4, 5, 2)))
    p = tmp_path / "x.wdtn"
    tensor_write(p, f)
    assert p.stat().st_size == 20 + 4 * 5 * 2 * 8
    assert tensor_read(p) == f


def test_tensor_bad_files(tmp_path):
    p = tmp_path / "bad.wdtn"
    p.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(FormatError):
        tensor_read(p)
    f = field_new_const(Grid(2, 2), 1, 1.0)
    tensor_write(p, f)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError):
        tensor_read(p)
    p.write_bytes(b"WD")
    with pytest.raises(FormatError):
        tensor_read(p)


def test_quantize_rule():
    q = quantize(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]), -1.0, 1.0)
    # (0 + 1) / 2 * 255 = 127.5 rounds half up
    assert q.tolist() == [0, 0, 128, 255, 255]
    with pytest.raises(ValueError):
        quantize(np.zeros(2), 1.0, 1.0)


def test_pgm_and_ppm_round_trip(tmp_path, rng):
    g = Grid(7, 3)
    f = Field(g, rng.uniform(-1, 1, g.shape))
    field_to_image(f, -1, 1, tmp_path / "a.pgm")
    img = read_pnm(tmp_path / "a.pgm")
    assert img.shape == (3, 7)
    assert np.array_equal(img, quantize(f.values[..., 0], -1, 1))
    f3 = Field(g, rng.uniform(-1, 1, g.shape + (3,)))
    field_to_image(f3, -1, 1, tmp_path / "a.ppm")
    assert read_pnm(tmp_path / "a.ppm").shape == (3, 7, 3)
    with pytest.raises(ValueError):
        field_to_image(Field(g, np.zeros(g.shape + (2,))), -1, 1, tmp_path / "b.pgm")


def test_streams_reproducible_and_independent():
    a = generator(3, 1).standard_normal(5)
    assert np.array_equal(a, generator(3, 1).standard_normal(5))
    assert not np.allclose(a, generator(3, 2).standard_normal(5))
    assert not np.allclose(a, generator(4, 1).standard_normal(5))


def test_hashed_normals_order_free_and_gaussian():
    keys = np.arange(200000)
    z = hashed_normals(7, keys)
    assert np.array_equal(z[[5, 17]], hashed_normals(7, np.array([5, 17])))
    assert abs(z.mean()) < 0.01 and abs(z.var() - 1) < 0.01
    assert hash_keys(1, 2) != hash_keys(2, 1)
