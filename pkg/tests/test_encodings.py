"""Hash-grid and spherical-harmonics encoding tests."""

import numpy as np
import pytest

from neuralmesh import autodiff as ad
from neuralmesh.encodings import SH_DIM, HashGrid, sh_encode
from helpers import check_gradients


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.get_tape().clear()
    yield
    ad.get_tape().clear()


def small_grid(**kw):
    defaults = dict(levels=4, coarsest=4, finest=32, table_size=512, features=2,
                    dtype=np.float64, rng=np.random.default_rng(3))
    defaults.update(kw)
    return HashGrid(**defaults)


class TestHashGrid:
    def test_default_level_resolutions(self):
        grid = HashGrid(rng=np.random.default_rng(0))
        res = grid.resolutions
        assert res[0] == 16 and res[-1] == 2048
        assert list(res[:3]) == [16, 22, 30]
        assert (np.diff(res) > 0).all()
        assert grid.output_dim == 32

    def test_zero_tables_give_zero_output(self):
        grid = small_grid()
        grid.tables.data[:] = 0.0
        pts = ad.Tensor(np.random.default_rng(0).uniform(-1, 1, (5, 3)))
        out = grid.encode(pts)
        np.testing.assert_array_equal(out.data, 0.0)
        assert out.shape == (5, grid.output_dim)

    def test_determinism(self):
        grid = small_grid()
        pts = ad.Tensor(np.array([[0.3, -0.2, 0.9]]))
        a = grid.encode(pts).data
        b = grid.encode(pts).data
        assert np.array_equal(a, b)

    def test_continuity_in_position(self):
        grid = small_grid()
        rng = np.random.default_rng(7)
        base = rng.uniform(-1.0, 1.0, (20, 3))
        eps = 1e-6
        a = grid.encode(ad.Tensor(base)).data
        b = grid.encode(ad.Tensor(base + eps)).data
        # piecewise trilinear: perturbation of eps moves output by O(eps)
        lipschitz = np.abs(a - b).max() / eps
        assert lipschitz < 1e3

    def test_clamping_outside_box(self):
        grid = small_grid()
        inside = grid.encode(ad.Tensor(np.array([[1.5, 0.0, 0.0]]))).data
        outside = grid.encode(ad.Tensor(np.array([[2.5, 0.0, 0.0]]))).data
        np.testing.assert_allclose(inside, outside, atol=1e-12)

    def test_gradient_wrt_tables(self):
        grid = small_grid(levels=3, table_size=128)
        pts = ad.Tensor(np.random.default_rng(1).uniform(-1, 1, (6, 3)))
        check_gradients(
            lambda: ad.tsum(ad.square(grid.encode(pts))),
            [grid.tables],
            sample=60,
        )

    def test_gradient_wrt_position(self):
        grid = small_grid(levels=3, table_size=128)
        grid.tables.data[:] = np.random.default_rng(2).normal(size=grid.tables.shape)
        # keep probes strictly inside one cell so FD never crosses a lattice plane
        pts = ad.Tensor(
            np.array([[0.11, -0.23, 0.52], [-0.71, 0.33, -0.14]]), requires_grad=True
        )
        check_gradients(lambda: ad.tsum(ad.square(grid.encode(pts))), [pts], h=1e-6)

    def test_increasing_resolutions_required(self):
        with pytest.raises(ValueError):
            HashGrid(levels=40, coarsest=16, finest=17)


class TestSphericalHarmonics:
    def test_output_dim(self):
        v = ad.Tensor(np.array([[0.0, 0.0, 1.0]]))
        assert sh_encode(v).shape == (1, SH_DIM)

    def test_constant_band(self):
        rng = np.random.default_rng(0)
        dirs = rng.normal(size=(10, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        out = sh_encode(ad.Tensor(dirs)).data
        np.testing.assert_allclose(out[:, 0], 0.282095, atol=1e-6)

    def test_z_axis_values(self):
        out = sh_encode(ad.Tensor(np.array([[0.0, 0.0, 1.0]]))).data[0]
        np.testing.assert_allclose(out[1], 0.0, atol=1e-12)  # y term
        np.testing.assert_allclose(out[2], 0.488603, atol=1e-6)  # z term
        np.testing.assert_allclose(out[3], 0.0, atol=1e-12)  # x term
        np.testing.assert_allclose(out[6], 0.630783, atol=1e-6)  # 3z^2 - 1 term
        np.testing.assert_allclose(out[12], 0.746353, atol=1e-6)  # z(5z^2-3) term

    def test_band_parity(self):
        rng = np.random.default_rng(5)
        dirs = rng.normal(size=(100, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        plus = sh_encode(ad.Tensor(dirs)).data
        minus = sh_encode(ad.Tensor(-dirs)).data
        odd = list(range(1, 4)) + list(range(9, 16))
        even = [0] + list(range(4, 9))
        np.testing.assert_allclose(minus[:, odd], -plus[:, odd], atol=1e-10)
        np.testing.assert_allclose(minus[:, even], plus[:, even], atol=1e-10)

    def test_non_unit_normalized_and_counted(self):
        from neuralmesh import diagnostics

        diagnostics.reset()
        out = sh_encode(ad.Tensor(np.array([[0.0, 0.0, 3.0]]))).data[0]
        np.testing.assert_allclose(out[2], 0.488603, atol=1e-6)
        assert diagnostics.get("sh_non_unit_inputs") == 1

    def test_gradient_wrt_direction(self):
        rng = np.random.default_rng(9)
        dirs = rng.normal(size=(4, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        t = ad.Tensor(dirs, requires_grad=True)
        check_gradients(lambda: ad.tsum(ad.square(sh_encode(t))), [t])
