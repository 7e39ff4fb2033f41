from tests.conftest import *  # Import all fixtures


@pytest.mark.unit
class TestGridService:
    def test_vertex_grid_geometry(self, grid_service, small_grid):
        assert grid_service.h == pytest.approx(0.5)
        assert grid_service.axis[0] == pytest.approx(-small_grid.half_width)
        assert grid_service.axis[grid_service.origin_index] == pytest.approx(0.0)
        assert grid_service.radius[(grid_service.origin_index,) * 3] == 0.0

    def test_for_grid_is_cached_per_spec(self, small_grid):
        assert GridService.for_grid(small_grid) is GridService.for_grid(GridSpec(n=16, half_width=4.0))

    def test_grid_spec_rejects_bad_resolution(self):
        with pytest.raises(ValueError):
            GridSpec(n=12, half_width=4.0)
        with pytest.raises(ValueError):
            GridSpec(n=4, half_width=4.0)
        with pytest.raises(ValueError):
            GridSpec(n=16, half_width=0.0)

    def test_integrate_constant_gives_box_volume(self, grid_service, small_grid):
        ones = np.ones((16, 16, 16))
        assert grid_service.integrate(ones) == pytest.approx((2 * small_grid.half_width) ** 3)

    def test_check_shape_rejects_foreign_fields(self, grid_service):
        with pytest.raises(ValueError) as excinfo:
            grid_service.check_shape(np.zeros((3, 8, 8, 8)))
        assert "does not match grid" in str(excinfo.value)

    def test_magnitude_of_vector_and_scalar(self):
        v = np.zeros((3, 2, 2, 2))
        v[0], v[1] = 3.0, 4.0
        assert np.allclose(GridService.magnitude(v), 5.0)
        assert np.allclose(GridService.magnitude(-np.ones((2, 2, 2))), 1.0)

    def test_ball_mask_excludes_inner_radius(self, grid_service):
        mask = grid_service.ball_mask(2.0, 1.0)
        assert np.all(grid_service.radius[mask] > 1.0)
        assert np.all(grid_service.radius[mask] <= 2.0)
        assert not mask[(grid_service.origin_index,) * 3]

    def test_sample_at_nodes_is_exact(self, grid_service):
        f = grid_service.coords[0] + 2.0 * grid_service.coords[2]
        nodes = np.moveaxis(grid_service.coords[:, 3:6, 4:7, 5:8], 0, -1)
        assert np.allclose(grid_service.sample(f, nodes), f[3:6, 4:7, 5:8], atol=1e-12)

    def test_sample_vector_field_keeps_component_axis(self, grid_service):
        v = np.stack([grid_service.coords[0]] * 3)
        points = np.zeros((4, 3))
        assert grid_service.sample(v, points).shape == (3, 4)

    def test_dilate_by_two_hits_lattice_nodes(self, grid_service):
        f = grid_service.radius ** 2
        values, inside = grid_service.dilate(f, 2.0)
        assert np.allclose(values[inside], 4.0 * f[inside], atol=1e-10)
        assert not inside[0, 0, 0]

    def test_offsets_use_minimum_image(self, grid_service, small_grid):
        offsets = grid_service.offsets((small_grid.half_width - 0.5, 0.0, 0.0))
        assert np.all(np.abs(offsets) <= small_grid.half_width + 1e-12)
