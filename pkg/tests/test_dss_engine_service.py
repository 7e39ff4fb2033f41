from src.models import DSSSpec
from tests.conftest import *  # Import all fixtures


@pytest.fixture
def zero_field():
    return np.zeros((3, 16, 16, 16))


@pytest.mark.unit
class TestDSSEngineService:
    def test_zero_data_converges_immediately(self, dss_engine_service, small_grid, zero_field, test_data):
        trajectory, trace = dss_engine_service.fixed_point_iterate(
            zero_field, None, 0.5, 2.0, test_data["lam"], 0.5, 10, 1e-8, small_grid, test_data["T"],
            test_data["dt"])
        assert trace.converged
        assert [item.k for item in trace.iterates] == [0]
        assert trace.iterates[0].residual == 0.0
        assert trace.ns_residual == 0.0
        assert trace.within_ball
        assert trace.relaxation == 0.5
        assert all(not state.u.any() for state in trajectory.states)

    def test_fixed_point_argument_validation(self, dss_engine_service, small_grid, zero_field, test_data):
        with pytest.raises(ValueError):
            dss_engine_service.fixed_point_iterate(zero_field, None, 0.5, 2.0, 2.0, 0.0, 5, 1e-8, small_grid,
                                                   test_data["T"], test_data["dt"])
        with pytest.raises(ValueError):
            dss_engine_service.fixed_point_iterate(zero_field, None, 0.5, 1.2, 2.0, 0.5, 5, 1e-8, small_grid,
                                                   test_data["T"], test_data["dt"])

    def test_small_data_contracts(self, dss_engine_service, field_service, small_grid, test_data):
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"], amplitude=0.1)
        _, trace = dss_engine_service.fixed_point_iterate(
            u0, None, 0.5, 2.0, test_data["lam"], 1.0, 4, 0.0, small_grid, test_data["T"], test_data["dt"])
        residuals = [item.residual for item in trace.iterates]
        assert len(residuals) == 4
        assert residuals[-1] < residuals[0]
        assert not trace.converged
        assert trace.ns_residual is None

    def test_apriori_ball_radius(self, dss_engine_service):
        assert dss_engine_service.apriori_ball(0.0, 0.0, 2.0, 1.0, c_gamma=1.0, lam=2.0, T0=1.0) == pytest.approx(1.0)
        assert dss_engine_service.apriori_ball(0.0, 0.0, 2.0, 4.0, c_gamma=1.0, lam=2.0, T0=1.0) == pytest.approx(
            4.0 ** (1.0 / 3.0))
        with pytest.raises(ValueError):
            dss_engine_service.apriori_ball(0.0, 0.0, 1.2, 1.0)

    def test_linear_map_is_affine_in_data(self, dss_engine_service, field_service, small_grid, test_data):
        b = field_service.random_solenoidal(small_grid, test_data["seed"], amplitude=0.5)
        u1 = field_service.taylor_green(small_grid)
        u2 = field_service.gaussian_vortex(small_grid)
        args = (None, 0.5, test_data["T"], 2.0, test_data["lam"], small_grid, test_data["dt"])
        combined = dss_engine_service.apply_L_eps(b, 2.0 * u1 + u2, *args)
        first = dss_engine_service.apply_L_eps(b, u1, *args)
        second = dss_engine_service.apply_L_eps(b, u2, *args)
        for c, x, y in zip(combined.states, first.states, second.states):
            assert np.allclose(c.u, 2.0 * x.u + y.u, atol=1e-10)

    def test_linear_map_rejects_bad_lambda(self, dss_engine_service, small_grid, zero_field, test_data):
        with pytest.raises(ValueError):
            dss_engine_service.apply_L_eps(None, zero_field, None, 0.5, test_data["T"], 2.0, 1.0, small_grid,
                                           test_data["dt"])

    def test_heat_runs_commute_with_rescaling(self, dss_engine_service, field_service, small_grid, test_data):
        lam = test_data["lam"]
        u0 = field_service.gaussian_vortex(small_grid)
        original = dss_engine_service.heat_evolution(u0, None, test_data["T"], test_data["dt"], small_grid)
        u0_scaled, scaled_grid, _, pulled = dss_engine_service.rescale_problem(u0, None, lam, small_grid, original)
        direct = dss_engine_service.heat_evolution(u0_scaled, None, test_data["T"] / lam ** 2,
                                                   test_data["dt"] / lam ** 2, scaled_grid)
        assert pulled.dt == pytest.approx(direct.dt)
        assert len(pulled) == len(direct)
        for a, b in zip(pulled.states, direct.states):
            assert np.allclose(a.u, b.u, atol=1e-10)

    def test_rescale_problem_resamples_forcing(self, dss_engine_service, field_service, small_grid, zero_field):
        F = field_service.gaussian_forcing_profile(small_grid)
        ss = ForcingSpec(kind=ForcingKind.SELF_SIMILAR, amplitude=1.0, profile=F)
        _, scaled_grid, scaled, _ = dss_engine_service.rescale_problem(zero_field, ss, 2.0, small_grid)
        nodes = np.moveaxis(GridService.for_grid(scaled_grid).coords, 0, -1)
        assert np.allclose(scaled.profile, GridService.for_grid(small_grid).sample(F, nodes))
        explicit = ForcingSpec(kind=ForcingKind.EXPLICIT, amplitude=1.0, profile=F)
        _, _, scaled, _ = dss_engine_service.rescale_problem(zero_field, explicit, 2.0, small_grid)
        assert np.allclose(scaled.profile, 4.0 * F, atol=1e-12)

    def test_xnorm_of_zero_flow_is_flagged(self, dss_engine_service, small_grid, zero_field, test_data):
        trajectory = dss_engine_service.heat_evolution(zero_field, None, test_data["T"], test_data["dt"], small_grid)
        report = dss_engine_service.xnorm(trajectory, test_data["lam"], 2.0)
        assert report.full_norm == 0.0
        assert not report.equivalence_valid
        assert math.isnan(report.ratio)

    def test_xnorm_of_heat_flow(self, dss_engine_service, field_service, small_grid, test_data):
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"])
        trajectory = dss_engine_service.heat_evolution(u0, None, test_data["T"], test_data["dt"], small_grid)
        report = dss_engine_service.xnorm(trajectory, test_data["lam"], 2.0)
        assert report.equivalence_valid
        assert report.full_norm > 0 and report.cell_norm > 0
        assert report.reconstructed_norm > 0
        assert all(b > a for a, b in zip(report.series_partial_sums, report.series_partial_sums[1:]))
        assert not dss_engine_service.xnorm(trajectory, test_data["lam"], 1.2).equivalence_valid

    def test_cell_norm_of_steady_field(self, dss_engine_service, grid_service, small_grid):
        u = np.ones((16, 16, 16))
        cell = grid_service.radius < 0.5
        value = dss_engine_service.cell_norm([u] * 5, 0.01, 2.0, 0.04, small_grid)
        assert value == pytest.approx((0.01 * grid_service.integrate(cell.astype(float))) ** (1 / 3))

    def test_symmetrize_keeps_divergence_free(self, dss_engine_service, field_service, grid_service,
                                              spectral_service, small_grid, test_data):
        u0 = field_service.gaussian_vortex(small_grid)
        trajectory = dss_engine_service.heat_evolution(u0, None, test_data["T"], test_data["dt"], small_grid)
        symmetric = dss_engine_service.symmetrize(trajectory, test_data["lam"])
        assert len(symmetric) == len(trajectory)
        for state in symmetric.states[1:]:
            assert grid_service.l2_norm(spectral_service.divergence(state.u)) / grid_service.l2_norm(state.u) < 1e-10

    def test_ns_residual_of_navier_stokes_run(self, dss_engine_service, dynamics_service, field_service, grid32,
                                              test_data):
        u0 = field_service.random_solenoidal(grid32, test_data["seed"], amplitude=0.01, k_max=2.0)
        cfg = SolverConfig(dt=test_data["dt"], T=test_data["T"], eps=0.5, mollifier_time_dependent=True)
        trajectory = dynamics_service.run_ns(u0, cfg, grid32)
        clean = dss_engine_service.ns_residual(trajectory, 0.5, None, test_data["lam"])
        assert clean < 1e-2

        states = [trajectory.states[0]] + [s.model_copy(update={"u": 1.01 * s.u}) for s in trajectory.states[1:]]
        corrupted = trajectory.model_copy(update={"states": states})
        assert dss_engine_service.ns_residual(corrupted, 0.5, None, test_data["lam"]) > max(0.1, 10 * clean)

    def test_small_dss_data_converges(self, dss_engine_service, field_service, weighted_space_service, grid32,
                                      test_data):
        lam = test_data["lam"]
        u0 = field_service.make_dss_field(DSSSpec(lam=lam, profile_seed=test_data["seed"]), grid32)
        u0 = u0 * (0.01 / weighted_space_service.weighted_norm(u0, 2, WeightSpec(delta=2.0), grid32))
        _, trace = dss_engine_service.fixed_point_iterate(
            u0, None, 0.5, 2.0, lam, 1.0, 20, 1e-8, grid32, test_data["T"], test_data["dt"])
        assert trace.converged
        assert len(trace.iterates) <= 20
        assert trace.iterates[-1].residual < 1e-8
        assert trace.within_ball
        assert trace.ns_residual < 0.05

    def test_xnorm_reports_series_bounds(self, dss_engine_service, field_service, small_grid, test_data):
        lam = test_data["lam"]
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"])
        trajectory = dss_engine_service.heat_evolution(u0, None, test_data["T"], test_data["dt"], small_grid)
        report = dss_engine_service.xnorm(trajectory, lam, 2.0)
        assert report.ratio_lower == pytest.approx((lam ** 2 / 8.0) ** (1.0 / 3.0))
        # one shell past the unit ball fits in a box of half-width 4
        assert report.ratio_upper == pytest.approx((lam ** 2 * (1.0 + lam ** 2 / 8.0)) ** (1.0 / 3.0))
        assert report.within_series_bounds == (report.ratio_lower <= report.ratio <= report.ratio_upper)

    def test_ratio_bounds_diverge_below_four_thirds(self, dss_engine_service, test_data):
        lam = test_data["lam"]
        converging = [dss_engine_service.ratio_bounds(lam, 2.0, shells)[1] for shells in (10, 20, 40)]
        diverging = [dss_engine_service.ratio_bounds(lam, 1.3, shells)[1] for shells in (10, 20, 40)]
        assert converging[2] == pytest.approx(converging[1], rel=1e-3)
        assert diverging[2] ** 3 > 2.5 * diverging[1] ** 3
        assert diverging[1] ** 3 > 2.0 * diverging[0] ** 3
