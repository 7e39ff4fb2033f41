from src.models import DSSSpec
from src.services.dynamics_service import CFLViolationError
from tests.conftest import *  # Import all fixtures


@pytest.fixture
def shear_mode(grid_service, small_grid):
    """u = (0, sin(kappa x), 0): its advection term vanishes identically."""
    kappa = np.pi / small_grid.half_width
    u = np.zeros((3, 16, 16, 16))
    u[1] = np.sin(kappa * grid_service.coords[0])
    return u, kappa


@pytest.mark.unit
class TestDynamicsService:
    def test_zero_data_stays_zero(self, dynamics_service, small_grid, solver_config):
        trajectory = dynamics_service.run_ns(np.zeros((3, 16, 16, 16)), solver_config, small_grid)
        assert len(trajectory) == solver_config.steps + 1
        assert all(not state.u.any() for state in trajectory.states)

    def test_single_mode_decays_exactly(self, dynamics_service, small_grid, shear_mode):
        u0, kappa = shear_mode
        cfg = SolverConfig(dt=0.01, T=0.1, eps=0.2)
        trajectory = dynamics_service.run_ns(u0, cfg, small_grid)
        final = trajectory.states[-1]
        assert final.t == pytest.approx(0.1)
        assert np.allclose(final.u, np.exp(-kappa ** 2 * final.t) * u0, atol=1e-10)

    def test_mean_flow_is_conserved(self, dynamics_service, field_service, small_grid, solver_config, test_data):
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"])
        u0[0] += 0.1
        trajectory = dynamics_service.run_ns(u0, solver_config, small_grid)
        assert np.allclose(np.mean(trajectory.states[-1].u, axis=(1, 2, 3)), [0.1, 0.0, 0.0], atol=1e-12)

    def test_states_stay_divergence_free(self, dynamics_service, field_service, grid_service, spectral_service,
                                         small_grid, test_data):
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"])
        cfg = SolverConfig(dt=0.01, T=0.04, eps=0.5)
        for state in dynamics_service.run_ns(u0, cfg, small_grid).states:
            assert grid_service.l2_norm(spectral_service.divergence(state.u)) / grid_service.l2_norm(state.u) < 1e-10

    def test_runs_are_deterministic(self, dynamics_service, field_service, small_grid, solver_config, test_data):
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"])
        first = dynamics_service.run_ns(u0, solver_config, small_grid)
        second = dynamics_service.run_ns(u0, solver_config, small_grid)
        assert all(np.array_equal(a.u, b.u) for a, b in zip(first.states, second.states))

    def test_advection_replay_reproduces_navier_stokes(self, dynamics_service, field_service, small_grid,
                                                       solver_config, test_data):
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"])
        ns = dynamics_service.run_ns(u0, solver_config, small_grid)
        replay = dynamics_service.run_ad(ns, u0, None, solver_config, small_grid)
        for a, b in zip(ns.states, replay.states):
            assert np.allclose(a.u, b.u, atol=1e-12)

    def test_run_ns_rejects_frozen_advection(self, dynamics_service, small_grid):
        cfg = SolverConfig(advection=AdvectionMode.FROZEN)
        with pytest.raises(ValueError):
            dynamics_service.run_ns(np.zeros((3, 16, 16, 16)), cfg, small_grid)

    def test_cfl_violation_restarts_with_smaller_step(self, dynamics_service, field_service, small_grid, test_data):
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"])
        cfg = SolverConfig(dt=0.5, T=1.0, eps=0.0, advection=AdvectionMode.SELF)
        trajectory = dynamics_service.run_ns(u0, cfg, small_grid)
        assert trajectory.dt < 0.5
        assert trajectory.times[-1] == pytest.approx(1.0)

    def test_suggest_dt(self, dynamics_service, small_grid):
        cfg = SolverConfig(dt=0.01, cfl=0.5)
        b = np.zeros((3, 16, 16, 16))
        assert dynamics_service.suggest_dt(None, cfg, small_grid) == 0.01
        assert dynamics_service.suggest_dt(b, cfg, small_grid) == 0.01
        b[2, 3, 4, 5] = 2.0
        assert dynamics_service.suggest_dt(b, cfg, small_grid) == pytest.approx(0.5 * small_grid.h / 2.0)

    def test_step_raises_on_cfl_violation(self, dynamics_service, field_service, small_grid, test_data):
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"])
        cfg = SolverConfig(dt=0.5, T=1.0, eps=0.0, advection=AdvectionMode.SELF)
        state = dynamics_service.make_state(u0, 0.0, 0, cfg, small_grid)
        with pytest.raises(CFLViolationError) as excinfo:
            dynamics_service.step(state, cfg, small_grid)
        assert excinfo.value.suggested_dt < 0.5

    def test_cfl_restarts_are_bounded(self, dynamics_service, field_service, small_grid, test_data):
        dynamics_service.max_restarts = 0
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"])
        cfg = SolverConfig(dt=0.5, T=1.0, eps=0.0, advection=AdvectionMode.SELF)
        with pytest.raises(RuntimeError) as excinfo:
            dynamics_service.run_ns(u0, cfg, small_grid)
        assert "Failed to satisfy CFL" in str(excinfo.value)

    def test_heat_flow_under_explicit_forcing(self, dynamics_service, field_service, small_grid):
        F = field_service.gaussian_forcing_profile(small_grid)
        forcing = ForcingSpec(kind=ForcingKind.EXPLICIT, amplitude=1.0, profile=F)
        cfg = SolverConfig(dt=0.01, T=0.02, eps=0.0)
        trajectory = dynamics_service.run_ad(None, np.zeros((3, 16, 16, 16)), forcing, cfg, small_grid)
        assert np.abs(trajectory.states[-1].u).max() > 0
        assert np.abs(trajectory.states[0].p).max() > 0

    def test_energy_does_not_grow_without_forcing(self, dynamics_service, field_service, grid_service,
                                                  small_grid, test_data):
        u0 = field_service.random_solenoidal(small_grid, test_data["seed"], amplitude=0.1)
        cfg = SolverConfig(dt=0.01, T=0.05, eps=0.5)
        states = dynamics_service.run_ns(u0, cfg, small_grid).states
        energies = [grid_service.l2_norm(state.u) ** 2 for state in states]
        assert all(b <= a * (1 + 1e-10) for a, b in zip(energies, energies[1:]))
        assert energies[-1] < energies[0]

    @pytest.mark.slow
    def test_dss_data_stays_self_similar(self, dynamics_service, field_service, test_data):
        lam = test_data["lam"]
        g = GridSpec(n=64, half_width=8.0)
        u0 = 1e-3 * field_service.make_dss_field(DSSSpec(lam=lam, profile_seed=test_data["seed"]), g)
        initial = field_service.dss_drift(u0, lam, g)
        cfg = SolverConfig(dt=0.0025, T=0.04, eps=0.5, mollifier_time_dependent=True)
        states = dynamics_service.run_ns(u0, cfg, g).states
        # t = 0.01 paired with lam^2 t = 0.04
        assert field_service.pair_drift(states[4].u, states[16].u, lam, g) <= max(3.0 * initial, 0.02)

    def test_uniqueness_gap_is_linear_and_bounded(self, dynamics_service, field_service, small_grid, solver_config,
                                                  weight, test_data):
        b = field_service.random_solenoidal(small_grid, test_data["seed"], amplitude=0.5)
        u0 = field_service.taylor_green(small_grid)
        args = (b, u0, None, solver_config, small_grid)
        unperturbed = dynamics_service.uniqueness_gap(*args, 0.0, weight, 1)
        assert unperturbed.ratio == 0.0 and unperturbed.within_bound
        coarse = dynamics_service.uniqueness_gap(*args, 1e-3, weight, 1)
        fine = dynamics_service.uniqueness_gap(*args, 1e-4, weight, 1)
        assert 0 < coarse.ratio < np.inf
        assert 0.5 < fine.ratio / coarse.ratio < 2.0
        assert coarse.within_bound and coarse.ratio <= coarse.bound
        assert coarse.bound == pytest.approx(unperturbed.bound)

    def test_uniqueness_bound_reduces_to_data_norm(self, dynamics_service, field_service, weighted_space_service,
                                                   small_grid, solver_config, weight, test_data):
        b = field_service.random_solenoidal(small_grid, test_data["seed"], amplitude=0.5)
        u0 = field_service.taylor_green(small_grid)
        report = dynamics_service.uniqueness_gap(b, u0, None, solver_config, small_grid, 1e-3, weight, 1,
                                                 c_gamma=0.0)
        noise = field_service.random_solenoidal(small_grid, 1)
        assert report.bound == pytest.approx(weighted_space_service.weighted_norm(noise, 2, weight, small_grid))
        # the gap at t = 0 is the data norm itself
        assert report.ratio >= report.bound * (1 - 1e-6)

    def test_epsilon_sweep_approaches_the_finest_run(self, dynamics_service, field_service, grid32, test_data):
        u0 = field_service.random_solenoidal(grid32, test_data["seed"], k_max=2.0)
        cfg = SolverConfig(dt=0.01, T=0.04)
        entries = dynamics_service.epsilon_sweep(u0, cfg, grid32, [0.5, 1.0, 0.25])
        assert [entry.eps for entry in entries] == [1.0, 0.5, 0.25]
        assert entries[-1].distance == 0.0
        assert entries[0].distance > entries[1].distance > 0.0
        assert all(entry.sup_energy > 0 for entry in entries)

    def test_epsilon_sweep_rejects_bad_values(self, dynamics_service, small_grid, solver_config):
        with pytest.raises(ValueError):
            dynamics_service.epsilon_sweep(np.zeros((3, 16, 16, 16)), solver_config, small_grid, [])
        with pytest.raises(ValueError):
            dynamics_service.epsilon_sweep(np.zeros((3, 16, 16, 16)), solver_config, small_grid, [0.5, 0.0])

    def test_energy_balance_needs_three_samples(self, dynamics_service, small_grid, weight):
        trajectory = Trajectory(grid=small_grid, dt=0.01, states=[
            FlowState(t=0.0, u=np.zeros((3, 16, 16, 16)), p=np.zeros((16, 16, 16)))])
        with pytest.raises(ValueError):
            dynamics_service.energy_balance_residual(trajectory, weight)

    def test_energy_balance_of_zero_flow(self, dynamics_service, small_grid, solver_config, weight):
        trajectory = dynamics_service.run_ns(np.zeros((3, 16, 16, 16)), solver_config, small_grid)
        residuals = dynamics_service.energy_balance_residual(trajectory, weight)
        assert residuals
        assert all(residual.value == 0.0 for residual in residuals)

    def test_energy_balance_of_smooth_flow_is_finite(self, dynamics_service, field_service, small_grid,
                                                     solver_config, weight):
        trajectory = dynamics_service.run_ns(field_service.taylor_green(small_grid), solver_config, small_grid)
        residuals = dynamics_service.energy_balance_residual(trajectory, weight)
        assert {residual.scale for residual in residuals} == {8 * small_grid.h, 16 * small_grid.h}
        assert all(np.isfinite(residual.value) for residual in residuals)
