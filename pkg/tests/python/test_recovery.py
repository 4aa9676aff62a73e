"""
Tests for the envelope gradients and the alternating recovery.

Gradients are checked against central finite differences with plans
re-solved at each perturbed point; the estimators are checked at their fixed points
and through the composition contract of the outer loop.
"""

import pytest
import numpy as np
import sys
import os

# Add src path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "..", "src", "multiview"))

from core import (
    DeformationOp,
    DimensionMismatch,
    Grid,
    LinearMeasurementOp,
    NonFiniteIterate,
    Signal,
    SupportSet,
    ViewData,
    nmse,
)
from transport import TransportPlan, build_cost_matrix
from recovery import (
    RecoveryConfig,
    RecoveryState,
    estimate_prototype,
    estimate_view,
    grad_x,
    grad_xi,
    initial_prototype,
    initial_views,
    objective,
    recover,
)
from synthdata import (
    PerturbSpec,
    SceneSpec,
    build_instance,
    make_deformation,
    make_local_permutation,
    make_scene,
)
from bench import SPARSE_GRADIENT_SUPPORT, current_plan, finite_difference, gradient_case


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def scene():
    """Letter T on a small grid."""
    return SceneSpec.for_letter("T", Grid(12, 16))


@pytest.fixture
def x_true(scene):
    return make_scene(scene)


def fixed_plan_surrogate(x, x_i, view, plan, cfg):
    """Data term plus beta <C(x_i, F x), P> with the plan held fixed."""
    z = x.with_values(view.F.apply(x.values))
    C = build_cost_matrix(x_i, z, cfg.lambda_, cfg.beta)
    residual = view.A.apply(x_i.values) - view.y
    return 0.5 * float(residual @ residual) + cfg.beta * float(np.sum(C.entries * plan.entries))


def identity_views(x, count):
    n = x.grid.N
    return [ViewData(x.values, LinearMeasurementOp.identity(n), DeformationOp.identity(n)) for _ in range(count)]


class TestRecoveryConfig:
    """Test suite for RecoveryConfig."""

    def test_defaults(self):
        """Test default weights and the derived step."""
        cfg = RecoveryConfig(support_size_per_view=4)
        assert cfg.beta == 2.0
        assert cfg.lambda_ == 40.0
        assert cfg.gamma0 == pytest.approx(0.5 / 40.0)
        assert cfg.solver == "exact"

    def test_step_schedule(self):
        """Test gamma_t = gamma_0 / (1 + decay t)."""
        cfg = RecoveryConfig(step_size=0.2, step_decay=0.01)
        assert cfg.step_at(0) == pytest.approx(0.2)
        assert cfg.step_at(100) == pytest.approx(0.1)

    def test_lambda_alias(self):
        """Test the lambda key from configuration files."""
        cfg = RecoveryConfig.model_validate({"lambda": 12.5, "support_size_per_view": 3})
        assert cfg.lambda_ == 12.5

    def test_k_s_from_support(self, scene):
        """Test K_s falls back to the support size."""
        cfg = RecoveryConfig(support=scene.support)
        assert cfg.K_s == scene.support.size

    def test_k_s_required(self):
        """Test K_s without support information raises."""
        with pytest.raises(ValueError):
            _ = RecoveryConfig().K_s

    def test_loop_bounds_validated(self):
        """Test loop bounds must be at least one."""
        with pytest.raises(ValueError):
            RecoveryConfig(inner_tmax=0)


class TestObjective:
    """Test suite for the per-view objective."""

    def test_noiseless_identity_is_zero(self, x_true, scene):
        """Test A = F = I and x_i = x = y give 0."""
        view = identity_views(x_true, 1)[0]
        cfg = RecoveryConfig(support_size_per_view=scene.support.size)
        assert objective(x_true, x_true, view, cfg) == pytest.approx(0.0, abs=1e-12)

    def test_beta_zero_is_data_term(self, x_true, scene):
        """Test beta = 0 reduces to 1/2 ||y - A x_i||^2."""
        rng = np.random.default_rng(0)
        n = x_true.grid.N
        A = LinearMeasurementOp(rng.normal(size=(20, n)) / np.sqrt(n))
        y = rng.normal(size=20)
        view = ViewData(y, A, DeformationOp.identity(n))
        x_i = x_true.with_values(rng.uniform(size=n))
        cfg = RecoveryConfig(beta=0.0, support_size_per_view=scene.support.size)
        residual = y - A.apply(x_i.values)
        assert objective(x_true, x_i, view, cfg) == pytest.approx(0.5 * residual @ residual)

    def test_matching_view_has_no_transport_cost(self, x_true, scene):
        """Test x_i = F x leaves only the data term."""
        rng = np.random.default_rng(1)
        F = make_deformation(scene, PerturbSpec(), rng)
        n = x_true.grid.N
        A = LinearMeasurementOp(rng.normal(size=(30, n)) / np.sqrt(n))
        y = rng.normal(size=30)
        view = ViewData(y, A, F)
        x_i = x_true.with_values(F.apply(x_true.values))
        cfg = RecoveryConfig(support_size_per_view=scene.support.size)
        residual = y - A.apply(x_i.values)
        assert objective(x_true, x_i, view, cfg) == pytest.approx(0.5 * residual @ residual, rel=1e-12)


class TestGradients:
    """Test suite for grad_x and grad_xi."""

    def test_grad_x_zero_at_match(self, x_true, scene):
        """Test grad_x vanishes when x_i = F x with the diagonal plan."""
        rng = np.random.default_rng(2)
        F = make_deformation(scene, PerturbSpec(), rng)
        n = x_true.grid.N
        view = ViewData(np.zeros(1), LinearMeasurementOp(np.ones((1, n))), F)
        x_i = x_true.with_values(F.apply(x_true.values))
        cfg = RecoveryConfig(support_size_per_view=scene.support.size)
        plan = current_plan(x_true, x_i, view, cfg)
        assert np.allclose(grad_x(x_true, x_i, view, plan, cfg), 0.0)

    def test_grad_x_zero_lambda(self):
        """Test lambda = 0 gives a zero prototype gradient."""
        x, x_i, view, cfg = gradient_case(np.random.default_rng(3))
        cfg = cfg.model_copy(update={"lambda_": 0.0})
        plan = current_plan(x, x_i, view, cfg)
        assert not np.any(grad_x(x, x_i, view, plan, cfg))

    def test_grad_xi_zero_at_fixed_point(self, x_true, scene):
        """Test A x_i = y and x_i = F x give a zero view gradient."""
        view = identity_views(x_true, 1)[0]
        cfg = RecoveryConfig(support_size_per_view=scene.support.size)
        plan = current_plan(x_true, x_true, view, cfg)
        assert np.allclose(grad_xi(x_true, x_true, view, plan, cfg), 0.0)

    def test_grad_xi_without_measurements(self):
        """Test A = 0 leaves lambda (a(x_i) * x_i - P F x)."""
        x, x_i, view, cfg = gradient_case(np.random.default_rng(4))
        n = x.grid.N
        silent = ViewData(np.zeros(2), LinearMeasurementOp(np.zeros((2, n))), view.F)
        plan = current_plan(x, x_i, silent, cfg)
        expected = cfg.lambda_ * (plan.row_marginal.weights * x_i.values - plan.entries @ view.F.apply(x.values))
        assert np.allclose(grad_xi(x, x_i, silent, plan, cfg), expected)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        """Test both gradients against central differences with re-solved plans."""
        x, x_i, view, cfg = gradient_case(np.random.default_rng(seed))
        plan = current_plan(x, x_i, view, cfg)
        fd_xi = finite_difference(lambda v: objective(x, x_i.with_values(v), view, cfg), x_i.values)
        fd_x = finite_difference(lambda v: objective(x.with_values(v), x_i, view, cfg), x.values)
        assert relative_error(grad_xi(x, x_i, view, plan, cfg), fd_xi) <= 1e-5
        assert relative_error(grad_x(x, x_i, view, plan, cfg), fd_x) <= 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences_sparse_support(self, seed):
        """Test both gradients when only K_s < N pixels carry marginal mass."""
        x, x_i, view, cfg = gradient_case(np.random.default_rng(100 + seed), SPARSE_GRADIENT_SUPPORT)
        assert cfg.K_s < x.grid.N
        plan = current_plan(x, x_i, view, cfg)
        assert np.count_nonzero(plan.row_marginal.weights) == SPARSE_GRADIENT_SUPPORT
        fd_xi = finite_difference(lambda v: objective(x, x_i.with_values(v), view, cfg), x_i.values)
        fd_x = finite_difference(lambda v: objective(x.with_values(v), x_i, view, cfg), x.values)
        assert relative_error(grad_xi(x, x_i, view, plan, cfg), fd_xi) <= 1e-5
        assert relative_error(grad_x(x, x_i, view, plan, cfg), fd_x) <= 1e-5

    @pytest.mark.parametrize("support_size", [None, SPARSE_GRADIENT_SUPPORT])
    @pytest.mark.parametrize("seed", range(5))
    def test_fixed_plan_step_descends(self, seed, support_size):
        """Test a small step along either gradient does not raise the fixed-plan surrogate."""
        x, x_i, view, cfg = gradient_case(np.random.default_rng(200 + seed), support_size)
        plan = current_plan(x, x_i, view, cfg)
        start = fixed_plan_surrogate(x, x_i, view, plan, cfg)
        step = 1e-3

        moved_view = x_i.with_values(x_i.values - step * grad_xi(x, x_i, view, plan, cfg))
        assert fixed_plan_surrogate(x, moved_view, view, plan, cfg) <= start

        moved_proto = x.with_values(x.values - step * grad_x(x, x_i, view, plan, cfg))
        assert fixed_plan_surrogate(moved_proto, x_i, view, plan, cfg) <= start

    @pytest.mark.parametrize("beta", [0.25, 2.0, 16.0])
    def test_lambda_beta_cancellation(self, beta):
        """Test beta * d<C, P>/dx_i equals lambda (u * x_i - P z) for any beta."""
        x, x_i, view, cfg = gradient_case(np.random.default_rng(30))
        cfg = cfg.model_copy(update={"beta": beta})
        plan = current_plan(x, x_i, view, cfg)
        z = x.with_values(view.F.apply(x.values))

        def transport_term(values):
            C = build_cost_matrix(x_i.with_values(values), z, cfg.lambda_, cfg.beta)
            return cfg.beta * float(np.sum(C.entries * plan.entries))

        expected = cfg.lambda_ * (plan.row_marginal.weights * x_i.values - plan.entries @ z.values)
        assert np.allclose(finite_difference(transport_term, x_i.values), expected, atol=1e-8)

    def test_plan_shape_checked(self):
        """Test a plan of the wrong size raises DimensionMismatch."""
        x, x_i, view, cfg = gradient_case(np.random.default_rng(5))
        plan = current_plan(x, x_i, view, cfg)
        bad = TransportPlan(np.zeros((3, 3)), plan.row_marginal, plan.col_marginal, 0.0)
        with pytest.raises(DimensionMismatch):
            grad_x(x, x_i, view, bad, cfg)


class TestEstimators:
    """Test suite for the single-view and prototype estimators."""

    def test_view_fixed_point(self, x_true, scene):
        """Test A = F = P = I with x_i_init = y returns y."""
        view = identity_views(x_true, 1)[0]
        cfg = RecoveryConfig(support_size_per_view=scene.support.size, inner_tmax=5)
        x_i = estimate_view(view, x_true, x_true, cfg)
        assert np.allclose(x_i.values, x_true.values)

    def test_view_zero_step(self, x_true, scene):
        """Test gamma = 0 returns the starting view estimate."""
        rng = np.random.default_rng(6)
        view = identity_views(x_true, 1)[0]
        start = x_true.with_values(x_true.values + rng.uniform(0, 0.1, x_true.grid.N))
        cfg = RecoveryConfig(support_size_per_view=scene.support.size, step_size=0.0, inner_tmax=3)
        assert np.array_equal(estimate_view(view, x_true, start, cfg).values, start.values)

    def test_view_trace_descends(self, scene):
        """Test the monitored view objective ends below where it started."""
        instance = build_instance(scene, PerturbSpec(displacement_radius=1), 1, 1.0, float("inf"), 5)
        view = instance.views[0]
        cfg = RecoveryConfig(support_size_per_view=scene.support.size, inner_tmax=15)
        trace = []
        estimate_view(view, instance.x_true, initial_views([view], scene.grid)[0], cfg, trace)
        assert len(trace) == 15
        assert trace[-1] <= trace[0]

    def test_prototype_fixed_point(self, x_true, scene):
        """Test one view with F = I and matching marginals is a fixed point."""
        cfg = RecoveryConfig(support=scene.support, inner_tmax=5)
        x = estimate_prototype([x_true], [DeformationOp.identity(x_true.grid.N)], x_true, cfg)
        assert np.allclose(x.values, x_true.values)

    def test_prototype_zero_step(self, x_true, scene):
        """Test gamma = 0 returns x_init."""
        rng = np.random.default_rng(7)
        views_x = [x_true.with_values(x_true.values + rng.uniform(0, 0.2, x_true.grid.N))]
        cfg = RecoveryConfig(support_size_per_view=scene.support.size, step_size=0.0, inner_tmax=3)
        x = estimate_prototype(views_x, [DeformationOp.identity(x_true.grid.N)], x_true, cfg)
        assert np.array_equal(x.values, x_true.values)

    def test_prototype_support_projection(self, x_true, scene):
        """Test prototype iterates stay inside the known support."""
        rng = np.random.default_rng(8)
        views_x = [x_true.with_values(x_true.values + rng.uniform(0, 0.3, x_true.grid.N))]
        cfg = RecoveryConfig(support=scene.support, inner_tmax=3)
        x = estimate_prototype(views_x, [DeformationOp.identity(x_true.grid.N)], x_true, cfg)
        outside = np.setdiff1d(np.arange(x_true.grid.N), scene.support.indices)
        assert not np.any(x.values[outside])

    def test_prototype_trace_monotone_on_two_views(self, x_true, scene):
        """Test sum_i f falls at every step for two views with known deformations."""
        rng = np.random.default_rng(12)
        F = [make_deformation(scene, PerturbSpec(), rng) for _ in range(2)]
        views_x = []
        for F_i in F:
            deformed = F_i.apply(x_true.values)
            P_i = make_local_permutation(scene.grid, SupportSet.from_signal(deformed), 1, rng)
            views_x.append(x_true.with_values(P_i.apply(deformed)))
        cfg = RecoveryConfig(support=scene.support, inner_tmax=10)
        trace = []
        estimate_prototype(views_x, F, x_true.with_values(0.5 * x_true.values), cfg, trace)
        assert len(trace) == 10
        steps = np.diff(trace)
        assert np.all(steps <= 1e-9)
        assert trace[-1] < trace[0]

    def test_prototype_view_count_checked(self, x_true, scene):
        """Test mismatched view and deformation lists raise."""
        cfg = RecoveryConfig(support=scene.support)
        with pytest.raises(DimensionMismatch):
            estimate_prototype([x_true, x_true], [DeformationOp.identity(x_true.grid.N)], x_true, cfg)

    def test_divergent_step_raises(self, scene):
        """Test an infinite step surfaces NonFiniteIterate."""
        instance = build_instance(scene, PerturbSpec(), 1, 0.5, 20.0, 9)
        view = instance.views[0]
        cfg = RecoveryConfig(support_size_per_view=scene.support.size, step_size=float("inf"), inner_tmax=3)
        with pytest.raises(NonFiniteIterate):
            estimate_view(view, instance.x_true, initial_views([view], scene.grid)[0], cfg)


class TestRecover:
    """Test suite for the full alternation."""

    def test_degenerate_exact_recovery(self, x_true, scene):
        """Test P = A = F = I, noiseless, reaches NMSE <= 1e-6 within 20 rounds."""
        views = identity_views(x_true, 2)
        cfg = RecoveryConfig(support=scene.support, outer_tmax=20, inner_tmax=5)
        x_hat, state = recover(views, cfg, grid=scene.grid)
        assert nmse(x_hat, x_true) <= 1e-6
        assert len(state.objective_trace) == 20

    def test_known_deformations_exact(self, x_true, scene):
        """Test A = I, P = I with permuted views still recovers exactly."""
        rng = np.random.default_rng(10)
        views = []
        for _ in range(2):
            F = make_deformation(scene, PerturbSpec(), rng)
            views.append(ViewData(F.apply(x_true.values), LinearMeasurementOp.identity(x_true.grid.N), F))
        cfg = RecoveryConfig(support=scene.support, outer_tmax=3, inner_tmax=5)
        x_hat, _ = recover(views, cfg, grid=scene.grid)
        assert nmse(x_hat, x_true) <= 1e-6

    def test_one_round_is_composition(self, scene):
        """Test outer_tmax = 1 equals one view pass followed by one prototype pass."""
        instance = build_instance(scene, PerturbSpec(displacement_radius=1), 2, 0.8, float("inf"), 11)
        cfg = RecoveryConfig(support=scene.support, outer_tmax=1, inner_tmax=4)
        x0 = initial_prototype(instance.views, cfg, scene.grid)
        x_hat, _ = recover(instance.views, cfg, x_init=x0)

        starts = initial_views(instance.views, scene.grid)
        views_x = [estimate_view(v, x0, s, cfg) for v, s in zip(instance.views, starts)]
        expected = estimate_prototype(views_x, [v.F for v in instance.views], x0, cfg)
        assert np.allclose(x_hat.values, expected.values)

    def test_workers_match_serial(self, scene):
        """Test threaded view updates reproduce the serial run."""
        instance = build_instance(scene, PerturbSpec(displacement_radius=1), 3, 0.8, 25.0, 12)
        cfg = RecoveryConfig(support=scene.support, outer_tmax=2, inner_tmax=3)
        serial, _ = recover(instance.views, cfg, grid=scene.grid, workers=1)
        threaded, _ = recover(instance.views, cfg, grid=scene.grid, workers=3)
        assert np.array_equal(serial.values, threaded.values)

    def test_state_bookkeeping(self, x_true, scene):
        """Test iteration counter, plans and summary."""
        views = identity_views(x_true, 2)
        cfg = RecoveryConfig(support=scene.support, outer_tmax=3, inner_tmax=4)
        _, state = recover(views, cfg, grid=scene.grid)
        assert isinstance(state, RecoveryState)
        assert state.iterations == 12
        assert len(state.views) == len(state.plans) == 2
        assert all(p.check_feasibility(1e-8) for p in state.plans)
        summary = state.to_dict()
        assert summary["views"] == 2
        assert summary["final_objective"] == pytest.approx(state.objective_trace[-1])

    def test_requires_positive_beta(self, x_true, scene):
        """Test beta = 0 cannot drive the alternation."""
        cfg = RecoveryConfig(beta=0.0, support=scene.support)
        with pytest.raises(ValueError):
            recover(identity_views(x_true, 1), cfg, grid=scene.grid)

    def test_requires_views(self, scene):
        """Test an empty view list raises."""
        with pytest.raises(ValueError):
            recover([], RecoveryConfig(support=scene.support), grid=scene.grid)

    def test_initial_prototype_projected(self, scene):
        """Test the starting prototype is zero outside the support."""
        instance = build_instance(scene, PerturbSpec(), 2, 0.6, 20.0, 13)
        cfg = RecoveryConfig(support=scene.support)
        x0 = initial_prototype(instance.views, cfg, scene.grid)
        outside = np.setdiff1d(np.arange(scene.grid.N), scene.support.indices)
        assert not np.any(x0.values[outside])

