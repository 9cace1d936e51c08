import numpy as np
import pytest

from sloshmpc.dynamics import NX, LiquidParams
from sloshmpc.kinematics import Pose2D, RobotParams, fk_array
from sloshmpc.ocp import (
    Bounds,
    HorizonConfig,
    OcpSolution,
    ReferenceTrajectory,
    Weights,
    build_problem,
    defect_jacobian_dense,
    dynamics_defects,
    objective,
    objective_gradient,
    preset,
    rollout,
    shift_warm_start,
    tracking_error,
)

ROBOT = RobotParams()
LIQUID = LiquidParams()
Q0 = np.array([-1.2, 2.4, -1.2])


def make_problem(n=5, xi0=None, refs=None, weights=None, bounds=None, dt=1.0 / 30.0):
    if xi0 is None:
        xi0 = np.zeros(NX)
        xi0[:3] = Q0
    if refs is None:
        refs = np.tile(fk_array(xi0[:3], ROBOT.lengths), (n, 1))
    return build_problem(
        xi0,
        refs,
        weights or preset("P1"),
        bounds or Bounds(),
        HorizonConfig(n=n, dt=dt),
        ROBOT,
        LIQUID,
    )


def random_decision(problem, rng, scale=0.5):
    U = rng.uniform(-2, 2, (problem.n, 3))
    X = np.empty((problem.n, NX))
    X[:, :3] = problem.xi0[:3] + rng.uniform(-scale, scale, (problem.n, 3))
    X[:, 3:6] = rng.uniform(-1, 1, (problem.n, 3))
    X[:, 6] = rng.uniform(-0.3, 0.3, problem.n)
    X[:, 7] = rng.uniform(-2, 2, problem.n)
    return problem.pack(U, X)


def test_tracking_error_basic():
    a = Pose2D(0.5, 0.2, 0.0)
    b = Pose2D(0.4, 0.2, 0.0)
    np.testing.assert_array_equal(tracking_error(a, a), np.zeros(3))
    np.testing.assert_allclose(tracking_error(a, b), [0.1, 0.0, 0.0])
    np.testing.assert_array_equal(tracking_error(a, b), -tracking_error(b, a))


def test_presets_match_published_weights():
    p1 = preset("P1")
    np.testing.assert_array_equal(p1.q1, [500.0, 500.0, 100.0])
    assert p1.q2 == 0.1
    np.testing.assert_array_equal(p1.r, [0.01, 0.01, 0.01])
    p2 = preset("p2")
    np.testing.assert_array_equal(p2.q1, [100.0, 100.0, 1.0])
    assert p2.q2 == 1000.0
    np.testing.assert_array_equal(p2.r, [0.01, 0.01, 0.01])
    with pytest.raises(ValueError):
        preset("P3")


def test_weights_validation():
    with pytest.raises(ValueError):
        Weights(q1=np.array([-1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        Weights(q1=np.zeros(3), q2=0.0)


def test_bounds_validation():
    with pytest.raises(ValueError):
        Bounds(q_min=np.array([0.0, 0.0, 0.0]), q_max=np.array([0.0, 1.0, 1.0]))


def test_objective_zero_at_rest_on_reference():
    xi0 = np.zeros(NX)
    xi0[:3] = Q0
    n = 4
    refs = np.tile(fk_array(Q0, ROBOT.lengths), (n, 1))
    X = np.tile(xi0, (n, 1))
    U = np.zeros((n, 3))
    assert objective(X, U, refs, preset("P1"), ROBOT) == 0.0


def test_objective_single_stage_tracking_term():
    # error of 0.1 in x under the high-tracking weights: 500 * 0.01 = 5
    xi = np.zeros(NX)
    xi[:3] = Q0
    ref = fk_array(Q0, ROBOT.lengths) + np.array([-0.1, 0.0, 0.0])
    J = objective(xi[None, :], np.zeros((1, 3)), ref[None, :], preset("P1"), ROBOT)
    assert J == pytest.approx(5.0, rel=1e-12)


def test_objective_single_stage_slosh_term():
    xi = np.zeros(NX)
    xi[:3] = Q0
    xi[6] = 0.05
    ref = fk_array(Q0, ROBOT.lengths)
    J = objective(xi[None, :], np.zeros((1, 3)), ref[None, :], preset("P2"), ROBOT)
    assert J == pytest.approx(1000.0 * 0.05**2, rel=1e-12)
    assert J == pytest.approx(2.5)


def test_objective_length_mismatch():
    xi = np.zeros((2, NX))
    with pytest.raises(ValueError):
        objective(xi, np.zeros((3, 3)), np.zeros((2, 3)), preset("P1"), ROBOT)


def test_objective_nonnegative_random():
    rng = np.random.default_rng(21)
    problem = make_problem(n=6)
    for _ in range(20):
        z = random_decision(problem, rng)
        U, X = problem.split(z)
        assert objective(X, U, problem.refs, problem.weights, ROBOT) >= 0.0


def test_objective_ignores_initial_state():
    # stage 0 carries no tracking or slosh cost: swapping xi0 leaves J unchanged
    problem_a = make_problem(n=4)
    xi0_b = problem_a.xi0.copy()
    xi0_b[6] = 0.2
    problem_b = make_problem(n=4, xi0=xi0_b, refs=problem_a.refs.poses)
    rng = np.random.default_rng(22)
    z = random_decision(problem_a, rng)
    Ua, Xa = problem_a.split(z)
    Ub, Xb = problem_b.split(z)
    Ja = objective(Xa, Ua, problem_a.refs, problem_a.weights, ROBOT)
    Jb = objective(Xb, Ub, problem_b.refs, problem_b.weights, ROBOT)
    assert Ja == Jb


def test_objective_sensitive_to_last_control():
    problem = make_problem(n=4)
    rng = np.random.default_rng(23)
    z = random_decision(problem, rng)
    U, X = problem.split(z)
    J0 = objective(X, U, problem.refs, problem.weights, ROBOT)
    U2 = U.copy()
    U2[-1, 0] += 1.0
    J1 = objective(X, U2, problem.refs, problem.weights, ROBOT)
    assert J1 != J0


def test_decision_dimensions():
    assert make_problem(n=30).n_dec == 330
    assert make_problem(n=1).n_dec == 11


def test_build_problem_ref_length_mismatch():
    xi0 = np.zeros(NX)
    refs = np.zeros((4, 3))
    with pytest.raises(ValueError):
        build_problem(xi0, refs, preset("P1"), Bounds(), HorizonConfig(n=5), ROBOT, LIQUID)


def test_build_problem_clamps_initial_state():
    xi0 = np.zeros(NX)
    xi0[3] = 10.0  # above the velocity limit
    problem = make_problem(n=3, xi0=xi0, refs=np.tile(fk_array(np.zeros(3), ROBOT.lengths), (3, 1)))
    assert problem.xi0_clamped
    assert problem.xi0[3] == np.pi
    assert not make_problem(n=3).xi0_clamped


def test_defects_zero_on_exact_rollout():
    problem = make_problem(n=6)
    rng = np.random.default_rng(24)
    U = rng.uniform(-3, 3, (6, 3))
    X = rollout(problem.xi0, U, problem.horizon.dt, ROBOT, LIQUID)
    c = dynamics_defects(problem, problem.pack(U, X))
    np.testing.assert_array_equal(c, np.zeros(8 * 6))


def test_defect_dimension():
    for n in (1, 4, 13):
        problem = make_problem(n=n)
        z = shift_warm_start(None, problem.xi0, problem)
        assert dynamics_defects(problem, z).shape == (8 * n,)


def test_defect_perturbation_is_local():
    problem = make_problem(n=5)
    rng = np.random.default_rng(25)
    U = rng.uniform(-2, 2, (5, 3))
    X = rollout(problem.xi0, U, problem.horizon.dt, ROBOT, LIQUID)
    z = problem.pack(U, X)
    delta = 1e-3
    X2 = X.copy()
    X2[0, 2] += delta  # xi_1, third component
    c = dynamics_defects(problem, problem.pack(U, X2)).reshape(5, NX)
    assert c[0, 2] == pytest.approx(delta)
    assert np.all(c[0, :2] == 0.0) and np.all(c[0, 3:] == 0.0)
    assert np.any(c[1] != 0.0)  # stage 1 feels xi_1
    np.testing.assert_array_equal(c[2:], np.zeros((3, NX)))


def test_defect_identity_in_next_state():
    # residual k is affine with identity sensitivity in xi_{k+1}
    problem = make_problem(n=4)
    rng = np.random.default_rng(26)
    z = random_decision(problem, rng)
    U, X = problem.split(z)
    c0 = dynamics_defects(problem, z).reshape(4, NX)
    bump = rng.uniform(-0.5, 0.5, NX)
    X2 = X.copy()
    X2[2] += bump
    c1 = dynamics_defects(problem, problem.pack(U, X2)).reshape(4, NX)
    np.testing.assert_allclose(c1[2] - c0[2], bump, atol=1e-12)


def test_objective_gradient_matches_finite_differences():
    problem = make_problem(n=5, weights=preset("P2"))
    rng = np.random.default_rng(27)
    for _ in range(5):
        z = random_decision(problem, rng)
        g = objective_gradient(problem, z)
        h = 1e-6
        gfd = np.zeros_like(g)
        for i in range(z.size):
            dz = np.zeros_like(z)
            dz[i] = h
            Up, Xp = problem.split(z + dz)
            Um, Xm = problem.split(z - dz)
            gfd[i] = (
                objective(Xp, Up, problem.refs, problem.weights, ROBOT)
                - objective(Xm, Um, problem.refs, problem.weights, ROBOT)
            ) / (2 * h)
        scale = max(np.max(np.abs(gfd)), 1.0)
        assert np.max(np.abs(g - gfd)) / scale < 1e-5


def test_defect_jacobian_matches_finite_differences():
    problem = make_problem(n=3)
    rng = np.random.default_rng(28)
    z = random_decision(problem, rng)
    J = defect_jacobian_dense(problem, z)
    h = 1e-6
    Jfd = np.zeros_like(J)
    for i in range(z.size):
        dz = np.zeros_like(z)
        dz[i] = h
        Jfd[:, i] = (
            dynamics_defects(problem, z + dz) - dynamics_defects(problem, z - dz)
        ) / (2 * h)
    scale = max(np.max(np.abs(Jfd)), 1.0)
    assert np.max(np.abs(J - Jfd)) / scale < 1e-5


def test_shift_warm_start_shifts_and_holds():
    problem = make_problem(n=3)
    controls = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    states = rollout(problem.xi0, controls, problem.horizon.dt, ROBOT, LIQUID)
    prev = OcpSolution(
        controls=controls,
        states=states,
        objective=0.0,
        status="converged",
        iterations=1,
        max_defect=0.0,
        solve_time=0.0,
    )
    z = shift_warm_start(prev, problem.xi0, problem)
    U, _ = problem.split(z)
    np.testing.assert_array_equal(U[:, 0], [2.0, 3.0, 3.0])
    np.testing.assert_array_equal(dynamics_defects(problem, z), np.zeros(24))


def test_shift_warm_start_cold():
    problem = make_problem(n=4)
    z = shift_warm_start(None, problem.xi0, problem)
    U, _ = problem.split(z)
    np.testing.assert_array_equal(U, np.zeros((4, 3)))
    np.testing.assert_array_equal(dynamics_defects(problem, z), np.zeros(32))


def test_reference_trajectory_validation():
    with pytest.raises(ValueError):
        ReferenceTrajectory(np.full((3, 3), np.nan))
    assert len(ReferenceTrajectory(np.zeros((7, 3)))) == 7
