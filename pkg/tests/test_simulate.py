import numpy as np
import pytest

from dissipnet import autodiff as ad
from dissipnet.errors import DimensionMismatch, FormatError, NonFiniteState
from dissipnet.nets import affine_net, identity_affine, init_mlp
from dissipnet.projection import RawDynamics
from dissipnet.simulate import (
    SimConfig,
    Trajectory,
    euler_step,
    naive_model,
    read_trajectory,
    rollout,
    simulate,
    write_trajectory,
)

from helpers import msd_true_model, random_model


def _scalar_decay_model():
    # dx/dt = -x, no input coupling, y = x
    return naive_model(RawDynamics(f=affine_net([[-1.0]]),
                                   g=affine_net([[0.0]]),
                                   h=identity_affine(1)))


class TestEulerStep:
    def test_scalar_linear_decay(self):
        model = _scalar_decay_model()
        out = euler_step(model, np.array([1.0]), np.array([0.0]), 0.1)
        assert np.allclose(out, [0.9])

    def test_pure_input_integration(self):
        raw = RawDynamics(f=affine_net(np.zeros((2, 2))),
                          g=affine_net(np.zeros((4, 2)),
                                       bias=np.eye(2).ravel(order="F")),
                          h=identity_affine(2))
        model = naive_model(raw)
        out = euler_step(model, np.zeros(2), np.array([1.0, 0.0]), 0.5)
        assert np.allclose(out, [0.5, 0.0])

    def test_msd_against_closed_form(self):
        # free response of q'' + q' + q = 0 from (1, 0); underdamped
        model = msd_true_model("naive")
        dt, steps = 1e-4, 10**4
        x = np.array([1.0, 0.0])
        for _ in range(steps):
            x = euler_step(model, x, np.array([0.0]), dt)
        t = dt * steps
        zeta, omega_n = 0.5, 1.0
        omega_d = omega_n * np.sqrt(1 - zeta**2)
        q = np.exp(-zeta * t) * (np.cos(omega_d * t)
                                 + (zeta / omega_d) * np.sin(omega_d * t))
        dq = -np.exp(-zeta * t) * (omega_n**2 / omega_d) * np.sin(omega_d * t)
        assert abs(x[0] - q) <= 5e-3
        assert abs(x[1] - dq) <= 5e-3

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            euler_step(_scalar_decay_model(), np.array([1.0]),
                       np.array([0.0]), 0.0)


class TestSimulate:
    def test_zero_model(self):
        raw = RawDynamics(f=affine_net(np.zeros((2, 2))),
                          g=affine_net(np.zeros((2, 2))),
                          h=affine_net(np.zeros((2, 2))))
        traj = simulate(naive_model(raw), np.ones((10, 1)),
                        SimConfig(dt=0.1, horizon=10))
        assert np.all(traj.states == 0.0) and np.all(traj.outputs == 0.0)

    def test_default_initial_state_is_zero(self):
        model = _scalar_decay_model()
        traj = simulate(model, np.zeros((5, 1)), SimConfig(dt=0.1, horizon=5))
        assert np.all(traj.states[0] == 0.0)

    def test_horizon_mismatch(self):
        with pytest.raises(DimensionMismatch):
            simulate(_scalar_decay_model(), np.zeros((4, 1)),
                     SimConfig(dt=0.1, horizon=5))

    def test_dissipation_budget_for_projected_model(self):
        from dissipnet.verify import dissipativity_check
        model = random_model("dissipative", seed=1, activation="sigmoid")
        u = np.random.default_rng(2).normal(size=(200, model.m_dim))
        traj = simulate(model, u, SimConfig(dt=0.01, horizon=200,
                                            x0=np.ones(model.n_dim)))
        report = dissipativity_check(traj, model.spec.V, model.spec.supply,
                                     mode="inequality")
        assert report.passed

    def test_first_order_convergence(self):
        model = random_model("conservative", seed=3, activation="sigmoid")
        u_coarse = np.random.default_rng(4).normal(size=(32, model.m_dim))
        x0 = np.ones(model.n_dim)

        def final_state(refine):
            u = np.repeat(u_coarse, refine, axis=0)
            cfg = SimConfig(dt=0.02 / refine, horizon=32 * refine, x0=x0)
            return simulate(model, u, cfg).states[-1]

        ref = final_state(64)
        err_1 = np.abs(final_state(1) - ref).max()
        err_2 = np.abs(final_state(2) - ref).max()
        assert 1.5 <= err_1 / err_2 <= 2.5

    def test_length_equivariance_bitwise(self):
        model = random_model("stable", seed=5)
        rng = np.random.default_rng(6)
        u = rng.normal(size=(20, model.m_dim))
        full = simulate(model, u, SimConfig(dt=0.05, horizon=20))
        first = simulate(model, u[:10], SimConfig(dt=0.05, horizon=10))
        second = simulate(model, u[10:], SimConfig(dt=0.05, horizon=10,
                                                   x0=first.states[-1]))
        stitched = np.vstack([first.states, second.states[1:]])
        assert np.array_equal(stitched, full.states)

    def test_nonfinite_state_reports_step(self):
        # dx/dt = +40 x blows past the bound quickly from x0 = 1
        raw = RawDynamics(f=affine_net([[40.0]]), g=affine_net([[0.0]]),
                          h=identity_affine(1))
        with pytest.raises(NonFiniteState) as err:
            simulate(naive_model(raw), np.zeros((50, 1)),
                     SimConfig(dt=1.0, horizon=50, x0=np.array([1.0])))
        assert 0 < err.value.step <= 50


def test_rollout_gradient_matches_finite_differences():
    model = random_model("dissipative", n=2, m=1, l=2, seed=7,
                         activation="sigmoid", hidden=(4,))
    rng = np.random.default_rng(8)
    u = rng.normal(size=(1, 3, 1))
    target = rng.normal(size=2)

    def loss_and_tape():
        tape = ad.Tape()
        states, _ = rollout(model, u, np.zeros(2), 0.1, tape)
        err = ad.subtract(states[-1], target)
        return tape, ad.sum_(ad.multiply(err, err))

    tape, loss = loss_and_tape()
    for net in (model.raw.f, model.raw.g, model.spec.l_net):
        grad = tape.grads(loss, 1.0, [tape.param(id(net), net.params)])[0]
        base = net.params.copy()
        eps = 1e-6
        for i in range(0, base.size, 5):
            net.params = base.copy(); net.params[i] += eps
            hi = float(ad.value_of(loss_and_tape()[1]))
            net.params = base.copy(); net.params[i] -= eps
            lo = float(ad.value_of(loss_and_tape()[1]))
            net.params = base
            numeric = (hi - lo) / (2 * eps)
            assert abs(grad[i] - numeric) <= 1e-4 * max(1.0, abs(numeric))


class TestTrajectoryFiles:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        traj = Trajectory(times=np.arange(6) * 0.1,
                          states=rng.normal(size=(6, 3)),
                          inputs=rng.normal(size=(5, 2)),
                          outputs=rng.normal(size=(6, 2)))
        path = tmp_path / "traj.csv"
        write_trajectory(path, traj)
        back = read_trajectory(path)
        assert np.array_equal(back.states, traj.states)
        assert np.array_equal(back.inputs, traj.inputs)
        assert np.array_equal(back.outputs, traj.outputs)
        assert np.array_equal(back.times, traj.times)

    def test_header_names(self, tmp_path):
        traj = Trajectory(times=np.arange(3) * 0.1, states=np.zeros((3, 1)),
                          inputs=np.zeros((2, 2)), outputs=np.zeros((3, 1)))
        path = tmp_path / "t.csv"
        write_trajectory(path, traj)
        header = open(path).readline().strip()
        assert header == "t,u_1,u_2,y_1,x_1"

    def test_bad_row_reports_index(self, tmp_path):
        path = tmp_path / "bad.csv"
        with open(path, "w") as fh:
            fh.write("t,u_1,y_1\n0,1,2\n0.1,1\n")
        with pytest.raises(FormatError, match="row 2"):
            read_trajectory(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        with open(path, "w") as fh:
            fh.write("u_1,y_1\n1,2\n")
        with pytest.raises(FormatError):
            read_trajectory(path)
