import numpy as np
import pytest

from dissipnet import autodiff as ad
from dissipnet import linalg
from dissipnet.errors import DimensionMismatch, InvalidPreset
from dissipnet.nets import affine_net, init_mlp, mlp_forward
from dissipnet.projection import (
    ProjectedModel,
    ProjectionSpec,
    RawDynamics,
    apply_projection_values,
    build_general_path,
    complement_projector,
    project_conservative,
    project_dissipative,
    project_general,
    project_io_stable,
    project_passive_alpha,
    project_passive_beta,
    project_stable,
    qme_build,
    qme_build_at,
)
from dissipnet.supply import SupplyRate, preset, quadratic_storage

from helpers import general_supply, msd_true_model, random_model, random_supply


def _value(v):
    return ad.value_of(v)


class TestComplementProjector:
    def test_annihilates_gradient_direction(self):
        out = complement_projector(np.array([1.0, 0.0]), np.array([1.0, 0.0]))
        assert np.allclose(out, [0.0, 0.0])

    def test_keeps_orthogonal_vector(self):
        out = complement_projector(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert np.allclose(out, [0.0, 1.0])

    def test_rank_one_decomposition(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            grad_v = rng.normal(size=4)
            vec = rng.normal(size=4)
            out = complement_projector(grad_v, vec)
            assert abs(grad_v @ out) <= 1e-9 * np.linalg.norm(grad_v) * \
                np.linalg.norm(vec) + 1e-12
            rebuilt = out + (grad_v @ vec) / (grad_v @ grad_v) * grad_v
            assert np.abs(rebuilt - vec).max() < 1e-10
            twice = complement_projector(grad_v, out)
            assert np.abs(twice - out).max() <= 1e-10


def _hand_setup():
    """n=2, m=1, l=1: constant f=(2,0), h=0, l(x)=1, V = ||x||^2 / 2."""
    raw = RawDynamics(
        f=affine_net(np.zeros((2, 2)), bias=[2.0, 0.0]),
        g=affine_net(np.zeros((2, 2))),
        h=affine_net(np.zeros((1, 2))),
    )
    l_net = affine_net(np.zeros((1, 2)), bias=[1.0])
    supply = SupplyRate(np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1))
    spec = ProjectionSpec("dissipative", supply, quadratic_storage(2),
                          l_net=l_net)
    return spec, raw


class TestDissipative:
    def test_hand_case(self):
        spec, raw = _hand_setup()
        f_d, g_d, h_d = project_dissipative(spec, raw, np.array([1.0, 0.0]))
        assert np.allclose(f_d, [-1.0, 0.0])
        assert np.allclose(g_d, [[-2.0], [0.0]])   # -2 grad_v l sqrt(R)
        assert np.allclose(h_d, [0.0])

    def test_matches_io_stable_under_its_preset(self):
        gamma2 = 2.0
        mio = random_model("io_stable", seed=3, gamma2=gamma2)
        spec_d = ProjectionSpec(
            "dissipative", preset("io_stable", mio.l_dim, mio.m_dim,
                                  gamma2=gamma2),
            mio.spec.V, l_net=mio.spec.l_net)
        md = ProjectedModel(RawDynamics(mio.raw.f, mio.raw.g, mio.raw.h), spec_d)
        rng = np.random.default_rng(4)
        for _ in range(50):
            x = rng.normal(size=mio.n_dim)
            va, vb = mio.eval(x), md.eval(x)
            assert np.abs(_value(va.f_d) - _value(vb.f_d)).max() <= 1e-12
            assert np.abs(_value(va.g_d) - _value(vb.g_d)).max() <= 1e-12

    def test_idempotent(self):
        model = random_model("dissipative", seed=5)
        rng = np.random.default_rng(6)
        for _ in range(50):
            x = rng.normal(size=(1, model.n_dim))
            vals = model.eval(x)
            f_2, g_2, h_2 = apply_projection_values(
                model.spec, _value(vals.grad_v), _value(vals.f_d),
                _value(vals.g_d), _value(vals.h_d), _value(vals.l_val))
            assert np.abs(_value(f_2) - _value(vals.f_d)).max() <= 1e-9
            assert np.abs(_value(g_2) - _value(vals.g_d)).max() <= 1e-9


class TestStable:
    def test_dead_zone_keeps_f(self):
        raw = RawDynamics(f=affine_net(np.zeros((2, 2)), bias=[-1.0, 0.0]),
                          g=affine_net(np.zeros((2, 2))),
                          h=affine_net(np.zeros((2, 2))))
        v = quadratic_storage(2)
        f_d, g_d, h_d = project_stable(v, raw, np.array([1.0, 0.0]))
        assert np.array_equal(f_d, [-1.0, 0.0])

    def test_clamp_case(self):
        raw = RawDynamics(f=affine_net(np.zeros((2, 2)), bias=[1.0, 0.0]),
                          g=affine_net(np.zeros((2, 2))),
                          h=affine_net(np.zeros((2, 2))))
        f_d, _, _ = project_stable(quadratic_storage(2), raw, np.array([1.0, 0.0]))
        assert np.allclose(f_d, [0.0, 0.0])

    def test_min_identity(self):
        model = random_model("stable", seed=7)
        rng = np.random.default_rng(8)
        for _ in range(100):
            x = rng.normal(size=model.n_dim)
            vals = model.eval(x)
            drift_raw = float(x @ _value(vals.f))
            drift_proj = float(x @ _value(vals.f_d))
            assert abs(drift_proj - min(drift_raw, 0.0)) <= 1e-10


class TestIoStable:
    def test_vanishing_correction(self):
        raw = RawDynamics(
            f=affine_net(np.eye(2), bias=[0.3, -0.2]),
            g=affine_net(np.random.default_rng(9).normal(size=(4, 2))),
            h=affine_net(np.zeros((2, 2))))
        l_net = affine_net(np.zeros((2, 2)))
        supply = preset("io_stable", 2, 2, gamma2=2.0)
        spec = ProjectionSpec("io_stable", supply, quadratic_storage(2),
                              l_net=l_net, gamma2=2.0)
        x = np.array([0.7, -1.1])
        f_d, g_d, _ = project_io_stable(spec, raw, x)
        f_raw = mlp_forward(raw.f, x)
        g_raw = np.swapaxes(mlp_forward(raw.g, x).reshape(2, 2), 0, 1)
        assert np.allclose(f_d, complement_projector(x, f_raw))
        for col in range(2):
            assert np.allclose(g_d[:, col],
                               complement_projector(x, g_raw[:, col]))

    def test_hamilton_jacobi_inequality(self):
        from dissipnet.verify import hj_check
        model = random_model("io_stable", seed=10, gamma2=2.0)
        xs = np.random.default_rng(11).standard_normal((500, model.n_dim))
        report = hj_check(model, xs, gamma=np.sqrt(2.0))
        assert report.passed


class TestConservative:
    def test_true_msd_is_fixed_point(self):
        model = msd_true_model("conservative")
        rng = np.random.default_rng(12)
        for _ in range(50):
            x = rng.normal(size=2)
            vals = model.eval(x)
            assert np.abs(_value(vals.f_d) - _value(vals.f)).max() <= 1e-9
            assert np.abs(_value(vals.g_d) - _value(vals.g)).max() <= 1e-9

    def test_zero_output_leaves_complement(self):
        raw = RawDynamics(
            f=affine_net(np.eye(2), bias=[0.5, 0.5]),
            g=affine_net(np.zeros((2, 2)), bias=[0.0, 1.0]),
            h=affine_net(np.zeros((2, 2))))
        w = SupplyRate(-np.eye(2), np.zeros((2, 1)), np.zeros((1, 1)))
        x = np.array([0.4, -0.9])
        f_d, _, _ = project_conservative(quadratic_storage(2), w, raw, x)
        assert np.allclose(f_d, complement_projector(x, mlp_forward(raw.f, x)))

    def test_energy_equality_along_rollout(self):
        from dissipnet.simulate import SimConfig, simulate
        from dissipnet.verify import supply_integral_prefix
        model = random_model("conservative", seed=13, activation="sigmoid")
        rng = np.random.default_rng(14)
        u = rng.normal(size=(100, model.m_dim)) * 0.5
        # start away from the origin, where grad V = 0 makes the projected
        # field singular whenever h(0) != 0
        x0 = np.ones(model.n_dim)
        traj = simulate(model, u, SimConfig(dt=1e-3, horizon=100, x0=x0))
        v_series = np.array([float(model.spec.V.value(x)) for x in traj.states])
        supplied = supply_integral_prefix(model.spec.supply, traj)
        dv = v_series[-1] - v_series[0]
        assert abs(dv - supplied[-1]) <= 1e-3 * (abs(dv) + 1.0)

    def test_requires_zero_r(self):
        with pytest.raises(InvalidPreset):
            ProjectionSpec("conservative",
                           SupplyRate(np.zeros((1, 1)), np.zeros((1, 1)),
                                      np.eye(1)),
                           quadratic_storage(2))


def _passive_raw(g_matrix, h_bias):
    return RawDynamics(
        f=affine_net(np.zeros((2, 2)), bias=[0.0, 0.0]),
        g=affine_net(np.zeros((2, 2)), bias=np.asarray(g_matrix).ravel(order="F")),
        h=affine_net(np.zeros((1, 2)), bias=h_bias),
    )


class TestPassiveBeta:
    def test_zero_correction_when_lure_holds(self):
        # grad V^T g = 1 = 2 h at x = (1, 0)
        raw = _passive_raw([[1.0], [0.7]], [0.5])
        v = quadratic_storage(2)
        x = np.array([1.0, 0.0])
        _, g_d, h_d = project_passive_beta(v, raw, x)
        assert np.allclose(g_d, [[1.0], [0.7]])
        assert np.allclose(h_d, [0.5])

    def test_hand_case(self):
        raw = _passive_raw([[1.0], [0.0]], [0.0])
        _, g_d, h_d = project_passive_beta(quadratic_storage(2), raw,
                                           np.array([1.0, 0.0]))
        assert np.allclose(g_d, [[0.0], [0.0]])
        assert np.allclose(h_d, [0.0])

    def test_lure_residual_and_idempotence(self):
        model = random_model("passive_beta", n=3, m=2, l=2, seed=15)
        rng = np.random.default_rng(16)
        for _ in range(50):
            x = rng.normal(size=model.n_dim)
            vals = model.eval(x)
            grad_v = _value(vals.grad_v)
            res = grad_v @ _value(vals.g_d) - 2.0 * _value(vals.h_d)
            assert np.abs(res).max() <= 1e-9
            assert float(grad_v @ _value(vals.f_d)) <= 1e-9
            f2, g2, h2 = apply_projection_values(
                model.spec, grad_v[None], _value(vals.f_d)[None],
                _value(vals.g_d)[None], _value(vals.h_d)[None],
                _value(vals.l_val)[None])
            assert np.abs(_value(g2)[0] - _value(vals.g_d)).max() <= 1e-9
            assert np.abs(_value(f2)[0] - _value(vals.f_d)).max() <= 1e-9

    def test_requires_square(self):
        model_raw = random_model("naive", n=3, m=1, l=2, seed=17).raw
        with pytest.raises(DimensionMismatch):
            project_passive_beta(quadratic_storage(3), model_raw, np.zeros(3))


class TestPassiveAlpha:
    def test_fixed_point_when_constraint_holds(self):
        raw = _passive_raw([[1.0], [0.3]], [0.5])
        x = np.array([1.0, 0.0])
        _, g_d, h_d = project_passive_alpha(quadratic_storage(2), raw, x)
        assert np.allclose(g_d, [[1.0], [0.3]])
        assert np.allclose(h_d, [0.5])

    def test_hand_case(self):
        raw = _passive_raw([[1.0], [0.0]], [0.0])
        _, g_d, h_d = project_passive_alpha(quadratic_storage(2), raw,
                                            np.array([2.0, 0.0]))
        assert np.allclose(g_d, [[0.5], [0.0]])
        assert np.allclose(h_d, [0.5])
        assert abs(np.array([2.0, 0.0]) @ g_d[:, 0] - 2.0 * h_d[0]) < 1e-12

    def test_matches_dense_qp_oracle(self):
        rng = np.random.default_rng(18)
        for _ in range(30):
            n, m = 4, 2
            grad_v = rng.normal(size=n)
            g = rng.normal(size=(n, m))
            h = rng.normal(size=m)
            f = rng.normal(size=n)
            f_d, g_d, h_d = [ _value(v)[0] for v in apply_projection_values(
                ProjectionSpec("passive_alpha", preset("passive", m, m),
                               quadratic_storage(n)),
                grad_v[None], f[None], g[None], h[None], np.zeros((1, m)))]
            # oracle: per-column equality-constrained least squares via KKT
            a = np.concatenate([grad_v, [-2.0]])
            kkt = np.block([[np.eye(n + 1), a[:, None]],
                            [a[None, :], np.zeros((1, 1))]])
            for col in range(m):
                z0 = np.concatenate([g[:, col], [h[col]]])
                sol = np.linalg.solve(kkt, np.concatenate([z0, [0.0]]))
                assert np.abs(sol[:n] - g_d[:, col]).max() <= 1e-9
                assert abs(sol[n] - h_d[col]) <= 1e-9

    def test_closer_than_beta_in_alpha_metric(self):
        rng = np.random.default_rng(19)
        for _ in range(30):
            n, m = 3, 2
            grad_v = rng.normal(size=n) * rng.uniform(0.5, 2)
            g = rng.normal(size=(n, m))
            h = rng.normal(size=m)
            f = rng.normal(size=n)
            spec_a = ProjectionSpec("passive_alpha", preset("passive", m, m),
                                    quadratic_storage(n))
            spec_b = ProjectionSpec("passive_beta", preset("passive", m, m),
                                    quadratic_storage(n))
            _, ga, ha = [ _value(v)[0] for v in apply_projection_values(
                spec_a, grad_v[None], f[None], g[None], h[None],
                np.zeros((1, m)))]
            _, gb, hb = [ _value(v)[0] for v in apply_projection_values(
                spec_b, grad_v[None], f[None], g[None], h[None],
                np.zeros((1, m)))]
            dist_a = np.sum((ga - g)**2) + np.sum((ha - h)**2)
            dist_b = np.sum((gb - g)**2) + np.sum((hb - h)**2)
            assert dist_a <= dist_b + 1e-12


class TestGeneral:
    def test_scalar_case(self):
        supply = SupplyRate(np.array([[-1.0]]), np.zeros((1, 1)), np.eye(1))
        gp = build_general_path(supply, np.array([[2.0]]))
        assert np.allclose(gp.j_d, [[1.0]])
        assert np.abs(gp.w_mat).max() <= 1e-9

    def test_center_stays_on_ellipsoid(self):
        supply = SupplyRate(np.array([[-2.0]]), np.array([[1.0]]),
                            np.array([[0.5]]))
        center = 0.5  # -Q^{-1} S
        gp = build_general_path(supply, np.array([[center]]))
        assert np.allclose(gp.j_d, [[center]])
        assert linalg.ellipsoid_membership_residual(gp.ellipsoid, gp.j_d) <= 1e-9

    def test_reduces_to_main_theorem_when_centered(self):
        l_dim = m = 2
        supply = SupplyRate(-np.eye(l_dim), np.zeros((l_dim, m)),
                            linalg.symmetrize(np.diag([1.0, 2.0])))
        model_g = random_model("general", n=3, m=m, l=l_dim, seed=20,
                               supply=supply, j=np.zeros((l_dim, m)))
        spec_d = ProjectionSpec("dissipative", supply, model_g.spec.V,
                                l_net=model_g.spec.l_net)
        model_d = ProjectedModel(
            RawDynamics(model_g.raw.f, model_g.raw.g, model_g.raw.h), spec_d)
        rng = np.random.default_rng(21)
        for _ in range(30):
            x = rng.normal(size=3)
            va, vb = model_g.eval(x), model_d.eval(x)
            assert np.abs(_value(va.f_d) - _value(vb.f_d)).max() <= 1e-10
            assert np.abs(_value(va.g_d) - _value(vb.g_d)).max() <= 1e-10

    def test_projected_j_membership(self):
        rng = np.random.default_rng(22)
        supply = general_supply(rng, 3, 2)
        j = rng.normal(size=(3, 2)) * 3.0
        gp = build_general_path(supply, j)
        assert linalg.ellipsoid_membership_residual(gp.ellipsoid, gp.j_d) <= 1e-8

    def test_rejects_bad_supply(self):
        with pytest.raises(InvalidPreset):
            build_general_path(SupplyRate(np.eye(1), np.zeros((1, 1)),
                                          np.eye(1)), None)
        with pytest.raises(InvalidPreset):
            build_general_path(SupplyRate(-np.eye(1), np.zeros((1, 1)),
                                          -np.eye(1)), None)

    def test_full_projection_via_op(self):
        rng = np.random.default_rng(23)
        supply = general_supply(rng, 2, 2)
        model = random_model("general", n=3, m=2, l=2, seed=24, supply=supply,
                             j=rng.normal(size=(2, 2)))
        f_d, g_d, h_d, j_d = project_general(model.spec, model.raw,
                                             rng.normal(size=3))
        assert f_d.shape == (3,) and g_d.shape == (3, 2) and j_d.shape == (2, 2)


class TestQme:
    def test_zero_instance(self):
        w = SupplyRate(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
        inst = qme_build(np.zeros(2), np.zeros(2), np.zeros((2, 1)),
                         np.zeros(1), None, np.zeros(1), np.zeros((1, 1)), w)
        res = inst.X.T @ inst.A @ inst.X + inst.B.T @ inst.X \
            + inst.X.T @ inst.B + inst.C
        assert np.all(inst.X == 0) and np.all(inst.C == 0)
        assert np.linalg.norm(res) == 0.0

    def test_analytic_msd_solves_qme(self):
        model = msd_true_model("conservative")
        rng = np.random.default_rng(25)
        for _ in range(20):
            inst = qme_build_at(model, rng.normal(size=2))
            res = inst.X.T @ inst.A @ inst.X + inst.B.T @ inst.X \
                + inst.X.T @ inst.B + inst.C
            assert np.linalg.norm(res) <= 1e-9

    def test_general_solution_instance(self):
        # assemble dynamics from the general-solution formulas with j placed
        # on the ellipsoid, then check the residual vanishes
        rng = np.random.default_rng(26)
        for _ in range(30):
            n, m, l_dim = 3, 2, 3
            grad_v = rng.normal(size=n)
            q = rng.normal(size=(l_dim, l_dim))
            big_q = -(q @ q.T) - 0.2 * np.eye(l_dim)
            s = rng.normal(size=(l_dim, m)) * 0.5
            w_mat = rng.normal(size=(m, m)) * 0.5
            crad_root = rng.normal(size=(m + 1, m))
            crad = crad_root.T @ crad_root
            r = linalg.symmetrize(s.T @ np.linalg.inv(big_q) @ s
                                  + w_mat.T @ w_mat + crad)
            w = SupplyRate(big_q, s, r)
            center = -np.linalg.inv(big_q) @ s
            theta = np.linalg.qr(rng.normal(size=(l_dim, m)))[0]
            j_hat = center + linalg.inv_sqrt_pd(-big_q) @ theta \
                @ linalg.psd_sqrt(crad)
            f_hat = rng.normal(size=n)
            g_hat = rng.normal(size=(n, m))
            h_hat = rng.normal(size=l_dim)
            l_val = rng.normal(size=m)
            d2 = grad_v @ grad_v
            comp = np.eye(n) - np.outer(grad_v, grad_v) / d2
            f = comp @ f_hat + grad_v * (h_hat @ big_q @ h_hat - l_val @ l_val) / d2
            g = comp @ g_hat + 2.0 * np.outer(
                grad_v, h_hat @ (s + big_q @ j_hat) - l_val @ w_mat) / d2
            inst = qme_build(grad_v, f, g, h_hat, j_hat, l_val, w_mat, w)
            res = inst.X.T @ inst.A @ inst.X + inst.B.T @ inst.X \
                + inst.X.T @ inst.B + inst.C
            assert np.linalg.norm(res) <= 1e-8


def test_idempotence_all_kinds():
    rng = np.random.default_rng(27)
    kinds = ["dissipative", "stable", "io_stable", "conservative",
             "passive_beta", "passive_alpha", "general"]
    for kind in kinds:
        model = random_model(kind, seed=28, j=(rng.normal(size=(2, 2)) * 2
                                               if kind == "general" else None))
        xs = rng.normal(size=(50, model.n_dim))
        vals = model.eval(xs)
        f2, g2, h2 = apply_projection_values(
            model.spec, _value(vals.grad_v), _value(vals.f_d),
            _value(vals.g_d), _value(vals.h_d), _value(vals.l_val))
        gap = max(np.abs(_value(f2) - _value(vals.f_d)).max(),
                  np.abs(_value(g2) - _value(vals.g_d)).max(),
                  np.abs(_value(h2) - _value(vals.h_d)).max())
        assert gap <= 1e-9, f"{kind} not idempotent: {gap}"


def test_projection_is_differentiable():
    model = random_model("dissipative", seed=29, activation="sigmoid")
    rng = np.random.default_rng(30)
    x = rng.normal(size=(1, model.n_dim))
    cot = rng.normal(size=(1, model.n_dim))
    net = model.raw.f

    def probe():
        tape = ad.Tape()
        vals = model.eval(x, tape)
        out = ad.sum_(ad.multiply(vals.f_d, cot))
        return tape, out

    tape, out = probe()
    grad = tape.grads(out, 1.0, [tape.param(id(net), net.params)])[0]
    base = net.params.copy()
    eps = 1e-6
    for i in range(0, base.size, 7):
        net.params = base.copy(); net.params[i] += eps
        hi = float(ad.value_of(probe()[1]))
        net.params = base.copy(); net.params[i] -= eps
        lo = float(ad.value_of(probe()[1]))
        net.params = base
        numeric = (hi - lo) / (2 * eps)
        assert abs(grad[i] - numeric) <= 1e-4 * max(1.0, abs(numeric))


def test_spec_validation():
    v = quadratic_storage(2)
    with pytest.raises(InvalidPreset):
        ProjectionSpec("stable", preset("stable", 2, 1), v,
                       l_net=init_mlp(2, 1, rng=0))
    with pytest.raises(InvalidPreset):
        ProjectionSpec("dissipative", preset("stable", 2, 1), v)
    with pytest.raises(InvalidPreset):
        ProjectionSpec("io_stable", preset("io_stable", 2, 1, gamma2=2.0), v,
                       l_net=init_mlp(2, 1, rng=0))
    with pytest.raises(InvalidPreset):
        ProjectionSpec("warp", preset("stable", 2, 1), v)
