"""Shared builders for the test suite."""

import numpy as np

from dissipnet import linalg
from dissipnet.nets import affine_net, identity_affine, init_mlp
from dissipnet.projection import ProjectedModel, ProjectionSpec, RawDynamics
from dissipnet.supply import SupplyRate, preset, quadratic_storage


def random_psd(rng, dim, scale=1.0):
    g = rng.normal(size=(dim, dim))
    return linalg.symmetrize(g @ g.T) * scale


def random_nd(rng, dim, margin=0.2):
    return -(random_psd(rng, dim) + margin * np.eye(dim))


def random_supply(rng, l_dim, m_dim, kind="dissipative"):
    if kind == "conservative":
        return SupplyRate(random_nd(rng, l_dim), rng.normal(size=(l_dim, m_dim)),
                          np.zeros((m_dim, m_dim)))
    return SupplyRate(-random_psd(rng, l_dim) - 0.1 * np.eye(l_dim),
                      rng.normal(size=(l_dim, m_dim)),
                      random_psd(rng, m_dim))


def general_supply(rng, l_dim, m_dim):
    """Q negative definite with a strictly PSD ellipsoid radius."""
    q = random_nd(rng, l_dim)
    s = rng.normal(size=(l_dim, m_dim)) * 0.3
    base = linalg.symmetrize(-s.T @ np.linalg.inv(q) @ s)
    return SupplyRate(q, s, base + random_psd(rng, m_dim) + 0.1 * np.eye(m_dim))


def random_model(kind, n=3, m=2, l=2, seed=0, hidden=(8,), activation="relu",
                 supply=None, gamma2=2.0, j=None, with_eta=False):
    rng = np.random.default_rng(seed)
    raw = RawDynamics(
        f=init_mlp(n, n, list(hidden), activation, output_scale=0.1, rng=rng),
        g=init_mlp(n, n * m, list(hidden), activation, rng=rng,
                   output_bias="uniform"),
        h=init_mlp(n, l, list(hidden), activation, rng=rng),
        j=j,
    )
    if supply is None:
        if kind == "io_stable":
            supply = preset("io_stable", l, m, gamma2=gamma2)
        elif kind in ("stable", "naive"):
            supply = preset("stable", l, m)
        elif kind in ("passive_beta", "passive_alpha"):
            supply = preset("passive", l, m)
        elif kind == "conservative":
            supply = random_supply(rng, l, m, "conservative")
        elif kind == "general":
            supply = general_supply(rng, l, m)
        else:
            supply = random_supply(rng, l, m)
    l_net = None
    if kind in ("dissipative", "io_stable", "general"):
        l_net = init_mlp(n, m, list(hidden), activation, rng=rng)
    spec = ProjectionSpec(kind=kind, supply=supply, V=quadratic_storage(n),
                          l_net=l_net,
                          gamma2=gamma2 if kind == "io_stable" else None)
    eta = init_mlp(l, n, [], rng=rng) if with_eta else None
    return ProjectedModel(raw, spec, eta=eta)


def msd_true_model(kind="conservative", k=1.0, m_mass=1.0, c=1.0):
    """The analytic mass-spring-damper realized exactly by affine nets,
    paired with its energy storage and certificate supply rate."""
    a = np.array([[0.0, 1.0], [-k / m_mass, -c / m_mass]])
    b = np.array([0.0, 1.0 / m_mass])
    raw = RawDynamics(
        f=affine_net(a),
        g=affine_net(np.zeros((2, 2)), bias=b),  # g constant: bias-only, n*m=2
        h=identity_affine(2),
    )
    supply = preset("msd", 2, 1, damping=c)
    storage = quadratic_storage(2, P=np.diag([k, m_mass]))
    spec = ProjectionSpec(kind=kind, supply=supply, V=storage)
    return ProjectedModel(raw, spec)
