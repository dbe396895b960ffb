import numpy as np
import pytest

import rewardalign as ra
from rewardalign.kl_align import Net, proposal_law_discrete
from rewardalign.metrics import empirical_to_discrete, oracle_kl_tilt, tv_discrete
from rewardalign.validate import (random_discrete, random_maxaffine,
                                  random_orthogonal_rows, random_unit_ball)


def abs_function(R=1.0):
    f = ra.make_max_affine([(np.array([1.0]), 0.0), (np.array([-1.0]), 0.0)])
    f.radius = R
    return f


class TestBuildNet:
    def test_1d_covering_dense_sweep(self):
        net = ra.build_net(1, 1.0, 0.5)
        sweep = np.linspace(-1, 1, 10001)[:, None]
        dists = np.min(np.abs(sweep - net.points[:, 0]), axis=1)
        assert dists.max() <= 0.5 + 1e-12
        assert np.all(np.abs(net.points) <= 1.0 + 1e-12)

    def test_degenerate_radius(self):
        net = ra.build_net(3, 0.0, 0.1)
        assert net.m == 1
        assert np.all(net.points == 0.0)

    def test_2d_covering_random_points(self):
        net = ra.build_net(2, 1.0, 0.5)
        rng = np.random.default_rng(0)
        pts = random_unit_ball(rng, 10**4, 2)
        d2 = np.min(np.sum((pts[:, None, :] - net.points[None]) ** 2, axis=2),
                    axis=1)
        assert np.sqrt(d2.max()) <= 0.5 + 1e-12

    def test_boundary_projections_included(self):
        net = ra.build_net(1, 1.0, 0.3)
        assert np.any(np.isclose(np.abs(net.points[:, 0]), 1.0))

    def test_cardinality_cap(self):
        with pytest.raises(ra.BudgetError):
            ra.build_net(3, 10.0, 0.001)

    def test_cardinality_stays_reasonable(self):
        # grid spacing 2h/sqrt(k) keeps m below (1 + 2R/h)^k for k <= 4
        for k in (1, 2, 3):
            for LR in (0.5, 1.0, 2.0):
                L, R = LR, 1.0
                net = ra.build_net(k, R, 1.0 / (2 * L))
                assert net.m <= (1 + 4 * L * R) ** k * 2.2


class TestBuildEnvelope:
    def test_worked_abs_example(self):
        net = Net(points=np.array([[-1.0], [-0.5], [0.0], [0.5], [1.0]]),
                  h=0.5, k=1, R=1.0)
        env = ra.build_envelope(abs_function(), net)
        u = np.array([0.25])
        expected = 1 + np.log(2 * np.exp(-0.25) + 1 + 2 * np.exp(0.25))
        assert env.value(u) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(2.6343, abs=5e-5)
        assert 0.25 <= env.value(u) <= 0.25 + 1 + np.log(5) + 1e-12

    def test_affine_gap_is_exact(self):
        s, c = np.array([0.4, -0.2]), 0.3
        f = ra.make_max_affine([(s, c)])
        f.radius = 1.0
        net = ra.build_net(2, 1.0, 0.5)
        env = ra.build_envelope(f, net)
        rng = np.random.default_rng(1)
        us = random_unit_ball(rng, 100, 2)
        fv = np.asarray(f.value(us))
        assert np.allclose(env.value(us), fv + 1 + np.log(env.m), atol=1e-10)

    def test_sandwich_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            k = int(rng.integers(1, 4))
            L = float(rng.uniform(0.5, 1.5))
            R = float(rng.uniform(0.5, 1.5))
            f = random_maxaffine(rng, k, int(rng.integers(1, 6)), L, R)
            env = ra.build_envelope(f, ra.build_net(k, R, 1 / (2 * L)))
            us = random_unit_ball(rng, 1000, k, radius=R)
            fv = np.asarray(f.value(us))
            gv = env.value(us)
            assert np.all(fv <= gv + 1e-9)
            assert np.all(gv <= fv + env.gap_bound + 1e-9)

    def test_slope_bound_enforced(self):
        f = abs_function()
        f.lipschitz = 0.5  # lie about L
        net = Net(points=np.array([[0.8]]), h=1.0, k=1, R=1.0)
        with pytest.raises(ra.ValidationError):
            ra.build_envelope(f, net)


class TestComputeParams:
    def test_worked_example_m5(self):
        p = ra.compute_params(L=1.0, A_opnorm=1.0, C=1.0, m=5, eps=0.1)
        assert p.a0 == pytest.approx(np.exp(-1.0) / 5, rel=1e-12)
        assert p.N_rej == 201

    def test_worked_example_m1(self):
        p = ra.compute_params(L=1.0, A_opnorm=1.0, C=1.0, m=1, eps=1 - 1e-12)
        assert p.N_rej == 16

    def test_schedule_formulas(self):
        L, S, C, m, eps = 0.8, 1.3, 2.0, 7, 0.2
        p = ra.compute_params(L, S, C, m, eps)
        a0 = np.exp(-(1 + np.log(m)))
        L_a = 2 * L * S
        rho = min(eps**2 * a0 / (32 * C * (1 + 2 * C * L_a)),
                  a0 / (4 * max(1.0, L_a)))
        assert p.B == pytest.approx(1 + np.log(m))
        assert p.a0 == pytest.approx(a0)
        assert p.L_a == pytest.approx(L_a)
        assert p.rho == pytest.approx(rho)
        assert p.eps_lin == pytest.approx(rho / 2)
        assert p.eta == pytest.approx(min(0.5, rho**2 / (128 * C**2)))
        assert p.N_rej == int(np.ceil(2 / a0 * np.log(16 * C**2 / eps**2)))

    def test_eps_gate(self):
        with pytest.raises(ra.ValidationError):
            ra.compute_params(1.0, 1.0, 1.0, 5, eps=1.5)


class TestBuildProposal:
    def test_two_point_symmetric(self):
        base = ra.DiscreteModel([[-1.0], [1.0]], [0.5, 0.5], 1.0)
        env = ra.Envelope.from_pieces([[1.0], [-1.0]], [0.0, 0.0])
        prop = ra.build_proposal(base, env, np.eye(1), eta=0.1, delta=0.1,
                                 seed=0)
        assert prop.pi == pytest.approx([0.5, 0.5], abs=1e-14)
        assert np.exp(prop.log_zhat) == pytest.approx([np.cosh(1.0)] * 2,
                                                      rel=1e-12)
        # the mixture law equals the base here (density ~ 2 cosh at +-1)
        mixture = proposal_law_discrete(base, env, np.eye(1))
        assert tv_discrete(mixture, base) < 1e-14

    def test_single_component(self):
        base = ra.DiscreteModel([[0.0], [1.0]], [0.5, 0.5], 1.0)
        env = ra.Envelope.from_pieces([[1.0]], [0.0])
        prop = ra.build_proposal(base, env, np.eye(1), eta=0.1, delta=0.1)
        assert prop.pi == pytest.approx([1.0])

    def test_exact_backend_weights_match_direct_normalization(self):
        rng = np.random.default_rng(3)
        base = random_discrete(rng, 6, 2)
        env = ra.Envelope.from_pieces(rng.standard_normal((4, 2)) * 0.5,
                                      rng.uniform(-1, 1, 4))
        prop = ra.build_proposal(base, env, np.eye(2), eta=1e-9, delta=0.1)
        from rewardalign.tilts import log_normalizer_exact
        logits = env.offsets + np.array(
            [log_normalizer_exact(base, v) for v in prop.tilt_vectors])
        expect = np.exp(logits - logits.max())
        expect /= expect.sum()
        assert prop.pi == pytest.approx(expect, abs=1e-12)

    def test_mixture_identity_random(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            d = int(rng.integers(1, 4))
            k = int(rng.integers(1, 3))
            base = random_discrete(rng, int(rng.integers(2, 16)), d)
            A = random_orthogonal_rows(rng, k, d, op_norm=1.0)
            L = float(rng.uniform(0.4, 1.0))
            f = random_maxaffine(rng, k, int(rng.integers(1, 4)), L,
                                 base.support_radius)
            env = ra.build_envelope(f, ra.build_net(k, base.support_radius,
                                                    1 / (2 * L)))
            mixture = proposal_law_discrete(base, env, A)
            g_vals = env.value(base.atoms @ A.T)
            logits = np.log(base.probs) + g_vals
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            direct = ra.DiscreteModel(base.atoms, probs, base.support_radius)
            assert tv_discrete(mixture, direct) <= 1e-10


class TestSampleKLAligned:
    def test_two_atom_identity_reward(self):
        base = ra.DiscreteModel([[0.0], [1.0]], [0.5, 0.5], 1.0)
        f = ra.make_max_affine([(np.array([1.0]), 0.0)])
        f.radius = 1.0
        res = ra.sample_kl_aligned(base, np.eye(1), f, eps=0.1, delta=0.05,
                                   seed=17, n=10**5)
        p1 = np.mean(res.batch.points[:, 0] > 0.5)
        assert abs(p1 - np.e / (1 + np.e)) < 0.02
        assert res.fallback_count == 0

    def test_constant_reward_matches_base(self):
        base = ra.DiscreteModel([[-1.0], [0.0], [1.0]], [0.2, 0.5, 0.3], 1.0)
        f = ra.make_max_affine([(np.array([0.0]), 2.0)])
        f.lipschitz = 0.0
        res = ra.sample_kl_aligned(base, np.eye(1), f, eps=0.1, delta=0.05,
                                   seed=8, n=10**5)
        assert res.used_base_shortcut
        emp = empirical_to_discrete(res.batch.points, 1.0)
        assert tv_discrete(emp, base) <= 0.02

    def test_concave_reward_rejected(self):
        base = ra.DiscreteModel([[0.0], [1.0]], [0.5, 0.5], 1.0)
        f = ra.LowDimFunction(value=lambda u: -float(np.sum(u**2)), k=1,
                              lipschitz=2.0, radius=1.0,
                              grad=lambda u: -2 * u, convex=False)
        with pytest.raises(ra.ValidationError):
            ra.sample_kl_aligned(base, np.eye(1), f, eps=0.1, delta=0.05,
                                 seed=0)

    def test_broken_oracle_detected(self):
        base = ra.DiscreteModel([[0.0], [1.0]], [0.5, 0.5], 1.0)

        # impure oracle: scalar queries (envelope construction) see |u|,
        # batch queries (acceptance) see |u| + 5, so the envelope built
        # from the scalar answers cannot dominate the acceptance values
        def two_faced(u):
            u = np.asarray(u, dtype=float)
            if u.ndim > 1:
                return np.abs(u[:, 0]) + 5.0
            return float(np.abs(u[0]))

        f = ra.LowDimFunction(value=two_faced, k=1, lipschitz=1.0, radius=1.0,
                              grad=lambda u: np.array([np.sign(u[0])]),
                              convex=True)
        with pytest.raises(ra.EnvelopeViolationError):
            ra.sample_kl_aligned(base, np.eye(1), f, eps=0.1, delta=0.05,
                                 seed=0, n=100)

    def test_matches_oracle_small_instance(self):
        rng = np.random.default_rng(5)
        base = random_discrete(rng, 8, 2)
        A = random_orthogonal_rows(rng, 1, 2, op_norm=1.0)
        f = random_maxaffine(rng, 1, 3, L=1.0, R=base.support_radius)
        res = ra.sample_kl_aligned(base, A, f, eps=0.1, delta=0.05, seed=6,
                                   n=4 * 10**4)
        reward = ra.LowRankReward(A, f)
        target = oracle_kl_tilt(base, reward)
        emp = empirical_to_discrete(res.batch.points, base.support_radius)
        assert tv_discrete(emp, target) <= 0.03

    def test_logsumexp_self_reward_constant_acceptance(self):
        rng = np.random.default_rng(6)
        base = random_discrete(rng, 6, 2)
        reward = ra.LogSumExpReward([1.0, 0.7], [[0.5], [-0.5]],
                                    random_orthogonal_rows(rng, 1, 2))
        env = ra.Envelope.from_pieces(*reward.envelope_pieces())
        res = ra.sample_kl_aligned(base, reward.A, reward.f, eps=0.3,
                                   delta=0.05, seed=7, n=2000, envelope=env)
        # acceptance = 1/e exactly, so the empirical rate concentrates there
        assert abs(res.acceptance_rate - np.exp(-1)) < 0.03

    def test_diffusion_backend_end_to_end(self):
        # oracle-only pipeline: tilted-score reverse diffusion inside the
        # rejection loop; coarse accuracy target keeps the run short
        base = ra.DiscreteModel([[0.0], [1.0]], [0.5, 0.5], 1.0)
        f = ra.make_max_affine([(np.array([1.0]), 0.0)])
        f.radius = 1.0
        res = ra.sample_kl_aligned(base, np.eye(1), f, eps=0.3, delta=0.1,
                                   seed=5, n=400, backend="diffusion")
        p1 = np.mean(res.batch.points[:, 0] > 0.5)
        assert abs(p1 - np.e / (1 + np.e)) < 0.08
        rep = res.report()
        assert rep["backend"] == "diffusion"
        assert rep["diffusion_steps"] > 0
        assert np.all(np.abs(res.batch.points) <= 1.0 + 1e-12)

    def test_determinism(self):
        base = ra.DiscreteModel([[0.0], [1.0]], [0.5, 0.5], 1.0)
        f = ra.make_max_affine([(np.array([1.0]), 0.0)])
        f.radius = 1.0
        r1 = ra.sample_kl_aligned(base, np.eye(1), f, eps=0.1, delta=0.05,
                                  seed=99, n=500)
        r2 = ra.sample_kl_aligned(base, np.eye(1), f, eps=0.1, delta=0.05,
                                  seed=99, n=500)
        assert np.array_equal(r1.batch.points, r2.batch.points)

    def test_acceptance_floor_on_draws(self):
        rng = np.random.default_rng(8)
        base = random_discrete(rng, 10, 2)
        A = random_orthogonal_rows(rng, 2, 2, op_norm=1.2)
        f = random_maxaffine(rng, 2, 4, L=0.8,
                             R=1.2 * base.support_radius)
        env = ra.build_envelope(
            f, ra.build_net(2, 1.2 * base.support_radius, 1 / 1.6))
        prop = ra.build_proposal(base, env, A, eta=1e-9, delta=0.1, seed=rng)
        comps = rng.choice(env.m, size=500, p=prop.pi)
        for i in np.unique(comps):
            tilted = ra.tilt_exact(base, prop.tilt_vectors[i])
            pts = ra.sample_exact(tilted, int((comps == i).sum()), rng).points
            u = pts @ A.T
            acc = np.exp(np.asarray(f.value(u)) - env.value(u))
            assert np.all(acc >= env.acceptance_floor - 1e-9)
            assert np.all(acc <= 1.0 + 1e-9)
