import numpy as np
import pytest

from meshglm import (
    GroupContrast,
    Hyperparams,
    SessionData,
    averaging_contrast,
    fit_classical,
    fit_classical_multi,
    group_classical,
    group_posterior,
    marginal_loglik,
    make_grid_mesh,
    assemble_fem,
    optimize_hyperparams,
    posterior,
)
from meshglm.inference import load_fit_dir, save_fit_dir
from meshglm.spde import SpdeHyper, SpdeOperator


def whitened_session(design, bold):
    return SessionData(bold=bold, design=design, percent_scaled=True,
                       conditioned=True, whitened=True)


def random_whitened(rng, N, T, K, per_vertex=True):
    design = rng.standard_normal((N, T, K)) if per_vertex else rng.standard_normal((T, K))
    bold = rng.standard_normal((T, N))
    return whitened_session(design, bold)


class TestFitClassical:
    def test_exact_interpolation(self):
        rng = np.random.default_rng(0)
        T, N, K = 60, 4, 2
        design = rng.standard_normal((T, K))
        beta = np.array([1.0, 0.5])
        bold = np.tile(design @ beta, (N, 1)).T
        fit = fit_classical(whitened_session(design, bold))
        assert np.abs(fit.beta - beta[None, :]).max() < 1e-10
        assert fit.dof == T - K

    def test_noise_only_estimates_and_se_calibration(self):
        # Monte Carlo oracle: mean estimate near zero, reported standard
        # errors matching the empirical spread within 10 percent
        rng = np.random.default_rng(1)
        T, N, K = 80, 6, 1
        design = rng.standard_normal((T, K))
        betas, ses = [], []
        for _ in range(500):
            fit = fit_classical(
                whitened_session(design, rng.standard_normal((T, N))))
            betas.append(fit.beta)
            ses.append(fit.se)
        betas = np.array(betas)
        mean_se = np.mean(ses)
        assert np.abs(betas.mean(axis=0)).max() < 4 * mean_se / np.sqrt(500)
        assert betas.std() == pytest.approx(mean_se, rel=0.1)

    def test_duplicate_column_flagged(self):
        rng = np.random.default_rng(2)
        T, N = 50, 3
        col = rng.standard_normal(T)
        design = np.column_stack([col, col])
        fit = fit_classical(whitened_session(design, rng.standard_normal((T, N))))
        assert fit.undefined.all()
        assert np.isnan(fit.beta).all()


class TestFitClassicalMulti:
    def test_identical_runs_equal_single(self):
        rng = np.random.default_rng(3)
        s = random_whitened(rng, 5, 60, 2)
        multi = fit_classical_multi([s, s])
        single = fit_classical(s)
        assert np.allclose(multi.average.beta, single.beta)

    def test_opposite_runs_average_zero(self):
        rng = np.random.default_rng(4)
        design = rng.standard_normal((60, 1))
        y = rng.standard_normal((60, 4))
        m = fit_classical_multi([whitened_session(design, y),
                                 whitened_session(design, -y)])
        assert np.abs(m.average.beta).max() < 1e-12

    def test_average_se_shrinks_by_sqrt_two(self):
        rng = np.random.default_rng(5)
        s = random_whitened(rng, 5, 60, 1)
        multi = fit_classical_multi([s, s])
        single = fit_classical(s)
        assert np.allclose(multi.average.se, single.se / np.sqrt(2.0))

    def test_mismatched_runs_rejected(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError, match="disagree"):
            fit_classical_multi([random_whitened(rng, 5, 60, 1),
                                 random_whitened(rng, 6, 60, 1)])


class TestGroupClassical:
    def test_identical_subjects_flagged(self):
        rng = np.random.default_rng(7)
        f = fit_classical(random_whitened(rng, 4, 50, 1))
        g = group_classical([f, f, f])
        assert np.allclose(g.beta, f.beta)
        assert g.undefined.all()          # zero across-subject variance

    def test_two_subject_hand_example(self):
        # hand computation: values 1 and 3 give mean 2 and, with the M-1
        # denominator, sd = sqrt(2), se = sqrt(2)/sqrt(2) = 1, dof = 1
        f1 = fit_classical(whitened_session(np.ones((30, 1)),
                                            np.ones((30, 2))))
        a = type(f1)(beta=np.full((5, 1), 1.0), se=np.full((5, 1), 0.1), dof=29)
        b = type(f1)(beta=np.full((5, 1), 3.0), se=np.full((5, 1), 0.1), dof=29)
        g = group_classical([a, b])
        assert np.allclose(g.beta, 2.0)
        assert np.allclose(g.se, 1.0)
        assert g.dof == 1

    def test_subject_order_irrelevant(self):
        rng = np.random.default_rng(8)
        fits = [fit_classical(random_whitened(rng, 4, 50, 1)) for _ in range(4)]
        g1 = group_classical(fits)
        g2 = group_classical(fits[::-1])
        assert np.allclose(g1.beta, g2.beta)
        assert np.allclose(g1.se, g2.se)

    def test_single_subject_rejected(self):
        rng = np.random.default_rng(9)
        with pytest.raises(ValueError, match="two subjects"):
            group_classical([fit_classical(random_whitened(rng, 4, 50, 1))])


def small_problem(rng, N_mesh=(5, 6), T=30, K=2, J=2, sigma2=0.8):
    mesh = make_grid_mesh(*N_mesh)
    fem = assemble_fem(mesh)
    sessions = [random_whitened(rng, mesh.N, T, K) for _ in range(J)]
    theta = Hyperparams(kappa=(0.9,) * K, tau=(0.6,) * K, sigma2=sigma2)
    return mesh, fem, sessions, theta


class TestPosterior:
    def test_matches_dense_bayes_oracle(self):
        # dense oracle: build the full block design matrix explicitly and
        # use textbook Bayesian linear-model formulas
        rng = np.random.default_rng(10)
        mesh = make_grid_mesh(5, 6)   # 30 vertices
        fem = assemble_fem(mesh)
        N, K, J, T = mesh.N, 3, 2, 25
        theta = Hyperparams(kappa=(0.8, 1.1, 0.6), tau=(0.5, 0.9, 0.7),
                            sigma2=1.3)
        sessions = [random_whitened(rng, N, T, K) for _ in range(J)]
        post = posterior(sessions, fem, theta)

        op = SpdeOperator(fem)
        nlat = J * K * N
        prior = np.zeros((nlat, nlat))
        for j in range(J):
            for k in range(K):
                i0 = (j * K + k) * N
                prior[i0:i0 + N, i0:i0 + N] = op.precision(
                    SpdeHyper(theta.kappa[k], theta.tau[k])).toarray()
        rows = []
        xfull = np.zeros((J * N * T, nlat))
        r = 0
        for j, s in enumerate(sessions):
            for v in range(N):
                for t in range(T):
                    for k in range(K):
                        xfull[r, (j * K + k) * N + v] = s.design[v, t, k]
                    rows.append(s.bold[t, v])
                    r += 1
        y = np.array(rows)
        precision = prior + xfull.T @ xfull / theta.sigma2
        mean = np.linalg.solve(precision, xfull.T @ y / theta.sigma2)
        cov = np.linalg.inv(precision)
        assert np.abs(post.mean - mean).max() < 1e-8
        assert np.abs(post.dense_cov() - cov).max() < 1e-8
        assert np.abs(post.marginal_sd - np.sqrt(np.diag(cov))).max() < 1e-8

    def test_strong_prior_shrinks_to_zero(self):
        rng = np.random.default_rng(11)
        mesh, fem, sessions, _ = small_problem(rng)
        theta = Hyperparams(kappa=(0.9, 0.9), tau=(1e6, 1e6), sigma2=1.0)
        post = posterior(sessions, fem, theta)
        assert np.abs(post.mean).max() < 1e-6

    def test_vanishing_noise_recovers_classical(self):
        rng = np.random.default_rng(12)
        mesh = make_grid_mesh(5, 10)   # 50 vertices
        fem = assemble_fem(mesh)
        sess = random_whitened(rng, mesh.N, 40, 2)
        theta = Hyperparams(kappa=(0.9, 0.9), tau=(0.5, 0.5), sigma2=1e-9)
        post = posterior([sess], fem, theta)
        classical = fit_classical(sess)
        post_beta = post.mean.reshape(2, mesh.N).T
        assert np.abs(post_beta - classical.beta).max() < 1e-4

    def test_loglik_invariant_to_vertex_relabeling(self):
        rng = np.random.default_rng(13)
        mesh = make_grid_mesh(4, 5)
        fem = assemble_fem(mesh)
        sess = random_whitened(rng, mesh.N, 20, 1)
        theta = Hyperparams(kappa=(0.8,), tau=(0.7,), sigma2=1.1)
        base = marginal_loglik(SpdeOperator(fem), [sess], theta)

        perm = rng.permutation(mesh.N)
        inv = np.argsort(perm)
        from meshglm import SurfaceMesh

        # vertex v of the permuted mesh is vertex perm[v] of the original,
        # so triangles map through inv and per-vertex data through perm
        mesh_p = SurfaceMesh(mesh.vertices[perm], inv[mesh.triangles])
        fem_p = assemble_fem(mesh_p)
        sess_p = whitened_session(sess.design[perm], sess.bold[:, perm])
        other = marginal_loglik(SpdeOperator(fem_p), [sess_p], theta)
        assert other == pytest.approx(base, rel=1e-10)

    def test_run_average_of_identical_copies_dense_oracle(self):
        # with J identical copies and independent per-run fields, the
        # average field has the single-run posterior mean and 1/J times its
        # covariance (runs are conditionally independent)
        rng = np.random.default_rng(14)
        mesh = make_grid_mesh(4, 5)
        fem = assemble_fem(mesh)
        sess = random_whitened(rng, mesh.N, 25, 1)
        theta = Hyperparams(kappa=(0.9,), tau=(0.6,), sigma2=0.9)
        single = posterior([sess], fem, theta)
        double = posterior([sess, sess], fem, theta)
        avg = double.field(0)
        f_single = single.field(0)
        assert np.abs(avg.mean - f_single.mean).max() < 1e-10
        assert np.abs(avg.sd - f_single.sd / np.sqrt(2.0)).max() < 1e-10

    @pytest.mark.xfail(
        strict=True,
        reason="the average of independent per-run fields is not the same "
               "distribution as one run refit at noise variance sigma2/J; "
               "the posterior mean stays at the single-run shrinkage level",
    )
    def test_identical_copies_equal_single_run_at_reduced_noise(self):
        rng = np.random.default_rng(15)
        mesh = make_grid_mesh(4, 5)
        fem = assemble_fem(mesh)
        sess = random_whitened(rng, mesh.N, 25, 1)
        theta = Hyperparams(kappa=(0.9,), tau=(0.6,), sigma2=0.9)
        double = posterior([sess, sess], fem, theta)
        avg = double.field(0)
        reduced = Hyperparams(kappa=(0.9,), tau=(0.6,), sigma2=0.9 / 2)
        single = posterior([sess], fem, reduced)
        f = single.field(0)
        assert np.abs(avg.mean - f.mean).max() < 1e-8
        assert np.abs(avg.sd - f.sd).max() < 1e-8

    def test_field_selector_two_forms(self):
        rng = np.random.default_rng(16)
        mesh, fem, sessions, theta = small_problem(rng, J=2)
        post = posterior(sessions, fem, theta)
        run0 = post.field((0, 1))
        avg = post.field(1)
        manual = 0.5 * (post.field((0, 1)).mean + post.field((1, 1)).mean)
        assert np.allclose(avg.mean, manual)
        assert run0.mean.shape == (mesh.N,)

    def test_posterior_sampling_matches_moments(self):
        rng = np.random.default_rng(17)
        mesh, fem, sessions, theta = small_problem(rng, N_mesh=(4, 4), J=1)
        post = posterior(sessions, fem, theta)
        draws = post.sample(40000, seed=3)
        assert np.abs(draws.mean(axis=0) - post.mean).max() < 0.05
        assert np.abs(draws.std(axis=0) - post.marginal_sd).max() < 0.02

    def test_monte_carlo_sd_fallback_within_tolerance(self, monkeypatch):
        # above the dense cutoff the marginal sds come from a fixed seeded
        # Monte Carlo with a documented ~5% relative accuracy
        import meshglm.inference as inf

        rng = np.random.default_rng(24)
        mesh, fem, sessions, theta = small_problem(rng, J=2)
        exact = posterior(sessions, fem, theta)
        exact_sd = exact.marginal_sd.copy()
        exact_field = exact.field(0)

        monkeypatch.setattr(inf, "_DENSE_COV_CUTOFF", 1)
        monkeypatch.setattr(inf, "_MC_SD_SAMPLES", 4000)
        approx = posterior(sessions, fem, theta)
        assert approx.dense_cov() is None
        rel = np.abs(approx.marginal_sd / exact_sd - 1.0)
        assert rel.max() < 0.10
        approx_field = approx.field(0)
        rel_f = np.abs(approx_field.sd / exact_field.sd - 1.0)
        assert rel_f.max() < 0.10
        assert np.allclose(approx_field.mean, exact_field.mean)


class TestOptimizeHyperparams:
    def test_truth_is_locally_optimal(self):
        # started at the generating values, the optimizer must not drift away
        import meshglm as mg

        par = mg.block_paradigm(1, 200, 1.0)
        spec = mg.SimSpec(mesh={"kind": "grid", "nx": 10, "ny": 10},
                          paradigm=par, kappa=(0.8,), tau=(0.5,), sigma2=1.0,
                          ar_coeffs=(), baseline=0.0, add_nuisance=False,
                          seed=21)
        sim = mg.simulate_session(spec)
        truth = Hyperparams(kappa=(0.8,), tau=(0.5,), sigma2=1.0)
        res = optimize_hyperparams(sim.sessions, sim.fem, init=truth,
                                   restarts=1, max_evals=300, seed=0,
                                   mesh_diameter=sim.mesh.diameter())
        assert abs(np.log(res.theta.kappa[0]) - np.log(0.8)) < 0.3
        assert abs(np.log(res.theta.tau[0]) - np.log(0.5)) < 0.3
        assert abs(res.theta.sigma2 - 1.0) < 0.1

    @pytest.mark.slow
    def test_multi_run_estimates_less_variable_than_single_run(self):
        # Monte Carlo: hyperparameters shared across two runs are estimated
        # from twice the field information, so their spread over replicates
        # must not exceed the single-run spread
        import meshglm as mg

        kap, tau = 0.8, 0.45
        par = mg.block_paradigm(1, 250, 1.0)
        single, multi = [], []
        for rep in range(50):
            spec = mg.SimSpec(mesh={"kind": "grid", "nx": 10, "ny": 10},
                              paradigm=par, kappa=(kap,), tau=(tau,),
                              sigma2=1.0, ar_coeffs=(), n_runs=2,
                              baseline=0.0, add_nuisance=False,
                              seed=7000 + rep)
            sim = mg.simulate_session(spec)
            kwargs = dict(mesh_diameter=sim.mesh.diameter(), restarts=1,
                          max_evals=200, seed=rep)
            r1 = optimize_hyperparams(sim.sessions[:1], sim.fem, **kwargs)
            r2 = optimize_hyperparams(sim.sessions, sim.fem, **kwargs)
            single.append(np.log(r1.theta.kappa[0]))
            multi.append(np.log(r2.theta.kappa[0]))
        assert np.var(multi) <= np.var(single)

    def test_finds_optimum_from_default_init(self):
        # a single small field draw pins kappa only loosely, so the check is
        # that the search lands at least as high as the generating values,
        # with the tight recovery tolerances exercised at the larger scale
        # in the acceptance suite
        import meshglm as mg

        par = mg.block_paradigm(1, 300, 1.0)
        spec = mg.SimSpec(mesh={"kind": "grid", "nx": 12, "ny": 12},
                          paradigm=par, kappa=(0.7,), tau=(0.45,), sigma2=1.0,
                          ar_coeffs=(), baseline=0.0, add_nuisance=False,
                          seed=33)
        sim = mg.simulate_session(spec)
        res = optimize_hyperparams(sim.sessions, sim.fem,
                                   mesh_diameter=sim.mesh.diameter(),
                                   restarts=2, max_evals=400, seed=1)
        truth = Hyperparams(kappa=(0.7,), tau=(0.45,), sigma2=1.0)
        ll_truth = marginal_loglik(SpdeOperator(sim.fem), sim.sessions, truth)
        assert res.logml >= ll_truth - 0.5
        assert abs(np.log(res.theta.kappa[0]) - np.log(0.7)) < 1.0
        assert abs(np.log(res.theta.tau[0]) - np.log(0.45)) < 1.0
        assert abs(res.theta.sigma2 - 1.0) < 0.1
        assert res.logml == pytest.approx(
            marginal_loglik(SpdeOperator(sim.fem), sim.sessions, res.theta))


class TestGroupPosterior:
    def test_single_subject_unit_weight_identity(self):
        rng = np.random.default_rng(18)
        mesh, fem, sessions, theta = small_problem(rng, J=2)
        post = posterior(sessions, fem, theta)
        w = np.zeros((1, 2, 2))
        w[0, 1, 0] = 1.0
        gp = group_posterior([post], GroupContrast(weights=w.ravel()))
        direct = post.field((1, 0))
        assert np.allclose(gp.mean, direct.mean)
        assert np.allclose(gp.sd, direct.sd)

    def test_opposite_means_cancel(self):
        rng = np.random.default_rng(19)
        mesh, fem, sessions, theta = small_problem(rng, J=1, K=1)
        post = posterior(sessions, fem, theta)
        flipped = posterior(
            [whitened_session(sessions[0].design, -sessions[0].bold)],
            fem, theta)
        contrast = GroupContrast(weights=np.array([0.5, 0.5]))
        gp = group_posterior([post, flipped], contrast)
        assert np.abs(gp.mean).max() < 1e-10

    def test_averaging_contrast_matches_reported_pattern(self):
        # task 4 of 4 with two runs and 45 subjects: per-subject weights
        # (0,0,0,1/90,0,0,0,1/90)
        c = averaging_contrast(45, 2, 4, task=3)
        w = c.weights.reshape(45, 2, 4)
        per_subject = w[0].ravel()
        expected = np.array([0, 0, 0, 1 / 90, 0, 0, 0, 1 / 90])
        assert np.allclose(per_subject, expected)
        assert all(np.allclose(w[m].ravel(), expected) for m in range(45))
        assert c.weights.sum() == pytest.approx(1.0)

    def test_identical_subjects_covariance_scales_inverse_m(self):
        rng = np.random.default_rng(20)
        mesh, fem, sessions, theta = small_problem(rng, J=1, K=1)
        post = posterior(sessions, fem, theta)
        for M in (2, 5):
            contrast = averaging_contrast(M, 1, 1, task=0)
            gp = group_posterior([post] * M, contrast)
            f = post.field((0, 0))
            assert np.allclose(gp.mean, f.mean)
            assert np.allclose(gp.sd ** 2, f.sd ** 2 / M)

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(21)
        mesh, fem, sessions, theta = small_problem(rng, J=1, K=1)
        post = posterior(sessions, fem, theta)
        with pytest.raises(ValueError, match="contrast length"):
            group_posterior([post], GroupContrast(weights=np.ones(5)))

    def test_group_sampling_moments(self):
        rng = np.random.default_rng(22)
        mesh, fem, sessions, theta = small_problem(rng, N_mesh=(4, 4), J=1, K=1)
        post = posterior(sessions, fem, theta)
        gp = group_posterior([post, post], averaging_contrast(2, 1, 1, 0))
        draws = gp.sample(40000, seed=5)
        assert np.abs(draws.mean(axis=0) - gp.mean).max() < 0.05
        assert np.abs(draws.std(axis=0) - gp.sd).max() < 0.02


class TestContrastValidation:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="finite"):
            GroupContrast(weights=np.array([1.0, np.nan]))

    def test_rejects_all_zero(self):
        with pytest.raises(ValueError, match="nonzero"):
            GroupContrast(weights=np.zeros(4))


def test_fit_dir_roundtrip(tmp_path):
    rng = np.random.default_rng(23)
    beta = rng.normal(size=(7, 2))
    sd = np.abs(rng.normal(size=(7, 2))) + 0.1
    save_fit_dir(tmp_path / "fit", beta, sd,
                 theta={"mode": "classical", "dof": 55.0},
                 log={"note": "test"}, extras={"beta_run0": beta})
    back = load_fit_dir(tmp_path / "fit")
    assert np.array_equal(back["beta"], beta)
    assert np.array_equal(back["sd"], sd)
    assert back["theta"]["dof"] == 55.0
    assert back["log"]["note"] == "test"
