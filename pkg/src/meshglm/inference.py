"""Classical and spatial Bayesian GLM estimation.

The classical route fits an independent least-squares model per vertex.
The Bayesian route places one GMRF prior per task on the latent amplitude
fields (shared across runs), picks hyperparameters by maximizing the exact
Gaussian marginal likelihood, and returns the exact Gaussian posterior of
all latent fields. Group-level results combine independent subject
posteriors through a contrast vector.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sciopt
from scipy import sparse

from .spde import SparseCholesky, SpdeHyper, SpdeOperator

_DENSE_COV_CUTOFF = 4096
_MC_SD_SAMPLES = 1000  # fallback marginal-sd estimate, ~5% relative accuracy
_RANK_RTOL = 1e-10


@dataclass(frozen=True)
class Hyperparams:
    """Per-task (kappa_k, tau_k) plus the shared noise variance."""

    kappa: tuple
    tau: tuple
    sigma2: float

    def __post_init__(self):
        if len(self.kappa) != len(self.tau):
            raise ValueError("kappa and tau must have one entry per task")
        if any(k <= 0 for k in self.kappa) or any(t <= 0 for t in self.tau):
            raise ValueError("kappa and tau must be positive")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")

    @property
    def n_tasks(self):
        return len(self.kappa)

    def to_vector(self):
        return np.concatenate(
            [np.log(self.kappa), np.log(self.tau), [np.log(self.sigma2)]]
        )

    @classmethod
    def from_vector(cls, x, n_tasks):
        x = np.asarray(x, dtype=float)
        return cls(
            kappa=tuple(np.exp(x[:n_tasks])),
            tau=tuple(np.exp(x[n_tasks:2 * n_tasks])),
            sigma2=float(np.exp(x[2 * n_tasks])),
        )


@dataclass
class ClassicalFit:
    """Vertex-wise least-squares estimates with standard errors."""

    beta: np.ndarray           # (N, K)
    se: np.ndarray             # (N, K)
    dof: float
    residuals: np.ndarray | None = None   # (T, N)
    undefined: np.ndarray | None = None   # (N,) rank-deficient or excluded

    @property
    def n_vertices(self):
        return self.beta.shape[0]

    @property
    def n_tasks(self):
        return self.beta.shape[1]


@dataclass
class MultiRunFit:
    runs: list
    average: ClassicalFit


def _design_crossprods(session):
    """Per-vertex X'X (N, K, K) and X'y (N, K) for shared or whitened designs."""
    y = session.bold
    x = session.design
    if x.ndim == 2:
        xtx = np.einsum("tk,tl->kl", x, x)
        xtx = np.broadcast_to(xtx, (y.shape[1],) + xtx.shape)
        xty = np.einsum("tk,tn->nk", x, y)
    else:
        xtx = np.einsum("ntk,ntl->nkl", x, x)
        xty = np.einsum("ntk,tn->nk", x, y)
    return xtx, xty


def fit_classical(session) -> ClassicalFit:
    """Per-vertex OLS with whitened-residual standard errors, dof = T - K.

    Rank-deficient designs at a vertex leave its coefficients undefined
    (NaN) and flag the vertex.
    """
    y = session.bold
    T, n = y.shape
    K = session.n_tasks
    if T <= K:
        raise ValueError(f"need more volumes than regressors, T={T}, K={K}")
    xtx, xty = _design_crossprods(session)

    ev = np.linalg.eigvalsh(xtx)
    bad = ev[:, 0] <= _RANK_RTOL * np.maximum(ev[:, -1], np.finfo(float).tiny)
    if session.excluded is not None:
        bad = bad | session.excluded
    xtx_safe = np.where(bad[:, None, None], np.eye(K)[None], xtx)
    beta = np.linalg.solve(xtx_safe, xty[:, :, None])[:, :, 0]
    xtx_inv = np.linalg.inv(xtx_safe)

    if session.design.ndim == 2:
        fitted = session.design @ beta.T
    else:
        fitted = np.einsum("ntk,nk->tn", session.design, beta)
    resid = y - fitted
    dof = T - K
    s2 = np.einsum("tn,tn->n", resid, resid) / dof
    se = np.sqrt(s2[:, None] * np.einsum("nkk->nk", xtx_inv))
    beta = np.where(bad[:, None], np.nan, beta)
    se = np.where(bad[:, None], np.nan, se)
    return ClassicalFit(beta=beta, se=se, dof=dof, residuals=resid, undefined=bad)


def fit_classical_multi(sessions) -> MultiRunFit:
    """Per-run classical fits plus their across-run average.

    The average combines runs as independent estimates: mean of beta,
    se = sqrt(sum se_j^2) / J.
    """
    sessions = list(sessions)
    if not sessions:
        raise ValueError("need at least one session")
    shapes = {(s.n_vertices, s.n_tasks) for s in sessions}
    if len(shapes) > 1:
        raise ValueError(f"sessions disagree on (N, K): {sorted(shapes)}")
    fits = [fit_classical(s) for s in sessions]
    J = len(fits)
    beta = np.mean([f.beta for f in fits], axis=0)
    se = np.sqrt(np.sum([f.se ** 2 for f in fits], axis=0)) / J
    undefined = np.any([f.undefined for f in fits], axis=0)
    avg = ClassicalFit(
        beta=beta, se=se, dof=float(sum(f.dof for f in fits)),
        residuals=None, undefined=undefined,
    )
    return MultiRunFit(runs=fits, average=avg)


def group_classical(fits) -> ClassicalFit:
    """Vertex-wise mean across subjects with one-sample t machinery.

    se = sample sd / sqrt(M) (M - 1 denominator), dof = M - 1. Vertices
    with zero across-subject variance get se = 0 and are flagged.
    """
    fits = list(fits)
    M = len(fits)
    if M < 2:
        raise ValueError("group analysis needs at least two subjects")
    shapes = {f.beta.shape for f in fits}
    if len(shapes) > 1:
        raise ValueError(f"subjects disagree on (N, K): {sorted(shapes)}")
    stack = np.stack([f.beta for f in fits])
    beta = stack.mean(axis=0)
    sd = stack.std(axis=0, ddof=1)
    se = sd / np.sqrt(M)
    undefined = np.any([f.undefined for f in fits], axis=0) | np.any(
        ~np.isfinite(stack), axis=(0, 2)
    )
    undefined = undefined | np.any(se == 0.0, axis=1)
    return ClassicalFit(beta=beta, se=se, dof=M - 1, residuals=None,
                        undefined=undefined)


# ---------------------------------------------------------------------------
# Bayesian model: evidence, posterior, group combination
# ---------------------------------------------------------------------------

class _ModelData:
    """Per-run sufficient statistics reused across likelihood evaluations."""

    def __init__(self, op: SpdeOperator, sessions):
        self.op = op
        self.J = len(sessions)
        self.n = op.n
        xtx, xty = [], []
        for j, s in enumerate(sessions):
            if s.n_vertices != op.n:
                raise ValueError(
                    f"run {j} has {s.n_vertices} vertices, mesh has {op.n}"
                )
            a, b = _design_crossprods(s)
            xtx.append(a)
            xty.append(b)
        self.K = xtx[0].shape[-1]
        if any(a.shape[-1] != self.K for a in xtx):
            raise ValueError("runs disagree on task count")
        self.xtx = xtx
        self.xty = xty
        self.yty = float(sum(np.sum(s.bold ** 2) for s in sessions))
        self.n_obs = sum(s.n_volumes * s.n_vertices for s in sessions)

    def _build_pattern(self):
        """Precompute the sparsity structure of the joint precision once.

        The structure is blockdiag(prior pattern) over (run, task) plus
        vertex-diagonal entries coupling task blocks within each run;
        hyperparameter changes only modify data values on this pattern.
        """
        J, K, n = self.J, self.K, self.n
        size = J * K * n
        q_csr = sparse.csr_matrix(
            (np.ones_like(self.op._c_data), self.op._indices, self.op._indptr),
            shape=(n, n),
        ).tocoo()
        rows, cols = [], []
        for b in range(J * K):
            rows.append(q_csr.row + b * n)
            cols.append(q_csr.col + b * n)
        vec = np.arange(n)
        for j in range(J):
            for k in range(K):
                for l in range(K):
                    rows.append(vec + (j * K + k) * n)
                    cols.append(vec + (j * K + l) * n)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        proto = sparse.csc_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(size, size)
        )
        proto.sum_duplicates()
        proto.sort_indices()
        # global keys ascending for canonical CSC: column-major order
        keys = (
            np.repeat(np.arange(size), np.diff(proto.indptr)).astype(np.int64)
            * size + proto.indices
        )

        def positions(r, c):
            pos = np.searchsorted(keys, c.astype(np.int64) * size + r)
            return pos

        self._p_indices = proto.indices
        self._p_indptr = proto.indptr
        self._p_size = size
        self._p_nnz = keys.size
        self._q_pos = [
            positions(q_csr.row + b * n, q_csr.col + b * n) for b in range(J * K)
        ]
        self._diag_pos = {
            (j, k, l): positions(vec + (j * K + k) * n, vec + (j * K + l) * n)
            for j in range(J) for k in range(K) for l in range(K)
        }

    def assemble(self, theta: Hyperparams):
        """Joint conditional precision P and information vector b = X'y.

        Latent layout is (run, task, vertex) raveled in C order: one
        length-N field per run and task, all runs sharing the per-task
        prior precision. P = blockdiag(priors) + X'X / sigma2, where the
        data term is diagonal over vertices and couples task blocks only
        within a run.
        """
        J, K, n = self.J, self.K, self.n
        if theta.n_tasks != K:
            raise ValueError(f"theta has {theta.n_tasks} tasks, data has {K}")
        if not hasattr(self, "_p_indptr"):
            self._build_pattern()
        sig2 = theta.sigma2
        data = np.zeros(self._p_nnz)
        op = self.op
        for k in range(K):
            k2 = theta.kappa[k] ** 2
            qdata = theta.tau[k] ** 2 * (
                k2 * k2 * op._c_data + 2.0 * k2 * op._g_data + op._gcg_data
            )
            for j in range(J):
                data[self._q_pos[j * K + k]] += qdata
        for j in range(J):
            for k in range(K):
                for l in range(K):
                    data[self._diag_pos[(j, k, l)]] += self.xtx[j][:, k, l] / sig2
        P = sparse.csc_matrix(
            (data, self._p_indices, self._p_indptr),
            shape=(self._p_size, self._p_size),
        )
        b = np.stack([xty.T for xty in self.xty])  # (J, K, n)
        return P, b.ravel()

    def loglik(self, theta: Hyperparams) -> float:
        sig2 = theta.sigma2
        P, b = self.assemble(theta)
        fac = SparseCholesky(P)
        m = fac.solve(b / sig2)
        logdet_prior = self.J * sum(
            self.op.logdet(SpdeHyper(theta.kappa[k], theta.tau[k]))
            for k in range(theta.n_tasks)
        )
        quad = self.yty / sig2 - float(m @ (b / sig2))
        return -0.5 * (
            self.n_obs * np.log(2.0 * np.pi * sig2)
            - logdet_prior + fac.logdet() + quad
        )


def marginal_loglik(op: SpdeOperator, sessions, theta: Hyperparams) -> float:
    """Exact log marginal likelihood of the linear-Gaussian model."""
    return _ModelData(op, list(sessions)).loglik(theta)


def _default_init(op, sessions, n_tasks, mesh_diameter):
    """Heuristic starting point: spatial range at a fifth of the mesh extent,
    prior variance matched to the classical estimate spread, noise variance
    from classical residuals."""
    fits = [fit_classical(s) for s in sessions]
    beta = np.nanmean([f.beta for f in fits], axis=0)
    resid_var = np.nanmean([
        np.nanmean(f.se ** 2 * f.dof, axis=0) for f in fits
    ])
    rng_scale = max(mesh_diameter / 5.0, 1e-3)
    kappa0 = np.sqrt(8.0) / rng_scale
    var_beta = np.nanvar(beta, axis=0)
    var_beta = np.where(np.isfinite(var_beta) & (var_beta > 1e-6), var_beta, 1.0)
    # alpha=2 field on a 2-manifold: marginal variance ~ 1 / (4 pi kappa^2 tau^2)
    tau0 = 1.0 / (kappa0 * np.sqrt(4.0 * np.pi * var_beta))
    sig0 = float(np.clip(np.nanmean(resid_var), 1e-4, None)) if np.isfinite(resid_var) else 1.0
    return Hyperparams(
        kappa=tuple([float(kappa0)] * n_tasks),
        tau=tuple(float(t) for t in tau0),
        sigma2=sig0,
    )


@dataclass
class HyperOptResult:
    theta: Hyperparams
    converged: bool
    logml: float
    n_evals: int
    trace: list = field(default_factory=list)


def optimize_hyperparams(
    sessions,
    fem,
    *,
    mesh_diameter=None,
    init=None,
    restarts=3,
    max_evals=500,
    ftol=1e-6,
    jitter_sd=0.3,
    seed=0,
) -> HyperOptResult:
    """Empirical Bayes: maximize the marginal likelihood over log-parameters.

    Derivative-free simplex search restarted from jittered copies of the
    initial point; hyperparameters are shared across runs. On failure to
    converge the best value found is returned with ``converged=False``.
    """
    sessions = list(sessions)
    op = SpdeOperator(fem)
    K = sessions[0].n_tasks
    if mesh_diameter is None:
        # fall back to a unit-spacing guess from the vertex count
        mesh_diameter = float(np.sqrt(2.0) * np.sqrt(op.n))
    theta0 = init if init is not None else _default_init(op, sessions, K, mesh_diameter)
    x0 = theta0.to_vector()

    data = _ModelData(op, sessions)
    trace = []

    def objective(x):
        if np.any(np.abs(x) > 30):
            return 1e300
        theta = Hyperparams.from_vector(x, K)
        try:
            val = -data.loglik(theta)
        except (np.linalg.LinAlgError, RuntimeError):
            return 1e300
        trace.append(float(val))
        return val

    rng = np.random.default_rng(seed)
    best = None
    converged = False
    total_evals = 0
    for r in range(max(1, restarts)):
        if r == 0:
            start = x0
        else:
            # jitter around the incumbent so later restarts polish it
            start = best.x + rng.normal(scale=jitter_sd, size=x0.shape)
        simplex = np.vstack([start, start + 0.25 * np.eye(start.size)])
        res = sciopt.minimize(
            objective,
            start,
            method="Nelder-Mead",
            options={"fatol": ftol, "xatol": 1e-4, "maxfev": max_evals,
                     "adaptive": True, "initial_simplex": simplex},
        )
        total_evals += res.nfev
        converged = converged or bool(res.success)
        if best is None or res.fun < best.fun:
            best = res
    theta = Hyperparams.from_vector(best.x, K)
    return HyperOptResult(
        theta=theta,
        converged=converged,
        logml=-float(best.fun),
        n_evals=total_evals,
        trace=trace,
    )


class MarginalField:
    """Gaussian field over vertices: mean, marginal sd, joint sampling."""

    def __init__(self, mean, sd, sampler):
        self.mean = np.asarray(mean, dtype=float)
        self.sd = np.asarray(sd, dtype=float)
        self._sampler = sampler

    @property
    def n_vertices(self):
        return self.mean.shape[0]

    def sample(self, n_samples, seed):
        return self.sample_with_rng(n_samples, np.random.default_rng(seed))

    def sample_with_rng(self, n_samples, rng):
        return self._sampler(n_samples, rng)

    def field(self, selector=None):
        if selector is not None:
            raise ValueError("this field does not support sub-selection")
        return self


class PosteriorField:
    """Exact Gaussian posterior of all latent fields.

    mean and precision live on the (run, task, vertex) layout. Marginal
    standard deviations come from the dense inverse when the latent
    dimension is moderate, otherwise from a fixed seeded Monte Carlo
    (about 5% relative accuracy).
    """

    def __init__(self, mean, precision, layout, hyper):
        self.mean = np.asarray(mean, dtype=float)
        self.precision = sparse.csc_matrix(precision)
        self.layout = tuple(layout)           # (J, K, N)
        self.hyper = hyper
        self._factor = None
        self._cov = None
        self._marg_sd = None

    @property
    def n_latent(self):
        return self.mean.shape[0]

    def factor(self) -> SparseCholesky:
        if self._factor is None:
            self._factor = SparseCholesky(self.precision)
        return self._factor

    def dense_cov(self):
        if self._cov is None and self.n_latent <= _DENSE_COV_CUTOFF:
            eye = np.eye(self.n_latent)
            self._cov = self.factor().solve(eye)
            self._cov = 0.5 * (self._cov + self._cov.T)
        return self._cov

    @property
    def marginal_sd(self):
        if self._marg_sd is None:
            cov = self.dense_cov()
            if cov is not None:
                self._marg_sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
            else:
                draws = self.factor().sample(
                    _MC_SD_SAMPLES, np.random.default_rng(0)
                )
                self._marg_sd = draws.std(axis=0, ddof=1)
        return self._marg_sd

    def sample(self, n_samples, seed):
        rng = np.random.default_rng(seed)
        return self.factor().sample(n_samples, rng, mean=self.mean)

    def combination(self, weights) -> MarginalField:
        """Field w'beta per vertex for block weights of shape (J, K)."""
        J, K, n = self.layout
        w = np.asarray(weights, dtype=float).reshape(J * K)
        mean3 = self.mean.reshape(J * K, n)
        mean = w @ mean3
        cov = self.dense_cov()
        if cov is not None:
            # exact N x N covariance of the combined field; joint samples
            # come from its Cholesky factor (computed lazily)
            cov4 = cov.reshape(J * K, n, J * K, n)
            cov_c = np.einsum("anbm,a,b->nm", cov4, w, w)
            var = np.diag(cov_c).copy()
            chol_cache = []

            def sampler(n_samples, rng):
                if not chol_cache:
                    try:
                        chol_cache.append(np.linalg.cholesky(cov_c))
                    except np.linalg.LinAlgError:
                        bump = 1e-12 * max(float(var.max()), 1.0)
                        chol_cache.append(np.linalg.cholesky(
                            cov_c + bump * np.eye(n)))
                z = rng.standard_normal((n_samples, n))
                return mean[None, :] + z @ chol_cache[0].T
        else:
            draws = self.factor().sample(_MC_SD_SAMPLES, np.random.default_rng(0))
            var = (draws.reshape(-1, J * K, n) * w[None, :, None]).sum(axis=1).var(
                axis=0, ddof=1
            )

            def sampler(n_samples, rng):
                latent = self.factor().sample(n_samples, rng, mean=self.mean)
                return np.einsum("sbn,b->sn", latent.reshape(-1, J * K, n), w)

        sd = np.sqrt(np.maximum(var, 0.0))
        return MarginalField(mean, sd, sampler)

    def field(self, selector) -> MarginalField:
        """Select a run/task field or the cross-run average of a task.

        selector: (j, k) for a single run-task field, or an int k for the
        average of task k across runs.
        """
        J, K, _ = self.layout
        w = np.zeros((J, K))
        if isinstance(selector, tuple):
            j, k = selector
            w[j, k] = 1.0
        else:
            w[:, int(selector)] = 1.0 / J
        return self.combination(w)

    def run_average_summary(self):
        """(N, K) posterior mean and sd of the cross-run average fields."""
        J, K, n = self.layout
        means = np.empty((n, K))
        sds = np.empty((n, K))
        for k in range(K):
            f = self.field(k)
            means[:, k] = f.mean
            sds[:, k] = f.sd
        return means, sds


def posterior(sessions, fem, theta: Hyperparams) -> PosteriorField:
    """Exact Gaussian posterior given hyperparameters."""
    sessions = list(sessions)
    op = SpdeOperator(fem)
    P, b = _ModelData(op, sessions).assemble(theta)
    fac = SparseCholesky(P)
    mean = fac.solve(b / theta.sigma2)
    post = PosteriorField(
        mean=mean, precision=P,
        layout=(len(sessions), theta.n_tasks, op.n), hyper=theta,
    )
    post._factor = fac
    return post


@dataclass(frozen=True)
class GroupContrast:
    """Weights over (subject, run, task) blocks defining a group field."""

    weights: np.ndarray
    label: str = "contrast"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(w)):
            raise ValueError("contrast weights must be finite")
        if not np.any(w != 0):
            raise ValueError("contrast needs at least one nonzero weight")
        object.__setattr__(self, "weights", w)


def averaging_contrast(n_subjects, n_runs, n_tasks, task, label=None) -> GroupContrast:
    """Group-average contrast for one task: weight 1/(M*J) on every
    (subject, run) copy of that task, zero elsewhere."""
    w = np.zeros((n_subjects, n_runs, n_tasks))
    w[:, :, task] = 1.0 / (n_subjects * n_runs)
    return GroupContrast(
        weights=w.ravel(),
        label=label or f"avg_task{task}",
    )


class GroupPosterior(MarginalField):
    """Gaussian field of a contrast across independent subject posteriors.

    The joint covariance never gets densified across subjects: means and
    variances add, and joint samples are sums of independent per-subject
    draws (seeded per subject).
    """

    def __init__(self, subject_posteriors, contrast: GroupContrast):
        posts = list(subject_posteriors)
        if not posts:
            raise ValueError("need at least one subject posterior")
        layouts = {p.layout for p in posts}
        if len(layouts) > 1:
            raise ValueError(f"subjects disagree on layout: {sorted(layouts)}")
        J, K, n = posts[0].layout
        M = len(posts)
        w = np.asarray(contrast.weights, dtype=float)
        if w.size != M * J * K:
            raise ValueError(
                f"contrast length {w.size} != subjects*runs*tasks = {M * J * K}"
            )
        w = w.reshape(M, J, K)
        fields = [p.combination(w[m]) for m, p in enumerate(posts)]
        mean = np.sum([f.mean for f in fields], axis=0)
        sd = np.sqrt(np.sum([f.sd ** 2 for f in fields], axis=0))

        def sampler(n_samples, rng):
            seeds = rng.integers(0, 2 ** 63 - 1, size=M)
            out = np.zeros((n_samples, n))
            for m, f in enumerate(fields):
                out += f.sample_with_rng(
                    n_samples, np.random.default_rng(seeds[m])
                )
            return out

        super().__init__(mean, sd, sampler)
        self.contrast = contrast
        self.n_subjects = M


def group_posterior(subject_posteriors, contrast: GroupContrast) -> GroupPosterior:
    return GroupPosterior(subject_posteriors, contrast)


# ---------------------------------------------------------------------------
# Fit directory serialization
# ---------------------------------------------------------------------------

def save_fit_dir(path, beta, sd, theta: dict, log: dict, extras=None):
    """Write a fit directory: beta.tsv, sd.tsv, theta.json, log.json."""
    os.makedirs(path, exist_ok=True)
    np.savetxt(os.path.join(path, "beta.tsv"), np.asarray(beta), fmt="%.17g",
               delimiter="\t")
    np.savetxt(os.path.join(path, "sd.tsv"), np.asarray(sd), fmt="%.17g",
               delimiter="\t")
    with open(os.path.join(path, "theta.json"), "w", encoding="utf-8") as fh:
        json.dump(theta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(path, "log.json"), "w", encoding="utf-8") as fh:
        json.dump(log, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, arr in (extras or {}).items():
        np.savetxt(os.path.join(path, f"{name}.tsv"), np.asarray(arr),
                   fmt="%.17g", delimiter="\t")


def load_fit_dir(path):
    def table(name):
        full = os.path.join(path, name)
        arr = np.loadtxt(full, delimiter="\t")
        if arr.ndim == 1:
            arr = arr[:, None]
        return arr

    with open(os.path.join(path, "theta.json"), encoding="utf-8") as fh:
        theta = json.load(fh)
    with open(os.path.join(path, "log.json"), encoding="utf-8") as fh:
        log = json.load(fh)
    return {"beta": table("beta.tsv"), "sd": table("sd.tsv"),
            "theta": theta, "log": log}
