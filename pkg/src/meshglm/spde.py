"""Matern-type GMRF prior on a mesh via the FEM-discretized SPDE.

The precision of the latent field is the sparse polynomial

    Q(kappa, tau) = tau^2 (kappa^4 C + 2 kappa^2 G + G C^{-1} G)

with C the lumped (diagonal) mass matrix and G the cotangent stiffness.
Lumping C is what keeps G C^{-1} G, and hence Q, sparse.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu, spsolve_triangular
from scipy.special import k1


class FactorizationError(RuntimeError):
    """Sparse factorization failed; carries the smallest pivot seen."""

    def __init__(self, message, min_pivot=None):
        super().__init__(message)
        self.min_pivot = min_pivot


@dataclass(frozen=True)
class SpdeHyper:
    """Spatial scale kappa (1/mm) and precision scale tau, both > 0."""

    kappa: float
    tau: float

    def __post_init__(self):
        if not (self.kappa > 0 and self.tau > 0):
            raise ValueError(f"kappa and tau must be > 0, got {self}")

    @classmethod
    def from_log(cls, log_kappa, log_tau):
        return cls(kappa=float(np.exp(log_kappa)), tau=float(np.exp(log_tau)))

    def log(self):
        return np.log(self.kappa), np.log(self.tau)


class SparseCholesky:
    """Cholesky-style factorization of a sparse SPD matrix.

    Backed by SuperLU in symmetric mode with diagonal pivoting disabled,
    which yields P A P' = L D L' for SPD input. Exposes solves, the
    log-determinant, and sampling by back-substitution of standard normals.
    """

    _SAMPLE_CHUNK = 20000

    def __init__(self, a: sparse.spmatrix):
        a = sparse.csc_matrix(a)
        try:
            lu = splu(
                a,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:
            raise FactorizationError(f"sparse factorization failed: {exc}") from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise FactorizationError("factorization pivoted away from the diagonal")
        d = lu.U.diagonal()
        if np.any(d <= 0):
            raise FactorizationError(
                "matrix is not positive definite", min_pivot=float(d.min())
            )
        self.n = a.shape[0]
        self._lu = lu
        self._perm = lu.perm_c
        self._d = d
        self._ut = None

    @property
    def min_pivot(self):
        return float(self._d.min())

    def logdet(self):
        return float(np.sum(np.log(self._d)))

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))

    def sample(self, n_samples: int, rng: np.random.Generator, mean=None):
        """Draw ``n_samples`` vectors with covariance A^{-1} (plus ``mean``)."""
        if self._ut is None:
            self._ut = sparse.csr_matrix(self._lu.U)
        out = np.empty((n_samples, self.n))
        sqrt_d = np.sqrt(self._d)
        done = 0
        while done < n_samples:
            m = min(self._SAMPLE_CHUNK, n_samples - done)
            z = rng.standard_normal((self.n, m))
            # With q = argsort(perm), A[q][:, q] = L D L'. Solving
            # (D^{1/2} L') x = z gives cov(x) = (A^{-1})[q][:, q], so the
            # sample at original index j is row perm[j] of x.
            x = spsolve_triangular(self._ut, sqrt_d[:, None] * z, lower=False)
            out[done:done + m, :] = x[self._perm, :].T
            done += m
        if mean is not None:
            out += np.asarray(mean)[None, :]
        return out


class SpdeOperator:
    """SPDE precision builder over one mesh, with cached factorizations.

    Immutable after construction; the three sparse components of Q are
    pre-aligned on a common sparsity pattern so that assembling Q for new
    hyperparameters is pure data-array arithmetic (and exactly symmetric).
    """

    def __init__(self, fem):
        c_diag = fem.C.diagonal()
        if np.any(c_diag <= 0):
            raise ValueError("mass matrix must be strictly positive on the diagonal")
        g = sparse.csr_matrix(fem.G)
        c_inv = sparse.diags(1.0 / c_diag)
        gcg = sparse.csr_matrix(g @ c_inv @ g)
        gcg = ((gcg + gcg.T) * 0.5).tocsr()
        c = sparse.csr_matrix(fem.C)

        n = fem.n
        # union sparsity pattern; abs() values cannot cancel, so nothing with
        # a nonzero entry in any component is pruned by the addition
        pattern = (abs(c) + abs(g) + abs(gcg)).tocsr()
        pattern.sort_indices()
        pat_rows = np.repeat(np.arange(n), np.diff(pattern.indptr))
        pat_keys = pat_rows.astype(np.int64) * n + pattern.indices

        def aligned(m):
            m = m.tocsr()
            m.sort_indices()
            rows = np.repeat(np.arange(n), np.diff(m.indptr))
            keys = rows.astype(np.int64) * n + m.indices
            pos = np.searchsorted(pat_keys, keys)
            pos_c = np.clip(pos, 0, pat_keys.size - 1)
            hit = pat_keys[pos_c] == keys
            if not np.all(m.data[~hit] == 0.0):
                raise AssertionError("sparsity alignment failed")
            out = np.zeros(pat_keys.size)
            out[pos_c[hit]] = m.data[hit]
            return out

        self.fem = fem
        self.n = n
        self._indices = pattern.indices
        self._indptr = pattern.indptr
        self._c_data = aligned(c)
        self._g_data = aligned(g)
        self._gcg_data = aligned(gcg)
        self._factors: dict[tuple[float, float], SparseCholesky] = {}
        self._logdets: dict[float, float] = {}

    def precision(self, hyper: SpdeHyper) -> sparse.csr_matrix:
        """Assemble Q(kappa, tau); exactly symmetric by construction."""
        k2 = hyper.kappa ** 2
        data = hyper.tau ** 2 * (
            k2 * k2 * self._c_data + 2.0 * k2 * self._g_data + self._gcg_data
        )
        if hyper.kappa < 1e-6:
            warnings.warn(
                f"kappa={hyper.kappa:g} makes Q nearly singular "
                "(stiffness null space barely penalized)",
                stacklevel=2,
            )
        return sparse.csr_matrix(
            (data, self._indices.copy(), self._indptr.copy()), shape=(self.n, self.n)
        )

    def factor(self, hyper: SpdeHyper) -> SparseCholesky:
        key = (hyper.kappa, hyper.tau)
        fac = self._factors.get(key)
        if fac is None:
            fac = SparseCholesky(self.precision(hyper))
            if len(self._factors) >= 8:
                self._factors.pop(next(iter(self._factors)))
            self._factors[key] = fac
        return fac

    def logdet(self, hyper: SpdeHyper) -> float:
        """log det Q(kappa, tau), using Q(kappa, tau) = tau^2 Q(kappa, 1)."""
        base = self._logdets.get(hyper.kappa)
        if base is None:
            base = SparseCholesky(self.precision(SpdeHyper(hyper.kappa, 1.0))).logdet()
            self._logdets[hyper.kappa] = base
        return base + 2.0 * self.n * np.log(hyper.tau)


def build_precision(fem, hyper: SpdeHyper) -> sparse.csr_matrix:
    """One-shot Q(kappa, tau) without caching; see :class:`SpdeOperator`."""
    return SpdeOperator(fem).precision(hyper)


def sample_gmrf(q: sparse.spmatrix, n_samples: int, seed) -> np.ndarray:
    """Draw samples with precision q. Deterministic under a fixed seed."""
    rng = np.random.default_rng(seed)
    return SparseCholesky(q).sample(n_samples, rng)


def matern_cov(d, sigma2, kappa):
    """Covariance sigma^2 (kappa d) K_1(kappa d) at distance d >= 0.

    At d = 0 this returns sigma^2, the limiting value of x K_1(x) -> 1.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be >= 0")
    x = kappa * d
    with np.errstate(invalid="ignore", over="ignore"):
        val = sigma2 * x * k1(x)
    val = np.where(x == 0.0, sigma2, val)
    if val.ndim == 0:
        return float(val)
    return val


def write_coo(path, q: sparse.spmatrix):
    """Dump a sparse matrix as ``i j value`` text rows (debugging aid)."""
    coo = sparse.coo_matrix(q)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"coo {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")
