"""Finding activated vertices.

Two families of methods: excursion sets cut from the joint Gaussian
posterior (no multiplicity correction needed), and thresholded t-tests on
classical fits with Bonferroni, Benjamini-Hochberg, or max-statistic
permutation correction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .inference import MarginalField, fit_classical

_EXCURSION_CHUNK = 8192


@dataclass
class ActivationMap:
    """Binary activation map at one (gamma, alpha) pair."""

    active: np.ndarray
    gamma: float
    alpha: float
    method: str
    meta: dict = field(default_factory=dict)

    @property
    def n_active(self):
        return int(self.active.sum())

    @property
    def n_vertices(self):
        return self.active.shape[0]


def excursion_set(post, selector=None, *, gamma, alpha, n_mc=50000, seed=0) -> ActivationMap:
    """Largest vertex set whose joint exceedance probability is >= 1 - alpha.

    Vertices are ordered by decreasing marginal P(beta_v > gamma), ties
    broken by vertex index; the joint probability that every vertex in a
    prefix exceeds gamma is estimated by seeded Monte Carlo over the joint
    posterior, and the longest prefix still above 1 - alpha is returned.
    An empty map is a valid outcome.

    ``post`` is a posterior object exposing ``field(selector)`` or already a
    field with mean, sd and a joint sampler.
    """
    if not (0.0 < alpha < 0.5):
        raise ValueError(f"alpha must be in (0, 0.5), got {alpha}")
    if n_mc < 10 ** 4:
        raise ValueError(f"n_mc must be at least 1e4, got {n_mc}")
    if isinstance(post, MarginalField) and selector is None:
        fld = post
    else:
        fld = post.field(selector)
    n = fld.n_vertices
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (fld.mean - gamma) / fld.sd
    z = np.where(fld.sd > 0, z, np.where(fld.mean > gamma, np.inf, -np.inf))
    marg_prob = stats.norm.cdf(z)

    # stable ordering: decreasing marginal probability, ties by vertex index
    order = np.lexsort((np.arange(n), -marg_prob))
    ties = int(n - np.unique(marg_prob).size)

    rng = np.random.default_rng(seed)
    prefix_hits = np.zeros(n, dtype=np.int64)
    done = 0
    while done < n_mc:
        m = min(_EXCURSION_CHUNK, n_mc - done)
        draws = fld.sample_with_rng(m, rng)
        exceed = draws[:, order] > gamma
        prefix_all = np.logical_and.accumulate(exceed, axis=1)
        prefix_hits += prefix_all.sum(axis=0)
        done += m
    joint_prob = prefix_hits / n_mc

    ok = joint_prob >= 1.0 - alpha
    m_star = int(np.max(np.nonzero(ok)[0]) + 1) if ok.any() else 0
    active = np.zeros(n, dtype=bool)
    active[order[:m_star]] = True
    return ActivationMap(
        active=active, gamma=gamma, alpha=alpha, method="excursion",
        meta={
            "seed": int(seed), "n_mc": int(n_mc), "set_size": m_star,
            "joint_prob": float(joint_prob[m_star - 1]) if m_star else 1.0,
            "marginal_ties": ties,
        },
    )


def classical_ttest(fit, gamma=0.0):
    """One-sided t-test of beta > gamma per vertex and task.

    Returns (t, p) arrays of shape (N, K); upper-tail p-values use the
    fit's stored degrees of freedom. Undefined standard errors give p = 1.
    """
    if fit.dof <= 0:
        raise ValueError("fit has no residual degrees of freedom")
    se = np.asarray(fit.se, dtype=float)
    beta = np.asarray(fit.beta, dtype=float)
    bad = ~np.isfinite(se) | (se <= 0) | ~np.isfinite(beta)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (beta - gamma) / se
    t = np.where(bad, np.nan, t)
    p = np.where(bad, 1.0, stats.t.sf(np.where(bad, 0.0, t), df=fit.dof))
    return t, p


def correct_bonferroni(pvals, alpha) -> ActivationMap:
    """Active where p * V < alpha (strict), V = number of tested vertices."""
    p = np.asarray(pvals, dtype=float)
    tested = np.isfinite(p)
    V = int(tested.sum())
    active = np.zeros(p.shape, dtype=bool)
    if V:
        active[tested] = p[tested] * V < alpha
    return ActivationMap(active=active, gamma=np.nan, alpha=alpha,
                         method="bonferroni", meta={"n_tested": V})


def correct_fdr(pvals, alpha) -> ActivationMap:
    """Benjamini-Hochberg step-up: reject the L smallest p-values where L is
    the largest rank with p_(L) * V / L < alpha."""
    p = np.asarray(pvals, dtype=float)
    tested = np.isfinite(p)
    V = int(tested.sum())
    active = np.zeros(p.shape, dtype=bool)
    if V:
        pt = p[tested]
        order = np.argsort(pt, kind="stable")
        ranks = np.arange(1, V + 1)
        ok = pt[order] * V / ranks < alpha
        if ok.any():
            cutoff = int(np.max(np.nonzero(ok)[0]))
            sel = np.zeros(V, dtype=bool)
            sel[order[: cutoff + 1]] = True
            active[tested] = sel
    return ActivationMap(active=active, gamma=np.nan, alpha=alpha,
                         method="fdr", meta={"n_tested": V})


def _batched_tstats(session, y_perm, gamma):
    """t-statistics for many permuted copies of the BOLD matrix.

    y_perm has shape (M, T, N); returns (M, N, K). The design is fixed;
    only the response rows were reordered.
    """
    x = session.design
    if x.ndim == 2:
        xtx = np.einsum("tk,tl->kl", x, x)
        xtx_inv = np.linalg.inv(xtx)
        xty = np.einsum("tk,mtn->mnk", x, y_perm)
        beta = np.einsum("kl,mnl->mnk", xtx_inv, xty)
        diag_inv = np.diag(xtx_inv)[None, None, :]
        K = x.shape[1]
    else:
        xtx = np.einsum("ntk,ntl->nkl", x, x)
        xtx_inv = np.linalg.inv(xtx)
        xty = np.einsum("ntk,mtn->mnk", x, y_perm)
        beta = np.einsum("nkl,mnl->mnk", xtx_inv, xty)
        diag_inv = np.einsum("nkk->nk", xtx_inv)[None, :, :]
        K = x.shape[2]
    T = y_perm.shape[1]
    yty = np.einsum("mtn,mtn->mn", y_perm, y_perm)
    rss = yty - np.einsum("mnk,mnk->mn", beta, xty)
    s2 = np.maximum(rss, 0.0) / (T - K)
    se = np.sqrt(s2[:, :, None] * diag_inv)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (beta - gamma) / se
    return np.where(se > 0, t, -np.inf)


def correct_permutation(session, gamma, alpha, n_perm=1000, seed=0):
    """Max-statistic permutation FWER control on a prewhitened session.

    Each permutation reorders the time index of the whitened BOLD (same
    reordering at every vertex), recomputes all t-statistics, and records
    the maximum over vertices per task. The per-task threshold is the
    (1 - alpha) percentile of those maxima; observed t must exceed it.

    Returns a list of ActivationMap, one per task.
    """
    if n_perm < 1000:
        raise ValueError(f"need at least 1000 permutations, got {n_perm}")
    if not session.whitened:
        raise ValueError("permutation test expects a prewhitened session")
    fit = fit_classical(session)
    t_obs, _ = classical_ttest(fit, gamma)
    T = session.n_volumes
    rng = np.random.default_rng(seed)

    batch = max(1, int(2e7 // (T * session.n_vertices)))
    max_null = np.empty((n_perm, fit.n_tasks))
    done = 0
    while done < n_perm:
        m = min(batch, n_perm - done)
        perms = np.argsort(rng.random((m, T)), axis=1)
        y_perm = session.bold[perms, :]           # (m, T, N)
        t_null = _batched_tstats(session, y_perm, gamma)
        max_null[done:done + m] = np.nanmax(t_null, axis=1)
        done += m

    maps = []
    for k in range(fit.n_tasks):
        thr = float(np.quantile(max_null[:, k], 1.0 - alpha, method="higher"))
        active = np.where(np.isfinite(t_obs[:, k]), t_obs[:, k] > thr, False)
        maps.append(ActivationMap(
            active=active, gamma=gamma, alpha=alpha, method="permutation",
            meta={"task": k, "seed": int(seed), "n_perm": int(n_perm),
                  "threshold": thr},
        ))
    return maps


def combine_hemispheres(map_left: ActivationMap, map_right: ActivationMap, alpha):
    """Union of two per-component maps; the whole-domain FWER is
    1 - (1 - alpha)^2."""
    for m in (map_left, map_right):
        if m.alpha != alpha:
            raise ValueError("component maps were built at a different alpha")
    if map_left.method != map_right.method:
        raise ValueError("component maps use different methods")
    effective = 1.0 - (1.0 - alpha) ** 2
    combined = np.concatenate([map_left.active, map_right.active])
    return ActivationMap(
        active=combined, gamma=map_left.gamma, alpha=alpha,
        method=map_left.method,
        meta={"combined": True, "effective_fwer": effective,
              "component_sizes": [map_left.n_vertices, map_right.n_vertices]},
    )


def save_activation(path, amap: ActivationMap):
    """Write active.tsv (0/1 per vertex) and meta.json into a directory."""
    os.makedirs(path, exist_ok=True)
    np.savetxt(os.path.join(path, "active.tsv"), amap.active.astype(int), fmt="%d")
    meta = {
        "gamma": None if np.isnan(amap.gamma) else float(amap.gamma),
        "alpha": float(amap.alpha),
        "method": amap.method,
        **{k: v for k, v in amap.meta.items()},
    }
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def load_activation(path) -> ActivationMap:
    active = np.loadtxt(os.path.join(path, "active.tsv"), dtype=int).astype(bool)
    with open(os.path.join(path, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    gamma = meta.pop("gamma", None)
    return ActivationMap(
        active=np.atleast_1d(active),
        gamma=np.nan if gamma is None else float(gamma),
        alpha=float(meta.pop("alpha")),
        method=meta.pop("method"),
        meta=meta,
    )
