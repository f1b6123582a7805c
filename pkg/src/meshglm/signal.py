"""Design construction, data conditioning, AR estimation, and prewhitening.

The processing chain for one run is: build the task design from the
paradigm, rescale the BOLD matrix to percent signal change, regress
nuisance signals (drift, motion surrogates, HRF temporal derivatives) out
of both data and design, estimate per-vertex AR noise models from the
residuals of a first-pass GLM, then whiten data and design per vertex so
residuals are white with unit variance everywhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .mesh import SurfaceMesh, surface_smooth

# canonical double-gamma response: peak at 6 s, undershoot at 16 s,
# unit dispersions, undershoot ratio 1/6, 32 s support
HRF_PEAK_DELAY = 6.0
HRF_UNDERSHOOT_DELAY = 16.0
HRF_DISPERSION = 1.0
HRF_UNDERSHOOT_RATIO = 1.0 / 6.0
HRF_LENGTH = 32.0
_OVERSAMPLE = 16

DEFAULT_AR_ORDER = 6
DEFAULT_AR_SMOOTH_FWHM = 6.0


@dataclass(frozen=True)
class TaskParadigm:
    """Stimulus timing for K tasks over a run of T volumes.

    onsets and durations are per-task sequences in seconds; every event
    must fit inside [0, T * TR].
    """

    onsets: tuple
    durations: tuple
    tr: float
    n_volumes: int
    names: tuple = ()

    def __post_init__(self):
        if len(self.onsets) < 1:
            raise ValueError("paradigm needs at least one task")
        if len(self.onsets) != len(self.durations):
            raise ValueError("onsets and durations must have matching task counts")
        total = self.n_volumes * self.tr
        for k, (ons, durs) in enumerate(zip(self.onsets, self.durations)):
            if len(ons) != len(durs):
                raise ValueError(f"task {k}: onsets/durations length mismatch")
            for o, d in zip(ons, durs):
                if o < 0 or d < 0 or o + d > total:
                    raise ValueError(
                        f"task {k}: event ({o}, {d}) outside [0, {total}]"
                    )
        if self.names and len(self.names) != len(self.onsets):
            raise ValueError("names must match task count")

    @property
    def n_tasks(self):
        return len(self.onsets)

    def task_names(self):
        if self.names:
            return tuple(self.names)
        return tuple(f"task{k}" for k in range(self.n_tasks))

    def subset(self, tasks):
        """Restrict to the given task indices (lateralized-task exclusion)."""
        tasks = list(tasks)
        return TaskParadigm(
            onsets=tuple(self.onsets[k] for k in tasks),
            durations=tuple(self.durations[k] for k in tasks),
            tr=self.tr,
            n_volumes=self.n_volumes,
            names=tuple(self.task_names()[k] for k in tasks),
        )


@dataclass
class SessionData:
    """One run of data: BOLD matrix, task design, nuisance regressors.

    ``design`` is (T, K) while the run is unwhitened and (N, T, K) after
    prewhitening (the whitening filter differs per vertex). ``excluded``
    marks vertices dropped during conditioning.
    """

    bold: np.ndarray
    design: np.ndarray
    nuisance: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    task_names: tuple = ()
    percent_scaled: bool = False
    conditioned: bool = False
    whitened: bool = False
    excluded: np.ndarray | None = None

    @property
    def n_volumes(self):
        return self.bold.shape[0]

    @property
    def n_vertices(self):
        return self.bold.shape[1]

    @property
    def n_tasks(self):
        return self.design.shape[-1]

    def design_at(self, v):
        """Design matrix at vertex v, shared or per-vertex."""
        if self.design.ndim == 3:
            return self.design[v]
        return self.design


@dataclass(frozen=True)
class ArModel:
    """Per-vertex AR(p) noise model: coefficients (N, p), innovation variance (N,)."""

    coeffs: np.ndarray
    innovation_var: np.ndarray
    flagged: np.ndarray | None = None

    @property
    def order(self):
        return self.coeffs.shape[1]

    @property
    def n_vertices(self):
        return self.coeffs.shape[0]


def _gamma_pdf(t, shape, scale):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    tp = t[pos]
    out[pos] = np.exp(
        (shape - 1) * np.log(tp) - tp / scale - gammaln(shape) - shape * np.log(scale)
    )
    return out


def hrf(t):
    """Canonical double-gamma hemodynamic response, normalized to unit peak."""
    resp = _gamma_pdf(t, HRF_PEAK_DELAY / HRF_DISPERSION, HRF_DISPERSION)
    under = _gamma_pdf(t, HRF_UNDERSHOOT_DELAY / HRF_DISPERSION, HRF_DISPERSION)
    h = resp - HRF_UNDERSHOOT_RATIO * under
    return h / h.max()


def build_design(paradigm: TaskParadigm):
    """Convolve task boxcars with the HRF and sample at the TR.

    Each column is scaled by its temporal maximum, then mean-centered.
    Temporal-derivative columns (for nuisance use) are returned separately.

    Returns
    -------
    design : (T, K) array
    derivatives : (T, K) array
    empty_tasks : list of task indices that had no events (zero columns)
    """
    T, tr, K = paradigm.n_volumes, paradigm.tr, paradigm.n_tasks
    dt = tr / _OVERSAMPLE
    n_fine = T * _OVERSAMPLE
    t_fine = np.arange(n_fine) * dt
    kernel = hrf(np.arange(0.0, HRF_LENGTH + dt, dt))

    design = np.zeros((T, K))
    deriv = np.zeros((T, K))
    empty = []
    for k in range(K):
        box = np.zeros(n_fine)
        for onset, dur in zip(paradigm.onsets[k], paradigm.durations[k]):
            box[(t_fine >= onset) & (t_fine < onset + dur)] = 1.0
        if not box.any():
            empty.append(k)
            warnings.warn(f"task {k} has no events; design column is zero",
                          stacklevel=2)
            continue
        conv = np.convolve(box, kernel)[:n_fine]
        col = conv[::_OVERSAMPLE]
        peak = np.abs(col).max()
        if peak > 0:
            col = col / col.max()
        design[:, k] = col
        deriv[:, k] = np.gradient(col, tr)
    design -= design.mean(axis=0)
    deriv -= deriv.mean(axis=0)
    return design, deriv, empty


def _residualize(columns, basis_q):
    return columns - basis_q @ (basis_q.T @ columns)


def condition(session: SessionData, design_derivatives=None) -> SessionData:
    """Scale to percent signal change and regress out nuisance signals.

    Per vertex, y -> 100 (y - mean) / mean; vertices with non-positive mean
    are flagged and zeroed out. Nuisance columns plus the HRF temporal
    derivatives are then residualized out of both the BOLD matrix and the
    task design by least squares, and everything is re-centered.

    Idempotent: a session already flagged ``percent_scaled`` skips the
    rescaling, and re-residualization is a projection (no-op the second time).
    """
    if session.whitened:
        raise ValueError("cannot condition a whitened session")
    bold = np.asarray(session.bold, dtype=float)
    design = np.asarray(session.design, dtype=float)
    T = bold.shape[0]

    excluded = (
        session.excluded.copy()
        if session.excluded is not None
        else np.zeros(bold.shape[1], dtype=bool)
    )
    if session.percent_scaled:
        bold = bold.copy()
    else:
        mean = bold.mean(axis=0)
        bad = mean <= 0
        if bad.any():
            warnings.warn(
                f"{int(bad.sum())} vertices with non-positive mean excluded",
                stacklevel=2,
            )
            excluded |= bad
        safe = np.where(bad, 1.0, mean)
        bold = 100.0 * (bold - mean[None, :]) / safe[None, :]
        bold[:, bad] = 0.0

    pieces = []
    if session.nuisance is not None and session.nuisance.size:
        pieces.append(np.asarray(session.nuisance, dtype=float))
    if design_derivatives is not None and np.asarray(design_derivatives).size:
        pieces.append(np.asarray(design_derivatives, dtype=float))
    bold -= bold.mean(axis=0)
    design = design - design.mean(axis=0)
    if pieces:
        nuis = np.column_stack(pieces)
        nuis = nuis - nuis.mean(axis=0)
        keep = np.linalg.norm(nuis, axis=0) > 1e-12 * np.sqrt(T)
        nuis = nuis[:, keep]
        if nuis.shape[1]:
            q, _ = np.linalg.qr(nuis)
            bold = _residualize(bold, q)
            design = _residualize(design, q)
    bold -= bold.mean(axis=0)
    design -= design.mean(axis=0)

    return replace(
        session,
        bold=bold,
        design=design,
        percent_scaled=True,
        conditioned=True,
        excluded=excluded,
    )


def _sample_autocov(x, p):
    """Biased (1/T) sample autocovariances, lags 0..p. x is (T, N)."""
    T = x.shape[0]
    xc = x - x.mean(axis=0)
    return np.stack(
        [np.einsum("tn,tn->n", xc[: T - k], xc[k:]) / T for k in range(p + 1)],
        axis=1,
    )


def _levinson(acov):
    """Vectorized Levinson-Durbin over vertices.

    Parameters
    ----------
    acov : (N, p+1) autocovariances, lag 0 first.

    Returns
    -------
    coeffs : (N, p, p) prediction coefficients; coeffs[:, m-1, :m] is the
        order-m predictor.
    pev : (N, p+1) prediction error variance at each order.
    """
    n, pp1 = acov.shape
    p = pp1 - 1
    coeffs = np.zeros((n, p, p))
    pev = np.zeros((n, pp1))
    pev[:, 0] = acov[:, 0]
    for m in range(1, p + 1):
        if m == 1:
            acc = np.zeros(n)
        else:
            acc = np.einsum("ni,ni->n", coeffs[:, m - 2, : m - 1],
                            acov[:, m - 1:0:-1])
        k = (acov[:, m] - acc) / pev[:, m - 1]
        if m > 1:
            coeffs[:, m - 1, : m - 1] = (
                coeffs[:, m - 2, : m - 1]
                - k[:, None] * coeffs[:, m - 2, m - 2::-1]
            )
        coeffs[:, m - 1, m - 1] = k
        pev[:, m] = pev[:, m - 1] * (1.0 - k * k)
    return coeffs, pev


def fit_ar_yule_walker(residuals, order: int) -> ArModel:
    """Per-vertex AR(order) fit from sample autocovariances (Yule-Walker).

    A near-singular autocovariance system is stabilized by a small ridge on
    the lag-0 term; affected vertices are flagged.
    """
    residuals = np.asarray(residuals, dtype=float)
    T, n = residuals.shape
    if order < 0:
        raise ValueError("order must be >= 0")
    if T <= 3 * order:
        raise ValueError(f"need T > 3p, got T={T}, p={order}")
    if order == 0:
        c0 = residuals.var(axis=0)
        return ArModel(coeffs=np.zeros((n, 0)), innovation_var=c0,
                       flagged=np.zeros(n, dtype=bool))
    acov = _sample_autocov(residuals, order)
    bad = acov[:, 0] <= 0
    with np.errstate(invalid="ignore", divide="ignore"):
        coeffs, pev = _levinson(np.where(bad[:, None], np.nan, acov))
    unstable = bad | ~np.isfinite(pev[:, order]) | (pev[:, order] <= 0)
    if unstable.any():
        warnings.warn(
            f"{int(unstable.sum())} vertices needed a ridge-stabilized "
            "autocovariance solve",
            stacklevel=2,
        )
        ridge = acov.copy()
        ridge[:, 0] = np.maximum(acov[:, 0], 0.0) + 1e-8 * np.maximum(
            np.abs(acov[:, 0]), 1.0
        )
        rc, rp = _levinson(ridge)
        coeffs = np.where(unstable[:, None, None], rc, coeffs)
        pev = np.where(unstable[:, None], rp, pev)
    return ArModel(
        coeffs=coeffs[:, order - 1, :].copy(),
        innovation_var=pev[:, order].copy(),
        flagged=unstable,
    )


def select_ar_order(residuals, pmax: int) -> int:
    """Order in [0, pmax] minimizing AIC = T ln(sigma2_hat) + 2p."""
    x = np.asarray(residuals, dtype=float).reshape(-1, 1)
    T = x.shape[0]
    if T <= 3 * pmax:
        raise ValueError(f"need T > 3*pmax, got T={T}, pmax={pmax}")
    if pmax == 0:
        return 0
    acov = _sample_autocov(x, pmax)
    _, pev = _levinson(acov)
    sig2 = np.maximum(pev[0], np.finfo(float).tiny)
    aic = T * np.log(sig2) + 2.0 * np.arange(pmax + 1)
    return int(np.argmin(aic))


def regularize_ar(models, mesh: SurfaceMesh, fwhm: float = DEFAULT_AR_SMOOTH_FWHM) -> ArModel:
    """Average AR models over runs, then surface-smooth every coefficient map
    and the innovation-variance map."""
    models = list(models)
    if not models:
        raise ValueError("need at least one AR model")
    p = models[0].order
    n = models[0].n_vertices
    for m in models:
        if m.order != p or m.n_vertices != n:
            raise ValueError("AR models must share order and vertex count")
    coeffs = np.mean([m.coeffs for m in models], axis=0)
    ivar = np.mean([m.innovation_var for m in models], axis=0)
    if fwhm > 0 and p > 0:
        coeffs = surface_smooth(mesh, coeffs, fwhm)
    if fwhm > 0:
        ivar = surface_smooth(mesh, ivar, fwhm)
    flagged = np.zeros(n, dtype=bool)
    for m in models:
        if m.flagged is not None:
            flagged |= m.flagged
    return ArModel(coeffs=coeffs, innovation_var=ivar, flagged=flagged)


def _is_stationary(coeffs):
    """Stationarity of 1 - sum phi_i z^i (roots strictly outside unit circle)."""
    p = len(coeffs)
    if p == 0:
        return True
    poly = np.concatenate([[1.0], -np.asarray(coeffs)])
    roots = np.roots(poly[::-1])  # roots of the characteristic polynomial in z
    return bool(np.all(np.abs(roots) > 1.0 + 1e-10))


def _stationary_coeffs(ar: ArModel):
    """Truncate non-stationary per-vertex models to their largest stationary
    leading sub-order; returns possibly-modified coefficients and a flag mask."""
    coeffs = ar.coeffs.copy()
    n, p = coeffs.shape
    flagged = np.zeros(n, dtype=bool)
    for v in range(n):
        if _is_stationary(coeffs[v]):
            continue
        flagged[v] = True
        q = p - 1
        while q > 0 and not _is_stationary(coeffs[v, :q]):
            q -= 1
        coeffs[v, q:] = 0.0
    if flagged.any():
        warnings.warn(
            f"{int(flagged.sum())} vertices had non-stationary AR models; "
            "fell back to reduced order",
            stacklevel=2,
        )
    return coeffs, flagged


def _acov_from_ar(coeffs, innovation_var):
    """Theoretical autocovariances (lags 0..p) of AR(p) processes.

    Solves the linear system c_k - sum_i phi_i c_{|k-i|} = sigma2 * delta_k0
    per vertex; coeffs is (N, p), innovation_var is (N,).
    """
    n, p = coeffs.shape
    a = np.zeros((n, p + 1, p + 1))
    idx = np.arange(p + 1)
    a[:, idx, idx] = 1.0
    for k in range(p + 1):
        for i in range(1, p + 1):
            a[:, k, abs(k - i)] -= coeffs[:, i - 1]
    b = np.zeros((n, p + 1))
    b[:, 0] = innovation_var
    return np.linalg.solve(a, b[:, :, None])[:, :, 0]


class WhiteningFilter:
    """Per-vertex inverse-square-root action of the AR-implied covariance.

    The transform is the innovations form: row t subtracts the best linear
    prediction from past samples and divides by the prediction-error sd, so
    the whitened series has unit innovation variance at every vertex. Its
    action equals multiplication by inv(chol(Sigma_v)) without forming any
    T x T matrix.
    """

    def __init__(self, ar: ArModel):
        coeffs, flagged = _stationary_coeffs(ar)
        ivar = np.asarray(ar.innovation_var, dtype=float)
        if np.any(ivar <= 0):
            raise ValueError("innovation variances must be positive")
        self.order = coeffs.shape[1]
        self.coeffs = coeffs
        self.flagged = flagged
        if self.order:
            acov = _acov_from_ar(coeffs, ivar)
            self._pred, pev = _levinson(acov)
            self._scales = 1.0 / np.sqrt(pev)  # (N, p+1)
        else:
            self._pred = np.zeros((coeffs.shape[0], 0, 0))
            self._scales = 1.0 / np.sqrt(ivar[:, None])

    def apply_bold(self, y):
        """Whiten a (T, N) matrix column-by-column with per-vertex filters."""
        y = np.asarray(y, dtype=float)
        T, n = y.shape
        p = self.order
        out = np.empty_like(y)
        for t in range(min(p, T)):
            pred = np.zeros(n)
            if t:
                past = y[t - 1::-1][:t]  # lags 1..t
                pred = np.einsum("ni,in->n", self._pred[:, t - 1, :t], past)
            out[t] = (y[t] - pred) * self._scales[:, t]
        if T > p:
            acc = y[p:].copy()
            for i in range(1, p + 1):
                acc -= self.coeffs[None, :, i - 1] * y[p - i:T - i]
            out[p:] = acc * self._scales[None, :, min(p, self._scales.shape[1] - 1)]
        return out

    def apply_design(self, x):
        """Whiten a shared (T, K) design into per-vertex (N, T, K) designs."""
        x = np.asarray(x, dtype=float)
        T, K = x.shape
        n = self.coeffs.shape[0]
        p = self.order
        out = np.empty((n, T, K))
        for t in range(min(p, T)):
            pred = np.zeros((n, K))
            if t:
                past = x[t - 1::-1][:t]  # (t, K), lags 1..t
                pred = np.einsum("ni,ik->nk", self._pred[:, t - 1, :t], past)
            out[:, t, :] = (x[None, t, :] - pred) * self._scales[:, t, None]
        if T > p:
            acc = np.broadcast_to(x[p:], (n, T - p, K)).copy()
            for i in range(1, p + 1):
                acc -= self.coeffs[:, i - 1, None, None] * x[None, p - i:T - i, :]
            s = self._scales[:, min(p, self._scales.shape[1] - 1)]
            out[:, p:, :] = acc * s[:, None, None]
        return out


def prewhiten(session: SessionData, ar: ArModel) -> SessionData:
    """Whiten BOLD and design per vertex with the AR-implied covariance.

    The output stores a per-vertex design stack of shape (N, T, K); whitened
    residual variance is one at every vertex by construction.
    """
    if not session.conditioned:
        raise ValueError("prewhiten expects a conditioned session")
    if session.design.ndim != 2:
        raise ValueError("session is already whitened")
    if ar.n_vertices != session.n_vertices:
        raise ValueError("AR model vertex count does not match session")
    filt = WhiteningFilter(ar)
    bold = filt.apply_bold(session.bold)
    design = filt.apply_design(session.design)
    return replace(
        session,
        bold=bold,
        design=design,
        whitened=True,
        meta={**session.meta, "ar_order": ar.order,
              "ar_fallback_vertices": int(filt.flagged.sum())},
    )


def write_matrix(path, matrix):
    """Whitespace-separated text matrix (BOLD and nuisance file format)."""
    np.savetxt(path, np.asarray(matrix, dtype=float), fmt="%.17g")


def read_matrix(path):
    m = np.loadtxt(path, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    return m


def write_paradigm(path, paradigm: TaskParadigm):
    """Paradigm file: one ``task onset duration`` line per event."""
    names = paradigm.task_names()
    with open(path, "w", encoding="utf-8") as fh:
        for k, (ons, durs) in enumerate(zip(paradigm.onsets, paradigm.durations)):
            for o, d in zip(ons, durs):
                fh.write(f"{names[k]} {o:.17g} {d:.17g}\n")


def read_paradigm(path, tr: float, n_volumes: int) -> TaskParadigm:
    """Read ``task onset duration`` lines; tasks ordered by first appearance."""
    events: dict[str, list] = {}
    order = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 'task onset duration'")
            name = parts[0]
            try:
                onset, dur = float(parts[1]), float(parts[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{ln}: non-numeric onset/duration") from exc
            if name not in events:
                events[name] = []
                order.append(name)
            events[name].append((onset, dur))
    if not order:
        raise ValueError(f"{path}: no events found")
    onsets = tuple(tuple(o for o, _ in events[n]) for n in order)
    durations = tuple(tuple(d for _, d in events[n]) for n in order)
    return TaskParadigm(onsets=onsets, durations=durations, tr=tr,
                        n_volumes=n_volumes, names=tuple(order))
