"""Ground-truth simulation: meshes, latent amplitude fields, noisy sessions.

Everything is reproducible: the same spec and seed give bit-identical
output, with per-subject/run seeds derived from one master seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .inference import Hyperparams
from .mesh import SurfaceMesh, assemble_fem
from .signal import SessionData, TaskParadigm, build_design
from .spde import SpdeHyper, SpdeOperator

_AR_BURN_IN = 256


def make_grid_mesh(nx: int, ny: int, spacing: float = 1.0) -> SurfaceMesh:
    """Planar triangulated nx-by-ny grid (nx*ny vertices) in the z=0 plane."""
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2 vertices per side")
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    verts = np.column_stack(
        [xs.ravel() * spacing, ys.ravel() * spacing, np.zeros(nx * ny)]
    )

    def vid(i, j):
        return i * ny + j

    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            tris.append([vid(i, j), vid(i + 1, j), vid(i, j + 1)])
            tris.append([vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)])
    return SurfaceMesh(verts, np.array(tris))


def make_icosphere(level: int = 0, radius: float = 1.0) -> SurfaceMesh:
    """Subdivided icosahedron projected onto a sphere.

    Level 0 is the icosahedron itself: 12 vertices, 20 faces.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    tris = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(level):
        verts_list = list(verts)
        midpoint = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                verts_list.append(0.5 * (verts_list[a] + verts_list[b]))
                midpoint[key] = len(verts_list) - 1
            return midpoint[key]

        new_tris = []
        for a, b, c in tris:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_tris += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        tris = np.array(new_tris, dtype=np.int64)
    verts = radius * verts / np.linalg.norm(verts, axis=1, keepdims=True)
    return SurfaceMesh(verts, tris)


def make_mesh(spec: dict) -> SurfaceMesh:
    kind = spec.get("kind", "grid")
    if kind == "grid":
        return make_grid_mesh(int(spec["nx"]), int(spec["ny"]),
                              float(spec.get("spacing", 1.0)))
    if kind == "icosphere":
        return make_icosphere(int(spec.get("level", 2)),
                              float(spec.get("radius", 1.0)))
    raise ValueError(f"unknown mesh kind {kind!r}")


def block_paradigm(n_tasks, n_volumes, tr, block_duration=12.0,
                   blocks_per_task=4, names=()) -> TaskParadigm:
    """Evenly interleaved block design, one cycle per block index."""
    total = n_volumes * tr
    slot = total / (n_tasks * blocks_per_task + 1)
    dur = min(block_duration, 0.8 * slot)
    onsets = tuple(
        tuple((i * n_tasks + k) * slot + 0.5 * slot for i in range(blocks_per_task))
        for k in range(n_tasks)
    )
    durations = tuple(tuple(dur for _ in range(blocks_per_task))
                      for k in range(n_tasks))
    return TaskParadigm(onsets=onsets, durations=durations, tr=tr,
                        n_volumes=n_volumes, names=tuple(names))


@dataclass(frozen=True)
class SimSpec:
    """Generative settings for one (possibly multi-run) synthetic session.

    With an empty AR spec, zero baseline and no nuisance signals, the
    output is the linear-Gaussian model itself and the session is emitted
    in conditioned/whitened form; otherwise raw-intensity BOLD is produced
    for the full processing pipeline.
    """

    mesh: dict
    paradigm: TaskParadigm
    kappa: tuple
    tau: tuple
    sigma2: float = 1.0
    ar_coeffs: tuple = ()
    n_runs: int = 1
    baseline: float = 100.0
    add_nuisance: bool = True
    share_fields_across_runs: bool = False
    seed: int = 0

    def __post_init__(self):
        if len(self.kappa) != len(self.tau):
            raise ValueError("kappa and tau must have one entry per task")
        if len(self.kappa) != self.paradigm.n_tasks:
            raise ValueError("hyperparameters must match the task count")
        if any(k <= 0 for k in self.kappa) or any(t <= 0 for t in self.tau):
            raise ValueError("kappa and tau must be positive")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")

    @property
    def model_exact(self):
        return (not self.ar_coeffs) and self.baseline == 0.0 and not self.add_nuisance

    def theta(self) -> Hyperparams:
        return Hyperparams(kappa=self.kappa, tau=self.tau,
                           sigma2=max(self.sigma2, 1e-12))


@dataclass
class SimulatedSession:
    sessions: list                 # J SessionData
    beta_true: np.ndarray          # (J, N, K) latent fields per run
    mesh: SurfaceMesh
    fem: object
    spec: SimSpec

    @property
    def beta_shared(self):
        """(N, K) truth when fields are shared (or J == 1)."""
        return self.beta_true[0]


def _draw_fields(op, kappa, tau, rng):
    """One (N, K) draw of independent per-task latent fields."""
    cols = []
    for k, t in zip(kappa, tau):
        fac = op.factor(SpdeHyper(k, t))
        cols.append(fac.sample(1, rng)[0])
    return np.column_stack(cols)


def _ar_noise(shape, coeffs, sigma2, rng):
    T, n = shape
    sd = np.sqrt(sigma2)
    if not len(coeffs):
        return sd * rng.standard_normal((T, n))
    z = rng.standard_normal((T + _AR_BURN_IN, n))
    a = np.concatenate([[1.0], -np.asarray(coeffs, dtype=float)])
    e = lfilter([1.0], a, z, axis=0)[_AR_BURN_IN:]
    return sd * e


def _drift_and_motion(T, rng, n_motion=3):
    t = np.linspace(-1.0, 1.0, T)
    drift = np.column_stack([t, t ** 2 - np.mean(t ** 2)])
    steps = rng.normal(scale=0.05, size=(T, n_motion))
    motion = np.cumsum(steps, axis=0)
    motion -= motion.mean(axis=0)
    return np.column_stack([drift, motion])


def simulate_session(spec: SimSpec) -> SimulatedSession:
    """Draw latent amplitude fields from their GMRF priors and synthesize
    BOLD runs as design-times-field plus AR noise per vertex."""
    mesh = make_mesh(spec.mesh)
    fem = assemble_fem(mesh)
    op = SpdeOperator(fem)
    n = mesh.N
    K = spec.paradigm.n_tasks
    design, _, _ = build_design(spec.paradigm)
    T = spec.paradigm.n_volumes

    ss = np.random.SeedSequence(spec.seed)
    field_seed, noise_seed, nuis_seed = ss.spawn(3)
    field_rng = np.random.default_rng(field_seed)
    noise_rng = np.random.default_rng(noise_seed)
    nuis_rng = np.random.default_rng(nuis_seed)

    if spec.share_fields_across_runs:
        shared = _draw_fields(op, spec.kappa, spec.tau, field_rng)
        beta = np.broadcast_to(shared, (spec.n_runs, n, K)).copy()
    else:
        beta = np.stack([
            _draw_fields(op, spec.kappa, spec.tau, field_rng)
            for _ in range(spec.n_runs)
        ])

    sessions = []
    for j in range(spec.n_runs):
        signal = design @ beta[j].T
        noise = _ar_noise((T, n), spec.ar_coeffs, spec.sigma2, noise_rng)
        meta = {"run": j, "tr": spec.paradigm.tr}
        if spec.model_exact:
            sessions.append(SessionData(
                bold=signal + noise, design=design.copy(), nuisance=None,
                meta=meta, task_names=spec.paradigm.task_names(),
                percent_scaled=True, conditioned=True, whitened=True,
            ))
            continue
        nuisance = None
        pct = signal + noise
        if spec.add_nuisance:
            nuisance = _drift_and_motion(T, nuis_rng)
            coefs = nuis_rng.normal(scale=0.2, size=nuisance.shape[1])
            pct = pct + (nuisance @ coefs)[:, None]
        bold = spec.baseline * (1.0 + pct / 100.0)
        sessions.append(SessionData(
            bold=bold, design=design.copy(), nuisance=nuisance, meta=meta,
            task_names=spec.paradigm.task_names(),
        ))
    return SimulatedSession(sessions=sessions, beta_true=beta, mesh=mesh,
                            fem=fem, spec=spec)


@dataclass(frozen=True)
class PopulationSpec:
    """Hierarchy for test-retest populations.

    Per subject and task, the latent amplitude is the group field plus a
    subject deviation; each visit adds its own deviation; runs within a
    visit share the visit field and differ only by measurement noise. All
    deviation fields are GMRF draws; with ``normalize_variance`` each draw
    is rescaled per vertex to an exact target marginal sd, which makes ICC
    calibration exact.
    """

    mesh: dict
    paradigm: TaskParadigm
    kappa: tuple
    tau: tuple
    n_subjects: int
    n_runs: int = 1
    n_visits: int = 2
    subject_dev_sd: float = 0.5
    visit_dev_sd: float = 0.2
    dev_kappa: float | None = None
    sigma2: float = 1.0
    ar_coeffs: tuple = ()
    baseline: float = 100.0
    add_nuisance: bool = False
    normalize_variance: bool = True
    seed: int = 0


@dataclass
class Population:
    mesh: SurfaceMesh
    fem: object
    group_mean: np.ndarray          # (N, K)
    subject_fields: np.ndarray      # (M, N, K)
    visit_fields: np.ndarray        # (M, V, N, K)
    sessions: list                  # [m][v][j] -> SessionData
    spec: PopulationSpec


def _normalized_draws(op, hyper, n_draws, target_sd, rng, normalize):
    if n_draws == 0:
        return np.zeros((0, op.n))
    if target_sd == 0.0:
        return np.zeros((n_draws, op.n))
    fac = op.factor(hyper)
    draws = fac.sample(n_draws, rng)
    if normalize:
        marg = np.sqrt(np.diag(fac.solve(np.eye(op.n))))
        draws = draws / marg[None, :] * target_sd
    else:
        draws = draws * target_sd
    return draws


def simulate_population(spec: PopulationSpec) -> Population:
    mesh = make_mesh(spec.mesh)
    fem = assemble_fem(mesh)
    op = SpdeOperator(fem)
    n = mesh.N
    K = spec.paradigm.n_tasks
    M, V, J = spec.n_subjects, spec.n_visits, spec.n_runs
    design, _, _ = build_design(spec.paradigm)
    T = spec.paradigm.n_volumes
    dev_kappa = spec.dev_kappa if spec.dev_kappa is not None else spec.kappa[0]
    dev_hyper = SpdeHyper(dev_kappa, 1.0)

    ss = np.random.SeedSequence(spec.seed)
    group_seed, dev_seed, noise_seed = ss.spawn(3)
    group_rng = np.random.default_rng(group_seed)
    dev_rng = np.random.default_rng(dev_seed)

    group = _draw_fields(op, spec.kappa, spec.tau, group_rng)

    subj_dev = np.stack([
        _normalized_draws(op, dev_hyper, M, spec.subject_dev_sd, dev_rng,
                          spec.normalize_variance)
        for _ in range(K)
    ], axis=2)                                       # (M, N, K)
    visit_dev = np.stack([
        np.stack([
            _normalized_draws(op, dev_hyper, V, spec.visit_dev_sd, dev_rng,
                              spec.normalize_variance)
            for _ in range(K)
        ], axis=2)                                   # (V, N, K)
        for _ in range(M)
    ])                                               # (M, V, N, K)

    subject_fields = group[None] + subj_dev
    visit_fields = subject_fields[:, None] + visit_dev

    noise_children = noise_seed.spawn(M * V * J)
    sessions = []
    idx = 0
    for m in range(M):
        subj_sessions = []
        for v in range(V):
            visit_sessions = []
            for j in range(J):
                rng = np.random.default_rng(noise_children[idx])
                idx += 1
                signal = design @ visit_fields[m, v].T
                noise = _ar_noise((T, n), spec.ar_coeffs, spec.sigma2, rng)
                meta = {"subject": m, "visit": v, "run": j,
                        "tr": spec.paradigm.tr}
                if spec.baseline == 0.0 and not spec.ar_coeffs and not spec.add_nuisance:
                    visit_sessions.append(SessionData(
                        bold=signal + noise, design=design.copy(),
                        nuisance=None, meta=meta,
                        task_names=spec.paradigm.task_names(),
                        percent_scaled=True, conditioned=True, whitened=True,
                    ))
                    continue
                nuisance = None
                pct = signal + noise
                if spec.add_nuisance:
                    nuisance = _drift_and_motion(T, rng)
                    coefs = rng.normal(scale=0.2, size=nuisance.shape[1])
                    pct = pct + (nuisance @ coefs)[:, None]
                bold = spec.baseline * (1.0 + pct / 100.0)
                visit_sessions.append(SessionData(
                    bold=bold, design=design.copy(), nuisance=nuisance,
                    meta=meta, task_names=spec.paradigm.task_names(),
                ))
            subj_sessions.append(visit_sessions)
        sessions.append(subj_sessions)
    return Population(
        mesh=mesh, fem=fem, group_mean=group, subject_fields=subject_fields,
        visit_fields=visit_fields, sessions=sessions, spec=spec,
    )
