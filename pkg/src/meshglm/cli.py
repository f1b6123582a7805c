"""Batch command-line front end.

Subcommands: simulate, fit, activate, group, reliability, distort. Every
command writes a ``manifest.json`` (inputs by name and content hash,
parameters, seeds) sufficient to reproduce its outputs exactly. Exit
codes: 0 ok, 2 configuration/input error, 3 numeric failure, 4 fit did
not converge (results still written, flagged).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .activation import (
    classical_ttest,
    correct_bonferroni,
    correct_fdr,
    correct_permutation,
    excursion_set,
    save_activation,
)
from .inference import (
    GroupContrast,
    Hyperparams,
    averaging_contrast,
    fit_classical,
    fit_classical_multi,
    group_classical,
    group_posterior,
    load_fit_dir,
    optimize_hyperparams,
    posterior,
    save_fit_dir,
)
from .mesh import MeshError, assemble_fem, edge_distance_distortion, read_mesh, surface_smooth, write_mesh
from .reliability import dice_flagged, icc_map, metric_table, paired_dice_difference, proxy_accuracy
from .signal import (
    DEFAULT_AR_ORDER,
    DEFAULT_AR_SMOOTH_FWHM,
    SessionData,
    build_design,
    condition,
    fit_ar_yule_walker,
    prewhiten,
    read_matrix,
    read_paradigm,
    regularize_ar,
    write_matrix,
    write_paradigm,
)
from .simulate import PopulationSpec, SimSpec, block_paradigm, simulate_population, simulate_session
from .spde import FactorizationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_NOT_CONVERGED = 4


class ConfigError(ValueError):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, params, input_paths):
    inputs = [
        {"name": os.path.basename(p), "sha256": _sha256(p)}
        for p in sorted(input_paths)
    ]
    manifest = {
        "command": command,
        "inputs": inputs,
        "params": params,
        "version": __version__,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _read_manifest(path_dir):
    path = os.path.join(path_dir, "manifest.json")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _session_seed(master, *idx):
    return int(np.random.SeedSequence((int(master),) + tuple(int(i) for i in idx))
               .generate_state(1)[0])


def _run_dir(data_dir, subject, visit, run):
    return os.path.join(data_dir, f"subj{subject:03d}", f"visit{visit}", f"run{run}")


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _paradigm_from_config(cfg):
    tr = float(cfg["tr"])
    n_vol = int(cfg["n_volumes"])
    if "paradigm" in cfg:
        p = cfg["paradigm"]
        from .signal import TaskParadigm

        return TaskParadigm(
            onsets=tuple(tuple(o) for o in p["onsets"]),
            durations=tuple(tuple(d) for d in p["durations"]),
            tr=tr, n_volumes=n_vol,
            names=tuple(p.get("names", ())),
        )
    return block_paradigm(
        int(cfg.get("tasks", 1)), n_vol, tr,
        block_duration=float(cfg.get("block_duration", 12.0)),
        blocks_per_task=int(cfg.get("blocks_per_task", 4)),
    )


def cmd_simulate(args):
    with open(args.config, encoding="utf-8") as fh:
        cfg = json.load(fh)
    out = args.out
    os.makedirs(out, exist_ok=True)
    paradigm = _paradigm_from_config(cfg)
    subjects = int(cfg.get("subjects", 1))
    visits = int(cfg.get("visits", 1))
    runs = int(cfg.get("runs", 1))
    seed = int(cfg.get("seed", 0))
    truth_dir = os.path.join(out, "truth")
    os.makedirs(truth_dir, exist_ok=True)

    if subjects == 1 and visits == 1:
        spec = SimSpec(
            mesh=cfg["mesh"], paradigm=paradigm,
            kappa=tuple(cfg["kappa"]), tau=tuple(cfg["tau"]),
            sigma2=float(cfg.get("sigma2", 1.0)),
            ar_coeffs=tuple(cfg.get("ar_coeffs", ())),
            n_runs=runs,
            baseline=float(cfg.get("baseline", 100.0)),
            add_nuisance=bool(cfg.get("nuisance", True)),
            share_fields_across_runs=bool(cfg.get("share_fields", False)),
            seed=seed,
        )
        sim = simulate_session(spec)
        mesh = sim.mesh
        for j, sess in enumerate(sim.sessions):
            rd = _run_dir(out, 0, 0, j)
            os.makedirs(rd, exist_ok=True)
            write_matrix(os.path.join(rd, "bold.txt"), sess.bold)
            if sess.nuisance is not None:
                write_matrix(os.path.join(rd, "nuisance.txt"), sess.nuisance)
            np.savetxt(os.path.join(truth_dir, f"beta_s000_v0_run{j}.tsv"),
                       sim.beta_true[j], fmt="%.17g", delimiter="\t")
    else:
        pspec = PopulationSpec(
            mesh=cfg["mesh"], paradigm=paradigm,
            kappa=tuple(cfg["kappa"]), tau=tuple(cfg["tau"]),
            n_subjects=subjects, n_runs=runs, n_visits=visits,
            subject_dev_sd=float(cfg.get("subject_dev_sd", 0.5)),
            visit_dev_sd=float(cfg.get("visit_dev_sd", 0.2)),
            dev_kappa=cfg.get("dev_kappa"),
            sigma2=float(cfg.get("sigma2", 1.0)),
            ar_coeffs=tuple(cfg.get("ar_coeffs", ())),
            baseline=float(cfg.get("baseline", 100.0)),
            add_nuisance=bool(cfg.get("nuisance", False)),
            normalize_variance=bool(cfg.get("normalize_variance", True)),
            seed=seed,
        )
        pop = simulate_population(pspec)
        mesh = pop.mesh
        np.savetxt(os.path.join(truth_dir, "group_mean.tsv"), pop.group_mean,
                   fmt="%.17g", delimiter="\t")
        for m in range(subjects):
            np.savetxt(os.path.join(truth_dir, f"subject_s{m:03d}.tsv"),
                       pop.subject_fields[m], fmt="%.17g", delimiter="\t")
            for v in range(visits):
                np.savetxt(
                    os.path.join(truth_dir, f"beta_s{m:03d}_v{v}.tsv"),
                    pop.visit_fields[m, v], fmt="%.17g", delimiter="\t")
                for j in range(runs):
                    rd = _run_dir(out, m, v, j)
                    os.makedirs(rd, exist_ok=True)
                    sess = pop.sessions[m][v][j]
                    write_matrix(os.path.join(rd, "bold.txt"), sess.bold)
                    if sess.nuisance is not None:
                        write_matrix(os.path.join(rd, "nuisance.txt"),
                                     sess.nuisance)

    write_mesh(os.path.join(out, "mesh.txt"), mesh)
    write_paradigm(os.path.join(out, "paradigm.txt"), paradigm)
    _write_manifest(out, "simulate", {
        "config": cfg, "seed": seed, "tr": paradigm.tr,
        "n_volumes": paradigm.n_volumes,
        "layout": {"subjects": subjects, "visits": visits, "runs": runs},
        "task_names": list(paradigm.task_names()),
    }, [args.config])
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _load_sessions(data_dir, subject, visit, run_ids, params):
    """Run the deterministic preprocessing chain for one subject-visit."""
    mesh = read_mesh(os.path.join(data_dir, "mesh.txt"))
    manifest = _read_manifest(data_dir)
    tr = params.get("tr") or manifest["params"]["tr"]
    first = read_matrix(os.path.join(_run_dir(data_dir, subject, visit, run_ids[0]),
                                     "bold.txt"))
    paradigm = read_paradigm(os.path.join(data_dir, "paradigm.txt"),
                             tr=float(tr), n_volumes=first.shape[0])
    tasks = params.get("tasks")
    if tasks is not None:
        paradigm = paradigm.subset(tasks)
    design, derivs, _ = build_design(paradigm)
    smooth_fwhm = float(params.get("smooth_fwhm", 0.0))

    sessions = []
    for j in run_ids:
        rd = _run_dir(data_dir, subject, visit, j)
        bold = read_matrix(os.path.join(rd, "bold.txt"))
        npath = os.path.join(rd, "nuisance.txt")
        nuis = read_matrix(npath) if os.path.exists(npath) else None
        sess = SessionData(
            bold=bold, design=design.copy(), nuisance=nuis,
            meta={"subject": subject, "visit": visit, "run": j, "tr": tr},
            task_names=paradigm.task_names(),
        )
        sess = condition(sess, design_derivatives=derivs)
        if smooth_fwhm > 0:
            sess.bold = surface_smooth(mesh, sess.bold.T, smooth_fwhm).T
        sessions.append(sess)

    ar_order = int(params.get("ar_order", DEFAULT_AR_ORDER))
    ar_fwhm = float(params.get("ar_smooth_fwhm", DEFAULT_AR_SMOOTH_FWHM))
    ar_models = [fit_ar_yule_walker(fit_classical(s).residuals, ar_order)
                 for s in sessions]
    ar = regularize_ar(ar_models, mesh, ar_fwhm)
    sessions = [prewhiten(s, ar) for s in sessions]
    return mesh, paradigm, sessions


def _fit_one(data_dir, out_dir, subject, visit, run_ids, mode, params, seed):
    mesh, paradigm, sessions = _load_sessions(data_dir, subject, visit,
                                              run_ids, params)
    names = list(paradigm.task_names())
    converged = True
    if mode == "classical":
        multi = fit_classical_multi(sessions)
        extras = {}
        for j, f in zip(run_ids, multi.runs):
            extras[f"beta_run{j}"] = f.beta
            extras[f"sd_run{j}"] = f.se
        save_fit_dir(
            out_dir, multi.average.beta, multi.average.se,
            theta={"mode": "classical", "dof": multi.average.dof,
                   "task_names": names},
            log={"runs": list(run_ids)},
            extras=extras,
        )
    else:
        fem = assemble_fem(mesh)
        opt = optimize_hyperparams(
            sessions, fem, mesh_diameter=mesh.diameter(),
            restarts=int(params.get("restarts", 3)),
            max_evals=int(params.get("max_evals", 500)),
            seed=seed,
        )
        converged = opt.converged
        post = posterior(sessions, fem, opt.theta)
        beta, sd = post.run_average_summary()
        extras = {}
        for jj, j in enumerate(run_ids):
            J, K, n = post.layout
            run_beta = np.column_stack([post.field((jj, k)).mean for k in range(K)])
            run_sd = np.column_stack([post.field((jj, k)).sd for k in range(K)])
            extras[f"beta_run{j}"] = run_beta
            extras[f"sd_run{j}"] = run_sd
        save_fit_dir(
            out_dir, beta, sd,
            theta={"mode": "bayes", "kappa": list(opt.theta.kappa),
                   "tau": list(opt.theta.tau), "sigma2": opt.theta.sigma2,
                   "converged": opt.converged, "logml": opt.logml,
                   "task_names": names},
            log={"runs": list(run_ids), "n_evals": opt.n_evals,
                 "trace_tail": opt.trace[-20:], "seed": seed},
            extras=extras,
        )
    inputs = [os.path.join(data_dir, "mesh.txt"),
              os.path.join(data_dir, "paradigm.txt")]
    for j in run_ids:
        inputs.append(os.path.join(_run_dir(data_dir, subject, visit, j), "bold.txt"))
    _write_manifest(out_dir, "fit", {
        "mode": mode, "subject": subject, "visit": visit,
        "runs": list(run_ids), "seed": seed, **params,
    }, inputs)
    return converged


def cmd_fit(args):
    params = {
        "tr": args.tr,
        "smooth_fwhm": args.smooth_fwhm,
        "ar_order": args.ar_order,
        "ar_smooth_fwhm": args.ar_smooth_fwhm,
        "tasks": [int(t) for t in args.tasks.split(",")] if args.tasks else None,
        "restarts": args.restarts,
        "max_evals": args.max_evals,
    }
    manifest = _read_manifest(args.data)
    layout = manifest["params"]["layout"]
    run_ids = ([int(r) for r in args.runs.split(",")] if args.runs != "all"
               else list(range(layout["runs"])))
    if args.subject == "all":
        jobs = [(m, v) for m in range(layout["subjects"])
                for v in range(layout["visits"])]
        outs = [os.path.join(args.out, f"subj{m:03d}_visit{v}") for m, v in jobs]
    else:
        jobs = [(int(args.subject), int(args.visit))]
        outs = [args.out]

    def work(i):
        m, v = jobs[i]
        return _fit_one(args.data, outs[i], m, v, run_ids, args.mode, params,
                        seed=_session_seed(args.seed, m, v))

    if args.jobs > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(work, range(len(jobs))))
    else:
        results = [work(i) for i in range(len(jobs))]
    if len(jobs) > 1:
        os.makedirs(args.out, exist_ok=True)
        _write_manifest(args.out, "fit-batch", {
            "mode": args.mode, "runs": run_ids, "seed": args.seed,
            "n_jobs_spec": len(jobs), **params,
        }, [os.path.join(args.data, "manifest.json")])
    if not all(results):
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# activate
# ---------------------------------------------------------------------------

def _concat_whitened(sessions):
    """Stack whitened runs along time (independent whitened observations)."""
    if len(sessions) == 1:
        return sessions[0]
    bold = np.concatenate([s.bold for s in sessions], axis=0)
    design = np.concatenate([s.design for s in sessions], axis=1)
    first = sessions[0]
    return SessionData(
        bold=bold, design=design, nuisance=None, meta=dict(first.meta),
        task_names=first.task_names, percent_scaled=True, conditioned=True,
        whitened=True, excluded=first.excluded,
    )


def cmd_activate(args):
    fit_manifest = _read_manifest(args.fit)
    p = fit_manifest["params"]
    mode = p["mode"]
    fit_data = load_fit_dir(args.fit)
    names = fit_data["theta"].get("task_names") or [
        f"task{k}" for k in range(fit_data["beta"].shape[1])
    ]
    K = len(names)
    gammas = [float(g) for g in args.gamma]
    if any(g < 0 for g in gammas) or gammas != sorted(gammas):
        raise ConfigError("gamma list must be non-negative and ascending")
    os.makedirs(args.out, exist_ok=True)

    if args.method == "excursion":
        if mode != "bayes":
            raise ConfigError("excursion sets need a bayes fit directory")
        theta = Hyperparams(
            kappa=tuple(fit_data["theta"]["kappa"]),
            tau=tuple(fit_data["theta"]["tau"]),
            sigma2=float(fit_data["theta"]["sigma2"]),
        )
        mesh, _, sessions = _load_sessions(
            args.data, p["subject"], p["visit"], p["runs"], p)
        fem = assemble_fem(mesh)
        post = posterior(sessions, fem, theta)
        for k in range(K):
            for g in gammas:
                amap = excursion_set(post, k, gamma=g, alpha=args.alpha,
                                     n_mc=args.n_mc, seed=args.seed)
                amap.meta["task"] = names[k]
                save_activation(
                    os.path.join(args.out, f"{names[k]}_gamma{g:g}"), amap)
    elif args.method == "permutation":
        mesh, _, sessions = _load_sessions(
            args.data, p["subject"], p["visit"], p["runs"], p)
        stacked = _concat_whitened(sessions)
        for g in gammas:
            maps = correct_permutation(stacked, g, args.alpha,
                                       n_perm=args.n_perm, seed=args.seed)
            for k, amap in enumerate(maps):
                amap.meta["task"] = names[k]
                save_activation(
                    os.path.join(args.out, f"{names[k]}_gamma{g:g}"), amap)
    else:
        from .inference import ClassicalFit

        if mode != "classical":
            raise ConfigError(f"{args.method} needs a classical fit directory")
        dof = float(fit_data["theta"]["dof"])
        fit = ClassicalFit(beta=fit_data["beta"], se=fit_data["sd"], dof=dof)
        for k in range(K):
            for g in gammas:
                _, pvals = classical_ttest(
                    ClassicalFit(beta=fit.beta[:, [k]], se=fit.se[:, [k]],
                                 dof=dof), g)
                amap = (correct_bonferroni if args.method == "bonferroni"
                        else correct_fdr)(pvals[:, 0], args.alpha)
                amap.gamma = g
                amap.meta["task"] = names[k]
                save_activation(
                    os.path.join(args.out, f"{names[k]}_gamma{g:g}"), amap)
    _write_manifest(args.out, "activate", {
        "method": args.method, "gamma": gammas, "alpha": args.alpha,
        "seed": args.seed, "n_mc": args.n_mc, "n_perm": args.n_perm,
        "fit": os.path.basename(os.path.normpath(args.fit)),
    }, [os.path.join(args.fit, "manifest.json")])
    return EXIT_OK


# ---------------------------------------------------------------------------
# group
# ---------------------------------------------------------------------------

def _load_contrast(path, M, J, K):
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if "average_task" in cfg:
        return averaging_contrast(M, J, K, int(cfg["average_task"]),
                                  label=cfg.get("label"))
    return GroupContrast(weights=np.asarray(cfg["weights"], dtype=float),
                         label=cfg.get("label", "contrast"))


def cmd_group(args):
    from .inference import ClassicalFit

    fit_dirs = args.fits
    if len(fit_dirs) < 2:
        raise ConfigError("group analysis needs at least two fit directories")
    loaded = [load_fit_dir(d) for d in fit_dirs]
    modes = {ld["theta"]["mode"] for ld in loaded}
    if len(modes) > 1:
        raise ConfigError(f"fit directories mix modes: {sorted(modes)}")
    mode = modes.pop()
    os.makedirs(args.out, exist_ok=True)
    names = loaded[0]["theta"].get("task_names")
    K = loaded[0]["beta"].shape[1]

    if mode == "bayes" and not args.data:
        raise ConfigError("group over bayes fits needs --data to rebuild "
                          "the subject posteriors")
    if mode == "classical":
        fits = [ClassicalFit(beta=ld["beta"], se=ld["sd"],
                             dof=float(ld["theta"]["dof"])) for ld in loaded]
        g = group_classical(fits)
        save_fit_dir(args.out, g.beta, g.se,
                     theta={"mode": "classical", "dof": g.dof,
                            "task_names": names,
                            "n_subjects": len(fits)},
                     log={"fits": [os.path.basename(os.path.normpath(d))
                                   for d in fit_dirs]})
    else:
        posts = []

        def rebuild(d):
            man = _read_manifest(d)
            p = man["params"]
            ld = load_fit_dir(d)
            theta = Hyperparams(kappa=tuple(ld["theta"]["kappa"]),
                                tau=tuple(ld["theta"]["tau"]),
                                sigma2=float(ld["theta"]["sigma2"]))
            mesh, _, sessions = _load_sessions(args.data, p["subject"],
                                               p["visit"], p["runs"], p)
            return posterior(sessions, assemble_fem(mesh), theta)

        if args.jobs > 1:
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                posts = list(pool.map(rebuild, fit_dirs))
        else:
            posts = [rebuild(d) for d in fit_dirs]
        J = posts[0].layout[0]
        M = len(posts)
        if args.contrast:
            contrast = _load_contrast(args.contrast, M, J, K)
        else:
            contrast = averaging_contrast(M, J, K, int(args.task))
        gp = group_posterior(posts, contrast)
        save_fit_dir(args.out, gp.mean[:, None], gp.sd[:, None],
                     theta={"mode": "bayes-group", "label": contrast.label,
                            "task_names": names, "n_subjects": M},
                     log={"fits": [os.path.basename(os.path.normpath(d))
                                   for d in fit_dirs]})
    _write_manifest(args.out, "group", {
        "mode": mode, "n_fits": len(fit_dirs),
        "contrast": args.contrast and os.path.basename(args.contrast),
        "task": args.task,
    }, [os.path.join(d, "manifest.json") for d in fit_dirs])
    return EXIT_OK


# ---------------------------------------------------------------------------
# reliability
# ---------------------------------------------------------------------------

def cmd_reliability(args):
    os.makedirs(args.out, exist_ok=True)
    rows_icc, rows_dice, rows_proxy = [], [], []
    inputs = []

    if args.fits_a and args.fits_b:
        if len(args.fits_a) != len(args.fits_b):
            raise ConfigError("visit fit lists must have equal length")
        a = [load_fit_dir(d)["beta"] for d in args.fits_a]
        b = [load_fit_dir(d)["beta"] for d in args.fits_b]
        stack_a = np.stack(a)   # (M, N, K)
        stack_b = np.stack(b)
        K = stack_a.shape[2]
        mask = None
        if args.mask:
            mask = np.loadtxt(args.mask).astype(bool)
        for k in range(K):
            vals = icc_map(stack_a[:, :, k], stack_b[:, :, k])
            for v, val in enumerate(vals):
                if mask is not None and not mask[v]:
                    continue
                rows_icc.append((v, k, "icc", val))
        inputs += [os.path.join(d, "manifest.json") for d in
                   list(args.fits_a) + list(args.fits_b)
                   if os.path.exists(os.path.join(d, "manifest.json"))]
        if args.proxy:
            proxy = load_fit_dir(args.proxy)["beta"]
            mean_a = stack_a.mean(axis=0)
            for k in range(K):
                acc = proxy_accuracy(mean_a[:, k], proxy[:, k], mask)
                rows_proxy.append((-1, k, "mse", acc["mse"]))
                rows_proxy.append((-1, k, "pearson", acc["pearson"]))

    if args.maps_a and args.maps_b:
        from .activation import load_activation

        if len(args.maps_a) != len(args.maps_b):
            raise ConfigError("visit map lists must have equal length")
        dices = []
        for m, (da, db) in enumerate(zip(args.maps_a, args.maps_b)):
            ma = load_activation(da)
            mb = load_activation(db)
            val, flagged = dice_flagged(ma.active, mb.active)
            dices.append(val)
            rows_dice.append((-1, -1, f"dice_subj{m:03d}", val))
        rows_dice.append((-1, -1, "dice_mean", float(np.mean(dices))))
        if args.dice_compare:
            other = np.loadtxt(args.dice_compare, delimiter="\t", skiprows=1,
                               usecols=3)
            other = np.atleast_1d(other)[: len(dices)]
            res = paired_dice_difference(np.array(dices), other)
            rows_dice.append((-1, -1, "dice_paired_diff", res["mean_difference"]))
            rows_dice.append((-1, -1, "dice_paired_p", res["p_value"]))

    if rows_icc:
        with open(os.path.join(args.out, "icc.tsv"), "w", encoding="utf-8") as fh:
            fh.write(metric_table(rows_icc))
    if rows_proxy:
        with open(os.path.join(args.out, "proxy.tsv"), "w", encoding="utf-8") as fh:
            fh.write(metric_table(rows_proxy))
    if rows_dice:
        with open(os.path.join(args.out, "dice.tsv"), "w", encoding="utf-8") as fh:
            fh.write(metric_table(rows_dice))
    _write_manifest(args.out, "reliability", {
        "n_fit_pairs": len(args.fits_a or ()),
        "n_map_pairs": len(args.maps_a or ()),
        "mask": args.mask and os.path.basename(args.mask),
    }, inputs)
    return EXIT_OK


# ---------------------------------------------------------------------------
# distort
# ---------------------------------------------------------------------------

def cmd_distort(args):
    mesh_a = read_mesh(args.mesh_a)
    mesh_b = read_mesh(args.mesh_b)
    res = edge_distance_distortion(mesh_a, mesh_b)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "distortion.tsv"), "w", encoding="utf-8") as fh:
        fh.write("vertex_u\tvertex_v\tratio\n")
        for (u, v), r in zip(res.edges, res.ratios):
            fh.write(f"{u}\t{v}\t{r:.17g}\n")
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump({"quantiles": res.quantiles, "n_edges": int(len(res.ratios))},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out, "distort", {}, [args.mesh_a, args.mesh_b])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / main
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="meshglm",
        description="Classical and spatial Bayesian GLMs on surface meshes",
    )
    p.add_argument("--jobs", type=int, default=1,
                   help="max parallel jobs across subjects/components")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit classical or Bayesian models")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--mode", choices=("classical", "bayes"), required=True)
    f.add_argument("--subject", default="0",
                   help="subject index or 'all'")
    f.add_argument("--visit", default="0")
    f.add_argument("--runs", default="all",
                   help="comma-separated run indices or 'all'")
    f.add_argument("--tr", type=float, default=None)
    f.add_argument("--smooth-fwhm", dest="smooth_fwhm", type=float, default=None,
                   help="pre-fit surface smoothing in mm "
                        "(default 6 for classical, 0 for bayes)")
    f.add_argument("--ar-order", dest="ar_order", type=int,
                   default=DEFAULT_AR_ORDER)
    f.add_argument("--ar-smooth-fwhm", dest="ar_smooth_fwhm", type=float,
                   default=DEFAULT_AR_SMOOTH_FWHM)
    f.add_argument("--tasks", default=None,
                   help="comma-separated task subset, e.g. for one hemisphere")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--restarts", type=int, default=3)
    f.add_argument("--max-evals", dest="max_evals", type=int, default=500)
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("activate", help="compute activation maps from a fit")
    a.add_argument("--fit", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--method", required=True,
                   choices=("excursion", "bonferroni", "fdr", "permutation"))
    a.add_argument("--gamma", nargs="+", default=["0", "0.5", "1"],
                   help="activation thresholds in percent signal change")
    a.add_argument("--alpha", type=float, default=0.01)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--n-mc", dest="n_mc", type=int, default=50000)
    a.add_argument("--n-perm", dest="n_perm", type=int, default=1000)
    a.set_defaults(func=cmd_activate)

    g = sub.add_parser("group", help="combine subject fits into a group fit")
    g.add_argument("--fits", nargs="+", required=True)
    g.add_argument("--data", default=None,
                   help="dataset dir (needed to rebuild Bayesian posteriors)")
    g.add_argument("--out", required=True)
    g.add_argument("--contrast", default=None, help="contrast JSON file")
    g.add_argument("--task", type=int, default=0,
                   help="task index for the default averaging contrast")
    g.set_defaults(func=cmd_group)

    r = sub.add_parser("reliability", help="test-retest metrics across visits")
    r.add_argument("--fits-a", dest="fits_a", nargs="*", default=None)
    r.add_argument("--fits-b", dest="fits_b", nargs="*", default=None)
    r.add_argument("--maps-a", dest="maps_a", nargs="*", default=None)
    r.add_argument("--maps-b", dest="maps_b", nargs="*", default=None)
    r.add_argument("--proxy", default=None, help="proxy ground-truth fit dir")
    r.add_argument("--mask", default=None)
    r.add_argument("--dice-compare", dest="dice_compare", default=None,
                   help="dice.tsv of another method for a paired comparison")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reliability)

    d = sub.add_parser("distort", help="edge-length distortion of two surfaces")
    d.add_argument("--mesh-a", dest="mesh_a", required=True)
    d.add_argument("--mesh-b", dest="mesh_b", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distort)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "fit" and args.smooth_fwhm is None:
        args.smooth_fwhm = 6.0 if args.mode == "classical" else 0.0
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, MeshError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FactorizationError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
