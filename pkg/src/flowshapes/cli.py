"""Command line driver: configuration, orchestration, artifact emission.

Workflows are subcommands (mesh, solve, optimize, estimate-lipschitz, plot)
sharing one YAML configuration tree.  Any key can be overridden from the
command line with dotted paths (--set algorithm.tau=0.8).  Exit codes: 0
success, 2 configuration error, 3 solver failure, 4 mesh failure.

Every run directory receives a manifest recording the configuration hash,
package version, and seed, which together determine the run bit-for-bit at
a fixed thread count.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys

import numpy as np
import yaml

from . import __version__, flow, geometry, optimizer, randfield
from .flow import SolverError, SolverSettings
from .mesh import MeshError, generate_benchmark, save_mesh, save_vtk
from .optimizer import AlgoParams, OptimizeError, Schedules

OUTPUT_DIR_ENV = "FLOWSHAPES_OUTPUT_DIR"

# the benchmark obstacle positions; triangles of unit area at these points
# are the default initial shapes (their exact geometry is a modeling choice,
# only the barycenters and areas are contractual)
BENCHMARK_BARYCENTERS = (
    (-0.5, 5.5),
    (4.5, 0.5),
    (-5.5, 0.5),
    (-4.5, -5.0),
    (2.5, -7.0),
)


class ConfigError(ValueError):
    """Invalid configuration value; the message names the dotted key."""


DEFAULT_CONFIG = {
    "bounds": [-10.0, 20.0, -10.0, 10.0],
    "shapes": None,  # manifest CSV path; null = built-in benchmark triangles
    "nu": 0.2,
    "body_force": None,  # [fx, fy] constants
    "seed": 2024,
    "output_dir": "runs/latest",
    "inflow": {"n_modes": 20, "decay": 2.5},
    "mesh": {"target_edge_length": 1.0},
    "constraints": {
        # "initial" pins each lower volume bound at the realized initial
        # volume; a list of floats sets them explicitly
        "volume_min": "initial",
        # feasible barycenter rectangles: offsets are added to the initial
        # barycenters unless explicit min/max corner lists are given
        "box_offset_min": [-0.2, -0.3],
        "box_offset_max": [0.5, 0.4],
        "bary_min": None,
        "bary_max": None,
    },
    "schedules": {
        "m1": 1,
        "batch_growth": 2.0,
        "batch_rule": "geometric",
        "n1": 8,
        "iter_growth": 2.0,
        "alpha": 1.0,
        "l_jtilde": 0.42215,
        "l_h": 0.36036,
    },
    "algorithm": {
        "mu1": 1.0,
        "tau": 0.9,
        "gamma": 2.0,
        "box_lo": -100.0,
        "box_hi": 100.0,
        "variant": "kkt",  # kkt | verbatim
        "k_max": 5,
        "s_tol": 0.0,
        "feas_tol": 0.0,
        "remesh_threshold": 0.4,
        "n_threads": 1,
    },
    "solver": {"newton_tol": 1.0e-10, "newton_max_iter": 25},
    "line_search": {"sigma": 1.0e-4, "beta": 0.9, "t0": 8.0, "max_backtracks": 80},
    "lipschitz": {
        "mu_values": [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
        "m": 32,
        "n_iters": 8,
    },
    "deterministic": {"beta": 0.5, "t0": 8.0, "inner_cap": 40},
}


# -- config tree -----------------------------------------------------------------


def _deep_merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted} must be a mapping")
            out[key] = _deep_merge(base[key], value, dotted)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=()):
    """Defaults, then the YAML file, then dotted-path overrides, then the
    output-dir environment variable.  Raises ConfigError on any problem."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a key/value mapping")
        cfg = _deep_merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must have the form key.path=value")
        dotted, _, raw = item.partition("=")
        try:
            value = yaml.safe_load(raw) if raw != "" else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"override value for {dotted} is not valid YAML: {exc}") from exc
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown configuration key {dotted!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown configuration key {dotted!r}")
        if isinstance(node[parts[-1]], dict):
            raise ConfigError(f"{dotted} is a section, not a value")
        node[parts[-1]] = value
    env_dir = os.environ.get(OUTPUT_DIR_ENV)
    if env_dir:
        cfg["output_dir"] = env_dir
    validate_config(cfg)
    return cfg


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True, default_flow_style=None)


def config_hash(cfg) -> str:
    canon = yaml.safe_dump(cfg, sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _require(cond, dotted, message):
    if not cond:
        raise ConfigError(f"{dotted} {message}")


def validate_config(cfg):
    b = cfg["bounds"]
    _require(isinstance(b, (list, tuple)) and len(b) == 4, "bounds",
             "must be [xmin, xmax, ymin, ymax]")
    _require(b[0] < b[1] and b[2] < b[3], "bounds", "must be ordered min < max")
    _require(cfg["nu"] > 0, "nu", "must be positive")
    f = cfg["body_force"]
    _require(f is None or (isinstance(f, (list, tuple)) and len(f) == 2),
             "body_force", "must be null or [fx, fy]")
    _require(isinstance(cfg["seed"], int), "seed", "must be an integer")
    _require(cfg["inflow"]["n_modes"] >= 1, "inflow.n_modes", "must be at least 1")
    _require(cfg["inflow"]["decay"] > 0, "inflow.decay", "must be positive")
    _require(cfg["mesh"]["target_edge_length"] > 0,
             "mesh.target_edge_length", "must be positive")
    con = cfg["constraints"]
    vm = con["volume_min"]
    _require(vm == "initial" or isinstance(vm, (list, tuple)),
             "constraints.volume_min", 'must be "initial" or a list of floats')
    for key in ("box_offset_min", "box_offset_max"):
        _require(isinstance(con[key], (list, tuple)) and len(con[key]) == 2,
                 f"constraints.{key}", "must be [dx, dy]")
    _require((con["bary_min"] is None) == (con["bary_max"] is None),
             "constraints.bary_min", "and bary_max must be given together")
    sch = cfg["schedules"]
    try:
        schedules_from_config(cfg)
    except ValueError as exc:
        raise ConfigError(f"schedules: {exc}") from exc
    _require(sch["batch_rule"] in ("geometric", "factorial"),
             "schedules.batch_rule", 'must be "geometric" or "factorial"')
    alg = cfg["algorithm"]
    _require(alg["mu1"] > 0, "algorithm.mu1", "must be positive")
    _require(0 < alg["tau"] < 1, "algorithm.tau", "must lie in (0, 1)")
    _require(alg["gamma"] > 1, "algorithm.gamma", "must exceed 1")
    _require(alg["box_lo"] < alg["box_hi"], "algorithm.box_lo", "must be below box_hi")
    _require(alg["variant"] in ("kkt", "verbatim"),
             "algorithm.variant", 'must be "kkt" or "verbatim"')
    _require(alg["k_max"] >= 1, "algorithm.k_max", "must be at least 1")
    _require(alg["n_threads"] >= 1, "algorithm.n_threads", "must be at least 1")
    _require(cfg["solver"]["newton_tol"] > 0, "solver.newton_tol", "must be positive")
    _require(cfg["solver"]["newton_max_iter"] >= 1,
             "solver.newton_max_iter", "must be at least 1")
    ls = cfg["line_search"]
    _require(ls["sigma"] > 0, "line_search.sigma", "must be positive")
    _require(0 < ls["beta"] < 1, "line_search.beta", "must lie in (0, 1)")
    _require(ls["t0"] > 0, "line_search.t0", "must be positive")
    _require(ls["max_backtracks"] >= 1, "line_search.max_backtracks", "must be at least 1")
    lip = cfg["lipschitz"]
    _require(isinstance(lip["mu_values"], (list, tuple)) and len(lip["mu_values"]) >= 1,
             "lipschitz.mu_values", "must be a non-empty list")
    _require(lip["m"] >= 1, "lipschitz.m", "must be at least 1")
    _require(lip["n_iters"] >= 1, "lipschitz.n_iters", "must be at least 1")
    det = cfg["deterministic"]
    _require(0 < det["beta"] < 1, "deterministic.beta", "must lie in (0, 1)")
    _require(det["t0"] > 0, "deterministic.t0", "must be positive")
    _require(det["inner_cap"] >= 1, "deterministic.inner_cap", "must be at least 1")


# -- config to objects -----------------------------------------------------------


def schedules_from_config(cfg) -> Schedules:
    sch = cfg["schedules"]
    return Schedules(
        m1=sch["m1"], batch_growth=sch["batch_growth"], batch_rule=sch["batch_rule"],
        n1=sch["n1"], iter_growth=sch["iter_growth"], alpha=sch["alpha"],
        l_jtilde=sch["l_jtilde"], l_h=sch["l_h"],
    )


def params_from_config(cfg) -> AlgoParams:
    alg = cfg["algorithm"]
    return AlgoParams(
        mu1=alg["mu1"], tau=alg["tau"], gamma=alg["gamma"],
        box_lo=alg["box_lo"], box_hi=alg["box_hi"], variant=alg["variant"],
        k_max=alg["k_max"], s_tol=alg["s_tol"], feas_tol=alg["feas_tol"],
        remesh_threshold=alg["remesh_threshold"], n_threads=alg["n_threads"],
    )


def model_from_config(cfg) -> randfield.InflowModel:
    half_width = 0.5 * (cfg["bounds"][3] - cfg["bounds"][2])
    return randfield.InflowModel(
        n_modes=cfg["inflow"]["n_modes"],
        decay=cfg["inflow"]["decay"],
        half_width=half_width,
    )


def settings_from_config(cfg) -> SolverSettings:
    return SolverSettings(
        newton_tol=cfg["solver"]["newton_tol"],
        newton_max_iter=cfg["solver"]["newton_max_iter"],
    )


def body_force_from_config(cfg):
    if cfg["body_force"] is None:
        return None
    fx, fy = (float(c) for c in cfg["body_force"])

    def force(xy):
        out = np.empty((len(xy), 2))
        out[:, 0] = fx
        out[:, 1] = fy
        return out

    return force


def default_benchmark_shapes():
    return [
        geometry.regular_polygon(center, area=1.0, n_vertices=3)
        for center in BENCHMARK_BARYCENTERS
    ]


def read_shape_manifest(path):
    """CSV with columns shape_id, x, y; vertices listed in boundary order."""
    groups: dict = {}
    order = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"shape_id", "x", "y"} <= set(reader.fieldnames):
                raise ConfigError(
                    f"shape manifest {path} must have columns shape_id, x, y"
                )
            for row in reader:
                sid = row["shape_id"]
                if sid not in groups:
                    groups[sid] = []
                    order.append(sid)
                groups[sid].append((float(row["x"]), float(row["y"])))
    except OSError as exc:
        raise ConfigError(f"cannot read shape manifest: {exc}") from exc
    shapes = [np.asarray(groups[sid], dtype=float) for sid in order]
    for sid, poly in zip(order, shapes):
        if len(poly) < 3:
            raise ConfigError(f"shape {sid} in {path} has fewer than 3 vertices")
    return shapes


def write_shape_csv(path, shapes):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape_id", "x", "y"])
        for i, poly in enumerate(shapes):
            for x, y in np.asarray(poly):
                writer.writerow([i, repr(float(x)), repr(float(y))])


def initial_shapes(cfg):
    shapes = (
        default_benchmark_shapes()
        if cfg["shapes"] is None
        else read_shape_manifest(cfg["shapes"])
    )
    # boundary polylines are refined to the mesh density so the deformation
    # field has vertices to act on; meshing preserves them vertex-for-vertex
    h = cfg["mesh"]["target_edge_length"]
    return [geometry.subdivide_polyline(poly, h) for poly in shapes]


def build_mesh(cfg):
    shapes = initial_shapes(cfg)
    return generate_benchmark(
        tuple(float(v) for v in cfg["bounds"]),
        shapes,
        target_edge_length=cfg["mesh"]["target_edge_length"],
    )


def constraints_from_config(cfg, mesh) -> geometry.ConstraintSpec:
    shapes = mesh.shapes()
    s = len(shapes)
    if s == 0:
        raise ConfigError("constraints: require at least one shape to constrain")
    con = cfg["constraints"]
    if con["volume_min"] == "initial":
        vol_min = shapes.volumes()
    else:
        vol_min = np.asarray([float(v) for v in con["volume_min"]], dtype=float)
        _require(vol_min.shape == (s,), "constraints.volume_min",
                 f"needs one entry per shape ({s})")
    if con["bary_min"] is not None:
        bary_min = np.asarray(con["bary_min"], dtype=float)
        bary_max = np.asarray(con["bary_max"], dtype=float)
        _require(bary_min.shape == (s, 2) and bary_max.shape == (s, 2),
                 "constraints.bary_min", f"needs one [x, y] pair per shape ({s})")
    else:
        centers = shapes.barycenters()
        bary_min = centers + np.asarray(con["box_offset_min"], dtype=float)
        bary_max = centers + np.asarray(con["box_offset_max"], dtype=float)
    return geometry.ConstraintSpec(vol_min=vol_min, bary_min=bary_min, bary_max=bary_max)


# -- artifacts -------------------------------------------------------------------


def write_manifest(out_dir, cfg, command):
    payload = {
        "command": command,
        "config_sha256": config_hash(cfg),
        "code_version": __version__,
        "seed": cfg["seed"],
        "config": cfg,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _vertex_speed(mesh, state):
    # velocity magnitude at mesh vertices (P2 dofs order vertices first)
    v = state.v[:, : mesh.n_vertices]
    return np.hypot(v[0], v[1])


def _save_flow_vtk(mesh, state, path):
    save_vtk(mesh, path, point_data={
        "speed": _vertex_speed(mesh, state),
        "pressure": state.p,
    })


def write_barycenter_trajectory(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "shape_id", "bx", "by"])
        for k, sid, bx, by in rows:
            writer.writerow([k, sid, repr(float(bx)), repr(float(by))])


# -- subcommands -----------------------------------------------------------------


def _prepare_out(cfg, command):
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    write_manifest(out_dir, cfg, command)
    save_config(cfg, os.path.join(out_dir, "config.yaml"))  # rerunnable via --config
    return out_dir


def cmd_mesh(cfg):
    out = _prepare_out(cfg, "mesh")
    mesh = build_mesh(cfg)
    save_mesh(mesh, os.path.join(out, "mesh.npz"))
    save_vtk(mesh, os.path.join(out, "mesh.vtk"))
    write_shape_csv(os.path.join(out, "shapes_initial.csv"), list(mesh.shapes()))
    q = mesh.quality()
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles, "
          f"{len(mesh.shape_vertex_map)} shapes, min quality {q.min_radius_ratio:.3f}")
    print(f"artifacts in {out}")
    return 0


def parse_xi(text, n_modes):
    presets = {"-1": -1.0, "0": 0.0, "+1": 1.0, "1": 1.0}
    if text in presets:
        return np.full(n_modes, presets[text])
    values = np.asarray([float(tok) for tok in text.split(",")], dtype=float)
    if values.shape != (n_modes,):
        raise ConfigError(
            f"xi needs {n_modes} comma-separated components (got {values.size})"
        )
    return values


def cmd_solve(cfg, xi_text):
    out = _prepare_out(cfg, "solve")
    model = model_from_config(cfg)
    xi = parse_xi(xi_text, model.n_modes)
    mesh = build_mesh(cfg)
    state = flow.solve_state(
        mesh, xi, cfg["nu"], f=body_force_from_config(cfg),
        settings=settings_from_config(cfg), model=model,
    )
    j = flow.objective(mesh, state, cfg["nu"])
    _save_flow_vtk(mesh, state, os.path.join(out, "solution.vtk"))
    with open(os.path.join(out, "solve.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "J": j,
            "xi": [float(x) for x in xi],
            "newton_residuals": list(state.newton_residuals),
        }, fh, indent=1)
    print(f"J = {j!r}")
    print(f"artifacts in {out}")
    return 0


def cmd_optimize(cfg, resume_from=None):
    out = _prepare_out(cfg, "optimize")
    mesh = build_mesh(cfg)
    constraints = constraints_from_config(cfg, mesh)
    state0 = flow.solve_state(
        mesh, np.zeros(cfg["inflow"]["n_modes"]), cfg["nu"],
        f=body_force_from_config(cfg), settings=settings_from_config(cfg),
        model=model_from_config(cfg),
    )
    _save_flow_vtk(mesh, state0, os.path.join(out, "fields_start.vtk"))
    write_shape_csv(os.path.join(out, "shapes_k000.csv"), list(mesh.shapes()))

    ckpt_dir = os.path.join(out, "checkpoints")
    result = optimizer.outer_loop(
        mesh,
        constraints,
        schedules_from_config(cfg),
        params=params_from_config(cfg),
        seed=cfg["seed"],
        nu=cfg["nu"],
        f=body_force_from_config(cfg),
        model=model_from_config(cfg),
        settings=settings_from_config(cfg),
        log_path=os.path.join(out, "run_log.csv"),
        checkpoint_dir=ckpt_dir,
        resume_from=resume_from,
        progress=lambda rec: print(
            f"k={rec.k} N_k={rec.n_k} m_k={rec.m_k} "
            f"objective={rec.objective_estimate:.6g} S_k={rec.s_k:.6g} "
            f"mu_k={rec.mu_k:g} H_k={rec.h_k:.6g}", flush=True,
        ),
    )

    # per-iteration shape artifacts from the checkpoint trail
    bary_rows = [
        (0, i, *geometry.barycenter(poly)) for i, poly in enumerate(mesh.shapes())
    ]
    for rec in result.records:
        ck = os.path.join(ckpt_dir, f"checkpoint_k{rec.k:03d}.json")
        st, _ = optimizer.load_checkpoint(ck)
        shapes_k = list(st.mesh.shapes())
        write_shape_csv(os.path.join(out, f"shapes_k{rec.k:03d}.csv"), shapes_k)
        bary_rows.extend(
            (rec.k, i, *geometry.barycenter(poly)) for i, poly in enumerate(shapes_k)
        )
    write_barycenter_trajectory(os.path.join(out, "barycenter_trajectory.csv"), bary_rows)

    final_state = flow.solve_state(
        result.state.mesh, np.zeros(cfg["inflow"]["n_modes"]), cfg["nu"],
        f=body_force_from_config(cfg), settings=settings_from_config(cfg),
        model=model_from_config(cfg),
    )
    _save_flow_vtk(result.state.mesh, final_state, os.path.join(out, "fields_end.vtk"))
    h = geometry.constraint_vector(result.state.mesh.shapes(), constraints)
    print(f"finished after k={result.state.k}; max constraint value {float(np.max(h)):.3e}")
    print(f"artifacts in {out}")
    return 0


def cmd_optimize_deterministic(cfg):
    out = _prepare_out(cfg, "optimize --deterministic")
    mesh = build_mesh(cfg)
    constraints = constraints_from_config(cfg, mesh)
    det = cfg["deterministic"]
    result = optimizer.deterministic_loop(
        mesh,
        constraints,
        params=params_from_config(cfg),
        nu=cfg["nu"],
        f=body_force_from_config(cfg),
        model=model_from_config(cfg),
        settings=settings_from_config(cfg),
        sigma=cfg["line_search"]["sigma"],
        beta=det["beta"],
        t0=det["t0"],
        inner_cap=det["inner_cap"],
        max_backtracks=cfg["line_search"]["max_backtracks"],
        log_path=os.path.join(out, "run_log.csv"),
    )
    with open(os.path.join(out, "det_steps.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "j", "step", "la_before", "la_after", "r_cur", "r_ref"])
        for s in result.steps:
            writer.writerow([s.k, s.j, repr(s.step), repr(s.la_before),
                             repr(s.la_after), repr(s.r_cur), repr(s.r_ref)])
    write_shape_csv(os.path.join(out, "shapes_final.csv"), list(result.state.mesh.shapes()))
    ratio_fired = sum(1 for v in result.stop_reasons.values() if v == "ratio")
    print(f"finished k={result.state.k}; ratio rule fired in {ratio_fired} of "
          f"{len(result.stop_reasons)} outer iterations")
    print(f"artifacts in {out}")
    return 0


def cmd_estimate_lipschitz(cfg):
    out = _prepare_out(cfg, "estimate-lipschitz")
    mesh = build_mesh(cfg)
    constraints = constraints_from_config(cfg, mesh)
    lip = cfg["lipschitz"]
    ls = cfg["line_search"]
    fit = optimizer.estimate_lipschitz(
        mesh,
        constraints,
        [float(m) for m in lip["mu_values"]],
        seed=cfg["seed"],
        nu=cfg["nu"],
        f=body_force_from_config(cfg),
        model=model_from_config(cfg),
        settings=settings_from_config(cfg),
        m=lip["m"],
        n_iters=lip["n_iters"],
        sigma=ls["sigma"],
        beta=ls["beta"],
        t0=ls["t0"],
        max_backtracks=ls["max_backtracks"],
        variant=cfg["algorithm"]["variant"],
        n_threads=cfg["algorithm"]["n_threads"],
        remesh_threshold=cfg["algorithm"]["remesh_threshold"],
        progress=lambda mu, j, t: print(f"mu={mu:g} iteration {j}: accepted t={t:g}", flush=True),
    )
    with open(os.path.join(out, "lipschitz_steps.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mu", "min_step"])
        for mu, step in fit.pairs:
            writer.writerow([repr(float(mu)), repr(float(step))])
    with open(os.path.join(out, "lipschitz_fit.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "l_jtilde": fit.l_jtilde,
            "l_h": fit.l_h,
            "r_squared": fit.r_squared,
            "pairs": [[float(mu), float(t)] for mu, t in fit.pairs],
        }, fh, indent=1)
    print(f"L(mu) = {fit.l_jtilde:.5g} + {fit.l_h:.5g} * mu   (R^2 = {fit.r_squared:.5g})")
    print(f"artifacts in {out}")
    return 0


# -- plotting --------------------------------------------------------------------

_FIGSIZE = (6.4, 4.8)
_DPI = 150
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def cmd_plot(cfg, run_dir=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = cfg["output_dir"] if run_dir is None else run_dir
    log_path = os.path.join(run_dir, "run_log.csv")
    if not os.path.exists(log_path):
        raise ConfigError(f"missing artifact: {log_path}")
    records = optimizer.load_run_log(log_path)
    if not records:
        raise ConfigError(f"no rows in {log_path}")

    ks = [r.k for r in records]

    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.semilogy(ks, [r.s_k for r in records], "o-", color=_COLORS[0])
    ax.set_xlabel("outer iteration k")
    ax.set_ylabel("S_k")
    ax.set_xticks(ks)
    ax.grid(True, which="both", alpha=0.3)
    fig.savefig(os.path.join(run_dir, "s_decay.png"), dpi=_DPI, bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.plot(ks, [r.objective_estimate for r in records], "o-", color=_COLORS[1])
    ax.set_xlabel("outer iteration k")
    ax.set_ylabel("objective estimate")
    ax.set_xticks(ks)
    ax.grid(True, alpha=0.3)
    fig.savefig(os.path.join(run_dir, "objective_trace.png"), dpi=_DPI, bbox_inches="tight")
    plt.close(fig)

    traj_path = os.path.join(run_dir, "barycenter_trajectory.csv")
    if os.path.exists(traj_path):
        by_shape: dict = {}
        with open(traj_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                by_shape.setdefault(int(row["shape_id"]), []).append(
                    (float(row["bx"]), float(row["by"]))
                )
        fig, ax = plt.subplots(figsize=_FIGSIZE)
        for sid, pts in sorted(by_shape.items()):
            xs, ys = zip(*pts)
            color = _COLORS[sid % len(_COLORS)]
            ax.plot(xs, ys, "o-", color=color, markersize=3, label=f"shape {sid}")
            ax.plot(xs[0], ys[0], "s", color=color, markersize=7)
        # feasible rectangles, reconstructed the same way the run built them
        try:
            mesh = build_mesh(cfg)
            spec = constraints_from_config(cfg, mesh)
            for i in range(spec.s):
                lo, hi = spec.bary_min[i], spec.bary_max[i]
                ax.add_patch(plt.Rectangle(
                    lo, hi[0] - lo[0], hi[1] - lo[1],
                    fill=False, edgecolor=_COLORS[i % len(_COLORS)], linestyle="--",
                ))
        except (ConfigError, MeshError):
            pass  # trajectories alone are still worth plotting
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_aspect("equal")
        ax.legend(loc="best", fontsize=8)
        ax.grid(True, alpha=0.3)
        fig.savefig(os.path.join(run_dir, "barycenters.png"), dpi=_DPI, bbox_inches="tight")
        plt.close(fig)

    print(f"plots in {run_dir}")
    return 0


# -- entry point -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowshapes",
        description="Shape optimization of channel obstacles under uncertain inflow.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML configuration file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY.PATH=VALUE",
            dest="overrides", help="override a configuration value (repeatable)",
        )

    common(sub.add_parser("mesh", help="generate and save the channel mesh"))

    p_solve = sub.add_parser("solve", help="solve the flow for one inflow sample")
    common(p_solve)
    p_solve.add_argument(
        "--xi", default="0",
        help="inflow sample: preset -1 | 0 | +1, or comma-separated components",
    )

    p_opt = sub.add_parser("optimize", help="run the shape optimization loop")
    common(p_opt)
    p_opt.add_argument("--deterministic", action="store_true",
                       help="line-searched run at the nominal inflow instead")
    p_opt.add_argument("--resume", help="checkpoint file or directory to resume from")

    common(sub.add_parser("estimate-lipschitz",
                          help="estimate step-rule constants by backtracking probes"))

    p_plot = sub.add_parser("plot", help="render run artifacts as images")
    common(p_plot)
    p_plot.add_argument("--run-dir", help="directory with run artifacts (default: output dir)")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "mesh":
            return cmd_mesh(cfg)
        if args.command == "solve":
            return cmd_solve(cfg, args.xi)
        if args.command == "optimize":
            if args.deterministic:
                if args.resume:
                    raise ConfigError("resume is not supported for deterministic runs")
                return cmd_optimize_deterministic(cfg)
            return cmd_optimize(cfg, resume_from=args.resume)
        if args.command == "estimate-lipschitz":
            return cmd_estimate_lipschitz(cfg)
        if args.command == "plot":
            return cmd_plot(cfg, args.run_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, OptimizeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except MeshError as exc:
        print(f"mesh failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
