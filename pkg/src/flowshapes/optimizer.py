"""Stochastic augmented Lagrangian shape optimization loop.

The outer loop drives safeguarded multiplier and penalty updates; the inner
loop performs stochastic gradient steps whose step size comes from an affine
Lipschitz model in the penalty factor.  Also here: the offline estimation of
that model via Armijo backtracking, and a deterministic Armijo baseline that
replaces the fixed step rule with a line search at xi = 0.

Sample batches are drawn from counter-based streams keyed by (seed, k, j, l),
so resumed and re-threaded runs consume identical randomness.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import flow, geometry, randfield, shapegrad
from .flow import DEFAULT_SETTINGS, SolverError
from .mesh import MeshError, deform, load_mesh, needs_remesh, remesh, save_mesh

LIPSCHITZ_STREAM_BASE = 1000


class OptimizeError(RuntimeError):
    """Raised when a solver, remesh, or line search fails inside the loop."""


@dataclass(frozen=True)
class Schedules:
    """Batch/iteration growth rules and the step rule t_k = alpha / L_k.

    Defaults give batch sizes 2^(k-1), inner iteration counts 2^(k+2), and
    L_k = l_jtilde + mu_k * l_h with the constants from the shipped fit.
    """

    m1: int = 1
    batch_growth: float = 2.0
    batch_rule: str = "geometric"  # "factorial" supported, untested at scale
    n1: int = 8
    iter_growth: float = 2.0
    alpha: float = 1.0
    l_jtilde: float = 0.42215
    l_h: float = 0.36036

    def __post_init__(self):
        if self.m1 < 1 or self.n1 < 1:
            raise ValueError("m1 and n1 must be at least 1")
        if not 0.0 < self.alpha < 2.0:
            raise ValueError("alpha must lie in (0, 2)")
        if self.batch_growth < 1.0 or self.iter_growth < 1.0:
            raise ValueError("growth factors must be >= 1 (non-decreasing schedules)")
        if self.batch_rule not in ("geometric", "factorial"):
            raise ValueError(f"unknown batch rule {self.batch_rule!r}")
        if self.l_jtilde <= 0.0 or self.l_h <= 0.0:
            raise ValueError("Lipschitz constants must be positive")

    def batch_size(self, k: int) -> int:
        if self.batch_rule == "factorial":
            return self.m1 * math.factorial(k - 1)
        return max(1, round(self.m1 * self.batch_growth ** (k - 1)))

    def inner_iters(self, k: int) -> int:
        return max(1, round(self.n1 * self.iter_growth ** (k - 1)))

    def step_size(self, k: int, mu: float) -> float:
        return self.alpha / (self.l_jtilde + mu * self.l_h)


@dataclass(frozen=True)
class LipschitzFit:
    """Affine model L(mu) = l_jtilde + mu * l_h fitted to (mu, min-step) data."""

    l_jtilde: float
    l_h: float
    r_squared: float
    pairs: tuple  # ((mu, min_step), ...)

    def __post_init__(self):
        if self.l_jtilde <= 0.0 or self.l_h <= 0.0:
            raise ValueError("fitted Lipschitz constants must be positive")
        if not 0.0 <= self.r_squared <= 1.0 + 1e-12:
            raise ValueError("r_squared must lie in [0, 1]")


@dataclass
class OptimizerState:
    mesh: object
    mu: float
    lam: np.ndarray
    w: np.ndarray
    h_prev: float
    seed: int
    k: int = 0  # last completed outer iteration
    counts: dict = field(default_factory=lambda: {
        "state_solves": 0,
        "adjoint_solves": 0,
        "deformation_solves": 0,
        "remeshes": 0,
    })


@dataclass(frozen=True)
class AlgoParams:
    mu1: float = 1.0
    tau: float = 0.9
    gamma: float = 2.0
    box_lo: float = -100.0
    box_hi: float = 100.0
    variant: str = "kkt"
    k_max: int = 5
    s_tol: float = 0.0  # 0 disables the early-stop test
    feas_tol: float = 0.0
    remesh_threshold: float = 0.4
    n_threads: int = 1

    def __post_init__(self):
        if self.mu1 <= 0.0:
            raise ValueError("mu1 must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.gamma <= 1.0:
            raise ValueError("gamma must exceed 1")
        if self.box_lo >= self.box_hi:
            raise ValueError("safeguard box must satisfy lo < hi")
        if self.variant not in shapegrad.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.n_threads < 1:
            raise ValueError("n_threads must be at least 1")


@dataclass(frozen=True)
class LogRecord:
    k: int
    n_k: int
    m_k: int
    objective_estimate: float
    s_k: float
    mu_k: float
    h_k: float
    lam: tuple


@dataclass(frozen=True)
class RunResult:
    records: list
    state: OptimizerState
    log_path: str | None = None


# -- update rules --------------------------------------------------------------


def multiplier_update(h, w, mu: float, variant: str = "kkt") -> np.ndarray:
    """kkt: max(0, w + mu h).  verbatim: mu * min(0, h + w/mu), the printed
    line which never produces positive multipliers."""
    h = np.asarray(h, dtype=float)
    w = np.asarray(w, dtype=float)
    if h.shape != w.shape:
        raise ValueError("h and w must have identical shapes")
    if mu <= 0.0:
        raise ValueError("mu must be positive")
    if variant == "kkt":
        return np.maximum(0.0, w + mu * h)
    if variant == "verbatim":
        return mu * np.minimum(0.0, h + w / mu)
    raise ValueError(f"unknown variant {variant!r}")


def penalty_update(
    h_new: float, h_prev: float, mu: float, k: int, tau: float = 0.9, gamma: float = 2.0
) -> float:
    """Grow mu by gamma unless feasibility improved enough (or k = 1)."""
    if mu <= 0.0:
        raise ValueError("mu must be positive")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if gamma <= 1.0:
        raise ValueError("gamma must exceed 1")
    if k == 1 or h_new <= tau * h_prev:
        return mu
    return gamma * mu


def project_safeguard(lam, lo: float = -100.0, hi: float = 100.0) -> np.ndarray:
    if lo >= hi:
        raise ValueError("safeguard box must satisfy lo < hi")
    return np.clip(np.asarray(lam, dtype=float), lo, hi)


# -- inner loop ----------------------------------------------------------------


def _sample_gradients(
    mesh, batch, w, mu, constraints, nu, f, settings, model, variant, n_threads, k, j
):
    """Per-sample state/adjoint solves and derivative assembly, in sample
    order.  Returns (list of functional value arrays, list of objectives)."""

    def work(l):
        try:
            st = flow.solve_state(mesh, batch[l], nu, f=f, settings=settings, model=model)
            adj = flow.solve_adjoint(mesh, st, nu, settings=settings)
        except SolverError as exc:
            raise OptimizeError(f"solver failure at k={k}, j={j}, sample l={l}: {exc}") from exc
        dla = shapegrad.assemble_dLA(
            mesh, st, adj, constraints, w, mu, nu, f=f, variant=variant
        )
        return dla.values, flow.objective(mesh, st, nu)

    indices = range(len(batch))
    if n_threads > 1:
        flow.warm_cache(mesh)
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(work, indices))
    else:
        results = [work(l) for l in indices]
    return [r[0] for r in results], [r[1] for r in results]


def _move_mesh(mesh, vbar_v, t, threshold, k, j, counts):
    """One retraction step with remeshing on quality loss or tangling."""
    moved = deform(mesh, vbar_v, -t)
    if moved.is_tangled or needs_remesh(moved, threshold):
        try:
            moved = remesh(moved)
        except MeshError as exc:
            raise OptimizeError(f"remesh failed at k={k}, j={j}: {exc}") from exc
        counts["remeshes"] += 1
    return moved


def inner_loop(
    state: OptimizerState,
    schedules: Schedules,
    constraints,
    k: int,
    *,
    nu: float,
    f=None,
    model=randfield.DEFAULT_MODEL,
    settings=DEFAULT_SETTINGS,
    params: AlgoParams = AlgoParams(),
    step_size=None,
):
    """N_k stochastic steps at fixed (w, mu); mutates state.mesh.

    Returns (S_k, jbar_k): the averaged squared H1 norm of the batch-mean
    deformation fields, and the batch-mean objective at the final iterate.
    One deformation solve per step suffices because the solve is linear in
    the right-hand side.
    """
    m_k = schedules.batch_size(k)
    n_k = schedules.inner_iters(k)
    t_k = schedules.step_size(k, state.mu) if step_size is None else step_size
    s_sum = 0.0
    jbar = math.nan
    for j in range(1, n_k + 1):
        batch = randfield.draw_batch(state.seed, k, j, m_k, model)
        grads, objs = _sample_gradients(
            state.mesh, batch, state.w, state.mu, constraints, nu, f,
            settings, model, params.variant, params.n_threads, k, j,
        )
        avg = np.stack(grads).sum(axis=0) / m_k
        stiffness = shapegrad.solve_stiffness(state.mesh)
        vbar = shapegrad.solve_deformation(
            state.mesh, shapegrad.DerivativeFunctional(avg), stiffness
        )
        s_sum += vbar.h1_norm**2
        if j == n_k:
            jbar = float(np.mean(objs))
        state.counts["state_solves"] += m_k
        state.counts["adjoint_solves"] += m_k
        state.counts["deformation_solves"] += 1
        if t_k != 0.0:
            state.mesh = _move_mesh(
                state.mesh, vbar.v, t_k, params.remesh_threshold, k, j, state.counts
            )
    return s_sum / n_k, jbar


# -- run log and checkpoints ---------------------------------------------------

_CSV_FIXED = ("k", "N_k", "m_k", "objective_estimate", "S_k", "mu_k", "H_k")


def write_run_log(path, records):
    """Full rewrite: deterministic bytes for a given record list."""
    n_lam = len(records[0].lam) if records else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_CSV_FIXED) + [f"lambda_{i + 1}" for i in range(n_lam)])
        for rec in records:
            writer.writerow(
                [rec.k, rec.n_k, rec.m_k, repr(float(rec.objective_estimate)),
                 repr(float(rec.s_k)), repr(float(rec.mu_k)), repr(float(rec.h_k))]
                + [repr(float(x)) for x in rec.lam]
            )


def load_run_log(path):
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_lam = len(header) - len(_CSV_FIXED)
        for row in reader:
            records.append(LogRecord(
                k=int(row[0]), n_k=int(row[1]), m_k=int(row[2]),
                objective_estimate=float(row[3]), s_k=float(row[4]),
                mu_k=float(row[5]), h_k=float(row[6]),
                lam=tuple(float(x) for x in row[7 : 7 + n_lam]),
            ))
    return records


def save_checkpoint(directory, state: OptimizerState, records) -> str:
    os.makedirs(directory, exist_ok=True)
    base = os.path.join(directory, f"checkpoint_k{state.k:03d}")
    save_mesh(state.mesh, base + ".npz")
    payload = {
        "k": state.k,
        "mu": state.mu,
        "lam": list(state.lam),
        "w": list(state.w),
        "h_prev": state.h_prev,
        "seed": state.seed,
        "counts": state.counts,
        "records": [asdict(r) for r in records],
    }
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
    with open(os.path.join(directory, "latest.json"), "w", encoding="utf-8") as fh:
        json.dump({"checkpoint": os.path.basename(base + ".json")}, fh)
    return base + ".json"


def load_checkpoint(path):
    """Accepts a checkpoint .json (or a directory containing latest.json)."""
    if os.path.isdir(path):
        with open(os.path.join(path, "latest.json"), encoding="utf-8") as fh:
            path = os.path.join(path, json.load(fh)["checkpoint"])
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    mesh = load_mesh(os.path.splitext(path)[0] + ".npz")
    state = OptimizerState(
        mesh=mesh,
        mu=payload["mu"],
        lam=np.asarray(payload["lam"], dtype=float),
        w=np.asarray(payload["w"], dtype=float),
        h_prev=payload["h_prev"],
        seed=payload["seed"],
        k=payload["k"],
        counts=payload["counts"],
    )
    records = [LogRecord(lam=tuple(r.pop("lam")), **r) for r in payload["records"]]
    return state, records


# -- outer loop ----------------------------------------------------------------


def outer_loop(
    mesh,
    constraints,
    schedules: Schedules = Schedules(),
    *,
    params: AlgoParams = AlgoParams(),
    seed: int = 2024,
    nu: float = 0.2,
    f=None,
    model=randfield.DEFAULT_MODEL,
    settings=DEFAULT_SETTINGS,
    log_path=None,
    checkpoint_dir=None,
    resume_from=None,
    progress=None,
) -> RunResult:
    """Run the augmented Lagrangian method for up to k_max outer iterations.

    Per outer iteration k the log records the start-of-iteration multipliers,
    penalty factor, and feasibility measure, together with S_k and the final
    batch objective estimate.  Stops early only when both s_tol and feas_tol
    are set and met.
    """
    if resume_from is not None:
        state, records = load_checkpoint(resume_from)
    else:
        n_con = 5 * len(mesh.shape_vertex_map)
        state = OptimizerState(
            mesh=mesh,
            mu=params.mu1,
            lam=np.zeros(n_con),
            w=np.zeros(n_con),
            h_prev=0.0,
            seed=seed,
        )
        h0 = geometry.constraint_vector(state.mesh.shapes(), constraints)
        state.h_prev = geometry.feasibility_H(h0, state.w, state.mu, params.variant)
        records = []

    for k in range(state.k + 1, params.k_max + 1):
        mu_log, lam_log, h_log = state.mu, state.lam.copy(), state.h_prev
        s_k, jbar = inner_loop(
            state, schedules, constraints, k,
            nu=nu, f=f, model=model, settings=settings, params=params,
        )
        h = geometry.constraint_vector(state.mesh.shapes(), constraints)
        lam_new = multiplier_update(h, state.w, state.mu, params.variant)
        h_new = geometry.feasibility_H(h, state.w, state.mu, params.variant)
        state.mu = penalty_update(h_new, state.h_prev, state.mu, k, params.tau, params.gamma)
        state.w = project_safeguard(lam_new, params.box_lo, params.box_hi)
        state.lam = lam_new
        state.h_prev = h_new
        state.k = k
        records.append(LogRecord(
            k=k, n_k=schedules.inner_iters(k), m_k=schedules.batch_size(k),
            objective_estimate=float(jbar), s_k=float(s_k), mu_k=float(mu_log),
            h_k=float(h_log), lam=tuple(float(x) for x in lam_log),
        ))
        if log_path is not None:
            write_run_log(log_path, records)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, state, records)
        if progress is not None:
            progress(records[-1])
        if (
            params.s_tol > 0.0
            and params.feas_tol > 0.0
            and s_k <= params.s_tol
            and float(np.max(h)) <= params.feas_tol
        ):
            break
    return RunResult(records, state, log_path)


# -- Lipschitz estimation ------------------------------------------------------


def lipschitz_fit(mu_values, min_steps, sigma: float = 1e-4) -> LipschitzFit:
    """Least-squares affine fit L(mu) = l_jtilde + mu l_h through the
    per-penalty estimates L = 2(1 - sigma) / min-step."""
    mu_values = np.asarray(mu_values, dtype=float)
    min_steps = np.asarray(min_steps, dtype=float)
    if mu_values.shape != min_steps.shape or mu_values.ndim != 1:
        raise ValueError("mu_values and min_steps must be 1-d arrays of equal length")
    if mu_values.size < 2 or np.unique(mu_values).size < 2:
        raise ValueError("underdetermined fit: at least two distinct (mu, step) pairs required")
    if np.any(min_steps <= 0.0):
        raise ValueError("accepted steps must be positive")
    big_l = 2.0 * (1.0 - sigma) / min_steps
    design = np.column_stack([np.ones_like(mu_values), mu_values])
    coef, *_ = np.linalg.lstsq(design, big_l, rcond=None)
    span = float(mu_values.max() - mu_values.min())
    if coef[1] * span <= 1e-12 * float(np.max(np.abs(big_l))):
        raise ValueError(
            "accepted steps show no growth in the penalty factor; "
            "cannot fit a positive l_h (raise t0 so backtracking engages)"
        )
    resid = big_l - design @ coef
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((big_l - big_l.mean()) ** 2))
    # guard: identical L values make ss_tot rounding noise, not variance
    if ss_tot <= 1e-20 * float(big_l @ big_l):
        r2 = 1.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return LipschitzFit(
        l_jtilde=float(coef[0]),
        l_h=float(coef[1]),
        r_squared=min(r2, 1.0),
        pairs=tuple(zip(mu_values.tolist(), min_steps.tolist())),
    )


def _batch_objective(mesh, batch, nu, f, settings, model, n_threads):
    """Mean objective over a sample batch (ordered reduction); None if any
    sample fails to converge (used to reject a trial shape)."""

    def work(l):
        st = flow.solve_state(mesh, batch[l], nu, f=f, settings=settings, model=model)
        return flow.objective(mesh, st, nu)

    try:
        if n_threads > 1:
            flow.warm_cache(mesh)
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                objs = list(pool.map(work, range(len(batch))))
        else:
            objs = [work(l) for l in range(len(batch))]
    except SolverError:
        return None
    return float(np.mean(objs))


def estimate_lipschitz(
    mesh,
    constraints,
    mu_values,
    *,
    seed: int = 2024,
    nu: float = 0.2,
    f=None,
    model=randfield.DEFAULT_MODEL,
    settings=DEFAULT_SETTINGS,
    m: int = 32,
    n_iters: int = 8,
    sigma: float = 1e-4,
    beta: float = 0.9,
    t0: float = 8.0,
    max_backtracks: int = 80,
    w=None,
    variant: str = "kkt",
    n_threads: int = 1,
    remesh_threshold: float = 0.4,
    progress=None,
) -> LipschitzFit:
    """Offline step-size probe: for each penalty factor, run a few descent
    iterations with Armijo backtracking on the batch-mean augmented
    Lagrangian and record the smallest accepted step.

    Per-sample deformation fields are solved and averaged here (the linearity
    shortcut is exercised by the main loop instead).  Each penalty factor
    uses its own sample stream so the estimates are independent.
    """
    mu_values = list(mu_values)
    if not mu_values:
        raise ValueError("mu_values must be non-empty")
    n_con = 5 * len(mesh.shape_vertex_map)
    w = np.zeros(n_con) if w is None else np.asarray(w, dtype=float)
    min_steps = []
    for idx, mu in enumerate(mu_values):
        stream = LIPSCHITZ_STREAM_BASE + idx
        cur = mesh
        min_t = math.inf
        for j in range(1, n_iters + 1):
            batch = randfield.draw_batch(seed, 1, j, m, model, stream=stream)
            grads, objs = _sample_gradients(
                cur, batch, w, mu, constraints, nu, f, settings, model,
                variant, n_threads, 1, j,
            )
            stiffness = shapegrad.solve_stiffness(cur)
            fields = [
                shapegrad.solve_deformation(cur, shapegrad.DerivativeFunctional(g), stiffness).v
                for g in grads
            ]
            vbar = np.stack(fields).sum(axis=0) / m
            vnorm2 = shapegrad.h1_inner(cur, vbar, vbar)
            h_cur = geometry.constraint_vector(cur.shapes(), constraints)
            la_cur = float(np.mean(objs)) + flow.penalty_value(h_cur, w, mu)
            accepted = None
            for jp in range(max_backtracks):
                t = t0 * beta**jp
                trial = deform(cur, vbar, -t)
                if trial.is_tangled:
                    continue
                jt = _batch_objective(trial, batch, nu, f, settings, model, n_threads)
                if jt is None:
                    continue
                h_t = geometry.constraint_vector(trial.shapes(), constraints)
                la_t = jt + flow.penalty_value(h_t, w, mu)
                if la_t <= la_cur - sigma * t * vnorm2:
                    accepted = (t, trial)
                    break
            if accepted is None:
                raise OptimizeError(
                    f"no Armijo step accepted for mu={mu} at iteration {j} "
                    f"within {max_backtracks} backtracks"
                )
            t, cur = accepted
            min_t = min(min_t, t)
            if needs_remesh(cur, remesh_threshold):
                cur = remesh(cur)
            if progress is not None:
                progress(mu, j, t)
        min_steps.append(min_t)
    return lipschitz_fit(np.asarray(mu_values, dtype=float), np.asarray(min_steps), sigma)


# -- deterministic baseline ----------------------------------------------------


def optimality_measure(mesh, state, adjoint, constraints, lam, nu, f=None, variant="kkt"):
    """r-hat: H1 norm of the Riesz representative of the Lagrangian shape
    derivative, plus a multiplier-aware feasibility norm."""
    dl = shapegrad.assemble_dL_lagrangian(mesh, state, adjoint, constraints, lam, nu, f)
    grad_term = shapegrad.riesz_h1(mesh, dl).h1_norm
    h = geometry.constraint_vector(mesh.shapes(), constraints)
    lam = np.asarray(lam, dtype=float)
    if variant == "verbatim":
        feas = float(np.linalg.norm(h + np.maximum(0.0, h + lam)))
    else:
        feas = float(np.linalg.norm(np.maximum(h, -lam)))
    return grad_term + feas


@dataclass(frozen=True)
class DetStep:
    k: int
    j: int
    step: float
    la_before: float
    la_after: float
    r_cur: float
    r_ref: float


@dataclass(frozen=True)
class DetResult:
    records: list
    steps: list
    stop_reasons: dict
    state: OptimizerState
    log_path: str | None = None


def deterministic_loop(
    mesh,
    constraints,
    *,
    params: AlgoParams = AlgoParams(),
    nu: float = 0.2,
    f=None,
    model=randfield.DEFAULT_MODEL,
    settings=DEFAULT_SETTINGS,
    sigma: float = 1e-4,
    beta: float = 0.5,
    t0: float = 8.0,
    inner_cap: int = 40,
    max_backtracks: int = 60,
    log_path=None,
    progress=None,
) -> DetResult:
    """Armijo baseline at xi = 0: the fixed step rule is replaced by a line
    search on the augmented Lagrangian, and each inner loop ends when the
    optimality measure has dropped by the factor 1/(k^2 + 2)."""
    xi = np.zeros(model.n_modes)
    n_con = 5 * len(mesh.shape_vertex_map)
    state = OptimizerState(
        mesh=mesh, mu=params.mu1, lam=np.zeros(n_con), w=np.zeros(n_con),
        h_prev=0.0, seed=0,
    )
    h0 = geometry.constraint_vector(mesh.shapes(), constraints)
    state.h_prev = geometry.feasibility_H(h0, state.w, state.mu, params.variant)
    records, steps, stop_reasons = [], [], {}

    for k in range(1, params.k_max + 1):
        mu_log, lam_log, h_log = state.mu, state.lam.copy(), state.h_prev
        r_ref = None
        accepted_steps = []
        s_sum = 0.0
        j_final = math.nan
        stop_reasons[k] = "cap"
        for j in range(1, inner_cap + 1):
            try:
                st = flow.solve_state(state.mesh, xi, nu, f=f, settings=settings, model=model)
                adj = flow.solve_adjoint(state.mesh, st, nu, settings=settings)
            except SolverError as exc:
                raise OptimizeError(f"solver failure at k={k}, j={j}: {exc}") from exc
            state.counts["state_solves"] += 1
            state.counts["adjoint_solves"] += 1
            j_final = flow.objective(state.mesh, st, nu)
            r_cur = optimality_measure(
                state.mesh, st, adj, constraints, state.lam, nu, f, params.variant
            )
            if r_ref is None:
                r_ref = r_cur
            elif r_cur / r_ref <= 1.0 / (k**2 + 2.0):
                stop_reasons[k] = "ratio"
                break
            dla = shapegrad.assemble_dLA(
                state.mesh, st, adj, constraints, state.w, state.mu, nu,
                f=f, variant=params.variant,
            )
            stiffness = shapegrad.solve_stiffness(state.mesh)
            v = shapegrad.solve_deformation(state.mesh, dla, stiffness)
            state.counts["deformation_solves"] += 1
            s_sum += v.h1_norm**2
            h_cur = geometry.constraint_vector(state.mesh.shapes(), constraints)
            la_cur = j_final + flow.penalty_value(h_cur, state.w, state.mu)
            t_start = t0 if len(accepted_steps) < 10 else min(accepted_steps[:10])
            hit = None
            for jp in range(max_backtracks):
                t = t_start * beta**jp
                trial = deform(state.mesh, v.v, -t)
                if trial.is_tangled:
                    continue
                jt = _batch_objective(trial, [xi], nu, f, settings, model, 1)
                if jt is None:
                    continue
                h_t = geometry.constraint_vector(trial.shapes(), constraints)
                la_t = jt + flow.penalty_value(h_t, state.w, state.mu)
                if la_t <= la_cur - sigma * t * v.h1_norm**2:
                    hit = (t, trial, la_t)
                    break
            if hit is None:
                raise OptimizeError(
                    f"no Armijo step accepted at k={k}, j={j} within {max_backtracks} backtracks"
                )
            t, trial, la_t = hit
            accepted_steps.append(t)
            steps.append(DetStep(k, j, t, la_cur, la_t, r_cur, r_ref))
            if needs_remesh(trial, params.remesh_threshold):
                trial = remesh(trial)
                state.counts["remeshes"] += 1
            state.mesh = trial
            if progress is not None:
                progress(steps[-1])
        n_inner = len(accepted_steps)
        h = geometry.constraint_vector(state.mesh.shapes(), constraints)
        lam_new = multiplier_update(h, state.w, state.mu, params.variant)
        h_new = geometry.feasibility_H(h, state.w, state.mu, params.variant)
        state.mu = penalty_update(h_new, state.h_prev, state.mu, k, params.tau, params.gamma)
        state.w = project_safeguard(lam_new, params.box_lo, params.box_hi)
        state.lam = lam_new
        state.h_prev = h_new
        state.k = k
        records.append(LogRecord(
            k=k, n_k=n_inner, m_k=1, objective_estimate=float(j_final),
            s_k=float(s_sum / max(1, n_inner)), mu_k=float(mu_log), h_k=float(h_log),
            lam=tuple(float(x) for x in lam_log),
        ))
        if log_path is not None:
            write_run_log(log_path, records)
    return DetResult(records, steps, stop_reasons, state, log_path)
