"""SOLVE -> ESTIMATE -> MARK -> REFINE loop with bulk-chasing marking.

Each iteration rebuilds the vertical partition: the truncation height grows
logarithmically with the base-mesh size and the number of vertical intervals
tracks (#elements)^(1/n).
"""

import math
import time
from dataclasses import dataclass, field as dc_field, fields

import numpy as np

from . import estimator as est_mod
from . import mesh as mesh_mod
from . import system as sys_mod


@dataclass
class AfemConfig:
    s: float
    domain: str
    f: callable
    u_exact: callable = None
    theta: float = 0.5
    max_iterations: int = 60
    dof_budget: int = 100_000
    gamma_policy: str = "default"
    c_t: float = 1.0
    enforce_mesh_condition: bool = False
    solver_tol: float = 1e-10
    space_tag: str = "bubble"
    include_flux_osc: bool = False
    marking: str = "star"
    seed_h: float = 0.25
    label: str = ""

    def __post_init__(self):
        if not (0.0 < self.theta <= 1.0):
            raise ValueError("marking parameter must lie in (0, 1]")
        if self.dof_budget <= 0 or self.max_iterations <= 0:
            raise ValueError("budgets must be positive")
        if self.marking not in ("star", "element"):
            raise ValueError(f"unknown marking mode {self.marking!r}")


CSV_COLUMNS = [
    "iter", "n_base_elems", "n_cyl_cells", "dofs", "M", "Y", "error",
    "estimator", "oscillation", "tau", "effectivity", "aspect_bottom_mean",
    "mesh_cond_worst", "solver_iters", "wall_ms",
]

_INT_COLUMNS = {"iter", "n_base_elems", "n_cyl_cells", "dofs", "M",
                "solver_iters"}


@dataclass
class IterationRecord:
    iter: int
    n_base_elems: int
    n_cyl_cells: int
    dofs: int
    M: int
    Y: float
    error: float
    estimator: float
    oscillation: float
    tau: float
    effectivity: float
    aspect_bottom_mean: float
    mesh_cond_worst: float
    solver_iters: int
    wall_ms: float

    def csv_row(self):
        vals = []
        for name in CSV_COLUMNS:
            v = getattr(self, name)
            vals.append(str(int(v)) if name in _INT_COLUMNS else repr(float(v)))
        return ",".join(vals)


def records_to_csv(records, path):
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in records:
            fh.write(r.csv_row() + "\n")


def records_from_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header in {path}")
        out = []
        for line in fh:
            parts = line.strip().split(",")
            kwargs = {}
            for name, raw in zip(CSV_COLUMNS, parts):
                kwargs[name] = int(raw) if name in _INT_COLUMNS else float(raw)
            out.append(IterationRecord(**kwargs))
    return out


@dataclass
class RunResult:
    records: list
    status: str                 # 'converged' | 'budget' | 'cap'
    config: AfemConfig
    final_base: "object" = None
    energies: list = dc_field(default_factory=list)
    reference_energy: float = None
    meshes: list = dc_field(default_factory=list)


# ---------------------------------------------------------------------------
# marking


@dataclass
class MarkDecision:
    indices: np.ndarray
    converged: bool


def mark_dorfler(tau_values, theta):
    """Minimal-cardinality set with tau(M)^2 >= theta^2 tau(total)^2.

    Sorted greedy prefix; ties broken by index so runs are deterministic.
    """
    if not (0.0 < theta <= 1.0):
        raise ValueError("theta must lie in (0, 1]")
    tau = np.asarray(tau_values, dtype=float)
    if np.all(tau == 0.0):
        return MarkDecision(indices=np.empty(0, dtype=np.int64), converged=True)
    order = np.lexsort((np.arange(tau.size), -tau))
    csum = np.cumsum(tau[order] ** 2)
    target = theta**2 * csum[-1]
    k = min(int(np.searchsorted(csum, target)), tau.size - 1)
    picked = order[: k + 1]
    return MarkDecision(indices=np.sort(picked), converged=False)


def marked_elements(base, decision, marking, ind=None):
    """Translate a marking decision into the element set to bisect."""
    if marking == "element":
        return decision.indices
    adj = base.vertex_to_elements()
    out = set()
    for z in decision.indices:
        out.update(int(e) for e in adj[z])
    return np.asarray(sorted(out), dtype=np.int64)


# ---------------------------------------------------------------------------
# refinement policy


def truncation_height(n_elements):
    return 1.0 + math.log(n_elements) / 3.0


def vertical_intervals(n_elements, dim):
    return max(1, math.ceil(n_elements ** (1.0 / dim)))


def refine_step(base, elem_ids, config):
    """Bisect the marked elements and rebuild the vertical partition."""
    if len(elem_ids) == 0:
        raise ValueError("refine_step needs a nonempty marked set")
    new_base = mesh_mod.bisect(base, elem_ids)
    ne = new_base.n_elements
    Y = truncation_height(ne)
    M = vertical_intervals(ne, new_base.dim)
    gamma = mesh_mod.gamma_for(config.s, config.gamma_policy)
    ypart = mesh_mod.build_graded_partition(M, Y, gamma)
    if config.enforce_mesh_condition:
        while True:
            cyl = mesh_mod.extrude(new_base, ypart)
            ok, _, _ = mesh_mod.check_mesh_condition(cyl, config.c_t)
            if ok:
                break
            if ne * (M + 1) > 64 * config.dof_budget:
                raise RuntimeError(
                    "mesh condition cannot be met within the cell budget")
            M += 1
            ypart = mesh_mod.build_graded_partition(M, Y, gamma)
    return new_base, ypart, Y


# ---------------------------------------------------------------------------
# the loop


def run(config, keep_meshes=False, indicator_dir=None):
    """Run the adaptive loop until the budget, the cap, or convergence."""
    params_f = sys_mod.forms.FractionalParams.from_order(config.s)
    base = mesh_mod.build_base_mesh(config.domain, config.seed_h)
    gamma = mesh_mod.gamma_for(config.s, config.gamma_policy)
    records = []
    energies = []
    meshes = []
    status = "cap"
    final_cyl = None
    final_field = None
    for it in range(config.max_iterations):
        ne = base.n_elements
        Y = truncation_height(ne)
        M = vertical_intervals(ne, base.dim)
        ypart = mesh_mod.build_graded_partition(M, Y, gamma)
        if config.enforce_mesh_condition:
            while not mesh_mod.check_mesh_condition(
                    mesh_mod.extrude(base, ypart), config.c_t)[0]:
                M += 1
                ypart = mesh_mod.build_graded_partition(M, Y, gamma)
        cyl = mesh_mod.extrude(base, ypart)
        t0 = time.perf_counter()
        system = sys_mod.assemble(cyl, params_f, config.f)
        field = sys_mod.solve(system, rel_tol=config.solver_tol)
        ind = est_mod.estimate(
            cyl, field, config.f, params_f, space_tag=config.space_tag,
            include_flux=config.include_flux_osc)
        wall_ms = (time.perf_counter() - t0) * 1e3
        if indicator_dir is not None:
            est_mod.write_indicator_csv(
                ind, f"{indicator_dir}/indicators_{it:03d}.csv")
        err = math.nan
        if config.u_exact is not None:
            err = sys_mod.exact_error_identity(field, config.f, config.u_exact)
        energies.append(sys_mod.energy(field))
        _, _, worst = mesh_mod.check_mesh_condition(cyl, config.c_t)
        aspect = mesh_mod.aspect_ratio_stats(cyl)
        est_tot, osc_tot, tau_tot = ind.report_totals()
        eff = tau_tot / err if (err and not math.isnan(err)) else math.nan
        records.append(IterationRecord(
            iter=it, n_base_elems=ne, n_cyl_cells=cyl.n_cells,
            dofs=system.n_free, M=M, Y=Y, error=err,
            estimator=est_tot, oscillation=osc_tot,
            tau=tau_tot, effectivity=eff,
            aspect_bottom_mean=aspect["bottom_layer_mean"],
            mesh_cond_worst=worst, solver_iters=field.solver_iters,
            wall_ms=wall_ms))
        if keep_meshes:
            meshes.append((base, ypart))
        final_cyl, final_field = cyl, field
        if config.marking == "element":
            elems = est_mod.to_elementwise(ind, base)
            decision = mark_dorfler(np.sqrt(elems.tau2), config.theta)
            to_bisect = decision.indices
        else:
            decision = mark_dorfler(ind.node_tau, config.theta)
            to_bisect = marked_elements(base, decision, "star")
        if decision.converged:
            status = "converged"
            break
        new_base = mesh_mod.bisect(base, to_bisect)
        ne_new = new_base.n_elements
        if ne_new * vertical_intervals(ne_new, base.dim) > config.dof_budget:
            status = "budget"
            break
        base = new_base
    else:
        status = "cap"

    result = RunResult(records=records, status=status, config=config,
                       final_base=base, energies=energies, meshes=meshes)
    if config.u_exact is None and len(records) >= 2:
        _fill_errors_from_reference(result, final_cyl, params_f, config)
    return result


def _fill_errors_from_reference(result, final_cyl, params_f, config):
    """Error column from energy gaps against a uniformly refined reference.

    The reference halves the base mesh size (two bisect-all rounds) and
    doubles M, i.e. it applies the usual M ~ (#T)^(1/n) policy to the
    uniformly refined base while keeping the truncation height, so all
    spaces embed into the same energy.
    """
    base_ref = mesh_mod.uniform_refine(final_cyl.base, rounds=2)
    ypart_ref = mesh_mod.build_graded_partition(
        2 * final_cyl.ypart.M, final_cyl.ypart.Y, final_cyl.ypart.gamma)
    cyl_ref = mesh_mod.extrude(base_ref, ypart_ref)
    system = sys_mod.assemble(cyl_ref, params_f, config.f)
    field = sys_mod.solve(system, rel_tol=config.solver_tol)
    e_ref = sys_mod.energy(field)
    result.reference_energy = e_ref
    for rec, e_i in zip(result.records, result.energies):
        gap = 2.0 * (e_i - e_ref)
        rec.error = math.sqrt(max(0.0, gap))
        rec.effectivity = (rec.tau / rec.error) if rec.error > 0 else math.nan
