"""Joint scheduling and resource allocation by successive convex approximation.

Variable space.  For every task ``j``, device ``i`` and aggregation ``g`` the
relaxed problem carries six normalized variables, all living in boxes:

* ``receive`` and ``upload`` in ``[0, 1]`` (relaxed ``R`` and ``U``),
* ``cpu`` with ``f = f_max * cpu``, ``cpu`` in ``[f_min / (J f_max), 1]``,
* ``sgd`` with ``e = e_min + (e_max - e_min) * sgd``,
* ``batch`` with ``B = 1 + (D - 1) * batch``,
* ``idle`` with idle time ``T_qoe * idle``.

The definitional equalities (computation time and energy, transfer delays,
local period, scheduling tensor) are substituted into the objective and the
remaining constraints.  The final idle time is eliminated, which turns the
QoE window equality into ``sum_g T^L <= T_qoe``.

Constraint handling in the surrogate problems:

* ``projection`` -- single uploader per aggregation (capped simplex) and
  variable boxes, enforced exactly by the primal step;
* ``affine`` -- linear inequalities, priced by non-negative multipliers;
* ``majorized`` -- nonconvex smooth constraints, replaced by their
  proximal-linear upper model around the anchor and priced by multipliers.

Every nonconvex constraint is stored as a sum of monomials of simple
univariate factors; values, sparse Jacobians, supports and analytic
curvature bounds all come from that representation.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff
from .bound import eval_bound, round_terms, staleness_term
from .scheduling import (ScheduleLimits, check_schedule, enumerate_feasible, pair_rounds,
                         round_pairs, round_robin)
from .wireless import link_table, period_breakdown

log = logging.getLogger(__name__)

KINDS = ("receive", "upload", "cpu", "sgd", "batch", "idle")
GROUPS = ("C_EQ", "C_IE", "N_EQ", "N_IE")


class OptimizerError(RuntimeError):
    """No feasible point could be built or repaired."""


class TimingInfeasible(OptimizerError):
    """The schedule cannot be timed inside the QoE window."""


# --------------------------------------------------------------------------
# plan and configuration types
# --------------------------------------------------------------------------


@dataclass
class ResourcePlan:
    """Resources of one task; arrays are ``[devices x G]``, ``final_idle`` is ``[devices]``."""

    task_id: int
    cpu_freq: np.ndarray
    batch_size: np.ndarray
    sgd_iters: np.ndarray
    idle: np.ndarray
    final_idle: np.ndarray
    e_min: float
    e_max: float
    dataset_sizes: np.ndarray

    def copy(self) -> "ResourcePlan":
        return ResourcePlan(self.task_id, self.cpu_freq.copy(), self.batch_size.copy(),
                            self.sgd_iters.copy(), self.idle.copy(), self.final_idle.copy(),
                            self.e_min, self.e_max, np.array(self.dataset_sizes))

    def breakdown(self, scenario, task_index, R, U, links=None):
        """Per-round periods and energies implied by this plan."""
        return period_breakdown(scenario, task_index, R, U, self, links)

    def box_violations(self, scenario, task_index, R, tol=1e-9) -> list[str]:
        """Bounds on ``e``, ``B``, times and per-task CPU share, checked on received rounds."""
        out = []
        D = np.asarray(self.dataset_sizes, dtype=float)[:, None]
        active = np.asarray(R) == 1
        e, B = self.sgd_iters, self.batch_size
        if np.any(active & ((e < self.e_min - tol) | (e > self.e_max + tol))):
            out.append("sgd_count")
        if np.any(active & ((B < 1 - tol) | (B > D + tol))):
            out.append("batch_size")
        if np.any(self.idle < -tol) or np.any(self.final_idle < -tol):
            out.append("nonnegative_times")
        J = scenario.num_tasks
        for i, dev in enumerate(scenario.devices):
            fmin, fmax = dev.cpu_freq_bounds
            f = self.cpu_freq[i][active[i]]
            if np.any(f < fmin / J * (1 - 1e-9)) or np.any(f > fmax * (1 + 1e-9)):
                out.append(f"cpu_frequency[{i}]")
        return out


@dataclass(frozen=True)
class SCAConfig:
    """Tuning constants of the outer and inner loops.

    ``lipschitz_ie`` / ``lipschitz_eq`` override the analytic curvature
    bounds of the nonconvex inequality / equality families when given.
    """

    prox_weight: float = 1.0
    lipschitz_ie: float | None = None
    lipschitz_eq: float | None = None
    step: float = 0.3
    max_outer_iters: int = 80
    inner_tolerance: float = 1e-4
    max_inner_iters: int = 60
    dual_step: float = 0.1
    binary_tolerance: float = 1e-3
    outer_tolerance: float = 1e-6
    local_search: bool = True

    def __post_init__(self):
        if not self.prox_weight > 0:
            raise ValueError("prox weight must be > 0")
        if not (0.0 < self.step <= 1.0):
            raise ValueError("step must lie in (0, 1]")
        if self.dual_step <= 0 or self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ValueError("dual step and iteration caps must be positive")


@dataclass
class DualState:
    """Multipliers: ``eq`` for the nonconvex equalities, ``ie`` (>= 0) for the
    nonconvex inequalities, ``affine`` (>= 0) for linear inequalities and
    ``affine_eq`` for linear equalities."""

    eq: np.ndarray
    ie: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.zeros(0))
    affine_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("eq", "ie", "affine", "affine_eq"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.ie < 0) or np.any(self.affine < 0):
            raise ValueError("inequality multipliers must be non-negative")

    def copy(self) -> "DualState":
        return DualState(self.eq.copy(), self.ie.copy(), self.affine.copy(), self.affine_eq.copy())


# --------------------------------------------------------------------------
# monomial constraint systems
# --------------------------------------------------------------------------

AFFINE, POWER = 0, 1


class MonomialSystem:
    """Rows ``const[r] + sum_t coef_t prod_m phi_m(v[var_tm])``.

    A factor is ``(var, AFFINE, a, b)`` meaning ``a + b v`` or
    ``(var, POWER, p, s)`` meaning ``s v^p``.  Within one monomial every
    variable appears at most once.
    """

    def __init__(self, nrows: int):
        self.nrows = int(nrows)
        self.const = np.zeros(self.nrows)
        self._terms = []

    def add_const(self, row, value):
        self.const[row] += value

    def add_term(self, row, coef, factors):
        vars_ = [f[0] for f in factors]
        if len(set(vars_)) != len(vars_):
            raise ValueError("a variable may appear once per monomial")
        if coef != 0:
            self._terms.append((row, float(coef), tuple(factors)))

    def finalize(self, lo, hi):
        T = len(self._terms)
        F = max([len(t[2]) for t in self._terms] + [1])
        self.row = np.array([t[0] for t in self._terms], dtype=int)
        self.coef = np.array([t[1] for t in self._terms], dtype=float)
        self.var = np.zeros((T, F), dtype=int)
        self.kind = np.full((T, F), AFFINE, dtype=int)
        self.pa = np.ones((T, F))
        self.pb = np.zeros((T, F))
        self.valid = np.zeros((T, F), dtype=bool)
        for k, (_, _, facs) in enumerate(self._terms):
            for m, (v, kind, a, b) in enumerate(facs):
                self.var[k, m], self.kind[k, m] = v, kind
                self.pa[k, m], self.pb[k, m] = a, b
                self.valid[k, m] = True
        self._terms = None
        self.lipschitz, self.curvature = self._curvature_bounds(np.asarray(lo, float), np.asarray(hi, float))
        rows = np.repeat(self.row, F)[self.valid.ravel()]
        cols = self.var.ravel()[self.valid.ravel()]
        S = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.nrows, lo.size))
        S.data[:] = 1.0
        self.support = S
        return self

    def _phi(self, x):
        """Factor values and first and second derivatives at ``x`` (same shape as ``var``)."""
        if not hasattr(self, "_pw"):
            self._pw = np.nonzero((self.kind == POWER) & self.valid)
            self._pad = ~self.valid
        a, b = self.pa, self.pb
        val = a + b * x
        d1 = b.copy()
        d2 = np.zeros_like(x)
        pw = self._pw
        if pw[0].size:
            xp, ap, bp = x[pw], a[pw], b[pw]
            with np.errstate(divide="ignore", invalid="ignore"):
                base = bp * np.power(xp, ap - 2)
            val[pw] = base * xp * xp
            d1[pw] = ap * base * xp
            d2[pw] = ap * (ap - 1) * base
        val[self._pad], d1[self._pad] = 1.0, 0.0
        return val, d1, d2

    def _excluding(self, val):
        """Product of all factors but one, for each position."""
        T, F = val.shape
        pre = np.ones((T, F + 1))
        suf = np.ones((T, F + 1))
        for m in range(F):
            pre[:, m + 1] = pre[:, m] * val[:, m]
            suf[:, F - m - 1] = suf[:, F - m] * val[:, F - m - 1]
        return pre[:, :F] * suf[:, 1:]

    def values(self, v):
        val, _, _ = self._phi(v[self.var])
        terms = self.coef * np.prod(val, axis=1)
        return self.const + np.bincount(self.row, weights=terms, minlength=self.nrows)

    def jacobian(self, v):
        val, d1, _ = self._phi(v[self.var])
        g = self.coef[:, None] * self._excluding(val) * d1
        mask = self.valid.ravel()
        rows = np.repeat(self.row, val.shape[1])[mask]
        return sp.csr_matrix((g.ravel()[mask], (rows, self.var.ravel()[mask])),
                             shape=(self.nrows, v.size))

    def _curvature_bounds(self, lo, hi):
        """Curvature bounds of every row over the variable box.

        With ``M`` an entrywise bound of the row Hessian, returns the
        Frobenius norm of ``M`` (a scalar Lipschitz constant of the gradient)
        and the row sums of ``M`` as a sparse ``[rows x vars]`` matrix; the
        latter give per-variable weights ``L_a`` with ``diag(L) - H`` positive
        semidefinite.
        """
        T, F = self.var.shape
        n_vars = lo.size
        if T == 0:
            return np.zeros(self.nrows), sp.csr_matrix((self.nrows, n_vars))
        m0 = np.zeros((T, F))
        m1 = np.zeros((T, F))
        m2 = np.zeros((T, F))
        # |phi|, |phi'|, |phi''| are monotone on a positive interval for both
        # factor kinds, so the maxima sit at the end points
        for end in (lo, hi):
            val, d1, d2 = self._phi(end[self.var])
            m0 = np.maximum(m0, np.abs(val))
            m1 = np.maximum(m1, np.abs(d1))
            m2 = np.maximum(m2, np.abs(d2))
        if not (np.all(np.isfinite(m0)) and np.all(np.isfinite(m1)) and np.all(np.isfinite(m2))):
            raise ValueError("unbounded factor on the variable box")
        ac = np.abs(self.coef)
        rows, ia, ib, vals = [], [], [], []
        for m in range(F):
            others = np.ones(T)
            for n in range(F):
                if n != m:
                    others = others * m0[:, n]
            ok = self.valid[:, m]
            rows.append(self.row[ok])
            ia.append(self.var[ok, m])
            ib.append(self.var[ok, m])
            vals.append((ac * m2[:, m] * others)[ok])
            for n in range(F):
                if n == m:
                    continue
                rest = np.ones(T)
                for q in range(F):
                    if q not in (m, n):
                        rest = rest * m0[:, q]
                ok2 = self.valid[:, m] & self.valid[:, n]
                rows.append(self.row[ok2])
                ia.append(self.var[ok2, m])
                ib.append(self.var[ok2, n])
                vals.append((ac * m1[:, m] * m1[:, n] * rest)[ok2])
        rows = np.concatenate(rows)
        ia = np.concatenate(ia)
        ib = np.concatenate(ib)
        vals = np.concatenate(vals)
        n = n_vars
        key = (rows.astype(np.int64) * n + ia) * n + ib
        uniq, inv = np.unique(key, return_inverse=True)
        summed = np.bincount(inv, weights=vals)
        urow = (uniq // (n * n)).astype(int)
        ua = ((uniq // n) % n).astype(int)
        frob = np.sqrt(np.bincount(urow, weights=summed ** 2, minlength=self.nrows))
        diag = sp.csr_matrix((summed, (urow, ua)), shape=(self.nrows, n_vars))
        return frob, diag


@dataclass
class ConstraintFamily:
    """A named block of constraints and the way the solver treats it."""

    name: str
    group: str
    handling: str
    kind: str
    system: str | None = None
    rows: slice | None = None
    count: int = 0


# --------------------------------------------------------------------------
# problem assembly
# --------------------------------------------------------------------------


class VariableLayout:
    """Flat index map of the relaxed variables."""

    def __init__(self, num_devices: int, horizons):
        self.num_devices = int(num_devices)
        self.horizons = [int(G) for G in horizons]
        self.offsets = []
        off = 0
        for G in self.horizons:
            self.offsets.append(off)
            off += len(KINDS) * self.num_devices * G
        self.size = off

    def block(self, kind: str, j: int) -> np.ndarray:
        I, G = self.num_devices, self.horizons[j]
        start = self.offsets[j] + KINDS.index(kind) * I * G
        return np.arange(start, start + I * G).reshape(I, G)

    def index(self, kind, j, i, g) -> int:
        return int(self.block(kind, j)[i, g])


@dataclass
class TaskData:
    """Per-task numbers frozen at assembly time."""

    task: object
    constants: object
    uplink_delay: np.ndarray
    downlink_delay: np.ndarray
    cycles: np.ndarray
    dataset_sizes: np.ndarray
    e_lo: float
    e_hi: float
    term_const: float


class ProblemP:
    """Relaxed joint problem: variables, objective and the four constraint groups."""

    def __init__(self, scenario, constants, layout, tasks, lo, hi, families, mono, affine, columns):
        self.scenario = scenario
        self.constants = constants
        self.layout = layout
        self.tasks = tasks
        self.lo = lo
        self.hi = hi
        self.families = families
        self.mono = mono
        self.affine_A, self.affine_b = affine
        self.columns = columns
        self.obj_scale = 1.0

    @property
    def size(self) -> int:
        return self.layout.size

    def family(self, name) -> ConstraintFamily:
        for f in self.families:
            if f.name == name:
                return f
        raise KeyError(name)

    def majorized(self, groups=None):
        return [f for f in self.families if f.handling == "majorized"
                and (groups is None or f.group in groups)]

    # objective ----------------------------------------------------------

    def objective_terms(self, v):
        """Per-task ``(bound, energy)`` of the relaxed objective; accepts floats or duals."""
        sc = self.scenario
        c1, c2, c3 = sc.objective_weights
        out = []
        for j, td in enumerate(self.tasks):
            t, c = td.task, td.constants
            I, G = sc.num_devices, t.num_aggregations
            K = int(t.staleness_limit)
            scale = 1.0 / (G * t.eta_min)
            R = self.layout.block("receive", j)
            U = self.layout.block("upload", j)
            X = self.layout.block("cpu", j)
            S = self.layout.block("sgd", j)
            Bb = self.layout.block("batch", j)
            bound = td.term_const
            energy = 0.0
            for i, dev in enumerate(sc.devices):
                fmax = dev.cpu_freq_bounds[1]
                D = float(td.dataset_sizes[i])
                a = float(td.cycles[i])
                for g in range(G):
                    r = v[R[i, g]]
                    e = td.e_lo + (td.e_hi - td.e_lo) * v[S[i, g]]
                    B = 1.0 + (D - 1.0) * v[Bb[i, g]]
                    rb, rc, rd = round_terms(t.learning_rate_schedule[g], e, B, D,
                                             c.per_round("dissimilarity", i, g),
                                             c.per_round("sample_variance", i, g), c)
                    run = r
                    paired = 0.0
                    for gp in range(g, min(G, g + K + 1)):
                        if gp > g:
                            run = run * (1 - v[R[i, gp]])
                        paired = paired + run * v[U[i, gp]]
                        run = run * (1 - v[U[i, gp]])
                    bound = bound + scale * (rb + rc + rd) * paired
                    f = fmax * v[X[i, g]]
                    e_comp = dev.chipset_capacitance * a * e * B * f * f * r
                    e_up = dev.uplink_power * td.uplink_delay[i, g] * v[U[i, g]]
                    e_dl = sc.downlink_power * td.downlink_delay[i, g] * r
                    energy = energy + c2 * (e_up + e_comp) + c3 * e_dl
            out.append((c1 * t.importance * bound, t.energy_weight * energy / G))
        return out

    def objective(self, v):
        """Unscaled objective value (floats or duals)."""
        total = 0.0
        for b, e in self.objective_terms(v):
            total = total + b + e
        return total

    def objective_value(self, v) -> float:
        return autodiff.value_of(self.objective(list(np.asarray(v, dtype=float))))

    def objective_grad(self, v):
        """Value and gradient of the unscaled objective by forward-mode duals."""
        return autodiff.value_and_grad(self.objective, v)

    # constraints --------------------------------------------------------

    def constraint_values(self, v):
        """Dict ``family -> values`` for every evaluated family at ``v``."""
        v = np.asarray(v, dtype=float)
        mono = self.mono.values(v)
        aff = self.affine_A @ v - self.affine_b
        out = {}
        for f in self.families:
            if f.system == "mono":
                out[f.name] = mono[f.rows]
            elif f.system == "affine":
                out[f.name] = aff[f.rows]
            elif f.name == "single_uploader":
                out[f.name] = np.array([v[c].sum() - 1.0 for c in self.columns])
            elif f.name == "upload_count":
                out[f.name] = np.array([v[self.layout.block("upload", j)].sum() - td.task.num_aggregations
                                        for j, td in enumerate(self.tasks)])
        return out

    def max_violation(self, v) -> float:
        worst = 0.0
        cv = self.constraint_values(v)
        for f in self.families:
            vals = cv.get(f.name)
            if vals is None or vals.size == 0:
                continue
            viol = np.abs(vals) if f.kind == "eq" and f.handling != "majorized" else np.maximum(vals, 0.0)
            worst = max(worst, float(viol.max()))
        box = np.maximum(self.lo - v, 0.0).max(initial=0.0) + np.maximum(v - self.hi, 0.0).max(initial=0.0)
        return max(worst, float(box))

    def binary_gap(self, v) -> float:
        v = np.asarray(v, dtype=float)
        idx = np.concatenate([np.concatenate([self.layout.block("receive", j).ravel(),
                                              self.layout.block("upload", j).ravel()])
                              for j in range(len(self.tasks))])
        return float(np.max(np.abs(v[idx] * (1 - v[idx])), initial=0.0))

    def project(self, z, w=None):
        """Weighted projection onto the box and the per-aggregation upload simplices."""
        z = np.asarray(z, dtype=float)
        w = np.ones_like(z) if w is None else np.asarray(w, dtype=float)
        out = np.clip(z, self.lo, self.hi)
        if not self.columns:
            return out
        cols = np.array(self.columns)
        free = np.any(self.hi[cols] > self.lo[cols], axis=1)
        if not np.any(free):
            return out
        cols = cols[free]
        zc, wc, lc, hc = z[cols], w[cols], self.lo[cols], self.hi[cols]
        lo_nu = np.min((zc - hc) * wc, axis=1) - 1.0
        hi_nu = np.max((zc - lc) * wc, axis=1) + 1.0
        for _ in range(100):
            mid = 0.5 * (lo_nu + hi_nu)
            s = np.clip(zc - mid[:, None] / wc, lc, hc).sum(axis=1)
            big = s > 1.0
            lo_nu = np.where(big, mid, lo_nu)
            hi_nu = np.where(big, hi_nu, mid)
        nu = 0.5 * (lo_nu + hi_nu)
        out[cols] = np.clip(zc - nu[:, None] / wc, lc, hc)
        return out


def _link_delays(scenario, j):
    lt = link_table(scenario, j)
    if not (np.all(np.isfinite(lt.uplink_delay)) and np.all(np.isfinite(lt.downlink_delay))):
        raise OptimizerError(f"link outage in task {j}")
    return lt


def assemble_problem(scenario, constants, fixed_schedule=None, order_constraint: bool = True) -> ProblemP:
    """Build the relaxed problem.

    ``constants`` holds one :class:`~mafl.bound.BoundConstants` per task.
    ``fixed_schedule`` optionally maps task index to ``(R, U)``; the
    scheduling variables of those tasks are then pinned.  With
    ``order_constraint=False`` the upload-order family has no rows.
    """
    if constants is None or len(constants) != scenario.num_tasks or any(c is None for c in constants):
        raise ValueError("bound constants missing for some task")
    sc = scenario
    I, J = sc.num_devices, sc.num_tasks
    layout = VariableLayout(I, [t.num_aggregations for t in sc.tasks])
    n = layout.size
    lo = np.zeros(n)
    hi = np.ones(n)
    tasks = []
    for j, t in enumerate(sc.tasks):
        lt = _link_delays(sc, j)
        e_lo, e_hi = (float(x) for x in sc.sgd_count_bounds[j])
        te, _ = staleness_term(constants[j], t, e_hi)
        ta = 2.0 / (t.num_aggregations * t.eta_min) / t.agg_weight * constants[j].initial_loss_gap
        tasks.append(TaskData(t, constants[j], lt.uplink_delay, lt.downlink_delay,
                              np.array([d.cycles_per_sample[j] for d in sc.devices], dtype=float),
                              np.array([d.dataset_sizes[j] for d in sc.devices], dtype=float),
                              e_lo, e_hi, ta + te))
        X = layout.block("cpu", j)
        for i, d in enumerate(sc.devices):
            fmin, fmax = d.cpu_freq_bounds
            lo[X[i]] = fmin / (J * fmax)
        if fixed_schedule is not None and j in fixed_schedule:
            R, U = (np.asarray(m, dtype=float) for m in fixed_schedule[j])
            for kind, M in (("receive", R), ("upload", U)):
                blk = layout.block(kind, j)
                lo[blk] = M
                hi[blk] = M

    # nonconvex rows, in family order
    fam_rows = {}
    counts = {"qoe_window": I * J, "energy_budget": I,
              "idle_gating": sum(I * td.task.num_aggregations for td in tasks),
              "upload_order": sum(max(td.task.num_aggregations - 1, 0) for td in tasks) if order_constraint else 0,
              "binary_receive": sum(I * td.task.num_aggregations for td in tasks),
              "binary_upload": sum(I * td.task.num_aggregations for td in tasks)}
    start = 0
    for name in ("qoe_window", "energy_budget", "idle_gating", "upload_order", "binary_receive", "binary_upload"):
        fam_rows[name] = slice(start, start + counts[name])
        start += counts[name]
    mono = MonomialSystem(start)

    def period_terms(j, i, k):
        """Monomials of the local period ``T^L[i, k]`` in seconds."""
        td = tasks[j]
        dev = sc.devices[i]
        r = layout.index("receive", j, i, k)
        u = layout.index("upload", j, i, k)
        x = layout.index("cpu", j, i, k)
        s = layout.index("sgd", j, i, k)
        b = layout.index("batch", j, i, k)
        t = layout.index("idle", j, i, k)
        D = td.dataset_sizes[i]
        return [
            (td.task.qoe_window, [(r, AFFINE, 0.0, 1.0), (t, AFFINE, 0.0, 1.0)]),
            (td.cycles[i] / dev.cpu_freq_bounds[1],
             [(r, AFFINE, 0.0, 1.0), (s, AFFINE, td.e_lo, td.e_hi - td.e_lo),
              (b, AFFINE, 1.0, D - 1.0), (x, POWER, -1.0, 1.0)]),
            (td.uplink_delay[i, k], [(u, AFFINE, 0.0, 1.0)]),
            (td.downlink_delay[i, k], [(r, AFFINE, 0.0, 1.0)]),
        ]

    row_q = fam_rows["qoe_window"].start
    row_e = fam_rows["energy_budget"].start
    row_idle = fam_rows["idle_gating"].start
    row_ord = fam_rows["upload_order"].start
    row_br = fam_rows["binary_receive"].start
    row_bu = fam_rows["binary_upload"].start
    for j, td in enumerate(tasks):
        G = td.task.num_aggregations
        Q = td.task.qoe_window
        for i, dev in enumerate(sc.devices):
            fmax = dev.cpu_freq_bounds[1]
            D = td.dataset_sizes[i]
            row = row_q + j * I + i
            mono.add_const(row, -1.0)
            for k in range(G):
                for coef, facs in period_terms(j, i, k):
                    mono.add_term(row, coef / Q, facs)
                r = layout.index("receive", j, i, k)
                u = layout.index("upload", j, i, k)
                x = layout.index("cpu", j, i, k)
                s = layout.index("sgd", j, i, k)
                b = layout.index("batch", j, i, k)
                t = layout.index("idle", j, i, k)
                eb = dev.energy_budget
                mono.add_term(row_e + i, dev.chipset_capacitance * td.cycles[i] * fmax ** 2 / eb,
                              [(r, AFFINE, 0.0, 1.0), (s, AFFINE, td.e_lo, td.e_hi - td.e_lo),
                               (b, AFFINE, 1.0, D - 1.0), (x, POWER, 2.0, 1.0)])
                mono.add_term(row_e + i, dev.uplink_power * td.uplink_delay[i, k] / eb, [(u, AFFINE, 0.0, 1.0)])
                mono.add_term(row_idle, 1.0, [(r, AFFINE, 1.0, -1.0), (t, AFFINE, 0.0, 1.0)])
                row_idle += 1
                mono.add_term(row_br, 1.0, [(r, AFFINE, 0.0, 1.0)])
                mono.add_term(row_br, -1.0, [(r, POWER, 2.0, 1.0)])
                row_br += 1
                mono.add_term(row_bu, 1.0, [(u, AFFINE, 0.0, 1.0)])
                mono.add_term(row_bu, -1.0, [(u, POWER, 2.0, 1.0)])
                row_bu += 1
        for g in range(G - 1 if order_constraint else 0):
            for i in range(I):
                ug = layout.index("upload", j, i, g)
                un = layout.index("upload", j, i, g + 1)
                for k in range(g + 1):
                    for coef, facs in period_terms(j, i, k):
                        if k < g:
                            mono.add_term(row_ord, coef / Q, [(ug, AFFINE, 0.0, 1.0)] + facs)
                        mono.add_term(row_ord, -coef / Q, [(un, AFFINE, 0.0, 1.0)] + facs)
            row_ord += 1
    for i in range(I):
        mono.add_const(row_e + i, -1.0)
    mono.finalize(lo, hi)

    # affine inequalities A v - b <= 0
    rows, cols, vals, rhs = [], [], [], []
    aff_rows = {}

    def add_row(entries, b):
        r = len(rhs)
        for c, a in entries:
            rows.append(r)
            cols.append(c)
            vals.append(a)
        rhs.append(b)

    start = 0
    for j, td in enumerate(tasks):
        G, K = td.task.num_aggregations, td.task.staleness_limit
        Rb = layout.block("receive", j).ravel()
        add_row([(c, -1.0 / G) for c in Rb], -1.0)
        add_row([(c, 1.0 / G) for c in Rb], (G + K) / G)
    aff_rows["reception_count"] = slice(start, len(rhs))
    start = len(rhs)
    Gmax = max(layout.horizons)
    for i in range(I):
        for g in range(Gmax):
            entries = [(layout.index("cpu", j, i, g), 1.0) for j in range(J) if g < layout.horizons[j]]
            if len(entries) > 1:
                add_row(entries, 1.0)
    aff_rows["cpu_frequency"] = slice(start, len(rhs))
    start = len(rhs)
    for j, td in enumerate(tasks):
        G, K = td.task.num_aggregations, td.task.staleness_limit
        for i in range(I):
            for gp in range(G):
                entries = [(layout.index("upload", j, i, gp), 1.0)]
                entries += [(layout.index("receive", j, i, k), -1.0) for k in range(max(0, gp - K), gp + 1)]
                add_row(entries, 0.0)
    aff_rows["round_completeness"] = slice(start, len(rhs))
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhs), n))
    b = np.array(rhs, dtype=float)

    columns = [layout.block("upload", j)[:, g] for j, td in enumerate(tasks) for g in range(td.task.num_aggregations)]

    def fam(name, group, handling, kind, system=None, rows=None):
        count = 0 if rows is None else rows.stop - rows.start
        return ConstraintFamily(name, group, handling, kind, system, rows, count)

    families = [
        fam("uplink_delay", "C_EQ", "substituted", "eq"),
        fam("downlink_delay", "C_EQ", "substituted", "eq"),
        fam("qoe_window", "C_EQ", "majorized", "ie", "mono", fam_rows["qoe_window"]),
        fam("single_uploader", "C_EQ", "projection", "eq"),
        fam("upload_count", "C_EQ", "projection", "eq"),
        fam("energy_budget", "C_IE", "majorized", "ie", "mono", fam_rows["energy_budget"]),
        fam("reception_count", "C_IE", "affine", "ie", "affine", aff_rows["reception_count"]),
        fam("cpu_frequency", "C_IE", "affine", "ie", "affine", aff_rows["cpu_frequency"]),
        fam("sgd_count", "C_IE", "box", "ie"),
        fam("batch_size", "C_IE", "box", "ie"),
        fam("nonnegative_times", "C_IE", "box", "ie"),
        fam("final_idle", "C_IE", "implied", "ie"),
        fam("round_completeness", "C_IE", "affine", "ie", "affine", aff_rows["round_completeness"]),
        fam("schedule_tensor", "N_EQ", "substituted", "eq"),
        fam("compute_time", "N_EQ", "substituted", "eq"),
        fam("compute_energy", "N_EQ", "substituted", "eq"),
        fam("local_period", "N_EQ", "substituted", "eq"),
        fam("idle_gating", "N_EQ", "majorized", "eq", "mono", fam_rows["idle_gating"]),
        fam("upload_order", "N_IE", "majorized", "ie", "mono", fam_rows["upload_order"]),
        fam("binary_receive", "N_IE", "majorized", "ie", "mono", fam_rows["binary_receive"]),
        fam("binary_upload", "N_IE", "majorized", "ie", "mono", fam_rows["binary_upload"]),
    ]
    problem = ProblemP(sc, list(constants), layout, tasks, lo, hi, families, mono, (A, b), columns)
    problem.order_constraint = order_constraint
    return problem


def classify_constraints(problem: ProblemP) -> dict:
    """Group listing ``{group: [family names]}``; every family lands in exactly one group."""
    out = {g: [] for g in GROUPS}
    for f in problem.families:
        if f.group not in out:
            raise ValueError(f"unclassified constraint {f.name!r}")
        out[f.group].append(f.name)
    return out


# --------------------------------------------------------------------------
# surrogates
# --------------------------------------------------------------------------


@dataclass
class SurrogateObjective:
    """``O(v_m) + grad^T (v - v_m) + lam/2 ||v - v_m||^2``."""

    anchor: np.ndarray
    value0: float
    grad: np.ndarray
    prox_weight: float

    def __call__(self, v):
        d = np.asarray(v, dtype=float) - self.anchor
        return float(self.value0 + self.grad @ d + 0.5 * self.prox_weight * d @ d)

    def gradient(self, v):
        return self.grad + self.prox_weight * (np.asarray(v, dtype=float) - self.anchor)

    def minimizer(self):
        return self.anchor - self.grad / self.prox_weight


def convexify_objective(v_m, problem, lam: float, scale: float = 1.0) -> SurrogateObjective:
    """Proximal-linear model of the objective.

    ``problem`` is a :class:`ProblemP` or any callable returning
    ``(value, gradient)``.
    """
    if lam <= 0:
        raise ValueError("prox weight must be > 0")
    v_m = np.asarray(v_m, dtype=float)
    if isinstance(problem, ProblemP):
        val, grad = problem.objective_grad(v_m)
    else:
        val, grad = problem(v_m)
    grad = np.asarray(grad, dtype=float)
    if not (np.isfinite(val) and np.all(np.isfinite(grad))):
        raise FloatingPointError("non-finite objective gradient at the anchor")
    return SurrogateObjective(v_m.copy(), scale * float(val), scale * grad, float(lam))


@dataclass
class SurrogateConstraints:
    """Rows ``N(v_m) + J (v - v_m) + 1/2 sum_a C[r, a] (v_a - v_m,a)^2``.

    With a scalar constant ``L`` the curvature matrix is ``L`` on the
    support of each row, which is the usual ``L/2 ||v - v_m||^2`` model
    restricted to the variables the row depends on.
    """

    anchor: np.ndarray
    value0: np.ndarray
    jac: sp.csr_matrix
    curvature: sp.csr_matrix
    kind: str = "ie"

    def __call__(self, v):
        d = np.asarray(v, dtype=float) - self.anchor
        return self.value0 + self.jac @ d + 0.5 * (self.curvature @ (d * d))

    def gradient(self, v):
        d = np.asarray(v, dtype=float) - self.anchor
        return self.jac + self.curvature.multiply(d[None, :])

    def __len__(self):
        return int(self.value0.size)


def convexify_constraints(v_m, problem, family_names, L=None) -> SurrogateConstraints:
    """Majorizing surrogate of the named monomial families around ``v_m``.

    By default each row uses its analytic per-variable curvature weights;
    ``L`` (scalar or one value per row) switches to the scalar model.
    """
    v_m = np.asarray(v_m, dtype=float)
    if isinstance(family_names, str):
        family_names = [family_names]
    rows = np.concatenate([np.arange(problem.family(n).rows.start, problem.family(n).rows.stop)
                           for n in family_names]) if family_names else np.zeros(0, dtype=int)
    vals = problem.mono.values(v_m)[rows]
    jac = problem.mono.jacobian(v_m)[rows]
    if L is None:
        curv = problem.mono.curvature[rows]
    else:
        lip = np.broadcast_to(np.asarray(L, float), rows.shape)
        curv = sp.diags(lip) @ problem.mono.support[rows]
    kinds = {problem.family(n).kind for n in family_names}
    return SurrogateConstraints(v_m.copy(), vals, sp.csr_matrix(jac), sp.csr_matrix(curv),
                                "eq" if kinds == {"eq"} else "ie")


def quadratic_surrogate(fun, grad, v_m, L):
    """Generic upper model ``fun(v_m) + grad(v_m)^T d + L/2 ||d||^2`` as a callable."""
    v_m = np.asarray(v_m, dtype=float)
    f0 = float(fun(v_m))
    g0 = np.asarray(grad(v_m), dtype=float)

    def model(v):
        d = np.asarray(v, dtype=float) - v_m
        return f0 + g0 @ d + 0.5 * L * d @ d
    return model


@dataclass
class InnerResult:
    v: np.ndarray
    duals: DualState
    residual: float
    iterations: int
    inexact: bool


def solve_surrogate(objective: SurrogateObjective, eq_surrogates=None, ie_surrogates=None,
                    duals: DualState | None = None, config: SCAConfig = SCAConfig(),
                    project=None, affine=None, affine_eq=None) -> InnerResult:
    """Dual ascent on the Lagrangian of one surrogate problem.

    Every surrogate is a separable quadratic in ``v``, so for fixed
    multipliers the primal minimizer is a weighted projection of an
    explicit point.  ``project(z, w)`` enforces the simple constraints
    (box, simplices).  ``affine = (A, b)`` adds ``A v <= b``;
    ``affine_eq = (A, b)`` adds ``A v = b``.

    Each multiplier moves by ``dual_step`` times its constraint value
    divided by ``1 + `` the largest curvature weight of its row, so stiff
    rows do not swamp the primal weights.
    """
    n = objective.anchor.size
    empty = SurrogateConstraints(objective.anchor, np.zeros(0), sp.csr_matrix((0, n)), sp.csr_matrix((0, n)))
    eqs = eq_surrogates if eq_surrogates is not None else empty
    ies = ie_surrogates if ie_surrogates is not None else empty
    A, b = affine if affine is not None else (sp.csr_matrix((0, n)), np.zeros(0))
    Ae, be = affine_eq if affine_eq is not None else (sp.csr_matrix((0, n)), np.zeros(0))
    if duals is None:
        duals = DualState(np.zeros(len(eqs)), np.zeros(len(ies)), np.zeros(A.shape[0]), np.zeros(Ae.shape[0]))
    lam_eq = duals.eq.copy() if duals.eq.size == len(eqs) else np.zeros(len(eqs))
    lam_ie = duals.ie.copy() if duals.ie.size == len(ies) else np.zeros(len(ies))
    mu = duals.affine.copy() if duals.affine.size == A.shape[0] else np.zeros(A.shape[0])
    nu = duals.affine_eq.copy() if duals.affine_eq.size == Ae.shape[0] else np.zeros(Ae.shape[0])
    project = project if project is not None else (lambda z, w: z)

    def precond(M):
        if M.shape[0] == 0:
            return np.zeros(0)
        return 1.0 / (1.0 + np.asarray(abs(M).max(axis=1).todense()).ravel())

    s_eq = config.dual_step * precond(eqs.curvature)
    s_ie = config.dual_step * precond(ies.curvature)
    s_af = config.dual_step
    v_m = objective.anchor
    best = None
    v = v_m.copy()
    for it in range(1, config.max_inner_iters + 1):
        lin = objective.grad.copy()
        w = np.full(n, objective.prox_weight)
        if len(eqs):
            lin += eqs.jac.T @ lam_eq
            w += eqs.curvature.T @ lam_eq
        if len(ies):
            lin += ies.jac.T @ lam_ie
            w += ies.curvature.T @ lam_ie
        if A.shape[0]:
            lin += A.T @ mu
        if Ae.shape[0]:
            lin += Ae.T @ nu
        # negative curvature from equality multipliers is not allowed
        w = np.maximum(w, objective.prox_weight)
        v = project(v_m - lin / w, w)
        ceq = eqs(v) if len(eqs) else np.zeros(0)
        cie = ies(v) if len(ies) else np.zeros(0)
        caf = A @ v - b if A.shape[0] else np.zeros(0)
        cae = Ae @ v - be if Ae.shape[0] else np.zeros(0)
        viol = max(np.abs(ceq).max(initial=0.0), np.maximum(cie, 0).max(initial=0.0),
                   np.maximum(caf, 0).max(initial=0.0), np.abs(cae).max(initial=0.0))
        slack = max(np.abs(lam_ie * cie).max(initial=0.0), np.abs(mu * caf).max(initial=0.0))
        res = max(viol, slack)
        if best is None or res < best[0]:
            best = (res, v.copy())
        if res <= config.inner_tolerance:
            return InnerResult(v, DualState(lam_eq, lam_ie, mu, nu), res, it, False)
        lam_eq = lam_eq + s_eq * ceq
        lam_ie = np.maximum(lam_ie + s_ie * cie, 0.0)
        mu = np.maximum(mu + s_af * caf, 0.0)
        nu = nu + s_af * cae
    return InnerResult(best[1], DualState(lam_eq, lam_ie, mu, nu), best[0], config.max_inner_iters, True)


def sca_step(v_m, v_hat, eps: float):
    """``v_m + eps (v_hat - v_m)``."""
    if not (0.0 < eps <= 1.0):
        raise ValueError("step must lie in (0, 1]")
    v_m = np.asarray(v_m, dtype=float)
    return v_m + eps * (np.asarray(v_hat, dtype=float) - v_m)


# --------------------------------------------------------------------------
# timing of a binary schedule
# --------------------------------------------------------------------------


def _periods(R, U, idle, dl, cp, ul):
    return R * idle + R * dl + R * cp + U * ul


def solve_timing(R, U, downlink, compute, uplink, qoe_window, base_idle=None, max_passes=None,
                 order_constraint: bool = True):
    """Idle times that realize the schedule's aggregation order.

    Each device runs its local periods back to back from time zero; within a
    period the order is idle, downlink, compute, uplink.  The upload applied
    at aggregation ``g'`` arrives at the end of its device's period ``g'``.
    Idle time is inserted at reception periods only, until

    * no device starts downloading ``w^(g)`` before it exists,
    * arrivals are non-decreasing in the aggregation index, and
    * the start of the aggregation-``g`` uploader's period ``g`` does not
      exceed the end of the next uploader's period ``g`` (skipped when
      ``order_constraint`` is False).

    Returns ``(idle, final_idle)``; raises :class:`TimingInfeasible`.
    """
    R = np.asarray(R, dtype=float)
    U = np.asarray(U, dtype=float)
    dl, cp, ul = (np.asarray(a, dtype=float) for a in (downlink, compute, uplink))
    I, G = R.shape
    idle = np.zeros((I, G)) if base_idle is None else np.asarray(base_idle, dtype=float) * (R > 0)
    pairs, orphans = round_pairs(R.astype(int), U.astype(int))
    if orphans:
        raise TimingInfeasible(f"upload without reception at {orphans[0]}")
    owner = {gp: (i, g) for i, g, gp in pairs}
    if len(owner) != G:
        raise TimingInfeasible("some aggregation has no paired upload")
    uploads = [[gp for gp in range(G) if U[i, gp]] for i in range(I)]
    receptions = [[g for g in range(G) if R[i, g]] for i in range(I)]
    max_passes = max_passes or 20 * (I * G + 1) ** 2

    def bump(x):
        return x * (1 + 1e-12) + 1e-12

    for _ in range(max_passes):
        T = _periods(R, U, idle, dl, cp, ul)
        start = np.cumsum(T, axis=1) - T
        end = start + T
        arrival = np.array([end[owner[gp][0], gp] for gp in range(G)])
        fixed = False
        for g in range(G):
            for i in range(I):
                if R[i, g] and g > 0:
                    gap = arrival[g - 1] - (start[i, g] + idle[i, g])
                    if gap > 0:
                        idle[i, g] += bump(gap)
                        fixed = True
                        break
            if fixed:
                break
            i, gr = owner[g]
            if g > 0 and arrival[g] < arrival[g - 1]:
                idle[i, gr] += bump(arrival[g - 1] - arrival[g])
                fixed = True
                break
            if order_constraint and g < G - 1:
                a, b = owner[g][0], owner[g + 1][0]
                lhs, rhs = start[a, g], end[b, g]
                if lhs > rhs:
                    last_up = max([k for k in uploads[b] if k <= g], default=-1)
                    cand = [k for k in receptions[b] if last_up < k <= g]
                    if not cand:
                        raise TimingInfeasible(f"upload order at aggregation {g} cannot be repaired")
                    idle[b, cand[-1]] += bump(lhs - rhs)
                    fixed = True
                    break
        if not fixed:
            break
    else:
        raise TimingInfeasible("timing repair did not settle")
    T = _periods(R, U, idle, dl, cp, ul)
    final = float(qoe_window) - T.sum(axis=1)
    if np.any(final < -1e-9 * max(1.0, float(qoe_window))):
        i = int(np.argmin(final))
        raise TimingInfeasible(f"device {i} exceeds the QoE window by {-final[i]:.6g} s")
    return idle, np.maximum(final, 0.0)


def time_plan(scenario, j, R, U, plan: ResourcePlan, links=None, base_idle=None,
              order_constraint: bool = True) -> ResourcePlan:
    """Copy of ``plan`` with idle and final idle times from :func:`solve_timing`."""
    zero = plan.copy()
    zero.idle = np.zeros_like(plan.idle)
    bd = period_breakdown(scenario, j, R, U, zero, links)
    idle, final = solve_timing(R, U, bd.downlink, bd.compute, bd.uplink, scenario.tasks[j].qoe_window,
                               base_idle=base_idle, order_constraint=order_constraint)
    out = plan.copy()
    out.idle = idle
    out.final_idle = final
    return out


# --------------------------------------------------------------------------
# conversions between vectors, plans and schedules
# --------------------------------------------------------------------------


def plan_from_vector(problem: ProblemP, v, j: int) -> ResourcePlan:
    """Continuous resources of task ``j`` read off a relaxed vector."""
    sc = problem.scenario
    td = problem.tasks[j]
    L = problem.layout
    fmax = np.array([d.cpu_freq_bounds[1] for d in sc.devices])[:, None]
    D = td.dataset_sizes[:, None]
    return ResourcePlan(
        task_id=td.task.task_id,
        cpu_freq=fmax * v[L.block("cpu", j)],
        batch_size=1.0 + (D - 1.0) * v[L.block("batch", j)],
        sgd_iters=td.e_lo + (td.e_hi - td.e_lo) * v[L.block("sgd", j)],
        idle=td.task.qoe_window * v[L.block("idle", j)],
        final_idle=np.zeros(sc.num_devices),
        e_min=td.e_lo, e_max=td.e_hi, dataset_sizes=td.dataset_sizes.copy())


def vector_from_plans(problem: ProblemP, schedules, plans) -> np.ndarray:
    """Relaxed vector of binary schedules ``{j: (R, U)}`` and plans ``{j: ResourcePlan}``."""
    sc = problem.scenario
    L = problem.layout
    v = np.zeros(problem.size)
    for j, td in enumerate(problem.tasks):
        R, U = schedules[j]
        p = plans[j]
        fmax = np.array([d.cpu_freq_bounds[1] for d in sc.devices])[:, None]
        D = td.dataset_sizes[:, None]
        v[L.block("receive", j)] = R
        v[L.block("upload", j)] = U
        v[L.block("cpu", j)] = p.cpu_freq / fmax
        span = td.e_hi - td.e_lo
        v[L.block("sgd", j)] = (p.sgd_iters - td.e_lo) / span if span > 0 else 0.0
        v[L.block("batch", j)] = np.where(D > 1, (p.batch_size - 1.0) / np.maximum(D - 1.0, 1.0), 0.0)
        v[L.block("idle", j)] = p.idle / td.task.qoe_window
    return np.clip(v, problem.lo, problem.hi)


def default_plan(scenario, j, level: str = "mid") -> ResourcePlan:
    """Resources at the midpoint (``level="mid"``) or the lower end (``"low"``) of every box."""
    I = scenario.num_devices
    t = scenario.tasks[j]
    G = t.num_aggregations
    J = scenario.num_tasks
    e_lo, e_hi = (float(x) for x in scenario.sgd_count_bounds[j])
    D = np.array([d.dataset_sizes[j] for d in scenario.devices], dtype=float)
    fmin = np.array([d.cpu_freq_bounds[0] for d in scenario.devices]) / J
    fmax = np.array([d.cpu_freq_bounds[1] for d in scenario.devices]) / J
    if level == "mid":
        f = 0.5 * (fmin + fmax)
        e = np.round(0.5 * (e_lo + e_hi))
        B = np.maximum(np.round(D / 2), 1)
    elif level == "low":
        f, e, B = fmin, e_lo, np.ones(I)
    else:
        raise ValueError(f"unknown level {level!r}")
    return ResourcePlan(t.task_id, np.repeat(f[:, None], G, axis=1), np.repeat(np.asarray(B, float)[:, None], G, 1),
                        np.full((I, G), float(e)), np.zeros((I, G)), np.zeros(I), e_lo, e_hi, D)


def energy_by_device(scenario, schedules, plans, links=None) -> np.ndarray:
    """Device-side energy (computation plus uplink) summed over tasks."""
    out = np.zeros(scenario.num_devices)
    for j in range(scenario.num_tasks):
        R, U = schedules[j]
        bd = period_breakdown(scenario, j, R, U, plans[j], None if links is None else links[j])
        out += bd.compute_energy.sum(axis=1) + bd.uplink_energy.sum(axis=1)
    return out


def plan_objective(scenario, constants, schedules, plans, links=None) -> dict:
    """Objective of binary schedules and plans, from the bound and the energy model.

    Returns ``{"total", "bound", "energy"}`` with per-task lists.
    """
    c1, c2, c3 = scenario.objective_weights
    bounds, energies = [], []
    for j, t in enumerate(scenario.tasks):
        R, U = schedules[j]
        lim = ScheduleLimits(t.staleness_limit, t.num_aggregations)
        tensor = pair_rounds(R, U, lim)
        rep = eval_bound(tensor, plans[j], constants[j], t)
        bd = period_breakdown(scenario, j, R, U, plans[j], None if links is None else links[j])
        e = c2 * (bd.uplink_energy.sum() + bd.compute_energy.sum()) + c3 * bd.downlink_energy.sum()
        bounds.append(c1 * t.importance * rep.total)
        energies.append(t.energy_weight * e / t.num_aggregations)
    return {"total": float(sum(bounds) + sum(energies)), "bound": bounds, "energy": energies}


def _repair_schedule(r, u, K, earliest: bool = False):
    """Binary ``(R, U)`` from relaxed values: argmax uploads, one paired reception each.

    The reception of a round is the latest slot of its window with relaxed
    value at least one half, or the earliest such slot when ``earliest``;
    earlier receptions leave more periods where idle time can be inserted.
    """
    I, G = r.shape
    U = np.zeros((I, G), dtype=np.int8)
    U[np.argmax(u, axis=0), np.arange(G)] = 1
    R = np.zeros((I, G), dtype=np.int8)
    for i in range(I):
        prev = -1
        for gp in np.flatnonzero(U[i]):
            window = np.arange(max(prev + 1, gp - K), gp + 1)
            chosen = window[r[i, window] >= 0.5]
            if chosen.size:
                k = int(chosen[0] if earliest else chosen[-1])
            else:
                k = int(window[np.argmax(r[i, window])])
            R[i, k] = 1
            prev = gp
    return R, U


def _round_resources(scenario, j, plan: ResourcePlan, R) -> ResourcePlan:
    p = plan.copy()
    D = np.asarray(p.dataset_sizes, dtype=float)[:, None]
    p.sgd_iters = np.clip(np.round(p.sgd_iters), np.ceil(p.e_min), np.floor(p.e_max))
    p.batch_size = np.clip(np.round(p.batch_size), 1, D)
    J = scenario.num_tasks
    for i, dev in enumerate(scenario.devices):
        fmin, fmax = dev.cpu_freq_bounds
        p.cpu_freq[i] = np.clip(p.cpu_freq[i], fmin / J, fmax)
    return p


def _cap_cpu(scenario, plans):
    """Scale per-task CPU shares down where their sum exceeds ``f_max``."""
    J = scenario.num_tasks
    Gmax = max(p.cpu_freq.shape[1] for p in plans.values())
    for i, dev in enumerate(scenario.devices):
        fmin, fmax = dev.cpu_freq_bounds
        for g in range(Gmax):
            js = [j for j in plans if g < plans[j].cpu_freq.shape[1]]
            tot = sum(plans[j].cpu_freq[i, g] for j in js)
            if tot > fmax:
                for j in js:
                    plans[j].cpu_freq[i, g] = max(plans[j].cpu_freq[i, g] * fmax / tot, fmin / J)


def finalize_plans(scenario, schedules, plans, links=None, base_idle=None, order_constraint: bool = True):
    """Integer resources, CPU cap, timing and energy check; returns plans or raises."""
    out = {}
    for j in range(scenario.num_tasks):
        out[j] = _round_resources(scenario, j, plans[j], schedules[j][0])
    _cap_cpu(scenario, out)
    for j in range(scenario.num_tasks):
        R, U = schedules[j]
        out[j] = time_plan(scenario, j, R, U, out[j], None if links is None else links[j],
                           None if base_idle is None else base_idle.get(j), order_constraint)
    used = energy_by_device(scenario, schedules, out, links)
    budget = np.array([d.energy_budget for d in scenario.devices])
    over = np.flatnonzero(used > budget * (1 + 1e-9))
    if over.size:
        i = int(over[0])
        raise OptimizerError(f"energy budget of device {i} exceeded: {used[i]:.6g} J > {budget[i]:.6g} J")
    return out


def round_and_repair(v, problem: ProblemP):
    """Binary schedules and integer plans from a relaxed vector.

    Returns ``({j: ScheduleTensor}, {j: ResourcePlan})``.
    """
    v = np.asarray(v, dtype=float)
    sc = problem.scenario
    L = problem.layout
    links = [_link_delays(sc, j) for j in range(sc.num_tasks)]
    fmax = np.array([d.cpu_freq_bounds[1] / sc.num_tasks for d in sc.devices])[:, None]
    last = None
    # latest receptions first, then earliest ones, then the round-robin schedule;
    # timing and energy-budget failures both move on to the next candidate
    for policy in ("latest", "earliest", "round_robin"):
        schedules = {}
        for j, td in enumerate(problem.tasks):
            if policy == "round_robin":
                schedules[j] = round_robin(sc.num_devices, td.task.num_aggregations)
            else:
                schedules[j] = _repair_schedule(v[L.block("receive", j)], v[L.block("upload", j)],
                                                td.task.staleness_limit, policy == "earliest")
        for fastest in (False, True):
            plans = {j: plan_from_vector(problem, v, j) for j in range(sc.num_tasks)}
            if fastest:
                for p in plans.values():
                    p.cpu_freq = np.repeat(fmax, p.cpu_freq.shape[1], 1)
            try:
                plans = finalize_plans(sc, schedules, plans, links)
                break
            except OptimizerError as exc:
                last = exc
        else:
            log.info("rounding with %s receptions failed: %s", policy, last)
            continue
        break
    else:
        raise last
    tensors = {}
    for j, td in enumerate(problem.tasks):
        R, U = schedules[j]
        lim = ScheduleLimits(td.task.staleness_limit, td.task.num_aggregations)
        bd = period_breakdown(sc, j, R, U, plans[j])
        bad = check_schedule(R, U, bd.total, lim, idle=plans[j].idle)
        if bad:
            raise OptimizerError(f"repaired schedule of task {j} violates {bad[0]}")
        tensors[j] = pair_rounds(R, U, lim)
    return tensors, plans


# --------------------------------------------------------------------------
# outer loop
# --------------------------------------------------------------------------


def initial_point(problem: ProblemP, schedules=None, base_idle=None):
    """Round-robin schedule with mid-range resources, falling back to the lower ends."""
    sc = problem.scenario
    if schedules is None:
        schedules = {j: round_robin(sc.num_devices, td.task.num_aggregations) for j, td in enumerate(problem.tasks)}
    last = None
    for level in ("mid", "low"):
        plans = {j: default_plan(sc, j, level) for j in range(sc.num_tasks)}
        try:
            plans = finalize_plans(sc, schedules, plans, base_idle=base_idle,
                                   order_constraint=getattr(problem, "order_constraint", True))
        except OptimizerError as exc:
            last = exc
            continue
        return vector_from_plans(problem, schedules, plans), schedules, plans
    raise OptimizerError(f"no feasible initial point: {last}")


def run_sca(problem: ProblemP, v0, config: SCAConfig):
    """Outer proximal SCA iterations; returns the last iterate and the history."""
    # unit largest partial at the start keeps one prox weight meaningful across scenarios
    _, grad0 = problem.objective_grad(v0)
    top = float(np.max(np.abs(grad0), initial=0.0))
    problem.obj_scale = 1.0 / top if top > 0 else 1.0
    eq_names = [f.name for f in problem.majorized() if f.kind == "eq"]
    ie_names = [f.name for f in problem.majorized() if f.kind == "ie"]
    v = np.asarray(v0, dtype=float).copy()
    duals = None
    history = []
    last = np.inf
    A, b = problem.affine_A, problem.affine_b
    for m in range(config.max_outer_iters):
        obj = convexify_objective(v, problem, config.prox_weight, problem.obj_scale)
        eqs = convexify_constraints(v, problem, eq_names, config.lipschitz_eq) if eq_names else None
        ies = convexify_constraints(v, problem, ie_names, config.lipschitz_ie)
        res = solve_surrogate(obj, eqs, ies, duals, config, problem.project, (A, b))
        duals = res.duals
        v_new = sca_step(v, res.v, config.step)
        step = float(np.max(np.abs(v_new - v)))
        history.append({"iteration": m, "objective": obj.value0 / problem.obj_scale,
                        "max_violation": problem.max_violation(v), "binary_gap": problem.binary_gap(v),
                        "inner_residual": res.residual, "inexact": res.inexact, "step": step})
        v = v_new
        if problem.binary_gap(v) <= config.binary_tolerance:
            cur = problem.objective_value(v)
            if step <= config.outer_tolerance or (np.isfinite(last) and abs(cur - last) <= config.outer_tolerance * abs(last)):
                break
            last = cur
    history.append({"iteration": len(history), "objective": problem.objective_value(v),
                    "max_violation": problem.max_violation(v), "binary_gap": problem.binary_gap(v),
                    "inner_residual": float("nan"), "inexact": False, "step": 0.0})
    return v, history


def optimize_resources(scenario, constants, schedules, config: SCAConfig = SCAConfig(), base_idle=None,
                       order_constraint: bool = True):
    """SCA over ``(f, B, e, idle)`` with the binary schedules ``{j: (R, U)}`` fixed.

    ``base_idle`` maps task index to floor idle times kept by the timing
    step.  Returns ``({j: ResourcePlan}, history)``.
    """
    problem = assemble_problem(scenario, constants, fixed_schedule=schedules, order_constraint=order_constraint)
    v0, _, plans0 = initial_point(problem, schedules, base_idle)
    v, history = run_sca(problem, v0, config)
    plans = {j: plan_from_vector(problem, v, j) for j in range(scenario.num_tasks)}
    links = [_link_delays(scenario, j) for j in range(scenario.num_tasks)]

    def timed(p):
        return finalize_plans(scenario, schedules, p, links, base_idle, order_constraint)

    try:
        plans = timed(plans)
    except OptimizerError:
        plans = plans0
    if plan_objective(scenario, constants, schedules, plans0, links)["total"] < \
            plan_objective(scenario, constants, schedules, plans, links)["total"]:
        plans = plans0
    return plans, history


def _local_search(scenario, constants, schedules, plans, config, links):
    """Move single aggregations to a fresh round of another device while that helps."""
    cur = plan_objective(scenario, constants, schedules, plans, links)["total"]
    improved = True
    while improved:
        improved = False
        for j, t in enumerate(scenario.tasks):
            G = t.num_aggregations
            for gp in range(G):
                R, U = schedules[j]
                owner = int(np.argmax(U[:, gp]))
                for i in range(scenario.num_devices):
                    if i == owner:
                        continue
                    cand = _move_round(R, U, gp, i, t.staleness_limit)
                    if cand is None:
                        continue
                    trial_s = dict(schedules)
                    trial_s[j] = cand
                    trial_p = dict(plans)
                    # the new round inherits the resources of the round it replaces
                    p = plans[j].copy()
                    g_old = _reception_of(R, U, owner, gp)
                    p.cpu_freq[i, gp] = p.cpu_freq[owner, g_old]
                    p.sgd_iters[i, gp] = p.sgd_iters[owner, g_old]
                    p.batch_size[i, gp] = min(p.batch_size[owner, g_old], p.dataset_sizes[i])
                    trial_p[j] = p
                    try:
                        trial_p = finalize_plans(scenario, trial_s, trial_p, links)
                    except OptimizerError:
                        continue
                    val = plan_objective(scenario, constants, trial_s, trial_p, links)["total"]
                    if val < cur * (1 - 1e-9):
                        schedules, plans, cur = trial_s, trial_p, val
                        improved = True
                        break
    return schedules, plans


def _reception_of(R, U, i, gp):
    pairs, _ = round_pairs(R, U)
    for d, g, q in pairs:
        if d == i and q == gp:
            return g
    return gp


def _move_round(R, U, gp, new, K):
    """Reassign aggregation ``gp`` to a fresh round of device ``new``; None if not admissible."""
    if R[new, gp] or U[new, gp]:
        return None
    pairs, _ = round_pairs(R, U)
    R2, U2 = R.copy(), U.copy()
    for i, g, q in pairs:
        if q == gp:
            R2[i, g] = 0
            U2[i, q] = 0
    # the new device must not be in the middle of another round at gp
    for i, g, q in pairs:
        if i == new and g < gp < q:
            return None
    R2[new, gp] = 1
    U2[new, gp] = 1
    return R2, U2


def optimize(scenario, constants, config: SCAConfig = SCAConfig()):
    """Joint schedule and resources.

    Returns ``({j: ScheduleTensor}, {j: ResourcePlan}, history)`` where the
    history lists one dict per outer iteration.
    """
    problem = assemble_problem(scenario, constants)
    v0, _, _ = initial_point(problem)
    v, history = run_sca(problem, v0, config)
    tensors, plans = round_and_repair(v, problem)
    schedules = {j: (t.receive.copy(), t.upload.copy()) for j, t in tensors.items()}
    links = [_link_delays(scenario, j) for j in range(scenario.num_tasks)]
    refined, _ = optimize_resources(scenario, constants, schedules, config)
    if plan_objective(scenario, constants, schedules, refined, links)["total"] < \
            plan_objective(scenario, constants, schedules, plans, links)["total"]:
        plans = refined
    if config.local_search:
        schedules, plans = _local_search(scenario, constants, schedules, plans, config, links)
    tensors = {}
    for j, t in enumerate(scenario.tasks):
        R, U = schedules[j]
        tensors[j] = pair_rounds(R, U, ScheduleLimits(t.staleness_limit, t.num_aggregations))
    final = plan_objective(scenario, constants, schedules, plans, links)["total"]
    history.append({"iteration": len(history), "objective": final, "max_violation": 0.0,
                    "binary_gap": 0.0, "inner_residual": float("nan"), "inexact": False, "step": 0.0,
                    "stage": "rounded"})
    log.info("optimizer finished: objective %.6g after %d iterations", final, len(history) - 1)
    return tensors, plans, history


# --------------------------------------------------------------------------
# brute force reference
# --------------------------------------------------------------------------


def brute_force(scenario, constants, cpu_levels: int = 4):
    """Exhaustive search over schedules with a per-round grid over ``(f, e, B)``.

    Single-task scenarios only.  For each feasible schedule every paired
    round independently takes the grid point minimizing its own bound and
    energy contribution; unpaired receptions take the cheapest point.  The
    coupled constraints (timing, energy budget) are then checked on the
    assembled plan and infeasible schedules are skipped.
    Returns ``(objective, (R, U), plan)``.
    """
    if scenario.num_tasks != 1:
        raise ValueError("brute force supports single-task scenarios")
    t = scenario.tasks[0]
    c = constants[0]
    c1, c2, c3 = scenario.objective_weights
    lim = ScheduleLimits(t.staleness_limit, t.num_aggregations)
    G = t.num_aggregations
    e_lo, e_hi = scenario.sgd_count_bounds[0]
    links = [_link_delays(scenario, 0)]
    lt = links[0]
    scale = 1.0 / (G * t.eta_min)
    best = (np.inf, None, None)
    choice_cache = {}

    def round_choice(i, g, paired):
        key = (i, g, paired)
        if key in choice_cache:
            return choice_cache[key]
        dev = scenario.devices[i]
        D = dev.dataset_sizes[0]
        a = dev.cycles_per_sample[0]
        freqs = np.linspace(dev.cpu_freq_bounds[0], dev.cpu_freq_bounds[1], cpu_levels)
        top = (np.inf, None)
        for f, e, B in itertools.product(freqs, range(int(e_lo), int(e_hi) + 1), range(1, int(D) + 1)):
            val = t.energy_weight / G * c2 * dev.chipset_capacitance * a * e * B * f * f
            if paired:
                rb, rc, rd = round_terms(t.learning_rate_schedule[g], e, B, D, c.per_round("dissimilarity", i, g),
                                         c.per_round("sample_variance", i, g), c)
                val += c1 * t.importance * scale * (rb + rc + rd)
            if val < top[0]:
                top = (val, (f, e, B))
        choice_cache[key] = top
        return top

    for R, U in enumerate_feasible(scenario.num_devices, lim):
        pairs, _ = round_pairs(R, U)
        starts = {(i, g) for i, g, _ in pairs}
        plan = default_plan(scenario, 0, "low")
        for i, g in zip(*np.nonzero(R)):
            _, (f, e, B) = round_choice(int(i), int(g), (int(i), int(g)) in starts)
            plan.cpu_freq[i, g], plan.sgd_iters[i, g], plan.batch_size[i, g] = f, e, B
        try:
            plan = finalize_plans(scenario, {0: (R, U)}, {0: plan}, links)[0]
        except OptimizerError:
            continue
        val = plan_objective(scenario, constants, {0: (R, U)}, {0: plan}, links)["total"]
        if val < best[0]:
            best = (val, (R, U), plan)
    if best[1] is None:
        raise OptimizerError("no feasible schedule found by exhaustive search")
    return best


# --------------------------------------------------------------------------
# CSV input/output
# --------------------------------------------------------------------------

PLAN_COLUMNS = ["task", "device", "g", "cpu_freq", "batch_size", "sgd_iters", "idle", "final_idle"]
HISTORY_COLUMNS = ["iteration", "objective", "max_violation", "binary_gap", "inner_residual", "inexact", "step"]


def write_plan_csv(path, plans) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLAN_COLUMNS)
        for j in sorted(plans):
            p = plans[j]
            I, G = p.cpu_freq.shape
            for i in range(I):
                for g in range(G):
                    w.writerow([j, i, g, repr(float(p.cpu_freq[i, g])), repr(float(p.batch_size[i, g])),
                                repr(float(p.sgd_iters[i, g])), repr(float(p.idle[i, g])),
                                repr(float(p.final_idle[i]))])


def read_plan_csv(path, scenario) -> dict:
    """Read plans written by :func:`write_plan_csv`."""
    plans = {j: default_plan(scenario, j, "low") for j in range(scenario.num_tasks)}
    seen = set()
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            j, i, g = int(row["task"]), int(row["device"]), int(row["g"])
            if j not in plans:
                raise ValueError(f"plan references unknown task {j}")
            p = plans[j]
            p.cpu_freq[i, g] = float(row["cpu_freq"])
            p.batch_size[i, g] = float(row["batch_size"])
            p.sgd_iters[i, g] = float(row["sgd_iters"])
            p.idle[i, g] = float(row["idle"])
            p.final_idle[i] = float(row["final_idle"])
            seen.add(j)
    missing = set(plans) - seen
    if missing:
        raise ValueError(f"plan file has no rows for tasks {sorted(missing)}")
    return plans


def write_history_csv(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow(row)
