"""Multiple-choice knapsack solvers for the precision-selection problem.

Pick one config per group, maximise the summed gain ``c`` subject to the
summed predicted loss MSE ``d`` staying within the budget. Every solver
accumulates totals group by group in index order, so the same choice always
yields bit-identical totals and budget checks need no tolerance.

Ties are broken by lower total cost, then by the lexicographically smallest
choice vector.
"""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible, MPQError, MultiFormatUnsupported, TooLarge
from .graphir import SCHEMA_VERSION, CompGraph, Group, config_digits, config_index
from .sensitivity import FormatRegistry, SensitivityReport, group_mse_vector

BRUTE_LIMIT = 10**7
_EPS = np.finfo(np.float64).eps


@dataclass
class MckpInstance:
    gains: list[np.ndarray]
    costs: list[np.ndarray]
    budget: float
    tau: float | None = None
    #: Layers per group and format count; needed only by the layer-level baselines.
    group_sizes: list[int] | None = None
    n_formats: int = 2
    baseline_format: int = 0

    def __post_init__(self):
        self.gains = [np.asarray(c, dtype=np.float64) for c in self.gains]
        self.costs = [np.asarray(d, dtype=np.float64) for d in self.costs]
        if len(self.gains) != len(self.costs):
            raise MPQError(f"{len(self.gains)} gain vectors but {len(self.costs)} cost vectors")
        for j, (c, d) in enumerate(zip(self.gains, self.costs)):
            if c.shape != d.shape or c.ndim != 1 or len(c) == 0:
                raise MPQError(f"group {j}: gain and cost vectors must be equal-length and non-empty")
            if np.any(d < 0) or not np.all(np.isfinite(d)) or not np.all(np.isfinite(c)):
                raise MPQError(f"group {j}: costs must be finite and >= 0, gains finite")
        if not self.budget >= 0:
            raise MPQError(f"budget must be >= 0, got {self.budget}")
        if self.group_sizes is not None:
            for j, (L, c) in enumerate(zip(self.group_sizes, self.gains)):
                if self.n_formats**L != len(c):
                    raise MPQError(f"group {j}: {len(c)} options but F^L = {self.n_formats ** L}")

    @property
    def n_groups(self) -> int:
        return len(self.gains)

    def totals(self, choice: Sequence[int]) -> tuple[float, float]:
        gain = 0.0
        cost = 0.0
        for j, p in enumerate(choice):
            gain += self.gains[j][p]
            cost += self.costs[j][p]
        return float(gain), float(cost)

    def scaled(self, k: float) -> "MckpInstance":
        return MckpInstance(
            [c * k for c in self.gains], self.costs, self.budget, self.tau,
            self.group_sizes, self.n_formats, self.baseline_format,
        )

    def with_budget(self, budget: float, tau: float | None = None) -> "MckpInstance":
        return MckpInstance(
            self.gains, self.costs, budget, tau, self.group_sizes, self.n_formats, self.baseline_format
        )


@dataclass
class Solution:
    choice: tuple[int, ...]
    total_gain: float
    total_cost: float
    optimality: str
    solver: str

    @classmethod
    def of(cls, inst: MckpInstance, choice: Sequence[int], optimality: str, solver: str) -> "Solution":
        gain, cost = inst.totals(choice)
        return cls(tuple(int(p) for p in choice), gain, cost, optimality, solver)


def _better(gain: float, cost: float, choice: tuple, best: tuple | None) -> bool:
    if best is None:
        return True
    bg, bc, bch = best
    if gain != bg:
        return gain > bg
    if cost != bc:
        return cost < bc
    return choice < bch


def solve_brute(inst: MckpInstance, limit: int = BRUTE_LIMIT) -> Solution:
    """Exhaustive enumeration; the reference the other solvers are checked against."""
    sizes = [len(c) for c in inst.gains]
    total = math.prod(sizes)
    if total > limit:
        raise TooLarge(f"{total} combinations exceed the brute-force limit of {limit}")
    gain = np.zeros(1)
    cost = np.zeros(1)
    for c, d in zip(inst.gains, inst.costs):
        gain = (gain[:, None] + c[None, :]).ravel()
        cost = (cost[:, None] + d[None, :]).ravel()
    feasible = np.flatnonzero(cost <= inst.budget)
    if feasible.size == 0:
        raise Infeasible("no configuration fits the budget")
    g = gain[feasible]
    top = feasible[g == g.max()]
    c = cost[top]
    idx = top[c == c.min()][0]  # flat order is lexicographic in the choice vector
    choice = np.unravel_index(idx, sizes)
    return Solution.of(inst, [int(x) for x in choice], "exact", "brute")


def pareto_filter(c: np.ndarray, d: np.ndarray) -> list[int]:
    """Indices of options that survive dominance pruning.

    Option ``q`` is dropped when some ``o`` has ``d_o <= d_q`` and
    ``c_o >= c_q`` and swapping ``q`` for ``o`` can never lose under the
    tie-break: ``o`` has a lower index, or its advantage is large enough that
    floating-point totals cannot absorb it.
    """
    n = len(c)
    margin_c = 8 * _EPS * max(1.0, float(np.abs(c).max())) * 64
    margin_d = 8 * _EPS * max(1.0, float(np.abs(d).max())) * 64
    keep = []
    for q in range(n):
        dominated = False
        for o in range(n):
            if o == q or d[o] > d[q] or c[o] < c[q]:
                continue
            if o < q or c[o] - c[q] > margin_c or d[q] - d[o] > margin_d:
                dominated = True
                break
        if not dominated:
            keep.append(q)
    return keep


def _hull_steps(c: np.ndarray, d: np.ndarray, opts: list[int]) -> tuple[int, list[tuple[float, float, float]]]:
    """Min-cost option and the concave-hull increments ``(slope, dd, dc)`` above it."""
    pts = sorted(opts, key=lambda p: (d[p], -c[p]))
    hull = [pts[0]]
    for p in pts[1:]:
        if c[p] <= c[hull[-1]]:
            continue
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b if it lies on or below the segment a-p
            if (c[b] - c[a]) * (d[p] - d[a]) <= (c[p] - c[a]) * (d[b] - d[a]):
                hull.pop()
            else:
                break
        hull.append(p)
    steps = []
    for a, b in zip(hull, hull[1:]):
        dd, dc = float(d[b] - d[a]), float(c[b] - c[a])
        steps.append((dc / dd, dd, dc))
    return pts[0], steps


class _BranchAndBound:
    def __init__(self, inst: MckpInstance):
        self.inst = inst
        J = inst.n_groups
        self.opts = [pareto_filter(c, d) for c, d in zip(inst.gains, inst.costs)]
        self.order = [sorted(o, key=lambda p: (-inst.gains[j][p], inst.costs[j][p], p)) for j, o in enumerate(self.opts)]
        base = [_hull_steps(inst.gains[j], inst.costs[j], self.opts[j]) for j in range(J)]
        self.min_c = [float(inst.gains[j][b]) for j, (b, _) in enumerate(base)]
        self.min_d = [float(inst.costs[j][b]) for j, (b, _) in enumerate(base)]
        self.steps = sorted(
            ((s, dd, dc, j) for j, (_, st) in enumerate(base) for s, dd, dc in st), key=lambda t: -t[0]
        )
        # suffix sums of the per-group minimum-cost option
        self.suf_c = [0.0] * (J + 1)
        self.suf_d = [0.0] * (J + 1)
        for j in range(J - 1, -1, -1):
            self.suf_c[j] = self.suf_c[j + 1] + self.min_c[j]
            self.suf_d[j] = self.suf_d[j + 1] + self.min_d[j]
        scale_c = sum(float(np.abs(c).max()) for c in inst.gains) + 1.0
        scale_d = sum(float(d.max()) for d in inst.costs) + inst.budget + 1.0
        self.slack_c = 1e-9 * scale_c
        self.slack_d = 1e-9 * scale_d
        self.best: tuple | None = None
        self.nodes = 0

    def bound(self, j: int, room: float) -> float:
        """LP-relaxation bound on the gain of groups ``j..`` within ``room``."""
        if self.suf_d[j] > room + self.slack_d:
            return -math.inf
        value = self.suf_c[j]
        left = room - self.suf_d[j]
        for _, dd, dc, k in self.steps:
            if k < j:
                continue
            if left <= 0:
                break
            if dd <= left:
                value += dc
                left -= dd
            else:
                value += dc * (left / dd)
                break
        return value

    def run(self) -> None:
        J = self.inst.n_groups
        B = self.inst.budget
        choice = [0] * J

        def dfs(j: int, gain: float, cost: float) -> None:
            self.nodes += 1
            if j == J:
                ch = tuple(choice)
                if _better(gain, cost, ch, self.best):
                    self.best = (gain, cost, ch)
                return
            for p in self.order[j]:
                c_new = cost + self.inst.costs[j][p]
                if c_new > B:
                    continue
                g_new = gain + self.inst.gains[j][p]
                if self.best is not None:
                    ub = g_new + self.bound(j + 1, B - c_new)
                    if ub < self.best[0] - self.slack_c:
                        continue
                elif self.bound(j + 1, B - c_new) == -math.inf:
                    continue
                choice[j] = p
                dfs(j + 1, g_new, c_new)

        dfs(0, 0.0, 0.0)


def solve_bb(inst: MckpInstance) -> Solution:
    """Exact depth-first branch and bound with an LP-relaxation upper bound."""
    bb = _BranchAndBound(inst)
    bb.run()
    if bb.best is None:
        raise Infeasible("no configuration fits the budget")
    return Solution.of(inst, bb.best[2], "exact", "bb")


def solve_dp(inst: MckpInstance, grid: int = 10_000) -> Solution:
    """Dynamic program over the budget cut into ``grid`` quanta.

    Costs are rounded up to whole quanta, so the result never exceeds the
    true budget. Exact when every cost is a whole number of quanta.
    """
    if grid < 1:
        raise MPQError("grid must be >= 1")
    B = inst.budget
    capacity = grid
    while capacity >= 0:
        sol = _dp(inst, grid, capacity)
        if sol is not None and sol.total_cost <= B:
            return sol
        capacity -= 1
    raise Infeasible("no configuration fits the budget")


def _dp(inst: MckpInstance, grid: int, capacity: int) -> Solution | None:
    B = inst.budget
    q = B / grid if B > 0 else 0.0
    weights = []
    lossless = True
    for d in inst.costs:
        if q == 0.0:
            w = np.where(d == 0, 0, capacity + 1)
        else:
            w = np.ceil(d / q).astype(np.int64)
            w = np.where(w * q < d, w + 1, w)
            lossless &= bool(np.all(w * q == d))
        weights.append(np.minimum(w, capacity + 1).astype(np.int64))
    NEG = -math.inf
    dp = np.full(capacity + 1, NEG)
    dp[0] = 0.0
    back = []
    for j, (c, w) in enumerate(zip(inst.gains, weights)):
        new = np.full(capacity + 1, NEG)
        arg = np.full(capacity + 1, -1, dtype=np.int64)
        for p in range(len(c)):
            wp = int(w[p])
            if wp > capacity:
                continue
            cand = np.full(capacity + 1, NEG)
            cand[wp:] = dp[: capacity + 1 - wp] + c[p]
            better = cand > new
            new = np.where(better, cand, new)
            arg = np.where(better, p, arg)
        back.append(arg)
        dp = new
    if not np.any(np.isfinite(dp)):
        return None
    b = int(np.argmax(dp))  # first maximum: smallest weight among ties
    choice = [0] * inst.n_groups
    for j in range(inst.n_groups - 1, -1, -1):
        p = int(back[j][b])
        choice[j] = p
        b -= int(weights[j][p])
    return Solution.of(inst, choice, "exact" if lossless else "heuristic", "dp")


# ---------------------------------------------------------------------------
# layer-level baselines


def _layer_view(inst: MckpInstance) -> tuple[list[int], int, int]:
    if inst.group_sizes is None:
        raise MPQError("baselines need group_sizes on the instance")
    if inst.n_formats != 2:
        raise MultiFormatUnsupported("Random/Prefix baselines are defined for two formats only")
    quant = 1 - inst.baseline_format
    return inst.group_sizes, inst.baseline_format, quant


def default_layer_order(inst: MckpInstance) -> list[tuple[int, int]]:
    sizes = inst.group_sizes or []
    return [(j, l) for j, L in enumerate(sizes) for l in range(L)]


def choice_for_layers(inst: MckpInstance, quantized: set[tuple[int, int]]) -> list[int]:
    sizes, base, quant = _layer_view(inst)
    return [
        config_index([quant if (j, l) in quantized else base for l in range(L)], 2) for j, L in enumerate(sizes)
    ]


def baseline_prefix(inst: MckpInstance, layer_order: Sequence[tuple[int, int]] | None = None) -> Solution:
    """Quantize the longest execution-order prefix of layers that fits the budget."""
    _layer_view(inst)
    order = list(layer_order) if layer_order is not None else default_layer_order(inst)
    chosen: set[tuple[int, int]] = set()
    best = choice_for_layers(inst, chosen)
    for layer in order:
        chosen.add(layer)
        ch = choice_for_layers(inst, chosen)
        if inst.totals(ch)[1] > inst.budget:
            break
        best = ch
    return Solution.of(inst, best, "heuristic", "prefix")


def greedy_by_order(inst: MckpInstance, order: Sequence[tuple[int, int]]) -> Solution:
    """Add layers in ``order``, skipping any whose addition breaks the budget."""
    chosen: set[tuple[int, int]] = set()
    for layer in order:
        trial = chosen | {layer}
        if inst.totals(choice_for_layers(inst, trial))[1] <= inst.budget:
            chosen = trial
    return Solution.of(inst, choice_for_layers(inst, chosen), "heuristic", "random")


def baseline_random(
    inst: MckpInstance,
    layer_order: Sequence[tuple[int, int]] | None = None,
    seed: int = 0,
    attempts: int = 1,
) -> Solution:
    """Greedy fill over seeded random permutations of the layers; best of ``attempts``."""
    _layer_view(inst)
    if attempts < 1:
        raise MPQError("attempts must be >= 1")
    layers = list(layer_order) if layer_order is not None else default_layer_order(inst)
    rng = np.random.default_rng(seed)
    best: Solution | None = None
    for _ in range(attempts):
        perm = [layers[i] for i in rng.permutation(len(layers))]
        sol = greedy_by_order(inst, perm)
        if best is None or _better(sol.total_gain, sol.total_cost, sol.choice, (best.total_gain, best.total_cost, best.choice)):
            best = sol
    assert best is not None
    return best


# ---------------------------------------------------------------------------
# instances and sweeps


def build_instance(
    groups: Sequence[Group],
    gains: Sequence[np.ndarray],
    rep: SensitivityReport,
    fmts: FormatRegistry,
    tau: float,
) -> MckpInstance:
    costs = [group_mse_vector(g, rep, fmts) for g in groups]
    return MckpInstance(
        list(gains), costs, tau**2 * rep.mean_sq_loss, tau,
        [len(g) for g in groups], len(fmts), fmts.baseline_index,
    )


def count_quantized(inst: MckpInstance, choice: Sequence[int]) -> int:
    if inst.group_sizes is None:
        raise MPQError("instance has no group sizes")
    return sum(
        sum(1 for d in config_digits(p, L, inst.n_formats) if d != inst.baseline_format)
        for p, L in zip(choice, inst.group_sizes)
    )


@dataclass
class SweepPoint:
    strategy: str
    tau: float
    budget: float
    total_cost: float
    total_gain: float
    n_quantized: int
    choice: tuple[int, ...] = field(default=())


SWEEP_HEADER = ["tau", "budget", "total_cost", "total_gain", "n_quantized_layers", "strategy"]


def sweep_tau(
    groups: Sequence[Group],
    gains: Sequence[np.ndarray],
    rep: SensitivityReport,
    fmts: FormatRegistry,
    taus: Sequence[float],
    include_all_quantized: bool = False,
    random_seeds: Sequence[int] = (),
    prefix: bool = False,
    solver: str = "bb",
) -> list[SweepPoint]:
    """Optimal (and optionally baseline) solutions over an ascending list of thresholds."""
    if list(taus) != sorted(taus):
        raise MPQError("taus must be sorted ascending")
    solve = {"bb": solve_bb, "dp": solve_dp, "brute": solve_brute}[solver]
    base = build_instance(groups, gains, rep, fmts, 0.0)
    points = []

    def point(name: str, tau: float, inst: MckpInstance, sol: Solution) -> SweepPoint:
        return SweepPoint(
            name, tau, inst.budget, sol.total_cost, sol.total_gain, count_quantized(inst, sol.choice), sol.choice
        )

    for tau in taus:
        inst = base.with_budget(tau**2 * rep.mean_sq_loss, tau)
        points.append(point("ip", tau, inst, solve(inst)))
        if prefix:
            points.append(point("prefix", tau, inst, baseline_prefix(inst)))
        for s in random_seeds:
            points.append(point(f"random_{s}", tau, inst, baseline_random(inst, seed=s)))
    if include_all_quantized:
        q = min((i for i, f in enumerate(fmts) if not f.is_baseline), key=lambda i: fmts[i].mantissa_bits)
        choice = [config_index([q] * len(g), len(fmts)) for g in groups]
        gain, cost = base.totals(choice)
        tau = math.sqrt(cost / rep.mean_sq_loss) if rep.mean_sq_loss > 0 else math.inf
        inst = base.with_budget(cost, tau)
        points.append(point("all_quantized", tau, inst, Solution.of(inst, choice, "exact", "fixed")))
    return points


def random_instance(
    seed: int,
    max_groups: int = 12,
    max_layers: int = 3,
    n_formats: int = 2,
    max_options: int = 200_000,
    negative_gains: bool = True,
) -> MckpInstance:
    """Seeded random instance with a layer-structured cost model (for tests and benchmarks).

    Costs come from per-layer sensitivities as in the real problem; gains are
    random per config and may be negative. Group sizes are drawn so the
    full enumeration stays below ``max_options`` combinations.
    """
    rng = np.random.default_rng(seed)
    J = int(rng.integers(1, max_groups + 1))
    sizes: list[int] = []
    total = 1
    for _ in range(J):
        L = int(rng.integers(1, max_layers + 1))
        while L > 1 and total * n_formats**L > max_options:
            L -= 1
        if total * n_formats**L > max_options:
            break
        sizes.append(L)
        total *= n_formats**L
    gains, costs = [], []
    alphas = [0.0] + sorted(rng.uniform(0.1, 1.0, size=n_formats - 1), reverse=True)
    for L in sizes:
        s = rng.exponential(1.0, size=L)
        lo = -0.5 if negative_gains else 0.0
        per_layer = rng.uniform(lo, 1.0, size=(L, n_formats))
        per_layer[:, 0] = 0.0
        c, d = [], []
        for p in range(n_formats**L):
            digits = config_digits(p, L, n_formats)
            d.append(sum(s[l] * alphas[f] for l, f in enumerate(digits)))
            g = sum(per_layer[l][f] for l, f in enumerate(digits))
            if p:
                g += rng.normal(0.0, 0.3)  # intra-group interaction
            c.append(g)
        gains.append(np.array(c))
        costs.append(np.array(d))
    total_max = sum(float(d.max()) for d in costs)
    budget = float(rng.uniform(0.0, 1.0) * total_max)
    return MckpInstance(gains, costs, budget, None, sizes, n_formats, 0)


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for pt in points:
        w.writerow([repr(pt.tau), repr(pt.budget), repr(pt.total_cost), repr(pt.total_gain), pt.n_quantized, pt.strategy])
    return buf.getvalue()


def plan_to_dict(
    sol: Solution,
    inst: MckpInstance,
    groups: Sequence[Group],
    fmts: FormatRegistry,
    metric: str,
    graph: CompGraph | None = None,
) -> dict:
    """Plan file contents; ``predicted_loss_mse`` is the solution's total cost."""
    F = len(fmts)
    choice = []
    for grp, p in zip(groups, sol.choice):
        layers = []
        for v, f in zip(grp.layers, config_digits(p, len(grp), F)):
            item = {"id": v, "format": fmts[f].name}
            if graph is not None:
                item["name"] = graph.name(v)
            layers.append(item)
        choice.append({"group": grp.j, "config": p, "layers": layers})
    return {
        "schema_version": SCHEMA_VERSION,
        "tau": inst.tau,
        "budget": inst.budget,
        "choice": choice,
        "predicted_loss_mse": sol.total_cost,
        "total_gain": sol.total_gain,
        "metric": metric.upper(),
        "solver": sol.solver,
        "optimality": sol.optimality,
    }
