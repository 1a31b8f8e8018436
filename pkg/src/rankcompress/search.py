"""Global rank selection under a flash budget.

Each table row (layer) contributes at most one candidate; "keep" costs
nothing and changes nothing.  Maximize the summed ``delta_acc`` subject to
``reference_size + sum(delta_flash) <= flash_max``: a multiple-choice
knapsack, solved exactly.

Plan order: objective descending, then predicted size ascending, then the
per-row choice tuple (0 = keep, j = j-th candidate of the row in rank order)
lexicographically ascending.  Objectives are exactly-rounded sums
(``math.fsum``), so they do not depend on summation order.

``exact_bnb`` first runs a short depth-first branch and bound, which settles
small instances outright.  Larger ones seed incumbents from a Lagrangian
pick plus swap ascent, then sweep rows keeping only partial states that
survive both the LP bound and k-fold Pareto dominance.  ``exact_dp`` is a
top-1 dynamic program over (optionally quantized) sizes.
"""
from __future__ import annotations

import bisect
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decompose import RankProposal
from .errors import InfeasibleBudgetError
from .estimators import CandidateTable
from .model_ir import _atomic_write

SOLVERS = ("exact_bnb", "exact_dp")
DEFAULT_MAX_NODES = 5_000_000  # cap on live partial states per row; beyond it the result is not proven
WARM_START_NODES = 20_000


@dataclass(frozen=True)
class Budget:
    flash_max: int | None = None
    target_compression: float | None = None

    def __post_init__(self):
        if (self.flash_max is None) == (self.target_compression is None):
            raise ValueError("set exactly one of flash_max / target_compression")
        if self.flash_max is not None and self.flash_max <= 0:
            raise ValueError("flash_max must be positive")
        if self.target_compression is not None and self.target_compression <= 1:
            raise ValueError("target_compression must be > 1")

    def resolve(self, reference_size: int) -> int:
        if self.flash_max is not None:
            return int(self.flash_max)
        return int(math.floor(reference_size / self.target_compression))


@dataclass(frozen=True)
class SearchConfig:
    k: int = 1
    solver: str = "exact_bnb"
    dp_scale: int = 1
    max_nodes: int = DEFAULT_MAX_NODES

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.dp_scale < 1:
            raise ValueError("dp_scale must be >= 1")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")


@dataclass
class RankPlan:
    """One complete assignment; ``choices[layer] is None`` means keep."""

    choices: dict[str, RankProposal | None]
    predicted_total_delta_acc: float
    predicted_size: int
    rank_in_topk: int = 1
    key: tuple = field(default=(), repr=False, compare=False)

    @property
    def decomposed(self) -> dict[str, RankProposal]:
        return {k: v for k, v in self.choices.items() if v is not None}

    def to_dict(self) -> dict:
        return {
            "rank": self.rank_in_topk,
            "objective": self.predicted_total_delta_acc,
            "predicted_size": self.predicted_size,
            "choices": {
                lid: ({"action": "keep"} if p is None else {"action": "decompose", "r1": p.r1, "r2": p.r2})
                for lid, p in self.choices.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankPlan":
        choices = {}
        for lid, c in d["choices"].items():
            choices[lid] = None if c["action"] == "keep" else RankProposal(lid, int(c["r1"]), int(c["r2"]))
        return cls(choices, float(d["objective"]), int(d["predicted_size"]), int(d["rank"]))


@dataclass
class SearchResult:
    plans: list[RankPlan]
    flash_max: int
    reference_size: int
    solver: str
    k: int
    nodes_expanded: int = 0
    proven_optimal: bool = True
    truncated: bool = False  # fewer than k feasible assignments exist
    seconds: float = field(default=0.0, compare=False)

    def __iter__(self):
        return iter(self.plans)

    def __len__(self):
        return len(self.plans)

    def __getitem__(self, i):
        return self.plans[i]

    def to_dict(self, size_mode: str = "params", extra: dict | None = None) -> dict:
        return {
            "format": 1,
            "size_mode": size_mode,
            "reference_size": self.reference_size,
            "flash_max": self.flash_max,
            "solver": {
                "name": self.solver,
                "k": self.k,
                "nodes_expanded": self.nodes_expanded,
                "proven_optimal": self.proven_optimal,
                "truncated": self.truncated,
            },
            **(extra or {}),
            "plans": [p.to_dict() for p in self.plans],
        }


# --- helpers -------------------------------------------------------------

class _Instance:
    """Rows as parallel lists; item 0 of every row is keep = (0.0, 0)."""

    def __init__(self, table: CandidateTable):
        self.layers = list(table.layers)
        self.rows = table.rows()
        self.values = [[0.0] + [float(e.delta_acc) for e in row] for row in self.rows]
        self.weights = [[0] + [int(e.delta_flash) for e in row] for row in self.rows]
        self.reference_size = int(table.reference_size)

    def plan(self, choice: tuple[int, ...], rank: int = 1) -> RankPlan:
        vals = [self.values[r][c] for r, c in enumerate(choice)]
        size = self.reference_size + sum(self.weights[r][c] for r, c in enumerate(choice))
        obj = math.fsum(vals)
        choices = {
            lid: (None if c == 0 else self.rows[r][c - 1].proposal)
            for r, (lid, c) in enumerate(zip(self.layers, choice))
        }
        return RankPlan(choices, obj, size, rank, key=(-obj, size, choice))


def min_achievable_size(table: CandidateTable) -> int:
    """Reference size plus the largest saving available in every row."""
    total = int(table.reference_size)
    for row in table.rows():
        total += min([0] + [int(e.delta_flash) for e in row])
    return total


def _row_hull(values, weights):
    """Lightest item plus the concave frontier segments ``(slope, dw, dv)`` above it."""
    items = sorted(zip(weights, values), key=lambda t: (t[0], -t[1]))
    frontier = []
    for w, v in items:
        if frontier and v <= frontier[-1][1]:
            continue
        frontier.append((w, v))
    hull = []
    for w, v in frontier:
        while len(hull) >= 2:
            (w1, v1), (w2, v2) = hull[-2], hull[-1]
            # drop hull[-1] if it lies on or below the chord hull[-2] -> (w, v)
            if (v2 - v1) * (w - w1) <= (v - v1) * (w2 - w1):
                hull.pop()
            else:
                break
        hull.append((w, v))
    base_w, base_v = hull[0]
    segs = []
    for (w1, v1), (w2, v2) in zip(hull, hull[1:]):
        segs.append(((v2 - v1) / (w2 - w1), w2 - w1, v2 - v1))
    return base_w, base_v, segs


class _Bounder:
    """LP-relaxation upper bound for every suffix of the row order.

    Each suffix keeps its hull segments sorted by slope as prefix sums, so a
    bound costs one bisection.
    """

    def __init__(self, values, weights):
        n = len(values)
        hulls = [_row_hull(v, w) for v, w in zip(values, weights)]
        self.base_w = [0] * (n + 1)
        self.base_v = [0.0] * (n + 1)
        self.cum_w: list[list] = [[0] for _ in range(n + 1)]
        self.cum_v: list[list] = [[0.0] for _ in range(n + 1)]
        self.slopes: list[list] = [[] for _ in range(n + 1)]
        segs: list = []
        for i in range(n - 1, -1, -1):
            bw, bv, sg = hulls[i]
            self.base_w[i] = self.base_w[i + 1] + bw
            self.base_v[i] = self.base_v[i + 1] + bv
            segs = sorted(segs + sg, key=lambda s: -s[0])
            self.slopes[i] = [s[0] for s in segs]
            self.cum_w[i] = list(np.cumsum([0] + [s[1] for s in segs]))
            self.cum_v[i] = list(np.cumsum([0.0] + [s[2] for s in segs]))

    def bound(self, i: int, cap: float) -> float:
        """Max LP value of rows ``i..`` with total weight ``<= cap`` (-inf if infeasible)."""
        room = cap - self.base_w[i]
        if room < 0:
            return -math.inf
        cw = self.cum_w[i]
        t = bisect.bisect_right(cw, room) - 1
        val = self.base_v[i] + self.cum_v[i][t]
        if t < len(self.slopes[i]):
            val += self.slopes[i][t] * (room - cw[t])
        return val


def _undominated(values, weights, k: int) -> list[int]:
    """Items of one row that can still appear in a top-``k`` plan.

    Item ``j`` is dropped when ``k`` other items each give every plan using
    ``j`` a strictly better key when swapped in: at least the value, at most
    the weight, and a smaller weight or smaller index to settle exact ties.
    """
    keep = []
    for j in range(len(values)):
        beaten = 0
        for i in range(len(values)):
            if i != j and values[i] >= values[j] and weights[i] <= weights[j] \
                    and (weights[i] < weights[j] or i < j):
                beaten += 1
                if beaten >= k:
                    break
        if beaten < k:
            keep.append(j)
    return keep


# --- exact branch and bound ----------------------------------------------

def _bnb(inst: _Instance, cap: int, k: int, max_nodes: int):
    n = len(inst.layers)
    # rows with the largest available saving first
    order = sorted(range(n), key=lambda r: (min(inst.weights[r]), r))
    values = [inst.values[r] for r in order]
    weights = [inst.weights[r] for r in order]
    bounder = _Bounder(values, weights)
    item_order = [
        sorted(_undominated(v, w, k), key=lambda j: (-v[j], w[j], j)) for v, w in zip(values, weights)
    ]
    scale = 1.0 + sum(max(abs(x) for x in v) for v in values)
    slack = 1e-9 * scale

    best: list[tuple] = []  # sorted plan keys
    nodes = 0
    exhausted = False
    choice = [0] * n

    def worst():
        return -best[-1][0] if len(best) >= k else -math.inf

    def leaf():
        full = [0] * n
        for pos, r in enumerate(order):
            full[r] = choice[pos]
        full = tuple(full)
        vals = [inst.values[r][c] for r, c in enumerate(full)]
        size_delta = sum(inst.weights[r][c] for r, c in enumerate(full))
        key = (-math.fsum(vals), size_delta, full)
        if len(best) < k or key < best[-1]:
            bisect.insort(best, key)
            if len(best) > k:
                best.pop()

    def dfs(i: int, used: int, acc: float):
        nonlocal nodes, exhausted
        if exhausted:
            return
        nodes += 1
        if nodes > max_nodes:
            exhausted = True
            return
        if i == n:
            leaf()
            return
        ub = acc + bounder.bound(i, cap - used)
        if ub == -math.inf or ub < worst() - slack:
            return
        vrow, wrow = values[i], weights[i]
        for j in item_order[i]:
            w = used + wrow[j]
            if w + bounder.base_w[i + 1] > cap:
                continue
            choice[i] = j
            dfs(i + 1, w, acc + vrow[j])
        choice[i] = 0

    dfs(0, 0, 0.0)
    return best, nodes, not exhausted


def _heuristic_keys(inst: _Instance, cap: int, k: int) -> list:
    """Good feasible plans to seed pruning: Lagrangian pick, swap ascent, neighbours."""
    n = len(inst.layers)
    if n == 0:
        return [(0.0, 0, ())]
    m = max(len(v) for v in inst.values)
    val = np.full((n, m), -np.inf)
    wt = np.zeros((n, m), dtype=np.int64)
    for r in range(n):
        val[r, : len(inst.values[r])] = inst.values[r]
        wt[r, : len(inst.weights[r])] = inst.weights[r]
        wt[r, len(inst.weights[r]):] = max(inst.weights[r])
    rows = np.arange(n)

    def pick(lam):
        return np.argmax(val - lam * wt, axis=1)

    lo, hi = 0.0, 1.0
    while wt[rows, pick(hi)].sum() > cap and hi < 1e300:
        hi *= 4.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if wt[rows, pick(mid)].sum() > cap:
            lo = mid
        else:
            hi = mid
    choice = pick(hi)
    if wt[rows, choice].sum() > cap:
        return []
    # single-row swaps while one improves the objective and still fits
    while True:
        room = cap - wt[rows, choice].sum()
        gain = val - val[rows, choice][:, None]
        extra = wt - wt[rows, choice][:, None]
        gain[extra > room] = -np.inf
        r, j = np.unravel_index(np.argmax(gain), gain.shape)
        if not gain[r, j] > 0:
            break
        choice[r] = j
    plans = {tuple(int(c) for c in choice)}
    room = cap - wt[rows, choice].sum()
    for r in range(n):
        for j in range(len(inst.values[r])):
            if j != choice[r] and wt[r, j] - wt[r, choice[r]] <= room:
                alt = choice.copy()
                alt[r] = j
                plans.add(tuple(int(c) for c in alt))
    keys = []
    for full in plans:
        vals = [inst.values[r][c] for r, c in enumerate(full)]
        keys.append((-math.fsum(vals), sum(inst.weights[r][c] for r, c in enumerate(full)), full))
    return sorted(keys)[:k]


def _frontier(inst: _Instance, cap: int, k: int, seed_keys: list, max_states: int):
    """Row-by-row sweep over partial (size, objective) states.

    A partial state is dropped when its LP completion bound falls below the
    k-th best known plan, or when ``k`` other states reach at least as much
    objective (by a margin that covers float rounding) at no more size.
    States are peeled in ``k`` Pareto layers, which keeps every state with
    fewer than ``k`` dominators.  Returns ``(keys, states, complete)``.
    """
    n = len(inst.layers)
    order = sorted(range(n), key=lambda r: (min(inst.weights[r]), r))
    values = [inst.values[r] for r in order]
    weights = [inst.weights[r] for r in order]
    bounder = _Bounder(values, weights)
    items = [np.array(_undominated(v, w, k), dtype=np.int64) for v, w in zip(values, weights)]
    scale = 1.0 + sum(max(abs(x) for x in v) for v in values)
    slack = 1e-9 * scale
    cum_w = [np.asarray(c, dtype=np.float64) for c in bounder.cum_w]
    cum_v = [np.asarray(c, dtype=np.float64) for c in bounder.cum_v]
    slopes = [np.asarray(list(sl) + [0.0]) for sl in bounder.slopes]
    lb = -seed_keys[k - 1][0] if len(seed_keys) >= k else -math.inf

    big_w = np.zeros(1, dtype=np.int64)
    big_v = np.zeros(1)
    parents, picks = [], []
    states = 1
    complete = True
    for i in range(n):
        iw = np.asarray(weights[i], dtype=np.int64)[items[i]]
        iv = np.asarray(values[i], dtype=np.float64)[items[i]]
        nw = (big_w[:, None] + iw[None, :]).ravel()
        nv = (big_v[:, None] + iv[None, :]).ravel()
        par = np.repeat(np.arange(big_w.size), iw.size)
        pick = np.tile(items[i], big_w.size)
        room = cap - nw - bounder.base_w[i + 1]
        ok = room >= 0
        t = np.searchsorted(cum_w[i + 1], room[ok], side="right") - 1
        ub = (nv[ok] + bounder.base_v[i + 1] + cum_v[i + 1][t]
              + slopes[i + 1][t] * (room[ok] - cum_w[i + 1][t]))
        sel = np.flatnonzero(ok)[ub >= lb - slack]
        nw, nv, par, pick = nw[sel], nv[sel], par[sel], pick[sel]
        # k-layer Pareto peel on (size asc, objective desc)
        srt = np.lexsort((-nv, nw))
        keep = np.zeros(srt.size, dtype=bool)
        rest = np.arange(srt.size)
        for _ in range(k):
            if rest.size == 0:
                break
            v = nv[srt[rest]]
            prev = np.concatenate(([-np.inf], np.maximum.accumulate(v)[:-1]))
            nd = ~(prev >= v + slack)
            keep[rest[nd]] = True
            rest = rest[~nd]
        sel = srt[keep]
        if sel.size > max_states:
            complete = False
            sel = sel[np.argsort(-nv[sel], kind="stable")[:max_states]]
        big_w, big_v = nw[sel], nv[sel]
        parents.append(par[sel])
        picks.append(pick[sel])
        states += int(sel.size)

    if big_w.size == 0:
        return sorted(seed_keys)[:k], states, complete
    # exact keys for the final states that can still reach the top k
    cut = np.sort(big_v)[::-1][min(k, big_v.size) - 1] - 2 * slack
    idx = np.flatnonzero(big_v >= cut)
    rows = np.zeros((idx.size, n), dtype=np.int64)
    cur = idx
    for i in range(n - 1, -1, -1):
        rows[:, order[i]] = picks[i][cur]
        cur = parents[i][cur]
    keys = set(seed_keys)
    for row in rows:
        full = tuple(int(c) for c in row)
        vals = [inst.values[r][c] for r, c in enumerate(full)]
        keys.add((-math.fsum(vals), sum(inst.weights[r][c] for r, c in enumerate(full)), full))
    return sorted(keys)[:k], states, complete


# --- exact DP over quantized sizes ---------------------------------------

def _dp(inst: _Instance, cap: int, scale: int):
    """Top-1 by dynamic programming; sizes are rounded up to multiples of ``scale``.

    Exact for ``scale == 1``; for larger scales the returned plan is feasible
    but may be suboptimal by the rounding slack.
    """
    n = len(inst.layers)
    q = [[-(-w // scale) for w in row] for row in inst.weights]  # ceil division
    lo = sum(min(row) for row in q)
    qcap = math.floor(cap / scale)
    if lo > qcap:
        return None
    span = qcap - lo
    neg = -np.inf
    # value[t] = best objective with quantized weight exactly lo + t
    value = np.full(span + 1, neg)
    value[0] = 0.0
    offset = 0
    back = []
    for r in range(n):
        rmin = min(q[r])
        new = np.full(span + 1, neg)
        arg = np.zeros(span + 1, dtype=np.int32)
        for j in sorted(range(len(q[r])), key=lambda j: (-inst.values[r][j], q[r][j], j)):
            shift = q[r][j] - rmin
            if shift > span:
                continue
            cand = np.full(span + 1, neg)
            cand[shift:] = value[: span + 1 - shift] + inst.values[r][j]
            better = cand > new
            new[better] = cand[better]
            arg[better] = j
        value = new
        back.append(arg)
        offset += rmin
    t = int(np.argmax(value))
    if value[t] == neg:
        return None
    choice = [0] * n
    for r in range(n - 1, -1, -1):
        j = int(back[r][t])
        choice[r] = j
        t -= q[r][j] - min(q[r])
    return tuple(choice)


def solve(table: CandidateTable, budget: Budget, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    """Top-``cfg.k`` budget-feasible plans, best first.

    Raises :class:`InfeasibleBudgetError` when even the maximal saving in
    every row does not fit.
    """
    t0 = time.perf_counter()
    inst = _Instance(table)
    flash_max = budget.resolve(inst.reference_size)
    floor_size = min_achievable_size(table)
    if floor_size > flash_max:
        raise InfeasibleBudgetError(flash_max, floor_size)
    cap = flash_max - inst.reference_size
    if cfg.solver == "exact_dp":
        if cfg.k != 1:
            raise ValueError("exact_dp returns a single plan; use exact_bnb for k > 1")
        choice = _dp(inst, cap, cfg.dp_scale)
        if choice is None:
            raise InfeasibleBudgetError(flash_max, floor_size)
        plans = [inst.plan(choice)]
        res = SearchResult(plans, flash_max, inst.reference_size, cfg.solver, cfg.k,
                           nodes_expanded=0, proven_optimal=cfg.dp_scale == 1)
    else:
        seed, nodes, done = _bnb(inst, cap, cfg.k, WARM_START_NODES)
        if done:
            keys, complete = seed, True
        else:
            seed = sorted(set(seed) | set(_heuristic_keys(inst, cap, cfg.k)))[: cfg.k]
            keys, states, complete = _frontier(inst, cap, cfg.k, seed, cfg.max_nodes)
            nodes += states
        plans = [inst.plan(key[2], rank) for rank, key in enumerate(keys, start=1)]
        res = SearchResult(plans, flash_max, inst.reference_size, cfg.solver, cfg.k,
                           nodes_expanded=nodes, proven_optimal=complete,
                           truncated=complete and len(plans) < cfg.k)
    res.seconds = time.perf_counter() - t0
    return res


def topk(table: CandidateTable, budget: Budget, cfg: SearchConfig) -> SearchResult:
    return solve(table, budget, cfg)


def save_plans(result: SearchResult, path, size_mode: str = "params", extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(result.to_dict(size_mode, extra), indent=1, sort_keys=True) + "\n"
    _atomic_write(path, text.encode())
    return path


def load_plans(path) -> tuple[list[RankPlan], dict]:
    data = json.loads(Path(path).read_text())
    plans = [RankPlan.from_dict(p) for p in data["plans"]]
    return plans, {k: v for k, v in data.items() if k != "plans"}
