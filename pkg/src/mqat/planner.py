"""Bit-allocation planning: probe-winner selection, quantization-flow
ordering, exact ILP over module bit widths, the exhaustive flow search, and
compression/BOPs accounting.

The module-level "ILP" is solved by exhaustive enumeration — the search
space is |q|^K with K tiny — so optimality is trivial to guarantee. The
layer-wise variant uses depth-first branch and bound (exact) up to 24
layers and falls back to a discretized knapsack DP beyond that.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

FP_BITS = 32


class InfeasibleBudgetError(ValueError):
    """The compression budget cannot be met even at the smallest bit widths."""


@dataclass
class QuantPlan:
    flow: list[str]
    bits: dict[str, int]
    k_best: str | None
    budget: float
    achieved_size_bits: int
    achieved_compression: float
    probe_results: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "flow": list(self.flow),
            "bits": dict(self.bits),
            "k_best": self.k_best,
            "budget": self.budget,
            "achieved_size_bits": self.achieved_size_bits,
            "achieved_compression": self.achieved_compression,
            "probe_results": dict(self.probe_results),
        }


def baseline_probe(modules: list[str], baseline_accuracy: float, probe_fn) -> tuple[str | None, dict[str, float]]:
    """Pick the module whose aggressive 2-bit probe beats the baseline.

    `probe_fn(module_id)` trains a probe copy and returns its accuracy; a
    probe that diverges is recorded as failed (None) rather than fatal.
    Acceptance needs strict improvement over both the baseline and the best
    probe so far, so ties keep earlier modules (and "no winner" keeps every
    module in the flow).
    """
    results: dict[str, float] = {}
    k_best = None
    best_acc = None
    for module_id in modules:
        try:
            acc = probe_fn(module_id)
        except ArithmeticError:
            results[module_id] = float("nan")
            continue
        results[module_id] = acc
        if acc > baseline_accuracy and (best_acc is None or acc > best_acc):
            k_best = module_id
            best_acc = acc
    return k_best, results


def derive_flow(sizes: dict[str, int], k_best: str | None = None) -> list[str]:
    """Modules sorted by ascending parameter count; the probe winner is
    removed. Ties keep declaration order (stable sort)."""
    order = list(sizes)
    flow = sorted(order, key=lambda m: (sizes[m], order.index(m)))
    if k_best is not None:
        flow = [m for m in flow if m != k_best]
    return flow


def _assignment_better(cand: tuple, best: tuple) -> bool:
    # compare (objective, total_size_bits, bits_vector)
    return cand < best


def ilp_allocate(omega: dict[tuple[str, int], float], sizes: dict[str, int],
                 candidate_bits, budget: float,
                 fixed: dict[str, int] | None = None) -> dict[str, int]:
    """Exact minimum-importance bit assignment under the size budget.

    Modules in `fixed` keep their given bit width, count toward the budget,
    and are excluded from the search. Ties break toward the smaller total
    size, then lexicographically over the free modules' bit vector in
    declaration order.
    """
    if budget < 1.0:
        raise ValueError(f"ilp_allocate: compression budget must be >= 1, got {budget}")
    q = sorted(set(int(b) for b in candidate_bits))
    if not q:
        raise ValueError("ilp_allocate: empty candidate bit set")
    fixed = dict(fixed or {})
    modules = list(sizes)
    free = [m for m in modules if m not in fixed]
    for m in free:
        for b in q:
            if (m, b) not in omega:
                raise KeyError(f"ilp_allocate: omega missing entry for ({m!r}, {b})")
    total_fp_bits = FP_BITS * sum(sizes.values())
    cap = total_fp_bits / budget
    fixed_bits = sum(b * sizes[m] for m, b in fixed.items())

    best = None
    best_bits = None
    for combo in itertools.product(q, repeat=len(free)):
        size = fixed_bits + sum(b * sizes[m] for m, b in zip(free, combo))
        if size > cap:
            continue
        obj = 0.0
        for m, b in zip(free, combo):
            obj += omega[(m, b)]
        key = (obj, size, combo)
        if best is None or _assignment_better(key, best):
            best = key
            best_bits = combo
    if best is None:
        min_size = fixed_bits + sum(min(q) * sizes[m] for m in free)
        raise InfeasibleBudgetError(
            f"ilp_allocate: budget {budget}x needs <= {cap:.0f} bits but the smallest "
            f"assignment is {min_size} bits")
    out = dict(fixed)
    out.update({m: b for m, b in zip(free, best_bits)})
    return {m: out[m] for m in modules}


def achieved_size_bits(sizes: dict[str, int], bits: dict[str, int]) -> int:
    return sum(bits[m] * s for m, s in sizes.items())


def compression_factor(sizes: dict[str, int], bits: dict[str, int]) -> float:
    """Full-precision size over quantized size, weight payload only."""
    quantized = achieved_size_bits(sizes, bits)
    return (FP_BITS * sum(sizes.values())) / quantized


def bops_estimate(layer_macs: dict[str, int], layer_bits_w: dict[str, int], bits_a: int = 32) -> int:
    """Sum over layers of MACs * weight bits * activation bits."""
    total = 0
    for layer_id, macs in layer_macs.items():
        total += macs * layer_bits_w[layer_id] * bits_a
    return total


def flow_search_exhaustive(modules: list[str], evaluate_subset, max_modules: int = 4) -> list[tuple[tuple[str, ...], float]]:
    """Accuracy of 2-bit-quantizing every subset of modules (2^K rows).

    `evaluate_subset(subset_tuple)` must return the retrained accuracy; the
    empty subset must evaluate the unmodified baseline. Subsets are emitted
    by ascending size, then declaration order.
    """
    if len(modules) > max_modules:
        raise ValueError(
            f"flow_search_exhaustive: {len(modules)} modules exceeds the 2^K cost guard "
            f"({max_modules})")
    rows = []
    for r in range(len(modules) + 1):
        for subset in itertools.combinations(modules, r):
            rows.append((subset, float(evaluate_subset(subset))))
    return rows


# ---------------------------------------------------------------------------
# layer-wise allocation (mixed-precision baseline)
# ---------------------------------------------------------------------------

def layerwise_allocate(omega: dict[tuple[str, int], float], sizes: dict[str, int],
                       candidate_bits, budget: float) -> dict[str, int]:
    """Same objective and tie-break as ilp_allocate, at layer granularity.

    Exact branch-and-bound for <= 24 layers; a discretized-size knapsack DP
    (conservative rounding, still budget-respecting) beyond that.
    """
    if budget < 1.0:
        raise ValueError(f"layerwise_allocate: compression budget must be >= 1, got {budget}")
    q = sorted(set(int(b) for b in candidate_bits))
    layers = list(sizes)
    for lid in layers:
        for b in q:
            if (lid, b) not in omega:
                raise KeyError(f"layerwise_allocate: omega missing entry for ({lid!r}, {b})")
    cap = FP_BITS * sum(sizes.values()) / budget
    if len(layers) <= 24:
        bits = _branch_and_bound(omega, sizes, layers, q, cap)
    else:
        bits = _knapsack_dp(omega, sizes, layers, q, cap)
    if bits is None:
        min_size = sum(min(q) * sizes[lid] for lid in layers)
        raise InfeasibleBudgetError(
            f"layerwise_allocate: budget {budget}x needs <= {cap:.0f} bits but the smallest "
            f"assignment is {min_size} bits")
    return dict(zip(layers, bits))


def _branch_and_bound(omega, sizes, layers, q, cap):
    n = len(layers)
    min_bits = min(q)
    # suffix lower bounds for pruning
    suffix_min_size = [0] * (n + 1)
    suffix_min_obj = [0.0] * (n + 1)
    for i in range(n - 1, -1, -1):
        suffix_min_size[i] = suffix_min_size[i + 1] + min_bits * sizes[layers[i]]
        suffix_min_obj[i] = suffix_min_obj[i + 1] + min(omega[(layers[i], b)] for b in q)

    best: list = [None, None]  # key, assignment

    def dfs(i, obj, size, assign):
        if size + suffix_min_size[i] > cap:
            return
        if best[0] is not None and obj + suffix_min_obj[i] > best[0][0]:
            return
        if i == n:
            key = (obj, size, tuple(assign))
            if best[0] is None or key < best[0]:
                best[0] = key
                best[1] = tuple(assign)
            return
        lid = layers[i]
        for b in q:
            assign.append(b)
            dfs(i + 1, obj + omega[(lid, b)], size + b * sizes[lid], assign)
            assign.pop()

    dfs(0, 0.0, 0, [])
    return best[1]


def _knapsack_dp(omega, sizes, layers, q, cap):
    # discretize sizes so the DP table stays bounded; rounding item sizes UP
    # keeps every DP solution feasible for the true budget
    grain = max(1, int(sum(FP_BITS * s for s in sizes.values()) // 200000))
    cap_units = int(cap // grain)
    INF = float("inf")
    # state: units used -> (obj, assignment)
    table: dict[int, tuple[float, tuple]] = {0: (0.0, ())}
    for lid in layers:
        nxt: dict[int, tuple[float, tuple]] = {}
        for used, (obj, assign) in table.items():
            for b in q:
                u = used + -(-b * sizes[lid] // grain)  # ceil division
                if u > cap_units:
                    continue
                cand = (obj + omega[(lid, b)], assign + (b,))
                cur = nxt.get(u)
                if cur is None or cand[0] < cur[0]:
                    nxt[u] = cand
        table = nxt
        if not table:
            return None
    best = min(table.items(), key=lambda kv: (kv[1][0], kv[0], kv[1][1]))
    return best[1][1]
