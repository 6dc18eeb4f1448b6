"""Sensitivity scoring, group orderings and budgeted prune plans.

A group's sensitivity is the trace of its diagonal Hessian block, spread
evenly over its ``p`` weights and weighed by their squared norm::

    score = Trace(H_pp) / (2 p) * ||w_p||^2

Groups are pruned least-sensitive first until a parameter, FLOP or channel
budget is met.  A fraction of the pruned 3x3 channels (those with the highest
scores) are then kept as 1x1 implants instead, and pruning extends further if
the implants push the cost back over budget.
"""

import math
import re
from dataclasses import dataclass, field
from math import prod

import numpy as np

from .errors import InfeasiblePlanError, MissingTraceError, PlanError
from .models import (
    HEAD,
    IMPLANT,
    KEEP,
    PRUNE,
    AttentionBlock,
    Conv1x1,
    Conv3x3,
    Dense,
    HybridConv,
    infer_shapes,
)

ORDERINGS = ("hap", "reverse", "random", "magnitude")
BUDGET_KINDS = ("param_fraction", "flop_fraction", "channel_fraction")
DEFAULT_PER_LAYER_LIMIT = 0.75
MAX_IMPLANT_ROUNDS = 100
_EPS = 1e-12


@dataclass(frozen=True)
class SensitivityRecord:
    group_id: int
    layer: int
    index: int
    kind: str
    p: int
    trace: float
    weight_sq_norm: float
    score: float
    raw_trace: float

    @property
    def magnitude(self):
        return self.weight_sq_norm / self.p


def _trace_value(t):
    return float(t.mean) if hasattr(t, "mean") else float(t)


def score_groups(model, traces, groups=None):
    """Sensitivity record for every group in ``groups`` (default: prunable ones).

    ``traces`` is a sequence of trace estimates (anything with ``group_id`` and
    ``mean``) or a mapping ``group_id -> trace``.  Negative traces are clamped
    to zero before scoring; the raw value is kept in ``raw_trace``.
    """
    if isinstance(traces, dict):
        by_id = {int(k): _trace_value(v) for k, v in traces.items()}
    else:
        by_id = {t.group_id: _trace_value(t) for t in traces}
    groups = model.prunable_groups if groups is None else groups
    out = []
    for g in groups:
        if g.group_id not in by_id:
            raise MissingTraceError(f"no trace estimate for group {g.group_id}")
        raw = by_id[g.group_id]
        trace = max(raw, 0.0)
        wsq = g.sq_norm(model.params)
        out.append(
            SensitivityRecord(g.group_id, g.layer, g.index, g.kind, g.p, trace, wsq, trace * wsq / (2 * g.p), raw)
        )
    return out


def rank(records, ordering="hap", seed=0):
    """Group ids in ascending prune priority (first = pruned first).

    Ties are broken by (layer, group index).
    """
    if not records:
        raise ValueError("no records to rank")
    if ordering == "hap":
        key = lambda r: (r.score, r.layer, r.index)  # noqa: E731
    elif ordering == "reverse":
        key = lambda r: (-r.score, r.layer, r.index)  # noqa: E731
    elif ordering == "magnitude":
        key = lambda r: (r.magnitude, r.layer, r.index)  # noqa: E731
    elif ordering == "random":
        base = sorted(records, key=lambda r: (r.layer, r.index))
        perm = np.random.default_rng(seed).permutation(len(base))
        return [base[i].group_id for i in perm]
    else:
        raise ValueError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    return [r.group_id for r in sorted(records, key=key)]


# -- closed-form accounting -------------------------------------------------


def plan_cost(model, decisions, input_shape=None):
    """(params, MACs) of the model the decisions would produce.

    Computed from per-layer unit counts alone, without building the model.
    """
    spec = model.spec
    shape = tuple(input_shape) if input_shape is not None else spec.example_shape
    in_shapes = [shape] + infer_shapes(spec, shape)[:-1]
    counts = {}
    groups = {g.group_id: g for g in model.groups}
    for gid, d in decisions.items():
        if d == KEEP:
            continue
        g = groups[gid]
        counts.setdefault(g.layer, {}).setdefault(d, set()).add(g.index)
    params = flops = 0
    width = None  # surviving channels/features of the previous parametric layer
    for li, layer in enumerate(spec.layers):
        pruned = counts.get(li, {}).get(PRUNE, set())
        implanted = counts.get(li, {}).get(IMPLANT, set())
        s = in_shapes[li]
        if isinstance(layer, Dense):
            n_in = layer.in_features if width is None else width * (prod(s[1:]) if len(s) == 3 else 1)
            n_out = layer.out_features - len(pruned)
            params += n_in * n_out + n_out
            flops += n_in * n_out
            width = n_out
        elif isinstance(layer, (Conv3x3, Conv1x1, HybridConv)):
            c_in = layer.c_in if width is None else width
            hw = s[1] * s[2]
            if isinstance(layer, Conv1x1):
                mask = (True,) * layer.c_out
            elif isinstance(layer, HybridConv):
                mask = layer.implant_mask
            else:
                mask = (False,) * layer.c_out
            n3 = sum(1 for j, m in enumerate(mask) if not m and j not in pruned and j not in implanted)
            n1 = sum(1 for j, m in enumerate(mask) if (m and j not in pruned) or j in implanted)
            params += (9 * n3 + n1) * c_in + n3 + n1
            flops += (9 * n3 + n1) * c_in * hw
            width = n3 + n1
        elif isinstance(layer, AttentionBlock):
            t = s[0]
            heads = layer.n_heads - len(pruned)
            inner = heads * layer.head_dim
            params += 4 * layer.d_model * inner
            flops += 4 * t * layer.d_model * inner + 2 * heads * t * t * layer.head_dim
            width = None
    return int(params), int(flops)


# -- plans -----------------------------------------------------------------


@dataclass(eq=False)
class PrunePlan:
    """Per-group decisions plus the accounting they imply.

    ``decisions`` maps group id to ``keep``/``prune``/``implant``; groups not
    listed are kept.
    """

    decisions: dict
    ordering: str = "hap"
    budget_kind: str = "param_fraction"
    budget: float = 1.0
    per_layer_limit: float = DEFAULT_PER_LAYER_LIMIT
    implant_ratio: float = 0.0
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0
    rows: list = field(default_factory=list)  # (layer, index, group_id, kind, p, score, decision)

    @property
    def pruned(self):
        return sorted(g for g, d in self.decisions.items() if d == PRUNE)

    @property
    def implanted(self):
        return sorted(g for g, d in self.decisions.items() if d == IMPLANT)

    @property
    def param_fraction(self):
        return self.params_after / self.params_before

    @property
    def flop_fraction(self):
        return self.flops_after / self.flops_before

    def per_layer_counts(self):
        """``{layer: (n_units, n_pruned, n_implanted)}`` over reported rows."""
        out = {}
        for layer, _, _, _, _, _, d in self.rows:
            n, pr, im = out.get(layer, (0, 0, 0))
            out[layer] = (n + 1, pr + (d == PRUNE), im + (d == IMPLANT))
        return out

    def to_report(self):
        lines = [
            "# hapkit prune plan v1",
            f"ordering = {self.ordering}",
            f"budget = {self.budget_kind} {self.budget!r}",
            f"per_layer_limit = {self.per_layer_limit!r}",
            f"implant_ratio = {self.implant_ratio!r}",
            "layer,group,group_id,kind,p,score,decision",
        ]
        for layer, index, gid, kind, p, score, d in self.rows:
            s = "" if score is None else repr(float(score))
            lines.append(f"{layer},{index},{gid},{kind},{p},{s},{d}")
        lines += [
            f"params = {self.params_before} -> {self.params_after} ({100 * self.param_fraction:.3f}%)",
            f"flops = {self.flops_before} -> {self.flops_after} ({100 * self.flop_fraction:.3f}%)",
            f"pruned = {len(self.pruned)}",
            f"implanted = {len(self.implanted)}",
        ]
        for layer, (n, pr, im) in sorted(self.per_layer_counts().items()):
            lines.append(f"layer {layer} = {n} units, {pr} pruned, {im} implanted")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_report(cls, text):
        meta, rows = {}, []
        row_re = re.compile(r"^(\d+),(\d+),(\d+),(\w+),(\d+),([^,]*),(keep|prune|implant)$")
        for line in text.splitlines():
            m = row_re.match(line)
            if m:
                layer, index, gid, kind, p, score, d = m.groups()
                rows.append((int(layer), int(index), int(gid), kind, int(p), float(score) if score else None, d))
            elif " = " in line and not line.startswith("#"):
                k, v = line.split(" = ", 1)
                meta[k] = v
        try:
            kind, value = meta["budget"].split()
            params = re.match(r"(\d+) -> (\d+)", meta["params"]).groups()
            flops = re.match(r"(\d+) -> (\d+)", meta["flops"]).groups()
            return cls(
                {r[2]: r[6] for r in rows if r[6] != KEEP},
                meta["ordering"],
                kind,
                float(value),
                float(meta["per_layer_limit"]),
                float(meta["implant_ratio"]),
                int(params[0]),
                int(params[1]),
                int(flops[0]),
                int(flops[1]),
                rows,
            )
        except (KeyError, AttributeError, ValueError) as exc:
            raise PlanError(f"malformed plan report: {exc}") from exc


def make_plan(model, decisions, records=None, input_shape=None, **meta):
    """Wrap decisions in a :class:`PrunePlan` with closed-form accounting."""
    decisions = {int(g): d for g, d in decisions.items() if d != KEEP}
    scores = {r.group_id: r.score for r in records} if records else {}
    p0, f0 = plan_cost(model, {}, input_shape)
    p1, f1 = plan_cost(model, decisions, input_shape)
    rows = [
        (g.layer, g.index, g.group_id, g.kind, g.p, scores.get(g.group_id), decisions.get(g.group_id, KEEP))
        for g in model.groups
        if g.prunable
    ]
    return PrunePlan(decisions, params_before=p0, params_after=p1, flops_before=f0, flops_after=f1, rows=rows, **meta)


def _is_spatial_channel(model, group):
    layer = model.spec.layers[group.layer]
    if isinstance(layer, Conv3x3):
        return True
    return isinstance(layer, HybridConv) and not layer.implant_mask[group.index]


def select(
    model,
    ranked,
    budget,
    budget_kind="param_fraction",
    per_layer_limit=DEFAULT_PER_LAYER_LIMIT,
    implant_ratio=0.0,
    records=None,
    ordering="hap",
    input_shape=None,
):
    """Greedy budgeted plan over ``ranked`` group ids.

    ``budget`` is the fraction REMAINING (parameters, MACs, or prunable
    channels, per ``budget_kind``).  At most ``floor(per_layer_limit * n)``
    of a layer's ``n`` groups are pruned and at least one always survives.
    ``ceil(implant_ratio * k)`` of the ``k`` pruned 3x3 channels, those with
    the highest scores (or, without records, the last pruned), become
    implants.

    Raises:
        InfeasiblePlanError: the ranked list ran out before the budget was met.
    """
    if not 0 < budget <= 1:
        raise ValueError(f"budget must be in (0, 1], got {budget}")
    if not 0 <= implant_ratio < 1:
        raise ValueError(f"implant_ratio must be in [0, 1), got {implant_ratio}")
    if budget_kind not in BUDGET_KINDS:
        raise ValueError(f"unknown budget kind {budget_kind!r}; expected one of {BUDGET_KINDS}")
    groups = {g.group_id: g for g in model.groups}
    prunable = [g for g in model.groups if g.prunable]
    per_layer_n = {}
    for g in prunable:
        per_layer_n[g.layer] = per_layer_n.get(g.layer, 0) + 1
    limits = {
        layer: min(n - 1, math.floor(per_layer_limit * n + 1e-9)) for layer, n in per_layer_n.items()
    }
    scores = {r.group_id: r.score for r in records} if records else None
    position = {gid: i for i, gid in enumerate(ranked)}
    base = plan_cost(model, {}, input_shape)

    def remaining(decisions):
        if budget_kind == "channel_fraction":
            return 1.0 - sum(d == PRUNE for d in decisions.values()) / len(prunable)
        params, flops = plan_cost(model, decisions, input_shape)
        return params / base[0] if budget_kind == "param_fraction" else flops / base[1]

    def decide(pruned):
        spatial = [gid for gid in pruned if _is_spatial_channel(model, groups[gid])]
        n_imp = math.ceil(implant_ratio * len(spatial) - 1e-9) if implant_ratio > 0 else 0
        if scores is not None:
            spatial.sort(key=lambda gid: (-scores[gid], groups[gid].layer, groups[gid].index))
        else:
            spatial.sort(key=lambda gid: -position[gid])
        dec = {gid: PRUNE for gid in pruned}
        dec.update({gid: IMPLANT for gid in spatial[:n_imp]})
        return dec

    pruned, taken = [], {layer: 0 for layer in per_layer_n}
    hit_limit = hit_floor = False
    pos, rounds = 0, 0
    while True:
        decisions = decide(pruned)
        if remaining(decisions) <= budget + _EPS:
            break
        rounds += 1
        if rounds > MAX_IMPLANT_ROUNDS:
            raise InfeasiblePlanError(
                "implant re-extension did not reach the budget within "
                f"{MAX_IMPLANT_ROUNDS} rounds", "implant_rounds"
            )
        fixed_implants = {g for g, d in decisions.items() if d == IMPLANT}
        advanced = False
        while pos < len(ranked):
            gid = ranked[pos]
            pos += 1
            g = groups[gid]
            if not g.prunable:
                continue
            if taken[g.layer] + 1 > limits[g.layer]:
                if taken[g.layer] + 1 > math.floor(per_layer_limit * per_layer_n[g.layer] + 1e-9):
                    hit_limit = True
                else:
                    hit_floor = True
                continue
            pruned.append(gid)
            taken[g.layer] += 1
            advanced = True
            trial = {x: PRUNE for x in pruned}
            trial.update({x: IMPLANT for x in fixed_implants})
            if remaining(trial) <= budget + _EPS:
                break
        if not advanced:
            constraint = "per_layer_limit" if hit_limit else ("min_one_per_layer" if hit_floor else "ungrouped_parameters")
            raise InfeasiblePlanError(
                f"cannot reach {budget_kind} <= {budget}: best achievable is "
                f"{remaining(decisions):.4f} (binding constraint: {constraint})",
                constraint,
            )
    return make_plan(
        model,
        decisions,
        records,
        input_shape,
        ordering=ordering,
        budget_kind=budget_kind,
        budget=float(budget),
        per_layer_limit=float(per_layer_limit),
        implant_ratio=float(implant_ratio),
    )


def head_prune_plan(model, traces, keep_fraction, ordering="hap", seed=0):
    """Prune attention heads globally, lowest score first, keeping one per layer.

    ``traces`` may be ``None`` for the ``random`` ordering.
    """
    heads = [g for g in model.groups if g.kind == HEAD]
    if not heads:
        raise PlanError("model has no attention heads")
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    scored = traces is not None
    if not scored:
        if ordering != "random":
            raise ValueError(f"ordering {ordering!r} needs trace estimates")
        traces = {g.group_id: 0.0 for g in heads}
    records = score_groups(model, traces, heads)
    n_layers = len({g.layer for g in heads})
    n_prune = len(heads) - math.ceil(keep_fraction * len(heads) - 1e-9)
    if n_prune > len(heads) - n_layers:
        raise InfeasiblePlanError(
            f"keeping {keep_fraction:.0%} of {len(heads)} heads would leave a layer headless",
            "min_one_head_per_layer",
        )
    left = {}
    for g in heads:
        left[g.layer] = left.get(g.layer, 0) + 1
    layer_of = {g.group_id: g.layer for g in heads}
    decisions = {}
    for gid in rank(records, ordering, seed):
        if len(decisions) == n_prune:
            break
        if left[layer_of[gid]] == 1:
            continue
        decisions[gid] = PRUNE
        left[layer_of[gid]] -= 1
    return make_plan(
        model,
        decisions,
        records if scored else None,
        ordering=ordering,
        budget_kind="head_fraction",
        budget=float(keep_fraction),
        per_layer_limit=1.0,
    )
