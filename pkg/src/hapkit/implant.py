"""Neural implants: 3x3 channels swapped for 1x1 pointwise channels.

An implanted channel keeps its output position and bias; its 3x3 filter is
replaced by a 1x1 filter with one ninth of the weights.  The default
initialisation copies the filter's center tap; ``init="dc"`` uses the kernel
sum instead, which reproduces the original response exactly on spatially
constant input away from the border.
"""

import math

import numpy as np

from .errors import InfeasiblePlanError, PlanError
from .models import IMPLANT, Conv3x3, HybridConv, restructure
from .pruning import make_plan, rank


def _check_implants(model, decisions):
    groups = {g.group_id: g for g in model.groups}
    for gid, d in decisions.items():
        if d != IMPLANT:
            continue
        if gid not in groups:
            raise PlanError(f"plan references unknown group {gid}")
        g = groups[gid]
        layer = model.spec.layers[g.layer]
        spatial = isinstance(layer, Conv3x3) or (
            isinstance(layer, HybridConv) and not layer.implant_mask[g.index]
        )
        if not spatial:
            raise PlanError(
                f"group {gid} lives in a {layer.tag} layer; implants need a 3x3 conv channel"
            )


def apply_implant(model, plan, init="center"):
    """Remove pruned groups and convert implant groups to 1x1 channels."""
    decisions = plan if isinstance(plan, dict) else plan.decisions
    _check_implants(model, decisions)
    return restructure(model, decisions, implant_init=init)


def lowrank_plan(model, fraction, ordering="random", records=None, seed=0):
    """Implant-only plan over every prunable 3x3 conv layer.

    Each such layer implants ``ceil(fraction * c_out)`` channels (at least
    one), chosen by ``ordering``; no channel is removed.  ``hap`` and
    ``reverse`` need sensitivity ``records``.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    by_layer = {}
    for g in model.prunable_groups:
        if isinstance(model.spec.layers[g.layer], Conv3x3):
            by_layer.setdefault(g.layer, []).append(g)
    if not by_layer:
        raise PlanError("model has no prunable 3x3 conv layer to implant")
    if records is None:
        if ordering != "random":
            raise ValueError(f"ordering {ordering!r} needs sensitivity records")
    else:
        records = {r.group_id: r for r in records}
    decisions = {}
    for layer, groups in sorted(by_layer.items()):
        n = min(len(groups), max(1, math.ceil(fraction * len(groups) - 1e-9)))
        if ordering == "random":
            perm = np.random.default_rng([seed, layer]).permutation(len(groups))
            chosen = [groups[i].group_id for i in perm[:n]]
        else:
            chosen = rank([records[g.group_id] for g in groups], ordering)[:n]
        decisions.update({gid: IMPLANT for gid in chosen})
    return make_plan(
        model,
        decisions,
        list(records.values()) if records else None,
        ordering=ordering,
        budget_kind="implant_fraction",
        budget=float(fraction),
        implant_ratio=1.0,
    )


def lowrank_plan_at_budget(model, param_budget, ordering="random", records=None, seed=0):
    """Smallest-fraction :func:`lowrank_plan` whose parameter fraction is at
    most ``param_budget``.

    Raises:
        InfeasiblePlanError: even implanting every channel stays above budget.
    """
    widths = {
        model.spec.layers[g.layer].c_out
        for g in model.prunable_groups
        if isinstance(model.spec.layers[g.layer], Conv3x3)
    }
    candidates = sorted({k / c for c in widths for k in range(1, c + 1)})
    for fraction in candidates:
        plan = lowrank_plan(model, fraction, ordering, records, seed)
        if plan.param_fraction <= param_budget:
            return plan
    raise InfeasiblePlanError(
        f"implanting every 3x3 channel leaves {plan.param_fraction:.4f} of the parameters, "
        f"above {param_budget}", "implant_only"
    )


def lowrank_baseline(model, fraction, ordering="random", records=None, seed=0, init="center"):
    """Implant a fixed fraction of every 3x3 layer's channels, ignoring where
    the Hessian says sensitivity lies (``random``), or against it
    (``reverse``: most sensitive channels first)."""
    return apply_implant(model, lowrank_plan(model, fraction, ordering, records, seed), init)
