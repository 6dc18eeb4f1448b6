"""Hutchinson estimates of per-group Hessian block traces.

For a probe ``v`` with i.i.d. +/-1 entries on one group's parameters and zeros
elsewhere, ``E[v^T H v]`` is the trace of that group's diagonal Hessian block.
Every group draws its own probe stream, seeded by ``(seed, group_id, iter)``,
so estimates do not depend on evaluation order or scheduling.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteError

DEFAULT_ITERS = 300
DEFAULT_EVAL_SIZE = 512


@dataclass(frozen=True, eq=False)
class TraceEstimate:
    """Estimated ``Trace(H_pp)`` for one group.

    ``variance`` is the sample variance of the individual quadratic forms
    (zero for a single sample); ``series`` holds the running mean after each
    iteration when it was recorded.
    """

    group_id: int
    mean: float
    n_samples: int
    variance: float
    series: np.ndarray = None

    @property
    def std_error(self):
        return float(np.sqrt(self.variance / self.n_samples))


def evaluation_batch(X, targets, size=DEFAULT_EVAL_SIZE, seed=0):
    """Fixed evaluation subset reused for every probe (all of ``X`` if smaller)."""
    X, targets = np.asarray(X), np.asarray(targets)
    if len(X) <= size:
        return X, targets
    idx = np.sort(np.random.default_rng(seed).permutation(len(X))[:size])
    return X[idx], targets[idx]


def _resolve(batch):
    return batch() if callable(batch) else batch


def rademacher_probe(group, shapes, seed, iteration):
    """Full-parameter-shaped probe: +/-1 on the group's members, 0 elsewhere."""
    rng = np.random.default_rng([int(seed), int(group.group_id), int(iteration)])
    probe = [np.zeros(s) for s in shapes]
    for k, ix in group.members:
        flat = probe[k].reshape(-1)
        flat[ix] = rng.integers(0, 2, size=len(ix)) * 2.0 - 1.0
    return probe


def _estimate(tape, shapes, group, n_iters, seed, record_series):
    # Welford updates: exact when every sample is identical, stable otherwise
    running = np.empty(n_iters) if record_series else None
    mean = m2 = 0.0
    for i in range(n_iters):
        q = ad.quadratic_form(tape, rademacher_probe(group, shapes, seed, i))
        if not np.isfinite(q):
            raise NonFiniteError(f"non-finite quadratic form for group {group.group_id} at iteration {i}")
        delta = q - mean
        mean += delta / (i + 1)
        m2 += delta * (q - mean)
        if record_series:
            running[i] = mean
    variance = m2 / (n_iters - 1) if n_iters > 1 else 0.0
    return TraceEstimate(group.group_id, float(mean), n_iters, float(variance), running)


def _tape(model, batch):
    X, targets = _resolve(batch)
    return ad.forward(model.loss_fn, model.params, (X, targets))[1]


def group_trace(model, batch, group, n_iters=DEFAULT_ITERS, seed=0, record_series=True):
    """Hutchinson estimate of one group's block trace on a fixed batch."""
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    shapes = [p.shape for p in model.params]
    return _estimate(_tape(model, batch), shapes, group, n_iters, seed, record_series)


def all_group_traces(
    model, batch, n_iters=DEFAULT_ITERS, seed=0, groups=None, record_series=True, n_jobs=1
):
    """One :class:`TraceEstimate` per group (default: every prunable group).

    The loss tape and its gradient graph are built once and shared; ``n_jobs``
    threads may evaluate groups concurrently with identical results.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    groups = model.prunable_groups if groups is None else tuple(groups)
    tape = _tape(model, batch)
    shapes = [p.shape for p in model.params]

    def run(g):
        return _estimate(tape, shapes, g, n_iters, seed, record_series)

    if n_jobs > 1:
        tape.grad_graph()
        with ThreadPoolExecutor(n_jobs) as pool:
            return list(pool.map(run, groups))
    return [run(g) for g in groups]


def convergence_series(estimate):
    """``[(iter, partial_mean), ...]`` with 1-based iteration index."""
    if estimate.series is None:
        raise ValueError(f"group {estimate.group_id}: no convergence series was recorded")
    return [(i + 1, float(m)) for i, m in enumerate(estimate.series)]


def write_convergence_csv(estimate, path):
    rows = convergence_series(estimate)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "partial_mean"])
        for it, m in rows:
            w.writerow([it, repr(m)])
