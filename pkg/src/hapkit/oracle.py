"""Exact small-scale ground truth for the second-order machinery.

Everything here materialises the full Hessian (one HVP per basis vector), so it
is limited to a few thousand parameters.  The closed forms are those of
optimal-brain-surgeon style pruning: removing the weights ``w_p`` and letting
the remaining ``w_l`` compensate optimally gives::

    delta_w_l = H_ll^{-1} H_lp w_p
    delta_L   = 1/2 w_p^T (H_pp - H_pl H_ll^{-1} H_lp) w_p
"""

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np
from scipy.linalg import cho_solve

from . import autodiff as ad
from .errors import CapacityError, SingularMatrixError
from .models import ModelInstance

DEFAULT_CAP = 2000
PIVOT_FLOOR = 1e-10
MAX_COMBINATIONS = 5000


@dataclass(frozen=True, eq=False)
class DenseHessian:
    """Symmetrised Hessian of the loss at the current parameters.

    ``asymmetry`` is ``max|H - H^T|`` of the raw column-by-column matrix.
    """

    matrix: np.ndarray
    asymmetry: float

    @property
    def n(self):
        return self.matrix.shape[0]

    def block(self, indices):
        indices = np.asarray(indices)
        return self.matrix[np.ix_(indices, indices)]

    def block_trace(self, indices):
        return float(np.trace(self.block(indices)))


def exact_hessian(model, batch, params=None, cap=DEFAULT_CAP):
    """Dense Hessian whose i-th column is ``hvp(e_i)``.

    ``model`` is a :class:`ModelInstance` or a graph builder (then ``params``
    is required).
    """
    if isinstance(model, ModelInstance):
        fn, params = model.loss_fn, model.params
    else:
        fn = model
    shapes = [np.shape(p) for p in params]
    sizes = [int(np.prod(s)) for s in shapes]
    n = sum(sizes)
    if n > cap:
        raise CapacityError(f"{n} parameters exceeds the dense Hessian cap of {cap}")
    _, tape = ad.forward(fn, params, batch)
    offsets = np.cumsum([0] + sizes)
    cols = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        v = [e[a:b].reshape(s) for a, b, s in zip(offsets[:-1], offsets[1:], shapes)]
        cols[:, i] = np.concatenate([h.ravel() for h in ad.hvp(tape, v)])
    asym = float(np.abs(cols - cols.T).max()) if n else 0.0
    return DenseHessian((cols + cols.T) / 2, asym)


def _matrix(H):
    return H.matrix if isinstance(H, DenseHessian) else np.asarray(H, dtype=np.float64)


def _split(n, prune_set):
    p = np.array(sorted(set(int(i) for i in prune_set)), dtype=np.intp)
    mask = np.ones(n, dtype=bool)
    mask[p] = False
    return p, np.flatnonzero(mask)


def _spd_factor(A):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("H_ll is not positive definite") from exc
    pivots = np.diag(L) ** 2
    if pivots.size and pivots.min() < PIVOT_FLOOR:
        raise SingularMatrixError(f"H_ll pivot {pivots.min():.3e} below floor {PIVOT_FLOOR}")
    return L


def obs_perturbation(H, w, prune_set):
    """Loss increase and optimal compensation for removing ``prune_set``.

    Returns:
        (delta_L, delta_w_l) where ``delta_w_l`` is indexed like the sorted
        complement of ``prune_set``.
    """
    H = _matrix(H)
    w = np.asarray(w, dtype=np.float64).ravel()
    p, l = _split(len(w), prune_set)
    wp = w[p]
    # same summation as obd_perturbation, so a diagonal H reproduces it bit for bit
    quad = float(np.sum(wp * (H[np.ix_(p, p)] @ wp)))
    if len(l) == 0:
        return 0.5 * quad, np.zeros(0)
    L = _spd_factor(H[np.ix_(l, l)])
    delta_w_l = cho_solve((L, True), H[np.ix_(l, p)] @ wp)
    delta_L = 0.5 * (quad - float(np.sum(wp * (H[np.ix_(p, l)] @ delta_w_l))))
    return delta_L, delta_w_l


def obs_delta_w(w, prune_set, delta_w_l):
    """Full perturbation vector: ``-w_p`` on the pruned set, ``delta_w_l`` elsewhere."""
    w = np.asarray(w, dtype=np.float64).ravel()
    p, l = _split(len(w), prune_set)
    dw = np.zeros_like(w)
    dw[p] = -w[p]
    dw[l] = delta_w_l
    return dw


def obd_perturbation(H, w, prune_set):
    """Diagonal approximation ``1/2 w_p^T Diag(H_pp) w_p``."""
    H = _matrix(H)
    w = np.asarray(w, dtype=np.float64).ravel()
    p, _ = _split(len(w), prune_set)
    wp = w[p]
    return 0.5 * float(np.sum(wp * (np.diag(H)[p] * wp)))


def block_traces(H, groups):
    H = _matrix(H)
    return [float(np.trace(H[np.ix_(g, g)])) for g in groups]


def hap_score_exact(H, w, groups):
    """``Trace(H_pp) / (2p) * ||w_p||^2`` for each group of flat indices."""
    w = np.asarray(w, dtype=np.float64).ravel()
    out = []
    for g, tr in zip(groups, block_traces(H, groups)):
        g = np.asarray(g)
        out.append(tr / (2 * len(g)) * float(w[g] @ w[g]))
    return out


def group_indices(model, groups=None):
    """Flat parameter indices of each group (default: prunable groups)."""
    groups = model.prunable_groups if groups is None else groups
    offsets = model.offsets
    return [g.flat_indices(offsets) for g in groups]


def _zeroed(model, groups):
    flat = model.flat_params()
    for idx in group_indices(model, groups):
        flat[idx] = 0.0
    return model.with_params(model.unflatten(flat))


def removal_loss_increase(model, batch, groups):
    """True loss change from zeroing every group in ``groups`` at once."""
    X, targets = batch
    return _zeroed(model, groups).loss(X, targets) - model.loss(X, targets)


def single_group_loss_increase(model, batch, groups=None):
    """``{group_id: delta_L}`` for removing each group on its own."""
    groups = model.prunable_groups if groups is None else groups
    X, targets = batch
    base = model.loss(X, targets)
    return {g.group_id: _zeroed(model, [g]).loss(X, targets) - base for g in groups}


def brute_force_best_groups(model, batch, k, groups=None, max_combinations=MAX_COMBINATIONS):
    """The ``k``-group set whose removal raises the true loss the least.

    Returns:
        (group_ids, delta_L) for the best set.
    """
    groups = list(model.prunable_groups if groups is None else groups)
    if not 1 <= k <= len(groups):
        raise ValueError(f"k must be in [1, {len(groups)}], got {k}")
    n_sets = comb(len(groups), k)
    if n_sets > max_combinations:
        raise CapacityError(f"{n_sets} candidate sets exceeds the enumeration cap of {max_combinations}")
    X, targets = batch
    base = model.loss(X, targets)
    best = None
    for subset in itertools.combinations(groups, k):
        delta = _zeroed(model, subset).loss(X, targets) - base
        if best is None or delta < best[1]:
            best = (tuple(g.group_id for g in subset), delta)
    return best
