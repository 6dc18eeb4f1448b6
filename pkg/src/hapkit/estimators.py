"""scikit-learn compatible wrappers around training and Hessian-aware pruning."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import Dataset
from .hessian import DEFAULT_EVAL_SIZE, all_group_traces, evaluation_batch
from .implant import apply_implant
from .models import ModelSpec, attention_classifier, build, cost, mlp, tiny_convnet
from .pruning import DEFAULT_PER_LAYER_LIMIT, head_prune_plan, rank, score_groups, select
from .training import TrainConfig, finetune, train


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class _NetworkPredictMixin:
    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"expected examples of shape {self.input_shape_}, got {X.shape[1:]}")
        return X

    def decision_function(self, X):
        X = self._check_X(X)
        return self.model_.output(X)

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class NetworkClassifier(_NetworkPredictMixin, ClassifierMixin, BaseEstimator):
    """Classifier trained with SGD + momentum and a step learning-rate schedule.

    ``architecture`` is ``"mlp"`` (uses ``hidden``), ``"tiny-convnet"``
    (inputs shaped (N, C, H, W)), ``"attention"`` (inputs (N, T, D)) or a
    :class:`ModelSpec`.
    """

    def __init__(
        self,
        architecture="mlp",
        hidden=(32,),
        epochs=60,
        lr=0.05,
        momentum=0.9,
        batch_size=64,
        weight_decay=4e-4,
        val_fraction=0.25,
        random_state=0,
    ):
        self.architecture = architecture
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            lr=self.lr,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            val_fraction=self.val_fraction,
        )

    def _spec(self, X, n_classes):
        arch = self.architecture
        if isinstance(arch, ModelSpec):
            return arch
        if arch == "mlp":
            if X.ndim != 2:
                raise ValueError("the mlp architecture needs 2-D input")
            return mlp([X.shape[1], *self.hidden, n_classes])
        if arch == "tiny-convnet":
            if X.ndim != 4 or X.shape[2] != X.shape[3]:
                raise ValueError("the tiny-convnet architecture needs square (N, C, H, W) input")
            return tiny_convnet(n_classes, size=X.shape[2], in_channels=X.shape[1])
        if arch == "attention":
            if X.ndim != 3:
                raise ValueError("the attention architecture needs (N, T, D) input")
            return attention_classifier(n_classes, seq_len=X.shape[1], d_model=X.shape[2])
        raise ValueError(f"unknown architecture {arch!r}")

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.input_shape_ = X.shape[1:]
        self.n_features_in_ = int(np.prod(self.input_shape_))
        model = build(self._spec(X, len(self.classes_)), self.random_state)
        data = Dataset(X, y_idx, len(self.classes_))
        self.model_, self.validation_score_ = train(model, data, self._train_config())
        return self


class HessianAwarePruner(_NetworkPredictMixin, ClassifierMixin, BaseEstimator):
    """Meta-estimator: fit ``estimator``, then prune it by Hessian-aware scores
    and fine-tune.

    ``budget`` is the fraction of ``budget_kind`` that remains; for attention
    models (``mode="heads"``) it is the fraction of heads kept.

    Attributes:
        baseline_: the fitted inner estimator.
        traces_: per-group trace estimates.
        plan_: the :class:`~hapkit.pruning.PrunePlan` applied.
        model_: the pruned, fine-tuned model.
    """

    def __init__(
        self,
        estimator=None,
        ordering="hap",
        budget=0.5,
        budget_kind="channel_fraction",
        mode="channels",
        per_layer_limit=DEFAULT_PER_LAYER_LIMIT,
        implant_ratio=0.0,
        n_iters=300,
        eval_size=DEFAULT_EVAL_SIZE,
        finetune_epochs=20,
        finetune_lr=0.02,
        random_state=0,
    ):
        self.estimator = estimator
        self.ordering = ordering
        self.budget = budget
        self.budget_kind = budget_kind
        self.mode = mode
        self.per_layer_limit = per_layer_limit
        self.implant_ratio = implant_ratio
        self.n_iters = n_iters
        self.eval_size = eval_size
        self.finetune_epochs = finetune_epochs
        self.finetune_lr = finetune_lr
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        base = clone(self.estimator) if self.estimator is not None else NetworkClassifier()
        self.baseline_ = base.fit(X, y)
        self.classes_ = base.classes_
        self.input_shape_ = base.input_shape_
        self.n_features_in_ = base.n_features_in_
        model = base.model_
        y_idx = np.searchsorted(self.classes_, y)
        data = Dataset(X, y_idx, len(self.classes_))
        train_set, _ = data.split(base.val_fraction, base.random_state)
        batch = evaluation_batch(train_set.X, train_set.targets, self.eval_size, self.random_state)
        self.traces_ = all_group_traces(model, batch, self.n_iters, self.random_state, record_series=False)
        if self.mode == "heads":
            plan = head_prune_plan(model, self.traces_, self.budget, self.ordering, self.random_state)
        else:
            records = score_groups(model, self.traces_)
            plan = select(
                model,
                rank(records, self.ordering, self.random_state),
                self.budget,
                self.budget_kind,
                self.per_layer_limit,
                self.implant_ratio,
                records=records,
                ordering=self.ordering,
            )
        self.plan_ = plan
        pruned = apply_implant(model, plan)
        if plan.decisions:
            cfg = base._train_config().replace(epochs=self.finetune_epochs, lr=self.finetune_lr)
            pruned, _ = finetune(pruned, data, cfg)
        self.model_ = pruned
        c0, c1 = cost(model), cost(pruned)
        self.params_fraction_ = c1.total_params / c0.total_params
        self.flops_fraction_ = c1.total_flops / c0.total_flops
        return self
