import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hapkit.datasets import gaussian_blobs, tiny_shapes
from hapkit.estimators import HessianAwarePruner, NetworkClassifier


def test_params_and_clone():
    clf = NetworkClassifier(hidden=(8,), epochs=3, random_state=4)
    assert clf.get_params()["hidden"] == (8,)
    twin = clone(clf)
    assert twin.get_params() == clf.get_params() and twin is not clf
    pruner = HessianAwarePruner(clf, budget=0.4)
    assert pruner.get_params()["estimator__epochs"] == 3
    assert clone(pruner).get_params()["budget"] == 0.4


def test_fit_predict_with_string_labels():
    ds = gaussian_blobs(n=240, n_classes=3, spread=0.4, seed=0)
    labels = np.array(["a", "b", "c"])[ds.y]
    clf = NetworkClassifier(hidden=(12,), epochs=25, random_state=0).fit(ds.X, labels)
    assert set(clf.classes_) == {"a", "b", "c"}
    assert clf.score(ds.X, labels) >= 0.97
    proba = clf.predict_proba(ds.X[:5])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert clf.n_features_in_ == 2


def test_unfitted_and_bad_input():
    clf = NetworkClassifier()
    with pytest.raises(NotFittedError):
        clf.predict(np.zeros((2, 2)))
    ds = gaussian_blobs(n=60, seed=0)
    clf = NetworkClassifier(hidden=(4,), epochs=1).fit(ds.X, ds.y)
    with pytest.raises(ValueError):
        clf.predict(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        NetworkClassifier(architecture="transformer").fit(ds.X, ds.y)
    with pytest.raises(ValueError):
        NetworkClassifier().fit(ds.X, np.zeros(len(ds.X)))


def test_pruner_on_convnet():
    ds = tiny_shapes(n=300, seed=0)
    base = NetworkClassifier("tiny-convnet", epochs=3, random_state=0)
    pruner = HessianAwarePruner(base, budget=0.6, n_iters=5, eval_size=64, finetune_epochs=2).fit(ds.X, ds.y)
    assert pruner.params_fraction_ < 1.0
    assert len(pruner.plan_.pruned) > 0
    assert len(pruner.traces_) == len(pruner.baseline_.model_.prunable_groups)
    assert pruner.predict(ds.X[:4]).shape == (4,)
    assert 0.0 <= pruner.score(ds.X, ds.y) <= 1.0


def test_pruner_heads_mode():
    from hapkit.datasets import token_pairs

    ds = token_pairs(n=200, seed=0)
    base = NetworkClassifier("attention", epochs=2, random_state=0)
    pruner = HessianAwarePruner(base, mode="heads", budget=0.5, n_iters=4, eval_size=32, finetune_epochs=1)
    pruner.fit(ds.X, ds.y)
    assert len(pruner.plan_.pruned) == 4
