"""Random-forest ranking of pattern columns by how well they predict reward."""

from __future__ import annotations

import csv
import warnings

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.ensemble import RandomForestRegressor
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .env import BUY, ExitRule, exit_scan
from .miner import materialize


def buy_labels(episode, exit_rule):
    """Reward a buy at each row would earn; 0 on the last row."""
    close = episode.raw_close
    return np.array([exit_scan(close, t, BUY, exit_rule)[1] for t in range(len(close))])


def build_dataset(episodes, patterns, exit_rule=None):
    """Stack pattern columns and counterfactual buy rewards over all rows."""
    if not patterns:
        raise ValueError("build_dataset: no patterns, feature vectors would be empty")
    rule = exit_rule or ExitRule()
    X = [materialize(patterns, ep) for ep in episodes]
    y = [buy_labels(ep, rule) for ep in episodes]
    if not X:
        return np.zeros((0, len(patterns))), np.zeros(0)
    return np.vstack(X), np.concatenate(y)


def rank_and_select(importances, k):
    """Indices of the ``k`` largest importances, ties broken by lower index."""
    importances = np.asarray(importances, dtype=np.float64)
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > len(importances):
        warnings.warn(f"k={k} exceeds {len(importances)} features; returning all", stacklevel=2)
    order = np.argsort(-importances, kind="stable")
    return order[:k]


class PatternRanker(RegressorMixin, BaseEstimator):
    """Random-forest regressor exposing normalized impurity importances.

    ``feature_subsample`` is passed to the forest as ``max_features``.
    """

    def __init__(self, n_trees=200, max_depth=8, min_leaf=20, feature_subsample="sqrt",
                 bootstrap=True, k=10, random_state=None, n_jobs=None):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.feature_subsample = feature_subsample
        self.bootstrap = bootstrap
        self.k = k
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if len(X) < 2:
            raise ValueError("need at least 2 rows")
        self.forest_ = RandomForestRegressor(
            n_estimators=self.n_trees,
            max_depth=self.max_depth,
            min_samples_leaf=self.min_leaf,
            max_features=self.feature_subsample,
            bootstrap=self.bootstrap,
            random_state=self.random_state,
            n_jobs=self.n_jobs,
        ).fit(X, y)
        imp = self.forest_.feature_importances_
        total = imp.sum()
        self.feature_importances_ = imp / total if total > 0 else np.zeros_like(imp)
        self.ranking_ = rank_and_select(self.feature_importances_, X.shape[1])
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "forest_")
        return self.forest_.predict(check_array(X, dtype=np.float64))

    def selected(self, k=None):
        check_is_fitted(self, "feature_importances_")
        return rank_and_select(self.feature_importances_, self.k if k is None else k)

    def transform(self, X):
        return check_array(X, dtype=np.float64)[:, self.selected()]


def write_importance_report(path, names, importances):
    order = rank_and_select(importances, len(importances))
    rank = np.empty(len(order), dtype=int)
    rank[order] = np.arange(1, len(order) + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "score", "rank"])
        for i in order:
            w.writerow([names[i], repr(float(importances[i])), int(rank[i])])


def read_importance_report(path):
    with open(path, newline="") as fh:
        return [(r["feature"], float(r["score"]), int(r["rank"])) for r in csv.DictReader(fh)]
