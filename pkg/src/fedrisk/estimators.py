"""scikit-learn compatible classifiers built on the training primitives.

:class:`RiskClassifier` trains on one data set (a single site, or records
pooled centrally). :class:`FederatedRiskClassifier` trains across sites
with federated averaging. Both accept DP-SGD settings and expose the spent
privacy budget after fitting.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import metrics
from .fed import (
    FederationConfig,
    SiteArrays,
    dp_steps_per_epoch,
    effective_sampling_ratio,
    initial_params,
    local_update,
    run_federated,
    run_federated_dp,
)
from .models import ModelSpec, forward, logits
from .optim import AdamState, DpConfig
from .privacy import PrivacyLedger
from .validation import check_binary_features, check_binary_labels, check_binary_xy, check_groups


def _model_spec(kind, hidden_dim, n_features):
    return ModelSpec(kind, n_features, hidden_dim if kind == "mlp" else None)


class _ProbaMixin:
    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_binary_features(X)
        return logits(self.spec_, self.params_, X)

    def predict_proba(self, X):
        p1 = expit(self.decision_function(X))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


class RiskClassifier(_ProbaMixin, ClassifierMixin, BaseEstimator):
    """Logistic regression or one-hidden-layer network trained with Adam.

    Parameters
    ----------
    model : {"logistic", "mlp"}
    hidden_dim : int, optional
        Hidden units, used only when ``model="mlp"``.
    learning_rate, batch_size, max_epochs : training schedule.
    clip_norm, noise_multiplier : float, optional
        Setting both switches training to DP-SGD with Poisson batches.
    delta : float
        Target delta for the reported epsilon.
    early_stopping : bool
        Keep the epoch with the best validation AUC when validation data is
        passed to :meth:`fit`.
    random_state : int
    site_id : str
        Names the random streams; two estimators with the same site_id and
        random_state draw identical batches.
    """

    def __init__(self, model="logistic", hidden_dim=None, learning_rate=1e-2, batch_size=64,
                 max_epochs=10, clip_norm=None, noise_multiplier=None, delta=1e-5,
                 early_stopping=True, random_state=0, site_id="local"):
        self.model = model
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier
        self.delta = delta
        self.early_stopping = early_stopping
        self.random_state = random_state
        self.site_id = site_id

    def _dp_config(self):
        if self.clip_norm is None and self.noise_multiplier is None:
            return None
        if self.clip_norm is None or self.noise_multiplier is None:
            raise ValueError("DP training needs both clip_norm and noise_multiplier")
        return DpConfig(float(self.clip_norm), float(self.noise_multiplier), delta=self.delta)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_binary_xy(X, y)
        has_val = X_val is not None
        if has_val:
            X_val = check_binary_features(X_val, "X_val")
            y_val = check_binary_labels(y_val, "y_val")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.spec_ = _model_spec(self.model, self.hidden_dim, X.shape[1])
        dp = self._dp_config()
        params = initial_params(self.spec_, self.random_state)
        state = AdamState.fresh(params, self.learning_rate)
        ledger = None
        if dp is not None:
            q = effective_sampling_ratio(X.shape[0], self.batch_size, dp)
            ledger = PrivacyLedger(str(self.site_id), q, dp.noise_multiplier, dp.delta)
            self.sampling_ratio_ = q
            self.steps_per_epoch_ = dp_steps_per_epoch(X.shape[0], self.batch_size, dp)
        self.history_ = []
        best = (-np.inf, None, -1)
        steps = 0
        for epoch in range(self.max_epochs):
            res = local_update(
                X, y, self.spec_, params, epochs=1, lr=self.learning_rate,
                batch_size=self.batch_size, state=state, dp=dp, seed=self.random_state,
                site_id=str(self.site_id), start_epoch=epoch,
            )
            params, state = res.params, res.state
            steps += res.steps
            eps = ledger.record(res.steps) if ledger is not None else None
            val = None
            if has_val:
                val = metrics.auc(forward(self.spec_, params, X_val), y_val)
                if val > best[0]:
                    best = (val, params, epoch)
            self.history_.append({"epoch": epoch + 1, "train_loss": res.train_loss,
                                  "val_auc": val, "epsilon": eps, "steps": steps})
        self.final_params_ = params
        if has_val and self.early_stopping and best[1] is not None:
            self.best_val_auc_, self.params_, self.best_epoch_ = best[0], best[1], best[2] + 1
        else:
            self.params_ = params
            self.best_epoch_ = self.max_epochs
            self.best_val_auc_ = self.history_[-1]["val_auc"] if self.history_ else None
        self.steps_ = steps
        self.ledger_ = ledger
        self.epsilon_ = ledger.epsilon if ledger is not None else None
        return self


class FederatedRiskClassifier(_ProbaMixin, ClassifierMixin, BaseEstimator):
    """Federated averaging over the sites named by ``sites`` in :meth:`fit`.

    ``clip_norm`` may be a single float or a mapping from site id to that
    site's clipping threshold; with ``noise_multiplier`` set, every site runs
    DP-SGD locally and keeps its own privacy ledger.

    After fitting, :meth:`predict_proba` uses each site's early-stopped
    snapshot when ``sites`` is passed, and the final global model otherwise.
    """

    def __init__(self, model="logistic", hidden_dim=None, learning_rate=1e-2, batch_size=64,
                 rounds=10, local_epochs=1, averaging="uniform", clip_norm=None,
                 noise_multiplier=None, delta=1e-5, random_state=0, n_jobs=1):
        self.model = model
        self.hidden_dim = hidden_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.averaging = averaging
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier
        self.delta = delta
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _dp_configs(self, site_ids):
        if self.clip_norm is None and self.noise_multiplier is None:
            return None
        if self.clip_norm is None or self.noise_multiplier is None:
            raise ValueError("DP training needs both clip_norm and noise_multiplier")
        clip = self.clip_norm
        if not isinstance(clip, dict):
            clip = {s: clip for s in site_ids}
        missing = [s for s in site_ids if s not in clip]
        if missing:
            raise ValueError(f"no clip_norm given for sites {missing}")
        return {s: DpConfig(float(clip[s]), float(self.noise_multiplier), delta=self.delta)
                for s in site_ids}

    def fit(self, X, y, sites, X_val, y_val, sites_val):
        X, y = check_binary_xy(X, y)
        X_val = check_binary_features(X_val, "X_val")
        y_val = check_binary_labels(y_val, "y_val")
        sites = check_groups(sites, X.shape[0])
        sites_val = check_groups(sites_val, X_val.shape[0], "sites_val")
        site_ids = list(dict.fromkeys(sites))
        arrays = []
        for s in site_ids:
            tr, va = sites == s, sites_val == s
            arrays.append(SiteArrays(s, X[tr], y[tr], X_val[va], y_val[va]))
        return self.fit_sites(arrays)

    def fit_sites(self, arrays):
        """Fit from already-split :class:`SiteArrays`, one per site."""
        if not arrays:
            raise ValueError("federated fitting needs at least one site")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = arrays[0].X_train.shape[1]
        self.spec_ = _model_spec(self.model, self.hidden_dim, self.n_features_in_)
        site_ids = [a.site_id for a in arrays]
        dp = self._dp_configs(site_ids)
        config = FederationConfig(
            spec=self.spec_, rounds=self.rounds, local_epochs=self.local_epochs,
            lr=self.learning_rate, batch_size=self.batch_size, averaging=self.averaging,
            dp=dp, seed=self.random_state, n_jobs=self.n_jobs,
        )
        if dp is None:
            self.snapshots_, self.round_log_, self.params_ = run_federated(config, arrays)
            self.ledgers_ = None
        else:
            self.snapshots_, self.round_log_, self.ledgers_, self.params_ = run_federated_dp(config, arrays)
        self.site_ids_ = site_ids
        self.dp_configs_ = dp
        return self

    @property
    def mean_best_val_auc_(self) -> float:
        check_is_fitted(self, "snapshots_")
        return float(np.mean([s.best_auc for s in self.snapshots_.values()]))

    def site_predict_proba(self, site_id, X):
        """Positive-class probability from ``site_id``'s early-stopped snapshot."""
        check_is_fitted(self, "snapshots_")
        X = check_binary_features(X)
        return forward(self.spec_, self.snapshots_[str(site_id)].params, X)

    def predict_proba(self, X, sites=None):
        if sites is None:
            return super().predict_proba(X)
        X = check_binary_features(X)
        sites = check_groups(sites, X.shape[0])
        p1 = np.empty(X.shape[0])
        for s in np.unique(sites):
            mask = sites == s
            p1[mask] = self.site_predict_proba(s, X[mask])
        return np.column_stack([1.0 - p1, p1])
