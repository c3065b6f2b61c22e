"""scikit-learn compatible wrappers.

Inputs are the three modalities side by side, shape ``(n, 512 + 17 + 768)``
(``Cohort.X``). Every estimator carves its own fit/policy/validation splits
from the training rows, exactly as the command-line pipeline does.

>>> from adafuse.data import SCENARIOS, generate_scenario
>>> train, test = generate_scenario(SCENARIOS["nlst-like"], seed=0)   # doctest: +SKIP
>>> clf = AdaFuseClassifier(random_state=0).fit(train.X, train.y)     # doctest: +SKIP
>>> clf.predict_proba(test.X)[:, 1]                                   # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Cohort, split_modalities
from .experiments import predict_methods
from .models import COMBOS, MODALITIES, RAW_DIMS, combo_index
from .rl import (FreezeConfig, LossConfig, RewardConfig, TrainSchedule, greedy_predict,
                 pretrain_baselines, train_adafuse, train_dynmm, train_moe, training_splits)
from .policy import rollout_flops

N_FEATURES = sum(RAW_DIMS)


def _cohort(X: np.ndarray, y: np.ndarray | None = None) -> Cohort:
    parts = split_modalities(X)
    y = np.zeros(len(X), dtype=np.int64) if y is None else y
    return Cohort([f"r{i}" for i in range(len(X))], *parts, y)


def _available(spec: str) -> tuple[bool, bool, bool]:
    spec = spec.upper()
    if not spec or any(m not in MODALITIES for m in spec):
        raise ValueError(f"available must be a non-empty subset of 'ABC', got {spec!r}")
    return tuple(m in spec for m in MODALITIES)


class _Base(ClassifierMixin, BaseEstimator):
    """Shared schedule parameters, validation and the bank pretraining step."""

    def __init__(self, epochs=100, batch_size=32, patience=15, baseline_lr=1e-3,
                 weight_decay=1e-4, validation_fraction=0.2, policy_fraction=0.2,
                 random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.baseline_lr = baseline_lr
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.policy_fraction = policy_fraction
        self.random_state = random_state

    def _schedule(self) -> TrainSchedule:
        names = TrainSchedule.__dataclass_fields__
        kw = {k: v for k, v in self.get_params().items() if k in names}
        return TrainSchedule(seed=int(self.random_state), **kw)

    def _validate_fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != N_FEATURES:
            raise ValueError(f"expected {N_FEATURES} features, got {X.shape[1]}")
        self.classes_ = unique_labels(y)
        if not np.array_equal(self.classes_, [0, 1]):
            raise ValueError("labels must be binary 0/1 with both classes present")
        self.n_features_in_ = X.shape[1]
        return X, y.astype(np.int64)

    def _validate_predict(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def _fit_bank(self, cohort: Cohort, schedule: TrainSchedule):
        splits = training_splits(cohort, schedule)
        bank, _ = pretrain_baselines(splits.fit, splits.val, schedule)
        return bank, splits

    def _proba1(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, X) -> np.ndarray:
        p = self._proba1(self._validate_predict(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        positive = self.predict_proba(X)[:, 1] >= 0.5
        return self.classes_[positive.astype(int)]


class FusionBank(_Base):
    """The 15 fixed-fusion baselines; ``combo`` picks the one used for prediction."""

    def __init__(self, combo="ABC-concat", epochs=100, batch_size=32, patience=15,
                 baseline_lr=1e-3, weight_decay=1e-4, validation_fraction=0.2,
                 policy_fraction=0.2, random_state=0):
        super().__init__(epochs, batch_size, patience, baseline_lr, weight_decay,
                         validation_fraction, policy_fraction, random_state)
        self.combo = combo

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        combo_index(self.combo)
        self.bank_, _ = self._fit_bank(_cohort(X, y), self._schedule())
        return self

    def predict_combo(self, X, combo) -> np.ndarray:
        """Positive-class probability from any of the 15 classifiers."""
        X = self._validate_predict(X)
        hs = self.bank_.encode_all(split_modalities(X))
        return self.bank_.predict_encoded(combo_index(combo), hs)

    def _proba1(self, X):
        hs = self.bank_.encode_all(split_modalities(X))
        return self.bank_.predict_encoded(combo_index(self.combo), hs)


class AdaFuseClassifier(_Base):
    """Pretrained bank plus a learned per-record modality-selection policy."""

    def __init__(self, epochs=100, batch_size=32, patience=15, baseline_lr=1e-3,
                 weight_decay=1e-4, validation_fraction=0.2, policy_fraction=0.2,
                 random_state=0, policy_lr=3e-4, encoder_lr=1e-5, warmup_epochs=15,
                 tau_init=1.5, tau_final=0.3, w_bce=0.7, w_auc=0.3, lambda_ent=0.1,
                 lambda_sup=0.3, encoders="train", classifiers="freeze", available="ABC"):
        super().__init__(epochs, batch_size, patience, baseline_lr, weight_decay,
                         validation_fraction, policy_fraction, random_state)
        self.policy_lr = policy_lr
        self.encoder_lr = encoder_lr
        self.warmup_epochs = warmup_epochs
        self.tau_init = tau_init
        self.tau_final = tau_final
        self.w_bce = w_bce
        self.w_auc = w_auc
        self.lambda_ent = lambda_ent
        self.lambda_sup = lambda_sup
        self.encoders = encoders
        self.classifiers = classifiers
        self.available = available

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        schedule = self._schedule()
        avail = _available(self.available)
        bank, splits = self._fit_bank(_cohort(X, y), schedule)
        res = train_adafuse(splits.policy, splits.val, bank,
                            FreezeConfig(self.encoders, self.classifiers),
                            RewardConfig(self.w_bce, self.w_auc),
                            LossConfig(self.lambda_ent, self.lambda_sup), schedule, avail)
        self.network_ = res.net
        self.training_log_ = res.log
        self.best_epoch_ = res.best_epoch
        self.best_val_auc_ = res.best_val_auc
        self.available_ = avail
        return self

    def decide(self, X):
        """Greedy decisions: ``(probabilities, combo names, per-record FLOPs)``."""
        X = self._validate_predict(X)
        p, ro = greedy_predict(self.network_, _cohort(X), self.available_)
        return p, [COMBOS[k].name for k in ro.combos], rollout_flops(self.network_, ro)

    def _proba1(self, X):
        return greedy_predict(self.network_, _cohort(X), self.available_)[0]


class _GateClassifier(_Base):
    available = "ABC"
    _method = ""

    def fit(self, X, y):
        X, y = self._validate_fit(X, y)
        schedule = self._schedule()
        self.bank_, splits = self._fit_bank(_cohort(X, y), schedule)
        trainer = train_moe if self._method == "moe" else train_dynmm
        self.gate_ = trainer(splits.policy, splits.val, self.bank_, schedule).gate
        return self

    def _proba1(self, X):
        gates = {self._method: self.gate_}
        mp = predict_methods(self.bank_, _cohort(X), _available(self.available),
                             moe=gates.get("moe"), dynmm=gates.get("dynmm"))
        return mp.predictions[self._method]


class MoEClassifier(_GateClassifier):
    """Soft gate over the 15 frozen fusion classifiers."""

    _method = "moe"


class DynMMClassifier(_GateClassifier):
    """Hard (Gumbel-Softmax, straight-through) choice of one fusion classifier per record."""

    _method = "dynmm"
