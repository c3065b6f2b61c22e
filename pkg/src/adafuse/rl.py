"""Rewards, the policy-gradient objective, balanced sampling and training loops.

Training is two-phase: :func:`pretrain_baselines` fits the modality encoders
and the 15 fusion classifiers with supervised cross-entropy, then
:func:`train_adafuse` learns the selection policy with REINFORCE on top of the
pretrained bank. :func:`train_moe` and :func:`train_dynmm` fit the adaptive
baselines' gates over the same frozen bank.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .data import Cohort, rng_stream, train_test_split
from .evaluation import auc
from .models import (COMBOS, SINGLE_COMBOS, ClassifierBank, DynMMGate, MoEGate, gumbel_softmax,
                     moe_backward, moe_combine, straight_through_backward)
from .numerics import AdamW, Module, bce_from_logits, bce_loss, softmax_tau
from .policy import (AdaFuseNetwork, PolicyNetwork, Rollout, anneal_temperature,
                     classify_backward, classify_rollout, rollout, rollout_backward,
                     step_logit_grads)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class RewardConfig:
    w_bce: float = 0.7
    w_auc: float = 0.3

    def __post_init__(self) -> None:
        if self.w_bce < 0 or self.w_auc < 0 or (self.w_bce == 0 and self.w_auc == 0):
            raise ValueError("reward weights must be non-negative and not both zero")


@dataclass
class LossConfig:
    lambda_ent: float = 0.1
    lambda_sup: float = 0.3

    def __post_init__(self) -> None:
        if self.lambda_ent < 0 or self.lambda_sup < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class FreezeConfig:
    encoders: str = "train"
    classifiers: str = "freeze"

    def __post_init__(self) -> None:
        for name in ("encoders", "classifiers"):
            if getattr(self, name) not in ("train", "freeze"):
                raise ValueError(f"{name} must be 'train' or 'freeze'")

    @property
    def train_encoders(self) -> bool:
        return self.encoders == "train"

    @property
    def train_classifiers(self) -> bool:
        return self.classifiers == "train"

    @property
    def label(self) -> str:
        return f"{self.encoders}/{self.classifiers}"


FREEZE_GRID = (FreezeConfig("train", "freeze"), FreezeConfig("freeze", "train"),
               FreezeConfig("train", "train"), FreezeConfig("freeze", "freeze"))


@dataclass
class TrainSchedule:
    epochs: int = 100
    batch_size: int = 32
    policy_lr: float = 3e-4
    encoder_lr: float = 1e-5
    baseline_lr: float = 1e-3
    weight_decay: float = 1e-4
    patience: int = 15
    pos_frac: float = 0.3
    seed: int = 0
    tau_init: float = 1.5
    tau_final: float = 0.3
    anneal_epochs: int = 100
    validation_fraction: float = 0.2
    policy_fraction: float = 0.2
    warmup_epochs: int = 15

    def __post_init__(self) -> None:
        for name in ("epochs", "batch_size", "policy_lr", "encoder_lr", "baseline_lr",
                     "tau_init", "tau_final", "anneal_epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not 0.0 < self.pos_frac < 1.0:
            raise ValueError("pos_frac must lie in (0, 1)")
        if not (self.validation_fraction > 0 and self.policy_fraction > 0
                and self.validation_fraction + self.policy_fraction < 1):
            raise ValueError("validation and policy fractions must be positive and sum below 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")


# ---------------------------------------------------------------------------
# Rewards and losses
# ---------------------------------------------------------------------------

def reward_bce(p_hat, y) -> np.ndarray:
    """Negative binary cross-entropy (<= 0)."""
    return -bce_loss(p_hat, y)


def reward_auc_batch(p_hats, labels) -> np.ndarray:
    """Per-sample ranking reward in [-1, 1] against the opposite class in the batch."""
    p = np.asarray(p_hats, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    pos, neg = p[y == 1], p[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        logger.warning("single-class batch: AUC reward set to 0")
        return np.zeros_like(p)
    frac = np.empty_like(p)
    # positive i is ranked correctly against negative j when p_i > p_j
    frac[y == 1] = ((pos[:, None] > neg[None, :]).sum(1)
                    + 0.5 * (pos[:, None] == neg[None, :]).sum(1)) / len(neg)
    frac[y == 0] = ((pos[None, :] > neg[:, None]).sum(1)
                    + 0.5 * (pos[None, :] == neg[:, None]).sum(1)) / len(pos)
    return 2.0 * frac - 1.0


def compute_rewards(p_hat, y, config: RewardConfig) -> np.ndarray:
    r = config.w_bce * reward_bce(p_hat, y)
    if config.w_auc:
        r = r + config.w_auc * reward_auc_batch(p_hat, y)
    return r


def reinforce_loss(log_probs, rewards) -> tuple[float, np.ndarray]:
    """Batch-mean-baselined REINFORCE loss and its gradient w.r.t. each log-probability.

    ``log_probs`` may be an array or a sequence of trajectories. The
    advantage is a constant, so ``d loss / d log_prob_i = -(r_i - mean r) / n``.
    """
    lp = np.array([getattr(t, "log_prob", t) for t in log_probs], dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    if lp.shape != r.shape or lp.ndim != 1:
        raise ValueError("need one reward per trajectory")
    if len(r) < 2:
        raise ValueError("the batch-mean baseline needs at least two trajectories")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    adv = r - r.mean() if np.ptp(r) > 0 else np.zeros_like(r)
    coef = -adv / len(r)
    return float((coef * lp).sum()), coef


@dataclass
class LossBreakdown:
    loss: float
    pg: float
    entropy: float
    sup: float
    rewards: np.ndarray
    coef_logp: np.ndarray
    coef_ent: float
    dlogits_clf: np.ndarray


def total_loss(ro: Rollout, logits_clf: np.ndarray, y, reward: RewardConfig,
               loss: LossConfig, advantage_override: np.ndarray | None = None) -> LossBreakdown:
    """Policy gradient - lambda_ent * entropy + lambda_sup * supervised BCE, batch-averaged.

    ``advantage_override`` replaces the computed rewards (used to isolate terms).
    """
    y = np.asarray(y, dtype=np.float64)
    n = ro.n
    p_hat, sup_each, dsup = bce_from_logits(logits_clf, y)
    rewards = compute_rewards(p_hat, y, reward) if advantage_override is None \
        else np.asarray(advantage_override, dtype=np.float64)
    pg, coef = reinforce_loss(ro.log_prob, rewards)
    ent = float(ro.entropies.sum(axis=1).mean())
    sup = float(sup_each.mean())
    total = pg - loss.lambda_ent * ent + loss.lambda_sup * sup
    return LossBreakdown(total, pg, ent, sup, rewards, coef, -loss.lambda_ent / n,
                         loss.lambda_sup * dsup / n)


def loss_backward(net: AdaFuseNetwork, ro: Rollout, pred, lb: LossBreakdown, *,
                  encoders: bool = True, classifiers: bool = True) -> None:
    """Accumulate gradients of :func:`total_loss` into the network parameters."""
    dH = classify_backward(net.bank, ro, pred, lb.dlogits_clf) if (encoders or classifiers) else None
    rollout_backward(net, ro, step_logit_grads(ro, lb.coef_logp, lb.coef_ent), dH,
                     encoders=encoders)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def balanced_batches(labels, batch_size: int = 32, pos_frac: float = 0.3,
                     rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """One epoch of batches with a fixed positive count.

    Every batch holds ``round(pos_frac * batch_size)`` positives, drawn from a
    reshuffled stream so they repeat only when positives run out; negatives
    are drawn without replacement and each appears at most once per epoch.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    y = np.asarray(labels).reshape(-1)
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("balanced sampling needs at least one positive and one negative")
    n_pos = int(round(pos_frac * batch_size))
    n_neg = batch_size - n_pos
    neg = rng.permutation(neg)
    pool: list[int] = []
    for start in range(0, len(neg), n_neg):
        chosen = []
        while len(chosen) < n_pos:
            if not pool:
                pool = rng.permutation(pos).tolist()
            cand = pool.pop()
            if cand in chosen and len(pos) >= n_pos:
                pool.insert(0, cand)
                continue
            chosen.append(cand)
        yield np.concatenate([np.array(chosen, dtype=np.int64), neg[start:start + n_neg]])


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def validation_split(cohort: Cohort, fraction: float, seed: int) -> tuple[Cohort, Cohort]:
    return train_test_split(cohort, fraction, seed + 7919)


@dataclass
class TrainingSplits:
    """Disjoint stratified parts of a training cohort.

    ``fit`` trains the classifier bank, ``policy`` trains the policy and the
    adaptive gates, ``val`` drives every early-stopping decision. Keeping the
    policy rows unseen by the bank means rewards reflect out-of-sample
    classifier behaviour instead of memorised training rows.
    """

    fit: Cohort
    policy: Cohort
    val: Cohort


def training_splits(cohort: Cohort, schedule: TrainSchedule | None = None) -> TrainingSplits:
    schedule = schedule or TrainSchedule()
    rest, val = validation_split(cohort, schedule.validation_fraction, schedule.seed)
    share = schedule.policy_fraction / (1.0 - schedule.validation_fraction)
    fit, policy = train_test_split(rest, share, schedule.seed + 104729)
    return TrainingSplits(fit, policy, val)


class EarlyStopping:
    """Track the best score and snapshot the module state at that point."""

    def __init__(self, patience: int, modules: Sequence[Module]) -> None:
        self.patience = patience
        self.modules = list(modules)
        self.best = -np.inf
        self.best_epoch = -1
        self.best_state = [m.state() for m in self.modules]
        self.bad = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score``; return True when training should stop."""
        if score > self.best:
            self.best = score
            self.best_epoch = epoch
            self.best_state = [m.state() for m in self.modules]
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience

    def restore(self) -> None:
        for m, s in zip(self.modules, self.best_state):
            m.load_state(s)


def _safe_auc(p, y) -> float:
    try:
        return auc(p, y)
    except ValueError:
        return 0.5


# ---------------------------------------------------------------------------
# Baseline pretraining
# ---------------------------------------------------------------------------

@dataclass
class ComboMetrics:
    combo: str
    epochs_run: int
    best_epoch: int
    val_auc: float


def _fit_supervised(forward_backward, predict_val, y_val, params_modules: Sequence[Module],
                    y_train: np.ndarray, schedule: TrainSchedule, lr: float, rng: np.random.Generator,
                    name: str) -> ComboMetrics:
    params = [p for m in params_modules for p in m.parameters()]
    opt = AdamW([(params, lr)], weight_decay=schedule.weight_decay)
    stopper = EarlyStopping(schedule.patience, params_modules)
    epoch = -1
    for epoch in range(schedule.epochs):
        for idx in balanced_batches(y_train, schedule.batch_size, schedule.pos_frac, rng):
            opt.zero_grad()
            forward_backward(idx, rng)
            opt.step()
        if stopper.update(epoch, _safe_auc(predict_val(), y_val)):
            break
    stopper.restore()
    if stopper.best <= 0.5:
        logger.warning("%s did not beat chance on validation (AUC %.3f); keeping best checkpoint",
                       name, stopper.best)
    return ComboMetrics(name, epoch + 1, stopper.best_epoch, float(stopper.best))


def pretrain_baselines(train: Cohort, val: Cohort, schedule: TrainSchedule | None = None
                       ) -> tuple[ClassifierBank, list[ComboMetrics]]:
    """Fit the shared encoders and all 15 fusion classifiers.

    Single-modality combos train their encoder jointly with their classifier;
    every multi-modality classifier is then fit independently on the frozen
    encoder outputs. Each fit early-stops on validation AUC.
    """
    schedule = schedule or TrainSchedule()
    bank = ClassifierBank(rng_stream(schedule.seed, "init"))
    bank.fit_standardization(train.modalities)
    rng = rng_stream(schedule.seed, "pretrain")
    y = train.y.astype(np.float64)
    Xs, Xv = train.modalities, val.modalities
    metrics = {}

    for k in SINGLE_COMBOS:
        m = COMBOS[k].modalities[0]
        enc, clf = bank.encoders[m], bank.classifiers[k]

        def fb(idx, rng, enc=enc, clf=clf, m=m):
            h, ec = enc.forward(Xs[m][idx])
            logits, cc = clf.forward([h], training=True, rng=rng)
            _, _, dl = bce_from_logits(logits, y[idx])
            enc.backward(clf.backward(dl / len(idx), cc)[0], ec)

        def pv(enc=enc, clf=clf, m=m):
            return softmax_tau(clf.forward([enc(Xv[m])])[0])[:, 1]

        metrics[k] = _fit_supervised(fb, pv, val.y, [enc, clf], train.y, schedule,
                                     schedule.baseline_lr, rng, COMBOS[k].name)

    H = bank.encode_all(Xs)
    Hv = bank.encode_all(Xv)
    for k, combo in enumerate(COMBOS):
        if k in metrics:
            continue
        clf = bank.classifiers[k]
        mods = combo.modalities

        def fb(idx, rng, clf=clf, mods=mods):
            logits, cc = clf.forward([H[m][idx] for m in mods], training=True, rng=rng)
            _, _, dl = bce_from_logits(logits, y[idx])
            clf.backward(dl / len(idx), cc)

        def pv(clf=clf, mods=mods):
            return softmax_tau(clf.forward([Hv[m] for m in mods])[0])[:, 1]

        metrics[k] = _fit_supervised(fb, pv, val.y, [clf], train.y, schedule,
                                     schedule.baseline_lr, rng, combo.name)
    return bank, [metrics[k] for k in range(len(COMBOS))]


# ---------------------------------------------------------------------------
# AdaFuse policy training
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    temperature: float
    mean_reward: float
    entropy: float
    train_loss: float
    val_auc: float


LOG_FIELDS = ("epoch", "temperature", "mean_reward", "entropy", "train_loss", "val_auc")


def cohort_source(cohort: Cohort, index: np.ndarray | None = None):
    mods = cohort.modalities
    if index is None:
        return lambda m, rows: mods[m][rows]
    return lambda m, rows: mods[m][index[rows]]


def greedy_predict(net: AdaFuseNetwork, cohort: Cohort, available=None) -> tuple[np.ndarray, Rollout]:
    ro = rollout(net, cohort_source(cohort), len(cohort), greedy=True, available=available)
    return classify_rollout(net.bank, ro).p_hat, ro


@dataclass
class AdaFuseResult:
    net: AdaFuseNetwork
    log: list[EpochLog]
    best_epoch: int
    best_val_auc: float
    configs: dict = field(default_factory=dict)


def train_adafuse(train: Cohort, val: Cohort, bank: ClassifierBank,
                  freeze: FreezeConfig | None = None, reward: RewardConfig | None = None,
                  loss: LossConfig | None = None, schedule: TrainSchedule | None = None,
                  available=None) -> AdaFuseResult:
    """Learn the selection policy on top of a copy of the pretrained bank."""
    freeze = freeze or FreezeConfig()
    reward = reward or RewardConfig()
    loss = loss or LossConfig()
    schedule = schedule or TrainSchedule()
    net = AdaFuseNetwork(copy.deepcopy(bank), PolicyNetwork(rng_stream(schedule.seed, "policy-init")))
    groups = [(net.policy.parameters(), schedule.policy_lr)]
    if freeze.train_encoders:
        groups.append((net.bank.encoder_parameters(), schedule.encoder_lr))
    if freeze.train_classifiers:
        groups.append((net.bank.classifier_parameters(), schedule.encoder_lr))
    opt = AdamW(groups, weight_decay=schedule.weight_decay)
    batch_rng = rng_stream(schedule.seed, "batches")
    sample_rng = rng_stream(schedule.seed, "sampling")
    dropout_rng = rng_stream(schedule.seed, "dropout")
    stopper = EarlyStopping(schedule.patience, [net])
    y = train.y
    log = []

    for epoch in range(schedule.epochs):
        tau = anneal_temperature(epoch, schedule.anneal_epochs, schedule.tau_init,
                                 schedule.tau_final)
        rewards, ents, losses = [], [], []
        for idx in balanced_batches(y, schedule.batch_size, schedule.pos_frac, batch_rng):
            u = sample_rng.random((len(idx), 3))
            ro = rollout(net, cohort_source(train, idx), len(idx), tau, uniforms=u,
                         available=available)
            pred = classify_rollout(net.bank, ro, training=freeze.train_classifiers,
                                    rng=dropout_rng)
            lb = total_loss(ro, pred.logits, y[idx], reward, loss)
            opt.zero_grad()
            loss_backward(net, ro, pred, lb, encoders=freeze.train_encoders,
                          classifiers=freeze.train_classifiers or freeze.train_encoders)
            opt.step()
            rewards.append(lb.rewards.mean())
            ents.append(lb.entropy)
            losses.append(lb.loss)
        val_auc = _safe_auc(greedy_predict(net, val, available)[0], val.y)
        log.append(EpochLog(epoch, tau, float(np.mean(rewards)), float(np.mean(ents)),
                            float(np.mean(losses)), val_auc))
        if epoch >= schedule.warmup_epochs and stopper.update(epoch, val_auc):
            break
    if stopper.best_epoch < 0:
        # the run ended inside the warm-up window: keep the final policy
        stopper.update(log[-1].epoch, log[-1].val_auc)
    stopper.restore()
    return AdaFuseResult(net, log, stopper.best_epoch, float(stopper.best),
                         {"freeze": asdict(freeze), "reward": asdict(reward), "loss": asdict(loss)})


# ---------------------------------------------------------------------------
# Adaptive baselines
# ---------------------------------------------------------------------------

@dataclass
class GateResult:
    gate: Module
    epochs_run: int
    best_epoch: int
    best_val_auc: float


def _encoded(bank: ClassifierBank, cohort: Cohort) -> tuple[np.ndarray, np.ndarray]:
    hs = bank.encode_all(cohort.modalities)
    return np.concatenate(hs, axis=1), bank.expert_predictions(hs)


def train_moe(train: Cohort, val: Cohort, bank: ClassifierBank,
              schedule: TrainSchedule | None = None) -> GateResult:
    """Fit the soft gate over frozen experts with supervised cross-entropy."""
    schedule = schedule or TrainSchedule()
    gate = MoEGate(rng_stream(schedule.seed, "moe-init"))
    rng = rng_stream(schedule.seed, "moe")
    Hc, P = _encoded(bank, train)
    Hv, Pv = _encoded(bank, val)
    y = train.y.astype(np.float64)

    def fb(idx, rng):
        w, cache = gate.forward(Hc[idx])
        p = moe_combine(w, P[idx])
        pc = np.clip(p, 1e-7, 1 - 1e-7)
        inside = (p > 1e-7) & (p < 1 - 1e-7)
        dp = np.where(inside, (-(y[idx] / pc) + (1 - y[idx]) / (1 - pc)), 0.0) / len(idx)
        moe_backward(gate, dp, w, P[idx], cache)

    def pv():
        return moe_combine(gate.forward(Hv)[0], Pv)

    m = _fit_supervised(fb, pv, val.y, [gate], train.y, schedule, schedule.baseline_lr, rng,
                        "moe")
    return GateResult(gate, m.epochs_run, m.best_epoch, m.val_auc)


def train_dynmm(train: Cohort, val: Cohort, bank: ClassifierBank,
                schedule: TrainSchedule | None = None) -> GateResult:
    """Fit the Gumbel-Softmax combo gate (straight-through) over frozen experts."""
    schedule = schedule or TrainSchedule()
    gate = DynMMGate(rng_stream(schedule.seed, "dynmm-init"))
    rng = rng_stream(schedule.seed, "dynmm")
    Hc, P = _encoded(bank, train)
    Hv, Pv = _encoded(bank, val)
    y = train.y.astype(np.float64)
    params = gate.parameters()
    opt = AdamW([(params, schedule.baseline_lr)], weight_decay=schedule.weight_decay)
    stopper = EarlyStopping(schedule.patience, [gate])
    epoch = -1
    for epoch in range(schedule.epochs):
        tau = anneal_temperature(epoch, schedule.anneal_epochs, schedule.tau_init,
                                 schedule.tau_final)
        for idx in shuffled_batches(len(train), schedule.batch_size, rng):
            logits, cache = gate.mlp.forward(Hc[idx])
            hard, soft = gumbel_softmax(logits, tau, rng)
            p = (hard * P[idx]).sum(axis=1)
            pc = np.clip(p, 1e-7, 1 - 1e-7)
            inside = (p > 1e-7) & (p < 1 - 1e-7)
            dp = np.where(inside, (-(y[idx] / pc) + (1 - y[idx]) / (1 - pc)), 0.0) / len(idx)
            dlogits = straight_through_backward(dp[:, None] * P[idx], soft, tau)
            opt.zero_grad()
            gate.mlp.backward(dlogits, cache)
            opt.step()
        choice = np.argmax(gate.logits(Hv), axis=1)
        if stopper.update(epoch, _safe_auc(Pv[np.arange(len(val)), choice], val.y)):
            break
    stopper.restore()
    return GateResult(gate, epoch + 1, stopper.best_epoch, float(stopper.best))
