"""Sequential modality-selection policy.

An episode has at most three decisions:

* step 1 picks the first modality (3 actions: A, B, C);
* step 2 stops or adds one more (4 actions: stop, add A, add B, add C; the
  modality already chosen is masked out);
* step 3, reached only after an add, chooses stop/add-the-third jointly with a
  fusion type (6 actions: ``3 * add + fusion`` over concat, mean, tensor).

Modalities are encoded lazily, only when their mask bit flips, and the state
is recomputed from the masked codes after every mask update.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fusion import FUSION_TYPES
from .models import (COMBO_INDEX, COMBOS, ENCODED_DIM, FEATURE_ATTRS, MODALITIES, ClassifierBank,
                     Combo, predicted_positive)
from .numerics import MLP, Affine, Module, Parameter, entropy, softmax_tau

STATE_DIM = 64
STATE_INPUT_DIM = 3 * ENCODED_DIM + 3
STEP_SIZES = (3, 4, 6)
STOP = 0


def anneal_temperature(epoch: float, total: int = 100, tau_init: float = 1.5,
                       tau_final: float = 0.3) -> float:
    """Linear decay from ``tau_init`` at epoch 0 to ``tau_final`` at ``total``, then flat."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    frac = min(epoch / total, 1.0) if total > 0 else 1.0
    return tau_init + (tau_final - tau_init) * frac


class PolicyNetwork(Module):
    """State encoder (99 -> 64 -> 64, ReLU) and the three step heads."""

    def __init__(self, rng: np.random.Generator | None = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_encoder = MLP((STATE_INPUT_DIM, STATE_DIM, STATE_DIM), rng, final_relu=True,
                                 name="state_encoder")
        self.heads = [Affine(STATE_DIM, k, rng, name=f"head{t + 1}")
                      for t, k in enumerate(STEP_SIZES)]

    def parameters(self) -> list[Parameter]:
        return self.state_encoder.parameters() + [p for h in self.heads for p in h.parameters()]

    def step_flops(self, step: int) -> int:
        return self.state_encoder.flops() + self.heads[step].flops()


class AdaFuseNetwork(Module):
    """The pretrained classifier bank (encoders + 15 classifiers) plus the policy."""

    def __init__(self, bank: ClassifierBank, policy: PolicyNetwork) -> None:
        self.bank = bank
        self.policy = policy

    def parameters(self) -> list[Parameter]:
        return self.bank.parameters() + self.policy.parameters()


# ---------------------------------------------------------------------------
# Single-vector building blocks
# ---------------------------------------------------------------------------

def state_input(H: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``[h_A*m_A ; h_B*m_B ; h_C*m_C ; m]`` for a batch ``H`` of shape (n, 3, 32)."""
    masked = H * mask[:, :, None]
    return np.concatenate([masked.reshape(len(H), -1), mask], axis=1)


def compute_state(policy: PolicyNetwork, h_A, h_B, h_C, m: Sequence[int]) -> np.ndarray:
    """64-dim state from the three codes (``None`` allowed where the mask is 0)."""
    m = np.asarray(m, dtype=np.float64)
    H = np.zeros((1, 3, ENCODED_DIM))
    for i, h in enumerate((h_A, h_B, h_C)):
        if m[i]:
            if h is None:
                raise ValueError(f"modality {MODALITIES[i]} is selected but has no code")
            H[0, i] = h
    return policy.state_encoder(state_input(H, m[None, :]))[0]


def action_mask(step: int, mask: np.ndarray, available: np.ndarray | None = None) -> np.ndarray:
    """Additive 0 / -inf mask over a step's actions for a batch of selection masks."""
    mask = np.atleast_2d(mask)
    avail = np.ones(3, dtype=bool) if available is None else np.asarray(available, dtype=bool)
    count = mask.sum(axis=1)
    expected = step
    if np.any(count != expected):
        raise ValueError(f"step {step + 1} needs {expected} selected modalities, got "
                         f"{sorted(set(count.astype(int).tolist()))}")
    out = np.zeros((len(mask), STEP_SIZES[step]))
    if step == 0:
        out[:, ~avail] = -np.inf
    elif step == 1:
        blocked = (mask > 0) | ~avail[None, :]
        out[:, 1:][blocked] = -np.inf
    else:
        third_ok = ((mask == 0) & avail[None, :]).any(axis=1)
        out[~third_ok, 3:] = -np.inf
    return out


def head_logits(policy: PolicyNetwork, step: int, state: np.ndarray, mask: Sequence[int],
                available: Sequence[bool] | None = None) -> np.ndarray:
    """Masked logits of decision ``step`` (1-based, as in the action description)."""
    if step not in (1, 2, 3):
        raise ValueError("step must be 1, 2 or 3")
    m = np.asarray(mask, dtype=np.float64)[None, :]
    logits = policy.heads[step - 1].forward(state)[0]
    return logits + action_mask(step - 1, m, available)[0]


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    actions: tuple[int, ...]
    log_probs: tuple[float, ...]
    entropies: tuple[float, ...]
    combo: Combo
    patient_id: str | None = None

    @property
    def log_prob(self) -> float:
        return float(sum(self.log_probs))

    @property
    def mask(self) -> tuple[int, int, int]:
        return self.combo.mask

    def to_json(self) -> str:
        return json.dumps({"id": self.patient_id, "actions": list(self.actions),
                           "combo": self.combo.name, "log_prob": self.log_prob})

    @classmethod
    def from_json(cls, line: str) -> "Trajectory":
        obj = json.loads(line)
        lp = float(obj["log_prob"])
        return cls(tuple(obj["actions"]), (lp,), (), Combo.parse(obj["combo"]), obj.get("id"))


def resolve_combo(first: int, second: int | None = None, third: int | None = None) -> Combo:
    """Combo reached by an action sequence (raw action indices per step)."""
    if second is None or second == STOP:
        if third is not None:
            raise ValueError("a stopped episode has no third action")
        return Combo((first,))
    mods = {first, second - 1}
    if len(mods) != 2:
        raise ValueError("step 2 cannot re-add the first modality")
    if third is None:
        raise ValueError("an added second modality requires a step-3 action")
    if third >= 3:
        mods = {0, 1, 2}
    return Combo(tuple(mods), FUSION_TYPES[third % 3])


# (mask bits, fusion or -1) -> combo index
_COMBO_LOOKUP = np.full((8, 4), -1, dtype=np.int64)
for _c, _i in COMBO_INDEX.items():
    _bits = sum(1 << m for m in _c.modalities)
    _f = 3 if _c.fusion is None else FUSION_TYPES.index(_c.fusion)
    _COMBO_LOOKUP[_bits, _f] = _i


# ---------------------------------------------------------------------------
# Batched episodes
# ---------------------------------------------------------------------------

Source = Callable[[int, np.ndarray], np.ndarray]


@dataclass
class _Step:
    rows: np.ndarray
    mask: np.ndarray
    state_cache: list
    head_cache: np.ndarray
    probs: np.ndarray
    actions: np.ndarray


@dataclass
class Rollout:
    """A batch of episodes with everything needed for the backward pass."""

    n: int
    tau: float
    H: np.ndarray
    mask: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    entropies: np.ndarray
    fusion: np.ndarray
    combos: np.ndarray
    steps: list[_Step] = field(default_factory=list)
    encodings: list[tuple[int, np.ndarray, list]] = field(default_factory=list)

    @property
    def log_prob(self) -> np.ndarray:
        return self.log_probs.sum(axis=1)

    @property
    def n_steps(self) -> np.ndarray:
        return (self.actions >= 0).sum(axis=1)

    def trajectories(self, ids: Sequence[str] | None = None) -> list[Trajectory]:
        out = []
        for i in range(self.n):
            k = int(self.n_steps[i])
            out.append(Trajectory(
                tuple(int(a) for a in self.actions[i, :k]),
                tuple(float(x) for x in self.log_probs[i, :k]),
                tuple(float(x) for x in self.entropies[i, :k]),
                COMBOS[self.combos[i]],
                None if ids is None else ids[i]))
        return out


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    a = (cum <= u[:, None]).sum(axis=1)
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(a, last)


def rollout(net: AdaFuseNetwork, source: Source, n: int, tau: float = 1.0, *,
            uniforms: np.ndarray | None = None, greedy: bool = False,
            forced: np.ndarray | None = None,
            available: Sequence[bool] | None = None) -> Rollout:
    """Run ``n`` episodes in lock-step.

    ``source(m, rows)`` returns raw features of modality ``m`` for the given
    row indices and is only called for rows whose mask bit for ``m`` is set.
    Actions come from ``forced`` (n, 3) if given, else argmax when ``greedy``,
    else inverse-CDF sampling with ``uniforms`` (n, 3).
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    if forced is None and not greedy and uniforms is None:
        raise ValueError("sampling needs uniforms (or pass greedy=True / forced=...)")
    policy, bank = net.policy, net.bank
    H = np.zeros((n, 3, ENCODED_DIM))
    mask = np.zeros((n, 3))
    actions = np.full((n, 3), -1, dtype=np.int64)
    log_probs = np.zeros((n, 3))
    ents = np.zeros((n, 3))
    fusion = np.full(n, 3, dtype=np.int64)
    ro = Rollout(n, tau, H, mask, actions, log_probs, ents, fusion, np.zeros(n, dtype=np.int64))

    def encode(m: int, rows: np.ndarray) -> None:
        if rows.size:
            h, cache = bank.encoders[m].forward(source(m, rows))
            H[rows, m] = h
            ro.encodings.append((m, rows, cache))

    rows = np.arange(n)
    for t in range(3):
        if rows.size == 0:
            break
        m_rows = mask[rows].copy()
        s, s_cache = policy.state_encoder.forward(state_input(H[rows], m_rows))
        logits, h_cache = policy.heads[t].forward(s)
        logits = logits + action_mask(t, m_rows, available)
        p = softmax_tau(logits, tau)
        if forced is not None:
            a = np.asarray(forced, dtype=np.int64)[rows, t]
        elif greedy:
            a = np.argmax(logits, axis=1)
        else:
            a = _inverse_cdf(p, np.asarray(uniforms)[rows, t])
        with np.errstate(divide="ignore"):
            log_probs[rows, t] = np.log(p[np.arange(rows.size), a])
        ents[rows, t] = entropy(p)
        actions[rows, t] = a
        ro.steps.append(_Step(rows, m_rows, s_cache, h_cache, p, a))

        if t == 0:
            new_rows, new_mod = rows, a
        elif t == 1:
            go = a != STOP
            new_rows, new_mod = rows[go], a[go] - 1
        else:
            fusion[rows] = a % 3
            go = a >= 3
            new_rows = rows[go]
            new_mod = np.argmin(mask[new_rows], axis=1)
        if np.any(mask[new_rows, new_mod] > 0):
            raise ValueError("an action re-selected an already selected modality")
        mask[new_rows, new_mod] = 1.0
        for m in range(3):
            encode(m, new_rows[new_mod == m])
        rows = new_rows if t < 2 else rows[:0]

    bits = (mask * np.array([1, 2, 4])).sum(axis=1).astype(np.int64)
    ro.combos = _COMBO_LOOKUP[bits, fusion]
    return ro


def step_logit_grads(ro: Rollout, coef_logp: np.ndarray, coef_ent: np.ndarray | float
                     ) -> list[np.ndarray]:
    """d/dlogits of ``sum_i coef_logp_i log pi(tau_i) + coef_ent_i sum_t H_it``."""
    coef_ent = np.broadcast_to(np.asarray(coef_ent, dtype=np.float64), (ro.n,))
    grads = []
    for step in ro.steps:
        p = step.probs
        k = len(step.rows)
        onehot = np.zeros_like(p)
        onehot[np.arange(k), step.actions] = 1.0
        d = coef_logp[step.rows, None] * (onehot - p) / ro.tau
        H = entropy(p)
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
        d += coef_ent[step.rows, None] * (-(p * (logp + H[:, None])) / ro.tau)
        grads.append(d)
    return grads


def rollout_backward(net: AdaFuseNetwork, ro: Rollout, dlogits: Sequence[np.ndarray],
                     dH: np.ndarray | None = None, *, encoders: bool = True) -> None:
    """Accumulate policy (and, if ``encoders``, encoder) gradients of a rollout."""
    policy = net.policy
    dH = np.zeros_like(ro.H) if dH is None else dH.copy()
    for t in range(len(ro.steps) - 1, -1, -1):
        step, dl = ro.steps[t], dlogits[t]
        ds = policy.heads[t].backward(dl, step.head_cache)
        dx = policy.state_encoder.backward(ds, step.state_cache)
        dH[step.rows] += dx[:, :3 * ENCODED_DIM].reshape(-1, 3, ENCODED_DIM) * step.mask[:, :, None]
    if encoders:
        for m, rows, cache in ro.encodings:
            net.bank.encoders[m].backward(dH[rows, m], cache)


@dataclass
class Prediction:
    p_hat: np.ndarray
    logits: np.ndarray
    groups: list[tuple[int, np.ndarray, tuple]]


def classify_rollout(bank: ClassifierBank, ro: Rollout, training: bool = False,
                     rng: np.random.Generator | None = None) -> Prediction:
    """Apply each row's resolved classifier to its already-computed codes."""
    logits = np.zeros((ro.n, 2))
    groups = []
    for k in np.unique(ro.combos):
        rows = np.flatnonzero(ro.combos == k)
        clf = bank.classifiers[k]
        lg, cache = clf.forward([ro.H[rows, m] for m in clf.combo.modalities], training, rng)
        logits[rows] = lg
        groups.append((int(k), rows, cache))
    return Prediction(predicted_positive(logits), logits, groups)


def classify_backward(bank: ClassifierBank, ro: Rollout, pred: Prediction,
                      dlogits: np.ndarray) -> np.ndarray:
    """Backprop through the per-row classifiers; returns d/dH."""
    dH = np.zeros_like(ro.H)
    for k, rows, cache in pred.groups:
        clf = bank.classifiers[k]
        for m, g in zip(clf.combo.modalities, clf.backward(dlogits[rows], cache)):
            dH[rows, m] += g
    return dH


def rollout_flops(net: AdaFuseNetwork, ro: Rollout) -> np.ndarray:
    """Executed FLOPs per episode: encoders, state encoder + head per step, classifier."""
    bank, policy = net.bank, net.policy
    enc = np.array([bank.encoder_flops(m) for m in range(3)])
    step = np.array([policy.step_flops(t) for t in range(3)])
    clf = np.array([c.flops() for c in bank.classifiers])
    return ro.mask @ enc + (ro.actions >= 0) @ step + clf[ro.combos]


# ---------------------------------------------------------------------------
# Single-record API
# ---------------------------------------------------------------------------

def record_source(record) -> Source:
    """Features of one record, read attribute-by-attribute only when requested."""
    def source(m: int, rows: np.ndarray) -> np.ndarray:
        x = np.asarray(getattr(record, FEATURE_ATTRS[m]), dtype=np.float64)
        return np.repeat(x[None, :], len(rows), axis=0)
    return source


def sample_trajectory(net: AdaFuseNetwork, record, tau: float, rng: np.random.Generator,
                      available: Sequence[bool] | None = None) -> Trajectory:
    u = rng.random((1, 3))
    ro = rollout(net, record_source(record), 1, tau, uniforms=u, available=available)
    return ro.trajectories([getattr(record, "id", None)])[0]


def greedy_decode(net: AdaFuseNetwork, record,
                  available: Sequence[bool] | None = None) -> Trajectory:
    ro = rollout(net, record_source(record), 1, 1.0, greedy=True, available=available)
    return ro.trajectories([getattr(record, "id", None)])[0]


def enumerate_trajectories(net: AdaFuseNetwork, record, tau: float = 1.0
                           ) -> list[tuple[Trajectory, float]]:
    """Every leaf of the decision tree with its exact probability.

    Computed by direct recursion over single states (independent of the
    batched sampler), encoding all three modalities up front.
    """
    policy, bank = net.policy, net.bank
    h = [bank.encode(m, getattr(record, FEATURE_ATTRS[m])) for m in range(3)]
    pid = getattr(record, "id", None)

    def dist(step: int, mask: list[int]) -> np.ndarray:
        codes = [h[m] if mask[m] else None for m in range(3)]
        s = compute_state(policy, *codes, mask)
        return softmax_tau(head_logits(policy, step, s, mask), tau)

    leaves = []
    p1 = dist(1, [0, 0, 0])
    for a1 in range(3):
        if p1[a1] == 0:
            continue
        m1 = [int(i == a1) for i in range(3)]
        p2 = dist(2, m1)
        for a2 in range(4):
            if p2[a2] == 0:
                continue
            if a2 == STOP:
                lp = (np.log(p1[a1]), np.log(p2[a2]))
                ent = (entropy(p1), entropy(p2))
                leaves.append((Trajectory((a1, a2), lp, ent, resolve_combo(a1, a2), pid),
                               p1[a1] * p2[a2]))
                continue
            m2 = list(m1)
            m2[a2 - 1] = 1
            p3 = dist(3, m2)
            for a3 in range(6):
                if p3[a3] == 0:
                    continue
                lp = (np.log(p1[a1]), np.log(p2[a2]), np.log(p3[a3]))
                ent = (entropy(p1), entropy(p2), entropy(p3))
                leaves.append((Trajectory((a1, a2, a3), tuple(map(float, lp)),
                                          tuple(map(float, ent)), resolve_combo(a1, a2, a3), pid),
                               p1[a1] * p2[a2] * p3[a3]))
    return leaves


def combo_distribution(leaves: Sequence[tuple[Trajectory, float]]) -> np.ndarray:
    out = np.zeros(len(COMBOS))
    for traj, p in leaves:
        out[COMBO_INDEX[traj.combo]] += p
    return out


def forced_actions(trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Pack action tuples into the (n, 3) array ``rollout(forced=...)`` expects."""
    out = np.full((len(trajectories), 3), -1, dtype=np.int64)
    for i, t in enumerate(trajectories):
        out[i, :len(t.actions)] = t.actions
    return out


def write_trajectories(trajectories: Sequence[Trajectory], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trajectories:
            fh.write(t.to_json() + "\n")


def read_trajectories(path) -> list[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.from_json(line) for line in fh if line.strip()]
