"""Modality encoders, the 15-classifier fusion bank, and the MoE / DynMM gates."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .fusion import (FUSION_TYPES, TENSOR_REDUCED_DIM, FusionType, fuse, fuse_backward,
                     fused_dim, tensor_fusion_flops)
from .numerics import MLP, Affine, Module, Parameter, softmax_tau

MODALITIES = ("A", "B", "C")
RAW_DIMS = (512, 17, 768)
FEATURE_ATTRS = ("f_A", "f_B", "f_C")
ENCODED_DIM = 32
ENCODER_HIDDEN = 64
CLASSIFIER_HIDDEN = 32
CLASSIFIER_DROPOUT = 0.3


def modality_index(m: int | str) -> int:
    if isinstance(m, str):
        return MODALITIES.index(m.upper())
    if m not in (0, 1, 2):
        raise ValueError(f"unknown modality {m!r}")
    return int(m)


@dataclass(frozen=True)
class Combo:
    """A non-empty modality subset plus a fusion type (``None`` iff single)."""

    modalities: tuple[int, ...]
    fusion: FusionType | None = None

    def __post_init__(self) -> None:
        mods = tuple(sorted(modality_index(m) for m in self.modalities))
        if not mods or len(set(mods)) != len(mods):
            raise ValueError(f"invalid modality subset {self.modalities!r}")
        object.__setattr__(self, "modalities", mods)
        if len(mods) == 1:
            if self.fusion is not None:
                raise ValueError("single-modality combos carry no fusion type")
        else:
            if self.fusion is None:
                raise ValueError("multi-modality combos need a fusion type")
            object.__setattr__(self, "fusion", FusionType(self.fusion))

    @property
    def name(self) -> str:
        letters = "".join(MODALITIES[m] for m in self.modalities)
        return letters if self.fusion is None else f"{letters}-{self.fusion.value}"

    @property
    def mask(self) -> tuple[int, int, int]:
        return tuple(int(i in self.modalities) for i in range(3))

    @classmethod
    def parse(cls, name: str) -> "Combo":
        letters, _, fusion = name.partition("-")
        return cls(tuple(letters), FusionType(fusion) if fusion else None)

    def __str__(self) -> str:
        return self.name


def _all_combos() -> tuple[Combo, ...]:
    combos = [Combo((m,)) for m in range(3)]
    for pair in itertools.combinations(range(3), 2):
        combos.extend(Combo(pair, f) for f in FUSION_TYPES)
    combos.extend(Combo((0, 1, 2), f) for f in FUSION_TYPES)
    return tuple(combos)


COMBOS: tuple[Combo, ...] = _all_combos()
COMBO_INDEX: dict[Combo, int] = {c: i for i, c in enumerate(COMBOS)}
TRIPLE_COMBOS = tuple(i for i, c in enumerate(COMBOS) if len(c.modalities) == 3)
SINGLE_COMBOS = tuple(i for i, c in enumerate(COMBOS) if len(c.modalities) == 1)


def combo_index(combo: Combo | str | int) -> int:
    if isinstance(combo, (int, np.integer)):
        if not 0 <= combo < len(COMBOS):
            raise ValueError(f"combo index out of range: {combo}")
        return int(combo)
    if isinstance(combo, str):
        combo = Combo.parse(combo)
    return COMBO_INDEX[combo]


class ModalityEncoder(MLP):
    """Raw modality features -> 32-dim code (in -> 64 -> 32, ReLU after each).

    Inputs are standardised with a fixed per-feature shift and scale (identity
    until :meth:`fit_standardization` is called); these are buffers, not
    trainable parameters.
    """

    def __init__(self, modality: int | str, rng: np.random.Generator | None = None) -> None:
        self.modality = modality_index(modality)
        super().__init__((RAW_DIMS[self.modality], ENCODER_HIDDEN, ENCODED_DIM), rng,
                         final_relu=True, name=f"encoder_{MODALITIES[self.modality]}")
        self.shift = np.zeros(self.n_in)
        self.scale = np.ones(self.n_in)

    def fit_standardization(self, X: np.ndarray) -> "ModalityEncoder":
        X = np.asarray(X, dtype=np.float64)
        self.shift = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale = np.where(sd > 1e-12, sd, 1.0)
        return self

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.shift": self.shift, f"{self.name}.scale": self.scale}

    def forward(self, x, training=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"modality {MODALITIES[self.modality]} expects {self.n_in} features, "
                             f"got {x.shape[-1]}")
        return super().forward((x - self.shift) / self.scale, training, rng)


class FusionClassifier(Module):
    """Fusion of encoded inputs followed by Linear -> ReLU -> Dropout -> Linear(->2).

    Tensor combos first project each 32-dim code to 16 dims with a dedicated
    affine layer before the bias-augmented Kronecker product.
    """

    def __init__(self, combo: Combo, rng: np.random.Generator | None = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.combo = combo
        n = len(combo.modalities)
        self.projections: list[Affine] = []
        if combo.fusion is FusionType.TENSOR:
            self.projections = [Affine(ENCODED_DIM, TENSOR_REDUCED_DIM, rng,
                                       name=f"{combo.name}.proj_{MODALITIES[m]}")
                                for m in combo.modalities]
        in_dim = ENCODED_DIM if combo.fusion is None else fused_dim(combo.fusion, n, ENCODED_DIM)
        self.in_dim = in_dim
        self.mlp = MLP((in_dim, CLASSIFIER_HIDDEN, 2), rng, dropout=CLASSIFIER_DROPOUT,
                       name=f"{combo.name}.mlp")

    def parameters(self) -> list[Parameter]:
        return [p for proj in self.projections for p in proj.parameters()] + self.mlp.parameters()

    def forward(self, hs: Sequence[np.ndarray], training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, tuple]:
        if len(hs) != len(self.combo.modalities):
            raise ValueError(f"{self.combo.name} expects {len(self.combo.modalities)} inputs, "
                             f"got {len(hs)}")
        proj_cache = None
        if self.combo.fusion is None:
            z, fuse_in = hs[0], None
        else:
            fuse_in = list(hs)
            if self.projections:
                outs = [p.forward(h) for p, h in zip(self.projections, hs)]
                fuse_in = [o for o, _ in outs]
                proj_cache = [c for _, c in outs]
            z = fuse(self.combo.fusion, fuse_in)
        logits, mlp_cache = self.mlp.forward(z, training, rng)
        return logits, (fuse_in, proj_cache, mlp_cache)

    def backward(self, dlogits: np.ndarray, cache: tuple) -> list[np.ndarray]:
        fuse_in, proj_cache, mlp_cache = cache
        dz = self.mlp.backward(dlogits, mlp_cache)
        if self.combo.fusion is None:
            return [dz]
        grads = fuse_backward(self.combo.fusion, dz, fuse_in)
        if self.projections:
            grads = [p.backward(g, c) for p, g, c in zip(self.projections, grads, proj_cache)]
        return grads

    def flops(self) -> int:
        total = sum(p.flops() for p in self.projections) + self.mlp.flops()
        if self.combo.fusion is FusionType.TENSOR:
            total += tensor_fusion_flops(len(self.combo.modalities))
        return total


def predicted_positive(logits: np.ndarray) -> np.ndarray:
    return softmax_tau(logits)[..., 1]


class ClassifierBank(Module):
    """Three shared modality encoders plus one fusion classifier per combo."""

    def __init__(self, rng: np.random.Generator | None = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoders = [ModalityEncoder(m, rng) for m in range(3)]
        self.classifiers = [FusionClassifier(c, rng) for c in COMBOS]

    def fit_standardization(self, xs: Sequence[np.ndarray]) -> "ClassifierBank":
        for enc, X in zip(self.encoders, xs):
            enc.fit_standardization(X)
        return self

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for enc in self.encoders:
            out.update(enc.buffers())
        return out

    def encoder_parameters(self) -> list[Parameter]:
        return [p for e in self.encoders for p in e.parameters()]

    def classifier_parameters(self) -> list[Parameter]:
        return [p for c in self.classifiers for p in c.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.encoder_parameters() + self.classifier_parameters()

    def encode(self, modality: int | str, raw: np.ndarray) -> np.ndarray:
        return self.encoders[modality_index(modality)](raw)

    def encode_all(self, xs: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [self.encoders[m](xs[m]) for m in range(3)]

    def classifier(self, combo: Combo | str | int) -> FusionClassifier:
        return self.classifiers[combo_index(combo)]

    def logits(self, combo: Combo | str | int, hs_all: Sequence[np.ndarray | None],
               training: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        clf = self.classifier(combo)
        return clf.forward([hs_all[m] for m in clf.combo.modalities], training, rng)[0]

    def predict_encoded(self, combo, hs_all, training=False, rng=None) -> np.ndarray:
        return predicted_positive(self.logits(combo, hs_all, training, rng))

    def classify(self, combo: Combo | str | int, inputs: Mapping[int | str, np.ndarray],
                 training: bool = False, rng: np.random.Generator | None = None):
        """Encode the selected raw inputs, fuse and classify; returns p_hat."""
        clf = self.classifier(combo)
        given = {modality_index(k): v for k, v in inputs.items()}
        if set(given) != set(clf.combo.modalities):
            raise ValueError(f"{clf.combo.name} needs modalities "
                             f"{[MODALITIES[m] for m in clf.combo.modalities]}, got "
                             f"{sorted(MODALITIES[m] for m in given)}")
        hs = [None, None, None]
        for m, raw in given.items():
            hs[m] = self.encoders[m](raw)
        return self.predict_encoded(clf.combo, hs, training, rng)

    def expert_predictions(self, hs_all: Sequence[np.ndarray]) -> np.ndarray:
        """Eval-mode p_hat of every combo, shape (batch, 15)."""
        return np.stack([self.predict_encoded(i, hs_all) for i in range(len(COMBOS))], axis=-1)

    # FLOPs accounting (multiply-add = 2 FLOPs; activations ignored)

    def encoder_flops(self, modality: int | str) -> int:
        return self.encoders[modality_index(modality)].flops()

    def combo_flops(self, combo: Combo | str | int) -> int:
        clf = self.classifier(combo)
        return sum(self.encoder_flops(m) for m in clf.combo.modalities) + clf.flops()


def flops_count(bank: ClassifierBank, combo: Combo | str | int) -> float:
    """MFLOPs of one fixed combo path (its encoders plus its classifier)."""
    return bank.combo_flops(combo) / 1e6


class MoEGate(Module):
    """Soft gate over the 15 experts: 96 -> 64 -> 64 -> 15, softmax."""

    def __init__(self, rng: np.random.Generator | None = None) -> None:
        self.mlp = MLP((3 * ENCODED_DIM, 64, 64, len(COMBOS)), rng, name="moe_gate")

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()

    def forward(self, h_cat: np.ndarray) -> tuple[np.ndarray, list]:
        logits, cache = self.mlp.forward(h_cat)
        return softmax_tau(logits), cache

    def flops(self) -> int:
        return self.mlp.flops()


def moe_combine(weights: np.ndarray, expert_p: np.ndarray) -> np.ndarray:
    return (weights * expert_p).sum(axis=-1)


def moe_forward(bank: ClassifierBank, gate: MoEGate, xs: Sequence[np.ndarray]) -> np.ndarray:
    """p_hat = sum_k w_k p_k with w from the gate on concatenated codes."""
    hs = bank.encode_all(xs)
    w, _ = gate.forward(np.concatenate(hs, axis=-1))
    return moe_combine(w, bank.expert_predictions(hs))


def moe_backward(gate: MoEGate, dp: np.ndarray, weights: np.ndarray, expert_p: np.ndarray,
                 cache: list) -> None:
    dw = dp[:, None] * expert_p
    dlogits = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
    gate.mlp.backward(dlogits, cache)


def gumbel_softmax(logits: np.ndarray, tau: float, rng: np.random.Generator
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(hard one-hot, soft sample)`` of a Gumbel-Softmax draw."""
    u = rng.random(np.shape(logits))
    g = -np.log(-np.log(np.clip(u, 1e-300, 1.0)))
    soft = softmax_tau(logits + g, tau)
    hard = np.zeros_like(soft)
    np.put_along_axis(hard, np.argmax(soft, axis=-1)[..., None], 1.0, axis=-1)
    return hard, soft


def straight_through_backward(dy: np.ndarray, soft: np.ndarray, tau: float) -> np.ndarray:
    """Gradient w.r.t. logits of the soft sample, used for the hard forward value."""
    return soft * (dy - (dy * soft).sum(axis=-1, keepdims=True)) / tau


class DynMMGate(Module):
    """Single-shot gate over all 15 combos, sampled with Gumbel-Softmax."""

    def __init__(self, rng: np.random.Generator | None = None) -> None:
        self.mlp = MLP((3 * ENCODED_DIM, 64, 64, len(COMBOS)), rng, name="dynmm_gate")

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()

    def logits(self, h_cat: np.ndarray) -> np.ndarray:
        return self.mlp(h_cat)

    def flops(self) -> int:
        return self.mlp.flops()


def dynmm_forward(bank: ClassifierBank, gate: DynMMGate, xs: Sequence[np.ndarray],
                  temperature: float = 1.0, training: bool = False,
                  rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(p_hat, combo index)`` per row.

    Training draws a hard Gumbel-Softmax sample over all experts; evaluation
    takes the argmax combo and runs only that path.
    """
    xs = [np.atleast_2d(x) for x in xs]
    hs = bank.encode_all(xs)
    logits = gate.logits(np.concatenate(hs, axis=-1))
    if training:
        if rng is None:
            raise ValueError("training mode needs an rng")
        hard, _ = gumbel_softmax(logits, temperature, rng)
        p = (hard * bank.expert_predictions(hs)).sum(axis=-1)
        return p, np.argmax(hard, axis=-1)
    choice = np.argmax(logits, axis=-1)
    p = np.empty(len(choice))
    for k in np.unique(choice):
        rows = choice == k
        p[rows] = bank.predict_encoded(int(k), [h[rows] for h in hs])
    return p, choice


def moe_flops(bank: ClassifierBank, gate: MoEGate) -> int:
    return (sum(bank.encoder_flops(m) for m in range(3)) + gate.flops()
            + sum(c.flops() for c in bank.classifiers))


def dynmm_flops(bank: ClassifierBank, gate: DynMMGate, combo: Combo | str | int) -> int:
    return (sum(bank.encoder_flops(m) for m in range(3)) + gate.flops()
            + bank.classifier(combo).flops())
