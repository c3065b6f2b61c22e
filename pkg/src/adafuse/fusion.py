"""Concatenation, mean and Kronecker (tensor) fusion of encoded features.

Inputs are given in modality order A < B < C, either as 1-D vectors or as
``(batch, dim)`` arrays. Each ``fuse_*`` has a matching ``*_backward`` that
splits an upstream gradient back into per-input gradients.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np


class FusionType(str, enum.Enum):
    CONCAT = "concat"
    MEAN = "mean"
    TENSOR = "tensor"

    def __str__(self) -> str:
        return self.value


FUSION_TYPES = (FusionType.CONCAT, FusionType.MEAN, FusionType.TENSOR)

TENSOR_REDUCED_DIM = 16


def _check(features: Sequence[np.ndarray]) -> list[np.ndarray]:
    if not 2 <= len(features) <= 3:
        raise ValueError(f"fusion combines 2 or 3 modalities, got {len(features)}")
    return [np.asarray(f, dtype=np.float64) for f in features]


def fused_dim(fusion: FusionType, n: int, d: int = 32) -> int:
    """Length of the fused vector for ``n`` modalities of width ``d``."""
    fusion = FusionType(fusion)
    if fusion is FusionType.CONCAT:
        return d * n
    if fusion is FusionType.MEAN:
        return d
    return (TENSOR_REDUCED_DIM + 1) ** n


def fuse_concat(features: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(_check(features), axis=-1)


def fuse_concat_backward(grad: np.ndarray, dims: Sequence[int]) -> list[np.ndarray]:
    splits = np.cumsum(dims)[:-1]
    return np.split(grad, splits, axis=-1)


def fuse_mean(features: Sequence[np.ndarray]) -> np.ndarray:
    feats = _check(features)
    if len({f.shape for f in feats}) != 1:
        raise ValueError("mean fusion needs equally shaped inputs")
    return sum(feats) / len(feats)


def fuse_mean_backward(grad: np.ndarray, n: int) -> list[np.ndarray]:
    return [grad / n for _ in range(n)]


def with_bias(x: np.ndarray) -> np.ndarray:
    """Append a constant 1 as the last coordinate."""
    one = np.ones(x.shape[:-1] + (1,))
    return np.concatenate([x, one], axis=-1)


def fuse_tensor(features: Sequence[np.ndarray]) -> np.ndarray:
    """Flattened Kronecker product of the bias-augmented inputs.

    Row-major with the first modality outermost; the bias slot is the last
    coordinate of each factor, so the output length is ``prod(d_i + 1)``.
    """
    factors = [with_bias(f) for f in _check(features)]
    out = factors[0]
    for f in factors[1:]:
        out = (out[..., :, None] * f[..., None, :]).reshape(out.shape[:-1] + (-1,))
    return out


def fuse_tensor_backward(grad: np.ndarray, features: Sequence[np.ndarray]) -> list[np.ndarray]:
    factors = [with_bias(np.asarray(f, dtype=np.float64)) for f in features]
    n = len(factors)
    dims = [f.shape[-1] for f in factors]
    g = grad.reshape(grad.shape[:-1] + tuple(dims))
    letters = "ijk"[:n]
    grads = []
    for i in range(n):
        others = [j for j in range(n) if j != i]
        spec = "..." + letters + "," + ",".join("..." + letters[j] for j in others) + "->..." + letters[i]
        gi = np.einsum(spec, g, *[factors[j] for j in others])
        grads.append(gi[..., :-1])
    return grads


def fuse(fusion: FusionType, features: Sequence[np.ndarray]) -> np.ndarray:
    fusion = FusionType(fusion)
    if fusion is FusionType.CONCAT:
        return fuse_concat(features)
    if fusion is FusionType.MEAN:
        return fuse_mean(features)
    return fuse_tensor(features)


def fuse_backward(fusion: FusionType, grad: np.ndarray,
                  features: Sequence[np.ndarray]) -> list[np.ndarray]:
    fusion = FusionType(fusion)
    if fusion is FusionType.CONCAT:
        return fuse_concat_backward(grad, [np.shape(f)[-1] for f in features])
    if fusion is FusionType.MEAN:
        return fuse_mean_backward(grad, len(features))
    return fuse_tensor_backward(grad, features)


def tensor_fusion_flops(n: int) -> int:
    return (TENSOR_REDUCED_DIM + 1) ** n
