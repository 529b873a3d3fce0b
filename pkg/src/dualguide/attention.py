"""Masked multi-head attention and the two cross-image consistency variants.

Shapes follow one convention throughout: per-image queries are
``(heads, S, d_k)``, keys/values ``(heads, n_keys, d)``, and a mask is a
``(n_queries, n_keys)`` 0/1 array shared by all heads.  ``log 0`` is realised
as an additive ``-1e9`` so the softmax and its adjoint stay finite.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numeric as nm
from ._validation import ValidationError, check_choice
from .layout import BoundingBox, pixel_centres

MASK_FILL = -1e9
RISA_AXES = ("key", "query")
SFCA_MASKS = ("literal", "own")


class MaskError(ValueError):
    """A query row has no admissible key."""


def mask_from_box(box, height: int, width: int) -> np.ndarray:
    """Binary ``(height, width)`` mask: 1 where the pixel centre lies in the box."""
    b = BoundingBox.coerce(box)
    X, Y = pixel_centres(height, width)
    inside = (X >= b.h_min) & (X <= b.h_max) & (Y >= b.w_min) & (Y <= b.w_max)
    return inside.astype(np.float64)


def split_heads(x, heads: int):
    """``(S, heads * d)`` -> ``(heads, S, d)``."""
    S, D = nm.as_array(x).shape
    if D % heads:
        raise nm.DimensionError(f"model width {D} not divisible by {heads} heads")
    return nm.transpose(nm.reshape(x, (S, heads, D // heads)), (1, 0, 2))


def merge_heads(x):
    """``(heads, S, d)`` -> ``(S, heads * d)``."""
    K, S, d = nm.as_array(x).shape
    return nm.reshape(nm.transpose(x, (1, 0, 2)), (S, K * d))


def _attend(Q, K, V, mask=None):
    q, k, v = nm.as_array(Q), nm.as_array(K), nm.as_array(V)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise nm.DimensionError("queries/keys/values must be (heads, n, d)")
    if k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise nm.DimensionError(f"non-conformable attention operands {q.shape}, {k.shape}, {v.shape}")
    logits = nm.scale(nm.matmul(Q, nm.transpose(K, (0, 2, 1))), 1.0 / np.sqrt(q.shape[2]))
    if mask is not None:
        M = np.asarray(mask, dtype=np.float64)
        if M.shape != (q.shape[1], k.shape[1]):
            raise nm.DimensionError(f"mask {M.shape} does not match ({q.shape[1]}, {k.shape[1]})")
        empty = ~(M > 0).any(axis=1)
        if empty.any():
            raise MaskError(f"query rows {np.flatnonzero(empty).tolist()} are fully masked")
        bias = np.where(M > 0, 0.0, MASK_FILL)
        logits = nm.add(logits, np.broadcast_to(bias, logits.shape))
    weights = nm.softmax_lastdim(logits)
    return nm.matmul(weights, V), weights


def attention(Q, K, V, return_weights: bool = False):
    """Standard scaled dot-product attention, ``softmax(QK^T / sqrt(d_k)) V``."""
    out, weights = _attend(Q, K, V)
    return (out, weights) if return_weights else out


def masked_attention(Q, K, V, mask, return_weights: bool = False):
    """Attention with ``log(mask)`` added to the logits."""
    out, weights = _attend(Q, K, V, mask)
    return (out, weights) if return_weights else out


@dataclass
class AttnBatch:
    """Per-image projected queries/keys/values plus layout information.

    ``masks[j]`` holds one flattened ``(S,)`` layout mask per subject of image
    ``j`` and ``subject_tokens[j]`` the matching token positions (used by the
    cross-attention variant, where keys/values are per token).
    """

    queries: list
    keys: list
    values: list
    masks: list[list[np.ndarray]]
    subject_tokens: list[list[Sequence[int]]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.queries)
        if n < 1 or len(self.keys) != n or len(self.values) != n or len(self.masks) != n:
            raise ValidationError("queries, keys, values and masks must list the same N >= 1 images")
        S = {nm.as_array(q).shape[1] for q in self.queries}
        if len(S) != 1:
            raise nm.DimensionError(f"inconsistent pixel counts across the batch: {sorted(S)}")
        self.n_pixels = S.pop()
        for j, ms in enumerate(self.masks):
            for m in ms:
                if np.shape(m) != (self.n_pixels,):
                    raise nm.DimensionError(f"image {j} mask has shape {np.shape(m)}, expected ({self.n_pixels},)")

    @property
    def size(self) -> int:
        return len(self.queries)


def risa_layout(batch: AttnBatch, i: int, mask_axis: str = "key") -> tuple[list[int], np.ndarray]:
    """Key-block order (image index per block) and the ``(S, total_keys)`` mask."""
    check_choice(mask_axis, "mask_axis", RISA_AXES)
    S = batch.n_pixels
    order, blocks = [], []
    for j in range(batch.size):
        n_keys = nm.as_array(batch.keys[j]).shape[1]
        if j == i:
            order.append(j)
            blocks.append(np.ones((S, n_keys)))
            continue
        for m in batch.masks[j]:
            m = np.asarray(m, dtype=np.float64)
            if mask_axis == "key":
                if n_keys != S:
                    raise nm.DimensionError("key-axis masking needs one key per pixel")
                block = np.broadcast_to(m[None, :], (S, n_keys))
            else:
                block = np.broadcast_to(m[:, None], (S, n_keys))
            order.append(j)
            blocks.append(block)
    return order, np.concatenate(blocks, axis=1)


def risa(batch: AttnBatch, i: int, mask_axis: str = "key", return_weights: bool = False):
    """Regional interconnection self-attention for image ``i``.

    Keys and values of every image are concatenated; image ``i``'s own block is
    unmasked, every foreign block ``j`` is restricted to image ``j``'s layout
    region (one block per subject of ``j``).
    """
    if not 0 <= i < batch.size:
        raise IndexError(f"image index {i} outside batch of {batch.size}")
    order, mask = risa_layout(batch, i, mask_axis)
    K = nm.concat([batch.keys[j] for j in order], axis=1)
    V = nm.concat([batch.values[j] for j in order], axis=1)
    return masked_attention(batch.queries[i], K, V, mask, return_weights)


def sfca_layout(batch: AttnBatch, i: int, mask_source: str = "literal"):
    """Blocks ``(image, token positions)`` in key order and the ``(S, total_keys)`` mask."""
    check_choice(mask_source, "mask_source", SFCA_MASKS)
    if len(batch.subject_tokens) != batch.size:
        raise ValidationError("every image needs subject token positions for cross-image fusion")
    S = batch.n_pixels
    own_union = None
    if batch.masks[i]:
        own_union = np.clip(np.sum(batch.masks[i], axis=0), 0.0, 1.0)
    blocks, masks = [], []
    for j in range(batch.size):
        if j == i:
            n_tok = nm.as_array(batch.keys[j]).shape[1]
            blocks.append((j, None))
            masks.append(np.ones((S, n_tok)))
            continue
        subs = batch.subject_tokens[j]
        if len(subs) != len(batch.masks[j]):
            raise ValidationError(f"image {j}: {len(subs)} subject token groups but {len(batch.masks[j])} masks")
        for m_idx, (tokens, m) in enumerate(zip(subs, batch.masks[j])):
            tokens = list(tokens)
            if not tokens:
                raise ValidationError(f"image {j} subject {m_idx} has no located token")
            if mask_source == "literal":
                col = np.asarray(m, dtype=np.float64)
            elif m_idx < len(batch.masks[i]):
                col = np.asarray(batch.masks[i][m_idx], dtype=np.float64)
            elif own_union is not None:
                col = own_union
            else:
                col = np.zeros(S)
            blocks.append((j, tokens))
            masks.append(np.broadcast_to(col[:, None], (S, len(tokens))))
    return blocks, np.concatenate(masks, axis=1)


def sfca(batch: AttnBatch, i: int, mask_source: str = "literal", return_weights: bool = False):
    """Semantic fusion cross-attention for image ``i``.

    Image ``i`` attends over its own full token keys plus the subject-token
    keys of every other image; a foreign subject token is reachable only from
    the query pixels inside the corresponding layout region.
    """
    if not 0 <= i < batch.size:
        raise IndexError(f"image index {i} outside batch of {batch.size}")
    blocks, mask = sfca_layout(batch, i, mask_source)
    ks, vs = [], []
    for j, tokens in blocks:
        if tokens is None:
            ks.append(batch.keys[j])
            vs.append(batch.values[j])
        else:
            ks.append(nm.take(batch.keys[j], tokens, axis=1))
            vs.append(nm.take(batch.values[j], tokens, axis=1))
    K = nm.concat(ks, axis=1) if len(ks) > 1 else ks[0]
    V = nm.concat(vs, axis=1) if len(vs) > 1 else vs[0]
    return masked_attention(batch.queries[i], K, V, mask, return_weights)


def own_block_offset(batch: AttnBatch, i: int, mask_source: str = "literal") -> int:
    """Column where image ``i``'s own token block starts in its fused key axis."""
    blocks, _ = sfca_layout(batch, i, mask_source)
    offset = 0
    for j, tokens in blocks:
        if tokens is None:
            return offset
        offset += len(tokens)
    raise AssertionError("own block missing")
