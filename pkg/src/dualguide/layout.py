"""Sigmoid layout targets, attention-map normalization and the layout energy.

Boxes are ``(h_min, w_min, h_max, w_max)`` in normalized image coordinates,
``h`` running down the image and ``w`` across it.  Grids are sampled at pixel
centres, ``((h + 0.5) / H, (w + 0.5) / W)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import numeric as nm
from ._validation import ValidationError, check_choice, check_positive_int, check_scalar

TARGET_KINDS = ("sigmoid", "binary", "gaussian")
FORMULAS = ("corrected", "literal")


@dataclass(frozen=True)
class BoundingBox:
    h_min: float
    w_min: float
    h_max: float
    w_max: float

    def __post_init__(self):
        vals = (self.h_min, self.w_min, self.h_max, self.w_max)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError(f"box has non-finite coordinates: {vals}")
        if not (0.0 <= self.h_min < self.h_max <= 1.0 and 0.0 <= self.w_min < self.w_max <= 1.0):
            raise ValidationError(f"invalid or degenerate box {vals}")

    @classmethod
    def coerce(cls, b) -> "BoundingBox":
        if isinstance(b, cls):
            return b
        vals = [float(v) for v in b]
        if len(vals) != 4:
            raise ValidationError(f"a box needs 4 coordinates, got {len(vals)}")
        return cls(*vals)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.h_min, self.w_min, self.h_max, self.w_max)

    @property
    def area(self) -> float:
        return (self.h_max - self.h_min) * (self.w_max - self.w_min)


def box_to_moments(box) -> tuple[float, float, float, float]:
    """Centre ``(mu1, mu2)`` and squared half-extents ``(sigma1, sigma2)``."""
    b = BoundingBox.coerce(box)
    mu1 = (b.h_min + b.h_max) / 2
    mu2 = (b.w_min + b.w_max) / 2
    sigma1 = (b.h_max - b.h_min) ** 2 / 4
    sigma2 = (b.w_max - b.w_min) ** 2 / 4
    return mu1, mu2, sigma1, sigma2


def _logistic(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def sigmoid_2d(x, y, box, s: float = 10.0, formula: str = "corrected"):
    """Evaluate the 2-D sigmoid bump of ``box`` at normalized points ``(x, y)``.

    ``formula="literal"`` flips the sign of the ``y`` term, giving the saddle
    obtained by reading the expression verbatim; kept for comparison only.
    """
    check_choice(formula, "formula", FORMULAS)
    mu1, mu2, s1, s2 = box_to_moments(box)
    dx = (np.asarray(x, dtype=np.float64) - mu1) ** 2 / s1
    dy = (np.asarray(y, dtype=np.float64) - mu2) ** 2 / s2
    arg = 1.0 - dx - dy if formula == "corrected" else 1.0 - dx + dy
    return _logistic(s * arg)


@dataclass(frozen=True)
class TargetMap:
    values: np.ndarray
    s: float
    mu1: float
    mu2: float
    sigma1: float
    sigma2: float
    kind: str = "sigmoid"

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def pixel_centres(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(height) + 0.5) / height
    ys = (np.arange(width) + 0.5) / width
    return np.meshgrid(xs, ys, indexing="ij")


def sigmoid_target(box, s: float = 10.0, height: int = 8, width: int = 8, *,
                   kind: str = "sigmoid", formula: str = "corrected") -> TargetMap:
    """Rasterize the layout target for ``box`` on an ``height x width`` grid.

    ``kind`` selects the sigmoid bump (default) or one of the comparison
    baselines: ``"binary"`` (1 inside the box, 0 outside) and ``"gaussian"``
    (``exp(-ln2 * r)`` with ``r`` the elliptical radius, so it also crosses 0.5
    on the box boundary).
    """
    b = BoundingBox.coerce(box)
    check_positive_int(height, "height")
    check_positive_int(width, "width")
    s = check_scalar(s, "s", low=0.0, low_open=True)
    check_choice(kind, "kind", TARGET_KINDS)
    mu1, mu2, s1, s2 = box_to_moments(b)
    X, Y = pixel_centres(height, width)
    if kind == "sigmoid":
        vals = sigmoid_2d(X, Y, b, s, formula)
    elif kind == "binary":
        vals = ((X >= b.h_min) & (X <= b.h_max) & (Y >= b.w_min) & (Y <= b.w_max)).astype(np.float64)
    else:
        r = (X - mu1) ** 2 / s1 + (Y - mu2) ** 2 / s2
        vals = np.exp(-np.log(2.0) * r)
    vals.flags.writeable = False
    return TargetMap(vals, s, mu1, mu2, s1, s2, kind)


# ------------------------------------------------------------ normalization


def minmax_normalize(maps):
    """Per-head min-max over the spatial axes of a ``(K, H, W)`` or ``(K, S)`` map.

    Heads whose range is below 1e-12 come back as zeros.  Accepts taped
    tensors, in which case the result is differentiable.
    """
    shape = nm.as_array(maps).shape
    if len(shape) < 2 or 0 in shape:
        raise nm.DimensionError(f"expected non-empty (K, ...) maps, got {shape}")
    flat = nm.reshape(maps, (shape[0], int(np.prod(shape[1:]))))
    return nm.reshape(nm.minmax_lastdim(flat), shape)


def intra_token_map(maps) -> np.ndarray:
    """Normalize each token's map to [0, 1] independently (IntraM)."""
    A = np.asarray(maps, dtype=np.float64)
    return nm.as_array(minmax_normalize(A)).copy()


def inter_token_map(maps) -> np.ndarray:
    """Normalize all tokens' maps with one shared min and max (InterM)."""
    A = np.asarray(maps, dtype=np.float64)
    flat = nm.minmax_lastdim(A.reshape(1, -1))
    return nm.as_array(flat).reshape(A.shape).copy()


def average_layers(layer_maps):
    """Unweighted mean of per-layer ``(K, H, W)`` maps."""
    layer_maps = list(layer_maps)
    if not layer_maps:
        raise ValidationError("no attention layers to average")
    return nm.scale(nm.sum_all(layer_maps), 1.0 / len(layer_maps))


def layout_energy(norm_maps, target):
    """Mean squared deviation between normalized ``(K, H, W)`` maps and a target."""
    T = target.values if isinstance(target, TargetMap) else np.asarray(target, dtype=np.float64)
    shape = nm.as_array(norm_maps).shape
    if len(shape) != 3 or shape[1:] != T.shape:
        raise nm.DimensionError(f"maps {shape} do not match target {T.shape}")
    tiled = np.broadcast_to(T, shape)
    return nm.mean(nm.square(nm.sub(norm_maps, tiled)))


# ------------------------------------------------------------- estimators


class SigmoidTargetTransformer(TransformerMixin, BaseEstimator):
    """Turn an ``(n, 4)`` array of boxes into ``(n, height, width)`` target maps."""

    def __init__(self, s=10.0, height=8, width=8, kind="sigmoid", formula="corrected"):
        self.s = s
        self.height = height
        self.width = width
        self.kind = kind
        self.formula = formula

    def fit(self, X=None, y=None):
        check_scalar(self.s, "s", low=0.0, low_open=True)
        check_positive_int(self.height, "height")
        check_positive_int(self.width, "width")
        check_choice(self.kind, "kind", TARGET_KINDS)
        check_choice(self.formula, "formula", FORMULAS)
        self.n_features_in_ = 4
        return self

    def transform(self, X):
        boxes = np.asarray(X, dtype=np.float64)
        if boxes.ndim != 2 or boxes.shape[1] != 4:
            raise ValidationError(f"expected (n, 4) boxes, got shape {boxes.shape}")
        if not hasattr(self, "n_features_in_"):
            self.fit()
        return np.stack([
            sigmoid_target(b, self.s, self.height, self.width, kind=self.kind, formula=self.formula).values
            for b in boxes
        ]) if len(boxes) else np.zeros((0, self.height, self.width))


class AttentionMapNormalizer(TransformerMixin, BaseEstimator):
    """Min-max normalize ``(tokens, H, W)`` maps within each token or across all."""

    def __init__(self, scope="intra"):
        self.scope = scope

    def fit(self, X=None, y=None):
        check_choice(self.scope, "scope", ("intra", "inter"))
        return self

    def transform(self, X):
        self.fit()
        return intra_token_map(X) if self.scope == "intra" else inter_token_map(X)
