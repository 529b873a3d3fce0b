"""A seeded attention-only surrogate for the noise-prediction network.

Each block applies residual self-attention then residual cross-attention to
the latent features; the noise estimate is ``sigma * (z + (h - h0) W_out)``,
so the implied score is a unit Gaussian pull plus an attention-driven term.
Weights are never trained.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from ._validation import ValidationError, check_choice, check_positive_int
from .attention import (
    RISA_AXES,
    SFCA_MASKS,
    AttnBatch,
    attention,
    mask_from_box,
    merge_heads,
    own_block_offset,
    risa,
    sfca,
    split_heads,
)
from .layout import average_layers
from .rng import stream


@dataclass(frozen=True)
class Subject:
    """One layout-conditioned subject of an image: token positions and box."""

    tokens: tuple[int, ...]
    box: tuple[float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        if not self.tokens:
            raise ValidationError("subject needs at least one token position")


@dataclass(frozen=True)
class Consistency:
    """Which cross-image attention variants the forward pass uses."""

    risa: bool = False
    sfca: bool = False
    risa_mask_axis: str = "key"
    sfca_mask: str = "literal"

    def __post_init__(self):
        check_choice(self.risa_mask_axis, "risa_mask_axis", RISA_AXES)
        check_choice(self.sfca_mask, "sfca_mask", SFCA_MASKS)

    @property
    def active(self) -> bool:
        return self.risa or self.sfca


PLAIN = Consistency()


@dataclass
class DenoiserOutput:
    eps: list
    maps: list  # maps[i][m]: (heads, H, W) subject-token attention, layer-averaged


class ToyDenoiser:
    def __init__(self, height=8, width=8, dim=16, heads=4, n_self=2, n_cross=2,
                 n_tokens=8, token_dim=16, seed=0, map_layers=None, weight_gain=1.0, token_scale=1.0):
        self.height = check_positive_int(height, "height")
        self.width = check_positive_int(width, "width")
        self.dim = check_positive_int(dim, "dim")
        self.heads = check_positive_int(heads, "heads")
        if dim % heads:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.n_self = check_positive_int(n_self, "n_self")
        self.n_cross = check_positive_int(n_cross, "n_cross")
        self.n_tokens = check_positive_int(n_tokens, "n_tokens")
        self.token_dim = check_positive_int(token_dim, "token_dim")
        self.seed = int(seed)
        self.weight_gain = float(weight_gain)
        self.token_scale = float(token_scale)
        if not self.token_scale > 0:
            raise ValidationError("token_scale must be positive")
        self.map_layers = tuple(range(self.n_cross)) if map_layers is None else tuple(map_layers)
        if not self.map_layers or any(not 0 <= l < self.n_cross for l in self.map_layers):
            raise ValidationError(f"map_layers {map_layers} outside 0..{self.n_cross - 1}")
        self._build()

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def _build(self):
        D, C = self.dim, self.token_dim
        g = self.weight_gain

        def mat(name, idx, rows, cols, fan_scale=1.0):
            draw = stream(self.seed, "denoiser", name, idx).standard_normal((rows, cols))
            return draw * (g / (np.sqrt(rows) * fan_scale))

        self.pos = stream(self.seed, "denoiser", "pos").standard_normal((self.n_pixels, D))
        self.self_w = [{k: mat("sa_" + k, l, D, D) for k in ("q", "k", "v", "o")} for l in range(self.n_self)]
        self.cross_w = [
            {"q": mat("ca_q", l, D, D), "k": mat("ca_k", l, C, D, self.token_scale),
             "v": mat("ca_v", l, C, D, self.token_scale), "o": mat("ca_o", l, D, D)}
            for l in range(self.n_cross)
        ]
        self.w_out = mat("out", 0, D, D)
        for arr in [self.pos, self.w_out] + [w for layer in self.self_w + self.cross_w for w in layer.values()]:
            arr.flags.writeable = False

    def layer_plan(self) -> list[tuple[str, int]]:
        """Interleaved ``("self", l)`` / ``("cross", l)`` layer order."""
        plan = []
        for l in range(max(self.n_self, self.n_cross)):
            if l < self.n_self:
                plan.append(("self", l))
            if l < self.n_cross:
                plan.append(("cross", l))
        return plan

    def _masks(self, subjects):
        return [[mask_from_box(s.box, self.height, self.width).reshape(-1) for s in subs] for subs in subjects]

    def run(self, latents, embeds, subjects, sigma: float, consistency: Consistency = PLAIN,
            want_eps: bool = True) -> DenoiserOutput:
        """Forward pass over a batch of images.

        ``latents[i]`` is ``(S, dim)``, ``embeds[i]`` is ``(n_tokens, token_dim)``
        and ``subjects[i]`` a list of ``Subject``.  Inputs may be taped tensors.
        """
        n = len(latents)
        if n < 1 or len(embeds) != n or len(subjects) != n:
            raise ValidationError("latents, embeds and subjects must list the same N >= 1 images")
        for i in range(n):
            zs, cs = nm.as_array(latents[i]).shape, nm.as_array(embeds[i]).shape
            if zs != (self.n_pixels, self.dim):
                raise nm.DimensionError(f"latent {i} has shape {zs}, expected {(self.n_pixels, self.dim)}")
            if len(cs) != 2 or cs[1] != self.token_dim:
                raise nm.DimensionError(f"embedding {i} has shape {cs}, expected (tokens, {self.token_dim})")
            for s in subjects[i]:
                if any(not 0 <= t < cs[0] for t in s.tokens):
                    raise ValidationError(f"image {i}: subject token {s.tokens} outside 0..{cs[0] - 1}")
        masks = self._masks(subjects) if consistency.active else None

        h0 = [nm.add(z, self.pos) for z in latents]
        h = list(h0)
        layer_maps = [[[] for _ in subjects[i]] for i in range(n)]
        for kind, l in self.layer_plan():
            if kind == "self":
                w = self.self_w[l]
                qs = [split_heads(nm.matmul(x, w["q"]), self.heads) for x in h]
                ks = [split_heads(nm.matmul(x, w["k"]), self.heads) for x in h]
                vs = [split_heads(nm.matmul(x, w["v"]), self.heads) for x in h]
                if consistency.risa:
                    batch = AttnBatch(qs, ks, vs, masks)
                    outs = [risa(batch, i, consistency.risa_mask_axis) for i in range(n)]
                else:
                    outs = [attention(qs[i], ks[i], vs[i]) for i in range(n)]
            else:
                w = self.cross_w[l]
                qs = [split_heads(nm.matmul(x, w["q"]), self.heads) for x in h]
                ks = [split_heads(nm.matmul(c, w["k"]), self.heads) for c in embeds]
                vs = [split_heads(nm.matmul(c, w["v"]), self.heads) for c in embeds]
                outs = []
                if consistency.sfca:
                    batch = AttnBatch(qs, ks, vs, masks, [[s.tokens for s in subs] for subs in subjects])
                for i in range(n):
                    if consistency.sfca:
                        out, weights = sfca(batch, i, consistency.sfca_mask, return_weights=True)
                        offset = own_block_offset(batch, i, consistency.sfca_mask)
                    else:
                        out, weights = attention(qs[i], ks[i], vs[i], return_weights=True)
                        offset = 0
                    outs.append(out)
                    if l in self.map_layers:
                        for m, s in enumerate(subjects[i]):
                            cols = nm.take(weights, [offset + t for t in s.tokens], axis=2)
                            if len(s.tokens) > 1:
                                cols = _mean_cols(cols)
                            layer_maps[i][m].append(
                                nm.reshape(cols, (self.heads, self.height, self.width)))
            h = [nm.add(h[i], nm.matmul(merge_heads(outs[i]), w["o"])) for i in range(n)]

        maps = [[average_layers(lm) for lm in per_img] for per_img in layer_maps]
        eps = []
        if want_eps:
            for i in range(n):
                drift = nm.matmul(nm.sub(h[i], h0[i]), self.w_out)
                eps.append(nm.scale(nm.add(latents[i], drift), sigma))
        return DenoiserOutput(eps, maps)

    def predict_noise(self, latents, embeds, subjects, sigma: float, consistency: Consistency = PLAIN,
                      guidance_scale: float = 1.0) -> list[np.ndarray]:
        """Noise estimates as plain arrays, with optional classifier-free blending.

        The unconditional branch replaces every embedding with zeros.
        """
        cond = [nm.as_array(e) for e in self.run(latents, embeds, subjects, sigma, consistency).eps]
        if guidance_scale == 1.0:
            return cond
        null = [np.zeros_like(nm.as_array(c)) for c in embeds]
        uncond = [nm.as_array(e) for e in self.run(latents, null, subjects, sigma, consistency).eps]
        return [u + guidance_scale * (c - u) for c, u in zip(cond, uncond)]


def _mean_cols(cols):
    """Average a ``(heads, S, n)`` stack of token columns down to ``(heads, S, 1)``."""
    n = nm.as_array(cols).shape[2]
    parts = [nm.take(cols, [t], axis=2) for t in range(n)]
    return nm.scale(nm.sum_all(parts), 1.0 / n)
