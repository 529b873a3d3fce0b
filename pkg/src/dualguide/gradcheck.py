"""Finite-difference checks of every taped op and of the full energy pipeline.

Small ops are checked coordinate by coordinate: a random cotangent ``R``
turns the output into the scalar ``sum(R * op(x))`` and every input entry is
perturbed by ``+-h``.  The energy pipeline has thousands of inputs, so it is
checked along random unit directions instead.  The error of one instance is
``|g_ad - g_fd| / max(|g_ad|, |g_fd|)`` in the 2-norm.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .attention import AttnBatch, masked_attention, risa, sfca
from .denoiser import Consistency, Subject
from .layout import layout_energy, minmax_normalize, sigmoid_target
from .rng import stream

H_STEP = 1e-4
TOLERANCE = 1e-5


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - b) / denom)


def check_op(fn, inputs, rng, h: float = H_STEP) -> float:
    """Coordinate-wise check of ``fn(*tensors) -> Tensor`` w.r.t. every input."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tape = nm.GradTape()
    leaves = [tape.watch(x) for x in inputs]
    out = fn(*leaves)
    R = rng.standard_normal(out.shape)
    grads = tape.gradient(out, leaves, R)

    def f(xs):
        return float(np.sum(R * nm.as_array(fn(*xs))))

    worst = 0.0
    for k, x in enumerate(inputs):
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp = [y.copy() for y in inputs]
            xm = [y.copy() for y in inputs]
            xp[k][idx] += h
            xm[k][idx] -= h
            fd[idx] = (f(xp) - f(xm)) / (2 * h)
        worst = max(worst, rel_error(grads[k], fd))
    return worst


def check_directional(fn, inputs, rng, h: float = H_STEP, n_dirs: int = 2) -> float:
    """Directional check of a scalar ``fn(*tensors)`` along random unit vectors."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tape = nm.GradTape()
    leaves = [tape.watch(x) for x in inputs]
    grads = tape.gradient(fn(*leaves), leaves)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(x.shape) for x in inputs]
        norm = np.sqrt(sum(np.sum(d * d) for d in dirs))
        dirs = [d / norm for d in dirs]
        ad = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        fp = nm.as_array(fn(*[x + h * d for x, d in zip(inputs, dirs)])).item()
        fm = nm.as_array(fn(*[x - h * d for x, d in zip(inputs, dirs)])).item()
        worst = max(worst, rel_error(ad, (fp - fm) / (2 * h)))
    return worst


# ------------------------------------------------------------------ suites
# Each builder maps a seeded generator to ``(fn, inputs)``.


def _gapped(rng, shape, gap=0.05):
    """Values with pairwise gaps >= ``gap`` along the last axis, so max/min stay put under +-h."""
    n = shape[-1]
    base = np.arange(n) * (gap + rng.uniform(0, 0.2, size=shape).mean())
    out = np.empty(shape)
    for idx in np.ndindex(shape[:-1]):
        out[idx] = rng.permutation(base) + rng.uniform(-1, 1)
    return out


def _attn_operands(rng, heads=2, nq=5, nk=6, d=3):
    return [rng.standard_normal((heads, nq, d)), rng.standard_normal((heads, nk, d)),
            rng.standard_normal((heads, nk, d))]


def _random_mask(rng, nq, nk):
    M = (rng.random((nq, nk)) < 0.6).astype(float)
    M[np.arange(nq), rng.integers(0, nk, nq)] = 1.0
    return M


def _small_batch(rng, n=2, S=5, tokens=3):
    masks = []
    for _ in range(n):
        m = (rng.random(S) < 0.5).astype(float)
        m[rng.integers(S)] = 1.0
        masks.append([m])
    subj = [[(int(rng.integers(tokens)),)] for _ in range(n)]
    return masks, subj


def _build_suites():
    suites = {}

    def op(name):
        def deco(builder):
            suites[name] = builder
            return builder
        return deco

    @op("matmul")
    def _(rng):
        return nm.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 3))]

    @op("transpose")
    def _(rng):
        return (lambda a: nm.transpose(a, (2, 0, 1))), [rng.standard_normal((2, 3, 4))]

    @op("reshape")
    def _(rng):
        return (lambda a: nm.reshape(a, (4, 6))), [rng.standard_normal((2, 3, 4))]

    @op("add")
    def _(rng):
        return nm.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]

    @op("sub")
    def _(rng):
        return nm.sub, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]

    @op("mul")
    def _(rng):
        return nm.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]

    @op("scale")
    def _(rng):
        k = float(rng.uniform(-3, 3))
        return (lambda a: nm.scale(a, k)), [rng.standard_normal((3, 4))]

    @op("square")
    def _(rng):
        return nm.square, [rng.standard_normal((3, 4))]

    @op("softmax_lastdim")
    def _(rng):
        return nm.softmax_lastdim, [rng.standard_normal((2, 3, 5)) * 2]

    @op("minmax_lastdim")
    def _(rng):
        return nm.minmax_lastdim, [_gapped(rng, (3, 6))]

    @op("concat")
    def _(rng):
        return (lambda a, b: nm.concat([a, b], axis=1)), [rng.standard_normal((2, 3)), rng.standard_normal((2, 2))]

    @op("take")
    def _(rng):
        idx = list(rng.integers(0, 5, size=4))
        return (lambda a: nm.take(a, idx, axis=1)), [rng.standard_normal((2, 5, 3))]

    @op("mean")
    def _(rng):
        return nm.mean, [rng.standard_normal((3, 4))]

    @op("total")
    def _(rng):
        return nm.total, [rng.standard_normal((3, 4))]

    @op("sum_all")
    def _(rng):
        return (lambda a, b: nm.sum_all([nm.mean(a), nm.total(b)])), [rng.standard_normal(3), rng.standard_normal(4)]

    @op("masked_attention")
    def _(rng):
        M = _random_mask(rng, 5, 6)
        return (lambda q, k, v: masked_attention(q, k, v, M)), _attn_operands(rng)

    @op("risa")
    def _(rng):
        masks, _ = _small_batch(rng)
        axis = ("key", "query")[int(rng.integers(2))]

        def fn(q0, k0, v0, q1, k1, v1):
            b = AttnBatch([q0, q1], [k0, k1], [v0, v1], masks)
            return nm.concat([risa(b, 0, axis), risa(b, 1, axis)], axis=1)

        return fn, [rng.standard_normal((2, 5, 2)) for _ in range(6)]

    @op("sfca")
    def _(rng):
        masks, subj = _small_batch(rng)
        source = ("literal", "own")[int(rng.integers(2))]

        def fn(q0, k0, v0, q1, k1, v1):
            b = AttnBatch([q0, q1], [k0, k1], [v0, v1], masks, subj)
            return nm.concat([sfca(b, 0, source), sfca(b, 1, source)], axis=1)

        q, kv = (2, 5, 2), (2, 3, 2)
        return fn, [rng.standard_normal(s) for s in (q, kv, kv, q, kv, kv)]

    @op("layout_energy")
    def _(rng):
        box = _box(rng)
        target = sigmoid_target(box, 10.0, 4, 5).values
        return (lambda m: layout_energy(minmax_normalize(m), target)), [_gapped(rng, (2, 4, 5))]

    return suites


def _box(rng):
    hh, ww = rng.uniform(0.3, 0.6, size=2)
    h0, w0 = rng.uniform(0.05, 0.95 - hh), rng.uniform(0.05, 0.95 - ww)
    return (h0, w0, h0 + hh, w0 + ww)


OP_SUITES = _build_suites()
PIPELINE_SUITES = ("energy_grad_z", "energy_grad_c")


def _pipeline_case(rng, denoiser, wrt: str):
    from .experiments import SUBJECT_TOKEN
    from .guidance import GuidanceConfig, layout_energy_fn

    n = 2
    zs = [rng.standard_normal((denoiser.n_pixels, denoiser.dim)) for _ in range(n)]
    cs = [rng.standard_normal((denoiser.n_tokens, denoiser.token_dim)) * denoiser.token_scale for _ in range(n)]
    subjects = [[Subject((SUBJECT_TOKEN,), _box(rng))] for _ in range(n)]
    consistency = Consistency(risa=True, sfca=True, risa_mask_axis=("key", "query")[int(rng.integers(2))],
                              sfca_mask=("literal", "own")[int(rng.integers(2))])
    cfg = GuidanceConfig()
    sigma = float(rng.uniform(0.3, 1.0))
    energy = layout_energy_fn(denoiser, subjects, cfg, sigma, consistency)
    if wrt == "z":
        return (lambda *z: nm.sum_all(energy(list(z), cs))), zs
    return (lambda *c: nm.sum_all(energy(zs, list(c)))), cs


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def to_dict(self) -> dict:
        return {"op": self.name, "instances": self.instances, "max_rel_error": self.max_rel_error,
                "seconds": round(self.seconds, 3), "passed": self.passed}


def run_suite(name: str, instances: int = 100, seed: int = 0, denoiser=None) -> SuiteResult:
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(instances):
        rng = stream(seed, "gradcheck", name, k)
        if name in OP_SUITES:
            fn, inputs = OP_SUITES[name](rng)
            err = check_op(fn, inputs, rng)
        elif name in PIPELINE_SUITES:
            fn, inputs = _pipeline_case(rng, denoiser, name[-1])
            err = check_directional(fn, inputs, rng)
        else:
            raise KeyError(f"unknown gradient suite {name!r}")
        worst = max(worst, err)
    return SuiteResult(name, instances, worst, time.perf_counter() - t0)


def run_all(instances: int = 100, seed: int = 0, denoiser=None, names=None) -> list[SuiteResult]:
    if denoiser is None:
        from .experiments import ToyShape
        denoiser = ToyShape().build()
    names = list(OP_SUITES) + list(PIPELINE_SUITES) if names is None else list(names)
    return [run_suite(n, instances, seed, denoiser) for n in names]
