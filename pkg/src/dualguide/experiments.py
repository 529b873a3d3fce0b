"""Seeded toy problems and the guide / sweep harnesses built on them."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .denoiser import Subject, ToyDenoiser
from .guidance import EnergyTrace, GuidanceConfig, SampleResult, sample_batch
from .io import write_csv, write_json, write_matrix
from .rng import stream

SUBJECT_TOKEN = 2


@dataclass(frozen=True)
class ToyShape:
    height: int = 8
    width: int = 8
    dim: int = 16
    heads: int = 4
    n_self: int = 2
    n_cross: int = 2
    n_tokens: int = 8
    token_dim: int = 16
    token_scale: float = 0.1
    denoiser_seed: int = 0

    def build(self) -> ToyDenoiser:
        return ToyDenoiser(self.height, self.width, self.dim, self.heads, self.n_self, self.n_cross,
                           self.n_tokens, self.token_dim, seed=self.denoiser_seed,
                           token_scale=self.token_scale)


@dataclass
class Problem:
    latents: list[np.ndarray]
    embeds: list[np.ndarray]
    subjects: list[list[Subject]]


def random_box(rng: np.random.Generator, low: float = 0.35, high: float = 0.6) -> tuple[float, ...]:
    hh, ww = rng.uniform(low, high, size=2)
    h0 = rng.uniform(0.05, 0.95 - hh)
    w0 = rng.uniform(0.05, 0.95 - ww)
    return (h0, w0, h0 + hh, w0 + ww)


def make_problem(seed: int, denoiser: ToyDenoiser, n_images: int = 2) -> Problem:
    """Initial latents, prompt embeddings and one boxed subject per image.

    The subject token row is shared across the batch up to a small
    per-image perturbation, as a recurring character would be.
    """
    subject_vec = stream(seed, "subject").standard_normal(denoiser.token_dim)
    latents, embeds, subjects = [], [], []
    for i in range(n_images):
        latents.append(stream(seed, "latent", i).standard_normal((denoiser.n_pixels, denoiser.dim)))
        c = stream(seed, "prompt", i).standard_normal((denoiser.n_tokens, denoiser.token_dim))
        c[SUBJECT_TOKEN] = subject_vec + 0.1 * stream(seed, "subject", i).standard_normal(denoiser.token_dim)
        embeds.append(c * denoiser.token_scale)
        subjects.append([Subject((SUBJECT_TOKEN,), random_box(stream(seed, "box", i)))])
    return Problem(latents, embeds, subjects)


VARIANTS = ("full", "no-su", "latent-only", "no-risa", "no-sfca")


def variant_config(cfg: GuidanceConfig, variant: str) -> GuidanceConfig:
    if variant == "full":
        return cfg
    if variant == "no-su":
        return replace(cfg, semantic_update=False)
    if variant == "latent-only":
        return replace(cfg, semantic_update=False, risa=False, sfca=False)
    if variant == "no-risa":
        return replace(cfg, risa=False)
    if variant == "no-sfca":
        return replace(cfg, sfca=False)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def run_seed(seed: int, cfg: GuidanceConfig, denoiser: ToyDenoiser, n_images: int = 2,
             record_vectors: bool = False) -> SampleResult:
    prob = make_problem(seed, denoiser, n_images)
    return sample_batch(prob.latents, prob.embeds, prob.subjects, denoiser, cfg, seed, record_vectors)


# ------------------------------------------------------------------ harness

SWEEP_PARAMS = ("v", "w", "k_thres", "target")


def thread_cap() -> int:
    """Worker processes allowed by ``DGL_THREADS`` (default 1)."""
    raw = os.environ.get("DGL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DGL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"DGL_THREADS must be a positive integer, got {raw!r}")
    return n


@lru_cache(maxsize=4)
def _denoiser(shape: ToyShape) -> ToyDenoiser:
    return shape.build()


@dataclass
class SeedOutcome:
    seed: int
    variant: str
    iterations: int
    converged: bool
    threshold_ok: bool
    trace: EnergyTrace | None = None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "variant": self.variant, "iterations": self.iterations,
                "converged": self.converged, "threshold_ok": self.threshold_ok,
                "steps": [] if self.trace is None else [asdict(s) for s in self.trace.steps]}


def threshold_respected(trace: EnergyTrace) -> bool:
    """Every step marked converged really ends at or below ``k_thres * e_start``."""
    for s in trace.steps:
        if not s.converged:
            continue
        last = [r for r in trace.records if r.step == s.step][-1]
        if any(e > trace.k_thres * e0 for e, e0 in zip(last.energies, s.e_start)):
            return False
    return True


def _run_one(job) -> SeedOutcome:
    seed, variant, cfg, shape, n_images, record_vectors = job
    res = run_seed(seed, variant_config(cfg, variant), _denoiser(shape), n_images, record_vectors)
    tr = res.trace
    return SeedOutcome(seed, variant, tr.total_iterations, tr.converged, threshold_respected(tr), tr)


def run_jobs(jobs, threads: int | None = None) -> list[SeedOutcome]:
    """Run jobs in order, across processes when more than one thread is allowed."""
    jobs = list(jobs)
    threads = thread_cap() if threads is None else threads
    if threads <= 1 or len(jobs) <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(_run_one, jobs))


def variant_stats(outcomes) -> dict:
    its = [o.iterations for o in outcomes]
    return {
        "n_seeds": len(its),
        "median_iterations": float(np.median(its)),
        "mean_iterations": float(np.mean(its)),
        "converged_fraction": float(np.mean([o.converged for o in outcomes])),
        "threshold_ok": all(o.threshold_ok for o in outcomes),
        "warning": not all(o.converged for o in outcomes),
    }


def guide(cfg: GuidanceConfig, seeds, variants=("full",), shape: ToyShape = ToyShape(), n_images: int = 2,
          out_dir=None, record_vectors: bool = False, threads: int | None = None) -> dict:
    """Guided sampling for every (variant, seed); optional trace files under ``out_dir``.

    Files per run: ``<variant>/trace_seed<seed>.csv`` and, with
    ``record_vectors``, ``<variant>/vectors_seed<seed>.bin`` (one row per
    iterate).  ``summary.json`` collects the per-variant statistics.
    """
    seeds = [int(s) for s in seeds]
    for v in variants:
        variant_config(cfg, v)
    jobs = [(s, v, cfg, shape, n_images, record_vectors) for v in variants for s in seeds]
    outcomes = run_jobs(jobs, threads)
    summary = {"config": asdict(cfg), "seeds": seeds, "variants": {}}
    for v in variants:
        mine = [o for o in outcomes if o.variant == v]
        summary["variants"][v] = {**variant_stats(mine), "per_seed": [o.to_dict() for o in mine]}
    summary["warning"] = any(summary["variants"][v]["warning"] for v in variants)
    if out_dir is not None:
        out = Path(out_dir)
        for o in outcomes:
            write_csv(out / o.variant / f"trace_seed{o.seed}.csv", ["iteration", "step", "subject", "energy"],
                      o.trace.csv_rows())
            if record_vectors:
                write_matrix(out / o.variant / f"vectors_seed{o.seed}.bin", np.stack(o.trace.vectors))
        write_json(out / "summary.json", summary)
    return summary


def interior_minimum(medians) -> bool:
    """True when some interior grid point beats both endpoints strictly."""
    m = list(medians)
    return len(m) >= 3 and min(m[1:-1]) < min(m[0], m[-1])


def sweep(param: str, grid, cfg: GuidanceConfig, seeds, variant: str = "full", shape: ToyShape = ToyShape(),
          n_images: int = 2, batch_size: int = 5, threads: int | None = None) -> dict:
    """One ``guide`` run per grid point, plus per-batch median curves."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    grid = list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    seeds = [int(s) for s in seeds]
    points = []
    for value in grid:
        point_cfg = replace(cfg, **{param: value})
        points.append(guide(point_cfg, seeds, (variant,), shape, n_images, threads=threads))
    iters = np.array([[o["iterations"] for o in p["variants"][variant]["per_seed"]] for p in points])
    batches = []
    for b in range(0, len(seeds), batch_size):
        med = [float(np.median(row[b:b + batch_size])) for row in iters]
        batches.append({"seeds": seeds[b:b + batch_size], "medians": med,
                        "argmin": int(np.argmin(med)), "interior_minimum": interior_minimum(med)})
    return {
        "param": param,
        "grid": grid,
        "variant": variant,
        "points": [{"value": g, **p["variants"][variant], "per_seed": p["variants"][variant]["per_seed"]}
                   for g, p in zip(grid, points)],
        "medians": [p["variants"][variant]["median_iterations"] for p in points],
        "batches": batches,
        "interior_fraction": float(np.mean([b["interior_minimum"] for b in batches])),
    }
