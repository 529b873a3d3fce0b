"""Dual energy guidance: backward (latent, semantic) descent and forward sampling."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import numeric as nm
from ._validation import ValidationError, check_choice, check_positive_int, check_scalar
from .attention import RISA_AXES, SFCA_MASKS
from .denoiser import PLAIN, Consistency, Subject, ToyDenoiser
from .layout import FORMULAS, TARGET_KINDS, layout_energy, minmax_normalize, sigmoid_target
from .rng import stream

log = logging.getLogger(__name__)


class GuidanceError(RuntimeError):
    """The backward update produced a non-finite energy or gradient."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class GuidanceConfig:
    v: float = 300.0
    w: float = 0.9
    s: float = 10.0
    k_thres: float = 0.6
    n_steps: int = 30
    backward_steps: int = 3
    forward_steps: int = 20
    max_inner_iters: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sigma_scale: float = 1.0
    target: str = "sigmoid"
    formula: str = "corrected"
    risa: bool = True
    sfca: bool = True
    risa_mask_axis: str = "key"
    sfca_mask: str = "literal"
    semantic_update: bool = True
    guidance_scale: float = 1.0

    def __post_init__(self):
        check_scalar(self.v, "v", low=0.0)
        check_scalar(self.w, "w", low=0.0)
        check_scalar(self.s, "s", low=0.0, low_open=True)
        check_scalar(self.k_thres, "k_thres", low=0.0, high=1.0, low_open=True, high_open=True)
        check_positive_int(self.n_steps, "n_steps")
        check_positive_int(self.max_inner_iters, "max_inner_iters")
        if not 0 <= self.backward_steps <= self.forward_steps <= self.n_steps:
            raise ValidationError("need 0 <= backward_steps <= forward_steps <= n_steps")
        check_scalar(self.beta_start, "beta_start", low=0.0, high=1.0, low_open=True, high_open=True)
        check_scalar(self.beta_end, "beta_end", low=0.0, high=1.0, low_open=True, high_open=True)
        check_scalar(self.sigma_scale, "sigma_scale", low=0.0, low_open=True)
        check_scalar(self.guidance_scale, "guidance_scale")
        check_choice(self.target, "target", TARGET_KINDS)
        check_choice(self.formula, "formula", FORMULAS)
        check_choice(self.risa_mask_axis, "risa_mask_axis", RISA_AXES)
        check_choice(self.sfca_mask, "sfca_mask", SFCA_MASKS)

    @property
    def semantic_scale(self) -> float:
        return self.w if self.semantic_update else 0.0

    def consistency(self) -> Consistency:
        return Consistency(self.risa, self.sfca, self.risa_mask_axis, self.sfca_mask)

    def betas(self) -> np.ndarray:
        """Linear schedule indexed by sampling step (index 0 is the noisiest step)."""
        b = np.linspace(self.beta_start, self.beta_end, self.n_steps)
        return b[::-1].copy()

    def sigmas(self) -> np.ndarray:
        """``sqrt(1 - alpha_bar_t)`` per sampling step, times ``sigma_scale``."""
        b = np.linspace(self.beta_start, self.beta_end, self.n_steps)
        alpha_bar = np.cumprod(1.0 - b)
        return (np.sqrt(1.0 - alpha_bar) * self.sigma_scale)[::-1].copy()


# ------------------------------------------------------------ DDPM pieces


def ddpm_step(z_t, score, beta_t: float, noise) -> np.ndarray:
    """One ancestral step ``(z + beta * score) / sqrt(1 - beta) + sqrt(beta) * noise``."""
    beta_t = float(beta_t)
    if not 0.0 < beta_t < 1.0:
        raise ValidationError(f"beta_t must lie in (0, 1), got {beta_t}")
    z, sc, eps = nm.as_array(z_t), nm.as_array(score), nm.as_array(noise)
    if z.shape != sc.shape or z.shape != eps.shape:
        raise nm.DimensionError(f"shapes differ: {z.shape}, {sc.shape}, {eps.shape}")
    return (z + beta_t * sc) / np.sqrt(1.0 - beta_t) + np.sqrt(beta_t) * eps


def score_from_eps(eps_hat, sigma_t: float) -> np.ndarray:
    sigma_t = float(sigma_t)
    if not sigma_t > 0.0:
        raise ValidationError(f"sigma_t must be positive, got {sigma_t}")
    return -nm.as_array(eps_hat) / sigma_t


# ----------------------------------------------------------------- traces


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class IterationRecord:
    step: int
    iteration: int
    energies: tuple[float, ...]
    latent_hash: str
    semantic_hash: str


@dataclass
class StepSummary:
    step: int
    e_start: tuple[float, ...]
    e_final: tuple[float, ...]
    iterations: int
    converged: bool
    best_iteration: int


@dataclass
class EnergyTrace:
    k_thres: float
    records: list[IterationRecord] = field(default_factory=list)
    steps: list[StepSummary] = field(default_factory=list)
    vectors: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def converged(self) -> bool:
        return all(s.converged for s in self.steps)

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.steps)

    def extend(self, other: "EnergyTrace"):
        self.records.extend(other.records)
        self.steps.extend(other.steps)
        self.vectors.extend(other.vectors)

    def csv_rows(self):
        """``(iteration, step, subject, energy)`` rows, one per subject per iterate."""
        for r in self.records:
            for m, e in enumerate(r.energies):
                yield r.iteration, r.step, m, e

    def to_dict(self) -> dict:
        return {
            "k_thres": self.k_thres,
            "converged": self.converged,
            "total_iterations": self.total_iterations,
            "steps": [asdict(s) for s in self.steps],
            "records": [asdict(r) for r in self.records],
        }


# -------------------------------------------------------- backward update

EnergyFn = Callable[[list, list], list]


def descend(energy_fn: EnergyFn, latents: Sequence, embeds: Sequence, sigma: float, v: float, w: float,
            k_thres: float, max_iters: int = 50, step: int = 0, record_vectors: bool = False):
    """Joint gradient descent on ``(latents, embeds)`` until every subject energy
    drops to ``k_thres`` times its starting value.

    ``energy_fn(z_list, c_list)`` returns one scalar tensor per subject; their
    sum drives the gradient.  Returns ``(latents*, embeds*, EnergyTrace)``.
    On non-convergence the lowest-total-energy iterate is returned.
    """
    zs = [np.array(nm.as_array(z)) for z in latents]
    cs = [np.array(nm.as_array(c)) for c in embeds]
    trace = EnergyTrace(k_thres)
    n_z = len(zs)

    def evaluate(zs, cs):
        tape = nm.GradTape()
        zl = [tape.watch(z) for z in zs]
        cl = [tape.watch(c) for c in cs]
        try:
            per_subject = energy_fn(zl, cl)
        except FloatingPointError as exc:
            raise GuidanceError(f"non-finite energy at step {step}: {exc}", trace) from exc
        energies = tuple(e.item() for e in per_subject)
        if not np.all(np.isfinite(energies)):
            raise GuidanceError(f"non-finite energy at step {step}", trace)
        return tape, nm.sum_all(per_subject), zl + cl, energies

    def note(it, zs, cs, energies):
        trace.records.append(IterationRecord(step, it, energies, _digest(zs), _digest(cs)))
        if record_vectors:
            trace.vectors.append(np.concatenate([a.reshape(-1) for a in zs + cs]))

    tape, total, leaves, energies = evaluate(zs, cs)
    e_start = energies
    note(0, zs, cs, energies)
    best = (sum(energies), 0, zs, cs, energies)
    if v == 0.0 and w == 0.0:
        trace.steps.append(StepSummary(step, e_start, e_start, 0, False, 0))
        return zs, cs, trace

    lz, lc = v * sigma, w * sigma
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        grads = tape.gradient(total, leaves)
        if not all(np.isfinite(g).all() for g in grads):
            raise GuidanceError(f"non-finite gradient at step {step}, iteration {it}", trace)
        zs = [z - lz * g for z, g in zip(zs, grads[:n_z])] if v != 0.0 else zs
        cs = [c - lc * g for c, g in zip(cs, grads[n_z:])] if w != 0.0 else cs
        tape, total, leaves, energies = evaluate(zs, cs)
        note(it, zs, cs, energies)
        if sum(energies) < best[0]:
            best = (sum(energies), it, zs, cs, energies)
        if all(e <= k_thres * e0 for e, e0 in zip(energies, e_start)):
            converged = True
            break

    if converged:
        trace.steps.append(StepSummary(step, e_start, energies, it, True, it))
        return zs, cs, trace
    _, best_it, zs, cs, energies = best
    log.debug("step %d: no convergence in %d iterations, keeping iterate %d", step, max_iters, best_it)
    trace.steps.append(StepSummary(step, e_start, energies, it, False, best_it))
    return zs, cs, trace


def layout_energy_fn(denoiser: ToyDenoiser, subjects, cfg: GuidanceConfig, sigma: float,
                     consistency: Consistency = PLAIN) -> EnergyFn:
    """Per-subject layout energies of the denoiser's subject-token attention."""
    targets = [
        [sigmoid_target(s.box, cfg.s, denoiser.height, denoiser.width, kind=cfg.target, formula=cfg.formula)
         for s in subs]
        for subs in subjects
    ]

    def energy(zl, cl):
        out = denoiser.run(zl, cl, subjects, sigma, consistency, want_eps=False)
        return [layout_energy(minmax_normalize(out.maps[i][m]), targets[i][m])
                for i in range(len(subjects)) for m in range(len(subjects[i]))]

    return energy


def dual_backward_update(latents, embeds, subjects, denoiser: ToyDenoiser, cfg: GuidanceConfig,
                         sigma: float, step: int = 0, record_vectors: bool = False,
                         consistency: Consistency = PLAIN):
    """Backward stage for one sampling step: returns ``(z*, c*, EnergyTrace)``."""
    subjects = _coerce_subjects(subjects, len(latents))
    fn = layout_energy_fn(denoiser, subjects, cfg, sigma, consistency)
    return descend(fn, latents, embeds, sigma, cfg.v, cfg.semantic_scale, cfg.k_thres,
                   cfg.max_inner_iters, step, record_vectors)


def dual_latent_only_update(latents, embeds, subjects, denoiser: ToyDenoiser, cfg: GuidanceConfig,
                            sigma: float, step: int = 0, record_vectors: bool = False,
                            consistency: Consistency = PLAIN):
    """Backward stage with the semantic update switched off."""
    return dual_backward_update(latents, embeds, subjects, denoiser, replace(cfg, w=0.0), sigma, step,
                                record_vectors, consistency)


def _coerce_subjects(subjects, n: int) -> list[list[Subject]]:
    if len(subjects) != n:
        raise ValidationError(f"{len(subjects)} subject lists for {n} images")
    out = []
    for subs in subjects:
        if isinstance(subs, Subject):
            subs = [subs]
        out.append([s if isinstance(s, Subject) else Subject(*s) for s in subs])
    return out


# -------------------------------------------------------- forward sampling


@dataclass
class SampleResult:
    latents: list[np.ndarray]
    embeds: list[np.ndarray]
    trace: EnergyTrace
    history: list[list[np.ndarray]] = field(default_factory=list)


def sample_batch(latents, prompt_embeds, subjects, denoiser: ToyDenoiser, cfg: GuidanceConfig, rng_seed: int,
                 record_vectors: bool = False, keep_history: bool = False) -> SampleResult:
    """Run ``cfg.n_steps`` sampling steps from initial latents ``z_T``.

    Steps ``< backward_steps`` first apply the backward update; steps
    ``< forward_steps`` sample with the enabled cross-image attention, later
    steps with plain attention.  The optimized embedding is carried forward.
    Step ``k`` draws its noise from the ``("noise", k, i)`` stream of ``rng_seed``.
    """
    zs = [np.array(nm.as_array(z)) for z in latents]
    cs = [np.array(nm.as_array(c)) for c in prompt_embeds]
    if not zs or len(cs) != len(zs):
        raise ValidationError("need N >= 1 latents with one embedding each")
    subjects = _coerce_subjects(subjects, len(zs))
    betas, sigmas = cfg.betas(), cfg.sigmas()
    consistent = cfg.consistency()
    trace = EnergyTrace(cfg.k_thres)
    history = [list(zs)] if keep_history else []
    for k in range(cfg.n_steps):
        if k < cfg.backward_steps:
            zs, cs, step_trace = dual_backward_update(zs, cs, subjects, denoiser, cfg, sigmas[k], step=k,
                                                      record_vectors=record_vectors)
            trace.extend(step_trace)
        mode = consistent if k < cfg.forward_steps else PLAIN
        eps = denoiser.predict_noise(zs, cs, subjects, sigmas[k], mode, cfg.guidance_scale)
        zs = [
            ddpm_step(zs[i], score_from_eps(eps[i], sigmas[k]), betas[k],
                      stream(rng_seed, "noise", k, i).standard_normal(zs[i].shape))
            for i in range(len(zs))
        ]
        if keep_history:
            history.append(list(zs))
    return SampleResult(zs, cs, trace, history)


def plain_ddpm(latents, prompt_embeds, subjects, denoiser: ToyDenoiser, cfg: GuidanceConfig, rng_seed: int):
    """Unguided ancestral sampling with plain attention (the reference trajectory)."""
    zs = [np.array(nm.as_array(z)) for z in latents]
    subjects = _coerce_subjects(subjects, len(zs))
    betas, sigmas = cfg.betas(), cfg.sigmas()
    history = [list(zs)]
    for k in range(cfg.n_steps):
        eps = denoiser.predict_noise(zs, prompt_embeds, subjects, sigmas[k], PLAIN, cfg.guidance_scale)
        zs = [ddpm_step(z, score_from_eps(e, sigmas[k]), betas[k],
                        stream(rng_seed, "noise", k, i).standard_normal(z.shape))
              for i, (z, e) in enumerate(zip(zs, eps))]
        history.append(list(zs))
    return history


# --------------------------------------------------------------- estimator


class DualGuidanceSampler(BaseEstimator):
    """Estimator-style front end to ``sample_batch``.

    Hyper-parameters mirror ``GuidanceConfig`` so the sampler works with
    ``get_params`` / ``set_params`` / ``sklearn.base.clone`` for sweeps.
    ``fit`` validates them and precomputes the noise schedules.
    """

    def __init__(self, v=300.0, w=0.9, s=10.0, k_thres=0.6, n_steps=30, backward_steps=3, forward_steps=20,
                 max_inner_iters=50, beta_start=1e-4, beta_end=2e-2, sigma_scale=1.0, target="sigmoid",
                 formula="corrected", risa=True, sfca=True, risa_mask_axis="key", sfca_mask="literal",
                 semantic_update=True, guidance_scale=1.0):
        self.v = v
        self.w = w
        self.s = s
        self.k_thres = k_thres
        self.n_steps = n_steps
        self.backward_steps = backward_steps
        self.forward_steps = forward_steps
        self.max_inner_iters = max_inner_iters
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.sigma_scale = sigma_scale
        self.target = target
        self.formula = formula
        self.risa = risa
        self.sfca = sfca
        self.risa_mask_axis = risa_mask_axis
        self.sfca_mask = sfca_mask
        self.semantic_update = semantic_update
        self.guidance_scale = guidance_scale

    def fit(self, X=None, y=None):
        names = {f.name for f in fields(GuidanceConfig)}
        self.config_ = GuidanceConfig(**{k: v for k, v in self.get_params().items() if k in names})
        self.betas_ = self.config_.betas()
        self.sigmas_ = self.config_.sigmas()
        return self

    def sample(self, latents, prompt_embeds, subjects, denoiser: ToyDenoiser, seed: int,
               record_vectors: bool = False) -> SampleResult:
        if not hasattr(self, "config_"):
            raise ValidationError("call fit() before sample()")
        return sample_batch(latents, prompt_embeds, subjects, denoiser, self.config_, seed, record_vectors)
