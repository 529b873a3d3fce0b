import numpy as np
import pytest
from sklearn.base import clone

from dualguide import numeric as nm
from dualguide._validation import ValidationError
from dualguide.denoiser import Subject
from dualguide.experiments import make_problem, run_seed
from dualguide.guidance import (DualGuidanceSampler, GuidanceConfig, ddpm_step, descend, dual_backward_update,
                                plain_ddpm, sample_batch, score_from_eps)


def test_ddpm_step_formula():
    z, sc, eps = np.array([1.0, -2.0]), np.array([0.5, 0.25]), np.array([0.1, -0.3])
    beta = 0.02
    expect = (z + beta * sc) / np.sqrt(1 - beta) + np.sqrt(beta) * eps
    assert np.array_equal(ddpm_step(z, sc, beta, eps), expect)
    assert np.array_equal(score_from_eps(np.array([0.4]), 2.0), [-0.2])
    with pytest.raises(ValidationError):
        ddpm_step(z, sc, 1.0, eps)


def test_schedule_runs_noisy_to_clean():
    cfg = GuidanceConfig()
    b, s = cfg.betas(), cfg.sigmas()
    assert b[0] == pytest.approx(2e-2) and b[-1] == pytest.approx(1e-4)
    assert np.all(np.diff(s) < 0)
    ab = np.prod(1 - np.linspace(1e-4, 2e-2, 30))
    assert s[0] == pytest.approx(np.sqrt(1 - ab))


@pytest.mark.parametrize("kw", [dict(v=-1.0), dict(k_thres=1.0), dict(k_thres=0.0), dict(backward_steps=25),
                                dict(target="cone"), dict(sfca_mask="mine")])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        GuidanceConfig(**kw)


def quadratic(a):
    def energy(zl, cl):
        return [nm.mean(nm.square(nm.sub(zl[0], a)))]
    return energy


def test_descend_on_quadratic_follows_closed_form():
    a = np.array([1.0, -1.0, 2.0, 0.0])
    z0 = np.zeros(4)
    v, sigma = 0.5, 1.0
    zs, cs, tr = descend(quadratic(a), [z0], [np.zeros(2)], sigma, v, 0.0, 0.6, max_iters=50)
    # each step scales the residual by (1 - 2 v sigma / n)
    r = 1 - 2 * v * sigma / 4
    e0 = np.mean(a ** 2)
    energies = [rec.energies[0] for rec in tr.records]
    assert energies == pytest.approx([e0 * r ** (2 * k) for k in range(len(energies))], rel=1e-12)
    n = int(np.ceil(np.log(0.6) / (2 * np.log(r))))
    assert tr.steps[0].converged and tr.steps[0].iterations == n
    assert energies[-1] <= 0.6 * e0 < energies[-2]


def test_descend_keeps_best_iterate_when_diverging():
    a = np.array([1.0, 2.0])
    z0 = np.zeros(2)
    zs, _, tr = descend(quadratic(a), [z0], [np.zeros(2)], 1.0, 3.0, 0.0, 0.6, max_iters=7)
    step = tr.steps[0]
    assert not step.converged and step.iterations == 7 and step.best_iteration == 0
    assert np.array_equal(zs[0], z0) and len(tr) == 8


def test_zero_scales_do_nothing():
    z0 = np.arange(4.0)
    zs, cs, tr = descend(quadratic(np.ones(4)), [z0], [np.ones(2)], 1.0, 0.0, 0.0, 0.6)
    assert len(tr) == 1 and tr.total_iterations == 0
    assert np.array_equal(zs[0], z0) and np.array_equal(cs[0], np.ones(2))


def test_semantic_only_update_moves_embeddings_only(denoiser):
    prob = make_problem(3, denoiser)
    cfg = GuidanceConfig(v=0.0, max_inner_iters=3)
    zs, cs, tr = dual_backward_update(prob.latents, prob.embeds, prob.subjects, denoiser, cfg, 0.5)
    assert all(np.array_equal(a, b) for a, b in zip(zs, prob.latents))
    assert any(not np.array_equal(a, b) for a, b in zip(cs, prob.embeds))


def test_backward_update_lowers_energy(denoiser):
    prob = make_problem(1, denoiser)
    _, _, tr = dual_backward_update(prob.latents, prob.embeds, prob.subjects, denoiser, GuidanceConfig(),
                                    GuidanceConfig().sigmas()[0])
    s = tr.steps[0]
    assert s.converged and all(e <= 0.6 * e0 for e, e0 in zip(s.e_final, s.e_start))


def test_null_guidance_is_plain_ddpm(denoiser):
    prob = make_problem(5, denoiser)
    cfg = GuidanceConfig(v=0.0, w=0.0, risa=False, sfca=False)
    res = sample_batch(prob.latents, prob.embeds, prob.subjects, denoiser, cfg, 5, keep_history=True)
    ref = plain_ddpm(prob.latents, prob.embeds, prob.subjects, denoiser, cfg, 5)
    assert all(np.array_equal(a, b) for ha, hb in zip(res.history, ref) for a, b in zip(ha, hb))


def test_seeded_runs_repeat_exactly(denoiser):
    cfg = GuidanceConfig(n_steps=6, backward_steps=2, forward_steps=4)
    a, b = run_seed(11, cfg, denoiser), run_seed(11, cfg, denoiser)
    assert [r.latent_hash for r in a.trace.records] == [r.latent_hash for r in b.trace.records]
    assert all(np.array_equal(x, y) for x, y in zip(a.latents, b.latents))
    c = run_seed(12, cfg, denoiser)
    assert not np.array_equal(a.latents[0], c.latents[0])


def test_trace_csv_rows(denoiser):
    cfg = GuidanceConfig(n_steps=3, backward_steps=1, forward_steps=2)
    tr = run_seed(0, cfg, denoiser).trace
    rows = list(tr.csv_rows())
    assert len(rows) == 2 * len(tr) and rows[0][:3] == (0, 0, 0)


def test_sampler_estimator_protocol(denoiser):
    est = DualGuidanceSampler(v=30.0, n_steps=4, backward_steps=1, forward_steps=2)
    assert clone(est).get_params()["v"] == 30.0
    prob = make_problem(0, denoiser)
    with pytest.raises(ValidationError):
        est.sample(prob.latents, prob.embeds, prob.subjects, denoiser, 0)
    est.fit()
    res = est.sample(prob.latents, prob.embeds, prob.subjects, denoiser, 0)
    ref = sample_batch(prob.latents, prob.embeds, prob.subjects, denoiser, est.config_, 0)
    assert np.array_equal(res.latents[0], ref.latents[0])
    with pytest.raises(ValidationError):
        DualGuidanceSampler(k_thres=2.0).fit()


def test_subject_tuple_coercion(denoiser):
    prob = make_problem(0, denoiser)
    cfg = GuidanceConfig(n_steps=2, backward_steps=1, forward_steps=1, max_inner_iters=2)
    subs = [[(s.tokens, s.box) for s in ss] for ss in prob.subjects]
    a = sample_batch(prob.latents, prob.embeds, subs, denoiser, cfg, 0)
    b = sample_batch(prob.latents, prob.embeds, prob.subjects, denoiser, cfg, 0)
    assert np.array_equal(a.latents[1], b.latents[1])
    assert isinstance(prob.subjects[0][0], Subject)
