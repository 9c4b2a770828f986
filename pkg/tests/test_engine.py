import math
from dataclasses import replace

import numpy as np
import pytest

from cfdiff import classifiers as cl
from cfdiff import engine as en
from cfdiff import guidance as gd
from cfdiff import world as wd
from cfdiff.errors import InvalidArgument
from cfdiff.latent import decode, encode, identity_codec
from cfdiff.schedule import make_schedule, respace

SCHED = respace(make_schedule("linear-beta", 1000), 20)


def short_run(h, model, cfg, n=4, t=0.5, seed=0, record=False):
    xf = h.factuals(n)
    y = np.atleast_1d(cl.predict(model, xf))
    return en.generate_batch(xf, 1 - y, h.world, h.codec, model, SCHED, cfg, t, seed, record)


# -- abduction and stepping --------------------------------------------------------

def test_abduct_clean_position(triad):
    x = np.array([0.3, -1.2])
    z = en.abduct(x, SCHED, 0, identity_codec(2), 5)
    assert np.array_equal(z, x)


def test_abduct_deterministic_and_validated():
    codec = identity_codec(2)
    x = np.array([1.0, 2.0])
    assert np.array_equal(en.abduct(x, SCHED, 10, codec, 3), en.abduct(x, SCHED, 10, codec, 3))
    with pytest.raises(InvalidArgument):
        en.abduct(x, SCHED, len(SCHED.timesteps), codec, 0)


def test_abduct_moments():
    codec = identity_codec(2)
    x = np.array([1.0, -2.0])
    pos = 25
    ab = SCHED.alpha_bar[SCHED.timesteps[pos]]
    zs = np.array([en.abduct(x, SCHED, pos, codec, s) for s in range(10000)])
    se = math.sqrt((1 - ab) / 10000)
    assert np.all(np.abs(zs.mean(0) - math.sqrt(ab) * x) <= 4 * se)
    se_var = (1 - ab) * math.sqrt(2 / 9999)
    assert np.all(np.abs(zs.var(0, ddof=1) - (1 - ab)) <= 4 * se_var)


def test_ddim_final_step_returns_clean_estimate(rng):
    z, e = rng.standard_normal(3), rng.standard_normal(3)
    assert np.allclose(en.ddim_step(z, e, 0.3, 1.0), gd.predict_x0(z, e, 0.3), atol=1e-15)


def test_ddim_consistent_renoising(rng):
    z0, e = rng.standard_normal(3), rng.standard_normal(3)
    a, ap = 0.2, 0.6
    zt = math.sqrt(a) * z0 + math.sqrt(1 - a) * e
    assert np.allclose(en.ddim_step(zt, e, a, ap), math.sqrt(ap) * z0 + math.sqrt(1 - ap) * e, atol=1e-12)


def test_ddim_hand_case():
    got = en.ddim_step(np.array([1.0, 0.0]), np.array([1.0, 0.0]), 0.25, 0.5)
    want = math.sqrt(0.5) * (1 - math.sqrt(0.75)) / 0.5 + math.sqrt(0.5)
    assert got[0] == pytest.approx(want, abs=1e-15) and got[1] == 0.0


def test_ddim_sigma_bound():
    with pytest.raises(InvalidArgument):
        en.ddim_step(np.zeros(2), np.zeros(2), 0.3, 0.9, sigma_t=0.5)


def test_clean_point_inversion_full_ladder(rng):
    s = make_schedule("linear-beta", 1000)
    z0 = rng.standard_normal(4)
    eps = rng.standard_normal(4)
    for t in s.timesteps:
        ab = s.alpha_bar[t]
        zt = math.sqrt(ab) * z0 + math.sqrt(1 - ab) * eps
        assert np.max(np.abs(gd.predict_x0(zt, eps, ab) - z0)) <= 1e-10


def test_start_position():
    assert en.start_position(SCHED, 0.5) == 25
    assert en.start_position(SCHED, 1.0) == len(SCHED.timesteps) - 1
    assert en.start_position(SCHED, 0.0) == 0
    with pytest.raises(InvalidArgument):
        en.start_position(SCHED, 1.5)


def test_derive_seed_independent_of_order():
    assert en.derive_seed(7, 3) == en.derive_seed(7, 3)
    assert len({en.derive_seed(7, i) for i in range(100)}) == 100


# -- generation --------------------------------------------------------------------

def test_trajectory_length_and_order(moons_harness):
    h, model = moons_harness
    rec = short_run(h, model, gd.get_preset("desk-moons"), n=1, record=True)[0]
    pos = en.start_position(SCHED, 0.5)
    assert len(rec.trajectory) == pos
    ts = [s.t for s in rec.trajectory]
    assert ts == sorted(ts, reverse=True)
    assert all(0 <= s.consensus_pass_fraction <= 1 for s in rec.trajectory)


def test_vacuous_gamma_equals_no_filter(moons_harness):
    h, model = moons_harness
    a = short_run(h, model, gd.GuidanceConfig(gamma_deg=180.0), record=True)
    b = short_run(h, model, gd.GuidanceConfig(mode="none"), record=True)
    for ra, rb in zip(a, b):
        assert ra.x_CF.tobytes() == rb.x_CF.tobytes()
        assert all(s.consensus_pass_fraction == 1.0 for s in ra.trajectory)


def test_generation_deterministic(moons_harness):
    h, model = moons_harness
    a = short_run(h, model, gd.get_preset("desk-moons"), seed=4)
    b = short_run(h, model, gd.get_preset("desk-moons"), seed=4)
    assert all(x.x_CF.tobytes() == y.x_CF.tobytes() for x, y in zip(a, b))


def test_invalid_target(moons_harness):
    h, model = moons_harness
    with pytest.raises(InvalidArgument):
        en.generate(h.factuals(1)[0], 5, h.world, h.codec, model, SCHED, gd.GuidanceConfig())


def test_cone_mode_runs(moons_harness):
    h, model = moons_harness
    recs = short_run(h, model, gd.GuidanceConfig(mode="cone", cone_alpha_deg=30.0), record=True)
    assert all(np.all(np.isfinite(r.x_CF)) for r in recs)
    assert all(s.consensus_pass_fraction in (0.0, 1.0) for r in recs for s in r.trajectory)


def test_stochastic_sampler_uses_seeded_noise(moons_harness):
    h, model = moons_harness
    s = respace(make_schedule("linear-beta", 1000, ddim_eta=1.0), 20)
    x = h.factuals(1)[0]
    a = en.generate(x, 1, h.world, h.codec, model, s, gd.GuidanceConfig(), seed=1)
    b = en.generate(x, 1, h.world, h.codec, model, s, gd.GuidanceConfig(), seed=1)
    assert a.x_CF.tobytes() == b.x_CF.tobytes()


def test_generate_diverse(moons_harness):
    h, model = moons_harness
    x = h.factuals(1)[0]
    y = 1 - int(cl.predict(model, x))
    cfg = gd.get_preset("desk-moons")
    same = en.generate_diverse(x, y, h.world, h.codec, model, SCHED, cfg, [3, 3])
    assert same[0].x_CF.tobytes() == same[1].x_CF.tobytes()
    recs = en.generate_diverse(x, y, h.world, h.codec, model, SCHED, cfg, range(10))
    assert {r.y_CF for r in recs} == {y}
    d = [np.linalg.norm(a.x_CF - b.x_CF) for i, a in enumerate(recs) for b in recs[i + 1:]]
    assert np.mean(np.array(d) > 0) >= 0.9
    with pytest.raises(InvalidArgument):
        en.generate_diverse(x, y, h.world, h.codec, model, SCHED, cfg, [])


def test_uncond_only_ignores_classifier(moons_harness):
    h, model = moons_harness
    cfg = gd.GuidanceConfig(mode="uncond-only", lambda_c=0.0, lambda_d=0.0)
    x = h.factuals(1)[0]
    a = en.generate(x, 0, h.world, h.codec, model, SCHED, cfg, seed=2)
    b = en.generate(x, 1, h.world, h.codec, model, SCHED, cfg, seed=2)
    assert a.x_CF.tobytes() == b.x_CF.tobytes()


def test_record_roundtrip(tmp_path, moons_harness):
    h, model = moons_harness
    recs = short_run(h, model, gd.get_preset("desk-moons"), n=3, record=True)
    en.write_records(tmp_path / "r.jsonl", recs, tmp_path / "t.jsonl")
    back = en.read_records(tmp_path / "r.jsonl")
    trajs = en.read_trajectories(tmp_path / "t.jsonl")
    assert [r.record_id for r in back] == [0, 1, 2]
    for a, b in zip(recs, back):
        assert np.array_equal(a.x_CF, b.x_CF) and a.y_CF == b.y_CF and a.seed == b.seed
        assert len(trajs[a.record_id]) == len(a.trajectory)


# -- target selection --------------------------------------------------------------

def test_target_fixed_and_runner_up(triad):
    m = cl.LinearSoftmax(np.zeros((3, 2)), np.array([3.0, 1.0, 2.0]))
    x = np.zeros(2)
    codec = identity_codec(2)
    assert en.select_target_class(x, 0, triad, m, codec, "fixed", fixed_class=1) == 1
    assert en.select_target_class(x, 0, triad, m, codec, "posterior-topk", 1) == 2


def test_target_never_factual(triad, rng):
    m = cl.init_model(cl.ModelSpec("linear", 2, 3), rng)
    codec = identity_codec(2)
    for mode in ("posterior-topk", "feature-topk", "distance-topk"):
        for s in range(20):
            x = rng.standard_normal(2)
            y = int(cl.predict(m, x))
            assert en.select_target_class(x, y, triad, m, codec, mode, 2, s) != y


def test_target_k_range(triad):
    m = cl.LinearSoftmax(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(InvalidArgument):
        en.select_target_class(np.zeros(2), 0, triad, m, identity_codec(2), "posterior-topk", 3)


# -- adversarial baseline ----------------------------------------------------------

def test_adversarial_zero_budget(rng):
    m = cl.LinearSoftmax(rng.standard_normal((2, 3)), np.zeros(2))
    x = rng.standard_normal(3)
    assert np.array_equal(en.adversarial_baseline(x, 1, m, budget_l2=0.0), x)


def test_adversarial_stays_in_ball(rng):
    m = cl.init_model(cl.ModelSpec("mlp", 4, 2, 8), rng)
    x = rng.standard_normal((10, 4))
    adv = en.adversarial_baseline(x, np.ones(10, dtype=int), m, 50, 0.1, 0.7)
    assert np.all(np.linalg.norm(adv - x, axis=1) <= 0.7 + 1e-12)


def test_adversarial_on_overfit_target(overfit_harness):
    h, model = overfit_harness
    xf = h.factuals(100)
    tgt = 1 - np.atleast_1d(cl.predict(model, xf))
    means = h.world.class_means()
    budget = 0.5 * float(np.linalg.norm(means[0] - means[1]))
    adv = en.adversarial_baseline(xf, tgt, model, 100, budget / 20, budget)
    flipped = cl.predict(model, adv) == tgt
    assert flipped.mean() >= 0.9
    post = wd.bayes_posteriors(h.world, encode(h.codec, adv))[np.arange(100), tgt]
    assert np.mean(post[flipped] < 0.3) >= 0.8


def test_counterfactuals_beat_adversarial_on_linear_target(moons_harness):
    h, model = moons_harness
    h = replace(h, cfg=replace(h.cfg, n=60))
    recs = h.run(model)
    xf = np.array([r.x_F for r in recs])
    xcf = np.array([r.x_CF for r in recs])
    tgt = np.array([r.y_CF for r in recs])
    fr = float(np.mean(cl.predict(model, xcf) == tgt))
    adv, _ = en.adversarial_at_flip_ratio(xf, tgt, model, fr)
    idx = np.arange(len(tgt))
    p_cf = wd.bayes_posteriors(h.world, encode(h.codec, xcf))[idx, tgt]
    p_adv = wd.bayes_posteriors(h.world, encode(h.codec, adv))[idx, tgt]
    assert np.median(p_cf) > np.median(p_adv)
