import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lenspatch.attack import (
    ALL,
    AttackConfig,
    PerturbationRecord,
    Pipeline,
    _envs,
    attack_objective_classifier,
    attack_objective_detector,
    block_centers,
    classifier_objective_torch,
    craft_uap,
    detector_objective_torch,
    greedy_candidates,
    greedy_init,
    refine,
    static_environment,
)
from lenspatch.checkpoint import param_checksum
from lenspatch.errors import ConfigurationError, DomainError, OptimizationError
from lenspatch.perturb import DotParams, DotSpec, sample_random
from lenspatch.utils import derive_seed
from lenspatch.victim import GRID

from conftest import desk_attack

TWO_COLORS = ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0))


def tiny_cfg(**kw):
    base = dict(n_dots=3, block_grid=(2, 2), palette=TWO_COLORS, greedy_batch=4, batch=4, holdout_batch=4,
                max_epochs=3, n_random=3)
    return AttackConfig(**{**base, **kw})


# -- config and records ----------------------------------------------------------------


def test_config_defaults():
    cfg = AttackConfig()
    assert (cfg.n_dots, cfg.batch, cfg.max_epochs, cfg.lr_decay_every) == (100, 16, 500, 200)
    assert (cfg.lr_centers, cfg.lr_colors, cfg.lr_decay_factor) == (1.0, 0.1, 10.0)
    assert cfg.block_grid == (10, 10) and len(cfg.palette) == 27
    assert cfg.ce_epsilon == 1e-6 and cfg.convergence_window == 20
    assert AttackConfig().hash() == cfg.hash() != tiny_cfg().hash()
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("kw", [{"mode": "fancy"}, {"objective_kind": "segmenter"}, {"lr_centers": -1.0},
                                {"palette": ((2.0, 0.0, 0.0),)}, {"block_grid": (0, 3)}])
def test_config_domain(kw):
    with pytest.raises(DomainError):
        AttackConfig(**kw)


def test_record_round_trip():
    p = sample_random(DotSpec(n=4), 0)
    rec = PerturbationRecord(3, p, 0.5, "abc", {"master": 1})
    assert rec.key == "03" and rec.record_id.startswith("03-")
    assert PerturbationRecord.from_dict(rec.to_dict()) == rec
    assert PerturbationRecord(ALL, p, 0.5, "abc", {}).key == ALL
    with pytest.raises(DomainError):
        PerturbationRecord(3, p, 1.5, "abc", {})
    with pytest.raises(DomainError):
        PerturbationRecord(17, p, 0.5, "abc", {})


# -- objectives -------------------------------------------------------------------------


def test_classifier_objective_limits():
    correct = torch.zeros(1, 17, dtype=torch.float64)
    correct[0, 4] = 100.0
    wrong = torch.zeros(1, 17, dtype=torch.float64)
    wrong[0, 4] = -100.0
    label = torch.tensor([4])
    assert float(classifier_objective_torch(correct, label)) == pytest.approx(1e6, rel=1e-3)
    assert float(classifier_objective_torch(wrong, label)) < 0.011


def test_classifier_objective_batch_mean(tiny_victim, tiny_world):
    rng = np.random.default_rng(0)
    envs = tiny_world.sample_envs(5, rng)
    labels = np.array([0, 3, 3, 9, 16])
    frames = tiny_world.frames(labels, envs, seed=1)
    per = [attack_objective_classifier(f[None], [y], tiny_victim) for f, y in zip(frames, labels)]
    assert attack_objective_classifier(frames, labels, tiny_victim) == pytest.approx(np.mean(per), rel=1e-6)
    with pytest.raises(DomainError):
        attack_objective_classifier(frames, [0, 3, 3, 9, 17], tiny_victim)


def _raw(obj_logit, class_logits):
    raw = torch.full((1, 18, GRID, GRID), -20.0, dtype=torch.float64)
    raw[0, 0] = obj_logit
    raw[0, 1:] = class_logits.view(17, GRID, GRID)
    return raw


def test_detector_objective_cases():
    label = torch.tensor([2])
    zeros = torch.zeros(17 * GRID * GRID, dtype=torch.float64)
    assert float(detector_objective_torch(_raw(torch.full((GRID, GRID), -10.0), zeros), label, 0.6)) == 0.0
    obj = torch.full((GRID, GRID), -10.0)
    obj[3, 5] = 10.0
    logits = torch.full((17, GRID, GRID), float(np.log(0.2 / 16)), dtype=torch.float64)
    logits[2] = float(np.log(0.8))
    assert float(detector_objective_torch(_raw(obj, logits.flatten()), label, 0.6)) == pytest.approx(0.8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 16))
def test_detector_objective_in_unit_interval(seed, label):
    raw = torch.from_numpy(np.random.default_rng(seed).normal(0, 3, (3, 18, GRID, GRID)))
    v = detector_objective_torch(raw, torch.full((3,), label), 0.6)
    assert torch.all((v >= 0) & (v <= 1))


def test_detector_objective_needs_detector(tiny_victim):
    with pytest.raises(TypeError):
        attack_objective_detector(np.zeros((1, 64, 64, 3)), 0, tiny_victim)


# -- greedy initialization ---------------------------------------------------------------


def test_candidate_order():
    cfg = tiny_cfg()
    cands = greedy_candidates(cfg, (64, 64))
    assert len(cands) == 9 and cands[0] is None
    assert block_centers((2, 2), (64, 64)) == [(16.0, 16.0), (16.0, 48.0), (48.0, 16.0), (48.0, 48.0)]
    assert cands[1] == ((16.0, 16.0), TWO_COLORS[0]) and cands[2] == ((16.0, 16.0), TWO_COLORS[1])


def _brute_force(victim, surrogate, world, class_id, cfg, seed):
    """Score all nine single-dot candidates independently and take the first minimum."""
    pipe = Pipeline(victim, surrogate, world, cfg)
    rng = np.random.default_rng(derive_seed(seed, "greedy"))
    ids, envs = _envs(pipe, class_id, cfg.greedy_batch, rng)
    batch = pipe.batch(ids, envs, noise_rng=rng)
    r = cfg.radius_fraction * 64
    options = [DotParams.empty()]
    for center in block_centers(cfg.block_grid, (64, 64)):
        for color in cfg.palette:
            options.append(DotParams([center], [r], [color]))
    scores = [pipe.evaluate(p, batch) for p in options]
    return options[int(np.argmin(scores))], scores


@pytest.mark.parametrize("class_id,seed", [(0, 0), (5, 1), (12, 2), (16, 3)])
def test_greedy_matches_brute_force(tiny_victim, tiny_surrogate, tiny_world, class_id, seed):
    cfg = tiny_cfg(n_dots=1)
    got, trace = greedy_init(tiny_victim, tiny_surrogate, tiny_world, class_id, cfg, seed, return_trace=True)
    want, scores = _brute_force(tiny_victim, tiny_surrogate, tiny_world, class_id, cfg, seed)
    assert got.n == want.n
    np.testing.assert_array_equal(got.centers, want.centers)
    np.testing.assert_array_equal(got.colors, want.colors)
    assert trace[-1] == pytest.approx(min(scores), rel=1e-5)


@pytest.mark.parametrize("seed", range(4))
def test_greedy_trace_monotone(tiny_victim, tiny_surrogate, tiny_world, seed):
    cfg = tiny_cfg(n_dots=6)
    params, trace = greedy_init(tiny_victim, tiny_surrogate, tiny_world, seed * 4, cfg, seed, return_trace=True)
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert params.n <= 6 and len(trace) >= params.n + 1


def test_greedy_deterministic(tiny_victim, tiny_surrogate, tiny_world):
    cfg = tiny_cfg()
    a = greedy_init(tiny_victim, tiny_surrogate, tiny_world, 2, cfg, 7)
    b = greedy_init(tiny_victim, tiny_surrogate, tiny_world, 2, cfg, 7)
    assert a.to_dict() == b.to_dict()


# -- refinement -----------------------------------------------------------------------------


def _start(n=5, seed=0):
    return sample_random(DotSpec(n=n), seed)


def test_refine_step_bounds_and_box(tiny_victim, tiny_surrogate, tiny_world):
    cfg = tiny_cfg(max_epochs=6, lr_centers=3.0, lr_colors=0.2)
    theta0 = _start()
    # push some parameters onto the boundary so projection is exercised
    theta0 = theta0.replace(centers=np.clip(theta0.centers * 1.5, 0, 63), colors=np.round(theta0.colors))
    seen = [theta0]
    refine(theta0, tiny_victim, tiny_surrogate, tiny_world, 1, cfg, 0, callback=lambda e, t: seen.append(t))
    assert len(seen) == 7
    for a, b in zip(seen, seen[1:]):
        assert np.all(np.abs(b.centers - a.centers) <= 3.0 + 1e-12)
        assert np.all(np.abs(b.colors - a.colors) <= 0.2 + 1e-12)
        b.validate((64, 64))


def test_refine_learning_rate_decay(tiny_victim, tiny_surrogate, tiny_world):
    cfg = tiny_cfg(max_epochs=4, lr_decay_every=2, lr_centers=1.0, lr_colors=0.1, convergence_window=50)
    seen = [_start()]
    refine(seen[0], tiny_victim, tiny_surrogate, tiny_world, 1, cfg, 0, callback=lambda e, t: seen.append(t))
    late = [np.abs(b.colors - a.colors).max() for a, b in zip(seen[2:], seen[3:])]
    assert max(late) <= 0.01 + 1e-12


def test_refine_zero_learning_rate_is_identity(tiny_victim, tiny_surrogate, tiny_world):
    cfg = tiny_cfg(lr_centers=0.0, lr_colors=0.0)
    theta0 = _start()
    seen = []
    out = refine(theta0, tiny_victim, tiny_surrogate, tiny_world, 1, cfg, 0, callback=lambda e, t: seen.append(t))
    assert seen and all(np.array_equal(t.centers, theta0.centers) and np.array_equal(t.colors, theta0.colors)
                        for t in seen)
    assert out.to_dict() == theta0.to_dict()


class _NanPipeline(Pipeline):
    def objective(self, centers, colors, params, batch):
        return (centers.sum() + colors.sum()) * float("nan")


def test_refine_nan_raises(tiny_victim, tiny_surrogate, tiny_world):
    cfg = tiny_cfg()
    pipe = _NanPipeline(tiny_victim, tiny_surrogate, tiny_world, cfg)
    with pytest.raises(OptimizationError) as info:
        refine(_start(), tiny_victim, tiny_surrogate, tiny_world, 1, cfg, 0, pipeline=pipe)
    assert info.value.epoch == 1


def test_end_to_end_color_gradient(tiny_victim, tiny_surrogate, tiny_world):
    cfg = tiny_cfg()
    pipe = Pipeline(tiny_victim, tiny_surrogate, tiny_world, cfg, dtype=torch.float64)
    rng = np.random.default_rng(3)
    ids, envs = _envs(pipe, 6, 4, rng)
    batch = pipe.batch(ids, envs)
    # score against the victim's own predictions so the objective sits in a sensitive regime
    with torch.no_grad():
        batch["labels"] = pipe.vnet(batch["scenes"] * batch["b"]).argmax(dim=1)
    theta = DotParams([[30.0, 34.0]], [6.4], [[0.45, 0.55, 0.5]])

    def obj(colors):
        c = torch.tensor(theta.centers, dtype=torch.float64)
        g = torch.tensor(colors, dtype=torch.float64, requires_grad=True)
        v = pipe.objective(c, g, theta, batch)
        v.backward()
        return float(v.detach()), g.grad.numpy()

    _, grad = obj(theta.colors)
    h = 1e-5
    for ch in range(3):
        up, dn = theta.colors.copy(), theta.colors.copy()
        up[0, ch] += h
        dn[0, ch] -= h
        fd = (obj(up)[0] - obj(dn)[0]) / (2 * h)
        assert abs(fd - grad[0, ch]) <= 1e-2 * abs(fd) + 1e-12


# -- full craft -------------------------------------------------------------------------------


def test_craft_errors(tiny_victim, tiny_surrogate, tiny_world):
    with pytest.raises(ConfigurationError):
        craft_uap(1, tiny_victim, None, tiny_world, tiny_cfg(mode="full"), 0)
    with pytest.raises(ConfigurationError):
        craft_uap(1, tiny_victim, None, tiny_world, tiny_cfg(mode="static_env"), 0)
    with pytest.raises(DomainError):
        craft_uap(17, tiny_victim, tiny_surrogate, tiny_world, tiny_cfg(), 0)
    with pytest.raises(ConfigurationError):
        craft_uap(1, tiny_victim, tiny_surrogate, tiny_world, tiny_cfg(objective_kind="detector"), 0)


@pytest.mark.parametrize("mode", ["full", "no_tnet", "random", "static_env"])
def test_craft_deterministic_and_frozen(tiny_victim, tiny_surrogate, tiny_world, mode):
    before = param_checksum(tiny_victim.net), tiny_surrogate.checksum()
    a = craft_uap(4, tiny_victim, tiny_surrogate, tiny_world, tiny_cfg(mode=mode), 11)
    b = craft_uap(4, tiny_victim, tiny_surrogate, tiny_world, tiny_cfg(mode=mode), 11)
    assert a == b and a.mode == mode and 0.0 <= a.train_asr <= 1.0
    assert a.config_hash == tiny_cfg(mode=mode).hash()
    assert (param_checksum(tiny_victim.net), tiny_surrogate.checksum()) == before


def test_craft_all_classes(tiny_victim, tiny_surrogate, tiny_world):
    rec = craft_uap(ALL, tiny_victim, tiny_surrogate, tiny_world, tiny_cfg(), 0)
    assert rec.target_class == ALL and rec.key == ALL


def test_random_mode_picks_best_candidate(tiny_victim, tiny_surrogate, tiny_world):
    cfg = tiny_cfg(mode="random", n_dots=8)
    rec = craft_uap(4, tiny_victim, tiny_surrogate, tiny_world, cfg, 5)
    scores = rec.meta["random_scores"]
    assert len(scores) == 3 and rec.dot_params.n == 8
    best = sample_random(cfg.dot_spec(), rec.seeds["random"] + int(np.argmin(scores)))
    assert rec.dot_params.to_dict() == best.to_dict()


def test_static_environment_pins_lux(tiny_world):
    env = static_environment(tiny_world, 3, 120.0)
    assert env.illuminance == 120.0
    assert static_environment(tiny_world, 3, 120.0) == env


def test_refine_improves_on_desk_victim(classifier, surrogate, world):
    cfg = desk_attack(max_epochs=40)
    pipe = Pipeline(classifier, surrogate, world, cfg)
    theta0 = greedy_init(classifier, surrogate, world, 7, cfg, 0, pipeline=pipe)
    theta, hist = refine(theta0, classifier, surrogate, world, 7, cfg, 0, return_history=True, pipeline=pipe)
    rng = np.random.default_rng(99)
    ids, envs = _envs(pipe, 7, 64, rng)
    fresh = pipe.batch(ids, envs, noise_rng=rng)
    assert min(h["holdout"] for h in hist) < hist[0]["holdout"]
    assert pipe.evaluate(theta, fresh) < pipe.evaluate(theta0, fresh)
