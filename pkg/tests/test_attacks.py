import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import project_l1_reference
from rocl import attacks as A
from rocl import augment, losses
from rocl import tensor_core as tc
from rocl.model import run_network

TOL = 1e-6


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-2, 2, allow_nan=False)), st.floats(0.01, 3))
def test_l1_projection_matches_exhaustive_oracle(v, eps):
    np.testing.assert_allclose(A.project_l1(v, eps), project_l1_reference(v, eps), atol=1e-9)


def test_l1_projection_frozen_example():
    # sorted-threshold solution by hand: theta = (3 + 2 - 1) / 2 = 2
    np.testing.assert_allclose(A.project_l1(np.array([3.0, -2.0, 0.5]), 1.0), [1.0, 0.0, 0.0])
    np.testing.assert_allclose(A.project_l1(np.array([0.2, -0.3]), 1.0), [0.2, -0.3])
    np.testing.assert_array_equal(A.project_l1(np.ones(3), 0.0), 0)


@given(st.integers(0, 2 ** 31), st.sampled_from(A.NORMS), st.floats(0.0, 5.0), st.booleans())
def test_project_ball_invariants(seed, norm, eps, f64):
    r = np.random.default_rng(seed)
    dtype = np.float64 if f64 else np.float32
    x0 = r.random((3, 2, 4, 4)).astype(dtype)
    x = (x0 + r.standard_normal(x0.shape) * r.uniform(0, 2)).astype(dtype)
    out = A.project_ball(x, x0, eps, norm)
    assert out.dtype == dtype
    assert out.min() >= 0 and out.max() <= 1
    assert (A.ball_norm(out.astype(np.float64) - x0, norm) <= eps + TOL).all()
    again = A.project_ball(out, x0, eps, norm)
    np.testing.assert_allclose(again, out, atol=1e-6)


def test_linf_projection_is_clip(rng):
    x0, x = rng.random((2, 5)), rng.random((2, 5)) * 3 - 1
    np.testing.assert_allclose(A.project_ball(x, x0, 0.1, "linf"), np.clip(np.clip(x, x0 - 0.1, x0 + 0.1), 0, 1))


def test_points_inside_are_untouched(rng):
    x0 = rng.uniform(0.3, 0.7, (2, 8))
    d = rng.standard_normal((2, 8))
    for norm, eps in [("l2", 1.0), ("l1", 1.0), ("linf", 0.2)]:
        x = x0 + d / A.ball_norm(d, norm)[:, None] * eps * 0.5
        np.testing.assert_allclose(A.project_ball(x, x0, eps, norm, None), x, atol=1e-12)


def test_project_ball_errors(rng):
    with pytest.raises(ValueError):
        A.project_ball(rng.random(3), rng.random(4), 1.0, "l2")
    with pytest.raises(ValueError):
        A.project_ball(rng.random(3), rng.random(3), 1.0, "l0")


@pytest.mark.parametrize("norm", A.NORMS)
def test_random_in_ball(norm, rng):
    pts = A.random_in_ball((200, 3, 2), 0.5, norm, rng)
    assert (A.ball_norm(pts, norm) <= 0.5 + 1e-12).all()
    assert A.ball_norm(pts, norm).max() > 0.3


def test_pgd_linear_objective_reaches_the_corner(rng):
    x0 = rng.uniform(0.2, 0.8, (4, 6))
    c = rng.standard_normal((4, 6))
    cfg = A.AttackConfig(epsilon=0.05, step_size=0.02, steps=5)
    with tc.precision("float64"):
        out = A.run_pgd(x0, lambda x: c, cfg)
    np.testing.assert_allclose(out, x0 + 0.05 * np.sign(c), atol=1e-12)


def test_pgd_l2_steepest_step_hits_the_sphere(rng):
    x0 = np.full((1, 10), 0.5)
    c = rng.standard_normal((1, 10))
    cfg = A.AttackConfig(norm="l2", epsilon=0.3, step_size=0.2, steps=4, step_rule="steepest")
    with tc.precision("float64"):
        out = A.run_pgd(x0, lambda x: c, cfg)
    np.testing.assert_allclose(out - x0, 0.3 * c / np.linalg.norm(c), atol=1e-6)


def test_pgd_zero_steps_and_determinism(rng):
    x0 = rng.random((2, 5)).astype(np.float32)
    grad = lambda x: np.cos(7 * x)
    assert np.array_equal(A.run_pgd(x0, grad, A.AttackConfig(steps=0)), x0)
    cfg = A.AttackConfig(steps=3, random_start=True)
    a, b, c = A.run_pgd(x0, grad, cfg, seed=1), A.run_pgd(x0, grad, cfg, seed=1), A.run_pgd(x0, grad, cfg, seed=2)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_pgd_non_finite_gradient_raises(rng):
    with pytest.raises(A.AttackError):
        A.run_pgd(rng.random((1, 3)), lambda x: np.full(x.shape, np.nan), A.AttackConfig(steps=1))


@pytest.mark.parametrize("kwargs", [{"norm": "l3"}, {"epsilon": -1}, {"step_size": 0}, {"steps": -1},
                                    {"loss_kind": "hinge"}, {"step_rule": "adam"}])
def test_attack_config_validation(kwargs):
    with pytest.raises(ValueError):
        A.AttackConfig(**kwargs)


def test_default_step_size():
    assert A.default_step_size(8 / 255, 20) == pytest.approx(2.5 * 8 / 255 / 20)


def _ce(params, cfg, x, y):
    return losses.cross_entropy(run_network(params, cfg, x, ("logits",))[0]["logits"], y)


def test_supervised_pgd_increases_loss(tiny_config, tiny_params, tiny_toy):
    x, y = tiny_toy.images[:16], tiny_toy.labels[:16]
    cfg = A.AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=5)
    adv = A.pgd_supervised(tiny_config, tiny_params, x, y, cfg, seed=0)
    assert (A.ball_norm(adv - x, "linf") <= cfg.epsilon + TOL).all()
    assert _ce(tiny_params, tiny_config, adv, y) > _ce(tiny_params, tiny_config, x, y)
    with pytest.raises(ValueError):
        A.pgd_supervised(tiny_config, tiny_params, x, y, cfg.with_(loss_kind="mse"))


def test_cw_attack_lowers_margin(tiny_config, tiny_params, tiny_toy):
    x, y = tiny_toy.images[:16], tiny_toy.labels[:16]
    adv = A.cw_attack(tiny_config, tiny_params, x, y, A.AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=5))
    logit = lambda v: run_network(tiny_params, tiny_config, v, ("logits",))[0]["logits"]
    assert losses.cw_margin(logit(adv), y) < losses.cw_margin(logit(x), y)


@pytest.mark.parametrize("kind", losses.ATTACK_KINDS)
def test_instance_attack_increases_its_distance(kind, tiny_config, tiny_params, tiny_toy):
    # the reference is another view (a flip), as in training; at z == ref mse/manhattan have zero gradient
    x = tiny_toy.images[:8]
    embed = lambda v: run_network(tiny_params, tiny_config, v, ("z",))[0]["z"]
    z, ref = embed(x), embed(x[..., ::-1].copy())[:, None]
    mask = ~np.eye(8, dtype=bool)
    cfg = A.AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=5, loss_kind=kind)
    adv = A.instance_wise_attack(tiny_config, tiny_params, x, ref, z, cfg, negative_mask=mask)
    ctx = losses.AttackContext(z, mask)
    assert losses.attack_distance(kind, embed(adv), ref, ctx) > losses.attack_distance(kind, z, ref, ctx)


def test_instance_attack_needs_negatives(tiny_config, tiny_params, tiny_toy):
    x = tiny_toy.images[:2]
    with pytest.raises(ValueError):
        A.instance_wise_attack(tiny_config, tiny_params, x, np.ones((2, 1, 6)), None,
                               A.AttackConfig(loss_kind="contrastive"))


def test_eot_gradient_single_identity_transform_is_plain_gradient(tiny_config, tiny_params, tiny_toy):
    x, y = tiny_toy.images[:4].astype(np.float64), tiny_toy.labels[:4]
    spec = augment.sample_transform(augment.identity_policy(), 0, x.shape[1:])
    with tc.precision("float64"):
        eot = A.eot_gradient(tiny_config, tiny_params, x, y, [[spec]] * 4)
        plain = A.classifier_objective(tiny_config, tiny_params, y)(x)
    np.testing.assert_allclose(eot, plain, rtol=1e-8, atol=1e-12)


def test_eot_attack_stays_in_ball(tiny_config, tiny_params, tiny_toy):
    x, y = tiny_toy.images[:4], tiny_toy.labels[:4]
    cfg = A.AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=2)
    adv = A.eot_attack(tiny_config, tiny_params, x, y, cfg, 3, augment.smoothing_policy(), seed=0)
    assert (A.ball_norm(adv - x, "linf") <= cfg.epsilon + TOL).all()
    assert np.array_equal(adv, A.eot_attack(tiny_config, tiny_params, x, y, cfg, 3, augment.smoothing_policy(), seed=0))
    with pytest.raises(ValueError):
        A.eot_attack(tiny_config, tiny_params, x, y, cfg, 0, augment.smoothing_policy())
