from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rocl import attacks, augment
from rocl import evaluation as E
from rocl.model import ENCODER, PROJECTOR, init_params

FAST = E.LinearEvalConfig(epochs=3, batch_size=16, lr=0.1, seed=0)
PGD = attacks.AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=3, random_start=True)


@pytest.fixture
def split(tiny_toy):
    return tiny_toy.subset(np.arange(32)), tiny_toy.subset(np.arange(32, 48), "test")


def test_linear_eval_milestones_scale():
    cfg = E.LinearEvalConfig(epochs=30, lr=1.0)
    assert [cfg.lr_at(e) for e in (0, 5, 6, 10, 20)] == [1.0, 1.0, pytest.approx(0.1), pytest.approx(0.01),
                                                         pytest.approx(0.001)]
    assert E.transfer_preset().lr_at(99) == 0.2
    assert E.robust_linear_preset().lr == 0.02
    with pytest.raises(ValueError):
        E.LinearEvalConfig(epochs=0)


def test_linear_eval_trains_only_the_head(tiny_config, tiny_params, split):
    train, test = split
    before = tiny_params.fingerprint(*E.FROZEN_TAGS)
    params, acc = E.linear_eval(tiny_params, tiny_config, train, FAST, test)
    assert tiny_params.fingerprint(*E.FROZEN_TAGS) == before
    assert params.fingerprint(ENCODER, PROJECTOR) == tiny_params.fingerprint(ENCODER, PROJECTOR)
    assert params.tensors["head.w"].tobytes() != tiny_params.tensors["head.w"].tobytes()
    assert 0 <= acc <= 100
    assert E.linear_eval(tiny_params, tiny_config, train, FAST, test)[1] == acc
    with pytest.raises(ValueError):
        E.linear_eval(tiny_params, tiny_config, train.unlabeled(), FAST)


def test_linear_eval_separates_separable_features(tiny_config, tiny_params, split):
    # an input whose mean colour encodes the label is linearly separable through a random CNN
    train, _ = split
    imgs = np.where(train.labels[:, None, None, None] == 1, 0.9, 0.1) * np.ones_like(train.images)
    ds = replace(train, images=imgs.astype(np.float32))
    _, acc = E.linear_eval(tiny_params, tiny_config, ds, replace(FAST, epochs=20))
    assert acc == 100.0


def test_freeze_guard_detects_mutation(tiny_params):
    check = E._freeze_guard(tiny_params)
    check("noop")
    tiny_params.tensors["enc.conv0.w"][0, 0, 0, 0] += 1
    with pytest.raises(E.FrozenParameterError):
        check("mutated")


def test_robust_linear_eval(tiny_config, tiny_params, split):
    train, test = split
    before = tiny_params.fingerprint(*E.FROZEN_TAGS)
    cfg = replace(FAST, epochs=1, attack=PGD)
    _, acc = E.robust_linear_eval(tiny_params, tiny_config, train, cfg, test)
    assert 0 <= acc <= 100 and tiny_params.fingerprint(*E.FROZEN_TAGS) == before
    zero = replace(FAST, attack=PGD.with_(steps=0, random_start=False))
    assert E.robust_linear_eval(tiny_params, tiny_config, train, zero, test)[1] == \
        E.linear_eval(tiny_params, tiny_config, train, zero, test)[1]


def test_report_csv_roundtrip():
    rep = E.RobustnessReport(81.25, [E.AttackRow("linf", 8 / 255, 20, 40.5), E.AttackRow("cw", 8 / 255, 20, 1.0)],
                             model="rocl")
    text = rep.to_csv()
    assert text.splitlines()[0] == "model,attack_norm,epsilon,steps,accuracy"
    assert text.splitlines()[1] == "rocl,none,0,0,81.25"
    assert text.splitlines()[2] == "rocl,linf,0.0313725,20,40.50"
    back = E.RobustnessReport.from_csv(text + rep.to_csv().replace("rocl", "at").split("\n", 1)[1])
    assert [r.model for r in back] == ["rocl", "at"]
    assert back[0].clean_accuracy == 81.25 and back[0].rows[1].attack == "cw"
    assert back[0].to_csv() == text
    with pytest.raises(ValueError):
        E.RobustnessReport(101.0)
    with pytest.raises(ValueError):
        E.RobustnessReport.from_csv("a,b\n")


def test_published_suite():
    suite = E.published_suite(20)
    grid = [(attack_label, round(a.epsilon, 6)) for a in suite for attack_label in [E.attack_label(a)]]
    assert grid == [("linf", round(8 / 255, 6)), ("linf", round(16 / 255, 6)), ("l2", 0.25), ("l2", 0.5),
                    ("l1", 7.84), ("l1", 12.0), ("cw", round(8 / 255, 6))]
    assert all(a.random_start and a.steps == 20 for a in suite)
    assert suite[0].step_size == pytest.approx(2.5 * (8 / 255) / 20)


def test_scaled_suite():
    s = E.scaled_suite((3, 16, 16), 20)
    assert s[0].epsilon == pytest.approx(8 / 255) and s[2].epsilon == pytest.approx(0.25 / 2)
    assert s[4].epsilon == pytest.approx(7.84 / 4) and s[6].epsilon == pytest.approx(8 / 255)


def test_adversarial_examples_worker_invariant(tiny_config, tiny_params, tiny_toy, monkeypatch):
    monkeypatch.setattr(E, "EVAL_CHUNK", 10)
    x, y = tiny_toy.images, tiny_toy.labels
    a = E.adversarial_examples(tiny_params, tiny_config, x, y, PGD, seed=1, workers=1)
    b = E.adversarial_examples(tiny_params, tiny_config, x, y, PGD, seed=1, workers=4)
    assert a.tobytes() == b.tobytes()


def test_evaluate_robustness(tiny_config, tiny_params, split):
    _, test = split
    rep = E.evaluate_robustness(tiny_params, tiny_config, test, [PGD, PGD.with_(loss_kind="cw_margin")], seed=0,
                                model_id="m")
    assert [r.attack for r in rep.rows] == ["linf", "cw"]
    assert rep.clean_accuracy == E.accuracy(tiny_params, tiny_config, test.images, test.labels)
    assert all(0 <= r.accuracy <= 100 for r in rep.rows)


def test_blackbox_self_transfer_equals_white_box(tiny_config, tiny_params, split):
    _, test = split
    acc = E.blackbox_eval(tiny_params, tiny_config, tiny_params, tiny_config, test, PGD, seed=0)
    adv = E.adversarial_examples(tiny_params, tiny_config, test.images, test.labels, PGD,
                                 augment.derive_seed(0, 707))
    assert acc == E.accuracy(tiny_params, tiny_config, adv, test.labels)


def test_blackbox_instance_source(tiny_config, tiny_params, split):
    _, test = split
    adv = E.blackbox_examples(tiny_params, tiny_config, test, PGD, "instance", seed=0)
    assert np.abs(adv - test.images).max() <= PGD.epsilon + 1e-6
    with pytest.raises(ValueError):
        E.blackbox_examples(tiny_params, tiny_config, test, PGD, "query")


def test_smoothing_with_identity_policy_is_plain_prediction(tiny_config, tiny_params, tiny_toy):
    sc = E.SmoothingConfig(n_samples=4, policy=augment.identity_policy())
    plain = E.predict(tiny_params, tiny_config, tiny_toy.images)
    np.testing.assert_array_equal(E.smoothed_predict(tiny_params, tiny_config, tiny_toy.images, sc), plain)
    vote = replace(sc, aggregation="logit_vote")
    np.testing.assert_array_equal(E.smoothed_predict(tiny_params, tiny_config, tiny_toy.images, vote), plain)


@given(st.integers(0, 47), st.integers(0, 2 ** 31))
def test_smoothed_prediction_does_not_depend_on_batch(tiny_config, tiny_toy, i, seed):
    params = init_params(tiny_config, 1)
    sc = E.SmoothingConfig(n_samples=3)
    batch = E.smoothed_predict(params, tiny_config, tiny_toy.images, sc, seed)
    assert E.smoothed_predict(params, tiny_config, tiny_toy.images[i], sc, seed, indices=[i]) == batch[i]


def test_smoothing_curve_rows(tiny_config, tiny_params, split):
    _, test = split
    rows = E.smoothing_curve(tiny_params, tiny_config, test, (1, 3), adversarial_images=test.images)
    assert [r.n for r in rows] == [1, 3]
    assert all(r.clean_accuracy == r.robust_accuracy for r in rows)
    with pytest.raises(ValueError):
        E.SmoothingConfig(n_samples=0)
    with pytest.raises(ValueError):
        E.SmoothingConfig(aggregation="median")


def test_eot_smoothed_accuracy(tiny_config, tiny_params, split):
    _, test = split
    acc = E.eot_smoothed_accuracy(tiny_params, tiny_config, test, E.SmoothingConfig(n_samples=2),
                                  PGD.with_(steps=1), seed=0)
    assert 0 <= acc <= 100
    assert (E.eot_preset().epsilon, E.eot_preset().step_size, E.eot_preset().steps) == (0.0314, 0.00314, 20)


def test_transfer_eval_resizes_head_and_freezes(tiny_config, tiny_params):
    from rocl.data import generate_toy_dataset
    b = generate_toy_dataset(3, 10, 8, seed=9)
    before = tiny_params.fingerprint(*E.FROZEN_TAGS)
    params, rep = E.transfer_eval(tiny_params, tiny_config, b, b, replace(FAST, epochs=2), [PGD], model_id="t")
    assert params.tensors["head.w"].shape == (8, 3)
    assert tiny_params.fingerprint(*E.FROZEN_TAGS) == before and rep.model == "t" and len(rep.rows) == 1
