import pytest
from hypothesis import given
from hypothesis import strategies as st

from rocl import config as C


def test_defaults_are_valid():
    cfg = C.build({})
    assert cfg["train.lam"] == 1 / 256 and cfg["attack.epsilon"] == 8 / 255
    assert cfg.train_config().attack.loss_kind == "contrastive"
    assert cfg.model_config((3, 16, 16), 2).feature_dim == 32
    assert cfg.smoothing_config().policy.crop_scale_range == (0.54, 0.54)
    assert cfg.smoothing_config().policy.jitter_strengths == cfg.policy().jitter_strengths
    assert cfg.linear_config(robust=True).lr == 0.02


def test_text_parsing_and_fractions():
    cfg = C.parse("# comment\ntrain.lam = 1/128\nmodel.channels = 4, 8\nmodel.feature_dim = 8\n\nlinear.robust = yes\n")
    assert cfg["train.lam"] == 1 / 128 and cfg["model.channels"] == (4, 8) and cfg["linear.robust"] is True


def test_all_problems_reported_together():
    with pytest.raises(C.ConfigError) as info:
        C.build({"train.epochs": "0", "attack.norm": "l3", "nonsense": "1", "train.lam": "abc"})
    text = "\n".join(info.value.problems)
    assert "nonsense: unknown key" in text and "train.lam" in text
    with pytest.raises(C.ConfigError) as info:
        C.build({"train.batch_size": "1", "attack.norm": "l3", "policy.flip_prob": "2"})
    assert len(info.value.problems) == 3


def test_bad_lines_and_paths(tmp_path):
    with pytest.raises(C.ConfigError):
        C.parse_text("just words")
    with pytest.raises(C.ConfigError, match="does not exist"):
        C.load(tmp_path / "missing.cfg")
    with pytest.raises(C.ConfigError):
        C.build({"data.source": "cifar10"})
    with pytest.raises(C.ConfigError):
        C.build({"checkpoint": str(tmp_path / "nope.ckpt")})
    with pytest.raises(C.ConfigError):
        C.load(overrides=["novalue"])
    with pytest.raises(C.ConfigError):
        C.load(preset="imagenet")


def test_layering(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("train.epochs = 20\nseed = 3\n")
    cfg = C.load(path, "toy", ["seed=4"])
    assert cfg["train.epochs"] == 20 and cfg["seed"] == 4
    (tmp_path / "tr").mkdir()
    full = C.load(path, "paper-cifar10", [f"data.train={tmp_path / 'tr'}", f"data.test={tmp_path / 'tr'}"])
    assert full["train.epochs"] == 20 and full["train.batch_size"] == 512 and full["eval.suite"] == "published"
    with pytest.raises(C.ConfigError, match="data.train"):
        C.load(None, "paper-cifar10")


def test_dump_roundtrip_and_hash():
    cfg = C.build({"train.lam": 1 / 3, "model.channels": (4, 8), "model.feature_dim": 8})
    again = C.parse(cfg.dump())
    assert again == cfg and again.hash() == cfg.hash()
    assert cfg.with_(seed=1).hash() != cfg.hash()
    assert cfg.with_(train__epochs=2)["train.epochs"] == 2


@given(st.floats(1e-6, 10), st.integers(0, 10 ** 6), st.booleans())
def test_value_codec_roundtrip(x, n, b):
    for kind, v in [("float", x), ("int", n), ("bool", b), ("floats", (x, x / 3)), ("ints", (n, 1))]:
        assert C.parse_value(kind, C.format_value(kind, v)) == v
