import pytest

from dpaat.attacks import INF
from dpaat.config import ConfigError, default_config, parse_config, parse_lines


def test_alpha_value():
    assert parse_lines(["train.alpha = 0.5"]).train.alpha == 0.5


def test_defaults():
    cfg = parse_lines([])
    assert cfg.train.lr == 0.0003
    assert cfg.train.attack.steps == 7 and cfg.train.attack.p == 2 and cfg.train.attack.epsilon == 0.3
    assert list(cfg.eval_attacks) == ["FGSM", "10-IFGSM", "20-IFGSM", "20-PGD", "50-PGD"]
    assert cfg.eval_attacks["20-IFGSM"].p == INF and cfg.eval_attacks["50-PGD"].p == 2
    assert cfg.eval_attacks["20-PGD"].clamp_range == (0.0, 1.0)


def test_alpha_out_of_range():
    with pytest.raises(ConfigError, match="train.alpha"):
        parse_lines(["train.alpha = 1.5"])


def test_parse_error_has_line_number(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("# comment\ntrain.alpha = 0.5\nthis is not valid\n")
    with pytest.raises(ConfigError, match=r"exp.cfg:3"):
        parse_config(path)


def test_unknown_key():
    with pytest.raises(ConfigError, match="train.alpah"):
        parse_lines(["train.alpah = 0.5"])


def test_comments_and_overrides():
    cfg = parse_lines(["train.method = at  # inline", "", "eval.attacks = FGSM, 5-PGD"], overrides=["train.beta=0"])
    assert cfg.train.method == "AT" and cfg.train.beta == 0.0
    assert list(cfg.eval_attacks) == ["FGSM", "5-PGD"]


def test_bad_override():
    with pytest.raises(ConfigError):
        parse_lines([], overrides=["train.alpha"])


def test_bad_attack_name():
    with pytest.raises(ConfigError, match="eval.attacks"):
        parse_lines(["eval.attacks = PGD-20"])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "none.cfg")


def test_default_config_kwargs():
    cfg = default_config(train__epochs=3, data__per_class=10)
    assert cfg.train.epochs == 3 and cfg.data.per_class == 10
