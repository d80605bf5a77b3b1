import pytest

from mftrack.config import ENV_VAR, ConfigError, check_paths, load_config


def test_defaults_and_overrides():
    cfg = load_config(None, ["train.steps=7", "backbone.block_channel_widths=4,8,8,8",
                             "fusion.level=feature", "global.seed=3"])
    assert cfg.get("train", "steps") == 7
    assert cfg.get("backbone", "block_channel_widths") == (4, 8, 8, 8)
    assert cfg.build("fusion").level == "feature"
    assert cfg.seed == 3
    assert cfg.get("eval", "protocol") == "ope"


def test_file_then_flags(tmp_path, monkeypatch):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nsteps = 5\nbeta = 0.5\n")
    monkeypatch.setenv(ENV_VAR, str(path))
    cfg = load_config(None, ["train.steps=9"])
    assert cfg.get("train", "steps") == 9 and cfg.get("train", "beta") == 0.5
    assert cfg.source == str(path)


def test_all_errors_collected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nsteps = x\nbeta = -1\n[fusion]\nlevel = telepathy\n[oops]\na = 1\n")
    with pytest.raises(ConfigError) as exc:
        load_config(path, ["nodot=1"])
    text = str(exc.value)
    for fragment in ("steps", "oops", "nodot", "telepathy"):
        assert fragment in text
    assert len(exc.value.errors) >= 4


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.ini")


def test_check_paths(tmp_path):
    (tmp_path / "final.npz").write_bytes(b"")
    cfg = load_config(None, [f"paths.data={tmp_path}", f"paths.checkpoint={tmp_path / 'final'}",
                             f"paths.results={tmp_path / 'nope'}"])
    assert check_paths(cfg, ["data", "checkpoint"]) == []
    errors = check_paths(cfg, ["results", "test_data"])
    assert len(errors) == 2 and "nope" in errors[0]
