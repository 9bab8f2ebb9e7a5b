import pytest

from kalman_drift.config import ConfigError, TrainerConfig, build_config, parse_config_text


def test_defaults():
    c = build_config()
    assert c.architecture == (784, 256, 10)
    assert (c.lr, c.batch_size, c.epochs_per_task, c.noise_floor) == (0.1, 64, 5, 1e-12)
    assert (c.noise_transform, c.eval_every) == ("square", 50)
    assert c.learners() == ("conventional", "kalman")


def test_file_then_flags(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlr = 0.05\narchitecture = 784, 32, 10  # small\n\nseed=4\n")
    c = build_config(path, {"seed": 9, "learner": "kalman"})
    assert c.lr == 0.05 and c.architecture == (784, 32, 10)
    assert c.seed == 9 and c.learners() == ("kalman",)


def test_text_roundtrip(tmp_path):
    c = TrainerConfig(lr=0.03, tasks=("identity", "shift_labels"), noise_transform="abs")
    path = tmp_path / "c.cfg"
    path.write_text(c.to_text())
    assert build_config(path) == c
    assert build_config(path).digest() == c.digest()


@pytest.mark.parametrize("override, field", [
    ({"lr": "-0.1"}, "lr"),
    ({"lr": "0"}, "lr"),
    ({"batch_size": "0"}, "batch_size"),
    ({"epochs_per_task": "0"}, "epochs_per_task"),
    ({"noise_floor": "0"}, "noise_floor"),
    ({"noise_transform": "cube"}, "noise_transform"),
    ({"eval_every": "0"}, "eval_every"),
    ({"label_offset": "10"}, "label_offset"),
    ({"learner": "ewc"}, "learner"),
    ({"tasks": "identity, rotate"}, "tasks"),
    ({"tasks": "shift_labels, identity"}, "tasks"),
    ({"architecture": "784, 0, 10"}, "architecture"),
    ({"lr": "fast"}, "lr"),
    ({"momentum": "0.9"}, "momentum"),
])
def test_invalid_values_name_the_field(override, field):
    with pytest.raises(ConfigError, match=rf"^{field}:"):
        build_config(overrides=override)


def test_malformed_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("lr = 0.1\nnonsense\n")


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        build_config(tmp_path / "missing.cfg")
