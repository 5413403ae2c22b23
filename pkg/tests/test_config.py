"""INI profile loading."""

import pathlib

import pytest

from goldnas.config import ConfigError, load_profile


MICRO = """\
[shape]
num_cells = 1
nodes_per_cell = 3
initial_channels = 4
input_height = 8
input_width = 8
reduction_cells =

[optimizer]
eta_omega = 0.05
batch_size = 12

[scheduler]
flops_min = 20000
mean_scope = global

[data]
source = synthetic
num_classes = 2
samples_per_class = 24
resolution = 8
"""


def write(tmp_path, text):
    path = tmp_path / "profile.ini"
    path.write_text(text)
    return str(path)


def test_load_profile_values(tmp_path):
    p = load_profile(write(tmp_path, MICRO))
    assert p.shape.num_cells == 1
    assert p.shape.reduction_cells == ()
    assert p.optimizer.eta_omega == 0.05
    assert p.optimizer.eta_alpha == 1.0  # default
    assert p.scheduler.flops_min == 20000
    assert p.scheduler.lambda0 == 1e-5
    assert p.data.samples_per_class == 24
    assert p.augment.enabled is False


def test_default_reductions_applied(tmp_path):
    text = MICRO.replace("num_cells = 1", "num_cells = 14").replace(
        "reduction_cells =\n", ""
    )
    p = load_profile(write(tmp_path, text))
    assert p.shape.reduction_cells == (4, 9)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_profile("/nonexistent/profile.ini")


def test_missing_required_key(tmp_path):
    with pytest.raises(ConfigError, match="num_cells"):
        load_profile(write(tmp_path, "[shape]\nnodes_per_cell = 3\n"))


def test_bad_value(tmp_path):
    with pytest.raises(ConfigError, match="eta_omega"):
        load_profile(write(tmp_path, MICRO.replace("0.05", "fast")))


def test_shipped_profiles_parse():
    root = pathlib.Path(__file__).resolve().parent.parent
    for name in ("profiles/desk.ini", "profiles/paper_cifar10.ini"):
        p = load_profile(str(root / name))
        assert p.scheduler.flops_min > 0


def test_scientific_notation_flops(tmp_path):
    p = load_profile(write(tmp_path, MICRO.replace("20000", "2.4e5")))
    assert p.scheduler.flops_min == 240000
