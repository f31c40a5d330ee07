from __future__ import annotations

import xml.etree.ElementTree as ET

import pytest

from lkda.config import ConfigKeyError, RunConfig, format_config, parse_config
from lkda.svgplot import line_chart


def test_parse_sections_and_types():
    cfg = parse_config("""
        # comment line
        gen.n_train = 120   # trailing comment
        gen.confounder_strength = 0.5
        model.d_graph = 16
        train.mode = baseline_ce
        train.lr_text = 3e-3
    """)
    assert cfg.gen.n_train == 120 and cfg.gen.confounder_strength == 0.5
    assert cfg.model.d_graph == 16
    assert cfg.train.mode == "baseline_ce" and cfg.train.lr_text == 3e-3


def test_unknown_key_is_named():
    with pytest.raises(ConfigKeyError, match="gen.n_trian") as info:
        parse_config("gen.n_trian = 5\n")
    assert info.value.key == "gen.n_trian" and info.value.line == 1
    with pytest.raises(ConfigKeyError, match="optim.lr"):
        parse_config("optim.lr = 1\n")


def test_bad_value_and_duplicates():
    with pytest.raises(ConfigKeyError, match="train.epochs"):
        parse_config("train.epochs = many\n")
    with pytest.raises(ConfigKeyError, match="duplicate"):
        parse_config("train.epochs = 1\ntrain.epochs = 2\n")
    with pytest.raises(ConfigKeyError):
        parse_config("just words\n")


def test_format_round_trip():
    cfg = RunConfig().with_seed(7)
    assert parse_config(format_config(cfg)) == cfg


def test_svg_well_formed_one_path_per_series():
    svg = line_chart([("top", [0, 0.5, 1], [1, 0.5, 0.25]),
                      ("random", [0, 0.5, 1], [1, 0.8, 0.25]),
                      ("a<b&c", [0, 1], [0.3, 0.3])], title="t", x_label="x", y_label="y")
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    assert root.tag == ns + "svg"
    assert len(root.findall(f".//{ns}path")) == 3
    assert "a&lt;b&amp;c" in svg


def test_svg_rejects_bad_series():
    with pytest.raises(ValueError):
        line_chart([])
    with pytest.raises(ValueError):
        line_chart([("x", [0, 1], [1])])
