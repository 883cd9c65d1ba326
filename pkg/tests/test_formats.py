import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spsmask.config import PipelineConfig, load_config, save_config
from spsmask.errors import InputError
from spsmask.params import WEIGHTS_HEADER, format_tensors, load_tensors, parse_tensors, save_tensors
from spsmask.records import (
    MASKS_HEADER,
    format_mask_record,
    format_pgm,
    parse_mask_record,
    parse_pgm,
    rle_decode,
    rle_encode,
    write_mask_records,
)
from spsmask.scene import SyntheticScene, generate_scene, load_scene, save_scene


def test_weights_text_exact_round_trip(rng):
    t = {"a.weight": rng.standard_normal((3, 2)), "a.bias": rng.standard_normal(3), "k": rng.standard_normal((2, 1, 3, 3))}
    back = parse_tensors(format_tensors(t))
    assert list(back) == sorted(t)
    for k in t:
        np.testing.assert_array_equal(back[k], t[k])


def test_weights_text_layout():
    text = format_tensors({"m.0.bias": np.array([0.5, -1.0])})
    assert text.splitlines() == [WEIGHTS_HEADER, "m.0.bias 2 0.5 -1.0"]


def test_weights_text_errors(tmp_path):
    with pytest.raises(InputError):
        parse_tensors("no header\n")
    with pytest.raises(InputError, match="x"):
        parse_tensors(f"{WEIGHTS_HEADER}\nx 2,2 1 2 3\n")
    with pytest.raises(OSError, match="missing.txt"):
        load_tensors(tmp_path / "missing.txt")


def test_weights_file(tmp_path, rng):
    t = {"w": rng.standard_normal((4,))}
    save_tensors(tmp_path / "w.txt", t)
    np.testing.assert_array_equal(load_tensors(tmp_path / "w.txt")["w"], t["w"])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9), st.integers(1, 9))
def test_rle_round_trip(seed, h, w):
    m = np.random.default_rng(seed).uniform(size=(h, w)) > 0.5
    runs = rle_encode(m)
    assert sum(runs) == h * w
    assert all(r > 0 for r in runs[1:])
    np.testing.assert_array_equal(rle_decode(runs, (h, w)), m)


def test_rle_starts_with_background():
    assert rle_encode(np.array([[True, True], [False, True]])) == [0, 2, 1, 1]
    assert rle_encode(np.zeros((2, 2), bool)) == [4]
    with pytest.raises(InputError):
        rle_decode([1, 2], (2, 2))


def test_mask_records(tmp_path):
    m = np.zeros((3, 4))
    m[1, 1:3] = 0.9
    line = format_mask_record(2, 0.123456789123, m > 0.5)
    assert line == "2 0.123456789 3 4 5 2 5"
    i, s, back = parse_mask_record(line)
    assert i == 2 and s == pytest.approx(0.123456789)
    np.testing.assert_array_equal(back, m > 0.5)
    write_mask_records(tmp_path / "m.txt", [m], [0.5])
    assert (tmp_path / "m.txt").read_text().splitlines()[0] == MASKS_HEADER


def test_pgm_round_trip(rng):
    p = rng.uniform(size=(5, 20))
    text = format_pgm(p, "test")
    assert text.startswith("P2\n# test\n20 5\n255\n")
    assert max(len(ln) for ln in text.splitlines()) < 70
    vals, maxval = parse_pgm(text)
    assert maxval == 255
    np.testing.assert_array_equal(vals, np.rint(p * 255).astype(int))


def test_config_json(tmp_path):
    cfg = PipelineConfig(top_k=None, module="deform", feature_size=32)
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    assert load_config(None) == PipelineConfig()
    (tmp_path / "bad.json").write_text(json.dumps({"top_k": 3, "colour": 1}))
    with pytest.raises(InputError, match="colour"):
        load_config(tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(InputError, match="broken.json"):
        load_config(tmp_path / "broken.json")


@pytest.mark.parametrize("bad", [dict(module="attention"), dict(top_k=-1), dict(feature_size=12), dict(mask_threshold=1.0)])
def test_config_validation(bad):
    with pytest.raises(InputError):
        PipelineConfig(**bad)


def test_scene_round_trip(tmp_path):
    scene = generate_scene(5, 4, (128, 160), channels=8)
    save_scene(scene, tmp_path / "s.json")
    back = load_scene(tmp_path / "s.json")
    assert back == scene
    assert back.to_json() == (tmp_path / "s.json").read_text()
    np.testing.assert_array_equal(back.pyramid().levels[3], scene.pyramid().levels[3])
    with pytest.raises(InputError):
        SyntheticScene.from_json('{"format": "other"}')
