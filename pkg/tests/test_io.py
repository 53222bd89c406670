import json

import numpy as np
import pytest

from handobj.io import (
    DataError,
    filter_config_from_kv,
    parse_kv_config,
    read_jsonl,
    read_sequence,
    write_sequence,
)
from handobj.synth import SynthConfig, generate_synthetic


@pytest.fixture
def seq_file(tmp_path, template):
    s = generate_synthetic(SynthConfig(n_frames=5, seed=1), template)
    path = tmp_path / "seq.jsonl"
    write_sequence(path, s.sequence)
    return path, s.sequence


def test_round_trip(seq_file):
    path, seq = seq_file
    back = read_sequence(path)
    assert back.sequence_id == seq.sequence_id
    for a, b in zip(seq.frames, back.frames):
        assert np.array_equal(a.prediction.j3d, b.prediction.j3d)
        assert np.array_equal(a.prediction.params.theta, b.prediction.params.theta)
        assert a.gt_hand_box == b.gt_hand_box
    header = json.loads(path.read_text().splitlines()[0])
    assert header["version"] == 1 and header["num_vertices"] == 120


def _rewrite(path, lineno, mutate):
    lines = path.read_text().splitlines()
    doc = json.loads(lines[lineno - 1])
    mutate(doc)
    lines[lineno - 1] = json.dumps(doc)
    path.write_text("\n".join(lines) + "\n")


@pytest.mark.parametrize("mutate", [
    lambda d: d["j2d"].pop(),
    lambda d: d.pop("theta"),
    lambda d: d.__setitem__("frame_index", "x"),
    lambda d: d["beta"].append(0.0),
    lambda d: d["vertices"].pop(),
])
def test_malformed_line_reports_line_number(seq_file, mutate):
    path, _ = seq_file
    _rewrite(path, 3, mutate)
    with pytest.raises(DataError) as info:
        read_sequence(path)
    assert info.value.line == 3


def test_non_finite_rejected(seq_file):
    path, _ = seq_file
    lines = path.read_text().splitlines()
    lines[2] = lines[2].replace("\"theta\":[", "\"theta\":[NaN,", 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError) as info:
        read_sequence(path)
    assert info.value.line == 3


def test_order_enforced(seq_file):
    path, _ = seq_file
    lines = path.read_text().splitlines()
    lines[2], lines[3] = lines[3], lines[2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="ascending"):
        read_sequence(path)


def test_bad_header(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"schema": "other"}\n')
    with pytest.raises(DataError):
        read_sequence(p)
    p.write_text("")
    with pytest.raises(DataError):
        read_sequence(p)


def test_read_jsonl_line_numbers(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"a": 1}\n\n{oops\n')
    with pytest.raises(DataError) as info:
        read_jsonl(p)
    assert info.value.line == 3


def test_kv_config():
    vals = parse_kv_config("# thresholds\n t_p = 0.7  # looser\n\nangle_max=100\n")
    assert vals == {"t_p": "0.7", "angle_max": "100"}
    cfg = filter_config_from_kv(vals)
    assert cfg.t_p == 0.7 and cfg.angle_range == (0.0, 100.0)
    with pytest.raises(DataError):
        parse_kv_config("novalue\n")
    with pytest.raises(ValueError):
        filter_config_from_kv({"nope": "1"})
    with pytest.raises(ValueError):
        filter_config_from_kv({"t_j": "-1"})
    with pytest.raises(ValueError):
        filter_config_from_kv({"t_j": "inf"})
