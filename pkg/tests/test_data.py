"""Parsers, windowing, grouping and normalization contracts."""

import numpy as np
import pytest

from ihvrnn import data
from ihvrnn.errors import DataError, ParseError
from ihvrnn.synth import TeamGameConfig, gen_team_game


# ---------------------------------------------------------------------------
# pedestrian TSV

def test_ped_tsv_basic_fixture(tmp_path):
    p = tmp_path / "fixture.tsv"
    p.write_text("0 1 0.0 0.0\n10 1 1.0 0.0\n0 2 5.0 5.0\n")
    scenes = data.load_ped_tsv(p)
    assert len(scenes) == 1
    scene = scenes[0]
    assert scene.n_agents == 2
    assert scene.frame_rate_hz == 2.5
    a1 = next(a for a in scene.agents if a.agent_id == 1)
    assert a1.n_frames == 2
    np.testing.assert_array_equal(a1.frame_idx, [0, 10])


def test_ped_tsv_comments_and_blank_lines(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("# header\n\n0 1 0.0 0.0\n1 1 0.5 0.0\n")
    scene = data.load_ped_tsv(p)[0]
    assert scene.n_agents == 1


def test_ped_tsv_empty_file_errors(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    with pytest.raises(DataError, match="no tracks"):
        data.load_ped_tsv(p)


def test_ped_tsv_malformed_field_names_line(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("0 1 abc 0.0\n")
    with pytest.raises(ParseError, match="line 1"):
        data.load_ped_tsv(p)


def test_ped_tsv_wrong_field_count(tmp_path):
    p = tmp_path / "bad2.tsv"
    p.write_text("0 1 0.0\n")
    with pytest.raises(ParseError, match="line 1"):
        data.load_ped_tsv(p)


def test_ped_tsv_duplicate_frame_agent(tmp_path):
    p = tmp_path / "dup.tsv"
    p.write_text("0 1 0.0 0.0\n0 1 1.0 1.0\n")
    with pytest.raises(DataError, match="duplicate"):
        data.load_ped_tsv(p)


def test_ped_tsv_nonfinite_rejected(tmp_path):
    p = tmp_path / "nan.tsv"
    p.write_text("0 1 nan 0.0\n")
    with pytest.raises(DataError, match="line 1"):
        data.load_ped_tsv(p)


# ---------------------------------------------------------------------------
# team track file

def _tiny_soccer_doc():
    return "\n".join([
        "{",
        '  "scene_id": "tiny",',
        '  "frame_rate_hz": 10,',
        '  "teams": [[0, 1, 2], [3, 4, 5]],',
        '  "frames": [',
        '    {"frame": 0, "positions": {"0": [0, 0], "1": [1, 0], "2": [2, 0], '
        '"3": [10, 0], "4": [11, 0], "5": [12, 0]}},',
        '    {"frame": 1, "positions": {"0": [0, 1], "1": [1, 1], "2": [2, 1], '
        '"3": [10, 1], "4": [11, 1], "5": [12, 1]}}',
        "  ]",
        "}",
    ])


def test_soccer_parse_fixture(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(_tiny_soccer_doc())
    scene = data.load_soccer_json(p)
    assert scene.n_agents == 6
    assert scene.frame_rate_hz == 10.0
    assert all(a.n_frames == 2 for a in scene.agents)
    assert [a.static_group for a in scene.agents] == [0, 0, 0, 1, 1, 1]


def test_soccer_roster_shrink_errors(tmp_path):
    doc = _tiny_soccer_doc().replace(
        '{"frame": 1, "positions": {"0": [0, 1], "1": [1, 1], "2": [2, 1], '
        '"3": [10, 1], "4": [11, 1], "5": [12, 1]}}',
        '{"frame": 1, "positions": {"0": [0, 1], "1": [1, 1], '
        '"3": [10, 1], "4": [11, 1], "5": [12, 1]}}')
    p = tmp_path / "shrunk.json"
    p.write_text(doc)
    with pytest.raises(DataError, match="roster"):
        data.load_soccer_json(p)


def test_soccer_missing_frame_errors(tmp_path):
    doc = _tiny_soccer_doc().replace('"frame": 1', '"frame": 3')
    p = tmp_path / "gap.json"
    p.write_text(doc)
    with pytest.raises(DataError, match="missing frame"):
        data.load_soccer_json(p)


def test_soccer_round_trip_bit_exact(tmp_path):
    scene, _ = gen_team_game(TeamGameConfig(n_per_team=3, T=12, seed=5))
    p = tmp_path / "rt.json"
    data.save_soccer_json(scene, p)
    back = data.load_soccer_json(p)
    assert back.scene_id == scene.scene_id
    for a, b in zip(scene.agents, back.agents):
        assert a.agent_id == b.agent_id and a.static_group == b.static_group
        np.testing.assert_array_equal(a.xy, b.xy)   # bit-exact via 17 sig digits
        np.testing.assert_array_equal(a.frame_idx, b.frame_idx)
    # and the serialized bytes themselves are reproducible
    p2 = tmp_path / "rt2.json"
    data.save_soccer_json(back, p2)
    assert p.read_bytes() == p2.read_bytes()


# ---------------------------------------------------------------------------
# windowing

def _line_scene(n_agents, n_frames, missing=()):
    agents = []
    for i in range(n_agents):
        frames = [f for f in range(n_frames) if (i, f) not in missing]
        xy = np.array([[f * 0.5 + i, i * 2.0] for f in frames])
        agents.append(data.AgentTrack(agent_id=i, frame_idx=np.array(frames), xy=xy))
    return data.Scene(scene_id="line", frame_rate_hz=2.5, agents=agents)


def test_window_single_agent_yields_nothing():
    scene = _line_scene(1, 100)
    assert data.window_segments(scene, 50, 10, 1) == []


def test_window_count_exact():
    assert len(data.window_segments(_line_scene(2, 60), 50, 10, 1)) == 1
    assert len(data.window_segments(_line_scene(2, 62), 50, 10, 1)) == 3


def test_window_count_formula_randomized():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = int(rng.integers(5, 80))
        t_obs = int(rng.integers(1, 6))
        t_pre = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 5))
        expected = max(0, (T - t_obs - t_pre) // stride + 1) if T >= t_obs + t_pre else 0
        got = len(data.window_segments(_line_scene(3, T), t_obs, t_pre, stride))
        assert got == expected


def test_window_drops_gapped_agents():
    scene = _line_scene(3, 30, missing={(2, 10)})
    windows = data.window_segments(scene, 8, 4, 1)
    for w in windows:
        covers_gap = w.start_frame <= 10 < w.start_frame + 12
        assert (2 in w.agent_ids) == (not covers_gap)


def test_window_short_scene_empty():
    assert data.window_segments(_line_scene(2, 10), 50, 10, 1) == []


# ---------------------------------------------------------------------------
# dynamic grouping

def _window_from_tracks(xy, frame_rate=2.5):
    """xy: [n, T, 2]; splits in half between obs and pred."""
    n, T, _ = xy.shape
    half = T // 2
    groups = data.GroupAssignment.from_membership(np.zeros((T, n), dtype=np.int64), 1)
    return data.SegmentWindow(obs=xy[:, :half], pred=xy[:, half:], agent_ids=list(range(n)),
                              groups=groups, frame_rate_hz=frame_rate)


def test_groups_constant_heading_quadrant_zero():
    T = 8
    xy = np.array([[[t * 1.0, t * 0.1] for t in range(T)]])
    xy = np.concatenate([xy, xy + 5.0])   # need >= 1 agent; give it company
    w = _window_from_tracks(xy)
    ga = data.assign_groups_dynamic(w, n_groups=4, min_speed=0.1)
    assert np.all(ga.membership[:, 0] == 0)


def test_groups_stationary_agent_group_zero():
    T = 8
    still = np.tile(np.array([[3.0, 3.0]]), (T, 1))[None]
    mover = np.array([[[t * 1.0, 0.0] for t in range(T)]])
    w = _window_from_tracks(np.concatenate([still, mover]))
    ga = data.assign_groups_dynamic(w, n_groups=4, min_speed=0.1)
    assert np.all(ga.membership[:, 0] == 0)


def test_groups_east_east_west():
    T = 6
    east = np.array([[[t * 1.0, 0.0] for t in range(T)]])
    west = np.array([[[-t * 1.0, 0.0] for t in range(T)]])
    xy = np.concatenate([east, east + np.array([0.0, 2.0]), west])
    w = _window_from_tracks(xy)
    ga = data.assign_groups_dynamic(w, n_groups=4, min_speed=0.1)
    assert list(ga.membership[2]) == [0, 0, 2]
    assert list(ga.active[2]) == [True, False, True, False]


def test_groups_member_counts_match_active_flags():
    rng = np.random.default_rng(3)
    xy = rng.standard_normal((5, 12, 2)).cumsum(axis=1)
    w = _window_from_tracks(xy)
    ga = data.assign_groups_dynamic(w, n_groups=4, min_speed=0.05)
    for tt in range(12):
        counts = np.bincount(ga.membership[tt], minlength=4)
        assert counts.sum() == 5
        np.testing.assert_array_equal(ga.active[tt], counts > 0)


def test_groups_slow_agent_keeps_previous():
    # moves east fast, then freezes: group stays 0 while frozen
    xy = np.array([[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.0, 0.0], [2.0, 0.0], [2.0, 0.0]]])
    xy = np.concatenate([xy, xy + 4.0])
    w = _window_from_tracks(xy)
    ga = data.assign_groups_dynamic(w, n_groups=4, min_speed=0.1)
    assert np.all(ga.membership[:, 0] == 0)


# ---------------------------------------------------------------------------
# normalization

def test_normalize_degenerate_all_same_point():
    xy = np.tile(np.array([[3.0, 3.0]]), (6, 1)).reshape(2, 3, 2)
    w = _window_from_tracks(np.tile(np.array([3.0, 3.0]), (2, 6, 1)))
    out, tr = data.normalize(w)
    assert tr.scale == 1e-6
    assert np.all(out.obs == 0) and np.all(out.pred == 0)


def test_normalize_identity_when_already_standard():
    rng = np.random.default_rng(0)
    obs = rng.standard_normal((3, 10, 2))
    obs = obs - obs.reshape(-1, 2).mean(0)
    obs = obs / obs.reshape(-1).std()
    w = _window_from_tracks(np.concatenate([obs, obs], axis=1))
    out, tr = data.normalize(w)
    np.testing.assert_allclose(out.obs, w.obs, atol=1e-9)


def test_normalize_round_trip():
    rng = np.random.default_rng(1)
    xy = rng.uniform(-30, 30, size=(4, 16, 2))
    w = _window_from_tracks(xy)
    out, tr = data.normalize(w)
    np.testing.assert_allclose(tr.invert(out.obs), w.obs, rtol=1e-9)
    np.testing.assert_allclose(tr.invert(out.pred), w.pred, rtol=1e-9)
