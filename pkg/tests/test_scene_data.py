import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqpredict.config import DESK, SceneDims, SynthConfig
from eqpredict.predictor import constant_velocity_baseline, metrics
from eqpredict.scene_data import (
    RawAgent,
    RawScene,
    SceneFormatError,
    load_scene,
    pad_scene,
    parse_scene_csv,
    read_dataset,
    save_scene,
    scene_to_csv,
    split,
    synth_generate,
    write_dataset,
)

DIMS = DESK.scene_dims
SMALL_DIMS = SceneDims(t_in=2, t_out=1, n_agents=4, n_lanes=2, lane_points=3)


def synth(n=20, seed=0, **kw):
    return synth_generate(SynthConfig(seed=seed, n_scenes=n, **kw), DIMS)


def raw_agent(eid, x, y, t_in=2, ego=False):
    hist = np.array([[x - 1.0, y], [x, y]])[-t_in:]
    return RawAgent(eid, hist, is_ego=ego)


# -- CSV round trips ------------------------------------------------------------------
def test_save_load_save_is_byte_identical(tmp_path):
    for scene in synth(10, seed=3):
        first = tmp_path / "a.csv"
        save_scene(scene, first)
        loaded = load_scene(first, DIMS)
        assert scene_to_csv(loaded) == first.read_text()
        np.testing.assert_array_equal(loaded.agents, scene.agents)
        np.testing.assert_array_equal(loaded.lanes, scene.lanes)
        np.testing.assert_array_equal(loaded.future, scene.future)
        np.testing.assert_array_equal(loaded.agent_mask, scene.agent_mask)
        np.testing.assert_array_equal(loaded.lane_mask, scene.lane_mask)


FIXTURE = """record_type,entity_id,role,index,x,y
agent,e,ego,0,1.5,-2
agent,e,ego,1,2.5,-2.25
lane,l,-,0,0,0.125
"""


def test_hand_written_fixture_parses_to_known_values():
    dims = SceneDims(t_in=2, t_out=0, n_agents=4, n_lanes=2, lane_points=3)
    raw = parse_scene_csv(FIXTURE, "fix", dims)
    assert [a.entity_id for a in raw.agents] == ["e"] and raw.agents[0].is_ego
    np.testing.assert_array_equal(raw.agents[0].history, [[1.5, -2.0], [2.5, -2.25]])
    assert raw.lanes[0][0] == "l"
    np.testing.assert_array_equal(raw.lanes[0][1], [[0.0, 0.125]])
    scene = pad_scene(raw, dims)
    assert scene.future is None
    np.testing.assert_array_equal(scene.agent_mask, [True, False, False, False])
    np.testing.assert_array_equal(scene.lane_mask, [[True, False, False], [False, False, False]])


def test_two_agent_file_pads_to_four(tmp_path):
    text = FIXTURE + "agent,n,neighbor,0,5,5\nagent,n,neighbor,1,6,5\n"
    path = tmp_path / "two.csv"
    path.write_text(text)
    scene = load_scene(path, SceneDims(t_in=2, t_out=0, n_agents=4, n_lanes=2, lane_points=3))
    assert scene.agents.shape == (4, 2, 2)
    np.testing.assert_array_equal(scene.agent_mask, [True, True, False, False])
    assert np.all(scene.agents[2:] == 0.0)
    scene.check_invariants()


def test_missing_ego_is_rejected():
    text = "record_type,entity_id,role,index,x,y\nagent,n,neighbor,0,1,2\nagent,n,neighbor,1,1,2\n"
    with pytest.raises(SceneFormatError, match="no ego"):
        parse_scene_csv(text, "x", SMALL_DIMS)


@pytest.mark.parametrize(
    "bad_row, line",
    [
        ("agent,e,ego,2,abc,1", 4),
        ("agent,e,ego,2,1", 4),
        ("wheel,e,ego,2,1,1", 4),
        ("agent,e,ego,1,3,3", 4),  # duplicate index
        ("agent,e,ego,2,nan,1", 4),
    ],
)
def test_malformed_rows_report_line_numbers(bad_row, line):
    text = "record_type,entity_id,role,index,x,y\nagent,e,ego,0,1,2\nagent,e,ego,1,1,2\n" + bad_row + "\n"
    with pytest.raises(SceneFormatError, match=f"line {line}"):
        parse_scene_csv(text, "x", SMALL_DIMS)


def test_bad_header_is_line_one():
    with pytest.raises(SceneFormatError, match="line 1"):
        parse_scene_csv("a,b,c\n", "x", SMALL_DIMS)


def test_incomplete_history_and_wrong_future_length():
    text = "record_type,entity_id,role,index,x,y\nagent,e,ego,0,1,2\n"
    with pytest.raises(SceneFormatError, match="incomplete"):
        parse_scene_csv(text, "x", SMALL_DIMS)
    text = "record_type,entity_id,role,index,x,y\nagent,e,ego,0,1,2\nagent,e,ego,1,1,2\nagent,e,ego,3,1,2\n"
    with pytest.raises(SceneFormatError, match="unexpected steps"):
        parse_scene_csv(text, "x", SMALL_DIMS)


# -- padding -----------------------------------------------------------------------------
def test_empty_neighbor_set_masks():
    scene = pad_scene(RawScene("s", [raw_agent("e", 0, 0, ego=True)], []), SMALL_DIMS)
    np.testing.assert_array_equal(scene.agent_mask, [True, False, False, False])
    assert not scene.lane_mask.any() and np.all(scene.lanes == 0.0)


def test_six_agents_keep_ego_and_three_nearest():
    agents = [raw_agent("e", 0, 0, ego=True)]
    for eid, dist in [("far", 50), ("n1", 3), ("mid", 10), ("n2", 4), ("n3", 5)]:
        agents.append(raw_agent(eid, dist, 0))
    scene = pad_scene(RawScene("s", agents, []), SMALL_DIMS)
    assert scene.agent_ids == ("e", "n1", "n2", "n3")
    assert scene.agent_mask.all()


def test_lanes_kept_by_nearest_waypoint():
    lanes = [
        ("far", np.array([[100.0, 0.0], [200.0, 0.0]])),
        ("near", np.array([[50.0, 0.0], [1.0, 1.0]])),  # nearest point decides, not the first
        ("mid", np.array([[10.0, 0.0]])),
    ]
    scene = pad_scene(RawScene("s", [raw_agent("e", 0, 0, ego=True)], lanes), SMALL_DIMS)
    assert scene.lane_ids == ("near", "mid")
    np.testing.assert_array_equal(scene.lane_mask, [[True, True, False], [True, False, False]])


def test_pad_rejects_two_egos_and_long_lanes():
    two = [raw_agent("a", 0, 0, ego=True), raw_agent("b", 1, 0, ego=True)]
    with pytest.raises(SceneFormatError, match="exactly one ego"):
        pad_scene(RawScene("s", two, []), SMALL_DIMS)
    with pytest.raises(SceneFormatError, match="points"):
        pad_scene(RawScene("s", two[:1], [("l", np.zeros((4, 2)))]), SMALL_DIMS)


coords = st.floats(-1e4, 1e4, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(
    n_neighbors=st.integers(0, 7),
    lane_sizes=st.lists(st.integers(1, 3), max_size=5),
    data=st.data(),
)
def test_padding_invariants_fuzz(n_neighbors, lane_sizes, data):
    pts = lambda n: np.array(data.draw(st.lists(st.tuples(coords, coords), min_size=n, max_size=n)), dtype=float)
    agents = [RawAgent("e", pts(2), is_ego=True)] + [RawAgent(f"a{i}", pts(2)) for i in range(n_neighbors)]
    lanes = [(f"l{i}", pts(n)) for i, n in enumerate(lane_sizes)]
    scene = pad_scene(RawScene("s", agents, lanes), SMALL_DIMS)
    scene.check_invariants()
    assert scene.agent_mask.sum() == min(1 + n_neighbors, 4)
    assert scene.lane_valid.sum() == min(len(lane_sizes), 2)
    # kept neighbors are at least as close as every dropped one
    ego_now = agents[0].history[-1]
    dist = {a.entity_id: math.hypot(*(a.history[-1] - ego_now)) for a in agents[1:]}
    kept = set(scene.agent_ids[1:])
    if kept and len(kept) < n_neighbors:
        assert max(dist[k] for k in kept) <= min(d for k, d in dist.items() if k not in kept)


# -- synthetic generation -------------------------------------------------------------------
def test_same_seed_is_bit_identical():
    a, b = synth(15, seed=7), synth(15, seed=7)
    assert [scene_to_csv(s) for s in a] == [scene_to_csv(s) for s in b]
    assert scene_to_csv(synth(1, seed=8)[0]) != scene_to_csv(a[0])


def test_generated_scenes_satisfy_invariants():
    for scene in synth(50, seed=2):
        scene.check_invariants()
        assert scene.future.shape == (DIMS.t_out, 2)
        assert scene.lane_valid[0]


def test_noise_free_straight_lane_baseline_is_exact():
    scenes = synth(20, seed=5, curvature_min=0.0, curvature_max=0.0, noise_sigma=0.0)
    # Exact before serialization rounding. Coordinates below 1000 m round to
    # 9 significant digits with error <= 5e-7; the extrapolated step k carries
    # the last point's error plus k times the velocity error, plus the rounding
    # of the future point itself.
    half_ulp = 5e-7
    k = DIMS.t_out
    bound = math.sqrt(2) * half_ulp * (1 + 2 * k + 1)
    for scene in scenes:
        assert np.max(np.abs(scene.agents)) < 1000
        pred = constant_velocity_baseline(scene.ego_history, k)
        ade, fde = metrics(pred, scene.future, horizons=(1.0, 1.5))
        assert ade[1.5] <= bound and fde[1.5] <= bound


def _polyline_distance(p, line):
    a, b = line[:-1], line[1:]
    ab = b - a
    t = np.clip(np.einsum("kx,kx->k", p - a, ab) / np.maximum(np.einsum("kx,kx->k", ab, ab), 1e-300), 0, 1)
    return float(np.min(np.linalg.norm(a + t[:, None] * ab - p, axis=1)))


def test_ego_history_stays_near_its_lane():
    cfg = SynthConfig(seed=4, n_scenes=100)
    scenes = synth_generate(cfg, DIMS)
    bound = 3 * cfg.noise_sigma + cfg.lane_width
    inside = total = 0
    for scene in scenes:
        q = scene.lane_ids.index("l0")
        line = scene.lanes[q][scene.lane_mask[q]]
        for p in scene.ego_history:
            inside += _polyline_distance(p, line) <= bound
            total += 1
    assert inside / total >= 0.99


def test_synth_config_validation():
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(noise_sigma=-1.0), DIMS)
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(curvature_min=0.1, curvature_max=0.0), DIMS)


# -- split ------------------------------------------------------------------------------------------
def test_split_all_train():
    train, val, test = split(list(range(10)), (1.0, 0.0, 0.0), seed=0)
    assert sorted(train) == list(range(10)) and val == [] and test == []


def test_split_deterministic_and_exhaustive(rng):
    items = list(rng.integers(0, 5, size=97))  # repeated values: multiset check
    a = split(items, (0.8, 0.1, 0.1), seed=3)
    assert a == split(items, (0.8, 0.1, 0.1), seed=3)
    assert Counter(a[0] + a[1] + a[2]) == Counter(items)
    assert [len(p) for p in a] == [78, 10, 9]
    assert a != split(items, (0.8, 0.1, 0.1), seed=4)


def test_split_errors():
    with pytest.raises(ValueError, match="empty"):
        split([], (1.0, 0.0, 0.0), seed=0)
    with pytest.raises(ValueError):
        split([1, 2], (0.5, 0.1, 0.1), seed=0)


# -- dataset directories ---------------------------------------------------------------------
def test_dataset_write_read(tmp_path):
    cfg = SynthConfig(seed=1, n_scenes=12)
    parts = dict(zip(("train", "val", "test"), split(synth_generate(cfg, DIMS), cfg.ratios, cfg.seed)))
    write_dataset(tmp_path, parts, DIMS, cfg)
    ds = read_dataset(tmp_path)
    assert ds.dims == DIMS and ds.manifest["seed"] == 1
    for name, scenes in parts.items():
        assert [scene_to_csv(s) for s in ds.splits[name]] == [scene_to_csv(s) for s in scenes]


def test_dataset_errors_name_the_file(tmp_path):
    with pytest.raises(SceneFormatError, match="manifest"):
        read_dataset(tmp_path)
    cfg = SynthConfig(seed=1, n_scenes=2)
    scenes = synth_generate(cfg, DIMS)
    write_dataset(tmp_path, {"train": scenes}, DIMS, cfg)
    (tmp_path / "scenes" / f"{scenes[0].scene_id}.csv").write_text("record_type,entity_id,role,index,x,y\n")
    with pytest.raises(SceneFormatError, match=scenes[0].scene_id):
        read_dataset(tmp_path)
