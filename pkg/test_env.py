"""
Tests for the rooms and triangle environments.
"""

import tempfile
from pathlib import Path

import numpy as np

from config import ConfigError
from env import (
    FORWARD,
    RIGHT,
    EnvState,
    EpisodeFinishedError,
    ExpertPolicy,
    ObservationLimitError,
    RoomsConfig,
    SnapshotMismatchError,
    TriangleConfig,
    UnsatisfiableMissionError,
    enumerate_observation_keys,
    generate_pretraining_data,
    load_graph_suite,
    load_rooms_suite,
    make_rooms_env,
    make_triangle_env,
    make_triangle_graph,
    make_two_room_suite,
    observation_key,
    parse_mission,
    save_suite,
    shortest_path_actions,
    success_reward,
    triangle_identity,
    triangle_verify,
)

CONFIGS = Path(__file__).parent / "configs"


def tiny_config(**changes) -> RoomsConfig:
    doc = load_rooms_suite(CONFIGS / "tiny_rooms.json")[0].to_document()
    doc.update(changes)
    return RoomsConfig.from_document(doc)


def small_graph() -> TriangleConfig:
    return TriangleConfig(0, 4, ((0, 1), (1, 2), (0, 2), (2, 3)), frozenset({(0, 1, 2)}))


def test_rooms_and_doors():
    config = tiny_config()
    assert config.n_rooms == 2
    assert config.door_cells == ((3, 2),)
    env = make_rooms_env(config)
    assert env.room_of((1, 1)) == 0
    assert env.room_of((5, 3)) == 1
    assert env.room_of((3, 2)) == -1


def test_door_must_connect_two_rooms():
    layout = ["##D####", "#..#..#", "#..D..#", "#..#..#", "#######"]
    try:
        tiny_config(layout=layout)
    except ConfigError as e:
        assert "connects 1 rooms" in str(e)
    else:
        raise AssertionError("outer-wall door accepted")


def test_planner_finds_shortest_path():
    env = make_rooms_env(tiny_config())
    assert shortest_path_actions(env) == [FORWARD, FORWARD, FORWARD]
    assert env.step_count == 0 and not env.terminal
    assert ExpertPolicy().act(env) == FORWARD


def test_success_reward_and_termination():
    env = make_rooms_env(tiny_config())
    for _ in range(2):
        outcome = env.step(FORWARD)
        assert outcome.reward == 0.0 and not outcome.terminal
    outcome = env.step(FORWARD)
    assert outcome.terminal and env.success
    assert abs(outcome.reward - (1 - 0.5 * 3 / 20)) < 1e-12
    try:
        env.step(FORWARD)
    except EpisodeFinishedError:
        pass
    else:
        raise AssertionError("step after termination accepted")


def test_success_reward_time_convention():
    assert success_reward(0, 100) == 1.0
    assert success_reward(100, 100) == 0.5
    # one step from the door to face the ball: t counts that step
    env = make_rooms_env(tiny_config(start=[3, 2]))
    outcome = env.step(FORWARD)
    assert outcome.terminal and env.success and env.step_count == 1
    assert abs(outcome.reward - (1 - 0.5 / 20)) < 1e-12


def test_reward_penalty_ablation():
    env = make_rooms_env(tiny_config(reward_penalty=0.9))
    rewards = [env.step(FORWARD).reward for _ in range(3)]
    assert abs(rewards[-1] - (1 - 0.9 * 3 / 20)) < 1e-12


def test_unsatisfiable_missions():
    try:
        make_rooms_env(tiny_config(mission="goto blue key"))
    except UnsatisfiableMissionError:
        pass
    else:
        raise AssertionError("missing target accepted")
    try:
        make_rooms_env(tiny_config(horizon=2))
    except UnsatisfiableMissionError as e:
        assert "Reachability" in str(e)
    else:
        raise AssertionError("mission beyond the horizon accepted")


def test_parse_mission():
    stages = parse_mission("pickup blue key then goto green goal")
    assert [str(s) for s in stages] == ["pickup blue key", "goto green goal"]
    for bad in ("pickup red goal", "fly red ball", "goto red ball then goto red ball then goto red ball"):
        try:
            parse_mission(bad)
        except ConfigError:
            continue
        raise AssertionError(f"mission '{bad}' accepted")


def test_snapshot_restore_replays_exactly():
    env = make_rooms_env(tiny_config())
    env.step(FORWARD)
    snap = env.snapshot()
    first = [env.step(a).observation for a in (RIGHT, FORWARD, RIGHT)]
    draw = env.rng.random()
    env.restore(snap)
    second = [env.step(a).observation for a in (RIGHT, FORWARD, RIGHT)]
    assert all(np.array_equal(a, b) for a, b in zip(first, second))
    assert env.rng.random() == draw
    assert EnvState.from_bytes(snap.to_bytes()) == snap


def test_snapshot_round_trip_under_random_play():
    rng = np.random.default_rng(0)
    envs = [make_rooms_env(c) for c in load_rooms_suite(CONFIGS / "two_rooms.json")[:2]]
    envs.append(make_triangle_env(small_graph()))
    for env in envs:
        twin = env.clone()
        for _ in range(500):
            if env.terminal:
                env.reset()
            blob = env.snapshot().to_bytes()
            twin.restore(EnvState.from_bytes(blob))
            assert twin.snapshot().to_bytes() == blob
            action = int(rng.integers(env.n_actions))
            ours, theirs = env.step(action), twin.step(action)
            assert ours.reward == theirs.reward and ours.terminal == theirs.terminal
            assert np.array_equal(ours.observation, theirs.observation)


def test_snapshot_mismatch():
    env = make_rooms_env(tiny_config())
    other = make_rooms_env(tiny_config(objects=[["key", "blue", [5, 2]]], mission="goto blue key"))
    try:
        other.restore(env.snapshot())
    except SnapshotMismatchError:
        pass
    else:
        raise AssertionError("foreign snapshot restored")


def test_observation_keys_are_canonical():
    env = make_rooms_env(tiny_config())
    obs = env.observation()
    assert observation_key(obs) == observation_key(list(obs))
    keys = enumerate_observation_keys(env)
    assert keys[0] == observation_key(obs)
    assert len(keys) == len(set(keys)) > 1


def test_observation_key_limit():
    env = make_rooms_env(tiny_config())
    try:
        enumerate_observation_keys(env, limit=5)
    except ObservationLimitError:
        pass
    else:
        raise AssertionError("truncated enumeration returned silently")


def test_two_room_suite_is_seeded():
    a = make_two_room_suite(3, seed=5)
    b = make_two_room_suite(3, seed=5)
    assert a == b
    assert all(c.n_rooms == 2 for c in a)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "suite.json"
        save_suite(a, path)
        assert load_rooms_suite(path) == a


def test_example_suites_load():
    rooms = load_rooms_suite(CONFIGS / "two_rooms.json")
    for config in rooms:
        make_rooms_env(config)
    graphs = load_graph_suite(CONFIGS / "graphs.json")
    assert graphs[0].triangle_census == frozenset({(0, 1, 2), (2, 3, 4), (4, 5, 6)})


def test_triangle_verify():
    graph = small_graph()
    assert triangle_verify(graph, [2, 0, 1])
    assert not triangle_verify(graph, [0, 1, 3])
    assert not triangle_verify(graph, [0, 0, 1])
    assert not triangle_verify(graph, [0, 1, 7])
    assert triangle_identity([2, 0, 1]) == (0, 1, 2)


def test_triangle_env_episode():
    env = make_triangle_env(small_graph(), vocab_size=6)
    assert env.step(1).reward == 0.0
    assert env.step(2).reward == 0.0
    outcome = env.step(0)
    assert outcome.terminal and outcome.reward == 1.0
    env.reset()
    try:
        env.step(6)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-vocabulary token accepted")


def test_triangle_census_rejects_bad_seen():
    try:
        TriangleConfig(0, 4, ((0, 1), (1, 2), (0, 2)), frozenset({(1, 2, 3)}))
    except ConfigError:
        pass
    else:
        raise AssertionError("non-triangle accepted as seen")


def test_generated_graph_keeps_unseen_triangles():
    graph = make_triangle_graph(0, n_nodes=12, edge_prob=0.5, seed=3)
    assert graph.pretrain_seen <= graph.triangle_census
    assert len(graph.pretrain_seen) == round(0.5 * len(graph.triangle_census))


def test_pretraining_sample_counts():
    graphs = [small_graph()]
    data = generate_pretraining_data("triangle", graphs, count=30, seed=1)
    assert data.sample_counts["triangle"] + data.sample_counts["edge"] == 30
    rooms = generate_pretraining_data("rooms", [tiny_config()], count=4, noise=0.0)
    assert len(rooms.demos) == 4
    assert all(d.success and d.actions == [FORWARD] * 3 for d in rooms.demos)


def test_pretraining_rejects_graph_without_edges():
    try:
        generate_pretraining_data("triangle", [small_graph(), TriangleConfig(1, 3, ())], count=5)
    except ConfigError as e:
        assert "[1]" in str(e)
    else:
        raise AssertionError("edge-less graph accepted")


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_")]
    print("=" * 60)
    print("Environment tests")
    print("=" * 60)
    for i, (name, fn) in enumerate(tests, 1):
        print(f"\n{i}. {name}")
        fn()
    print("\n" + "=" * 60)
    print("✓ All tests completed successfully!")
    print("=" * 60)
