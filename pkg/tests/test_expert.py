import numpy as np
import pytest

from asrse3 import blockworld as bw
from asrse3 import expert, tasks

TASKS = ("2S", "4S", "H2", "H4", "ImDis")


def test_spawn_is_seeded_and_varies():
    config = tasks.load_task("4S")
    a = expert.spawn_goal_state(config, 1)
    assert a.same_as(expert.spawn_goal_state(config, 1))
    assert len({tuple((b.x, b.y) for b in expert.spawn_goal_state(config, s).blocks) for s in range(10)}) > 1
    assert bw.stability_audit(config, a) and bw.check_goal(a, config.goal)


def test_two_cube_deconstruction_is_one_move():
    config = tasks.load_task("2S")
    goal = expert.spawn_goal_state(config, 0)
    decon = expert.deconstruct(config, goal, 1)
    assert len(decon) == 2
    assert all(b.z == 0 for b in decon.final_state.blocks) and not bw.overlaps(decon.final_state)
    built = expert.reverse(config, decon)
    assert built.validated and len(built) == 2
    assert [r.kind for r in built.records] == ["pick", "place"]
    assert [r.reward for r in built.records] == [0.0, 1.0] and built.records[-1].done


def _surface(obs, action, config):
    x, y = divmod(action[0], config.grid_h)
    return obs.scene[x, y]


def test_deconstruction_takes_highest_first():
    config = tasks.load_task("H4")
    for seed in range(20):
        decon = expert.deconstruct(config, expert.spawn_goal_state(config, seed), seed + 1)
        heights = [_surface(r.obs, r.action, config) for r in decon.records[::2]]
        assert heights == sorted(heights, reverse=True)
        assert len(decon) <= 2 * len(config.block_inventory)


def test_reversal_is_an_involution():
    config = tasks.load_task("H4")
    decon = expert.deconstruct(config, expert.spawn_goal_state(config, 3), 4)
    once = expert.reverse_actions(config, decon)
    twice = expert.reverse_actions(config, expert.Episode([expert.TransitionRecord(None, a, 0, None, False) for a in once], "deconstruction"))
    assert twice == decon.actions


def test_reversed_episodes_replay_to_reward():
    for task in TASKS:
        config = tasks.load_task(task)
        episodes, rejected = expert.generate(config, 30, 0)
        assert rejected == 0
        for ep in episodes:
            records, final = expert.replay(config, ep.initial_state, ep.actions)
            assert records[-1].reward == 1.0 and records[-1].done
            assert bw.check_goal(final, config.goal)
            assert all(r.reward == 0.0 for r in records[:-1])
            assert all(r.mask[r.action] for r in records)


def _roundtrip_equal(a, b):
    assert a.action == b.action and a.reward == b.reward and a.done == b.done and a.expert == b.expert
    assert a.obs.key() == b.obs.key()
    assert (a.next_obs is None) == (b.next_obs is None)
    if a.next_obs is not None:
        assert a.next_obs.key() == b.next_obs.key()
    np.testing.assert_array_equal(a.mask, b.mask)
    np.testing.assert_array_equal(a.next_mask, b.next_mask)


def test_buffer_round_trip(tmp_path):
    config = tasks.load_task("H2")
    episodes, rejected = expert.generate(config, 5, 2)
    path = tmp_path / "buf.jsonl"
    expert.write_buffer(path, config, episodes, rejected)
    header, records = expert.read_buffer(path, config)
    assert header["task"] == config.name and header["count"] == len(records) == sum(map(len, episodes))
    for a, b in zip((r for e in episodes for r in e.records), records):
        _roundtrip_equal(a, b)
    assert [len(e) for e in expert.iter_episodes(records)] == [len(e) for e in episodes]
    with pytest.raises(expert.ExpertError):
        expert.read_buffer(path, tasks.load_task("H4"))


def test_buffer_files_are_byte_identical(tmp_path):
    config = tasks.load_task("4S")
    for name in ("a", "b"):
        expert.write_buffer(tmp_path / name, config, *expert.generate(config, 4, 9))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_empty_buffer_is_header_only(tmp_path):
    config = tasks.load_task("2S")
    expert.write_buffer(tmp_path / "e", config, *expert.generate(config, 0, 0))
    assert len((tmp_path / "e").read_text().splitlines()) == 1
    header, records = expert.read_buffer(tmp_path / "e", config)
    assert header["count"] == 0 and records == []


def test_reverse_rejects_wrong_direction():
    config = tasks.load_task("2S")
    with pytest.raises(expert.ExpertError):
        expert.reverse(config, expert.Episode([], "construction"))
