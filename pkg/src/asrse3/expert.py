"""Deconstruction expert and reversal into construction demonstrations.

The expert starts from a randomly placed goal structure, repeatedly lifts
the highest block and drops it on free ground, then reverses the action
list.  The reversed actions are replayed through the simulator from the
deconstruction's final state so every observation, in-hand image, reward and
done flag of the demonstration comes from the environment itself.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from . import blockworld as bw
from .blockworld import Block, BlockState, BlockWorldConfig, Observation, Pose

BUFFER_FORMAT = "asrse3-expert-buffer"
BUFFER_VERSION = 1


class ExpertError(RuntimeError):
    pass


@dataclass(eq=False)
class TransitionRecord:
    """One environment transition as stored in replay buffers.

    ``mask``/``next_mask`` are feasibility masks over full action tuples for
    the acting state and the successor (``None`` when unknown).
    """

    obs: Observation
    action: tuple[int, ...]
    reward: float
    next_obs: Observation | None
    done: bool
    expert: bool = False
    mask: np.ndarray | None = None
    next_mask: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return "place" if self.obs.gripper else "pick"


@dataclass(eq=False)
class Episode:
    records: list[TransitionRecord]
    direction: str  # "deconstruction" | "construction"
    validated: bool = False
    initial_state: BlockState | None = None
    final_state: BlockState | None = None
    diagnostic: str = ""

    @property
    def actions(self) -> list[tuple[int, ...]]:
        return [r.action for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


# -- goal spawning -------------------------------------------------------------


def _assign_alternative(config: BlockWorldConfig, blocks: Sequence[Block]) -> tuple[int, list[int]]:
    """First goal alternative whose slots can all be filled from ``blocks``."""
    for ai, slots in enumerate(config.goal.alternatives):
        used: list[int] = []
        for s in slots:
            hit = next(
                (
                    i
                    for i, b in enumerate(blocks)
                    if i not in used and b.shape == s.shape and b.height == bw.slot_height(s)
                ),
                None,
            )
            if hit is None:
                break
            used.append(hit)
        else:
            return ai, used
    raise ExpertError("no goal alternative can be built from the sampled inventory")


def spawn_goal_state(config: BlockWorldConfig, seed: int) -> BlockState:
    """Goal structure at a random translation and allowed rotation; spare blocks on the ground."""
    if config.goal is None:
        raise ExpertError(f"task {config.name!r} has no goal template")
    rng = np.random.default_rng(seed)
    blocks = bw._sample_blocks(config, rng)
    ai, used = _assign_alternative(config, blocks)
    slots = config.goal.alternatives[ai]
    rot = int(rng.choice(config.goal.rotations))
    shaped = []
    for s, bi in zip(slots, used):
        dx, dy = bw._rot90((s.dx, s.dy), rot)
        shaped.append(blocks[bi].moved(dx, dy, s.z, s.theta + rot))
    xs = [c[0] for b in shaped for c in b.cells()]
    ys = [c[1] for b in shaped for c in b.cells()]
    tx_lo, tx_hi = -min(xs), config.grid_w - 1 - max(xs)
    ty_lo, ty_hi = -min(ys), config.grid_h - 1 - max(ys)
    if tx_lo > tx_hi or ty_lo > ty_hi:
        raise ExpertError(f"goal template does not fit a {config.grid_w}x{config.grid_h} grid")
    tx = int(rng.integers(tx_lo, tx_hi + 1))
    ty = int(rng.integers(ty_lo, ty_hi + 1))
    final: list[Block | None] = [None] * len(blocks)
    for b, bi in zip(shaped, used):
        final[bi] = b.moved(b.x + tx, b.y + ty, b.z, b.theta)
    state = BlockState(tuple(b for b in final if b is not None))
    order = [bi for bi in used]
    for i, b in enumerate(blocks):
        if final[i] is None:
            placed = bw.random_ground_pose(config, state, b, rng)
            state = BlockState(state.blocks + (placed,))
            order.append(i)
    # restore inventory order so block indices match reset()
    by_index = dict(zip(order, state.blocks))
    state = BlockState(tuple(by_index[i] for i in range(len(blocks))), in_hand=bw._zero_hand(config))
    if not bw.check_goal(state, config.goal) or not bw.stability_audit(config, state):
        raise ExpertError("spawned goal state failed its own checks")
    return state


# -- deconstruction ----------------------------------------------------------------


def _pick_pose(config: BlockWorldConfig, b: Block) -> Pose:
    if config.action_mode == "XY":
        theta = 0
    elif b.theta < config.theta_count:
        theta = b.theta
    else:
        theta = b.theta % 2 if not b.square else 0
    return Pose(b.x, b.y, theta, b.z if config.action_mode == "XYTZ" else None)


def _ground_place(config: BlockWorldConfig, state: BlockState, rng: np.random.Generator) -> Pose:
    """Random gripper pose that drops the held block on free ground."""
    occupied = set()
    for _, b in state.placed():
        occupied.update(b.cells())
    for _ in range(bw.PLACE_RETRIES):
        x = int(rng.integers(config.grid_w))
        y = int(rng.integers(config.grid_h))
        t = int(rng.integers(config.theta_count))
        pose = Pose(x, y, t, 0 if config.action_mode == "XYTZ" else None)
        cand = bw.held_pose(config, state, pose)
        cells = cand.cells()
        if bw._in_grid(config, cells) and occupied.isdisjoint(cells):
            return pose
    raise bw.PlacementError(f"no free ground pose after {bw.PLACE_RETRIES} tries")


def deconstruct(config: BlockWorldConfig, goal_state: BlockState, seed: int) -> Episode:
    """Lift the highest block (lowest index on ties) onto the ground until everything is flat."""
    rng = np.random.default_rng(seed)
    state = goal_state
    records: list[TransitionRecord] = []
    obs = bw._observe(config, state)
    while True:
        raised = [(b.z, -i) for i, b in state.placed() if b.z > 0]
        if not raised:
            break
        _, neg = max(raised)
        target = state.blocks[-neg]
        for pose in (_pick_pose(config, target), None):
            if pose is None:
                pose = _ground_place(config, state, rng)
            action = bw.encode_pose(config, pose)
            nxt = bw.apply_action(config, state, action)
            if nxt is state:
                raise ExpertError(f"expert action {action} had no effect")
            nobs = bw._observe(config, nxt)
            records.append(TransitionRecord(obs, action, 0.0, nobs, False, expert=True))
            state, obs = nxt, nobs
    return Episode(records, "deconstruction", True, goal_state, state)


# -- reversal ----------------------------------------------------------------


def reverse_actions(config: BlockWorldConfig, decon: Episode) -> list[tuple[int, ...]]:
    """Swap each (pick p, place q) pair into (pick q, place p), in reverse order."""
    acts = decon.actions
    if len(acts) % 2:
        raise ExpertError("deconstruction episode does not alternate pick and place")
    out = []
    for i in range(len(acts) - 2, -1, -2):
        pick, place = acts[i], acts[i + 1]
        out.extend([place, pick])
    return out


def replay(
    config: BlockWorldConfig, start: BlockState, actions: Sequence[Sequence[int]], with_masks: bool = True
) -> tuple[list[TransitionRecord], BlockState]:
    state = replace(start, steps_taken=0, done=False, holding=None, in_hand=bw._zero_hand(config))
    obs = bw._observe(config, state)
    mask = bw.feasible_actions(config, state).active if with_masks else None
    records = []
    for action in actions:
        kind = "place" if state.holding is not None else "pick"
        state, nobs, reward, done = bw.step(config, state, action, kind)
        nmask = bw.feasible_actions(config, state).active if with_masks else None
        records.append(TransitionRecord(obs, tuple(int(a) for a in action), reward, nobs, done, True, mask, nmask))
        obs, mask = nobs, nmask
        if done:
            break
    return records, state


def reverse(config: BlockWorldConfig, decon: Episode, with_masks: bool = True) -> Episode:
    if decon.direction != "deconstruction" or decon.final_state is None:
        raise ExpertError("reverse expects a finished deconstruction episode")
    actions = reverse_actions(config, decon)
    try:
        records, final = replay(config, decon.final_state, actions, with_masks)
    except bw.BlockWorldError as exc:
        return Episode([], "construction", False, decon.final_state, None, f"replay raised: {exc}")
    ok = len(records) == len(actions) and bool(records) and records[-1].reward == 1.0 and records[-1].done
    diag = "" if ok else f"replay ended after {len(records)}/{len(actions)} steps without the goal"
    return Episode(records, "construction", ok, decon.final_state, final, diag)


def demonstration(config: BlockWorldConfig, seed: int, with_masks: bool = True) -> Episode:
    goal = spawn_goal_state(config, seed)
    return reverse(config, deconstruct(config, goal, seed + 1), with_masks)


def generate(
    config: BlockWorldConfig, count: int, seed: int, with_masks: bool = True
) -> tuple[list[Episode], int]:
    """``count`` validated construction episodes plus the number rejected along the way."""
    episodes, rejected = [], 0
    ss = np.random.SeedSequence(seed)
    attempt = 0
    while len(episodes) < count:
        child = int(ss.spawn(1)[0].generate_state(1)[0])
        attempt += 1
        if attempt > 10 * count + 100:
            raise ExpertError(f"too many rejected episodes ({rejected})")
        ep = demonstration(config, child, with_masks)
        if ep.validated:
            episodes.append(ep)
        else:
            rejected += 1
    return episodes, rejected


# -- buffer file -----------------------------------------------------------------


def config_hash(config: BlockWorldConfig) -> str:
    return hashlib.sha256(repr(config).encode()).hexdigest()[:16]


def _obs_doc(obs: Observation | None) -> dict | None:
    if obs is None:
        return None
    return {"scene": obs.scene.tolist(), "hand": obs.in_hand.tolist(), "gripper": bool(obs.gripper)}


def _obs_from(doc: dict | None) -> Observation | None:
    if doc is None:
        return None
    scene = np.asarray(doc["scene"])
    return Observation(scene, np.asarray(doc["hand"], dtype=np.int64), bool(doc["gripper"]))


def _mask_doc(mask: np.ndarray | None) -> list[int] | None:
    return None if mask is None else np.flatnonzero(mask).tolist()


def _mask_from(doc: list[int] | None, dims: tuple[int, ...]) -> np.ndarray | None:
    if doc is None:
        return None
    flat = np.zeros(int(np.prod(dims)), dtype=bool)
    flat[doc] = True
    return flat.reshape(dims)


def record_to_json(rec: TransitionRecord) -> str:
    return json.dumps(
        {
            "obs": _obs_doc(rec.obs),
            "action": list(rec.action),
            "reward": rec.reward,
            "next": _obs_doc(rec.next_obs),
            "done": rec.done,
            "expert": rec.expert,
            "mask": _mask_doc(rec.mask),
            "next_mask": _mask_doc(rec.next_mask),
        },
        separators=(",", ":"),
    )


def record_from_json(line: str, dims: tuple[int, ...]) -> TransitionRecord:
    d = json.loads(line)
    return TransitionRecord(
        _obs_from(d["obs"]),
        tuple(d["action"]),
        float(d["reward"]),
        _obs_from(d["next"]),
        bool(d["done"]),
        bool(d["expert"]),
        _mask_from(d["mask"], dims),
        _mask_from(d["next_mask"], dims),
    )


def write_buffer(path: str | Path, config: BlockWorldConfig, episodes: Sequence[Episode], rejected: int = 0):
    records = [r for ep in episodes for r in ep.records]
    header = {
        "format": BUFFER_FORMAT,
        "version": BUFFER_VERSION,
        "task": config.name,
        "config_hash": config_hash(config),
        "episodes": len(episodes),
        "count": len(records),
        "rejected": rejected,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(record_to_json(r) + "\n")


def read_buffer(path: str | Path, config: BlockWorldConfig) -> tuple[dict[str, Any], list[TransitionRecord]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != BUFFER_FORMAT or header.get("version") != BUFFER_VERSION:
            raise ExpertError(f"{path} is not an expert buffer file")
        if header["config_hash"] != config_hash(config):
            raise ExpertError(f"{path} was generated for a different task configuration ({header['task']})")
        records = [record_from_json(line, config.action_dims) for line in fh if line.strip()]
    if len(records) != header["count"]:
        raise ExpertError(f"{path}: header says {header['count']} records, found {len(records)}")
    return header, records


def iter_episodes(records: Sequence[TransitionRecord]) -> Iterator[list[TransitionRecord]]:
    """Split a flat record list back into episodes at ``done`` flags."""
    cur: list[TransitionRecord] = []
    for r in records:
        cur.append(r)
        if r.done:
            yield cur
            cur = []
    if cur:
        yield cur
