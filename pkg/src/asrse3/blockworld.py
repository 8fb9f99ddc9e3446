"""Deterministic grid block-construction environment.

Blocks live on a ``grid_w x grid_h`` cell grid with integer heights.  The
agent alternates pick and place actions; an action is a tuple of partial
actions whose length depends on the action mode:

* ``XY``   -> ``(xy,)``
* ``XYT``  -> ``(xy, theta)``
* ``XYTZ`` -> ``(xy, theta, z)``

``xy`` is the flat cell index ``x * grid_h + y`` and ``theta`` counts quarter
turns.  A placed block rests on the highest surface under its footprint (or
at the commanded height in ``XYTZ``).  It is stable when its anchor cell and
at least half of its footprint are supported at that height; otherwise it
is knocked to the nearest free ground pose.  Nothing can rest on a roof.

The knock-off rule is a deterministic stand-in for toppling under physics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import encoding

ACTION_MODES = ("XY", "XYT", "XYTZ")
SHAPES = ("cube", "brick", "roof", "random_height_block")
PLACE_RETRIES = 100


class BlockWorldError(RuntimeError):
    pass


class PlacementError(BlockWorldError):
    pass


class EpisodeDone(BlockWorldError):
    pass


# -- geometry -----------------------------------------------------------------


def footprint_offsets(w: int, d: int, theta: int) -> tuple[tuple[int, int], ...]:
    """Cell offsets of a ``w x d`` footprint rotated by ``theta`` quarter turns."""
    xs = range(-((w - 1) // 2), w - (w - 1) // 2)
    ys = range(-((d - 1) // 2), d - (d - 1) // 2)
    return tuple(_rot90((dx, dy), theta) for dx in xs for dy in ys)


def _rot90(v: tuple[int, int], t: int) -> tuple[int, int]:
    x, y = v
    for _ in range(t % 4):
        x, y = -y, x
    return x, y


@dataclass(frozen=True)
class BlockSpec:
    shape: str
    footprint: tuple[int, int] = (1, 1)
    height: int = 1
    heights: tuple[int, ...] = ()

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown block shape {self.shape!r}")
        if min(self.footprint) < 1 or self.height < 1:
            raise ValueError("footprint and height must be at least 1")
        if self.shape == "random_height_block" and not self.heights:
            object.__setattr__(self, "heights", (1, 2))

    @property
    def square(self) -> bool:
        return self.footprint[0] == self.footprint[1]


@dataclass(frozen=True)
class Block:
    shape: str
    footprint: tuple[int, int]
    height: int
    x: int = 0
    y: int = 0
    z: int = 0
    theta: int = 0

    @property
    def square(self) -> bool:
        return self.footprint[0] == self.footprint[1]

    @property
    def volume(self) -> int:
        return self.footprint[0] * self.footprint[1] * self.height

    @property
    def top(self) -> int:
        return self.z + self.height

    def cells(self) -> tuple[tuple[int, int], ...]:
        return tuple((self.x + dx, self.y + dy) for dx, dy in footprint_offsets(*self.footprint, self.theta))

    def moved(self, x: int, y: int, z: int, theta: int) -> "Block":
        return replace(self, x=x, y=y, z=z, theta=theta % 4)


@dataclass(frozen=True)
class GoalSlot:
    shape: str
    dx: int
    dy: int
    z: int
    theta: int = 0
    height: int | None = None


@dataclass(frozen=True)
class GoalTemplate:
    """Rigid block pattern, matched up to translation and the allowed rotations.

    ``alternatives`` lists interchangeable slot sets (any one satisfies the
    goal); blocks not assigned to a slot are ignored.
    """

    alternatives: tuple[tuple[GoalSlot, ...], ...]
    rotations: tuple[int, ...] = (0, 1, 2, 3)
    tolerance: int = 0

    @property
    def slots(self) -> tuple[GoalSlot, ...]:
        return self.alternatives[0]


@dataclass(frozen=True)
class BlockWorldConfig:
    grid_w: int = 8
    grid_h: int = 8
    action_mode: str = "XY"
    theta_count: int = 1
    z_count: int = 4
    block_inventory: tuple[BlockSpec, ...] = ()
    goal: GoalTemplate | None = None
    max_steps: int = 10
    noise_amplitude: float = 0.0
    seed: int = 0
    crop: int = 5
    name: str = "custom"

    def __post_init__(self):
        if self.grid_w < 4 or self.grid_h < 4:
            raise ValueError("grid must be at least 4x4")
        if self.action_mode not in ACTION_MODES:
            raise ValueError(f"action_mode must be one of {ACTION_MODES}")
        if self.theta_count not in (1, 2, 4):
            raise ValueError("theta_count must be 1, 2 or 4")
        if self.max_steps < 2 * len(self.block_inventory):
            raise ValueError("max_steps must allow one pick and place per block")
        min_h = min((min(b.heights) if b.heights else b.height for b in self.block_inventory), default=1)
        if not 0 <= self.noise_amplitude < min_h / 2:
            raise ValueError("noise_amplitude must be below half the smallest block height")
        if self.action_mode == "XY" and self.theta_count != 1:
            raise ValueError("XY mode has no rotation factor; use theta_count=1")
        encoding.CropSpec(self.crop).check_grid(self.grid_w, self.grid_h)

    @property
    def num_cells(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def action_dims(self) -> tuple[int, ...]:
        if self.action_mode == "XY":
            return (self.num_cells,)
        if self.action_mode == "XYT":
            return (self.num_cells, self.theta_count)
        return (self.num_cells, self.theta_count, self.z_count)

    def cell(self, xy: int) -> tuple[int, int]:
        return divmod(int(xy), self.grid_h)

    def xy_index(self, x: int, y: int) -> int:
        return x * self.grid_h + y


@dataclass(frozen=True)
class Pose:
    """Gripper pose decoded from an action tuple."""

    x: int
    y: int
    theta: int = 0  # quarter turns
    z: int | None = None

    @property
    def angle(self) -> float:
        return self.theta * encoding.QUARTER_TURN


def decode_action(config: BlockWorldConfig, action: Sequence[int]) -> Pose:
    dims = config.action_dims
    if len(action) != len(dims):
        raise BlockWorldError(f"{config.action_mode} actions have {len(dims)} parts, got {len(action)}")
    for a, d in zip(action, dims):
        if not 0 <= int(a) < d:
            raise BlockWorldError(f"action {tuple(action)} outside grid/action ranges {dims}")
    x, y = config.cell(action[0])
    theta = int(action[1]) if len(action) > 1 else 0
    z = int(action[2]) if len(action) > 2 else None
    return Pose(x, y, theta, z)


def encode_pose(config: BlockWorldConfig, pose: Pose) -> tuple[int, ...]:
    parts = [config.xy_index(pose.x, pose.y)]
    if config.action_mode != "XY":
        parts.append(pose.theta % 4)
    if config.action_mode == "XYTZ":
        parts.append(int(pose.z))
    return tuple(parts)


# -- state --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BlockState:
    blocks: tuple[Block, ...]
    holding: int | None = None
    grip: tuple[int, int, int] = (0, 0, 0)  # block-frame offset of the grip point and relative rotation
    in_hand: np.ndarray | None = field(default=None, repr=False)
    steps_taken: int = 0
    done: bool = False

    def placed(self) -> Iterable[tuple[int, Block]]:
        return ((i, b) for i, b in enumerate(self.blocks) if i != self.holding)

    def same_as(self, other: "BlockState") -> bool:
        return (
            self.blocks == other.blocks
            and self.holding == other.holding
            and self.grip == other.grip
            and self.steps_taken == other.steps_taken
            and self.done == other.done
            and np.array_equal(_hand(self), _hand(other))
        )


def _hand(state: BlockState) -> np.ndarray:
    return state.in_hand if state.in_hand is not None else np.zeros(0)


@dataclass(frozen=True, eq=False)
class Observation:
    scene: np.ndarray
    in_hand: np.ndarray
    gripper: bool  # True while holding

    def key(self) -> bytes:
        return self.scene.tobytes() + b"|" + self.in_hand.tobytes() + (b"1" if self.gripper else b"0")


def heightmap(config: BlockWorldConfig, state: BlockState) -> np.ndarray:
    hm = np.zeros((config.grid_w, config.grid_h), dtype=np.int64)
    for _, b in state.placed():
        for cx, cy in b.cells():
            hm[cx, cy] = max(hm[cx, cy], b.top)
    return hm


def scene_volume(state: BlockState) -> int:
    return sum(b.volume for _, b in state.placed())


def held_volume(state: BlockState) -> int:
    return state.blocks[state.holding].volume if state.holding is not None else 0


def _in_grid(config: BlockWorldConfig, cells: Iterable[tuple[int, int]]) -> bool:
    return all(0 <= x < config.grid_w and 0 <= y < config.grid_h for x, y in cells)


def _top_owner(state: BlockState) -> dict[tuple[int, int], int]:
    """Index of the highest block covering each occupied cell."""
    owner: dict[tuple[int, int], int] = {}
    for i, b in state.placed():
        for c in b.cells():
            j = owner.get(c)
            if j is None or state.blocks[j].top < b.top:
                owner[c] = i
    return owner


def _supports(state: BlockState, below: int) -> bool:
    """True when some placed block rests on block ``below``."""
    low = state.blocks[below]
    cells = set(low.cells())
    for i, b in state.placed():
        if i != below and b.z == low.top and cells.intersection(b.cells()):
            return True
    return False


def support_ok(config: BlockWorldConfig, state: BlockState, block: Block, ignore: int | None = None) -> bool:
    """Stability rule for ``block`` resting at ``block.z``.

    A footprint cell is supported when a non-roof block other than ``ignore``
    ends exactly at ``block.z`` there.
    """
    if block.z == 0:
        return True
    tops: set[tuple[int, int]] = set()
    for i, b in state.placed():
        if i != ignore and b.top == block.z and b.shape != "roof":
            tops.update(b.cells())
    cells = block.cells()
    supported = [c for c in cells if c in tops]
    return (block.x, block.y) in tops and 2 * len(supported) >= len(cells)


def overlaps(state: BlockState) -> bool:
    seen: set[tuple[int, int, int]] = set()
    for _, b in state.placed():
        for cx, cy in b.cells():
            for z in range(b.z, b.top):
                if (cx, cy, z) in seen:
                    return True
                seen.add((cx, cy, z))
    return False


def stability_audit(config: BlockWorldConfig, state: BlockState) -> bool:
    """No overlaps, everything in-grid, and every raised block stably supported."""
    if overlaps(state):
        return False
    for i, b in state.placed():
        if not _in_grid(config, b.cells()) or not support_ok(config, state, b, ignore=i):
            return False
    return True


# -- goal ---------------------------------------------------------------------


def _slot_cells(slot: GoalSlot, spec_fp: tuple[int, int], rotation: int) -> list[tuple[int, int]]:
    dx, dy = _rot90((slot.dx, slot.dy), rotation)
    return [(dx + ox, dy + oy) for ox, oy in footprint_offsets(*spec_fp, slot.theta + rotation)]


_FOOTPRINTS = {"cube": (1, 1), "brick": (2, 1), "roof": (2, 1), "random_height_block": (1, 1)}
_HEIGHTS = {"cube": 1, "brick": 1, "roof": 1}


def slot_footprint(slot: GoalSlot) -> tuple[int, int]:
    return _FOOTPRINTS[slot.shape]


def slot_height(slot: GoalSlot) -> int:
    return slot.height if slot.height is not None else _HEIGHTS.get(slot.shape, 1)


def _match_alternative(blocks: Sequence[Block], slots: Sequence[GoalSlot], rotations: Sequence[int]) -> bool:
    if len(slots) > len(blocks):
        return False
    block_cells = [frozenset(b.cells()) for b in blocks]
    for r in rotations:
        rel = [sorted(_slot_cells(s, slot_footprint(s), r)) for s in slots]
        first = slots[0]
        for bi, b in enumerate(blocks):
            if b.shape != first.shape or b.z != first.z or b.height != slot_height(first):
                continue
            anchor = min(block_cells[bi])
            tx, ty = anchor[0] - rel[0][0][0], anchor[1] - rel[0][0][1]
            if frozenset((x + tx, y + ty) for x, y in rel[0]) != block_cells[bi]:
                continue
            used = {bi}
            ok = True
            for s, cells in zip(slots[1:], rel[1:]):
                want = frozenset((x + tx, y + ty) for x, y in cells)
                hit = next(
                    (
                        j
                        for j, c in enumerate(blocks)
                        if j not in used
                        and c.shape == s.shape
                        and c.z == s.z
                        and c.height == slot_height(s)
                        and block_cells[j] == want
                    ),
                    None,
                )
                if hit is None:
                    ok = False
                    break
                used.add(hit)
            if ok:
                return True
    return False


def check_goal(state: BlockState, template: GoalTemplate) -> bool:
    """True when the placed blocks contain the template pattern."""
    placed = [b for _, b in state.placed()]
    return any(_match_alternative(placed, slots, template.rotations) for slots in template.alternatives)


def template_state(template: GoalTemplate, alternative: int = 0) -> BlockState:
    blocks = []
    for s in template.alternatives[alternative]:
        fp = slot_footprint(s)
        blocks.append(Block(s.shape, fp, slot_height(s), s.dx, s.dy, s.z, s.theta % 4))
    return BlockState(tuple(blocks))


def validate_template(template: GoalTemplate):
    """Each alternative must be overlap-free and stable on its own."""
    for i, slots in enumerate(template.alternatives):
        if not slots:
            raise ValueError("goal alternative without slots")
        state = template_state(template, i)
        xs = [c[0] for b in state.blocks for c in b.cells()]
        ys = [c[1] for b in state.blocks for c in b.cells()]
        big = BlockWorldConfig(grid_w=max(4, max(xs) - min(xs) + 1), grid_h=max(4, max(ys) - min(ys) + 1), crop=3)
        shifted = BlockState(tuple(b.moved(b.x - min(xs), b.y - min(ys), b.z, b.theta) for b in state.blocks))
        if not stability_audit(big, shifted):
            raise ValueError(f"goal alternative {i} is not stable under the stability rule")


# -- dynamics -----------------------------------------------------------------


def _observe(config: BlockWorldConfig, state: BlockState, rng: np.random.Generator | None = None) -> Observation:
    scene = heightmap(config, state)
    if config.noise_amplitude > 0 and rng is not None:
        jitter = rng.uniform(-config.noise_amplitude, config.noise_amplitude, scene.shape)
        scene = np.clip(scene + jitter, 0.0, None)
    hand = state.in_hand if state.in_hand is not None else _zero_hand(config)
    return Observation(scene, hand, state.holding is not None)


def _zero_hand(config: BlockWorldConfig) -> np.ndarray:
    shape = (3, config.crop, config.crop) if config.action_mode == "XYTZ" else (config.crop, config.crop)
    return np.zeros(shape, dtype=np.int64)


def _sample_blocks(config: BlockWorldConfig, rng: np.random.Generator) -> list[Block]:
    out = []
    for spec in config.block_inventory:
        h = int(rng.choice(spec.heights)) if spec.shape == "random_height_block" else spec.height
        out.append(Block(spec.shape, spec.footprint, h))
    return out


def random_ground_pose(
    config: BlockWorldConfig, state: BlockState, block: Block, rng: np.random.Generator, retries: int = PLACE_RETRIES
) -> Block:
    """Uniform collision-free ground pose for ``block`` among ``state``'s placed blocks."""
    occupied = set()
    for _, b in state.placed():
        occupied.update(b.cells())
    for _ in range(retries):
        x = int(rng.integers(config.grid_w))
        y = int(rng.integers(config.grid_h))
        t = int(rng.integers(config.theta_count))
        cand = block.moved(x, y, 0, t)
        cells = cand.cells()
        if _in_grid(config, cells) and occupied.isdisjoint(cells):
            return cand
    raise PlacementError(f"no free ground pose for a {block.shape} after {retries} tries")


def reset(config: BlockWorldConfig, seed: int) -> tuple[BlockState, Observation]:
    """All inventory blocks flat on the ground at random non-overlapping poses."""
    rng = np.random.default_rng(seed)
    state = BlockState(())
    for b in _sample_blocks(config, rng):
        placed = random_ground_pose(config, state, b, rng)
        state = BlockState(state.blocks + (placed,))
    state = replace(state, in_hand=_zero_hand(config))
    return state, _observe(config, state)


def _pick(config: BlockWorldConfig, state: BlockState, pose: Pose, scene: np.ndarray) -> BlockState:
    owner = _top_owner(state).get((pose.x, pose.y))
    if owner is None or _supports(state, owner):
        return state
    b = state.blocks[owner]
    if config.action_mode != "XY" and not b.square and (pose.theta - b.theta) % 2:
        return state
    if config.action_mode == "XYTZ" and pose.z != b.z:
        return state
    gripper_theta = pose.theta if config.action_mode != "XY" else 0
    local = _rot90((pose.x - b.x, pose.y - b.y), -b.theta)
    grip = (local[0], local[1], (b.theta - gripper_theta) % 4)
    triple = config.action_mode == "XYTZ"
    z = pose.z if triple else 0
    hand = encoding.in_hand_image(scene, ((pose.x, pose.y), gripper_theta * encoding.QUARTER_TURN, z), config.crop, triple)
    return replace(state, holding=owner, grip=grip, in_hand=hand)


def held_pose(config: BlockWorldConfig, state: BlockState, pose: Pose) -> Block:
    """Where the held block would sit (before resolving height) for gripper ``pose``."""
    b = state.blocks[state.holding]
    gripper_theta = pose.theta if config.action_mode != "XY" else 0
    theta = (gripper_theta + state.grip[2]) % 4
    ox, oy = _rot90(state.grip[:2], theta)
    return b.moved(pose.x - ox, pose.y - oy, 0, theta)


def landing_height(config: BlockWorldConfig, state: BlockState, block: Block, hm: np.ndarray | None = None) -> int:
    if hm is None:
        hm = heightmap(config, state)
    return max(int(hm[c]) for c in block.cells())


def _nearest_ground(config: BlockWorldConfig, state: BlockState, block: Block) -> Block | None:
    occupied = set()
    for _, b in state.placed():
        occupied.update(b.cells())
    cands = []
    for x in range(config.grid_w):
        for y in range(config.grid_h):
            cand = block.moved(x, y, 0, block.theta)
            cells = cand.cells()
            if _in_grid(config, cells) and occupied.isdisjoint(cells):
                cands.append((abs(x - block.x) + abs(y - block.y), x, y, cand))
    return min(cands, key=lambda t: t[:3])[3] if cands else None


def _place(config: BlockWorldConfig, state: BlockState, pose: Pose) -> BlockState:
    cand = held_pose(config, state, pose)
    if not _in_grid(config, cand.cells()):
        return state
    hm = heightmap(config, state)
    rest = landing_height(config, state, cand, hm)
    z = rest if config.action_mode != "XYTZ" else int(pose.z)
    placed = cand.moved(cand.x, cand.y, z, cand.theta)
    if z != rest or not support_ok(config, state, placed, ignore=state.holding):
        placed = _nearest_ground(config, state, cand)
        if placed is None:
            return state
    blocks = list(state.blocks)
    blocks[state.holding] = placed
    return replace(state, blocks=tuple(blocks), holding=None, grip=(0, 0, 0), in_hand=_zero_hand(config))


def apply_action(config: BlockWorldConfig, state: BlockState, action: Sequence[int]) -> BlockState:
    """Dynamics without reward, step counting or episode termination."""
    pose = decode_action(config, action)
    if state.holding is None:
        return _pick(config, state, pose, heightmap(config, state))
    return _place(config, state, pose)


def step(
    config: BlockWorldConfig, state: BlockState, action: Sequence[int], kind: str | None = None
) -> tuple[BlockState, Observation, float, bool]:
    """One pick or place; ``kind`` ('pick'/'place'), if given, must match the gripper."""
    if state.done:
        raise EpisodeDone("episode already finished; call reset")
    expected = "place" if state.holding is not None else "pick"
    if kind is not None and kind != expected:
        raise BlockWorldError(f"gripper protocol: expected a {expected}, got a {kind}")
    nxt = apply_action(config, state, action)
    steps = state.steps_taken + 1
    reached = config.goal is not None and nxt.holding is None and check_goal(nxt, config.goal)
    done = reached or steps >= config.max_steps
    nxt = replace(nxt, steps_taken=steps, done=done)
    return nxt, _observe(config, nxt), 1.0 if reached else 0.0, done


# -- feasibility --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeasibilityMask:
    """Boolean masks over full action tuples, shape ``config.action_dims``."""

    pick: np.ndarray
    place: np.ndarray
    holding: bool

    @property
    def active(self) -> np.ndarray:
        return self.place if self.holding else self.pick

    def level(self, prefix: Sequence[int] = ()) -> np.ndarray:
        """Mask for the next partial action after ``prefix``."""
        return level_mask(self.active, prefix)


def level_mask(full: np.ndarray, prefix: Sequence[int] = ()) -> np.ndarray:
    sub = full[tuple(prefix)]
    return sub.reshape(sub.shape[0], -1).any(axis=1) if sub.ndim > 1 else sub.copy()


def feasible_actions(config: BlockWorldConfig, state: BlockState) -> FeasibilityMask:
    dims = config.action_dims
    pick = np.zeros(dims, dtype=bool)
    place = np.zeros(dims, dtype=bool)
    hm = heightmap(config, state)
    if state.holding is None:
        owner = _top_owner(state)
        for (x, y), i in owner.items():
            xy = config.xy_index(x, y)
            b = state.blocks[i]
            if config.action_mode == "XY":
                pick[xy] = True
                continue
            for t in range(config.theta_count):
                theta = t
                if not b.square and (theta - b.theta) % 2:
                    continue
                if config.action_mode == "XYT":
                    pick[xy, t] = True
                elif b.z < config.z_count:
                    pick[xy, t, b.z] = True
        return FeasibilityMask(pick, place, False)
    for x in range(config.grid_w):
        for y in range(config.grid_h):
            xy = config.xy_index(x, y)
            for t in range(config.theta_count):
                cand = held_pose(config, state, Pose(x, y, t))
                if not _in_grid(config, cand.cells()):
                    continue
                if config.action_mode == "XY":
                    place[xy] = True
                elif config.action_mode == "XYT":
                    place[xy, t] = True
                else:
                    rest = landing_height(config, state, cand, hm)
                    place[xy, t, rest:] = True
    return FeasibilityMask(pick, place, True)


class BlockWorld:
    """Stateful wrapper around the pure functions above; one actor at a time."""

    def __init__(self, config: BlockWorldConfig):
        self.config = config
        self.state: BlockState | None = None
        self._noise_rng = np.random.default_rng(config.seed)

    def reset(self, seed: int) -> Observation:
        self.state, obs = reset(self.config, seed)
        self._noise_rng = np.random.default_rng([self.config.seed, seed])
        return self.observe()

    def load(self, state: BlockState) -> Observation:
        self.state = replace(state, steps_taken=0, done=False)
        return self.observe()

    def observe(self) -> Observation:
        return _observe(self.config, self.state, self._noise_rng)

    def step(self, action: Sequence[int], kind: str | None = None) -> tuple[Observation, float, bool]:
        if self.state is None:
            raise BlockWorldError("reset the environment first")
        self.state, _, reward, done = step(self.config, self.state, action, kind)
        return self.observe(), reward, done

    def feasible_actions(self) -> FeasibilityMask:
        return feasible_actions(self.config, self.state)

    def goal_reached(self) -> bool:
        return self.config.goal is not None and check_goal(self.state, self.config.goal)
