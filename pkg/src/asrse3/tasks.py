"""Built-in construction tasks and the plain-text task format.

Task file keys (see :mod:`asrse3.config`)::

    name = 2S
    grid_w = 8
    grid_h = 8
    action_mode = XY          # XY | XYT | XYTZ
    theta_count = 1
    z_count = 4
    max_steps = 10
    noise = 0
    block = cube              # shape [w d h] or random_height_block heights=1,2
    block = cube
    goal = cube 0 0 0 | cube 0 0 1
    rotations = 0 1 2 3

Goal slots are ``shape dx dy z [theta] [h=height]`` separated by ``|``;
repeated ``goal`` lines are alternatives.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from . import config as cfgfile
from .blockworld import BlockSpec, BlockWorldConfig, GoalSlot, GoalTemplate, validate_template

DEFAULT_SIZES = {"cube": ((1, 1), 1), "brick": ((2, 1), 1), "roof": ((2, 1), 1), "random_height_block": ((1, 1), 1)}

BUILTIN = {
    "2S": """
        grid_w = 8
        grid_h = 8
        action_mode = XY
        max_steps = 10
        block = cube
        block = cube
        goal = cube 0 0 0 | cube 0 0 1
    """,
    "4S": """
        grid_w = 8
        grid_h = 8
        action_mode = XY
        max_steps = 10
        block = cube
        block = cube
        block = cube
        block = cube
        goal = cube 0 0 0 | cube 0 0 1 | cube 0 0 2 | cube 0 0 3
    """,
    "H2": """
        grid_w = 8
        grid_h = 8
        action_mode = XYT
        theta_count = 2
        max_steps = 10
        block = cube
        block = cube
        block = roof
        goal = cube 0 0 0 | cube 1 0 0 | roof 0 0 1 0
    """,
    "H4": """
        grid_w = 10
        grid_h = 10
        action_mode = XYT
        theta_count = 2
        max_steps = 20
        block = cube
        block = cube
        block = brick
        block = roof
        goal = cube 0 0 0 | cube 1 0 0 | brick 0 0 1 0 | roof 0 0 2 0
    """,
    "ImDis": """
        grid_w = 10
        grid_h = 10
        action_mode = XYT
        theta_count = 2
        max_steps = 10
        block = random_height_block heights=1,2
        block = random_height_block heights=1,2
        block = random_height_block heights=1,2
        block = random_height_block heights=1,2
        block = roof
        goal = random_height_block 0 0 0 0 h=2 | random_height_block 1 0 0 0 h=2 | roof 0 0 2 0
        goal = random_height_block 0 0 0 0 h=2 | random_height_block 1 0 0 0 h=1 | random_height_block 1 0 1 0 h=1 | roof 0 0 2 0
        goal = random_height_block 0 0 0 0 h=1 | random_height_block 0 0 1 0 h=1 | random_height_block 1 0 0 0 h=1 | random_height_block 1 0 1 0 h=1 | roof 0 0 2 0
    """,
}
ALIASES = {"H2-analog": "H2", "H4-analog": "H4", "ImDis-analog": "ImDis", "4S-analog": "4S"}


def _parse_block(text: str) -> BlockSpec:
    parts = text.split()
    shape = parts[0]
    if shape not in DEFAULT_SIZES:
        raise cfgfile.ConfigError(f"unknown block shape {shape!r}")
    (w, d), h = DEFAULT_SIZES[shape]
    heights: tuple[int, ...] = ()
    nums = []
    for p in parts[1:]:
        if p.startswith("heights="):
            heights = tuple(int(v) for v in p[len("heights=") :].split(","))
        else:
            nums.append(int(p))
    if nums:
        if len(nums) != 3:
            raise cfgfile.ConfigError(f"block sizes need 'w d h', got {text!r}")
        w, d, h = nums
    return BlockSpec(shape, (w, d), h, heights)


def _parse_slot(text: str) -> GoalSlot:
    parts = text.split()
    height = None
    nums = []
    for p in parts[1:]:
        if p.startswith("h="):
            height = int(p[2:])
        else:
            nums.append(int(p))
    if len(nums) not in (3, 4):
        raise cfgfile.ConfigError(f"goal slot needs 'shape dx dy z [theta]', got {text!r}")
    theta = nums[3] if len(nums) == 4 else 0
    return GoalSlot(parts[0], nums[0], nums[1], nums[2], theta, height)


def from_mapping(values: dict[str, object], name: str = "custom") -> BlockWorldConfig:
    try:
        goals = values.get("goal", [])
        alternatives = tuple(tuple(_parse_slot(s) for s in g.split("|")) for g in goals)  # type: ignore[union-attr]
        rotations = tuple(int(r) for r in str(values.get("rotations", "0 1 2 3")).split())
        goal = GoalTemplate(alternatives, rotations) if alternatives else None
        if goal is not None:
            validate_template(goal)
        return BlockWorldConfig(
            grid_w=int(values.get("grid_w", 8)),
            grid_h=int(values.get("grid_h", 8)),
            action_mode=str(values.get("action_mode", "XY")),
            theta_count=int(values.get("theta_count", 1)),
            z_count=int(values.get("z_count", 4)),
            block_inventory=tuple(_parse_block(b) for b in values.get("block", [])),  # type: ignore[union-attr]
            goal=goal,
            max_steps=int(values.get("max_steps", 10)),
            noise_amplitude=float(values.get("noise", 0.0)),
            seed=int(values.get("seed", 0)),
            crop=int(values.get("crop", 5)),
            name=str(values.get("name", name)),
        )
    except (TypeError, ValueError) as exc:
        raise cfgfile.ConfigError(f"invalid task definition {name!r}: {exc}") from exc


def load_task(task: str, overrides: dict[str, object] | None = None) -> BlockWorldConfig:
    """Resolve a built-in task id or a task file path, with optional key overrides."""
    key = ALIASES.get(task, task)
    if key in BUILTIN:
        values = cfgfile.parse_text(BUILTIN[key])
        values.setdefault("name", key)
    elif Path(task).is_file():
        values = cfgfile.load(task)
        key = Path(task).stem
    else:
        raise cfgfile.ConfigError(f"unknown task {task!r}; built-ins are {sorted(BUILTIN)}")
    if overrides:
        values = {**values, **overrides}
    return from_mapping(values, key)


def with_mode(config: BlockWorldConfig, action_mode: str, theta_count: int | None = None) -> BlockWorldConfig:
    if theta_count is None:
        theta_count = 1 if action_mode == "XY" else max(config.theta_count, 2)
    return replace(config, action_mode=action_mode, theta_count=theta_count)
