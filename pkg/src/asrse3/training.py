"""Replay buffers, the pretrain / self-play loop and per-algorithm loss wiring.

Algorithms:

* ``sdqfd`` -- TD + ``margin_weight`` * strict large-margin loss
* ``dqfd``  -- TD + ``margin_weight`` * large-margin loss
* ``adet``  -- TD + ``ce_weight`` * cross-entropy on ``softmax(beta * Q)``
* ``dqn``   -- TD only; pretrains when given expert data, otherwise runs
  epsilon-greedy from scratch
* ``bc``    -- cross-entropy only, expert data only, no self-play

Imitation terms apply to expert records only and are summed over cascade
levels; every term is averaged over the batch.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses
from .blockworld import BlockWorld, BlockWorldConfig
from .expert import TransitionRecord
from .mdp_core import FLAT_ENTRY_CAP
from .qmodel import (
    FlatTabular,
    NoFeasibleAction,
    ParamCascade,
    TabularCascade,
    _level_mask,
    greedy_action,
    n_step_targets,
    one_step_targets,
)

ALGORITHMS = ("sdqfd", "dqfd", "adet", "dqn", "bc")
REPRESENTATIONS = ("cascade", "cascade-tabular", "flat-tabular")
DEMO_ALGORITHMS = ("sdqfd", "dqfd", "adet", "bc")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    algo: str = "sdqfd"
    gamma: float = 0.9
    batch: int = 32
    margin_weight: float = 0.1
    margin: float = 0.1
    ce_weight: float = 0.01
    ce_beta: float = 10.0
    td_weight: float = 1.0
    target_update: int = 100
    targets: str = "n-step"  # or "1-step"
    pretrain_steps: int = 2000
    self_play_episodes: int = 5000
    expert_fraction: float = 0.5
    epsilon_start: float = 0.5
    epsilon_end: float = 0.0
    epsilon_episodes: int = 20000
    lr: float = 0.5e-5
    weight_decay: float = 1e-5
    optimizer: str = "adam"  # or "sgd"
    buffer_capacity: int = 100_000
    hidden: int = 32
    level_hidden: int = 32
    window: int = 1000
    stop_success: float | None = None
    record_wall_time: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"algo must be one of {ALGORITHMS}")
        for name in ("margin_weight", "margin", "ce_weight", "td_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.expert_fraction <= 1.0:
            raise ValueError("expert_fraction must be in [0, 1]")
        if self.targets not in ("n-step", "1-step"):
            raise ValueError("targets must be 'n-step' or '1-step'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.batch < 1 or self.window < 1 or self.target_update < 1:
            raise ValueError("batch, window and target_update must be positive")

    @property
    def uses_imitation(self) -> bool:
        return self.algo in DEMO_ALGORITHMS

    def epsilon(self, episode: int, pretrained: bool) -> float:
        """Linear anneal for DQN without demonstrations; 0 for everything else."""
        if self.algo != "dqn" or pretrained:
            return 0.0
        frac = min(1.0, episode / self.epsilon_episodes) if self.epsilon_episodes else 1.0
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def desk_config(**overrides) -> TrainConfig:
    """Step sizes and run lengths that learn the small tasks in minutes on one CPU."""
    base = dict(lr=1e-3, weight_decay=1e-5, pretrain_steps=2000, self_play_episodes=5000)
    base.update(overrides)
    return TrainConfig(**base)


def config_from_strings(values: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for key, raw in values.items():
        if key not in kinds:
            raise ValueError(f"unknown training option {key!r}")
        cur = getattr(base, key)
        if isinstance(cur, bool):
            out[key] = str(raw).lower() in ("1", "true", "yes", "on")
        elif isinstance(cur, int):
            out[key] = int(raw)
        elif isinstance(cur, float) or cur is None and key == "stop_success":
            out[key] = None if str(raw).lower() == "none" else float(raw)
        else:
            out[key] = str(raw)
    return replace(base, **out)


# -- replay ---------------------------------------------------------------------


class ReplayBuffer:
    """FIFO ring buffer of transition records."""

    def __init__(self, capacity: int = 100_000, expert: bool = False):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.expert = expert
        self._items: deque[TransitionRecord] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add(self, record: TransitionRecord):
        self._items.append(record)

    def extend(self, records: Sequence[TransitionRecord]):
        for r in records:
            self.add(r)

    def sample(self, n: int, rng: np.random.Generator) -> list[TransitionRecord]:
        """``n`` distinct records chosen uniformly (all of them if fewer exist)."""
        n = min(n, len(self._items))
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[int(i)] for i in idx]


def compose_batch(
    expert: ReplayBuffer | None, own: ReplayBuffer, batch: int, fraction: float, rng: np.random.Generator
) -> list[TransitionRecord]:
    """``round(batch * fraction)`` expert records plus self-play records; a short side is topped up from the other."""
    n_exp = 0 if expert is None or not len(expert) else int(round(batch * fraction))
    n_own = min(batch - n_exp, len(own))
    if expert is not None and len(expert):
        n_exp = min(batch - n_own, len(expert))
    out = (expert.sample(n_exp, rng) if n_exp else []) + (own.sample(n_own, rng) if n_own else [])
    return out


# -- optimisation -------------------------------------------------------------


class Adam:
    """Adam with decoupled weight decay over a dict of numpy parameters."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def make_cascade(representation: str, env_config: BlockWorldConfig, cfg: TrainConfig):
    if representation == "cascade":
        return ParamCascade(env_config, cfg.hidden, cfg.level_hidden, seed=cfg.seed)
    if representation == "cascade-tabular":
        return TabularCascade(env_config.action_dims)
    if representation == "flat-tabular":
        size = math.prod(env_config.action_dims)
        if size > FLAT_ENTRY_CAP:
            raise TrainingError(f"flat action space of {size} tuples exceeds the enumeration cap {FLAT_ENTRY_CAP}")
        return FlatTabular(env_config.action_dims)
    raise TrainingError(f"unknown representation {representation!r}; choose from {REPRESENTATIONS}")


@dataclass
class UpdateStats:
    loss: float
    td: float
    imitation: float


class Agent:
    def __init__(self, cascade, cfg: TrainConfig):
        self.online = cascade
        self.target = cascade.copy()
        self.cfg = cfg
        self.updates = 0
        self.margin = losses.MarginFn(cfg.margin)
        self.adam = (
            Adam(cascade.params, cfg.lr, cfg.weight_decay)
            if cfg.optimizer == "adam" and isinstance(cascade, ParamCascade)
            else None
        )

    # acting
    def act(self, obs, mask: np.ndarray, rng: np.random.Generator | None = None, epsilon: float = 0.0) -> tuple[int, ...]:
        if epsilon > 0 and rng is not None and rng.random() < epsilon:
            choices = np.argwhere(mask)
            if not len(choices):
                raise NoFeasibleAction("no feasible action to explore")
            return tuple(int(a) for a in choices[rng.integers(len(choices))])
        levels, _ = greedy_action(self.online, obs, mask)
        return self.online.from_levels(levels)

    # learning
    def loss_gradients(self, records: Sequence[TransitionRecord]):
        """Loss value, per-part stats and gradient of the batch loss."""
        cfg = self.cfg
        cas = self.online
        n = len(records)
        acts = np.array([cas.to_levels(r.action) for r in records], dtype=np.int64).reshape(n, cas.k)
        rows, cache = cas.forward_train([r.obs for r in records], acts)
        drows = [np.zeros_like(r) for r in rows]
        td_total = 0.0
        if cfg.td_weight > 0 and cfg.algo != "bc":
            if cfg.targets == "n-step":
                y = np.repeat(n_step_targets(self.target, records, cfg.gamma)[:, None], cas.k, axis=1)
            else:
                y = one_step_targets(self.target, records, cfg.gamma)
            for level in range(cas.k):
                q = rows[level][np.arange(n), acts[:, level]]
                loss, g = losses.huber(q - y[:, level])
                td_total += float(loss.sum()) / n
                drows[level][np.arange(n), acts[:, level]] += cfg.td_weight * g / n
        imit_total = 0.0
        weight, fn = self._imitation()
        if weight > 0:
            for b, rec in enumerate(records):
                if not rec.expert:
                    continue
                full = cas.level_masks_from(rec.mask)
                for level in range(cas.k):
                    lmask = _level_mask(full, acts[b, :level])
                    loss, g = fn(rows[level][b], int(acts[b, level]), lmask)
                    imit_total += loss / n
                    drows[level][b] += weight * g / n
        grads = cas.backward(cache, drows)
        total = cfg.td_weight * td_total * (cfg.algo != "bc") + weight * imit_total
        return UpdateStats(total, td_total, imit_total), grads

    def _imitation(self) -> tuple[float, Callable]:
        cfg = self.cfg
        if cfg.algo == "sdqfd":
            return cfg.margin_weight, lambda q, e, m: losses.slm_loss(q, e, self.margin, m)
        if cfg.algo == "dqfd":
            return cfg.margin_weight, lambda q, e, m: losses.lm_loss(q, e, self.margin, m)
        if cfg.algo in ("adet", "bc"):
            w = cfg.ce_weight if cfg.algo == "adet" else 1.0
            return w, lambda q, e, m: losses.ce_loss(q, e, cfg.ce_beta, m)
        return 0.0, lambda q, e, m: (0.0, np.zeros_like(q))

    def update(self, records: Sequence[TransitionRecord]) -> UpdateStats:
        stats, grads = self.loss_gradients(records)
        if self.adam is not None:
            self.adam.step(self.online.params, grads)
        else:
            self.online.apply_grads(grads, self.cfg.lr, self.cfg.weight_decay)
        self.updates += 1
        if self.updates % self.cfg.target_update == 0:
            self.target = self.online.copy()
        return stats


# -- phases ---------------------------------------------------------------------


def pretrain(agent: Agent, expert: ReplayBuffer, steps: int, rng: np.random.Generator) -> list[float]:
    """``steps`` updates on expert data alone; returns the loss after each."""
    if expert is None or not len(expert):
        raise TrainingError("pretraining needs a non-empty expert buffer (run gen-expert first)")
    return [agent.update(expert.sample(agent.cfg.batch, rng)).loss for _ in range(steps)]


@dataclass
class EpisodeLog:
    episode: int
    steps: int
    reward: float
    moving_success: float
    wall_ms: int


class RunLog:
    """Append-only CSV metrics (``episode, steps, reward, moving_success_<window>, wall_ms``)."""

    def __init__(self, window: int, path: str | Path | None = None, record_wall_time: bool = True):
        self.window = window
        self.rows: list[EpisodeLog] = []
        self._recent: deque[float] = deque(maxlen=window)
        self.path = Path(path) if path is not None else None
        self.record_wall_time = record_wall_time
        self._t0 = time.perf_counter()
        if self.path is not None:
            self.path.write_text(self.header() + "\n")

    @property
    def columns(self) -> list[str]:
        return ["episode", "steps", "reward", f"moving_success_{self.window}", "wall_ms"]

    def header(self) -> str:
        return ",".join(self.columns)

    def append(self, steps: int, reward: float) -> EpisodeLog:
        self._recent.append(1.0 if reward >= 1.0 else 0.0)
        wall = int((time.perf_counter() - self._t0) * 1000) if self.record_wall_time else 0
        row = EpisodeLog(len(self.rows) + 1, steps, reward, sum(self._recent) / len(self._recent), wall)
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(self._line(row) + "\n")
        return row

    def _line(self, row: EpisodeLog) -> str:
        return f"{row.episode},{row.steps},{row.reward:g},{row.moving_success:.6f},{row.wall_ms}"

    def to_csv(self) -> str:
        return "\n".join([self.header()] + [self._line(r) for r in self.rows]) + "\n"

    @property
    def full_window(self) -> bool:
        return len(self._recent) == self.window

    @property
    def moving_success(self) -> float:
        return sum(self._recent) / len(self._recent) if self._recent else 0.0


def run_episode(
    agent: Agent,
    env: BlockWorld,
    seed: int,
    epsilon: float = 0.0,
    rng: np.random.Generator | None = None,
    buffer: ReplayBuffer | None = None,
    on_step: Callable[[], None] | None = None,
) -> tuple[int, float]:
    """One episode; returns (steps, final reward).  Transitions go to ``buffer`` when given."""
    obs = env.reset(seed)
    mask = env.feasible_actions().active
    steps, reward, done = 0, 0.0, False
    while not done:
        if not mask.any():
            break
        action = agent.act(obs, mask, rng, epsilon)
        nobs, reward, done = env.step(action)
        nmask = env.feasible_actions().active
        steps += 1
        if buffer is not None:
            buffer.add(TransitionRecord(obs, action, reward, nobs, done, False, mask, nmask))
        if on_step is not None:
            on_step()
        obs, mask = nobs, nmask
    return steps, reward


def self_play(
    agent: Agent,
    env_config: BlockWorldConfig,
    expert: ReplayBuffer | None,
    episodes: int,
    rng: np.random.Generator,
    log: RunLog,
    pretrained: bool,
    checkpoint: Callable[[int], None] | None = None,
) -> RunLog:
    cfg = agent.cfg
    own = ReplayBuffer(cfg.buffer_capacity)
    env = BlockWorld(env_config)
    seeds = np.random.SeedSequence([cfg.seed, 1]).generate_state(episodes) if episodes else []

    def learn():
        agent.update(compose_batch(expert, own, cfg.batch, cfg.expert_fraction, rng))

    for ep in range(episodes):
        eps = cfg.epsilon(ep, pretrained)
        try:
            steps, reward = run_episode(agent, env, int(seeds[ep]), eps, rng, own, learn)
        except Exception:
            if checkpoint is not None:
                checkpoint(ep)
            raise
        log.append(steps, reward)
        if checkpoint is not None and cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
            checkpoint(ep + 1)
        if cfg.stop_success is not None and log.full_window and log.moving_success >= cfg.stop_success:
            break
    return log


def evaluate(agent: Agent, env_config: BlockWorldConfig, episodes: int, seed: int) -> tuple[float, float]:
    """Greedy rollouts without learning; returns (success rate, mean episode length)."""
    env = BlockWorld(env_config)
    seeds = np.random.SeedSequence([seed, 2]).generate_state(episodes) if episodes else []
    wins, lengths = 0, 0
    for s in seeds:
        steps, reward = run_episode(agent, env, int(s))
        wins += reward >= 1.0
        lengths += steps
    if not episodes:
        return 0.0, 0.0
    return wins / episodes, lengths / episodes


@dataclass
class RunResult:
    agent: Agent
    log: RunLog
    pretrain_losses: list[float] = field(default_factory=list)


def train(
    env_config: BlockWorldConfig,
    cfg: TrainConfig,
    expert_records: Sequence[TransitionRecord] | None = None,
    representation: str = "cascade",
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> RunResult:
    """Full two-phase run: pretrain on expert data (if any), then self-play."""
    if cfg.uses_imitation and not expert_records:
        raise TrainingError(f"{cfg.algo} needs an expert buffer; create one with 'gen-expert'")
    rng = np.random.default_rng([cfg.seed, 0])
    agent = Agent(make_cascade(representation, env_config, cfg), cfg)
    expert = None
    if expert_records:
        expert = ReplayBuffer(cfg.buffer_capacity, expert=True)
        expert.extend([replace(r, expert=True) for r in expert_records])
    pre_losses = pretrain(agent, expert, cfg.pretrain_steps, rng) if expert is not None else []
    log = RunLog(cfg.window, log_path, cfg.record_wall_time)

    checkpoint: Callable[[int], None] | None = None
    if checkpoint_dir is not None:
        ckdir = Path(checkpoint_dir)
        ckdir.mkdir(parents=True, exist_ok=True)
        suffix = ".npz" if isinstance(agent.online, ParamCascade) else ".json"

        def save_checkpoint(ep: int):
            agent.online.save(ckdir / f"checkpoint_{ep:06d}{suffix}")

        checkpoint = save_checkpoint

    if cfg.algo != "bc":
        self_play(agent, env_config, expert, cfg.self_play_episodes, rng, log, expert is not None, checkpoint)
    return RunResult(agent, log, pre_losses)
