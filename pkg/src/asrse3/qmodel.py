"""Hierarchical Q cascades, sequential greedy selection and TD targets.

A cascade has one value function per action factor.  Level ``i`` scores the
partial actions of factor ``i`` given the state and the prefix of partial
actions already chosen.  Two implementations share one interface:

* :class:`TabularCascade` -- exact tables keyed by (state key, prefix, head);
  used as oracle and for small problems.
* :class:`ParamCascade` -- a shared per-cell state encoder with small
  per-level heads, trained by hand-written backprop.

Both expose ``encode(obs_list) -> ctx`` and ``rows(ctx, level, prefixes)``
for evaluation, plus ``forward_train`` / ``backward`` / ``apply_grads`` for
learning.  Each level has separate pick and place outputs; the gripper bit
of the observation chooses between them.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import encoding
from .blockworld import BlockWorldConfig

CHECKPOINT_VERSION = 1
PREFIX_CACHE_SIZE = 200_000


class NoFeasibleAction(RuntimeError):
    pass


class GradCheckError(ValueError):
    pass


def head_of(obs: Any) -> int:
    """0 = pick head, 1 = place head."""
    return int(bool(getattr(obs, "gripper", False)))


def state_key(obs: Any) -> Any:
    return obs.key() if hasattr(obs, "key") else int(obs)


# -- tabular ------------------------------------------------------------------


class TabularCascade:
    """Lookup-table cascade; unseen entries read as ``init``."""

    def __init__(self, dims: Sequence[int], init: float = 0.0):
        self.dims = tuple(int(d) for d in dims)
        self.init = float(init)
        self.tables: list[dict[tuple, np.ndarray]] = [{} for _ in self.dims]
        self._grads: list[dict[tuple, np.ndarray]] = [{} for _ in self.dims]

    @property
    def k(self) -> int:
        return len(self.dims)

    # evaluation
    def encode(self, obs_list: Sequence[Any]) -> list[tuple[Any, int]]:
        return [(state_key(o), head_of(o)) for o in obs_list]

    def _row(self, level: int, key: tuple) -> np.ndarray:
        row = self.tables[level].get(key)
        return np.full(self.dims[level], self.init) if row is None else row

    def rows(self, ctx: list, level: int, prefixes: np.ndarray) -> np.ndarray:
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(len(ctx), level)
        return np.stack([self._row(level, (s, tuple(int(a) for a in p), g)) for (s, g), p in zip(ctx, prefixes)])

    def values(self, level: int, obs: Any, prefix: Sequence[int] = ()) -> np.ndarray:
        return self.rows(self.encode([obs]), level, np.asarray([prefix], dtype=np.int64).reshape(1, level))[0]

    def set_values(self, level: int, obs: Any, prefix: Sequence[int], row: np.ndarray):
        self.tables[level][(state_key(obs), tuple(prefix), head_of(obs))] = np.asarray(row, dtype=float).copy()

    # learning
    def forward_train(self, obs_list: Sequence[Any], actions: np.ndarray):
        ctx = self.encode(obs_list)
        actions = np.asarray(actions, dtype=np.int64)
        rows = [self.rows(ctx, i, actions[:, :i]) for i in range(self.k)]
        return rows, (ctx, actions)

    def backward(self, cache, drows: Sequence[np.ndarray]):
        ctx, actions = cache
        grads: list[dict[tuple, np.ndarray]] = [{} for _ in self.dims]
        for level, d in enumerate(drows):
            for (s, g), p, row in zip(ctx, actions[:, :level], d):
                key = (s, tuple(int(a) for a in p), g)
                if key in grads[level]:
                    grads[level][key] = grads[level][key] + row
                else:
                    grads[level][key] = np.array(row, dtype=float)
        return grads

    def apply_grads(self, grads, lr: float, weight_decay: float = 0.0):
        for level, table in enumerate(grads):
            for key, g in table.items():
                row = self._row(level, key)
                if weight_decay:
                    row = row * (1.0 - lr * weight_decay)
                self.tables[level][key] = row - lr * g

    def copy(self) -> "TabularCascade":
        return copy.deepcopy(self)

    def to_levels(self, action: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(a) for a in action)

    def from_levels(self, levels: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(a) for a in levels)

    def level_masks_from(self, full_mask: np.ndarray | None) -> np.ndarray | None:
        return full_mask

    @classmethod
    def from_flat_q(cls, q_by_state: dict[Any, np.ndarray] | np.ndarray, head: int = 0) -> "TabularCascade":
        """Max-marginalise flat Q tables ``q[state][a1, ..., ak]`` into a cascade.

        Level ``i`` stores ``max`` over factors ``i+1..k`` of the flat table.
        Masked tuples must be ``-inf`` in the input.
        """
        items = q_by_state.items() if isinstance(q_by_state, dict) else enumerate(q_by_state)
        casc = None
        for s, q in items:
            q = np.asarray(q, dtype=float)
            if casc is None:
                casc = cls(q.shape)
            k = q.ndim
            for level in range(k):
                marg = q.max(axis=tuple(range(level + 1, k))) if level + 1 < k else q
                for prefix in np.ndindex(*q.shape[:level]):
                    casc.tables[level][(s, tuple(int(a) for a in prefix), head)] = np.array(marg[prefix], dtype=float)
        if casc is None:
            raise ValueError("no states given")
        return casc

    @classmethod
    def from_solution(cls, solution, num_states: int) -> "TabularCascade":
        """Cascade holding the exact augmented ``Q̄*`` from ``value_iteration(augment(mdp))``."""
        qs = solution.Q
        casc = cls([q.shape[-1] for q in qs])
        for level, q in enumerate(qs):
            for idx in np.ndindex(*q.shape[:-1]):
                casc.tables[level][(int(idx[0]), tuple(int(a) for a in idx[1:]), 0)] = np.array(q[idx], dtype=float)
        return casc

    # checkpoints
    def save(self, path: str | Path):
        doc = {
            "version": CHECKPOINT_VERSION,
            "kind": type(self).__name__,
            "dims": list(self.dims),
            "init": self.init,
            "extra": self._extra(),
            "levels": [
                [[_encode_key(s), list(p), g, [repr(float(v)) for v in row]] for (s, p, g), row in sorted(t.items(), key=_sort_key)]
                for t in self.tables
            ],
        }
        Path(path).write_text(json.dumps(doc))

    def _extra(self) -> dict:
        return {}

    @classmethod
    def load(cls, path: str | Path) -> "TabularCascade":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        kind = FlatTabular if doc["kind"] == "FlatTabular" else TabularCascade
        casc = kind(doc["extra"]["env_dims"]) if kind is FlatTabular else kind(doc["dims"], doc["init"])
        casc.init = doc["init"]
        for level, entries in enumerate(doc["levels"]):
            for s, p, g, row in entries:
                casc.tables[level][(_decode_key(s), tuple(p), g)] = np.array([float(v) for v in row])
        return casc


class FlatTabular(TabularCascade):
    """Single-level table over whole action tuples (no cascade)."""

    def __init__(self, env_dims: Sequence[int], init: float = 0.0):
        self.env_dims = tuple(int(d) for d in env_dims)
        super().__init__((math.prod(self.env_dims),), init)

    def to_levels(self, action: Sequence[int]) -> tuple[int, ...]:
        return (int(np.ravel_multi_index(tuple(action), self.env_dims)),)

    def from_levels(self, levels: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(a) for a in np.unravel_index(int(levels[0]), self.env_dims))

    def level_masks_from(self, full_mask: np.ndarray | None) -> np.ndarray | None:
        return None if full_mask is None else np.asarray(full_mask).reshape(-1)

    def _extra(self) -> dict:
        return {"env_dims": list(self.env_dims)}


def _encode_key(s: Any) -> list:
    return ["b", s.hex()] if isinstance(s, bytes) else ["i", int(s)]


def _decode_key(s: list) -> Any:
    return bytes.fromhex(s[1]) if s[0] == "b" else int(s[1])


def _sort_key(item):
    (s, p, g), _ = item
    return (str(_encode_key(s)), p, g)


# -- parametric ---------------------------------------------------------------


def _cell_patches(scenes: np.ndarray, m: int) -> np.ndarray:
    """All ``m x m`` zero-padded crops of a ``(B, W, H)`` stack, shape ``(B, W * H, m * m)``."""
    r = m // 2
    padded = np.pad(scenes, ((0, 0), (r, r), (r, r)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (m, m), axis=(1, 2))
    b, w, h = scenes.shape
    return win.reshape(b, w * h, m * m)


def blockworld_encoder(config: BlockWorldConfig) -> Callable[[np.ndarray, int, Sequence[int]], np.ndarray]:
    """Prefix encoders for levels >= 1: f2 after xy, f3 after theta, f4 after z."""
    m = config.crop

    def encode(scene: np.ndarray, level: int, prefix: Sequence[int]) -> np.ndarray:
        xy = config.cell(prefix[0])
        if level == 1:
            return encoding.f2(scene, xy, m)
        theta = prefix[1] * encoding.QUARTER_TURN
        if level == 2:
            return encoding.f3(scene, xy, theta, m)
        if level == 3:
            return encoding.f4(scene, xy, theta, int(prefix[2]), m)
        raise ValueError(f"no prefix encoder for level {level}")

    return encode


@dataclass
class _Ctx:
    obs: list
    heads: np.ndarray  # (B,)
    x0: np.ndarray  # (B, C, D0)
    h0: np.ndarray  # (B, C, H)
    e: np.ndarray  # (B, H)
    hands: np.ndarray  # (B, hand_dim)


class ParamCascade:
    """Small differentiable cascade for block-world observations.

    Level 0 applies one ``tanh`` layer to every cell's input (its crop of the
    heightmap, the in-hand image and two global height statistics), then a
    linear pick or place output.  The mean of those hidden units is the shared
    state encoding ``e(s)``.  Level ``i >= 1`` feeds ``[prefix encoding,
    in-hand, e(s)]`` through its own ``tanh`` layer and linear pick/place
    outputs of width ``dims[i]``.  Gradients of later levels flow back into
    the shared encoder through ``e(s)``.
    """

    def __init__(
        self,
        config: BlockWorldConfig,
        hidden: int = 32,
        level_hidden: int = 32,
        seed: int = 0,
        height_scale: float = 4.0,
    ):
        self.config = config
        self.dims = config.action_dims
        self.hidden = hidden
        self.level_hidden = level_hidden
        self.height_scale = float(height_scale)
        self.seed = seed
        self.encoder = blockworld_encoder(config)
        self._codes: dict[tuple, np.ndarray] = {}
        m = config.crop
        self.hand_dim = (3 if config.action_mode == "XYTZ" else 1) * m * m
        self.d0 = m * m + self.hand_dim + 2
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {
            "enc.W": rng.normal(0, 1 / np.sqrt(self.d0), (self.d0, hidden)),
            "enc.b": np.zeros(hidden),
            "q0.V": rng.normal(0, 0.1 / np.sqrt(hidden), (2, hidden)),
            "q0.c": np.zeros(2),
        }
        for i in range(1, len(self.dims)):
            din = self._prefix_dim(i) + self.hand_dim + hidden
            p[f"q{i}.W"] = rng.normal(0, 1 / np.sqrt(din), (din, level_hidden))
            p[f"q{i}.b"] = np.zeros(level_hidden)
            p[f"q{i}.V"] = rng.normal(0, 0.1 / np.sqrt(level_hidden), (2, self.dims[i], level_hidden))
            p[f"q{i}.c"] = np.zeros((2, self.dims[i]))
        self.params = p

    @property
    def k(self) -> int:
        return len(self.dims)

    def _prefix_dim(self, level: int) -> int:
        m = self.config.crop
        return 3 * m * m if level >= 3 else m * m

    def copy(self) -> "ParamCascade":
        other = copy.copy(self)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def to_levels(self, action: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(a) for a in action)

    def from_levels(self, levels: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(a) for a in levels)

    def level_masks_from(self, full_mask: np.ndarray | None) -> np.ndarray | None:
        return full_mask

    # forward
    def encode(self, obs_list: Sequence[Any]) -> _Ctx:
        s = self.height_scale
        m = self.config.crop
        scenes = np.stack([np.asarray(o.scene, dtype=float) for o in obs_list])
        patches = _cell_patches(scenes, m) / s
        hands = np.stack([np.asarray(o.in_hand, dtype=float).reshape(-1) for o in obs_list]) / s
        glob = np.stack([scenes.max(axis=(1, 2)) / s, scenes.mean(axis=(1, 2))], axis=1)
        b, c, _ = patches.shape
        extra = np.concatenate([hands, glob], axis=1)  # (B, hand + 2)
        x0 = np.concatenate([patches, np.broadcast_to(extra[:, None, :], (b, c, extra.shape[1]))], axis=2)
        h0 = np.tanh(x0 @ self.params["enc.W"] + self.params["enc.b"])
        heads = np.array([head_of(o) for o in obs_list], dtype=np.int64)
        return _Ctx(list(obs_list), heads, x0, h0, h0.mean(axis=1), hands)

    def _prefix_code(self, scene: np.ndarray, level: int, prefix: tuple[int, ...]) -> np.ndarray:
        # prefix encodings do not depend on parameters, so they are memoised
        key = (scene.tobytes(), level, prefix)
        hit = self._codes.get(key)
        if hit is None:
            if len(self._codes) >= PREFIX_CACHE_SIZE:
                self._codes.clear()
            hit = self.encoder(np.asarray(scene, dtype=float), level, prefix).reshape(-1) / self.height_scale
            self._codes[key] = hit
        return hit

    def _level_input(self, ctx: _Ctx, level: int, prefixes: np.ndarray) -> np.ndarray:
        enc = np.stack([self._prefix_code(o.scene, level, tuple(int(a) for a in p)) for o, p in zip(ctx.obs, prefixes)])
        return np.concatenate([enc, ctx.hands, ctx.e], axis=1)

    def rows(self, ctx: _Ctx, level: int, prefixes: np.ndarray) -> np.ndarray:
        p = self.params
        if level == 0:
            return np.einsum("bch,bh->bc", ctx.h0, p["q0.V"][ctx.heads]) + p["q0.c"][ctx.heads][:, None]
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(len(ctx.obs), level)
        x = self._level_input(ctx, level, prefixes)
        h = np.tanh(x @ p[f"q{level}.W"] + p[f"q{level}.b"])
        return np.einsum("bdh,bh->bd", p[f"q{level}.V"][ctx.heads], h) + p[f"q{level}.c"][ctx.heads]

    def values(self, level: int, obs: Any, prefix: Sequence[int] = ()) -> np.ndarray:
        ctx = self.encode([obs])
        return self.rows(ctx, level, np.asarray([prefix], dtype=np.int64).reshape(1, level))[0]

    # training
    def forward_train(self, obs_list: Sequence[Any], actions: np.ndarray):
        ctx = self.encode(obs_list)
        actions = np.asarray(actions, dtype=np.int64)
        p = self.params
        rows = [self.rows(ctx, 0, actions[:, :0])]
        level_cache = []
        for level in range(1, self.k):
            x = self._level_input(ctx, level, actions[:, :level])
            h = np.tanh(x @ p[f"q{level}.W"] + p[f"q{level}.b"])
            rows.append(np.einsum("bdh,bh->bd", p[f"q{level}.V"][ctx.heads], h) + p[f"q{level}.c"][ctx.heads])
            level_cache.append((x, h))
        return rows, (ctx, level_cache)

    def backward(self, cache, drows: Sequence[np.ndarray]) -> dict[str, np.ndarray]:
        ctx, level_cache = cache
        p = self.params
        g = {k: np.zeros_like(v) for k, v in p.items()}
        heads = ctx.heads
        de = np.zeros_like(ctx.e)
        hid = self.hidden
        for level in range(self.k - 1, 0, -1):
            x, h = level_cache[level - 1]
            dq = drows[level]  # (B, d)
            V = p[f"q{level}.V"][heads]  # (B, d, Hl)
            np.add.at(g[f"q{level}.V"], heads, dq[:, :, None] * h[:, None, :])
            np.add.at(g[f"q{level}.c"], heads, dq)
            dh = np.einsum("bd,bdh->bh", dq, V)
            dpre = dh * (1.0 - h * h)
            g[f"q{level}.W"] += x.T @ dpre
            g[f"q{level}.b"] += dpre.sum(axis=0)
            dx = dpre @ p[f"q{level}.W"].T
            de += dx[:, -hid:]
        dq0 = drows[0]  # (B, C)
        h0 = ctx.h0
        np.add.at(g["q0.V"], heads, np.einsum("bc,bch->bh", dq0, h0))
        np.add.at(g["q0.c"], heads, dq0.sum(axis=1))
        dh0 = dq0[:, :, None] * p["q0.V"][heads][:, None, :] + de[:, None, :] / h0.shape[1]
        dpre0 = dh0 * (1.0 - h0 * h0)
        g["enc.W"] += np.einsum("bcd,bch->dh", ctx.x0, dpre0)
        g["enc.b"] += dpre0.sum(axis=(0, 1))
        return g

    def apply_grads(self, grads: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0):
        for k, v in self.params.items():
            if weight_decay:
                v *= 1.0 - lr * weight_decay
            v -= lr * grads[k]

    # checkpoints
    def save(self, path: str | Path):
        manifest = {
            "version": CHECKPOINT_VERSION,
            "kind": "ParamCascade",
            "hidden": self.hidden,
            "level_hidden": self.level_hidden,
            "height_scale": self.height_scale,
            "seed": self.seed,
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
        }
        with open(path, "wb") as fh:
            np.savez(fh, __manifest__=np.array(json.dumps(manifest)), **self.params)

    @classmethod
    def load(cls, path: str | Path, config: BlockWorldConfig) -> "ParamCascade":
        with np.load(path, allow_pickle=False) as data:
            manifest = json.loads(str(data["__manifest__"]))
            if manifest["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {manifest['version']}")
            casc = cls(config, manifest["hidden"], manifest["level_hidden"], manifest["seed"], manifest["height_scale"])
            for k, shape in manifest["shapes"].items():
                if list(casc.params[k].shape) != shape:
                    raise ValueError(f"checkpoint shape mismatch for {k}")
                casc.params[k] = np.array(data[k])
        return casc


def load_checkpoint(path: str | Path, config: BlockWorldConfig | None = None):
    path = Path(path)
    if path.suffix == ".npz":
        if config is None:
            raise ValueError("parametric checkpoints need the task config")
        return ParamCascade.load(path, config)
    return TabularCascade.load(path)


# -- selection and targets ----------------------------------------------------


def _masked_argmax(row: np.ndarray, mask: np.ndarray | None) -> int:
    if mask is not None:
        if not mask.any():
            raise NoFeasibleAction("every partial action at this level is masked")
        row = np.where(mask, row, -np.inf)
    return int(np.argmax(row))


def _level_mask(full: np.ndarray | None, prefix: Sequence[int]) -> np.ndarray | None:
    if full is None:
        return None
    sub = full[tuple(prefix)]
    return sub.reshape(sub.shape[0], -1).any(axis=1) if sub.ndim > 1 else sub


def greedy_batch(cascade, obs_list: Sequence[Any], masks: Sequence[np.ndarray | None] | None = None):
    """Sequential greedy selection for a batch.

    Returns ``(actions (B, k), values (B, k))`` in cascade levels, where
    ``values[:, i]`` is the chosen entry of level ``i``.
    """
    n = len(obs_list)
    masks = [None] * n if masks is None else [cascade.level_masks_from(m) for m in masks]
    ctx = cascade.encode(obs_list)
    actions = np.zeros((n, cascade.k), dtype=np.int64)
    values = np.zeros((n, cascade.k))
    for level in range(cascade.k):
        rows = cascade.rows(ctx, level, actions[:, :level])
        for b in range(n):
            a = _masked_argmax(rows[b], _level_mask(masks[b], actions[b, :level]))
            actions[b, level] = a
            values[b, level] = rows[b, a]
    return actions, values


def greedy_action(cascade, obs: Any, mask: np.ndarray | None = None) -> tuple[tuple[int, ...], list[np.ndarray]]:
    """Pick ``a1`` from level 0, then each later factor given the chosen prefix.

    ``mask`` is a boolean array over full action tuples.  Returns the action
    (in the cascade's own level coordinates) and the per-level value rows.
    """
    full = cascade.level_masks_from(mask)
    ctx = cascade.encode([obs])
    prefix: list[int] = []
    traces = []
    for level in range(cascade.k):
        row = cascade.rows(ctx, level, np.asarray([prefix], dtype=np.int64).reshape(1, level))[0]
        traces.append(row)
        prefix.append(_masked_argmax(row, _level_mask(full, prefix)))
    return tuple(prefix), traces


def n_step_targets(target, records: Sequence[Any], gamma: float) -> np.ndarray:
    """Shared target ``r + gamma * max Q_k((s', greedy prefix), .)`` for every level.

    Terminal records get ``y = r``.
    """
    y = np.array([float(r.reward) for r in records])
    live = [i for i, r in enumerate(records) if not r.done]
    for i in live:
        if records[i].next_obs is None:
            raise ValueError("non-terminal record without a successor observation")
    if live:
        _, values = greedy_batch(target, [records[i].next_obs for i in live], [records[i].next_mask for i in live])
        y[live] += gamma * values[:, -1]
    return y


def one_step_targets(target, records: Sequence[Any], gamma: float) -> np.ndarray:
    """Per-level targets, shape ``(B, k)``.

    ``y_i = max Q_{i+1}((s, a_1..a_i), .)`` for ``i < k`` and
    ``y_k = r + gamma * max Q_1(s', .)`` (``r`` alone when terminal).
    """
    n, k = len(records), target.k
    y = np.zeros((n, k))
    ctx = target.encode([r.obs for r in records])
    acts = np.array([target.to_levels(r.action) for r in records], dtype=np.int64).reshape(n, k)
    for level in range(1, k):
        rows = target.rows(ctx, level, acts[:, :level])
        for b, rec in enumerate(records):
            mask = _level_mask(target.level_masks_from(rec.mask), acts[b, :level])
            y[b, level - 1] = np.max(np.where(mask, rows[b], -np.inf)) if mask is not None else rows[b].max()
    y[:, k - 1] = [float(r.reward) for r in records]
    live = [i for i, r in enumerate(records) if not r.done]
    for i in live:
        if records[i].next_obs is None:
            raise ValueError("non-terminal record without a successor observation")
    if live:
        nctx = target.encode([records[i].next_obs for i in live])
        rows = target.rows(nctx, 0, np.zeros((len(live), 0), dtype=np.int64))
        for j, i in enumerate(live):
            mask = _level_mask(target.level_masks_from(records[i].next_mask), ())
            best = np.max(np.where(mask, rows[j], -np.inf)) if mask is not None else rows[j].max()
            y[i, k - 1] += gamma * best
    return y


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]]
    passed: bool

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(
    params: dict[str, np.ndarray],
    loss_and_grad: Callable[[], tuple[float, dict[str, np.ndarray]]],
    tol: float = 1e-4,
    step: float = 1e-5,
    eps: float = 1e-6,
    loss_only: Callable[[], float] | None = None,
) -> GradCheckResult:
    """Compare analytic gradients with central differences, entry by entry.

    The error per entry is ``|analytic - numeric| / (|analytic| + |numeric| + eps)``;
    ``eps`` sits above the ~1e-11 rounding noise of a difference quotient so
    parameters with no influence on the loss do not register as failures.

    ``loss_and_grad`` reads the current contents of ``params`` (mutated in
    place during the check and restored afterwards).  ``loss_only``, when
    given, is used for the perturbed evaluations to skip the backward pass.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    loss, grads = loss_and_grad()
    if not np.isfinite(loss):
        raise GradCheckError("loss is not finite")
    evaluate = loss_only if loss_only is not None else (lambda: loss_and_grad()[0])
    worst, where = 0.0, ("", ())
    for name, value in params.items():
        for idx in np.ndindex(*value.shape):
            orig = value[idx]
            value[idx] = orig + step
            up = evaluate()
            value[idx] = orig - step
            down = evaluate()
            value[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GradCheckError(f"loss not finite when perturbing {name}{idx}")
            numeric = (up - down) / (2 * step)
            analytic = grads[name][idx]
            err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + eps)
            if err > worst:
                worst, where = err, (name, idx)
    return GradCheckResult(float(worst), where, worst < tol)
