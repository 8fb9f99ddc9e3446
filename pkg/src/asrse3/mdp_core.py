"""Finite MDPs with factored action sets, the augmented-state transform and
exact solvers.

Actions of a :class:`FactoredMdp` are tuples ``(a1, ..., ak)`` with
``0 <= ai < dims[i]``.  Internally they are stored flat, in C order
(``np.ravel_multi_index``), so the transition tensor has shape
``(S, prod(dims), S)``.

:func:`augment` turns one k-dimensional choice into k one-dimensional ones.
Augmented states ``(s, a1, ..., a_{i-1})`` carry no reward and discount 1;
only the last partial action touches the source dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Iterator, Sequence

import numpy as np

FLAT_ENTRY_CAP = 10**6


class MdpError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"value iteration stalled at residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class FactoredMdp:
    """Finite MDP over ``num_states`` states and action tuples in ``A1 x ... x Ak``.

    ``prob[s, a, s']`` is the outcome distribution of flat action ``a``,
    ``reward[s, a]`` its expected reward and ``done[s, a]`` whether the
    transition ends the episode.  ``feasible[s, a]`` marks allowed actions;
    infeasible entries keep their dynamics but are maximised as ``-inf``.
    """

    num_states: int
    action_dims: tuple[int, ...]
    prob: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    gamma: float
    initial_state: int = 0
    feasible: np.ndarray | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.action_dims)
        object.__setattr__(self, "action_dims", dims)
        if len(dims) == 0:
            raise MdpError("action_dims must have at least one factor")
        if any(d <= 0 for d in dims):
            raise MdpError(f"every action factor needs at least one value, got {dims}")
        if not 0.0 < self.gamma <= 1.0:
            raise MdpError(f"gamma must lie in (0, 1], got {self.gamma}")
        n, na = self.num_states, self.num_flat_actions
        if self.prob.shape != (n, na, n):
            raise MdpError(f"prob has shape {self.prob.shape}, expected {(n, na, n)}")
        if self.reward.shape != (n, na) or self.done.shape != (n, na):
            raise MdpError("reward and done must have shape (num_states, num_flat_actions)")
        if not np.allclose(self.prob.sum(axis=2), 1.0, atol=1e-12):
            raise MdpError("outcome distributions must sum to one")
        if not 0 <= self.initial_state < n:
            raise MdpError("initial_state out of range")
        feasible = self.feasible
        if feasible is None:
            feasible = np.ones((n, na), dtype=bool)
        feasible = np.asarray(feasible, dtype=bool)
        if feasible.shape != (n, na):
            raise MdpError("feasible must have shape (num_states, num_flat_actions)")
        if not feasible.any(axis=1).all():
            raise MdpError("every state needs at least one feasible action")
        object.__setattr__(self, "feasible", feasible)
        object.__setattr__(self, "done", np.asarray(self.done, dtype=bool))

    @property
    def k(self) -> int:
        return len(self.action_dims)

    @property
    def num_flat_actions(self) -> int:
        return math.prod(self.action_dims)

    @property
    def deterministic(self) -> bool:
        return bool(np.all((self.prob == 0.0) | (self.prob == 1.0)))

    def flat_index(self, action: Sequence[int]) -> int:
        if len(action) != self.k:
            raise MdpError(f"expected {self.k} partial actions, got {len(action)}")
        for a, d in zip(action, self.action_dims):
            if not 0 <= a < d:
                raise MdpError(f"partial action {a} outside [0, {d})")
        return int(np.ravel_multi_index(tuple(action), self.action_dims))

    def action_tuple(self, flat: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat, self.action_dims))

    def transition(self, state: int, action: Sequence[int], rng: np.random.Generator | None = None):
        """Return ``(next_state, reward, done)``; stochastic MDPs need ``rng``."""
        a = self.flat_index(action)
        row = self.prob[state, a]
        if self.deterministic:
            nxt = int(np.argmax(row))
        else:
            if rng is None:
                raise MdpError("sampling a stochastic transition needs an rng")
            nxt = int(rng.choice(self.num_states, p=row))
        return nxt, float(self.reward[state, a]), bool(self.done[state, a])

    def feasible_mask(self, state: int) -> np.ndarray:
        return self.feasible[state].reshape(self.action_dims)

    @classmethod
    def from_function(
        cls,
        num_states: int,
        action_dims: Sequence[int],
        fn: Callable[[int, tuple[int, ...]], tuple[int, float, bool]],
        gamma: float,
        initial_state: int = 0,
        feasible: Callable[[int, tuple[int, ...]], bool] | None = None,
    ) -> "FactoredMdp":
        """Build a deterministic MDP from ``fn(state, action) -> (next, reward, done)``."""
        dims = tuple(action_dims)
        if len(dims) == 0:
            raise MdpError("action_dims must have at least one factor")
        if any(d <= 0 for d in dims):
            raise MdpError(f"every action factor needs at least one value, got {dims}")
        na = math.prod(dims)
        prob = np.zeros((num_states, na, num_states))
        reward = np.zeros((num_states, na))
        done = np.zeros((num_states, na), dtype=bool)
        feas = np.ones((num_states, na), dtype=bool)
        for s in range(num_states):
            for a, tup in enumerate(product(*(range(d) for d in dims))):
                nxt, r, d = fn(s, tup)
                prob[s, a, nxt] = 1.0
                reward[s, a] = r
                done[s, a] = d
                if feasible is not None:
                    feas[s, a] = feasible(s, tup)
        return cls(num_states, dims, prob, reward, done, gamma, initial_state, feas)


@dataclass(frozen=True)
class AugmentedState:
    base: int
    prefix: tuple[int, ...] = ()

    @property
    def level(self) -> int:
        """0-based index of the partial action chosen next."""
        return len(self.prefix)


@dataclass(frozen=True, eq=False)
class AugmentedMdp:
    source: FactoredMdp
    states: tuple[AugmentedState, ...] = field(repr=False)

    @property
    def level_dims(self) -> tuple[int, ...]:
        return self.source.action_dims

    @property
    def k(self) -> int:
        return self.source.k

    @property
    def gamma(self) -> float:
        return self.source.gamma

    def actions(self, state: AugmentedState) -> range:
        return range(self.level_dims[state.level])

    def index(self, state: AugmentedState) -> int:
        # levels are laid out consecutively, each in C order over (s, prefix)
        offset = 0
        n = self.source.num_states
        for i in range(state.level):
            offset += n * math.prod(self.level_dims[:i])
        local = np.ravel_multi_index((state.base, *state.prefix), (n, *self.level_dims[: state.level]))
        return offset + int(local)

    def outcomes(self, state: AugmentedState, action: int) -> list[tuple[float, AugmentedState, float, float, bool]]:
        """``[(prob, next_state, reward, discount, done), ...]`` for one partial action."""
        self._check(state)
        if not 0 <= action < self.level_dims[state.level]:
            raise MdpError(f"partial action {action} outside level {state.level}")
        prefix = state.prefix + (action,)
        if len(prefix) < self.k:
            return [(1.0, AugmentedState(state.base, prefix), 0.0, 1.0, False)]
        src = self.source
        a = src.flat_index(prefix)
        row = src.prob[state.base, a]
        r = float(src.reward[state.base, a])
        d = bool(src.done[state.base, a])
        return [(float(row[n]), AugmentedState(int(n)), r, src.gamma, d) for n in np.flatnonzero(row)]

    def _check(self, state: AugmentedState):
        if not 0 <= state.base < self.source.num_states or state.level >= self.k:
            raise MdpError(f"{state} is not a state of this augmented MDP")
        for a, d in zip(state.prefix, self.level_dims):
            if not 0 <= a < d:
                raise MdpError(f"{state} has an out-of-range prefix")


def _enumerate_states(mdp: FactoredMdp) -> Iterator[AugmentedState]:
    for level in range(mdp.k):
        for tup in product(range(mdp.num_states), *(range(d) for d in mdp.action_dims[:level])):
            yield AugmentedState(tup[0], tuple(tup[1:]))


def augment(mdp: FactoredMdp) -> AugmentedMdp:
    """Replace each k-dimensional action with k sequential partial actions."""
    if mdp.k == 0 or any(d == 0 for d in mdp.action_dims):
        raise MdpError("augment needs k >= 1 and non-empty action factors")
    return AugmentedMdp(mdp, tuple(_enumerate_states(mdp)))


def augmented_state_count(num_states: int, dims: Sequence[int]) -> int:
    return sum(num_states * math.prod(dims[:i]) for i in range(len(dims)))


@dataclass
class Solution:
    """Result of :func:`value_iteration`.

    For a :class:`FactoredMdp`, ``V`` has shape ``(S,)``, ``Q`` has shape
    ``(S, *dims)`` and ``policy`` holds flat action indices.  For an
    :class:`AugmentedMdp`, ``V[i]`` has shape ``(S, d1, ..., d_i)`` (values of
    states whose prefix has length ``i``), ``Q[i]`` has shape
    ``(S, d1, ..., d_{i+1})`` and ``policy[i]`` the greedy partial action.
    """

    V: np.ndarray | list[np.ndarray]
    Q: np.ndarray | list[np.ndarray]
    policy: np.ndarray | list[np.ndarray]
    iterations: int
    residual: float


def _residual(a: np.ndarray, b: np.ndarray) -> float:
    both_inf = np.isneginf(a) & np.isneginf(b)
    with np.errstate(invalid="ignore"):
        diff = np.where(both_inf, 0.0, np.abs(a - b))
    return float(diff.max()) if diff.size else 0.0


def _flat_backup(mdp: FactoredMdp, v: np.ndarray) -> np.ndarray:
    cont = np.where(mdp.done, 0.0, mdp.gamma)
    q = mdp.reward + cont * (mdp.prob @ v)
    return np.where(mdp.feasible, q, -np.inf)


def _solve_flat(mdp: FactoredMdp, tol: float, max_iter: int) -> Solution:
    v = np.zeros(mdp.num_states)
    best, stall = math.inf, 0
    for it in range(1, max_iter + 1):
        q = _flat_backup(mdp, v)
        v_new = q.max(axis=1)
        res = _residual(v_new, v)
        v = v_new
        if res < tol:
            q = _flat_backup(mdp, v)
            return Solution(q.max(axis=1), q.reshape(mdp.num_states, *mdp.action_dims), q.argmax(axis=1), it, res)
        # residual that stops shrinking for many sweeps signals divergence (gamma = 1)
        if res < best * (1 - 1e-12):
            best, stall = res, 0
        else:
            stall += 1
            if stall > 1000:
                raise ConvergenceError(res, it)
    raise ConvergenceError(res, max_iter)


def _aug_backup(aug: AugmentedMdp, values: list[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """One sweep, deepest level first, so each intermediate level sees this sweep's values."""
    src = aug.source
    k = aug.k
    qs: list[np.ndarray] = [None] * k  # type: ignore[list-item]
    new_values: list[np.ndarray] = [None] * k  # type: ignore[list-item]
    qs[k - 1] = _flat_backup(src, values[0]).reshape(src.num_states, *src.action_dims)
    new_values[k - 1] = qs[k - 1].max(axis=-1)
    for i in range(k - 2, -1, -1):
        # intermediate step: reward 0, discount 1, next state is the longer prefix
        qs[i] = new_values[i + 1]
        new_values[i] = qs[i].max(axis=-1)
    return new_values, qs


def _solve_augmented(aug: AugmentedMdp, tol: float, max_iter: int) -> Solution:
    src = aug.source
    dims = src.action_dims
    values = [np.zeros((src.num_states, *dims[:i])) for i in range(aug.k)]
    best, stall = math.inf, 0
    for it in range(1, max_iter + 1):
        new_values, _ = _aug_backup(aug, values)
        res = max(_residual(a, b) for a, b in zip(new_values, values))
        values = new_values
        if res < tol:
            values, qs = _aug_backup(aug, values)
            return Solution(values, qs, [q.argmax(axis=-1) for q in qs], it, res)
        if res < best * (1 - 1e-12):
            best, stall = res, 0
        else:
            stall += 1
            if stall > 1000 * aug.k:
                raise ConvergenceError(res, it)
    raise ConvergenceError(res, max_iter)


def value_iteration(mdp: FactoredMdp | AugmentedMdp, tol: float = 1e-12, max_iter: int = 200_000) -> Solution:
    """Synchronous value iteration until the max-norm Bellman residual drops below ``tol``.

    Greedy policies break ties toward the lowest action index.  Raises
    :class:`ConvergenceError` when the residual stalls above ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if isinstance(mdp, AugmentedMdp):
        return _solve_augmented(mdp, tol, max_iter)
    if mdp.num_states * mdp.num_flat_actions > FLAT_ENTRY_CAP:
        raise MdpError(f"flat solve over {mdp.num_states * mdp.num_flat_actions} entries exceeds cap {FLAT_ENTRY_CAP}")
    return _solve_flat(mdp, tol, max_iter)


def flat_qstar(mdp: FactoredMdp, tol: float = 1e-12) -> np.ndarray:
    """Exact Q* over full action tuples, shape ``(S, *dims)``; masked tuples are -inf."""
    entries = mdp.num_states * mdp.num_flat_actions
    if entries > FLAT_ENTRY_CAP:
        raise MdpError(f"{entries} state-action entries exceed the enumeration cap {FLAT_ENTRY_CAP}")
    return _solve_flat(mdp, tol, 200_000).Q


def random_factored_mdp(
    rng: np.random.Generator,
    num_states: int,
    action_dims: Sequence[int],
    gamma: float = 0.9,
    stochastic: bool = False,
    terminal_prob: float = 0.0,
    mask_prob: float = 0.0,
    branching: int = 3,
) -> FactoredMdp:
    """Random MDP with rewards in [0, 1]; used by property tests and ``verify``."""
    dims = tuple(int(d) for d in action_dims)
    na = math.prod(dims)
    prob = np.zeros((num_states, na, num_states))
    if stochastic:
        for s in range(num_states):
            for a in range(na):
                support = rng.choice(num_states, size=min(branching, num_states), replace=False)
                w = rng.random(len(support)) + 0.1
                prob[s, a, support] = w / w.sum()
    else:
        nxt = rng.integers(num_states, size=(num_states, na))
        prob[np.arange(num_states)[:, None], np.arange(na)[None, :], nxt] = 1.0
    reward = rng.random((num_states, na))
    done = rng.random((num_states, na)) < terminal_prob
    feasible = rng.random((num_states, na)) >= mask_prob
    # keep at least one action per state
    empty = ~feasible.any(axis=1)
    feasible[empty, rng.integers(na, size=int(empty.sum()))] = True
    return FactoredMdp(num_states, dims, prob, reward, done, gamma, 0, feasible)


# -- plain-text fixtures ------------------------------------------------------

_HEADER = "factored-mdp v1"


def dumps_mdp(mdp: FactoredMdp) -> str:
    """Serialize as text; one ``row`` line per (state, action tuple)."""
    lines = [
        f"# {_HEADER}",
        f"states {mdp.num_states}",
        "dims " + " ".join(str(d) for d in mdp.action_dims),
        f"gamma {float(mdp.gamma)!r}",
        f"initial {mdp.initial_state}",
        "# row s a1..ak | reward done feasible | next:prob ...",
    ]
    for s in range(mdp.num_states):
        for a in range(mdp.num_flat_actions):
            tup = " ".join(str(x) for x in mdp.action_tuple(a))
            outs = " ".join(f"{n}:{float(mdp.prob[s, a, n])!r}" for n in np.flatnonzero(mdp.prob[s, a]))
            lines.append(
                f"row {s} {tup} | {float(mdp.reward[s, a])!r} {int(mdp.done[s, a])} {int(mdp.feasible[s, a])} | {outs}"
            )
    return "\n".join(lines) + "\n"


def loads_mdp(text: str) -> FactoredMdp:
    header: dict[str, list[str]] = {}
    rows: list[str] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "row":
            rows.append(rest)
        else:
            header[key] = rest.split()
    try:
        n = int(header["states"][0])
        dims = tuple(int(x) for x in header["dims"])
        gamma = float(header["gamma"][0])
        initial = int(header.get("initial", ["0"])[0])
    except (KeyError, IndexError, ValueError) as exc:
        raise MdpError(f"malformed MDP fixture header: {exc}") from exc
    na = math.prod(dims)
    prob = np.zeros((n, na, n))
    reward = np.zeros((n, na))
    done = np.zeros((n, na), dtype=bool)
    feasible = np.ones((n, na), dtype=bool)
    seen = np.zeros((n, na), dtype=bool)
    for row in rows:
        head, mid, outs = (part.split() for part in row.split("|"))
        s, tup = int(head[0]), tuple(int(x) for x in head[1:])
        a = int(np.ravel_multi_index(tup, dims))
        reward[s, a] = float(mid[0])
        done[s, a] = bool(int(mid[1]))
        feasible[s, a] = bool(int(mid[2]))
        for item in outs:
            nxt, p = item.split(":")
            prob[s, a, int(nxt)] = float(p)
        seen[s, a] = True
    if not seen.all():
        raise MdpError("fixture does not cover every (state, action) pair")
    return FactoredMdp(n, dims, prob, reward, done, gamma, initial, feasible)
