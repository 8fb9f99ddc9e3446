"""Oracle property suites shared by the ``verify`` command and the test-suite.

Each suite returns a :class:`SuiteReport` with the number of instances
checked, the worst observed discrepancy and, on failure, a serialized
counterexample.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import blockworld as bw
from . import expert, losses, mdp_core, tasks
from .expert import TransitionRecord
from .qmodel import ParamCascade, TabularCascade, grad_check, greedy_action, n_step_targets, one_step_targets


@dataclass
class SuiteReport:
    name: str
    instances: int = 0
    worst: float = 0.0
    passed: bool = True
    seconds: float = 0.0
    counterexample: str = ""
    details: dict = field(default_factory=dict)

    def fail(self, why: str, fixture: str = ""):
        if self.passed:
            self.passed = False
            self.counterexample = why + ("\n" + fixture if fixture else "")

    def as_dict(self) -> dict:
        return {
            "suite": self.name,
            "passed": self.passed,
            "instances": self.instances,
            "worst": self.worst,
            "seconds": round(self.seconds, 3),
            "counterexample": self.counterexample,
            **self.details,
        }


def _timed(fn: Callable[..., SuiteReport]) -> Callable[..., SuiteReport]:
    def run(*args, **kwargs) -> SuiteReport:
        t0 = time.perf_counter()
        rep = fn(*args, **kwargs)
        rep.seconds = time.perf_counter() - t0
        return rep

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def _random_dims(rng: np.random.Generator, k: int, max_dim: int = 4) -> tuple[int, ...]:
    return tuple(int(d) for d in rng.integers(1, max_dim + 1, size=k))


# -- augmentation -------------------------------------------------------------------


@_timed
def augmentation(count: int = 120, seed: int = 0, tol: float = 1e-9) -> SuiteReport:
    """Optimal values of each MDP and its augmented form agree at every base state."""
    rep = SuiteReport("augmentation")
    rng = np.random.default_rng(seed)
    for i in range(count):
        k = (2, 3, 5)[i % 3]
        dims = _random_dims(rng, k, 4 if k < 5 else 3)
        mdp = mdp_core.random_factored_mdp(
            rng,
            int(rng.integers(2, 21)),
            dims,
            stochastic=bool(i % 2),
            terminal_prob=0.1 * (i % 4 == 0),
            mask_prob=0.2 * (i % 5 == 0),
        )
        flat = mdp_core.value_iteration(mdp)
        aug = mdp_core.value_iteration(mdp_core.augment(mdp))
        err = float(np.max(np.abs(aug.V[0] - flat.V)))
        rep.instances += 1
        rep.worst = max(rep.worst, err)
        if err >= tol:
            rep.fail(f"max |V_aug - V| = {err:.3e}", mdp_core.dumps_mdp(mdp))
    return rep


# -- hierarchical argmax ---------------------------------------------------------------


@_timed
def argmax(count: int = 200, seed: int = 0) -> SuiteReport:
    """Greedy selection on a max-marginalised cascade attains the flat maximum exactly."""
    rep = SuiteReport("argmax")
    rng = np.random.default_rng(seed)
    for i in range(count):
        k = int(rng.integers(1, 6))
        dims = _random_dims(rng, k)
        # small integer values make ties common
        q = rng.integers(0, 4, size=dims).astype(float) if i % 2 else rng.normal(size=dims)
        mask = rng.random(dims) > 0.3
        if not mask.any():
            mask.flat[0] = True
        flat = np.where(mask, q, -np.inf)
        casc = TabularCascade.from_flat_q({0: flat})
        action, _ = greedy_action(casc, 0, mask)
        rep.instances += 1
        if not mask[action] or flat[action] != flat.max():
            rep.fail(f"greedy tuple {action} has value {flat[action]} but flat max is {flat.max()}", repr(flat.tolist()))
    return rep


# -- target fixed point ----------------------------------------------------------------


def mdp_records(mdp: mdp_core.FactoredMdp) -> list[TransitionRecord]:
    """Every feasible deterministic transition of ``mdp`` as a record over integer states."""
    out = []
    dims = mdp.action_dims
    for s in range(mdp.num_states):
        for a in range(mdp.num_flat_actions):
            if not mdp.feasible[s, a]:
                continue
            nxt = int(np.argmax(mdp.prob[s, a]))
            done = bool(mdp.done[s, a])
            out.append(
                TransitionRecord(
                    s,
                    mdp.action_tuple(a),
                    float(mdp.reward[s, a]),
                    None if done else nxt,
                    done,
                    False,
                    mdp.feasible[s].reshape(dims),
                    None if done else mdp.feasible[nxt].reshape(dims),
                )
            )
    return out


@_timed
def targets(count: int = 20, seed: int = 0, tol: float = 1e-9) -> SuiteReport:
    """With the exact augmented optimum as the cascade, both target rules reproduce it."""
    rep = SuiteReport("targets")
    rng = np.random.default_rng(seed)
    checked = 0
    for i in range(count):
        k = (1, 2, 3, 5)[i % 4]
        dims = _random_dims(rng, k, 3)
        mdp = mdp_core.random_factored_mdp(
            rng, int(rng.integers(2, 11)), dims, terminal_prob=0.15, mask_prob=0.2 * (i % 2)
        )
        sol = mdp_core.value_iteration(mdp_core.augment(mdp))
        casc = TabularCascade.from_solution(sol, mdp.num_states)
        records = mdp_records(mdp)
        y_n = n_step_targets(casc, records, mdp.gamma)
        y_1 = one_step_targets(casc, records, mdp.gamma)
        for rec, yn, y1 in zip(records, y_n, y_1):
            s, a = rec.obs, rec.action
            last = sol.Q[k - 1][(s,) + a]
            errs = [abs(yn - last)]
            for level in range(k):
                entry = sol.Q[level][(s,) + a[: level + 1]]
                errs.append(abs(y1[level] - entry))
                # the shared n-step target equals level i's entry wherever the recorded suffix is greedy
                suffix_greedy = all(
                    a[j] == sol.policy[j][(s,) + a[:j]] for j in range(level + 1, k)
                )
                if suffix_greedy:
                    errs.append(abs(yn - entry))
            err = max(errs)
            checked += 1
            rep.worst = max(rep.worst, err)
            if err >= tol:
                rep.fail(f"target error {err:.3e} at state {s} action {a}", mdp_core.dumps_mdp(mdp))
        rep.instances += 1
    rep.details["transitions"] = checked
    return rep


# -- losses ----------------------------------------------------------------------------


SLM_EXAMPLES = (
    ([1.0, 0.95, 0.5], 0, 0.05),
    ([1.0, 0.8], 0, 0.0),
    ([0.5, 0.9, 0.85], 0, 0.475),
)


@_timed
def loss_identities(rows: int = 100_000, seed: int = 0) -> SuiteReport:
    """Worked margin-loss examples, the single-violator identity and the zero-iff-empty property."""
    rep = SuiteReport("losses")
    margin = losses.MarginFn(0.1)
    for q, e, want in SLM_EXAMPLES:
        got, _ = losses.slm_loss(np.array(q), e, margin)
        rep.worst = max(rep.worst, abs(got - want))
        if abs(got - want) >= 1e-12:
            rep.fail(f"slm({q}, {e}) = {got!r}, expected {want}")
    q = np.array(SLM_EXAMPLES[0][0])
    if losses.slm_loss(q, 0, margin)[0] != losses.lm_loss(q, 0, margin)[0]:
        rep.fail("slm and lm differ on the single-violator example")
    rng = np.random.default_rng(seed)
    width = rng.integers(2, 9, size=rows)
    table = rng.normal(scale=0.2, size=(rows, 8))
    experts = (rng.random(rows) * width).astype(np.int64)
    # independent oracle for the violation-set size: count entries above q[e] - l
    cols = np.arange(8)[None, :]
    qe = table[np.arange(rows), experts][:, None]
    hits = (cols < width[:, None]) & (cols != experts[:, None]) & (table > qe - margin.value)
    sizes = hits.sum(axis=1)
    singles = 0
    for n in range(rows):
        row, e = table[n, : width[n]], int(experts[n])
        loss, _ = losses.slm_loss(row, e, margin)
        if (loss == 0.0) != (sizes[n] == 0) or loss < 0:
            rep.fail(f"slm = {loss!r} with {sizes[n]} violators", repr((row.tolist(), e)))
        if sizes[n] == 1:
            singles += 1
            lm, _ = losses.lm_loss(row, e, margin)
            rep.worst = max(rep.worst, abs(lm - loss))
            if abs(lm - loss) > 1e-12:
                rep.fail(f"single violator but slm {loss!r} != lm {lm!r}", repr((row.tolist(), e)))
    rep.instances = rows
    rep.details["single_violator_rows"] = singles
    return rep


# -- gradients -------------------------------------------------------------------------


def _fd_row(fn, q: np.ndarray, step: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(q)
    for i in range(q.size):
        up, down = q.copy(), q.copy()
        up[i] += step
        down[i] -= step
        out[i] = (fn(up) - fn(down)) / (2 * step)
    return out


def _rel(a: np.ndarray, b: np.ndarray, eps: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / (np.abs(a) + np.abs(b) + eps)))


def _smooth_row(rng: np.random.Generator, n: int, e: int, margin: float, gap: float = 1e-3) -> np.ndarray:
    """Random row kept away from the margin boundary and from ties in ``q + l``."""
    while True:
        q = rng.normal(scale=0.3, size=n)
        lrow = np.full(n, margin)
        lrow[e] = 0.0
        d = q - (q[e] - lrow)
        d[e] = np.inf
        s = np.sort(q + lrow)
        if np.min(np.abs(d)) > gap and (n < 2 or s[-1] - s[-2] > gap):
            return q


def small_blockworld(mode: str = "XYTZ") -> bw.BlockWorldConfig:
    return bw.BlockWorldConfig(
        grid_w=4,
        grid_h=4,
        action_mode=mode,
        theta_count=1 if mode == "XY" else 2,
        z_count=3,
        block_inventory=(bw.BlockSpec("cube"), bw.BlockSpec("brick", (2, 1))),
        max_steps=6,
        crop=3,
        name=f"gradcheck-{mode}",
    )


def random_observations(config: bw.BlockWorldConfig, rng: np.random.Generator, n: int) -> list[bw.Observation]:
    out = []
    for _ in range(n):
        state, obs = bw.reset(config, int(rng.integers(1 << 30)))
        if rng.random() < 0.5:
            picks = np.argwhere(bw.feasible_actions(config, state).active)
            action = tuple(int(a) for a in picks[rng.integers(len(picks))])
            state = bw.apply_action(config, state, action)
            obs = bw._observe(config, state)
        out.append(obs)
    return out


@_timed
def gradients(count: int = 50, seed: int = 0, tol: float = 1e-4) -> SuiteReport:
    """Analytic gradients of every loss and of the parametric cascade versus central differences."""
    from .training import Agent, TrainConfig

    rep = SuiteReport("gradients")
    rng = np.random.default_rng(seed)
    margin = losses.MarginFn(0.1)
    per_kind: dict[str, int] = {}

    def note(kind: str, err: float, fixture: str):
        per_kind[kind] = per_kind.get(kind, 0) + 1
        rep.worst = max(rep.worst, err)
        if not err < tol:
            rep.fail(f"{kind}: relative gradient error {err:.3e}", fixture)

    for _ in range(count):
        n = int(rng.integers(2, 9))
        e = int(rng.integers(n))
        q = _smooth_row(rng, n, e, margin.value)
        mask = rng.random(n) > 0.2
        mask[e] = True
        for kind, fn in (
            ("slm", lambda r: losses.slm_loss(r, e, margin, mask)),
            ("lm", lambda r: losses.lm_loss(r, e, margin, mask)),
            ("ce", lambda r: losses.ce_loss(r, e, 10.0, mask)),
        ):
            _, g = fn(q)
            note(kind, _rel(g, _fd_row(lambda r: fn(r)[0], q)), repr((q.tolist(), e, mask.tolist())))
        d = rng.normal(scale=2.0, size=n)
        d[np.abs(np.abs(d) - 1.0) < 1e-3] += 0.01
        _, g = losses.huber(d)
        note("huber", _rel(g, _fd_row(lambda r: float(losses.huber(r)[0].sum()), d)), repr(d.tolist()))

    modes = ("XY", "XYT", "XYTZ")
    for i in range(count):
        config = small_blockworld(modes[i % 3])
        casc = ParamCascade(config, hidden=4, level_hidden=4, seed=int(rng.integers(1 << 30)))
        for v in casc.params.values():
            v += rng.normal(scale=0.3, size=v.shape)
        obs = random_observations(config, rng, 3)
        acts = np.stack([[int(rng.integers(d)) for d in config.action_dims] for _ in obs])
        weights = [rng.normal(size=(len(obs), d if lvl else config.num_cells)) for lvl, d in enumerate(config.action_dims)]

        def linear_probe():
            rows, cache = casc.forward_train(obs, acts)
            value = float(sum((w * r).sum() for w, r in zip(weights, rows)))
            return value, casc.backward(cache, weights)

        def probe_value():
            rows, _ = casc.forward_train(obs, acts)
            return float(sum((w * r).sum() for w, r in zip(weights, rows)))

        res = grad_check(casc.params, linear_probe, tol=tol, loss_only=probe_value)
        note("cascade", res.max_rel_error, f"{config.action_mode} worst at {res.worst}")

        if i % 3:
            continue
        # full training loss (TD + imitation) through the cascade, a few instances per algorithm
        algo = ("sdqfd", "dqfd", "adet")[(i // 3) % 3]
        agent = Agent(casc, TrainConfig(algo=algo, batch=len(obs), margin_weight=0.5, ce_weight=0.5))
        records = []
        for o, a in zip(obs, acts):
            state_mask = np.ones(config.action_dims, dtype=bool)
            records.append(TransitionRecord(o, tuple(int(x) for x in a), float(rng.random()), o, False, True, state_mask, state_mask))

        def agent_loss():
            stats, g = agent.loss_gradients(records)
            return stats.loss, g

        res = grad_check(casc.params, agent_loss, tol=tol)
        note(f"{algo}-loss", res.max_rel_error, f"{config.action_mode} {algo} worst at {res.worst}")
    rep.instances = count
    rep.details["per_kind"] = per_kind
    return rep


# -- expert reversal ---------------------------------------------------------------------


@_timed
def reversal(count: int = 1000, seed: int = 0, task_ids=("2S", "4S", "H2", "H4", "ImDis")) -> SuiteReport:
    """Generated construction episodes replay to reward 1 with no rejections."""
    rep = SuiteReport("reversal")
    per_task = {}
    for task in task_ids:
        config = tasks.load_task(task)
        episodes, rejected = expert.generate(config, count, seed, with_masks=False)
        replayed = 0
        for ep in episodes:
            records, _ = expert.replay(config, ep.initial_state, ep.actions, with_masks=False)
            replayed += bool(records) and records[-1].reward == 1.0
        per_task[task] = {"episodes": len(episodes), "replayed": replayed, "rejected": rejected}
        rep.instances += len(episodes)
        if rejected or replayed != len(episodes):
            rep.fail(f"{task}: {rejected} rejected, {replayed}/{len(episodes)} replayed to the goal")
    rep.details["tasks"] = per_task
    return rep


SUITES: dict[str, Callable[..., SuiteReport]] = {
    "augmentation": augmentation,
    "argmax": argmax,
    "targets": targets,
    "losses": loss_identities,
    "gradients": gradients,
    "reversal": reversal,
}


def run(names: list[str] | None = None, seed: int = 0) -> list[SuiteReport]:
    chosen = list(SUITES) if not names or names == ["all"] else names
    unknown = [n for n in chosen if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    return [SUITES[n](seed=seed) for n in chosen]
