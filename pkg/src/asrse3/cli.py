"""Command-line entry point.

Subcommands::

    gen-expert  build a validated expert buffer file
    train       pretrain + self-play, writing a CSV log and checkpoints
    eval        greedy evaluation of a checkpoint
    verify      run the oracle property suites
    plot        render a learning curve from a CSV log

``ASRSE3_THREADS`` caps the BLAS thread pool (default 1).
"""

from __future__ import annotations

import os

os.environ.setdefault("OMP_NUM_THREADS", os.environ.get("ASRSE3_THREADS", "1"))
os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ.get("ASRSE3_THREADS", "1"))

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import config as cfgfile
from . import expert, tasks, training, verify
from .mdp_core import FLAT_ENTRY_CAP
from .qmodel import load_checkpoint


@dataclass
class RunConfig:
    task: str = "2S"
    algo: str = "sdqfd"
    representation: str = "cascade"
    overrides: dict[str, str] = field(default_factory=dict)
    out: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.algo not in training.ALGORITHMS:
            raise ValueError(f"--algo must be one of {training.ALGORITHMS}")
        if self.representation not in training.REPRESENTATIONS:
            raise ValueError(f"--repr must be one of {training.REPRESENTATIONS}")


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _task(name: str):
    try:
        return tasks.load_task(name)
    except cfgfile.ConfigError as exc:
        raise SystemExit(f"error: {exc}")


def cmd_gen_expert(args) -> int:
    config = _task(args.task)
    episodes, rejected = expert.generate(config, args.count, args.seed)
    try:
        expert.write_buffer(args.out, config, episodes, rejected)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return 2
    n = sum(len(e) for e in episodes)
    print(f"wrote {len(episodes)} episodes ({n} transitions) to {args.out}; rejected {rejected}")
    return 0


def _train_config(args) -> training.TrainConfig:
    values: dict[str, str] = {}
    if args.config:
        values.update({k: v for k, v in cfgfile.load(args.config).items() if not isinstance(v, list)})
    values.update(_parse_sets(args.set or []))
    base = training.desk_config() if args.preset == "desk" else training.TrainConfig()
    for key, val in (
        ("algo", args.algo),
        ("seed", args.seed),
        ("self_play_episodes", args.episodes),
        ("window", args.window),
        ("pretrain_steps", args.pretrain_steps),
    ):
        if val is not None:
            values[key] = str(val)
    if args.no_wall_time:
        values["record_wall_time"] = "false"
    try:
        return training.config_from_strings(values, base)
    except ValueError as exc:
        raise SystemExit(f"error: {exc}")


def cmd_train(args) -> int:
    env_config = _task(args.task)
    cfg = _train_config(args)
    run = RunConfig(args.task, cfg.algo, args.repr, _parse_sets(args.set or []), args.out, cfg.seed)
    if run.representation == "flat-tabular" and math.prod(env_config.action_dims) > FLAT_ENTRY_CAP:
        raise SystemExit(f"error: flat-tabular needs fewer than {FLAT_ENTRY_CAP} action tuples")
    records = None
    if args.expert:
        _, records = expert.read_buffer(args.expert, env_config)
    elif cfg.uses_imitation:
        print(f"error: --algo {cfg.algo} needs --expert <buffer>; create one with 'gen-expert'", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(
        json.dumps({"run": asdict(run), "train": asdict(cfg), "task": env_config.name}, indent=2, sort_keys=True)
    )
    result = training.train(env_config, cfg, records, run.representation, out / "log.csv", out / "checkpoints")
    suffix = ".npz" if isinstance(result.agent.online, training.ParamCascade) else ".json"
    final = out / f"final{suffix}"
    result.agent.online.save(final)
    last = result.log.rows[-1] if result.log.rows else None
    if last:
        print(f"episodes {last.episode}  moving success {last.moving_success:.3f}  checkpoint {final}")
    else:
        print(f"no self-play episodes; checkpoint {final}")
    return 0


def cmd_eval(args) -> int:
    env_config = _task(args.task)
    cascade = load_checkpoint(args.checkpoint, env_config)
    agent = training.Agent(cascade, training.TrainConfig(algo="dqn"))
    rate, length = training.evaluate(agent, env_config, args.episodes, args.seed)
    print(json.dumps({"task": env_config.name, "episodes": args.episodes, "success_rate": rate, "mean_length": length}))
    return 0


def cmd_verify(args) -> int:
    try:
        reports = verify.run(args.suite or None, args.seed)
    except ValueError as exc:
        raise SystemExit(f"error: {exc}")
    doc = {"passed": all(r.passed for r in reports), "suites": [r.as_dict() for r in reports]}
    text = json.dumps(doc, indent=2, default=float)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    for r in reports:
        if not r.passed:
            print(f"FAILED {r.name}: {r.counterexample}", file=sys.stderr)
    return 0 if doc["passed"] else 1


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for path in args.logs:
        with open(path) as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        col = next(i for i, h in enumerate(header) if h.startswith("moving_success"))
        ax.plot([int(r[0]) for r in body], [float(r[col]) for r in body], label=Path(path).parent.name or path)
    ax.set_xlabel("episode")
    ax.set_ylabel("moving success rate")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asrse3", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-expert", help="generate a validated expert buffer")
    g.add_argument("--task", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_expert)

    t = sub.add_parser("train", help="pretrain and self-play")
    t.add_argument("--task", required=True)
    t.add_argument("--algo", choices=training.ALGORITHMS)
    t.add_argument("--repr", default="cascade", choices=training.REPRESENTATIONS)
    t.add_argument("--seed", type=int)
    t.add_argument("--episodes", type=int, help="self-play episodes")
    t.add_argument("--pretrain-steps", type=int)
    t.add_argument("--window", type=int, help="moving-average window (default 1000)")
    t.add_argument("--expert", help="expert buffer file from gen-expert")
    t.add_argument("--config", help="key=value file of training options")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one training option")
    t.add_argument("--preset", choices=("desk", "reference"), default="desk")
    t.add_argument("--no-wall-time", action="store_true", help="log wall_ms as 0 so logs are byte-reproducible")
    t.add_argument("--out", default="runs/default")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    v = sub.add_parser("verify", help="run oracle property suites")
    v.add_argument("--suite", action="append", choices=sorted(verify.SUITES) + ["all"])
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", help="also write the JSON report here")
    v.set_defaults(fn=cmd_verify)

    pl = sub.add_parser("plot", help="plot moving success from CSV logs")
    pl.add_argument("logs", nargs="+")
    pl.add_argument("--out", default="curve.png")
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
