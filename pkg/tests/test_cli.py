import functools
import json
import time

import pytest

from asrse3 import cli, losses, verify


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_gen_expert_train_eval_plot(tmp_path, capsys):
    buf = tmp_path / "2s.jsonl"
    code, out, _ = run(["gen-expert", "--task", "2S", "--count", 20, "--seed", 1, "--out", buf], capsys)
    assert code == 0 and "rejected 0" in out
    again = tmp_path / "again.jsonl"
    run(["gen-expert", "--task", "2S", "--count", 20, "--seed", 1, "--out", again], capsys)
    assert buf.read_bytes() == again.read_bytes()

    t0 = time.perf_counter()
    out_dir = tmp_path / "run"
    code, out, _ = run(
        ["train", "--task", "2S", "--algo", "sdqfd", "--expert", buf, "--episodes", 50, "--pretrain-steps", 200,
         "--window", 20, "--no-wall-time", "--set", "checkpoint_every=25", "--out", out_dir],
        capsys,
    )
    assert code == 0 and time.perf_counter() - t0 < 60
    assert (out_dir / "final.npz").exists() and (out_dir / "checkpoints" / "checkpoint_000050.npz").exists()
    lines = (out_dir / "log.csv").read_text().splitlines()
    assert lines[0] == "episode,steps,reward,moving_success_20,wall_ms" and len(lines) == 51
    meta = json.loads((out_dir / "run.json").read_text())
    assert meta["train"]["algo"] == "sdqfd" and meta["task"] == "2S"

    evals = [run(["eval", "--checkpoint", out_dir / "final.npz", "--task", "2S", "--episodes", 10, "--seed", 3], capsys)[1] for _ in range(2)]
    assert evals[0] == evals[1] and 0.0 <= json.loads(evals[0])["success_rate"] <= 1.0

    png = tmp_path / "curve.png"
    assert run(["plot", out_dir / "log.csv", "--out", png], capsys)[0] == 0 and png.stat().st_size > 0


def test_demonstration_algorithms_need_a_buffer(tmp_path, capsys):
    code, _, err = run(["train", "--task", "2S", "--algo", "dqfd", "--episodes", 1, "--out", tmp_path], capsys)
    assert code == 2 and "gen-expert" in err


def test_dqn_runs_without_buffer(tmp_path, capsys):
    code, out, _ = run(["train", "--task", "2S", "--algo", "dqn", "--episodes", 2, "--repr", "cascade-tabular", "--out", tmp_path], capsys)
    assert code == 0 and (tmp_path / "final.json").exists()


def test_bad_arguments(tmp_path, capsys):
    with pytest.raises(SystemExit):
        cli.main(["train", "--task", "nope", "--algo", "dqn", "--out", str(tmp_path)])
    with pytest.raises(SystemExit):
        cli.main(["train", "--task", "2S", "--algo", "dqn", "--set", "lr", "--out", str(tmp_path)])
    with pytest.raises(SystemExit):
        cli.main(["train", "--task", "2S", "--algo", "dqn", "--set", "bogus=1", "--out", str(tmp_path)])
    with pytest.raises(SystemExit):
        cli.main(["train", "--task", "2S", "--algo", "ppo"])


def test_run_config_checks_choices():
    with pytest.raises(ValueError):
        cli.RunConfig(algo="ppo")
    with pytest.raises(ValueError):
        cli.RunConfig(representation="table")


def test_verify_passes_and_reports(tmp_path, capsys):
    report = tmp_path / "r.json"
    code, out, _ = run(["verify", "--suite", "argmax", "--suite", "losses", "--report", report], capsys)
    doc = json.loads(report.read_text())
    assert code == 0 and doc["passed"]
    assert {s["suite"]: s["instances"] for s in doc["suites"]} == {"argmax": 200, "losses": 100_000}


def test_verify_catches_sign_error_in_margin_gradient(monkeypatch, capsys):
    real = losses.slm_loss

    def flipped(*args, **kwargs):
        value, grad = real(*args, **kwargs)
        return value, -grad

    monkeypatch.setattr(losses, "slm_loss", flipped)
    monkeypatch.setitem(verify.SUITES, "gradients", functools.partial(verify.gradients, count=6))
    code, _, err = run(["verify", "--suite", "gradients"], capsys)
    assert code == 1 and "FAILED gradients" in err and "slm" in err


def test_verify_dumps_mdp_counterexample(monkeypatch, capsys):
    real = verify.n_step_targets
    monkeypatch.setattr(verify, "n_step_targets", lambda *a: real(*a) + 1e-6)
    code, _, err = run(["verify", "--suite", "targets"], capsys)
    assert code == 1 and "factored-mdp v1" in err
