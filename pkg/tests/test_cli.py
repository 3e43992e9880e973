import json

import pytest

from parallel_ar.cli import main
from parallel_ar.instance_io import manifest_path, read_instances
from parallel_ar.policy import PolicyConfig
from parallel_ar.reports import EvalReport, render_csv, render_markdown, timing_path

TINY = PolicyConfig.desk(d=8, heads=2, layers=1, mlp=16).to_dict()
SMOKE = dict(n_range=[4, 5], m_range=[2, 2], batch_size=4, samples=4, epochs=2, instances_per_epoch=8,
             eval_size=4, eval_n=5, eval_m=2, policy=TINY)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def smoke_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMOKE))
    return path


def test_generate_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("generate", "--env", "hcvrp", "--n", 8, "--m", 2, "--count", 10, "--seed", 7,
                   "--out", tmp_path / f"{name}.jsonl") == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    m = json.loads(manifest_path(tmp_path / "a.jsonl").read_text())
    assert m["seed"] == 7 and m["count"] == 10 and m["generator_version"]
    assert m["params"]["n"] == 8


def test_generate_table_one_hcvrp_shape(tmp_path):
    assert run("generate", "--env", "hcvrp", "--n", 60, "--m", 3, "--count", 2, "--out", tmp_path / "h.jsonl") == 0
    inst = read_instances(tmp_path / "h.jsonl")[0]
    assert inst.n_nodes == 60 and inst.n_agents == 3 and inst.coords.shape == (60, 2)


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run("generate", "--env", "tsp", "--n", 5, "--m", 2, "--out", tmp_path / "x") == 1
    assert run("nonsense") == 1
    assert run("train", "--env", "tsp", "--out", tmp_path / "r") == 1
    err = capsys.readouterr().err
    assert "ffsp" in err and "hcvrp" in err and "omdcpdp" in err
    test_file = tmp_path / "i.jsonl"
    run("generate", "--env", "hcvrp", "--n", 4, "--m", 2, "--count", 1, "--out", test_file)
    assert run("eval", "--instances", test_file, "--method", "random", "--mode", "beam") == 1
    assert run("eval", "--instances", test_file, "--method", "sjf") == 1


def test_train_writes_artifacts_and_resumes(tmp_path, smoke_config):
    assert run("train", "--config", smoke_config, "--out", tmp_path / "a", "--quiet") == 0
    assert run("train", "--config", smoke_config, "--out", tmp_path / "b", "--quiet") == 0
    metrics = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert metrics == (tmp_path / "b" / "metrics.csv").read_bytes()
    ckpts = sorted(p.name for p in (tmp_path / "a").glob("*.npz"))
    assert ckpts

    assert run("train", "--config", smoke_config, "--epochs", 1, "--out", tmp_path / "c", "--quiet") == 0
    first = sorted((tmp_path / "c").glob("*.npz"))[-1]
    assert run("train", "--config", smoke_config, "--resume", first, "--out", tmp_path / "c", "--quiet") == 0
    rows = (tmp_path / "c" / "metrics.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["0", "1"]
    assert (tmp_path / "c" / "metrics.csv").read_bytes() == metrics


@pytest.fixture
def trained(tmp_path, smoke_config):
    run("train", "--config", smoke_config, "--out", tmp_path / "run", "--quiet")
    ckpt = sorted((tmp_path / "run").glob("*.npz"))[-1]
    inst = tmp_path / "i.jsonl"
    run("generate", "--env", "hcvrp", "--n", 5, "--m", 2, "--count", 6, "--seed", 3, "--out", inst)
    return ckpt, inst


def test_eval_reports_are_reproducible_and_verifiable(tmp_path, trained):
    ckpt, inst = trained
    for name in ("a", "b"):
        assert run("eval", "--instances", inst, "--checkpoint", ckpt, "--mode", "sample:8", "--seed", 1,
                   "--out", tmp_path / f"{name}.json", "--traces", tmp_path / f"{name}.traces") == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.traces").read_bytes() == (tmp_path / "b.traces").read_bytes()
    assert timing_path(tmp_path / "a.json").exists()
    assert run("verify", "--instances", inst, "--trace", tmp_path / "a.traces") == 0


def test_sample_one_is_a_single_stochastic_rollout(tmp_path, trained):
    ckpt, inst = trained
    run("eval", "--instances", inst, "--checkpoint", ckpt, "--mode", "sample:1", "--out", tmp_path / "s1.json")
    run("eval", "--instances", inst, "--checkpoint", ckpt, "--samples", 1, "--out", tmp_path / "s1b.json")
    assert (tmp_path / "s1.json").read_bytes() == (tmp_path / "s1b.json").read_bytes()
    row = EvalReport.read(tmp_path / "s1.json").rows[0]
    assert row.mode == "sample:1" and row.instances == 6


def test_sampling_mean_not_worse_than_greedy(tmp_path, trained):
    ckpt, _ = trained
    inst = tmp_path / "many.jsonl"
    run("generate", "--env", "hcvrp", "--n", 5, "--m", 2, "--count", 100, "--seed", 11, "--out", inst)
    run("eval", "--instances", inst, "--checkpoint", ckpt, "--out", tmp_path / "g.json")
    run("eval", "--instances", inst, "--checkpoint", ckpt, "--mode", "sample:128", "--out", tmp_path / "s.json")
    g = EvalReport.read(tmp_path / "g.json").rows[0].objective
    s = EvalReport.read(tmp_path / "s.json").rows[0].objective
    assert s <= g


def test_verify_flags_duplicate_visit_and_env_mismatch(tmp_path, capsys):
    inst = tmp_path / "i.jsonl"
    run("generate", "--env", "hcvrp", "--n", 4, "--m", 1, "--count", 1, "--out", inst)
    run("eval", "--instances", inst, "--method", "greedy_distance", "--handler", "closest",
        "--out", tmp_path / "r.json", "--traces", tmp_path / "t.jsonl")
    assert run("verify", "--instances", inst, "--trace", tmp_path / "t.jsonl") == 0
    tr = json.loads((tmp_path / "t.jsonl").read_text())
    visited = [a[0] for a in tr["actions"] if a[0] != 0]
    tr["actions"] = [[visited[0]], [0], [visited[0]]] + tr["actions"]
    tr["proposed"] = [[visited[0]], [0], [visited[0]]] + tr["proposed"]
    tr["fallback_flags"] = [[False]] * 3 + tr["fallback_flags"]
    (tmp_path / "bad.jsonl").write_text(json.dumps(tr) + "\n")
    capsys.readouterr()
    assert run("verify", "--instances", inst, "--trace", tmp_path / "bad.jsonl") == 2
    assert "visit-exactly-once" in capsys.readouterr().out

    other = tmp_path / "o.jsonl"
    run("generate", "--env", "omdcpdp", "--n", 4, "--m", 1, "--count", 1, "--out", other)
    assert run("verify", "--instances", other, "--trace", tmp_path / "t.jsonl") == 1
    (tmp_path / "junk.jsonl").write_text("{not json\n")
    assert run("verify", "--instances", inst, "--trace", tmp_path / "junk.jsonl") == 1


def test_table_gaps_and_formats(tmp_path, capsys):
    inst = tmp_path / "f.jsonl"
    run("generate", "--env", "ffsp", "--n", 6, "--m", 6, "--stages", 3, "--count", 5, "--out", inst)
    run("eval", "--instances", inst, "--method", "sjf", "--out", tmp_path / "sjf.json")
    run("eval", "--instances", inst, "--method", "random", "--handler", "random", "--seed", 2,
        "--out", tmp_path / "rnd.json")
    capsys.readouterr()
    assert run("table", tmp_path / "sjf.json", tmp_path / "rnd.json") == 0
    md = capsys.readouterr().out
    header = md.splitlines()[0]
    assert header.index("Obj.") < header.index("Gap") < header.index("Time")
    reps = [EvalReport.read(tmp_path / n) for n in ("sjf.json", "rnd.json")]
    best = min(r.rows[0].objective for r in reps)
    best_line = [l for l in md.splitlines() if f"{best:.4f}" in l][0]
    assert "0.00%" in best_line
    csv_rows = render_csv(reps).splitlines()[1:]
    md_rows = render_markdown(reps).splitlines()[2:]
    for c, m in zip(csv_rows, md_rows):
        assert c.split(",") == [x.strip() for x in m.strip("|").split("|")]
    assert run("table", tmp_path / "sjf.json") == 0
    assert "0.00%" in capsys.readouterr().out


def test_oracle_command(tmp_path, capsys):
    assert run("oracle", "--env", "hcvrp", "--n", 4, "--m", 2, "--seed", 1, "--out", tmp_path / "o.jsonl") == 0
    res = json.loads((tmp_path / "o.jsonl").read_text())
    assert res["objective"] > 0 and res["trace"]["objective"] == res["objective"]
    assert run("oracle", "--env", "hcvrp", "--n", 20, "--m", 4) == 1


def test_eval_rejects_mismatched_checkpoint(tmp_path, trained):
    ckpt, _ = trained
    other = tmp_path / "o.jsonl"
    run("generate", "--env", "omdcpdp", "--n", 3, "--m", 2, "--count", 1, "--out", other)
    assert run("eval", "--instances", other, "--checkpoint", ckpt) == 1
