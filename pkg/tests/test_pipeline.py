import io
import json
import textwrap

import pytest
from filelock import FileLock

from tilefreq import cli
from tilefreq.config import ConfigError, load_config
from tilefreq.pipeline import (
    MARKER_DIR,
    TASK_NAMES,
    Context,
    TaskError,
    build_graph,
    describe,
    plan,
    run,
)

SMALL = """
[pipeline]
workDir = {work}
seed = 0

[dataset]
numSites = 300
numClusters = 4
tileSize = 16
channels = 2

[lsh]
bucketLength = 50000

[training]
epochs = 2

[cnn]
epochs = 1
latent = 16
convChannels = 4, 4

[tile2vec]
epochs = 1
latent = 8
numTriplets = 100
"""


def write_config(tmp_path, body=SMALL, name="cfg.ini", **fmt):
    path = tmp_path / name
    path.write_text(textwrap.dedent(body.format(work=tmp_path / "work", **fmt)))
    return path


def quiet(*_):
    pass


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    """A work directory where the whole chain has already run once."""
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = load_config(write_config(tmp))
    executed = run(cfg, "evaluate", log=quiet)
    return cfg, executed


def test_graph_is_topological(tmp_path):
    graph = build_graph(load_config(write_config(tmp_path)))
    assert tuple(graph) == TASK_NAMES
    seen = set()
    for name, task in graph.items():
        assert set(task.deps) <= seen
        seen.add(name)


def test_plan_contains_ancestors_only(tmp_path):
    graph = build_graph(load_config(write_config(tmp_path)))
    assert plan(graph, "project") == ["synth", "ingest", "project"]
    with pytest.raises(KeyError):
        plan(graph, "deploy")


def test_fresh_run_executes_everything(finished):
    cfg, executed = finished
    assert executed == list(TASK_NAMES)
    metrics = (cfg.work_dir / "evaluate" / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "metric,value"
    names = [line.split(",")[0] for line in metrics[1:]]
    assert "submission_micro_f1" in names and "knn_top10_micro_f1" in names


def test_second_run_is_noop(finished):
    cfg, _ = finished
    assert run(cfg, "evaluate", log=quiet) == []
    assert set(describe(cfg, out=io.StringIO()).values()) == {"done"}


def test_deleted_output_reruns_descendants_only(tmp_path):
    cfg = load_config(write_config(tmp_path))
    run(cfg, "evaluate", log=quiet)
    (cfg.work_dir / "index" / "buckets.csv").unlink()
    executed = run(cfg, "evaluate", log=quiet)
    assert executed == ["index", "selfjoin", "knn-predict", "train-tile2vec", "evaluate"]
    graph = build_graph(cfg)
    # every rerun task is "index" or reaches it through declared dependencies
    for name in executed:
        assert "index" in plan(graph, name)


def test_corrupted_marker_reports_pending(tmp_path):
    cfg = load_config(write_config(tmp_path))
    run(cfg, "project", log=quiet)
    status = describe(cfg, out=io.StringIO())
    assert status["project"] == "done" and status["compress"] == "pending"
    (cfg.work_dir / MARKER_DIR / "ingest.json").write_text("{not json")
    status = describe(cfg, out=io.StringIO())
    assert status["synth"] == "done"
    assert status["ingest"] == "pending" and status["project"] == "pending"
    assert run(cfg, "project", log=quiet) == ["ingest", "project"]


def test_describe_fresh_dir_has_no_side_effects(tmp_path):
    cfg = load_config(write_config(tmp_path))
    out = io.StringIO()
    status = describe(cfg, out=out)
    assert set(status.values()) == {"pending"}
    assert not cfg.work_dir.exists()
    assert out.getvalue().splitlines()[0].startswith("synth")


def test_config_change_invalidates_downstream(tmp_path):
    cfg = load_config(write_config(tmp_path))
    run(cfg, "train-geo", log=quiet)
    body = SMALL.replace("[training]\nepochs = 2", "[training]\nepochs = 3")
    cfg2 = load_config(write_config(tmp_path, body))
    assert run(cfg2, "train-geo", log=quiet) == ["train-geo"]


def test_context_blocks_undeclared_inputs(tmp_path):
    cfg = load_config(write_config(tmp_path))
    graph = build_graph(cfg)
    ctx = Context(cfg, graph["ingest"], graph)
    with pytest.raises(TaskError):
        ctx.input("project", "records.csv")
    with pytest.raises(TaskError):
        ctx.input("synth", "secret.csv")


def test_locked_workdir(tmp_path):
    cfg = load_config(write_config(tmp_path))
    (cfg.work_dir / MARKER_DIR).mkdir(parents=True)
    with FileLock(str(cfg.work_dir / MARKER_DIR / "lock")):
        with pytest.raises(TaskError, match="locked"):
            run(cfg, "synth", log=quiet)


def test_marker_contents(finished):
    cfg, _ = finished
    marker = json.loads((cfg.work_dir / MARKER_DIR / "compress.json").read_text())
    assert marker["task"] == "compress" and len(marker["inputHash"]) == 64


# ---------------------------------------------------------------- config


def test_unknown_key_is_named(tmp_path):
    path = write_config(tmp_path, SMALL + "\n[codec]\nkay = 4\n")
    with pytest.raises(ConfigError, match="codec.kay"):
        load_config(path)


def test_bad_value_is_named(tmp_path):
    path = write_config(tmp_path, SMALL.replace("numSites = 300", "numSites = many"))
    with pytest.raises(ConfigError, match="dataset.numSites"):
        load_config(path)


def test_unknown_section(tmp_path):
    with pytest.raises(ConfigError, match="optimizer"):
        load_config(write_config(tmp_path, SMALL + "\n[optimizer]\nname = adam\n"))


def test_workdir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("TILEFREQ_WORKDIR", str(tmp_path / "elsewhere"))
    assert load_config(write_config(tmp_path)).work_dir == (tmp_path / "elsewhere").resolve()


def test_config_defaults(tmp_path):
    cfg = load_config(write_config(tmp_path, "[pipeline]\nworkDir = {work}\n"))
    assert cfg.codec.k == 8
    assert cfg.lsh.radii == (5_000.0, 10_000.0, 50_000.0)
    assert cfg.lsh.topk == 10
    assert cfg.training.loss.name == "asl"


# ---------------------------------------------------------------- CLI


def test_cli_exit_codes(tmp_path, capsys):
    good = write_config(tmp_path)
    assert cli.main(["describe", "--config", str(good)]) == 0
    assert "pending" in capsys.readouterr().out
    assert cli.main(["run", "--config", str(good), "--target", "project"]) == 0
    assert cli.main(["run", "--config", str(good), "--target", "project"]) == 0
    assert "0 task(s) executed" in capsys.readouterr().out

    bad = write_config(tmp_path, SMALL + "\n[codec]\nk = x\n", name="bad.ini")
    assert cli.main(["describe", "--config", str(bad)]) == 2
    assert cli.main(["run", "--config", str(tmp_path / "nope.ini"), "--target", "synth"]) == 2

    broken = tmp_path / "broken.csv"
    broken.write_text("dataset,surveyId\n")
    csv_cfg = write_config(
        tmp_path,
        "[pipeline]\nworkDir = {work2}\n[dataset]\nsource = csv\nmetadata = {meta}\n",
        name="csv.ini", work2=tmp_path / "w2", meta=broken,
    )
    assert cli.main(["run", "--config", str(csv_cfg), "--target", "ingest"]) == 1
    assert "synth" in capsys.readouterr().err


def test_cli_rejects_unknown_target(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["run", "--config", str(write_config(tmp_path)), "--target", "deploy"])
