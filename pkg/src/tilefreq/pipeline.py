"""Idempotent task graph tying the library into one pipeline.

Each task declares its dependencies, the configuration it reads and the files
it writes under the work directory. A task is done when all of its outputs
exist and its marker stores the current input hash (configuration slice plus
digests of every dependency output). ``run`` executes the target's stale
ancestors in topological order; anything downstream of a task that ran in
the same invocation runs as well.
"""

import hashlib
import json
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import codec, data, evaluate, lsh, models, training

MARKER_DIR = ".tilefreq"


class TaskError(RuntimeError):
    def __init__(self, task, cause):
        super().__init__(f"task {task} failed: {cause}")
        self.task = task


@dataclass(frozen=True)
class Task:
    name: str
    deps: tuple
    outputs: tuple
    slice: object
    fn: object


class Context:
    """What a running task may touch: its config, its outputs and its declared inputs."""

    def __init__(self, cfg, task, graph):
        self.cfg = cfg
        self.task = task
        self._graph = graph

    def out(self, name):
        path = self.cfg.work_dir / self.task.name / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def input(self, dep, name):
        if dep not in self.task.deps:
            raise TaskError(self.task.name, f"reads {dep}/{name} without depending on {dep}")
        if name not in self._graph[dep].outputs:
            raise TaskError(self.task.name, f"{dep} has no output {name}")
        return self.cfg.work_dir / dep / name


# ---------------------------------------------------------------- task bodies


def _synth(ctx):
    cfg = ctx.cfg.dataset
    tiles_dir = ctx.out("tiles")
    if tiles_dir.exists():
        shutil.rmtree(tiles_dir)
    tiles_dir.mkdir()
    if cfg.source == "synthetic":
        ds = data.synth_generate(cfg.synth)
        # raw rows carry degrees only; projection is its own task
        raw = [data.SurveyRecord(**{**r.__dict__, "lat_proj": None, "lon_proj": None}) for r in ds.records]
        data.write_metadata(raw, ctx.out("metadata.csv"))
        truth = ds.truth.to_records() if ds.truth is not None else []
        data.write_metadata(truth, ctx.out("truth.csv"))
        for sid in ds.tiles:
            data.write_grid(tiles_dir / f"{sid}.tfg", ds.tiles[sid])
        return
    rows = []
    for path in cfg.metadata:
        rows.extend(data.parse_metadata(path))
    data.write_metadata(rows, ctx.out("metadata.csv"))
    truth = data.parse_metadata(cfg.truth) if cfg.truth else []
    data.write_metadata(truth, ctx.out("truth.csv"))
    if cfg.rasters:
        for grid in sorted(Path(cfg.rasters).glob("*.tfg")):
            shutil.copyfile(grid, tiles_dir / grid.name)


def _ingest(ctx):
    records = data.parse_metadata(ctx.input("synth", "metadata.csv"))
    if not records:
        raise ValueError("metadata has no rows")
    data.write_metadata(records, ctx.out("records.csv"))


def _project(ctx):
    records = data.fill_projection(data.parse_metadata(ctx.input("ingest", "records.csv")))
    data.write_metadata(records, ctx.out("records.csv"))


def _load_records(ctx, dep="project"):
    records = data.parse_metadata(ctx.input(dep, "records.csv"))
    return records, data.build_label_matrix(records), data.site_coordinates(records)


def _train_sites(labels):
    return [int(s) for s in labels.site_ids if len(labels.labels(s))]


def _test_sites(records):
    return sorted({r.surveyId for r in records if r.dataset == "presence-absent-test"})


def _compress(ctx):
    records, _, _ = _load_records(ctx)
    tiles_dir = ctx.input("synth", "tiles")
    sel = list(ctx.cfg.codec.channel_selection)
    blocks = {}
    for sid in sorted({r.surveyId for r in records}):
        path = tiles_dir / f"{sid}.tfg"
        if not path.exists():
            continue
        grid = data.read_grid(path)
        if sel:
            grid = grid[sel]
        blocks[sid] = codec.lowpass2d(grid, ctx.cfg.codec.k)
    if not blocks:
        raise ValueError("no raster grids matched the metadata sites")
    codec.write_coeff_store(ctx.out("coeffs.tfc"), blocks)


def _build_index(ctx, dep="project"):
    records = data.parse_metadata(ctx.input(dep, "records.csv"))
    labels = data.build_label_matrix(records)
    coords = data.site_coordinates(records)
    train = {s: coords[s] for s in _train_sites(labels)}
    return lsh.build(train, ctx.cfg.lsh.params), records, labels, coords


def _index(ctx):
    index, _, _, _ = _build_index(ctx)
    with ctx.out("buckets.csv").open("w") as fh:
        fh.write("table,bucket,count\n")
        for t, table in enumerate(index.tables):
            for bucket in sorted(table):
                fh.write(f"{t},{bucket},{len(table[bucket])}\n")


def _selfjoin(ctx):
    index, _, _, _ = _build_index(ctx)
    lsh.write_self_join(index.self_join(ctx.cfg.lsh.join_cutoff), ctx.out("pairs.csv"))


def _knn_predict(ctx):
    index, records, labels, coords = _build_index(ctx)
    top = ctx.cfg.lsh.predict_top
    modes = {"knn": {"k": ctx.cfg.lsh.topk}}
    for r in ctx.cfg.lsh.radii:
        modes[f"nn{int(r)}"] = {"radius": r}
    sites = _test_sites(records)
    for name, kw in modes.items():
        preds = {s: set(lsh.knn_predict(index, labels, coords[s], **kw)[:top]) for s in sites}
        evaluate.write_submission(preds, ctx.out(f"{name}.csv"))


def _geo_features(records, labels, sites):
    coords = data.site_coordinates(records)
    return np.array([coords[s] for s in sites]), labels.dense(sites)


def _save_model(ctx, report, prefix):
    models.save_checkpoint(report.params, ctx.out(f"{prefix}.tfm"))
    report.write_csv(ctx.out(f"{prefix}_report.csv"))
    with ctx.out(f"{prefix}_scaler.json").open("w") as fh:
        json.dump({"mean": report.scaler.mean.ravel().tolist(), "std": report.scaler.std.ravel().tolist(),
                   "shape": list(report.scaler.mean.shape)}, fh)


def _load_scaler(path):
    raw = json.loads(Path(path).read_text())
    shape = tuple(raw["shape"])
    return training.Standardizer(np.reshape(raw["mean"], shape), np.reshape(raw["std"], shape))


def _train_geo(ctx):
    records, labels, _ = _load_records(ctx)
    sites = _train_sites(labels)
    x, y = _geo_features(records, labels, sites)
    report = training.train_classifier(x, y, ctx.cfg.geo_arch, ctx.cfg.training)
    _save_model(ctx, report, "model")


def _cnn_inputs(ctx, sites):
    blocks = codec.read_coeff_store(ctx.input("compress", "coeffs.tfc"))
    keep = [s for s in sites if s in blocks]
    return keep, np.stack([blocks[s].coeffs for s in keep]) if keep else None


def _train_cnn(ctx):
    _, labels, _ = _load_records(ctx)
    sites, x = _cnn_inputs(ctx, _train_sites(labels))
    if x is None:
        raise ValueError("no coefficient blocks for labeled sites")
    report = training.train_classifier(
        x, labels.dense(sites), "tileCnn", ctx.cfg.cnn, dims=dict(ctx.cfg.cnn_dims)
    )
    _save_model(ctx, report, "model")


def _train_tile2vec(ctx):
    cfg = ctx.cfg
    index, records, labels, coords = _build_index(ctx)
    blocks = {s: b.coeffs for s, b in codec.read_coeff_store(ctx.input("compress", "coeffs.tfc")).items()}
    triplets = lsh.sample_triplets(
        index, blocks, cfg.tile2vec_triplets, cfg.tile2vec_max_dist,
        cfg.tile2vec.batch_size, cfg.seed,
    )
    agg = None
    if cfg.tile2vec_label_radius > 0:
        agg = {s: data.aggregate_species_in_radius(labels, index, s, cfg.tile2vec_label_radius)
               for s in {t for trip in triplets for t in trip}}
    result = training.train_tile2vec(blocks, triplets, cfg.tile2vec, labels=agg)
    models.save_checkpoint(result.encoder, ctx.out("encoder.tfm"))
    with ctx.out("losses.csv").open("w") as fh:
        fh.write("epoch,tripletLoss\n")
        for i, v in enumerate(result.losses, start=1):
            fh.write(f"{i},{v!r}\n")
    with ctx.out("scaler.json").open("w") as fh:
        json.dump({"mean": result.scaler.mean.ravel().tolist(), "std": result.scaler.std.ravel().tolist(),
                   "shape": list(result.scaler.mean.shape)}, fh)


def _predict(ctx):
    cfg = ctx.cfg
    records, labels, _ = _load_records(ctx)
    sites = _test_sites(records)
    species = labels.species_ids
    if cfg.predict_model == "knn":
        shutil.copyfile(ctx.input("knn-predict", "knn.csv"), ctx.out("submission.csv"))
        return
    dep = "train-geo" if cfg.predict_model == "geo" else "train-cnn"
    tcfg = cfg.training if cfg.predict_model == "geo" else cfg.cnn
    params = models.load_checkpoint(ctx.input(dep, "model.tfm"))
    scaler = _load_scaler(ctx.input(dep, "model_scaler.json"))
    if cfg.predict_model == "geo":
        coords = data.site_coordinates(records)
        x = np.array([coords[s] for s in sites]).reshape(-1, 2)
    else:
        sites, x = _cnn_inputs(ctx, sites)
    preds = {}
    if len(sites):
        scores = training.predict_scores(params, scaler, x)
        mat = evaluate.decode_matrix(scores, tcfg.prediction_mode, tcfg.k, tcfg.threshold)
        preds = {s: {int(v) for v in species[row]} for s, row in zip(sites, mat)}
    evaluate.write_submission(preds, ctx.out("submission.csv"))


def _evaluate(ctx):
    cfg = ctx.cfg
    truth_records = data.parse_metadata(ctx.input("synth", "truth.csv"))
    metrics = {}
    submissions = {"submission": ctx.input("predict", "submission.csv"),
                   "knn_top%d" % cfg.lsh.topk: ctx.input("knn-predict", "knn.csv")}
    for r in cfg.lsh.radii:
        submissions[f"nn_{int(r)}m"] = ctx.input("knn-predict", f"nn{int(r)}.csv")
    if truth_records:
        truth = data.build_label_matrix(truth_records).to_sets()
        for name, path in submissions.items():
            preds = evaluate.read_submission(path)
            preds = {s: preds.get(s, set()) for s in truth}
            metrics[f"{name}_micro_f1"] = evaluate.micro_f1(preds, truth)
    for dep in ("train-geo", "train-cnn"):
        with ctx.input(dep, "model_report.csv").open() as fh:
            rows = [line.split(",") for line in fh.read().splitlines()[1:]]
        metrics[f"{dep}_best_val_micro_f1"] = max(float(r[2]) for r in rows)
    with ctx.input("train-tile2vec", "losses.csv").open() as fh:
        metrics["tile2vec_final_loss"] = float(fh.read().splitlines()[-1].split(",")[1])
    with ctx.input("selfjoin", "pairs.csv").open() as fh:
        metrics["selfjoin_pairs"] = sum(1 for _ in fh) - 1
    evaluate.write_report(metrics, ctx.out("metrics.csv"))


def _predict_deps(cfg):
    model_dep = {"geo": "train-geo", "cnn": "train-cnn", "knn": "knn-predict"}[cfg.predict_model]
    deps = ["project", model_dep]
    if cfg.predict_model == "cnn":
        deps.append("compress")
    return tuple(deps)


def build_graph(cfg):
    """Static task graph for ``cfg`` keyed by task name, in topological order."""
    r = repr
    tasks = [
        Task("synth", (), ("metadata.csv", "truth.csv", "tiles"), lambda c: r(c.dataset), _synth),
        Task("ingest", ("synth",), ("records.csv",), lambda c: "", _ingest),
        Task("project", ("ingest",), ("records.csv",), lambda c: "", _project),
        Task("compress", ("synth", "project"), ("coeffs.tfc",), lambda c: r(c.codec), _compress),
        Task("index", ("project",), ("buckets.csv",), lambda c: r(c.lsh.params), _index),
        Task("selfjoin", ("project", "index"), ("pairs.csv",), lambda c: r((c.lsh.params, c.lsh.join_cutoff)), _selfjoin),
        Task("knn-predict", ("project", "index"),
             ("knn.csv",) + tuple(f"nn{int(x)}.csv" for x in cfg.lsh.radii), lambda c: r(c.lsh), _knn_predict),
        Task("train-geo", ("project",), ("model.tfm", "model_report.csv", "model_scaler.json"),
             lambda c: r((c.training, c.geo_arch)), _train_geo),
        Task("train-cnn", ("project", "compress"), ("model.tfm", "model_report.csv", "model_scaler.json"),
             lambda c: r((c.cnn, c.cnn_dims)), _train_cnn),
        Task("train-tile2vec", ("project", "index", "compress"), ("encoder.tfm", "losses.csv", "scaler.json"),
             lambda c: r((c.tile2vec, c.tile2vec_triplets, c.tile2vec_max_dist, c.tile2vec_label_radius, c.lsh.params)),
             _train_tile2vec),
        Task("predict", _predict_deps(cfg), ("submission.csv",), lambda c: r((c.predict_model, c.training, c.cnn)), _predict),
        Task("evaluate", ("synth", "predict", "knn-predict", "train-geo", "train-cnn", "train-tile2vec", "selfjoin"),
             ("metrics.csv",), lambda c: "", _evaluate),
    ]
    return {t.name: t for t in tasks}


TASK_NAMES = (
    "synth", "ingest", "project", "compress", "index", "selfjoin", "knn-predict",
    "train-geo", "train-cnn", "train-tile2vec", "predict", "evaluate",
)


# ---------------------------------------------------------------- markers and runner


def _digest_path(path, h):
    if path.is_dir():
        for child in sorted(path.rglob("*")):
            if child.is_file():
                h.update(str(child.relative_to(path)).encode())
                h.update(hashlib.sha256(child.read_bytes()).digest())
    else:
        h.update(hashlib.sha256(path.read_bytes()).digest())


def input_hash(cfg, graph, name):
    task = graph[name]
    h = hashlib.sha256()
    h.update(name.encode())
    h.update(repr(task.slice(cfg)).encode())
    h.update(repr(cfg.seed).encode())
    for dep in task.deps:
        for out in graph[dep].outputs:
            path = cfg.work_dir / dep / out
            h.update(f"{dep}/{out}".encode())
            if path.exists():
                _digest_path(path, h)
            else:
                h.update(b"<missing>")
    return h.hexdigest()


def _marker(cfg, name):
    return cfg.work_dir / MARKER_DIR / f"{name}.json"


def is_done(cfg, graph, name):
    task = graph[name]
    if not all((cfg.work_dir / name / out).exists() for out in task.outputs):
        return False
    try:
        stored = json.loads(_marker(cfg, name).read_text())
        return stored["inputHash"] == input_hash(cfg, graph, name)
    except (OSError, ValueError, KeyError, TypeError):
        return False


def plan(graph, target):
    """Ancestors of ``target`` (inclusive) in topological order."""
    if target not in graph:
        raise KeyError(f"unknown task {target!r}; expected one of {', '.join(graph)}")
    needed, stack = set(), [target]
    while stack:
        name = stack.pop()
        if name not in needed:
            needed.add(name)
            stack.extend(graph[name].deps)
    return [n for n in graph if n in needed]


def run(cfg, target, log=print):
    """Run ``target`` and its stale ancestors; returns the names of executed tasks."""
    graph = build_graph(cfg)
    order = plan(graph, target)
    cfg.work_dir.mkdir(parents=True, exist_ok=True)
    (cfg.work_dir / MARKER_DIR).mkdir(exist_ok=True)
    lock = FileLock(str(cfg.work_dir / MARKER_DIR / "lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise TaskError(target, f"work directory {cfg.work_dir} is locked by another run") from None
    executed = []
    try:
        for name in order:
            task = graph[name]
            if is_done(cfg, graph, name) and not any(d in executed for d in task.deps):
                log(f"skip  {name}")
                continue
            log(f"run   {name}")
            _marker(cfg, name).unlink(missing_ok=True)
            try:
                task.fn(Context(cfg, task, graph))
            except TaskError:
                raise
            except Exception as exc:
                raise TaskError(name, f"{type(exc).__name__}: {exc}") from exc
            missing = [o for o in task.outputs if not (cfg.work_dir / name / o).exists()]
            if missing:
                raise TaskError(name, f"did not produce {missing}")
            _marker(cfg, name).write_text(
                json.dumps({"task": name, "inputHash": input_hash(cfg, graph, name),
                            "outputs": list(task.outputs)}, indent=1)
            )
            executed.append(name)
    finally:
        lock.release()
    return executed


def describe(cfg, out=None):
    """Print every task in topological order with its status; writes nothing."""
    out = sys.stdout if out is None else out
    graph = build_graph(cfg)
    stale = set()
    rows = []
    for name, task in graph.items():
        done = cfg.work_dir.exists() and is_done(cfg, graph, name) and not (set(task.deps) & stale)
        if not done:
            stale.add(name)
        rows.append((name, "done" if done else "pending", ", ".join(task.deps) or "-"))
    for name, status, deps in rows:
        print(f"{name:<15} {status:<8} after: {deps}", file=out)
    return {name: status for name, status, _ in rows}
