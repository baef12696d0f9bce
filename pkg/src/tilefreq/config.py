"""INI pipeline configuration."""

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .losses import LossHyper
from .lsh import LshParams
from .training import Tile2VecConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    synth: SynthConfig = field(default_factory=SynthConfig)
    metadata: tuple = ()
    rasters: str = ""
    truth: str = ""


@dataclass(frozen=True)
class CodecConfig:
    k: int = 8
    channel_selection: tuple = ()


@dataclass(frozen=True)
class LshConfig:
    params: LshParams = field(default_factory=lambda: LshParams(bucket_length=50_000.0))
    radii: tuple = (5_000.0, 10_000.0, 50_000.0)
    topk: int = 10
    join_cutoff: float = 50_000.0
    predict_top: int = 20


@dataclass(frozen=True)
class PipelineConfig:
    work_dir: Path
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    lsh: LshConfig = field(default_factory=LshConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    geo_arch: str = "mlp256"
    cnn: TrainConfig = field(default_factory=TrainConfig)
    cnn_dims: dict = field(default_factory=dict)
    tile2vec: Tile2VecConfig = field(default_factory=Tile2VecConfig)
    tile2vec_triplets: int = 2000
    tile2vec_max_dist: float = 100_000.0
    tile2vec_label_radius: float = 0.0
    predict_model: str = "geo"
    sections: dict = field(default_factory=dict)


def _number(section, key, raw, kind):
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _list(section, key, raw, kind):
    return tuple(_number(section, key, v.strip(), kind) for v in raw.split(",") if v.strip())


class _Section:
    """Typed reader over one INI section that rejects unknown keys."""

    def __init__(self, parser, name):
        self.name = name
        self.raw = dict(parser[name]) if parser.has_section(name) else {}
        self.used = set()

    def get(self, key, kind, default):
        self.used.add(key.lower())
        raw = self.raw.get(key.lower())
        if raw is None or raw.strip() == "":
            return default
        if kind is str:
            return raw.strip()
        return _number(self.name, key, raw.strip(), kind)

    def get_list(self, key, kind, default):
        self.used.add(key.lower())
        raw = self.raw.get(key.lower())
        if raw is None:
            return default
        return _list(self.name, key, raw, kind)

    def finish(self):
        unknown = sorted(set(self.raw) - self.used)
        if unknown:
            raise ConfigError(f"{self.name}.{unknown[0]}: unknown key")


def _train_config(sec, defaults, seed):
    loss = LossHyper(
        name=sec.get("loss", str, defaults.loss.name),
        gamma_pos=sec.get("gamma_pos", float, 1.0),
        gamma_neg=sec.get("gamma_neg", float, 4.0),
        margin=sec.get("margin", float, 0.05),
        lam=sec.get("lam", float, 1.5),
        gamma=sec.get("gamma", float, 2.0),
        hill_margin=sec.get("hill_margin", float, 1.0),
        S=sec.get("S", float, -1.0),
        E=sec.get("E", float, 0.0),
        use_class_weights=sec.get("class_weights", bool, False),
    )
    return TrainConfig(
        loss=loss,
        learning_rate=sec.get("learningRate", float, defaults.learning_rate),
        batch_size=sec.get("batchSize", int, defaults.batch_size),
        epochs=sec.get("epochs", int, defaults.epochs),
        val_fraction=sec.get("valFraction", float, defaults.val_fraction),
        seed=seed,
        geo_noise_mean=sec.get("geoNoiseMeanMeters", float, defaults.geo_noise_mean),
        prediction_mode=sec.get("predictionMode", str, defaults.prediction_mode),
        k=sec.get("k", int, defaults.k),
        threshold=sec.get("threshold", float, defaults.threshold),
    )


def load_config(path):
    """Parse an INI pipeline config; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str.lower
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {"pipeline", "dataset", "codec", "lsh", "training", "cnn", "tile2vec", "predict"}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"{name}: unknown section")
    base = path.parent
    try:
        return _build(parser, base)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _build(parser, base):
    sections = {n: _Section(parser, n) for n in
                ("pipeline", "dataset", "codec", "lsh", "training", "cnn", "tile2vec", "predict")}
    pipe = sections["pipeline"]
    work_dir = os.environ.get("TILEFREQ_WORKDIR") or pipe.get("workDir", str, None)
    pipe.used.add("workdir")
    if not work_dir:
        raise ConfigError("pipeline.workDir: required (or set TILEFREQ_WORKDIR)")
    seed = pipe.get("seed", int, 0)

    ds = sections["dataset"]
    source = ds.get("source", str, "synthetic")
    if source not in ("synthetic", "csv"):
        raise ConfigError(f"dataset.source: expected synthetic or csv, got {source!r}")
    synth_kwargs = {}
    for f in fields(SynthConfig):
        if f.name == "seed":
            continue
        value = ds.get(f.name, type(f.default), None)
        if value is not None:
            synth_kwargs[f.name] = value
    try:
        synth = SynthConfig(seed=seed, **synth_kwargs)
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from None
    metadata = tuple(str((base / p).resolve()) for p in ds.get_list("metadata", str, ()))
    rasters = ds.get("rasters", str, "")
    truth = ds.get("truth", str, "")
    dataset = DatasetConfig(
        source,
        synth,
        metadata,
        str((base / rasters).resolve()) if rasters else "",
        str((base / truth).resolve()) if truth else "",
    )
    if source == "csv" and not metadata:
        raise ConfigError("dataset.metadata: required when source = csv")

    cs = sections["codec"]
    codec = CodecConfig(cs.get("k", int, 8), cs.get_list("channelSelection", int, ()))

    ls = sections["lsh"]
    lsh = LshConfig(
        LshParams(ls.get("bucketLength", float, 50_000.0), ls.get("numTables", int, 5), seed),
        ls.get_list("radii", float, (5_000.0, 10_000.0, 50_000.0)),
        ls.get("topk", int, 10),
        ls.get("joinCutoff", float, 50_000.0),
        ls.get("predictTop", int, 20),
    )

    training = _train_config(sections["training"], TrainConfig(learning_rate=5.0, epochs=10), seed)
    geo_arch = sections["training"].get("arch", str, "mlp256")
    if geo_arch not in ("linear", "mlp256"):
        raise ConfigError(f"training.arch: expected linear or mlp256, got {geo_arch!r}")
    cnn_sec = sections["cnn"]
    cnn = _train_config(cnn_sec, TrainConfig(learning_rate=1.0, epochs=8), seed)
    cnn_dims = {
        "conv_channels": cnn_sec.get_list("convChannels", int, (16, 16)),
        "latent": cnn_sec.get("latent", int, 256),
    }
    if len(cnn_dims["conv_channels"]) != 2:
        raise ConfigError("cnn.convChannels: expected two integers")

    ts = sections["tile2vec"]
    t2v = Tile2VecConfig(
        learning_rate=ts.get("learningRate", float, 0.01),
        batch_size=ts.get("batchSize", int, 32),
        epochs=ts.get("epochs", int, 3),
        margin=ts.get("margin", float, 1.0),
        latent=ts.get("latent", int, 64),
        conv_channels=ts.get_list("convChannels", int, (16, 16)),
        seed=seed,
    )
    cfg = PipelineConfig(
        work_dir=(base / work_dir).resolve(),
        seed=seed,
        dataset=dataset,
        codec=codec,
        lsh=lsh,
        training=training,
        geo_arch=geo_arch,
        cnn=cnn,
        cnn_dims=cnn_dims,
        tile2vec=t2v,
        tile2vec_triplets=ts.get("numTriplets", int, 2000),
        tile2vec_max_dist=ts.get("maxDist", float, 100_000.0),
        tile2vec_label_radius=ts.get("labelRadius", float, 0.0),
        predict_model=sections["predict"].get("model", str, "geo"),
        sections={n: dict(s.raw) for n, s in sections.items()},
    )
    if cfg.predict_model not in ("geo", "cnn", "knn"):
        raise ConfigError(f"predict.model: expected geo, cnn or knn, got {cfg.predict_model!r}")
    for sec in sections.values():
        sec.finish()
    return cfg
