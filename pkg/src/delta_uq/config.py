"""Run configuration read from a TOML file.

Every section maps onto one module's config object.  Unknown sections or
keys are rejected so typos fail fast.  Relative dataset paths and the output
directory are resolved against the directory holding the config file.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import DatasetSource
from .nn_core import NetworkConfig
from .trainer import TrainConfig

KINDS = ("hessian", "opg", "sandwich")


class ConfigError(ValueError):
    """User-facing configuration problem (exit status 2)."""


@dataclass(frozen=True)
class SpectralSettings:
    k: int = 64
    max_iters: int | None = None
    tol: float = 1e-8
    check_every: int = 10
    block_size: int = 64
    buffer_rank: int | None = None
    refine_tol: float | None = 1e-10
    chunk_size: int | None = None


@dataclass(frozen=True)
class DeltaSettings:
    kinds: tuple[str, ...] = KINDS
    order: str = "desc"
    top: int | None = None
    batch: int = 64


@dataclass(frozen=True)
class OracleSettings:
    """Tiny fixture for the dense cross-checks (P must stay small)."""

    layer_sizes: tuple[int, ...] = (4, 6, 3)
    l2_rate: float = 0.01
    train_seed: int = 2
    n_train: int = 300
    n_test: int = 50
    dims: int = 4
    n_classes: int = 3
    separation: float = 2.5
    noise: float = 1.0
    k_values: tuple[int, ...] = (5, 10, 20)
    fisher_n: tuple[int, ...] = (100, 1000, 10000)
    sandwich_layer_sizes: tuple[int, ...] = (5, 5, 5)


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig
    training: TrainConfig
    train_data: DatasetSource
    test_data: DatasetSource | None
    spectral: SpectralSettings = field(default_factory=SpectralSettings)
    delta: DeltaSettings = field(default_factory=DeltaSettings)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    out_dir: Path = Path("out")
    seed: int = 0
    source_path: Path | None = None

    def dataset(self, split: str) -> DatasetSource:
        if split == "train":
            return self.train_data
        if split == "test":
            if self.test_data is None:
                raise ConfigError("no [dataset.test] section in the config")
            return self.test_data
        raise ConfigError(f"unknown split {split!r}")

    @property
    def splits(self) -> tuple[str, ...]:
        return ("train",) if self.test_data is None else ("train", "test")


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls)}


def _check_keys(section: str, table: dict, allowed) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _build(cls, section: str, table: dict, skip=(), **overrides):
    allowed = set(_fields(cls)) - set(skip)
    _check_keys(section, table, allowed)
    kwargs = {}
    for key, value in table.items():
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def _dataset(section: str, table: dict, base: Path, seed: int) -> DatasetSource:
    table = dict(table)
    if "kind" not in table:
        raise ConfigError(f"[{section}] needs a 'kind'")
    paths = []
    for p in table.pop("paths", []):
        path = Path(p)
        path = path if path.is_absolute() else base / path
        if not path.exists():
            raise ConfigError(f"[{section}]: dataset file not found: {path}")
        paths.append(str(path))
    table.setdefault("seed", seed)
    return _build(DatasetSource, section, table, skip=("extra",), paths=tuple(paths))


def parse_config(doc: dict, base: Path = Path("."), seed: int | None = None, source_path=None) -> RunConfig:
    _check_keys("top level", doc, {"seed", "out_dir", "network", "training", "dataset", "spectral", "delta", "oracle"})
    seed = int(doc.get("seed", 0) if seed is None else seed)
    if "network" not in doc or "dataset" not in doc:
        raise ConfigError("config needs [network] and [dataset.train] sections")
    network = _build(NetworkConfig, "network", doc["network"])
    if network.l2_rate <= 0:
        raise ConfigError("[network]: l2_rate must be positive for the curvature estimators")

    train_tab = dict(doc.get("training", {}))
    train_tab.setdefault("seed", seed)
    if "schedule" in train_tab:
        train_tab["schedule"] = [tuple(x) for x in train_tab["schedule"]]
    training = _build(TrainConfig, "training", train_tab)

    ds = doc["dataset"]
    _check_keys("dataset", ds, {"train", "test"})
    if "train" not in ds:
        raise ConfigError("config needs a [dataset.train] section")
    train_data = _dataset("dataset.train", ds["train"], base, seed)
    test_data = _dataset("dataset.test", ds["test"], base, seed) if "test" in ds else None

    spectral = _build(SpectralSettings, "spectral", doc.get("spectral", {}))
    delta = _build(DeltaSettings, "delta", doc.get("delta", {}))
    bad = [k for k in delta.kinds if k not in KINDS]
    if bad:
        raise ConfigError(f"[delta]: unknown estimator kind(s) {bad}")
    if delta.order not in ("asc", "desc"):
        raise ConfigError("[delta]: order must be 'asc' or 'desc'")
    oracle = _build(OracleSettings, "oracle", doc.get("oracle", {}))

    out = Path(doc.get("out_dir", "out"))
    out = out if out.is_absolute() else base / out
    return RunConfig(network, training, train_data, test_data, spectral, delta, oracle, out, seed, source_path)


def load_config(path, seed: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc, path.parent, seed, path)
