"""Synthetic multi-task regression data and its CSV form.

Inputs are a fixed random mixing of Gaussian latent blocks.  Each task
reads one or more latent blocks; tasks reading the same block get jittered
copies of one block-level map, so their targets are mutually predictable.
An ``independent`` task gets a private block of its own.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mtsl.errors import ConfigError, ParseError

TARGET_KINDS = ("linear", "nonlinear", "independent")
_NAME = re.compile(r"^[A-Za-z0-9]+$")
_TARGET_COL = re.compile(r"^task([A-Za-z0-9]+)_target_(\d+)$")
_INPUT_COL = re.compile(r"^input_(\d+)$")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str = "linear"
    blocks: tuple[int, ...] = (0,)
    out_dim: int = 1
    noise: float = 0.1


@dataclass(frozen=True)
class SyntheticTaskSpec:
    tasks: tuple[TaskSpec, ...]
    block_dim: int = 4
    input_dim: int = 16
    jitter: float = 0.25
    input_noise: float = 0.05

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigError("synthetic spec needs at least one task")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names {names}")
        for t in self.tasks:
            if not _NAME.match(t.name):
                raise ConfigError(f"task name {t.name!r} must be alphanumeric")
            if t.kind not in TARGET_KINDS:
                raise ConfigError(f"task {t.name}: unknown kind {t.kind!r}")
            if t.kind != "independent" and not t.blocks:
                raise ConfigError(f"task {t.name}: sharing row is empty")
            if t.noise < 0 or t.out_dim < 1:
                raise ConfigError(f"task {t.name}: noise must be >= 0 and out_dim >= 1")
        if self.block_dim < 1 or self.input_dim < 1 or self.jitter < 0 or self.input_noise < 0:
            raise ConfigError("block_dim/input_dim must be positive and jitter/input_noise >= 0")

    def sharing_matrix(self) -> np.ndarray:
        """Rows are tasks, columns latent blocks; private blocks appended last."""
        shared = 1 + max((b for t in self.tasks if t.kind != "independent" for b in t.blocks), default=-1)
        private = sum(t.kind == "independent" for t in self.tasks)
        m = np.zeros((len(self.tasks), shared + private), dtype=int)
        k = shared
        for i, t in enumerate(self.tasks):
            if t.kind == "independent":
                m[i, k] = 1
                k += 1
            else:
                m[i, list(t.blocks)] = 1
        return m

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> SyntheticTaskSpec:
        tasks = tuple(TaskSpec(**dict(t, blocks=tuple(t.get("blocks", (0,))))) for t in d["tasks"])
        return cls(tasks=tasks, **{k: v for k, v in d.items() if k != "tasks"})

    @classmethod
    def shared_and_independent(
        cls, n_tasks: int, shared: Sequence[int], noise: float = 0.1, kind: str = "linear", out_dim: int = 1, **kw
    ):
        """Tasks named A, B, C...; the 1-based indices in ``shared`` read block 0, others get private blocks."""
        names = [chr(ord("A") + i) for i in range(n_tasks)]
        tasks = []
        for i, name in enumerate(names):
            if i + 1 in shared:
                tasks.append(TaskSpec(name, kind, (0,), out_dim, noise))
            else:
                tasks.append(TaskSpec(name, "independent", (), out_dim, noise))
        return cls(tasks=tuple(tasks), **kw)


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: dict[str, np.ndarray]

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> Dataset:
        return Dataset(self.inputs[idx], {t: y[idx] for t, y in self.targets.items()})

    def equals(self, other: Dataset) -> bool:
        return (
            np.array_equal(self.inputs, other.inputs)
            and list(self.targets) == list(other.targets)
            and all(np.array_equal(self.targets[t], other.targets[t]) for t in self.targets)
        )


@dataclass
class SplitDataset:
    train: Dataset
    val: Dataset
    meta: dict = field(default_factory=dict)

    @property
    def tasks(self) -> list[str]:
        return list(self.train.targets)


def generate(spec: SyntheticTaskSpec, n_samples: int, seed: int, *, batch_size: int = 16, val_fraction: float = 0.25) -> SplitDataset:
    spec.validate()
    if n_samples < 2 * batch_size:
        raise ConfigError(f"n_samples={n_samples} must be at least twice the batch size {batch_size}")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    share = spec.sharing_matrix()
    n_blocks = share.shape[1]
    d = spec.block_dim
    latent_dim = n_blocks * d
    z = rng.standard_normal((n_samples, latent_dim))
    mixing = rng.standard_normal((latent_dim, spec.input_dim)) / np.sqrt(latent_dim)
    x = z @ mixing + spec.input_noise * rng.standard_normal((n_samples, spec.input_dim))

    out_dim = max(t.out_dim for t in spec.tasks)
    prototypes = rng.standard_normal((n_blocks, d, out_dim)) / np.sqrt(d)
    targets = {}
    for i, t in enumerate(spec.tasks):
        h = np.zeros((n_samples, t.out_dim))
        for b in np.flatnonzero(share[i]):
            w = prototypes[b, :, : t.out_dim] + spec.jitter * rng.standard_normal((d, t.out_dim)) / np.sqrt(d)
            h += z[:, b * d : (b + 1) * d] @ w
        if t.kind in ("nonlinear", "independent"):
            h = np.tanh(1.5 * h) + 0.25 * h
        targets[t.name] = h + t.noise * rng.standard_normal(h.shape)

    n_val = max(1, int(round(n_samples * val_fraction)))
    order = rng.permutation(n_samples)
    tr, va = np.sort(order[n_val:]), np.sort(order[:n_val])
    full = Dataset(x, targets)
    meta = {"seed": seed, "spec": spec.to_json(), "n_samples": n_samples, "split": {"train": len(tr), "val": len(va)}}
    return SplitDataset(full.subset(tr), full.subset(va), meta)


# --- CSV ------------------------------------------------------------------------


def save_csv(dataset: Dataset, path) -> None:
    cols = [f"input_{i}" for i in range(dataset.inputs.shape[1])]
    blocks = [dataset.inputs]
    for t, y in dataset.targets.items():
        y = y.reshape(len(dataset), -1)
        cols += [f"task{t}_target_{j}" for j in range(y.shape[1])]
        blocks.append(y)
    table = np.hstack(blocks)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in table:
            w.writerow([repr(float(v)) for v in row])


def load_csv(path, tasks: Sequence[str] | None = None) -> Dataset:
    """Read a dataset CSV; with ``tasks`` every named task must have target columns."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path.name}: empty file", line=1) from None
        inputs: list[int] = []
        targets: dict[str, list[int]] = {}
        for col, name in enumerate(header):
            if m := _INPUT_COL.match(name):
                if int(m.group(1)) != len(inputs):
                    raise ParseError(f"input columns out of order at {name!r}", line=1)
                inputs.append(col)
            elif m := _TARGET_COL.match(name):
                cols = targets.setdefault(m.group(1), [])
                if int(m.group(2)) != len(cols):
                    raise ParseError(f"target columns out of order at {name!r}", line=1)
                cols.append(col)
            else:
                raise ParseError(f"unrecognised column {name!r}", line=1)
        if not inputs:
            raise ParseError("missing column 'input_0'", line=1)
        for t in tasks or ():
            if t not in targets:
                raise ParseError(f"missing column 'task{t}_target_0'", line=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
    if not rows:
        raise ParseError("no data rows", line=2)
    table = np.array(rows)
    return Dataset(table[:, inputs], {t: table[:, c] for t, c in targets.items()})


def save_split(split: SplitDataset, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "train.csv", out / "val.csv", out / "meta.json"]
    save_csv(split.train, paths[0])
    save_csv(split.val, paths[1])
    paths[2].write_text(json.dumps(split.meta, indent=2, sort_keys=True) + "\n")
    return paths


def load_split(data_dir) -> SplitDataset:
    d = Path(data_dir)
    meta_path = d / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    train = load_csv(d / "train.csv")
    val = load_csv(d / "val.csv", tasks=list(train.targets))
    return SplitDataset(train, val, meta)
