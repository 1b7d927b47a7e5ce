"""Alternating task-learning / structural-learning training loop."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mtsl import archgraph as ag
from mtsl.archgraph import ArchGraph
from mtsl.data import Dataset, SplitDataset
from mtsl.errors import ConfigError, ContractError, NumericError
from mtsl.losses import (
    AttNet,
    TaskLoss,
    TaskLossSpec,
    amalgamation_loss,
    cka_alignment_loss,
    combined_loss,
    task_losses,
)
from mtsl.metrics import TaskMetric
from mtsl.similarity import best_grouping, fusion_decision, pairwise_cka
from mtsl.tensor import Tape, Tensor, adam_step, backward, no_grad

log = logging.getLogger(__name__)

DEFAULT_TASK_EPOCHS = (2, 2, 2, 2, 4, 4, 8, 8, 8, 8)
DEFAULT_AMALGAMATION_EPOCHS = (1, 1, 2, 2, 2, 2, 4, 4, 8, 8)


@dataclass(frozen=True)
class PhaseSchedule:
    E: int = 80
    f: int = 20
    task_epochs: tuple[int, ...] = DEFAULT_TASK_EPOCHS
    structural_epochs: tuple[int, ...] = DEFAULT_AMALGAMATION_EPOCHS

    @property
    def n(self) -> int:
        return len(self.task_epochs)

    @classmethod
    def scaled(cls, E: int, f: int | None = None) -> PhaseSchedule:
        """The default schedule shrunk proportionally to a budget of ``E`` epochs."""
        r = E / 80
        t = tuple(max(1, int(round(x * r))) for x in DEFAULT_TASK_EPOCHS)
        s = tuple(max(1, int(round(x * r))) for x in DEFAULT_AMALGAMATION_EPOCHS)
        return cls(E, int(round(20 * r)) if f is None else f, t, s)


def validate_schedule(s: PhaseSchedule) -> None:
    if len(s.task_epochs) != len(s.structural_epochs):
        raise ConfigError(
            f"|E_t| = {len(s.task_epochs)} must equal |E_s| = {len(s.structural_epochs)}"
        )
    if any(int(x) != x or x < 1 for x in (*s.task_epochs, *s.structural_epochs)):
        raise ConfigError("every entry of E_t and E_s must be an integer >= 1")
    if s.E < 1 or s.f < 0:
        raise ConfigError(f"need E >= 1 and f >= 0, got E={s.E}, f={s.f}")
    total = sum(s.task_epochs)
    if not total < s.E - s.f:
        raise ConfigError(f"sum(E_t) < E - f violated: {total} >= {s.E} - {s.f} = {s.E - s.f}")


@dataclass
class RunConfig:
    widths: tuple[int, ...] = (16, 16, 16)
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    lam: float = 0.1
    gamma: float = 0.75
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    probe_size: int = 256
    lr_steps: tuple[float, ...] = (60 / 80, 70 / 80)
    lr_decay: float = 0.1
    loss_kinds: dict[str, str] = field(default_factory=dict)
    cka_variant: str = "unbiased"

    def adam_hyper(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }

    def loss_spec(self, tasks) -> TaskLossSpec:
        return TaskLossSpec({t: TaskLoss(self.loss_kinds.get(t, "mse")) for t in tasks})

    def validate(self) -> None:
        validate_schedule(self.schedule)
        if self.seed is None:
            raise ConfigError("a seed is required")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0 <= self.gamma <= 1:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.batch_size < 4 or self.probe_size < 4:
            raise ConfigError("batch_size and probe_size must be at least 4")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> RunConfig:
        d = dict(d)
        if "schedule" in d:
            s = d["schedule"]
            d["schedule"] = PhaseSchedule(
                s["E"], s["f"], tuple(s["task_epochs"]), tuple(s["structural_epochs"])
            )
        for k in ("widths", "lr_steps"):
            if k in d:
                d[k] = tuple(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class RunLog:
    """Ordered JSON-serialisable records; every record carries a ``phase`` tag."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, record: dict) -> None:
        self.records.append(record)

    def epochs(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "epoch"]

    def phase_sequence(self) -> list[str]:
        seq: list[str] = []
        for r in self.records:
            if not seq or seq[-1] != r["phase"]:
                seq.append(r["phase"])
        return seq

    def pattern_ok(self) -> bool:
        return re.fullmatch(r"(TS)*F", "".join(p[0].upper() for p in self.phase_sequence())) is not None

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> RunLog:
        rl = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rl.add(json.loads(line))
        return rl


@dataclass
class StructuralOutcome:
    candidates: list[tuple[str, ...]]
    fused: list[tuple[str, ...]]
    remaining: bool


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # the unbiased CKA estimator needs 4 samples
    if len(out) > 1 and len(out[-1]) < 4:
        out.pop()
    return out


def _step_params(holders, grads: dict, lr: float) -> None:
    """Apply Adam to every (holder, name) parameter with a gradient."""
    for holder in holders:
        for name, p in holder.params().items():
            g = grads.get(p)
            if g is None:
                continue
            new, state = adam_step(p, g, holder.adam[name], lr=lr)
            holder.set_param(name, new)
            holder.adam[name] = state


class Trainer:
    def __init__(self, config: RunConfig, data: SplitDataset, graph: ArchGraph | None = None, snapshot_dir=None):
        config.validate()
        self.config = config
        self.data = data
        self.tasks = data.tasks
        self.spec = config.loss_spec(self.tasks)
        if graph is None:
            out_dims = {t: data.train.targets[t].shape[1] for t in self.tasks}
            graph = ag.init_from_tasks(
                self.tasks,
                config.widths,
                config.seed,
                input_dim=data.train.inputs.shape[1],
                out_dims=out_dims,
                adam_hyper=config.adam_hyper(),
            )
        self.graph = graph
        self.rng = np.random.default_rng([config.seed, 0])
        self.att_rng = np.random.default_rng([config.seed, 1])
        probe_rng = np.random.default_rng([config.seed, 2])
        n = len(data.train)
        k = min(config.probe_size, n)
        self.probe = np.sort(probe_rng.choice(n, size=k, replace=False))
        self.epoch = 0  # budgeted epochs consumed (task + fine-tune)
        self.log = RunLog()
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir else None
        self.last_param_count = graph.parameter_count()

    # --- helpers -----------------------------------------------------------------

    def lr(self) -> float:
        c = self.config
        lr = c.lr
        for frac in c.lr_steps:
            if self.epoch >= frac * c.schedule.E:
                lr *= c.lr_decay
        return lr

    def _targets(self, ds: Dataset, idx=None) -> dict[str, np.ndarray]:
        if idx is None:
            return ds.targets
        return {t: y[idx] for t, y in ds.targets.items()}

    def _cka_sites(self, features: dict[str, Tensor]) -> list[list[Tensor]]:
        candidates, _ = ag.fusible_sets(self.graph)
        return [[features[t] for t in members] for members in candidates]

    def _abort(self, what: str) -> None:
        path = None
        if self.snapshot_dir is not None:
            self.snapshot_dir.mkdir(parents=True, exist_ok=True)
            path = self.snapshot_dir / "nan_snapshot.json"
            self.graph.pending.clear()
            path.write_bytes(ag.serialize(self.graph))
            self.log.write(self.snapshot_dir / "runlog.partial.jsonl")
        err = NumericError(f"non-finite {what} at epoch {self.epoch}")
        err.snapshot = path
        raise err

    def _val_losses(self) -> dict[str, float]:
        with no_grad():
            fr = self.graph.forward(self.data.val.inputs)
            return {t: l.item() for t, l in task_losses(fr.outputs, self.data.val.targets, self.spec).items()}

    def _log_epoch(self, phase: str, lam: float, train: dict[str, float], extra: dict | None = None) -> None:
        cost = self.graph.cost()
        if cost.parameter_count > self.last_param_count:
            raise ContractError("parameter count increased during training")
        self.last_param_count = cost.parameter_count
        rec = {
            "kind": "epoch",
            "phase": phase,
            "epoch": self.epoch,
            "lr": self.lr(),
            "lambda": lam,
            "train_loss": train,
            "val_loss": self._val_losses(),
            "parameter_count": cost.parameter_count,
            "flops_per_sample": cost.flops_per_sample,
        }
        if extra:
            rec.update(extra)
        self.log.add(rec)

    # --- phases ------------------------------------------------------------------

    def train_epoch(self, lam: float) -> tuple[dict[str, float], float]:
        g = self.graph
        ds = self.data.train
        sums = {t: 0.0 for t in self.tasks}
        cka_sum, nb = 0.0, 0
        lr = self.lr()
        for idx in _batches(len(ds), self.config.batch_size, self.rng):
            with Tape():
                fr = g.forward(ds.inputs[idx])
                per_task = task_losses(fr.outputs, self._targets(ds, idx), self.spec)
                mtl = None
                for t, l in per_task.items():
                    term = l * self.spec[t].weight
                    mtl = term if mtl is None else mtl + term
                if lam > 0:
                    cka = cka_alignment_loss(self._cka_sites(fr.task_features))
                else:
                    cka = Tensor(1.0)
                loss = combined_loss(mtl, cka, lam)
            if not np.isfinite(loss.item()):
                self._abort("loss")
            params = [p for layer in g.trainable_layers() for p in layer.params().values()]
            grads = backward(loss, wrt=params)
            _step_params(g.trainable_layers(), grads, lr)
            for t, l in per_task.items():
                sums[t] += l.item()
            cka_sum += cka.item()
            nb += 1
        return {t: v / nb for t, v in sums.items()}, cka_sum / nb

    def run_task_phase(self, lam: float, epochs: int, phase: str = "task") -> None:
        for _ in range(epochs):
            train, cka = self.train_epoch(lam)
            self.epoch += 1
            self._log_epoch(phase, lam, train, {"cka_alignment": cka})

    def mean_task_node_cka(self) -> float:
        """Mean unbiased CKA over co-fusible task-node pairs on the probe batch."""
        with no_grad():
            fr = self.graph.forward(self.data.train.inputs[self.probe])
        vals = []
        for members in ag.fusible_sets(self.graph)[0]:
            sim = pairwise_cka({t: fr.task_features[t].data for t in members})
            iu = np.triu_indices(len(members), 1)
            vals.extend(sim.S[iu])
        return float(np.mean(vals)) if vals else 1.0

    def run_structural_phase(self, epochs: int, phase_index: int = 0) -> StructuralOutcome:
        g = self.graph
        gamma = self.config.gamma
        candidates, _ = ag.fusible_sets(g)
        with no_grad():
            fr = g.forward(self.data.train.inputs[self.probe])
        fusing: list[tuple[str, ...]] = []
        for members in candidates:
            depth = g.task_node(members[0]).depth
            sim = pairwise_cka({t: fr.task_features[t].data for t in members})
            grouping = best_grouping(sim, gamma)
            chosen = fusion_decision(grouping, gamma)
            fusing.extend(chosen)
            self.log.add(
                {
                    "kind": "grouping",
                    "phase": "structural",
                    "structural_phase": phase_index,
                    "depth": depth,
                    "tasks": list(sim.tasks),
                    "similarity": sim.S.tolist(),
                    "groups": [list(x) for x in grouping.groups],
                    "group_values": list(grouping.group_values),
                    "grouping_value": grouping.value,
                    "fused": [list(x) for x in chosen],
                }
            )

        created = [(members, ag.create_group_node(g, members)) for members in fusing]
        atts = {
            gid: [AttNet.create(g.layers[gid].weight.shape[0], self.att_rng, adam_hyper=self.config.adam_hyper()) for _ in members]
            for members, gid in created
        }
        curves: dict[int, list[float]] = {gid: [] for _, gid in created}
        for sub_epoch in range(epochs if created else 0):
            losses = self._amalgamation_epoch(created, atts)
            for gid, v in losses.items():
                curves[gid].append(v)
            self._log_epoch(
                "structural",
                0.0,
                {},
                {
                    "structural_phase": phase_index,
                    "sub_epoch": sub_epoch,
                    "amalgamation_loss": {"+".join(g.layers[gid].owners): v for gid, v in losses.items()},
                },
            )
        for members, gid in created:
            ag.remove_task_nodes(g, members, gid)
        remaining = bool(ag.fusible_sets(g)[0])
        self.log.add(
            {
                "kind": "structural_summary",
                "phase": "structural",
                "structural_phase": phase_index,
                "fused": [list(m) for m in fusing],
                "amalgamation_curves": {"+".join(m): curves[gid] for m, gid in created},
                "parameter_count": g.parameter_count(),
                "flops_per_sample": g.cost().flops_per_sample,
                "remaining": remaining,
            }
        )
        self.last_param_count = g.parameter_count()
        return StructuralOutcome(candidates, fusing, remaining)

    def _amalgamation_epoch(self, created, atts) -> dict[int, float]:
        g = self.graph
        ds = self.data.train
        sums = {gid: 0.0 for _, gid in created}
        nb = 0
        lr = self.lr()
        for idx in _batches(len(ds), self.config.batch_size, self.rng):
            x = ds.inputs[idx]
            with no_grad():
                fr = g.forward(x)
            for members, gid in created:
                group = g.layers[gid]
                parent_out = Tensor(x) if group.parent is ag.INPUT else fr.activations[group.parent].detach()
                with Tape():
                    feature = group(parent_out)
                    teachers = [fr.task_features[t].data for t in members]
                    loss = amalgamation_loss(teachers, atts[gid], feature)
                if not np.isfinite(loss.item()):
                    self._abort("amalgamation loss")
                holders = [group, *atts[gid]]
                params = [p for h in holders for p in h.params().values()]
                grads = backward(loss, wrt=params)
                _step_params(holders, grads, lr)
                sums[gid] += loss.item()
            nb += 1
        return {gid: v / nb for gid, v in sums.items()}

    def run(self) -> tuple[ArchGraph, RunLog]:
        c = self.config
        s = c.schedule
        self.log.add(
            {
                "kind": "config",
                "phase": "task" if s.n else "fine-tune",
                "config": c.to_json(),
                "tasks": self.tasks,
                "parameter_count": self.graph.parameter_count(),
                "flops_per_sample": self.graph.cost().flops_per_sample,
            }
        )
        for i in range(s.n):
            self.run_task_phase(c.lam, s.task_epochs[i])
            outcome = self.run_structural_phase(s.structural_epochs[i], i)
            log.info("structural phase %d fused %s", i, outcome.fused)
            if not outcome.remaining:
                break
        self.run_task_phase(0.0, s.E - self.epoch, phase="fine-tune")
        return self.graph, self.log


# --- functional surface ---------------------------------------------------------------


def run_mtsl(config: RunConfig, data: SplitDataset, snapshot_dir=None) -> tuple[ArchGraph, RunLog]:
    return Trainer(config, data, snapshot_dir=snapshot_dir).run()


def train_fixed(config: RunConfig, data: SplitDataset, graph: ArchGraph, epochs: int | None = None) -> ArchGraph:
    """Plain multi-task training of a fixed topology (no alignment, no surgery)."""
    fixed = RunConfig(**{**config.__dict__, "schedule": PhaseSchedule(config.schedule.E, 0, (), ())})
    tr = Trainer(fixed, data, graph=graph)
    tr.run_task_phase(0.0, config.schedule.E if epochs is None else epochs, phase="fine-tune")
    return tr.graph


def evaluate(g: ArchGraph, data: Dataset, spec: TaskLossSpec) -> dict[str, TaskMetric]:
    """Per-task validation metric: MSE (lower is better) or accuracy."""
    with no_grad():
        fr = g.forward(data.inputs)
    out = {}
    for t in spec:
        pred = fr.outputs[t].data
        y = data.targets[t]
        if spec[t].kind == "mse":
            out[t] = TaskMetric(t, float(np.mean((pred - y.reshape(pred.shape)) ** 2)), True)
        else:
            labels = y.argmax(axis=1) if y.ndim == 2 and y.shape[1] > 1 else y.reshape(-1).astype(int)
            out[t] = TaskMetric(t, float(np.mean(pred.argmax(axis=1) == labels)), False)
    return out
