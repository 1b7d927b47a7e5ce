"""Mutable multi-task network built from affine layers arranged as a tree.

Every task owns a path of ``len(widths)`` hidden layers rooted at the input
plus a private head.  A hidden layer owned by two or more tasks is a group
node.  The first private layer on a task's path is that task's *task node*
(the only place fusion can happen); the private layers after it form the
task branch.
"""

from __future__ import annotations

import base64
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from mtsl.errors import ContractError, ParseError, ShapeError
from mtsl.tensor import AdamState, Tensor, affine, relu

FORMAT_VERSION = 1
INPUT = None  # parent marker for layers fed directly by the input batch


@dataclass
class Layer:
    id: int
    depth: int
    owners: tuple[str, ...]
    parent: int | None
    weight: Tensor  # (C_out, C_in)
    bias: Tensor  # (C_out,)
    activation: str = "relu"
    adam: dict[str, AdamState] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    @property
    def flops(self) -> int:
        c_out, c_in = self.weight.shape
        return 2 * c_in * c_out

    @property
    def shared(self) -> bool:
        return len(self.owners) >= 2

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def set_param(self, name: str, value: Tensor) -> None:
        setattr(self, name, value)

    def __call__(self, x: Tensor) -> Tensor:
        out = affine(x, self.weight, self.bias)
        return relu(out) if self.activation == "relu" else out


@dataclass(frozen=True)
class FlopReport:
    parameter_count: int
    flops_per_sample: int


@dataclass
class ForwardResult:
    outputs: dict[str, Tensor]
    activations: dict[int, Tensor]  # layer id -> post-activation output
    task_features: dict[str, Tensor]  # task -> its task node's output


@dataclass(frozen=True)
class Branch:
    owner: str
    layers: tuple[int, ...]
    parent: int | None


class ArchGraph:
    def __init__(self, tasks, input_dim, widths, out_dims, adam_hyper=None):
        self.tasks: list[str] = list(tasks)
        self.input_dim = int(input_dim)
        self.widths: list[int] = list(widths)
        self.out_dims: dict[str, int] = dict(out_dims)
        self.adam_hyper: dict = dict(adam_hyper or {})
        self.layers: dict[int, Layer] = {}
        self.paths: dict[str, list[int]] = {}
        self.heads: dict[str, Layer] = {}
        self.pending: set[int] = set()
        self.next_id = 0
        self.calls: Counter = Counter()

    @property
    def depth(self) -> int:
        return len(self.widths)

    def _new_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    # --- structure queries ---------------------------------------------------

    def task_node(self, task: str) -> Layer | None:
        for lid in self.paths[task]:
            layer = self.layers[lid]
            if not layer.shared:
                return layer
        return None

    def task_nodes(self) -> dict[str, Layer]:
        out = {}
        for t in self.tasks:
            node = self.task_node(t)
            if node is not None:
                out[t] = node
        return out

    def task_branch(self, task: str) -> list[int]:
        node = self.task_node(task)
        if node is None:
            return []
        return self.paths[task][node.depth + 1 :]

    def branches(self) -> list[Branch]:
        out = []
        for t in self.tasks:
            ids = self.task_branch(t)
            if ids:
                out.append(Branch(t, tuple(ids), self.layers[ids[0]].parent))
        return out

    def kind(self, layer_id: int) -> str:
        layer = self.layers[layer_id]
        if layer.shared:
            return "group_node"
        parent = layer.parent
        if parent is INPUT or self.layers[parent].shared:
            return "task_node"
        return "branch"

    def active_layers(self) -> list[Layer]:
        """Hidden layers reachable from some head, by depth then id."""
        ids = {lid for p in self.paths.values() for lid in p}
        return sorted((self.layers[i] for i in ids), key=lambda l: (l.depth, l.id))

    def depth_partition(self) -> list[list[tuple[str, ...]]]:
        """Per depth, the task groups sharing one layer (in task order)."""
        rows = []
        for d in range(self.depth):
            seen: dict[int, list[str]] = {}
            for t in self.tasks:
                seen.setdefault(self.paths[t][d], []).append(t)
            rows.append([tuple(v) for v in seen.values()])
        return rows

    def trainable_layers(self) -> list[Layer]:
        return self.active_layers() + [self.heads[t] for t in self.tasks]

    def check(self) -> None:
        """Raise ContractError unless the tree invariants hold."""
        for t in self.tasks:
            path = self.paths[t]
            if len(path) != self.depth:
                raise ContractError(f"task {t}: path has {len(path)} layers, expected {self.depth}")
            prev = INPUT
            for d, lid in enumerate(path):
                layer = self.layers.get(lid)
                if layer is None:
                    raise ContractError(f"task {t}: dangling layer id {lid}")
                if layer.depth != d or layer.parent != prev or t not in layer.owners:
                    raise ContractError(f"task {t}: inconsistent layer {lid} at depth {d}")
                prev = lid
            head = self.heads[t]
            if head.parent != prev:
                raise ContractError(f"task {t}: head is not attached to the path end")
        for layer in self.active_layers():
            users = tuple(t for t in self.tasks if layer.id in self.paths[t])
            if users != layer.owners:
                raise ContractError(f"layer {layer.id}: owners {layer.owners} but used by {users}")

    # --- evaluation ------------------------------------------------------------

    def forward(self, x, include_pending: bool = False) -> ForwardResult:
        """Evaluate every task; shared layers run once per call."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"batch must be (N, {self.input_dim}), got {x.shape}")
        acts: dict[int, Tensor] = {}

        def run(layer: Layer) -> Tensor:
            if layer.id in acts:
                return acts[layer.id]
            inp = x if layer.parent is INPUT else run(self.layers[layer.parent])
            self.calls[layer.id] += 1
            out = layer(inp)
            acts[layer.id] = out
            return out

        outputs = {}
        for t in self.tasks:
            last = self.layers[self.paths[t][-1]]
            outputs[t] = self.heads[t](run(last))
        if include_pending:
            for gid in sorted(self.pending):
                run(self.layers[gid])
        feats = {t: acts[node.id] for t, node in self.task_nodes().items()}
        return ForwardResult(outputs, acts, feats)

    # --- costs -----------------------------------------------------------------

    def cost(self) -> FlopReport:
        layers = self.active_layers() + list(self.heads.values())
        return FlopReport(
            parameter_count=sum(l.n_params for l in layers),
            flops_per_sample=sum(l.flops for l in layers),
        )

    def parameter_count(self) -> int:
        return self.cost().parameter_count


def _init_affine(rng: np.random.Generator, c_in: int, c_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(c_in)
    w = rng.uniform(-bound, bound, size=(c_out, c_in))
    b = rng.uniform(-bound, bound, size=c_out)
    return w, b


def _fresh_adam(layer: Layer, hyper: dict) -> None:
    layer.adam = {n: AdamState.fresh(p.shape, **hyper) for n, p in layer.params().items()}


def init_from_tasks(
    tasks: Sequence[str],
    widths: Sequence[int],
    seed: int = 0,
    *,
    input_dim: int,
    out_dims: int | dict = 1,
    adam_hyper: dict | None = None,
) -> ArchGraph:
    """Disjoint per-task chains, all drawn from the same seed-derived weights."""
    tasks = list(tasks)
    if not tasks:
        raise ContractError("at least one task is required")
    if len(set(tasks)) != len(tasks):
        raise ContractError(f"duplicate task names in {tasks}")
    if not widths or any(w < 1 for w in widths):
        raise ContractError(f"widths must be a non-empty list of positive ints, got {widths}")
    if isinstance(out_dims, int):
        out_dims = {t: out_dims for t in tasks}
    g = ArchGraph(tasks, input_dim, widths, out_dims, adam_hyper)

    rng = np.random.default_rng(seed)
    shared_init = []
    c_in = input_dim
    for w in widths:
        shared_init.append(_init_affine(rng, c_in, w))
        c_in = w

    for t in tasks:
        prev = INPUT
        path = []
        for d, (w0, b0) in enumerate(shared_init):
            layer = Layer(g._new_id(), d, (t,), prev, Tensor(w0, True), Tensor(b0, True))
            _fresh_adam(layer, g.adam_hyper)
            g.layers[layer.id] = layer
            path.append(layer.id)
            prev = layer.id
        g.paths[t] = path
        # heads with equal output width get equal weights too
        hw, hb = _init_affine(np.random.default_rng([seed, 1, out_dims[t]]), c_in, out_dims[t])
        head = Layer(g._new_id(), len(widths), (t,), prev, Tensor(hw, True), Tensor(hb, True), "linear")
        _fresh_adam(head, g.adam_hyper)
        g.heads[t] = head
    return g


# --- structural surgery -------------------------------------------------------------


def fusible_sets(g: ArchGraph) -> tuple[list[tuple[str, ...]], list[str]]:
    """Current task nodes bucketed by parent.

    Returns ``(candidates, singletons)``: buckets of two or more tasks whose
    task nodes share a parent, and tasks whose task node is alone.
    """
    buckets: dict = defaultdict(list)
    for t, node in g.task_nodes().items():
        buckets[(node.depth, -1 if node.parent is INPUT else node.parent)].append(t)
    candidates, singletons = [], []
    for key in sorted(buckets):
        members = buckets[key]
        if len(members) >= 2:
            candidates.append(tuple(members))
        else:
            singletons.extend(members)
    return candidates, singletons


def _mean_adam(states: list[AdamState]) -> AdamState:
    return replace(
        states[0],
        m=sum(s.m for s in states) / len(states),
        v=sum(s.v for s in states) / len(states),
        t=int(np.floor(sum(s.t for s in states) / len(states))),
    )


def create_group_node(g: ArchGraph, members: Sequence[str]) -> int:
    """Add a detached layer whose parameters and Adam state average the members' task nodes.

    The new layer is pending (evaluated only on request) until
    :func:`remove_task_nodes` splices it into the member paths.
    """
    members = tuple(t for t in g.tasks if t in set(members))
    if len(members) < 2:
        raise ContractError(f"a group node needs at least two member tasks, got {members}")
    nodes = [g.task_node(t) for t in members]
    if any(n is None for n in nodes):
        raise ContractError(f"some of {members} have no task node left")
    parents = {n.parent for n in nodes}
    shapes = {(n.weight.shape, n.bias.shape) for n in nodes}
    if len(parents) != 1 or len({n.depth for n in nodes}) != 1:
        raise ContractError(f"task nodes of {members} do not share a parent")
    if len(shapes) != 1:
        raise ContractError(f"task nodes of {members} have differing shapes {shapes}")

    k = len(nodes)
    weight = sum(n.weight.data for n in nodes) / k
    bias = sum(n.bias.data for n in nodes) / k
    layer = Layer(
        g._new_id(),
        nodes[0].depth,
        members,
        nodes[0].parent,
        Tensor(weight, True),
        Tensor(bias, True),
        nodes[0].activation,
    )
    layer.adam = {name: _mean_adam([n.adam[name] for n in nodes]) for name in ("weight", "bias")}
    g.layers[layer.id] = layer
    g.pending.add(layer.id)
    return layer.id


def remove_task_nodes(g: ArchGraph, members: Sequence[str], group_id: int) -> None:
    """Drop the members' task nodes and re-parent their successors onto the group node."""
    if group_id not in g.pending:
        raise ContractError(f"layer {group_id} is not a pending group node")
    group = g.layers[group_id]
    members = tuple(t for t in g.tasks if t in set(members))
    if members != group.owners:
        raise ContractError(f"group {group_id} was built from {group.owners}, not {members}")
    d = group.depth
    for t in members:
        node = g.task_node(t)
        if node is None or node.depth != d or node.parent != group.parent:
            raise ContractError(f"task {t} has no task node matching group {group_id}")
        g.paths[t][d] = group_id
        if d + 1 < g.depth:
            g.layers[g.paths[t][d + 1]].parent = group_id
        else:
            g.heads[t].parent = group_id
        del g.layers[node.id]
    g.pending.discard(group_id)
    g.check()


def fuse_all(g: ArchGraph) -> None:
    """Fuse every candidate set at every depth: the fully shared topology."""
    while True:
        candidates, _ = fusible_sets(g)
        if not candidates:
            return
        for members in candidates:
            gid = create_group_node(g, members)
            remove_task_nodes(g, members, gid)


def one_net(tasks, widths, seed=0, **kwargs) -> ArchGraph:
    g = init_from_tasks(tasks, widths, seed, **kwargs)
    fuse_all(g)
    return g


# --- persistence ---------------------------------------------------------------------


def _b64(a: np.ndarray) -> dict:
    raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(raw).decode("ascii")}


def _unb64(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def _layer_json(layer: Layer) -> dict:
    return {
        "id": layer.id,
        "depth": layer.depth,
        "owners": list(layer.owners),
        "parent": layer.parent,
        "activation": layer.activation,
        "weight": _b64(layer.weight.data),
        "bias": _b64(layer.bias.data),
    }


def _adam_json(state: AdamState) -> dict:
    return {
        "m": _b64(state.m),
        "v": _b64(state.v),
        "t": state.t,
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "weight_decay": state.weight_decay,
    }


def serialize(g: ArchGraph) -> bytes:
    if g.pending:
        raise ContractError("cannot serialize while group nodes are pending")
    hidden = g.active_layers()
    doc = {
        "version": FORMAT_VERSION,
        "tasks": g.tasks,
        "input_dim": g.input_dim,
        "widths": g.widths,
        "out_dims": g.out_dims,
        "adam_hyper": g.adam_hyper,
        "next_id": g.next_id,
        "paths": g.paths,
        "nodes": [dict(_layer_json(l), kind=g.kind(l.id)) for l in hidden if g.kind(l.id) != "branch"],
        "branches": [
            {"owner": b.owner, "parent": b.parent, "layers": [_layer_json(g.layers[i]) for i in b.layers]}
            for b in g.branches()
        ],
        "heads": [dict(_layer_json(g.heads[t]), task=t) for t in g.tasks],
        "adam_states": {
            str(l.id): {n: _adam_json(s) for n, s in l.adam.items()}
            for l in hidden + [g.heads[t] for t in g.tasks]
        },
    }
    return json.dumps(doc, indent=1, sort_keys=True).encode("utf-8")


def deserialize(raw: bytes) -> ArchGraph:
    try:
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    except UnicodeDecodeError as exc:
        raise ParseError(f"not UTF-8: {exc.reason}", offset=exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", offset=exc.pos) from None
    try:
        if doc["version"] != FORMAT_VERSION:
            raise ParseError(f"unsupported format version {doc['version']!r}", offset=0)
        g = ArchGraph(doc["tasks"], doc["input_dim"], doc["widths"], doc["out_dims"], doc["adam_hyper"])
        g.next_id = doc["next_id"]
        states = doc["adam_states"]

        def build(d: dict) -> Layer:
            layer = Layer(
                d["id"],
                d["depth"],
                tuple(d["owners"]),
                d["parent"],
                Tensor(_unb64(d["weight"]), True),
                Tensor(_unb64(d["bias"]), True),
                d["activation"],
            )
            layer.adam = {
                n: AdamState(
                    m=_unb64(s["m"]),
                    v=_unb64(s["v"]),
                    t=s["t"],
                    lr=s["lr"],
                    beta1=s["beta1"],
                    beta2=s["beta2"],
                    eps=s["eps"],
                    weight_decay=s["weight_decay"],
                )
                for n, s in states[str(d["id"])].items()
            }
            return layer

        for d in doc["nodes"]:
            g.layers[d["id"]] = build(d)
        for b in doc["branches"]:
            for d in b["layers"]:
                g.layers[d["id"]] = build(d)
        for d in doc["heads"]:
            g.heads[d["task"]] = build(d)
        g.paths = {t: list(p) for t, p in doc["paths"].items()}
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed graph document: {exc!r}", offset=0) from None
    try:
        g.check()
    except ContractError as exc:
        raise ParseError(f"inconsistent graph: {exc}", offset=0) from None
    return g


def export_dot(g: ArchGraph) -> str:
    """Graphviz digraph; shared layers are boxes, private layers and heads ellipses."""
    lines = ["digraph mtsl {", "  rankdir=TB;"]
    for layer in g.active_layers():
        owner = "+".join(layer.owners)
        shape = "box" if layer.shared else "ellipse"
        lines.append(f'  n{layer.id} [label="L{layer.depth + 1}:{owner}", shape={shape}];')
    for t in g.tasks:
        h = g.heads[t]
        lines.append(f'  n{h.id} [label="head:{t}", shape=oval];')
    for layer in g.active_layers() + [g.heads[t] for t in g.tasks]:
        if layer.parent is not INPUT:
            lines.append(f"  n{layer.parent} -> n{layer.id};")
    lines.append("}")
    return "\n".join(lines) + "\n"
