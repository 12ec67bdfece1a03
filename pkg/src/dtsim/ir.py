"""Layer-level model IR.

A model is a graph of layers; each layer owns named-dimension tensors and
operators over them.  Operators carry no numerics - only shapes, a type tag
and a cost key - which is all the simulator needs.  ``derive_backward``
expands the forward graph with gradient operators, gradient tensors and one
optimizer-step operator per parameter, using a fixed per-operator-type rule
table instead of autodiff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import SchemaError

KIND_ACTIVATION = "activation"
KIND_PARAMETER = "parameter"
KIND_GRADIENT = "gradient"
KIND_OPT_STATE = "optimizer-state"

TENSOR_KINDS = (KIND_ACTIVATION, KIND_PARAMETER, KIND_GRADIENT, KIND_OPT_STATE)

# type tag -> (inputs of kind activation receive gradients, flops per output
# element scale used by the throughput fallback; None = table entry required).
# matmul/conv flops are 2 * prod(all op dims) (im2col view for conv).
OP_TYPES = {
    "matmul": {"diff_activations": True, "flops": "contraction", "gi_saves_acts": False},
    "conv": {"diff_activations": True, "flops": "contraction", "gi_saves_acts": False},
    "elementwise": {"diff_activations": True, "flops": "elementwise", "gi_saves_acts": True},
    "embedding-lookup": {"diff_activations": False, "flops": None, "gi_saves_acts": False},
    "optimizer-step": {"diff_activations": False, "flops": "optimizer", "gi_saves_acts": False},
}

# Optimizer state bytes per parameter byte (momentum + variance by default).
DEFAULT_OPT_STATE_MULTIPLIER = 2


@dataclass(frozen=True)
class Dim:
    label: str
    extent: int


@dataclass
class TensorSpec:
    id: str
    dims: tuple[Dim, ...]
    elem_bytes: int
    kind: str
    layer: str
    producers: list[str] = field(default_factory=list)
    consumers: list[str] = field(default_factory=list)
    grad_of: str | None = None  # set on gradient tensors

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(d.label for d in self.dims)

    @property
    def extents(self) -> tuple[int, ...]:
        return tuple(d.extent for d in self.dims)

    def extent(self, label: str) -> int:
        for d in self.dims:
            if d.label == label:
                return d.extent
        raise KeyError(label)

    @property
    def nelements(self) -> int:
        n = 1
        for d in self.dims:
            n *= d.extent
        return n

    @property
    def nbytes(self) -> int:
        return self.nelements * self.elem_bytes


@dataclass
class OperatorSpec:
    id: str
    type: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    cost_key: str
    layer: str
    phase: str = "forward"  # forward | backward | optimizer
    exclude_dims: frozenset = frozenset()
    generates_dims: frozenset = frozenset()
    forward_partner: str | None = None  # backward ops: the forward op id
    # filled by ModelGraph._index(): ordered unique label -> extent
    dims: dict = field(default_factory=dict)

    @property
    def parallelizable_dims(self) -> tuple[str, ...]:
        return tuple(l for l in self.dims if l not in self.exclude_dims)

    def reduction_dims(self, g: "ModelGraph") -> tuple[str, ...]:
        out_labels = set()
        for t in self.outputs:
            out_labels.update(g.tensors[t].labels)
        return tuple(
            l for l in self.parallelizable_dims if l not in out_labels
        )


@dataclass
class LayerNode:
    name: str
    module_path: tuple[str, ...]
    forward_ops: list[str] = field(default_factory=list)
    backward_ops: list[str] = field(default_factory=list)
    tensors: list[str] = field(default_factory=list)


@dataclass
class ModelGraph:
    batch_size: int
    batch_dim: str
    layers: dict  # name -> LayerNode, insertion ordered
    tensors: dict  # id -> TensorSpec
    operators: dict  # id -> OperatorSpec
    has_backward: bool = False
    opt_state_multiplier: int = DEFAULT_OPT_STATE_MULTIPLIER

    def _index(self):
        """Recompute producer/consumer lists and per-op dim maps."""
        for t in self.tensors.values():
            t.producers = []
            t.consumers = []
        for op in self.operators.values():
            dims: dict = {}
            for tid in tuple(op.inputs) + tuple(op.outputs):
                t = self.tensors[tid]
                for d in t.dims:
                    if d.label in dims and dims[d.label] != d.extent:
                        raise SchemaError(
                            f"op {op.id}",
                            f"dim '{d.label}' has inconsistent extents "
                            f"{dims[d.label]} vs {d.extent}",
                        )
                    dims.setdefault(d.label, d.extent)
            op.dims = dims
            for tid in op.inputs:
                self.tensors[tid].consumers.append(op.id)
            for tid in op.outputs:
                self.tensors[tid].producers.append(op.id)

    def forward_ops(self):
        return [o for o in self.operators.values() if o.phase == "forward"]

    def topo_ops(self, phases=("forward", "backward", "optimizer")):
        """Operator ids in a deterministic topological order over data deps."""
        wanted = [o for o in self.operators.values() if o.phase in phases]
        pending = {o.id for o in wanted}
        ndeps = {}
        for op in wanted:
            n = 0
            for tid in op.inputs:
                n += sum(1 for p in self.tensors[tid].producers if p in pending)
            ndeps[op.id] = n
        order = []
        ready = [o.id for o in wanted if ndeps[o.id] == 0]
        while ready:
            oid = ready.pop(0)
            order.append(oid)
            for tid in self.operators[oid].outputs:
                for cid in self.tensors[tid].consumers:
                    if cid in ndeps:
                        ndeps[cid] -= 1
                        if ndeps[cid] == 0:
                            ready.append(cid)
        if len(order) != len(wanted):
            stuck = sorted(set(ndeps) - set(order))
            raise SchemaError("model", f"cyclic operator graph near {stuck[:5]}")
        return order

    def total_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors.values())

    def parameters(self):
        return [t for t in self.tensors.values() if t.kind == KIND_PARAMETER]

    def signature(self):
        """Content signature used to check derive_backward idempotence."""
        ops = tuple(
            (o.id, o.type, o.inputs, o.outputs, o.phase)
            for o in sorted(self.operators.values(), key=lambda o: o.id)
        )
        tens = tuple(
            (t.id, t.labels, t.extents, t.elem_bytes, t.kind)
            for t in sorted(self.tensors.values(), key=lambda t: t.id)
        )
        return ops, tens


def _require(obj, key, path, typ=None):
    if key not in obj:
        raise SchemaError(path, f"missing required field '{key}'")
    v = obj[key]
    if typ is not None and not isinstance(v, typ):
        raise SchemaError(f"{path}.{key}", f"expected {typ.__name__}")
    return v


def model_from_dict(obj, source="<dict>") -> ModelGraph:
    """Build and validate a forward-only ModelGraph from parsed JSON."""
    if not isinstance(obj, dict):
        raise SchemaError(source, "model document must be a JSON object")
    batch_size = _require(obj, "batch_size", source, int)
    if batch_size < 1:
        raise SchemaError(f"{source}.batch_size", "must be >= 1")
    batch_dim = obj.get("batch_dim", "b")
    layers_obj = _require(obj, "layers", source, list)
    if not layers_obj:
        raise SchemaError(f"{source}.layers", "empty model")

    g = ModelGraph(
        batch_size=batch_size,
        batch_dim=batch_dim,
        layers={},
        tensors={},
        operators={},
        opt_state_multiplier=obj.get(
            "opt_state_multiplier", DEFAULT_OPT_STATE_MULTIPLIER
        ),
    )

    for li, lobj in enumerate(layers_obj):
        lpath = f"layers[{li}]"
        name = _require(lobj, "name", lpath, str)
        if name in g.layers:
            raise SchemaError(f"{lpath}.name", f"duplicate layer '{name}'")
        module_path = tuple(lobj.get("module_path", []))
        layer = LayerNode(name=name, module_path=module_path)
        g.layers[name] = layer

        for ti, tobj in enumerate(lobj.get("tensors", [])):
            tpath = f"{lpath}.tensors[{ti}]"
            tname = _require(tobj, "name", tpath, str)
            if tname in g.tensors:
                raise SchemaError(f"{tpath}.name", f"duplicate tensor '{tname}'")
            dims = []
            seen = set()
            for di, dobj in enumerate(_require(tobj, "dims", tpath, list)):
                dpath = f"{tpath}.dims[{di}]"
                label = _require(dobj, "label", dpath, str)
                extent = _require(dobj, "extent", dpath, int)
                if extent < 1:
                    raise SchemaError(f"{dpath}.extent", "must be >= 1")
                if label in seen:
                    raise SchemaError(dpath, f"duplicate dim label '{label}'")
                if label == batch_dim and extent != batch_size:
                    raise SchemaError(
                        f"{dpath}.extent",
                        f"batch dim '{batch_dim}' extent {extent} != "
                        f"batch_size {batch_size}",
                    )
                seen.add(label)
                dims.append(Dim(label, extent))
            kind = _require(tobj, "kind", tpath, str)
            if kind not in TENSOR_KINDS:
                raise SchemaError(f"{tpath}.kind", f"unknown kind '{kind}'")
            elem_bytes = _require(tobj, "dtype_bytes", tpath, int)
            if elem_bytes < 1:
                raise SchemaError(f"{tpath}.dtype_bytes", "must be >= 1")
            g.tensors[tname] = TensorSpec(
                id=tname,
                dims=tuple(dims),
                elem_bytes=elem_bytes,
                kind=kind,
                layer=name,
            )
            layer.tensors.append(tname)

        for oi, oobj in enumerate(lobj.get("ops", [])):
            opath = f"{lpath}.ops[{oi}]"
            otype = _require(oobj, "type", opath, str)
            if otype not in OP_TYPES:
                raise SchemaError(f"{opath}.type", f"unknown operator type '{otype}'")
            oname = oobj.get("name") or f"op{oi}"
            oid = f"{name}.{oname}"
            if oid in g.operators:
                raise SchemaError(opath, f"duplicate operator '{oid}'")
            cost_key = _require(oobj, "cost_key", opath, str)
            op = OperatorSpec(
                id=oid,
                type=otype,
                inputs=tuple(_require(oobj, "inputs", opath, list)),
                outputs=tuple(_require(oobj, "outputs", opath, list)),
                cost_key=cost_key,
                layer=name,
                exclude_dims=frozenset(oobj.get("exclude_dims", [])),
                generates_dims=frozenset(oobj.get("generates_dims", [])),
            )
            g.operators[oid] = op
            layer.forward_ops.append(oid)

    # dangling references checked before indexing so the error names the path
    for op in g.operators.values():
        for tid in tuple(op.inputs) + tuple(op.outputs):
            if tid not in g.tensors:
                raise SchemaError(
                    f"op {op.id}", f"dangling tensor reference '{tid}'"
                )

    g._index()
    g.topo_ops()  # raises on cycles
    return g


def load_model(path) -> ModelGraph:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(str(path), f"invalid JSON: {e}") from e
    return model_from_dict(obj, source=str(path))


def _grad_id(tensor_id: str) -> str:
    return f"{tensor_id}.grad"


def derive_backward(g: ModelGraph) -> ModelGraph:
    """Return a new graph with backward and optimizer operators.

    Per forward operator: one grad-input op writing the gradients of its
    differentiable activation inputs, one grad-weight op writing parameter
    gradients.  Per parameter: one optimizer-step op and one optimizer-state
    tensor.  Terminal activations (nothing consumes them) receive a
    producer-less seed gradient so the backward graph is closed.
    Idempotent: any existing backward content is discarded and regenerated.
    """
    fwd_tensors = {
        t.id: replace(t, producers=[], consumers=[])
        for t in g.tensors.values()
        if t.kind in (KIND_ACTIVATION, KIND_PARAMETER)
    }
    out = ModelGraph(
        batch_size=g.batch_size,
        batch_dim=g.batch_dim,
        layers={
            name: LayerNode(
                name=name,
                module_path=l.module_path,
                forward_ops=list(l.forward_ops),
                tensors=[t for t in l.tensors if t in fwd_tensors],
            )
            for name, l in g.layers.items()
        },
        tensors=fwd_tensors,
        operators={
            o.id: replace(o, dims={})
            for o in g.operators.values()
            if o.phase == "forward"
        },
        has_backward=True,
        opt_state_multiplier=g.opt_state_multiplier,
    )
    out._index()

    def add_tensor(t: TensorSpec):
        out.tensors[t.id] = t
        out.layers[t.layer].tensors.append(t.id)

    # Gradient tensors: an activation gets one if some consumer differentiates
    # through it, or if it is terminal (seed gradient, stands in for the loss
    # gradient).  Activations consumed only as non-differentiable inputs
    # (embedding indices) get none.  Every parameter gets one.
    for t in sorted(out.tensors.values(), key=lambda t: t.id):
        if t.kind == KIND_ACTIVATION:
            diff_consumed = any(
                OP_TYPES[out.operators[c].type]["diff_activations"]
                for c in t.consumers
            )
            if diff_consumed or not t.consumers:
                add_tensor(
                    TensorSpec(
                        id=_grad_id(t.id),
                        dims=t.dims,
                        elem_bytes=t.elem_bytes,
                        kind=KIND_GRADIENT,
                        layer=t.layer,
                        grad_of=t.id,
                    )
                )
        elif t.kind == KIND_PARAMETER:
            add_tensor(
                TensorSpec(
                    id=_grad_id(t.id),
                    dims=t.dims,
                    elem_bytes=t.elem_bytes,
                    kind=KIND_GRADIENT,
                    layer=t.layer,
                    grad_of=t.id,
                )
            )
            add_tensor(
                TensorSpec(
                    id=f"{t.id}.optstate",
                    dims=t.dims,
                    elem_bytes=t.elem_bytes * out.opt_state_multiplier,
                    kind=KIND_OPT_STATE,
                    layer=t.layer,
                )
            )

    # Backward ops, in reverse forward topological order.  A backward op
    # reads the gradients of its forward op's outputs; when such a gradient
    # is a seed (terminal activation, nobody writes it) the backward op also
    # reads the activation itself, which pins backward after forward the way
    # a loss computation would.
    grads_written = set()
    for oid in reversed(out.topo_ops(phases=("forward",))):
        op = out.operators[oid]
        rules = OP_TYPES[op.type]
        out_grads = tuple(
            _grad_id(t) for t in op.outputs if _grad_id(t) in out.tensors
        )
        if not out_grads:
            continue  # nothing differentiates through this op
        seed_reads = tuple(
            t
            for t in op.outputs
            if _grad_id(t) in out.tensors and _grad_id(t) not in grads_written
        )
        act_inputs = [
            t for t in op.inputs if out.tensors[t].kind == KIND_ACTIVATION
        ]
        par_inputs = [
            t for t in op.inputs if out.tensors[t].kind == KIND_PARAMETER
        ]
        layer = out.layers[op.layer]

        def new_labels(inputs, outputs):
            have = set()
            for tid in inputs:
                have.update(out.tensors[tid].labels)
            made = set()
            for tid in outputs:
                made.update(out.tensors[tid].labels)
            return frozenset(made - have)

        if act_inputs and rules["diff_activations"]:
            saved = tuple(act_inputs) if rules["gi_saves_acts"] else ()
            gi_in = out_grads + seed_reads + tuple(par_inputs) + saved
            gi_out = tuple(_grad_id(t) for t in act_inputs)
            gi = OperatorSpec(
                id=f"{op.id}.gi",
                type=op.type,
                inputs=gi_in,
                outputs=gi_out,
                cost_key=f"{op.cost_key}.gi",
                layer=op.layer,
                phase="backward",
                exclude_dims=op.exclude_dims,
                generates_dims=new_labels(gi_in, gi_out),
                forward_partner=op.id,
            )
            out.operators[gi.id] = gi
            layer.backward_ops.append(gi.id)
            grads_written.update(gi.outputs)
        if par_inputs:
            gw_in = out_grads + seed_reads + tuple(act_inputs)
            gw_out = tuple(_grad_id(t) for t in par_inputs)
            gw = OperatorSpec(
                id=f"{op.id}.gw",
                type=op.type,
                inputs=gw_in,
                outputs=gw_out,
                cost_key=f"{op.cost_key}.gw",
                layer=op.layer,
                phase="backward",
                exclude_dims=op.exclude_dims,
                generates_dims=new_labels(gw_in, gw_out),
                forward_partner=op.id,
            )
            out.operators[gw.id] = gw
            layer.backward_ops.append(gw.id)
            grads_written.update(gw.outputs)

    # one optimizer step per parameter
    for t in sorted(g.tensors.values(), key=lambda t: t.id):
        if t.kind != KIND_PARAMETER:
            continue
        step = OperatorSpec(
            id=f"optim.{t.id}",
            type="optimizer-step",
            inputs=(t.id, _grad_id(t.id), f"{t.id}.optstate"),
            outputs=(),
            cost_key="optim_step",
            layer=t.layer,
            phase="optimizer",
        )
        out.operators[step.id] = step
        out.layers[t.layer].backward_ops.append(step.id)

    out._index()
    return out


def validate_graph(g: ModelGraph):
    """Return one diagnostic string per invariant violation (empty = valid)."""
    diags = []
    for t in g.tensors.values():
        for d in t.dims:
            if d.extent < 1:
                diags.append(f"tensor {t.id}: dim '{d.label}' extent < 1")
        if len(set(t.labels)) != len(t.labels):
            diags.append(f"tensor {t.id}: duplicate dim labels")
        if t.layer not in g.layers:
            diags.append(f"tensor {t.id}: dangling owner layer '{t.layer}'")
        for cid in t.consumers:
            if cid not in g.operators:
                diags.append(f"tensor {t.id}: dangling consumer '{cid}'")
    for op in g.operators.values():
        in_labels = set()
        for tid in op.inputs:
            if tid in g.tensors:
                in_labels.update(g.tensors[tid].labels)
        for tid in op.outputs:
            if tid not in g.tensors:
                diags.append(f"op {op.id}: dangling output '{tid}'")
                continue
            for l in g.tensors[tid].labels:
                if l not in in_labels and l not in op.generates_dims:
                    diags.append(
                        f"op {op.id}: output dim '{l}' absent from every "
                        f"input and not declared in generates_dims"
                    )
    if g.has_backward:
        for layer in g.layers.values():
            for oid in layer.forward_ops:
                op = g.operators[oid]
                par_inputs = [
                    t
                    for t in op.inputs
                    if g.tensors[t].kind == KIND_PARAMETER
                ]
                if par_inputs and f"{op.id}.gw" not in g.operators:
                    diags.append(
                        f"op {op.id}: learnable inputs but no grad-weight op"
                    )
    return diags
