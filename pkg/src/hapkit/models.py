"""Small feed-forward model family, parameter groups and cost accounting.

A model is an immutable :class:`ModelInstance`: a :class:`ModelSpec` (ordered
layer descriptors plus a loss kind), a tuple of float64 parameter arrays and
the list of prunable :class:`ParamGroup` units derived from the spec.

Parameter layout per layer, in declaration order:

=================  ==========================================================
Dense              W (in, out), b (out,)
Conv3x3            W (c_out, c_in, 3, 3), b (c_out,)
Conv1x1            W (c_out, c_in, 1, 1), b (c_out,)
HybridConv         W3 (c_keep, c_in, 3, 3), b3, W1 (c_implant, c_in, 1, 1), b1
AttentionBlock     Wq, Wk, Wv (d_model, n_heads*d_head), Wo (n_heads*d_head, d_model)
=================  ==========================================================
"""

from dataclasses import dataclass, field, fields
from math import prod, sqrt

import numpy as np

from . import autodiff as ad
from .errors import PlanError, ShapeError, SpecError

OUT_CHANNEL = "out_channel"
HEAD = "head"


# -- layer descriptors -----------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    tag = "dense"


@dataclass(frozen=True)
class Conv3x3:
    c_in: int
    c_out: int
    h: int
    w: int
    tag = "conv3x3"


@dataclass(frozen=True)
class Conv1x1:
    c_in: int
    c_out: int
    tag = "conv1x1"


@dataclass(frozen=True)
class HybridConv:
    """3x3 conv whose output channels flagged in ``implant_mask`` are 1x1.

    Output channel order is the original order; the mask maps each output
    position to its filter bank.
    """

    c_in: int
    implant_mask: tuple
    h: int
    w: int
    tag = "hybrid_conv"

    def __post_init__(self):
        object.__setattr__(self, "implant_mask", tuple(bool(m) for m in self.implant_mask))

    @property
    def c_out(self):
        return len(self.implant_mask)

    @property
    def c_implant(self):
        return sum(self.implant_mask)

    @property
    def c_keep(self):
        return self.c_out - self.c_implant


@dataclass(frozen=True)
class AttentionBlock:
    """Bias-free multi-head self-attention over (T, d_model) token sequences."""

    d_model: int
    n_heads: int
    d_head: int = None
    tag = "attention"

    @property
    def head_dim(self):
        return self.d_head if self.d_head is not None else self.d_model // self.n_heads


@dataclass(frozen=True)
class ReLU:
    tag = "relu"


@dataclass(frozen=True)
class AvgPool:
    k: int
    tag = "avgpool"


@dataclass(frozen=True)
class Softmax:
    tag = "softmax"


LAYER_TYPES = {cls.tag: cls for cls in (Dense, Conv3x3, Conv1x1, HybridConv, AttentionBlock, ReLU, AvgPool, Softmax)}
PARAMETRIC = (Dense, Conv3x3, Conv1x1, HybridConv, AttentionBlock)
CONV_LIKE = (Conv3x3, Conv1x1, HybridConv)
LOSSES = ("cross_entropy", "mse")


def layer_to_dict(layer):
    d = {"type": layer.tag}
    for f in fields(layer):
        value = getattr(layer, f.name)
        if value is not None:
            d[f.name] = list(value) if isinstance(value, tuple) else value
    return d


def layer_from_dict(d):
    d = dict(d)
    try:
        cls = LAYER_TYPES[d.pop("type")]
    except KeyError as exc:
        raise SpecError(f"unknown or missing layer type in {d!r}") from exc
    try:
        return cls(**d)
    except TypeError as exc:
        raise SpecError(f"bad fields for {cls.tag}: {exc}") from exc


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layers, loss kind and (optionally) the per-example input shape.

    When ``input_shape`` is omitted it is inferred from the first layer.
    """

    layers: tuple
    loss: str = "cross_entropy"
    input_shape: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_shape is not None:
            object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        validate_spec(self)

    @property
    def example_shape(self):
        return self.input_shape if self.input_shape is not None else _default_input_shape(self.layers)

    def to_dict(self):
        d = {"loss": self.loss, "layers": [layer_to_dict(layer) for layer in self.layers]}
        if self.input_shape is not None:
            d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            layers = [layer_from_dict(x) for x in d["layers"]]
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed model spec: {exc}") from exc
        return cls(tuple(layers), d.get("loss", "cross_entropy"), d.get("input_shape"))


def _default_input_shape(layers):
    if not layers:
        raise SpecError("model spec has no layers")
    first = layers[0]
    if isinstance(first, (Conv3x3, HybridConv)):
        return (first.c_in, first.h, first.w)
    if isinstance(first, Dense):
        return (first.in_features,)
    if isinstance(first, AttentionBlock):
        for layer in layers:
            if isinstance(layer, Dense):
                if layer.in_features % first.d_model:
                    raise SpecError("dense input is not a whole number of tokens")
                return (layer.in_features // first.d_model, first.d_model)
    raise SpecError("cannot infer input shape; set ModelSpec.input_shape")


def infer_shapes(spec, input_shape=None):
    """Per-example output shape of every layer; raises on incompatibility."""
    shape = tuple(input_shape) if input_shape is not None else spec.example_shape
    out = []
    for i, layer in enumerate(spec.layers):
        shape = _layer_out_shape(i, layer, shape)
        out.append(shape)
    return out


def _layer_out_shape(i, layer, shape):
    def fail(msg):
        raise ShapeError(f"layer {i} ({layer.tag}): {msg}; input shape {shape}")

    if isinstance(layer, Dense):
        if prod(shape) != layer.in_features:
            fail(f"expects {layer.in_features} input features")
        return (layer.out_features,)
    if isinstance(layer, (Conv3x3, HybridConv)):
        if shape != (layer.c_in, layer.h, layer.w):
            fail(f"expects input ({layer.c_in}, {layer.h}, {layer.w})")
        return (layer.c_out, layer.h, layer.w)
    if isinstance(layer, Conv1x1):
        if len(shape) != 3 or shape[0] != layer.c_in:
            fail(f"expects {layer.c_in} input channels")
        return (layer.c_out,) + shape[1:]
    if isinstance(layer, AttentionBlock):
        if len(shape) != 2 or shape[1] != layer.d_model:
            fail(f"expects (T, {layer.d_model}) tokens")
        return shape
    if isinstance(layer, AvgPool):
        if len(shape) != 3 or shape[1] % layer.k or shape[2] % layer.k:
            fail(f"pool window {layer.k} does not tile the input")
        return (shape[0], shape[1] // layer.k, shape[2] // layer.k)
    return shape


def validate_spec(spec):
    if spec.loss not in LOSSES:
        raise SpecError(f"unknown loss {spec.loss!r}; expected one of {LOSSES}")
    if not spec.layers:
        raise SpecError("model spec has no layers")
    for i, layer in enumerate(spec.layers):
        if type(layer) not in LAYER_TYPES.values():
            raise SpecError(f"layer {i}: unsupported descriptor {layer!r}")
        for f in fields(layer):
            v = getattr(layer, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v <= 0:
                raise SpecError(f"layer {i} ({layer.tag}): {f.name} must be positive")
        if isinstance(layer, AttentionBlock) and layer.d_head is None and layer.d_model % layer.n_heads:
            raise SpecError(f"layer {i}: n_heads={layer.n_heads} does not divide d_model={layer.d_model}")
        if isinstance(layer, HybridConv) and (layer.c_keep == 0 or layer.c_implant == 0):
            raise SpecError(f"layer {i}: hybrid conv needs both 3x3 and 1x1 channels")
        if isinstance(layer, Softmax) and i != len(spec.layers) - 1:
            raise SpecError("softmax is only supported as the final layer")
    try:
        infer_shapes(spec)
    except ShapeError as exc:
        raise SpecError(str(exc)) from exc


def param_shapes(layer):
    if isinstance(layer, Dense):
        return [(layer.in_features, layer.out_features), (layer.out_features,)]
    if isinstance(layer, Conv3x3):
        return [(layer.c_out, layer.c_in, 3, 3), (layer.c_out,)]
    if isinstance(layer, Conv1x1):
        return [(layer.c_out, layer.c_in, 1, 1), (layer.c_out,)]
    if isinstance(layer, HybridConv):
        return [
            (layer.c_keep, layer.c_in, 3, 3),
            (layer.c_keep,),
            (layer.c_implant, layer.c_in, 1, 1),
            (layer.c_implant,),
        ]
    if isinstance(layer, AttentionBlock):
        inner = layer.n_heads * layer.head_dim
        return [(layer.d_model, inner)] * 3 + [(inner, layer.d_model)]
    return []


def param_slots(spec):
    """``[(first_param_index, shapes)]`` for each layer."""
    slots, k = [], 0
    for layer in spec.layers:
        shapes = param_shapes(layer)
        slots.append((k, shapes))
        k += len(shapes)
    return slots


# -- parameter groups ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ParamGroup:
    """One prunable unit: an output channel (filters + bias) or a head.

    ``members`` holds ``(param_index, flat_indices)`` pairs.
    """

    group_id: int
    layer: int
    index: int
    kind: str
    members: tuple
    prunable: bool = True

    @property
    def p(self):
        return int(sum(len(ix) for _, ix in self.members))

    def flat_indices(self, offsets):
        """Indices into the concatenated parameter vector."""
        return np.concatenate([offsets[k] + ix for k, ix in self.members])

    def values(self, params):
        return np.concatenate([np.asarray(params[k]).ravel()[ix] for k, ix in self.members])

    def sq_norm(self, params):
        v = self.values(params)
        return float(v @ v)

    def __eq__(self, other):
        if not isinstance(other, ParamGroup):
            return NotImplemented
        return (
            (self.group_id, self.layer, self.index, self.kind, self.prunable)
            == (other.group_id, other.layer, other.index, other.kind, other.prunable)
            and len(self.members) == len(other.members)
            and all(a == c and np.array_equal(b, d) for (a, b), (c, d) in zip(self.members, other.members))
        )

    __hash__ = None


def _channel_members(base, shapes, bank_rows):
    """Members of one output channel given ``[(param_offset, row)]`` per bank."""
    members = []
    for k, row in bank_rows:
        per = prod(shapes[k - base][1:])
        members.append((k, np.arange(row * per, (row + 1) * per)))
        members.append((k + 1, np.array([row])))
    return members


def enumerate_groups(spec):
    slots = param_slots(spec)
    last_parametric = max(i for i, layer in enumerate(spec.layers) if isinstance(layer, PARAMETRIC))
    groups = []
    for li, layer in enumerate(spec.layers):
        base, shapes = slots[li]
        prunable = li != last_parametric
        units = []
        if isinstance(layer, Dense):
            n_in, n_out = layer.in_features, layer.out_features
            for j in range(n_out):
                units.append([(base, np.arange(n_in) * n_out + j), (base + 1, np.array([j]))])
        elif isinstance(layer, (Conv3x3, Conv1x1)):
            units = [_channel_members(base, shapes, [(base, o)]) for o in range(layer.c_out)]
        elif isinstance(layer, HybridConv):
            kept = implanted = 0
            for m in layer.implant_mask:
                if m:
                    units.append(_channel_members(base, shapes, [(base + 2, implanted)]))
                    implanted += 1
                else:
                    units.append(_channel_members(base, shapes, [(base, kept)]))
                    kept += 1
        elif isinstance(layer, AttentionBlock):
            dh, inner = layer.head_dim, layer.n_heads * layer.head_dim
            rows = np.arange(layer.d_model)[:, None] * inner
            for h in range(layer.n_heads):
                cols = np.arange(h * dh, (h + 1) * dh)
                qkv = (rows + cols).ravel()
                out = np.arange(h * dh * layer.d_model, (h + 1) * dh * layer.d_model)
                units.append([(base, qkv), (base + 1, qkv), (base + 2, qkv), (base + 3, out)])
            prunable = True  # head removal never changes the block's output width
        kind = HEAD if isinstance(layer, AttentionBlock) else OUT_CHANNEL
        for j, members in enumerate(units):
            groups.append(ParamGroup(len(groups), li, j, kind, tuple(members), prunable))
    return tuple(groups)


# -- instances -------------------------------------------------------------


def apply_layers(spec, params, x):
    """Build the forward graph; ``params`` are graph nodes, ``x`` a node.

    Image activations run channels-last internally and are returned to
    (N, C, H, W) before flattening or output.
    """
    slots = param_slots(spec)
    nhwc = False
    for li, layer in enumerate(spec.layers):
        base, _ = slots[li]
        p = params[base:base + len(param_shapes(layer))]
        if isinstance(layer, (Conv3x3, Conv1x1, HybridConv, AvgPool)) and not nhwc:
            x, nhwc = ad.transpose(x, (0, 2, 3, 1)), True
        elif isinstance(layer, (Dense, AttentionBlock, Softmax)) and nhwc:
            x, nhwc = ad.transpose(x, (0, 3, 1, 2)), False
        if isinstance(layer, Dense):
            if x.data.ndim > 2:
                x = ad.reshape(x, (x.shape[0], -1))
            x = ad.add(ad.matmul(x, p[0]), p[1])
        elif isinstance(layer, (Conv3x3, Conv1x1)):
            x = ad.conv2d_nhwc(x, p[0], p[1])
        elif isinstance(layer, HybridConv):
            spatial = ad.conv2d_nhwc(x, p[0], p[1])
            pointwise = ad.conv2d_nhwc(x, p[2], p[3])
            order, kept, implanted = [], 0, 0
            for m in layer.implant_mask:
                if m:
                    order.append(layer.c_keep + implanted)
                    implanted += 1
                else:
                    order.append(kept)
                    kept += 1
            x = ad.take(ad.concat([spatial, pointwise], axis=3), order, axis=3)
        elif isinstance(layer, AttentionBlock):
            x = _attention(x, p, layer)
        elif isinstance(layer, ReLU):
            x = ad.relu(x)
        elif isinstance(layer, AvgPool):
            x = ad.avg_pool(x, layer.k, channels_last=True)
        elif isinstance(layer, Softmax):
            x = ad.softmax(x, axis=-1)
    if nhwc:
        x = ad.transpose(x, (0, 3, 1, 2))
    return x


def _attention(x, p, layer):
    n, t, _ = x.shape
    h, dh = layer.n_heads, layer.head_dim

    def heads(w):
        return ad.transpose(ad.reshape(ad.matmul(x, w), (n, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads(p[0]), heads(p[1]), heads(p[2])
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, t, h * dh))
    return ad.matmul(ctx, p[3])


def _init_params(spec, rng):
    params = []
    for layer in spec.layers:
        for shape in param_shapes(layer):
            if len(shape) == 1:
                params.append(np.zeros(shape))
                continue
            if isinstance(layer, Dense):
                fan_in = shape[0]
            elif isinstance(layer, AttentionBlock):
                fan_in = shape[0]
            else:
                fan_in = prod(shape[1:])
            bound = sqrt(6.0 / fan_in)
            if isinstance(layer, AttentionBlock):
                bound = sqrt(3.0 / fan_in)
            params.append(rng.uniform(-bound, bound, size=shape))
    return params


@dataclass(frozen=True, eq=False)
class ModelInstance:
    spec: ModelSpec
    params: tuple
    groups: tuple = field(default=None)

    def __post_init__(self):
        params = tuple(np.asarray(p, dtype=np.float64) for p in self.params)
        expected = [s for layer in self.spec.layers for s in param_shapes(layer)]
        got = [p.shape for p in params]
        if got != expected:
            raise ShapeError(f"parameter shapes {got} do not match spec {expected}")
        object.__setattr__(self, "params", params)
        if self.groups is None:
            object.__setattr__(self, "groups", enumerate_groups(self.spec))

    def __eq__(self, other):
        if not isinstance(other, ModelInstance):
            return NotImplemented
        return self.spec == other.spec and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.params, other.params)
        )

    __hash__ = None

    @property
    def n_params(self):
        return int(sum(p.size for p in self.params))

    @property
    def prunable_groups(self):
        return tuple(g for g in self.groups if g.prunable)

    @property
    def offsets(self):
        return np.cumsum([0] + [p.size for p in self.params])[:-1]

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.params])

    def with_params(self, params):
        return ModelInstance(self.spec, tuple(np.array(p, dtype=np.float64) for p in params), self.groups)

    def unflatten(self, vector):
        out, k = [], 0
        for p in self.params:
            out.append(np.asarray(vector[k:k + p.size]).reshape(p.shape))
            k += p.size
        return out

    @property
    def loss_fn(self):
        """Graph builder ``fn(param_nodes, inputs, targets) -> loss`` for autodiff."""
        spec = self.spec
        layers = spec.layers
        head = ModelSpec(layers[:-1], spec.loss, spec.example_shape) if (
            spec.loss == "cross_entropy" and isinstance(layers[-1], Softmax)
        ) else spec

        def fn(params, inputs, targets):
            out = apply_layers(head, params, ad.constant(inputs))
            if spec.loss == "cross_entropy":
                return ad.cross_entropy(out, targets)
            return ad.mse(out, targets)

        fn.param_shapes = [p.shape for p in self.params]
        return fn

    def output(self, X, batch_size=1024):
        """Raw network output for ``X`` (no graph recorded)."""
        X = np.asarray(X, dtype=np.float64)
        outs = []
        with ad.no_grad():
            params = [ad.constant(p) for p in self.params]
            for i in range(0, len(X), batch_size):
                outs.append(apply_layers(self.spec, params, ad.constant(X[i:i + batch_size])).data)
        return np.concatenate(outs)

    def predict(self, X):
        return np.argmax(self.output(X), axis=1)

    def accuracy(self, X, y):
        return float(np.mean(self.predict(X) == np.asarray(y)))

    def loss(self, X, targets):
        with ad.no_grad():
            params = [ad.constant(p) for p in self.params]
            return float(self.loss_fn(params, np.asarray(X, dtype=np.float64), targets).data)


def build(spec, seed=0):
    """Instantiate ``spec`` with He-uniform weights and zero biases."""
    if not isinstance(spec, ModelSpec):
        raise SpecError(f"expected ModelSpec, got {type(spec).__name__}")
    rng = np.random.default_rng(seed)
    return ModelInstance(spec, tuple(_init_params(spec, rng)))


# -- cost accounting -------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    total_params: int
    total_flops: int
    layers: tuple  # (layer_index, tag, params, flops)

    def __post_init__(self):
        assert self.total_params == sum(r[2] for r in self.layers)
        assert self.total_flops == sum(r[3] for r in self.layers)


def layer_cost(layer, in_shape):
    """(params, MACs) of one layer for a single example of ``in_shape``."""
    if isinstance(layer, Dense):
        return layer.in_features * layer.out_features + layer.out_features, layer.in_features * layer.out_features
    if isinstance(layer, Conv3x3):
        hw = in_shape[1] * in_shape[2]
        w = layer.c_out * layer.c_in * 9
        return w + layer.c_out, w * hw
    if isinstance(layer, Conv1x1):
        hw = in_shape[1] * in_shape[2]
        w = layer.c_out * layer.c_in
        return w + layer.c_out, w * hw
    if isinstance(layer, HybridConv):
        hw = in_shape[1] * in_shape[2]
        w = layer.c_keep * layer.c_in * 9 + layer.c_implant * layer.c_in
        return w + layer.c_out, w * hw
    if isinstance(layer, AttentionBlock):
        t = in_shape[0]
        inner = layer.n_heads * layer.head_dim
        params = 4 * layer.d_model * inner
        flops = 4 * t * layer.d_model * inner + 2 * layer.n_heads * t * t * layer.head_dim
        return params, flops
    return 0, 0


def cost(model, input_shape=None):
    """Parameter count and multiply-accumulates for one example."""
    spec = model.spec if isinstance(model, ModelInstance) else model
    shape = tuple(input_shape) if input_shape is not None else spec.example_shape
    outs = infer_shapes(spec, shape)
    rows, ins = [], [shape] + outs[:-1]
    for i, (layer, s) in enumerate(zip(spec.layers, ins)):
        params, flops = layer_cost(layer, s)
        rows.append((i, layer.tag, int(params), int(flops)))
    return CostReport(sum(r[2] for r in rows), sum(r[3] for r in rows), tuple(rows))


# -- structural rebuild ----------------------------------------------------

KEEP, PRUNE, IMPLANT = "keep", "prune", "implant"


def _decisions_of(plan):
    return plan if isinstance(plan, dict) else plan.decisions


def restructure(model, decisions, implant_init="center"):
    """Apply per-group decisions (``keep``/``prune``/``implant``).

    Pruned output units are removed together with the matching input slice of
    the next parametric layer.  Implanted 3x3 channels become 1x1 channels
    initialised from the original filter (``center`` tap or ``dc`` kernel sum).
    """
    spec = model.spec
    groups = {g.group_id: g for g in model.groups}
    for gid, d in decisions.items():
        if gid not in groups:
            raise PlanError(f"plan references unknown group {gid}")
        if d not in (KEEP, PRUNE, IMPLANT):
            raise PlanError(f"unknown decision {d!r} for group {gid}")
        if d != KEEP and not groups[gid].prunable:
            raise PlanError(f"group {gid} feeds the model output and cannot be removed")
    per_layer = {}
    for gid, d in decisions.items():
        g = groups[gid]
        per_layer.setdefault(g.layer, {})[g.index] = d

    slots = param_slots(spec)
    in_shapes = [spec.example_shape] + infer_shapes(spec)[:-1]
    new_layers, new_params = [], []
    in_keep = None
    for li, layer in enumerate(spec.layers):
        base, shapes = slots[li]
        p = model.params[base:base + len(shapes)]
        dec = per_layer.get(li, {})
        if isinstance(layer, PARAMETRIC):
            n_units = layer.n_heads if isinstance(layer, AttentionBlock) else (
                layer.out_features if isinstance(layer, Dense) else layer.c_out)
            kinds = [dec.get(j, KEEP) for j in range(n_units)]
            keep_out = np.array([j for j, d in enumerate(kinds) if d != PRUNE], dtype=np.intp)
            if len(keep_out) == 0:
                raise PlanError(f"plan would empty layer {li} ({layer.tag})")
            if IMPLANT in kinds and not isinstance(layer, (Conv3x3, HybridConv)):
                raise PlanError(f"implants are only supported in 3x3 conv layers (layer {li} is {layer.tag})")
        if isinstance(layer, (Conv3x3, Conv1x1, HybridConv)):
            new_layer, params = _restructure_conv(layer, p, in_keep, kinds, implant_init, li)
            in_keep = keep_out
        elif isinstance(layer, Dense):
            w, b = p
            if in_keep is not None:
                s = in_shapes[li]
                per = prod(s[1:]) if len(s) == 3 else 1
                rows = (in_keep[:, None] * per + np.arange(per)).ravel()
                w = w[rows]
            new_layer = Dense(w.shape[0], len(keep_out))
            params = [w[:, keep_out], b[keep_out]]
            in_keep = keep_out
        elif isinstance(layer, AttentionBlock):
            if in_keep is not None:
                raise PlanError(f"layer {li}: attention input width cannot follow a pruned layer")
            dh = layer.head_dim
            cols = (keep_out[:, None] * dh + np.arange(dh)).ravel()
            params = [p[0][:, cols], p[1][:, cols], p[2][:, cols], p[3][cols]]
            new_layer = AttentionBlock(layer.d_model, len(keep_out), dh)
            if len(keep_out) == layer.n_heads:
                new_layer = layer
        else:
            new_layer, params = layer, []
        new_layers.append(new_layer)
        new_params.extend(np.array(x) for x in params)
    if in_keep is not None and len(in_keep) != infer_shapes(spec)[-1][0]:
        raise PlanError("plan removes model outputs (dangling downstream reference)")
    new_spec = ModelSpec(tuple(new_layers), spec.loss, spec.input_shape)
    return ModelInstance(new_spec, tuple(new_params))


def _restructure_conv(layer, p, in_keep, kinds, implant_init, li):
    # per output channel: ("3x3", W[c_in,3,3], b) or ("1x1", W[c_in,1,1], b)
    chans = []
    if isinstance(layer, Conv3x3):
        chans = [("3x3", p[0][o], p[1][o]) for o in range(layer.c_out)]
    elif isinstance(layer, Conv1x1):
        chans = [("1x1", p[0][o], p[1][o]) for o in range(layer.c_out)]
    else:
        kept = implanted = 0
        for m in layer.implant_mask:
            if m:
                chans.append(("1x1", p[2][implanted], p[3][implanted]))
                implanted += 1
            else:
                chans.append(("3x3", p[0][kept], p[1][kept]))
                kept += 1
    out = []
    for (kind, w, b), d in zip(chans, kinds):
        if d == PRUNE:
            continue
        if in_keep is not None:
            w = w[in_keep]
        if d == IMPLANT:
            if kind != "3x3":
                raise PlanError(f"layer {li}: channel is already pointwise and cannot be implanted")
            w = implant_filter(w, implant_init)
            kind = "1x1"
        out.append((kind, w, b))
    c_in = out[0][1].shape[0]
    spatial = [c for c in out if c[0] == "3x3"]
    pointwise = [c for c in out if c[0] == "1x1"]
    if not pointwise:
        return Conv3x3(c_in, len(out), layer.h, layer.w), [np.stack([c[1] for c in out]), np.array([c[2] for c in out])]
    if not spatial:
        return Conv1x1(c_in, len(out)), [np.stack([c[1] for c in out]), np.array([c[2] for c in out])]
    mask = tuple(c[0] == "1x1" for c in out)
    params = [
        np.stack([c[1] for c in spatial]),
        np.array([c[2] for c in spatial]),
        np.stack([c[1] for c in pointwise]),
        np.array([c[2] for c in pointwise]),
    ]
    return HybridConv(c_in, mask, layer.h, layer.w), params


def implant_filter(w3, init="center"):
    """1x1 filter (c_in, 1, 1) standing in for a (c_in, 3, 3) filter."""
    if init == "center":
        return w3[:, 1:2, 1:2].copy()
    if init == "dc":
        return w3.sum(axis=(1, 2), keepdims=True)
    raise ValueError(f"unknown implant init {init!r}; expected 'center' or 'dc'")


def rebuild(model, plan):
    """Structurally remove the plan's pruned groups.

    Plans that contain implants are delegated to
    :func:`hapkit.implant.apply_implant`.
    """
    decisions = _decisions_of(plan)
    if any(d == IMPLANT for d in decisions.values()):
        from .implant import apply_implant

        return apply_implant(model, plan)
    return restructure(model, decisions)


# -- presets ---------------------------------------------------------------


def tiny_convnet(n_classes=4, channels=(8, 10, 12), size=8, in_channels=1):
    """Three 3x3 conv layers, global average pool, linear classifier."""
    layers, c = [], in_channels
    for co in channels:
        layers += [Conv3x3(c, co, size, size), ReLU()]
        c = co
    layers += [AvgPool(size), Dense(c, n_classes)]
    return ModelSpec(tuple(layers), "cross_entropy")


def mlp(sizes, loss="cross_entropy"):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Dense(a, b))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    return ModelSpec(tuple(layers), loss)


def attention_classifier(n_classes=4, seq_len=6, d_model=16, n_heads=4, n_layers=2):
    layers = [AttentionBlock(d_model, n_heads) for _ in range(n_layers)]
    layers.append(Dense(seq_len * d_model, n_classes))
    return ModelSpec(tuple(layers), "cross_entropy", (seq_len, d_model))


PRESETS = {"tiny-convnet": tiny_convnet, "mlp": mlp, "attention-classifier": attention_classifier}
