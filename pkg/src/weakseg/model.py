"""Micro encoder-decoder segmentation network with manual backpropagation.

The layout follows a small U-Net: each encoder stage is a block of
``conv -> instance norm -> leaky ReLU`` layers (the first conv carries the
stage stride), the decoder upsamples with nearest-neighbour repetition,
convolves, concatenates the matching skip and runs another block. A final
1x1 convolution produces per-voxel class scores.

Everything works on ``(batch, channels, *spatial)`` arrays with two or three
spatial axes. Computation happens in the dtype of the parameters.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ValidationError

LEAK = 0.01
NORM_EPS = 1e-5


@dataclass
class NetSpec:
    dimensionality: int = 2
    filters: tuple[int, ...] = (8, 16, 32)
    strides: tuple[int, ...] = (1, 2, 2)
    kernel: int = 3
    norm: str = "instance"
    dropout: float = 0.1
    classes: int = 3
    in_channels: int = 2
    convs_per_stage: int = 2

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.strides = tuple(int(s) for s in self.strides)
        if self.dimensionality not in (2, 3):
            raise ValidationError("dimensionality must be 2 or 3")
        if len(self.filters) != len(self.strides) or not self.filters:
            raise ValidationError("filters and strides need one entry per stage")
        if self.classes < 2:
            raise ValidationError("at least two classes are required")
        if self.kernel % 2 != 1:
            raise ValidationError("kernel size must be odd")
        if self.norm not in ("instance", "none"):
            raise ValidationError(f"unknown norm {self.norm!r}")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)")

    @property
    def stages(self) -> int:
        return len(self.filters)

    @classmethod
    def dynunet_2d(cls) -> "NetSpec":
        """Full-size 2D configuration (four stages, 32..256 filters)."""
        return cls(2, (32, 64, 128, 256), (1, 2, 2, 2))

    @classmethod
    def dynunet_3d(cls) -> "NetSpec":
        return cls(3, (32, 64, 128, 256), (1, 2, 2, 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"], d["strides"] = list(self.filters), list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetSpec":
        return cls(**dict(d))


# --------------------------------------------------------------------------
# primitive ops: each forward returns (out, cache); backward returns grads
# --------------------------------------------------------------------------

def conv_forward(x, w, b, stride=1):
    nd = x.ndim - 2
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p)] * nd)
    win = sliding_window_view(xp, (k,) * nd, axis=tuple(range(2, 2 + nd)))
    if stride > 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    out_sp = win.shape[2:2 + nd]
    # (B, *out_sp, C, *k)
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    cols = win.transpose(order).reshape(-1, w[0].size)
    wmat = w.reshape(w.shape[0], -1)
    y = cols @ wmat.T
    if b is not None:
        y += b
    y = np.moveaxis(y.reshape((x.shape[0],) + out_sp + (w.shape[0],)), -1, 1)
    return y, (cols, x.shape, w, stride, out_sp)


def conv_backward(g, cache):
    cols, xshape, w, stride, out_sp = cache
    nd = len(out_sp)
    k = w.shape[2]
    p = k // 2
    O, C = w.shape[0], xshape[1]
    gm = np.ascontiguousarray(np.moveaxis(g, 1, -1)).reshape(-1, O)
    dw = (gm.T @ cols).reshape(w.shape)
    db = gm.sum(axis=0)
    # weight columns reordered to (*k, C): one contiguous channel block per offset
    wk = np.moveaxis(w, 1, -1).reshape(O, -1)
    dcols = (gm @ wk).reshape((xshape[0],) + out_sp + (k,) * nd + (C,))
    dxp = np.zeros((xshape[0],) + tuple(n + 2 * p for n in xshape[2:]) + (C,), dtype=g.dtype)
    for off in itertools.product(range(k), repeat=nd):
        sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp))
        dxp[(slice(None),) + sl] += dcols[(slice(None),) * (1 + nd) + off]
    dx = dxp[(slice(None),) + tuple(slice(p, p + n) for n in xshape[2:])]
    return np.moveaxis(dx, -1, 1), dw, db


def norm_forward(x, gamma, beta):
    axes = tuple(range(2, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return xhat * gamma.reshape(shape) + beta.reshape(shape), (xhat, inv, gamma)


def norm_backward(g, cache):
    xhat, inv, gamma = cache
    axes = tuple(range(2, g.ndim))
    n = np.prod(g.shape[2:])
    shape = (1, -1) + (1,) * (g.ndim - 2)
    dgamma = (g * xhat).sum(axis=(0,) + axes)
    dbeta = g.sum(axis=(0,) + axes)
    dxhat = g * gamma.reshape(shape)
    dx = inv / n * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


def act_forward(x):
    pos = x > 0
    return np.where(pos, x, LEAK * x), pos


def act_backward(g, pos):
    return np.where(pos, g, LEAK * g)


def upsample_forward(x, factor, target_sp):
    out = x
    for ax in range(2, x.ndim):
        out = np.repeat(out, factor, axis=ax)
    out = out[(slice(None), slice(None)) + tuple(slice(0, n) for n in target_sp)]
    return out, (x.shape, factor)


def upsample_backward(g, cache):
    xshape, f = cache
    full = tuple(n * f for n in xshape[2:])
    gp = np.zeros(xshape[:2] + full, dtype=g.dtype)
    gp[(slice(None), slice(None)) + tuple(slice(0, n) for n in g.shape[2:])] = g
    shape = list(xshape[:2])
    for n in xshape[2:]:
        shape += [n, f]
    return gp.reshape(shape).sum(axis=tuple(range(3, len(shape), 2)))


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

def _layer_names(spec: NetSpec):
    """Ordered (prefix, in_ch, out_ch, kernel) for every conv of the graph."""
    layers = []
    cin = spec.in_channels
    for i, f in enumerate(spec.filters):
        for j in range(spec.convs_per_stage):
            layers.append((f"enc{i}.conv{j}", cin if j == 0 else f, f, spec.kernel))
        cin = f
    for i in range(spec.stages - 2, -1, -1):
        f = spec.filters[i]
        layers.append((f"dec{i}.up", spec.filters[i + 1], f, spec.kernel))
        for j in range(spec.convs_per_stage):
            layers.append((f"dec{i}.conv{j}", 2 * f if j == 0 else f, f, spec.kernel))
    layers.append(("head", spec.filters[0], spec.classes, 1))
    return layers


def init_params(spec: NetSpec, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform conv weights, zero biases, zero output layer."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, cin, cout, k in _layer_names(spec):
        shape = (cout, cin) + (k,) * spec.dimensionality
        if name == "head":
            params[f"{name}.w"] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / (cin * k ** spec.dimensionality))
            params[f"{name}.w"] = rng.uniform(-bound, bound, shape).astype(dtype)
        if name == "head" or spec.norm == "none":
            params[f"{name}.b"] = np.zeros(cout, dtype=dtype)
        else:  # a bias in front of instance norm is cancelled by the mean removal
            params[f"{name}.gamma"] = np.ones(cout, dtype=dtype)
            params[f"{name}.beta"] = np.zeros(cout, dtype=dtype)
    return params


def count_parameters(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


def _unit_forward(params, spec, name, x, stride, train, rng, cache):
    y, c = conv_forward(x, params[f"{name}.w"], params.get(f"{name}.b"), stride)
    rec = {"name": name, "conv": c}
    if spec.norm == "instance":
        y, rec["norm"] = norm_forward(y, params[f"{name}.gamma"], params[f"{name}.beta"])
    y, rec["act"] = act_forward(y)
    if train and spec.dropout > 0:
        keep = (rng.random(y.shape) >= spec.dropout) / (1.0 - spec.dropout)
        keep = keep.astype(y.dtype)
        y = y * keep
        rec["drop"] = keep
    cache.append(rec)
    return y


def _unit_backward(g, rec, grads):
    name = rec["name"]
    if "drop" in rec:
        g = g * rec["drop"]
    g = act_backward(g, rec["act"])
    if "norm" in rec:
        g, dgamma, dbeta = norm_backward(g, rec["norm"])
        grads[f"{name}.gamma"] = grads.get(f"{name}.gamma", 0) + dgamma
        grads[f"{name}.beta"] = grads.get(f"{name}.beta", 0) + dbeta
    dx, dw, db = conv_backward(g, rec["conv"])
    grads[f"{name}.w"] = grads.get(f"{name}.w", 0) + dw
    if "norm" not in rec:
        grads[f"{name}.b"] = grads.get(f"{name}.b", 0) + db
    return dx


def forward(params: Mapping[str, np.ndarray], spec: NetSpec, x: np.ndarray,
            train: bool = False, rng: np.random.Generator | None = None):
    """Compute class scores for a batch.

    Args:
        params: parameter dict from :func:`init_params`.
        spec: network description.
        x: input ``(B, in_channels, *spatial)``.
        train: enable dropout (requires ``rng``).

    Returns:
        ``(scores, cache)`` with scores of shape ``(B, classes, *spatial)``.
    """
    dtype = params["head.w"].dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != spec.dimensionality + 2 or x.shape[1] != spec.in_channels:
        raise ValidationError(
            f"expected input (B, {spec.in_channels}, {spec.dimensionality} spatial axes), "
            f"got {x.shape}")
    if train and spec.dropout > 0 and rng is None:
        raise ValidationError("training mode with dropout needs a random generator")
    cache: dict = {"units": [], "skips": [], "ups": []}
    units = cache["units"]
    h = x
    skips = []
    for i in range(spec.stages):
        for j in range(spec.convs_per_stage):
            h = _unit_forward(params, spec, f"enc{i}.conv{j}", h,
                              spec.strides[i] if j == 0 else 1, train, rng, units)
        skips.append(h)
    for i in range(spec.stages - 2, -1, -1):
        skip = skips[i]
        h, uc = upsample_forward(h, spec.strides[i + 1], skip.shape[2:])
        cache["ups"].append(uc)
        h = _unit_forward(params, spec, f"dec{i}.up", h, 1, train, rng, units)
        h = np.concatenate([h, skip], axis=1)
        for j in range(spec.convs_per_stage):
            h = _unit_forward(params, spec, f"dec{i}.conv{j}", h, 1, train, rng, units)
    scores, hc = conv_forward(h, params["head.w"], params["head.b"], 1)
    cache["head"] = hc
    return scores, cache


def backward(params: Mapping[str, np.ndarray], spec: NetSpec, cache: dict,
             grad_scores: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the upstream loss w.r.t. every parameter (summed over the batch)."""
    grads: dict[str, np.ndarray] = {}
    g, dw, db = conv_backward(np.asarray(grad_scores, dtype=params["head.w"].dtype),
                              cache["head"])
    grads["head.w"], grads["head.b"] = dw, db
    units = list(cache["units"])
    ups = list(cache["ups"])
    skip_grads = [None] * spec.stages
    # decoder levels in reverse build order: shallowest first
    for i in range(spec.stages - 1):
        for _ in range(spec.convs_per_stage):
            g = _unit_backward(g, units.pop(), grads)
        f = spec.filters[i]
        g, skip_grads[i] = g[:, :f], g[:, f:]
        g = _unit_backward(g, units.pop(), grads)
        g = upsample_backward(g, ups.pop())
    # g is now the gradient at the deepest encoder output
    for i in range(spec.stages - 1, -1, -1):
        if skip_grads[i] is not None:
            g = g + skip_grads[i]
        for _ in range(spec.convs_per_stage):
            g = _unit_backward(g, units.pop(), grads)
    assert not units and not ups
    return {name: np.asarray(grads[name], dtype=p.dtype) for name, p in params.items()}


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Decoupled weight decay followed by a bias-corrected Adam update (in place)."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# --------------------------------------------------------------------------
# checkpoints: little-endian float32 payload + text index
# --------------------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, np.ndarray], spec: NetSpec | None = None) -> Path:
    """Write ``<path>.bin`` and ``<path>.index`` (name, shape, byte offset per line)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    chunks = []
    offset = 0
    for name, p in params.items():
        data = np.ascontiguousarray(p, dtype="<f4").tobytes()
        shape = "x".join(str(s) for s in p.shape)
        lines.append(f"{name}\t{shape}\t{offset}")
        chunks.append(data)
        offset += len(data)
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".index").write_text("\n".join(lines) + "\n")
    if spec is not None:
        path.with_suffix(".netspec.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    return path.with_suffix(".bin")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], NetSpec | None]:
    path = Path(path)
    if path.suffix in (".bin", ".index"):
        path = path.with_suffix("")
    blob = path.with_suffix(".bin").read_bytes()
    params = {}
    for line in path.with_suffix(".index").read_text().splitlines():
        if not line.strip():
            continue
        name, shape, offset = line.split("\t")
        shape = tuple(int(s) for s in shape.split("x")) if shape else ()
        count = int(np.prod(shape))
        params[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                     offset=int(offset)).reshape(shape).astype(np.float32)
    spec_path = path.with_suffix(".netspec.json")
    spec = NetSpec.from_dict(json.loads(spec_path.read_text())) if spec_path.exists() else None
    return params, spec
