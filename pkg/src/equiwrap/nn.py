"""Backbone building blocks and checkpoint IO.

A Backbone is a named collection of parameters plus a deterministic forward.
Every architecture in the toolkit (MLPs, the small image CNN, the single-gate
recurrent cell, Q-networks, the weight network) is assembled from the pieces
here. Checkpoints are a single JSON document and round-trip float64 exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape if shape is not None else (fan_in, fan_out))


class Backbone:
    """Base: subclasses populate self._params and implement forward."""

    def __init__(self):
        self._params: dict[str, DiffValue] = {}

    def add_param(self, name: str, data: np.ndarray) -> DiffValue:
        p = ad.param(data, name=name)
        self._params[name] = p
        return p

    def params(self) -> dict[str, DiffValue]:
        return self._params

    def forward(self, x) -> DiffValue:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": type(self).__name__}

    def num_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def set_trainable(self, flag: bool):
        for p in self._params.values():
            p.requires_grad = flag

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self._params.items():
            if k not in state:
                raise KeyError(f"checkpoint missing parameter {k!r}")
            a = np.asarray(state[k], dtype=np.float64)
            if a.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k!r}: {a.shape} vs {p.data.shape}")
            p.data[...] = a


class Dense:
    """One affine layer; weights live in the owning Backbone."""

    def __init__(self, owner: Backbone, name: str, rng, n_in: int, n_out: int,
                 bias: bool = True):
        self.w = owner.add_param(f"{name}.w", glorot(rng, n_in, n_out))
        self.b = owner.add_param(f"{name}.b", np.zeros(n_out)) if bias else None

    def __call__(self, x: DiffValue) -> DiffValue:
        out = ad.matmul(x, self.w)
        return ad.add(out, self.b) if self.b is not None else out


_ACTS = {"relu": ad.relu, "tanh": ad.tanh, "sigmoid": ad.sigmoid}


class MLP(Backbone):
    """Fully-connected net; hidden activations per `act`, linear output."""

    def __init__(self, dims, rng, act="relu", name="mlp", bias=True):
        super().__init__()
        self.dims = list(dims)
        self.act = act
        self.layers = [Dense(self, f"{name}.fc{i}", rng, a, b, bias=bias)
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def forward(self, x) -> DiffValue:
        v = x if isinstance(x, DiffValue) else ad.value(np.atleast_2d(x))
        for i, layer in enumerate(self.layers):
            v = layer(v)
            if i < len(self.layers) - 1:
                v = _ACTS[self.act](v)
        return v

    def describe(self) -> dict:
        return {"kind": "MLP", "dims": self.dims, "act": self.act}


class ShapeCNN(Backbone):
    """Small conv net for the oriented-glyph images.

    conv(3x3) -> relu -> conv(3x3) -> relu -> flatten -> dense feature layer
    -> relu -> linear head. The feature layer keeps absolute spatial layout
    (no pooling), which is what makes the net orientation-sensitive;
    `features` exposes the penultimate activation used by the weight network.
    """

    def __init__(self, rng, side=16, in_ch=1, ch1=8, ch2=16, feat_dim=64,
                 n_classes=8):
        super().__init__()
        self.arch = dict(side=side, in_ch=in_ch, ch1=ch1, ch2=ch2,
                         feat_dim=feat_dim, n_classes=n_classes)
        k = 3
        self.w1 = self.add_param("conv1.w", glorot(rng, in_ch * k * k, ch1,
                                                   (ch1, in_ch, k, k)))
        self.b1 = self.add_param("conv1.b", np.zeros(ch1))
        self.w2 = self.add_param("conv2.w", glorot(rng, ch1 * k * k, ch2,
                                                   (ch2, ch1, k, k)))
        self.b2 = self.add_param("conv2.b", np.zeros(ch2))
        self.fc = Dense(self, "feat", rng, ch2 * side * side, feat_dim)
        self.out = Dense(self, "head", rng, feat_dim, n_classes)

    def _as_batch(self, x):
        a = np.asarray(x, dtype=np.float64)
        if a.ndim == 3:
            a = a[None]
        return ad.value(a)

    def features(self, x) -> DiffValue:
        v = x if isinstance(x, DiffValue) else self._as_batch(x)
        v = ad.relu(ad.conv2d(v, self.w1, self.b1))
        v = ad.relu(ad.conv2d(v, self.w2, self.b2))
        flat = ad.reshape(v, (v.shape[0], -1))
        return ad.relu(self.fc(flat))

    def head(self, feat: DiffValue) -> DiffValue:
        return self.out(feat)

    def forward(self, x) -> DiffValue:
        return self.head(self.features(x))

    def describe(self) -> dict:
        return {"kind": "ShapeCNN", **self.arch}


class ProbClassifier(Backbone):
    """View of a logits classifier that emits probabilities.

    Shares the base model's parameters. Averaging-style wrappers combine
    probability vectors (bounded votes) rather than raw logits, where one
    overconfident branch would swamp the ensemble.
    """

    def __init__(self, base: Backbone):
        super().__init__()
        self.base = base
        self._params = base._params

    def features(self, x) -> DiffValue:
        return self.base.features(x)

    def head(self, feat: DiffValue) -> DiffValue:
        return ad.softmax(self.base.head(feat))

    def forward(self, x) -> DiffValue:
        return self.head(self.features(x))

    def describe(self) -> dict:
        return {"kind": "ProbClassifier", "base": self.base.describe()}


class GRUCell:
    """Single-gate recurrent cell: an update gate plus a tanh candidate."""

    def __init__(self, owner: Backbone, name: str, rng, n_in: int, n_hidden: int):
        self.n_hidden = n_hidden
        self.wxz = owner.add_param(f"{name}.wxz", glorot(rng, n_in, n_hidden))
        self.whz = owner.add_param(f"{name}.whz", glorot(rng, n_hidden, n_hidden))
        self.bz = owner.add_param(f"{name}.bz", np.zeros(n_hidden))
        self.wxh = owner.add_param(f"{name}.wxh", glorot(rng, n_in, n_hidden))
        self.whh = owner.add_param(f"{name}.whh", glorot(rng, n_hidden, n_hidden))
        self.bh = owner.add_param(f"{name}.bh", np.zeros(n_hidden))

    def initial(self, batch: int = 1) -> DiffValue:
        return ad.value(np.zeros((batch, self.n_hidden)))

    def step(self, x: DiffValue, h: DiffValue) -> DiffValue:
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.wxz), ad.matmul(h, self.whz)), self.bz))
        cand = ad.tanh(ad.add(ad.add(ad.matmul(x, self.wxh), ad.matmul(h, self.whh)), self.bh))
        one_minus = ad.add(ad.scale(z, -1.0), ad.value(np.asarray(1.0)))
        return ad.add(ad.mul(one_minus, h), ad.mul(z, cand))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, DiffValue], meta: dict | None = None):
    """Write {"format":1, "params": {...}}; floats serialize losslessly."""
    doc = {"format": 1,
           "params": {k: {"shape": list(p.data.shape),
                          "data": p.data.reshape(-1).tolist()}
                      for k, p in params.items()}}
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != 1:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    out = {}
    for k, rec in doc["params"].items():
        out[k] = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
    return out


def checkpoint_meta(path) -> dict:
    return json.loads(Path(path).read_text()).get("meta", {})
