"""Shared test backbones and fixtures."""

import numpy as np

from equiwrap import autodiff as ad
from equiwrap import nn


class ImageMLP(nn.Backbone):
    """Image -> image backbone: flatten, two dense layers, reshape back."""

    def __init__(self, rng, side=4, channels=1, hidden=32):
        super().__init__()
        self.side, self.channels = side, channels
        n = channels * side * side
        self.fc1 = nn.Dense(self, "fc1", rng, n, hidden)
        self.fc2 = nn.Dense(self, "fc2", rng, hidden, n)

    def forward(self, x):
        a = np.asarray(x, dtype=np.float64)
        if a.ndim == 3:
            a = a[None]
        b = a.shape[0]
        v = ad.value(a.reshape(b, -1))
        out = self.fc2(ad.tanh(self.fc1(v)))
        return ad.reshape(out, (b, self.channels, self.side, self.side))


class VectorMLP(nn.Backbone):
    """Vector -> vector backbone of matching input/output width."""

    def __init__(self, rng, width, hidden=16):
        super().__init__()
        self.fc1 = nn.Dense(self, "fc1", rng, width, hidden)
        self.fc2 = nn.Dense(self, "fc2", rng, hidden, width)

    def forward(self, x):
        v = x if isinstance(x, ad.DiffValue) else ad.value(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return self.fc2(ad.tanh(self.fc1(v)))


class AffineBackbone(nn.Backbone):
    """m(x) = x @ A + c with fixed matrices (analytic test cases)."""

    def __init__(self, a: np.ndarray, c: np.ndarray):
        super().__init__()
        self.a = self.add_param("a", np.asarray(a, dtype=np.float64))
        self.c = self.add_param("c", np.asarray(c, dtype=np.float64))

    def forward(self, x):
        v = x if isinstance(x, ad.DiffValue) else ad.value(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return ad.add(ad.matmul(v, self.a), self.c)


class TableBackbone(nn.Backbone):
    """Maps a one-hot-selector input to a fixed row of a table."""

    def __init__(self, table: np.ndarray):
        super().__init__()
        self.table = np.asarray(table, dtype=np.float64)

    def forward(self, x):
        idx = int(np.argmax(np.asarray(x)))
        return ad.value(self.table[idx])


class CallOrderLambda:
    """Weight stub returning preset scalars in branch call order (g ascending)."""

    def __init__(self, values):
        self.values = [float(v) for v in values]
        self.calls = 0

    def forward(self, feat):
        v = self.values[self.calls % len(self.values)]
        self.calls += 1
        return ad.value(np.asarray(v))


class ConstLambda:
    def __init__(self, c):
        self.c = float(c)

    def forward(self, feat):
        return ad.value(np.asarray(self.c))
