"""The three equivariant wrappers around an arbitrary backbone.

Given a finite group acting on inputs and outputs, a backbone M is wrapped
into a provably equivariant model by one of:

- uniform averaging:      (1/|G|) sum_g  g^-1 M(g x)
- canonical selection:    g*^-1 M(g* x),  g* = argmin_g proxy(M(g x))
- learned weighting:      sum_g g^-1 w(g x) M(g x) / sum_g w(g x)

with w a strictly positive scalar network on backbone features. Uniform
averaging is the constant-weight special case; canonical selection is the
indicator-weight special case. Selection is not differentiable, so an
optional straight-through mode routes gradients through the averaged output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import DiffValue
from .groups import FiniteGroup, GroupAction
from .rng import substream

__all__ = [
    "EquiConfig", "ProxyLoss", "EquizeroResult",
    "equitune_forward", "equizero_forward", "lambda_equitune_forward",
    "make_lambda_net", "LambdaNet", "apply_action_diff",
    "neg_max_prob", "entropy_loss", "neg_max_softmax_q", "proxy_from_name",
    "ste_surrogate_loss", "eq3_objective", "equivariance_gap",
    "UniversalityFixture", "make_cubic_fixture", "universality_fit",
]


# ---------------------------------------------------------------------------
# proxy losses (lower is better; selection minimizes)
# ---------------------------------------------------------------------------

def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ProxyLoss:
    """Deterministic scalar score over backbone outputs; lower is better."""

    kind: str
    evaluate: Callable[[np.ndarray], np.ndarray] = field(repr=False)

    def __call__(self, out: np.ndarray) -> np.ndarray:
        out = np.asarray(out)
        if out.shape[-1] == 0:
            raise ValueError("proxy loss over an empty vector")
        return self.evaluate(out)


def neg_max_prob(on_probs: bool = False) -> ProxyLoss:
    """Negative maximum of the output distribution.

    By default the output is treated as logits and softmaxed first; pass
    on_probs=True when the wrapped model already emits probabilities.
    """
    if on_probs:
        return ProxyLoss("neg_max_prob", lambda o: -np.asarray(o).max(axis=-1))
    return ProxyLoss("neg_max_prob", lambda o: -_softmax_np(o).max(axis=-1))


def entropy_loss(on_probs: bool = False) -> ProxyLoss:
    """Shannon entropy of the output distribution (confidence proxy)."""
    def ev(o):
        p = np.asarray(o) if on_probs else _softmax_np(o)
        return -(p * np.log(np.maximum(p, 1e-300))).sum(axis=-1)
    return ProxyLoss("entropy", ev)


def neg_max_softmax_q() -> ProxyLoss:
    """Negative maximum softmax-normalized Q-value (RL branch selection)."""
    return ProxyLoss("neg_max_softmax_q", lambda o: -_softmax_np(o).max(axis=-1))


def proxy_from_name(name: str) -> ProxyLoss:
    table = {"neg_max_prob": neg_max_prob, "entropy": entropy_loss,
             "neg_max_softmax_q": neg_max_softmax_q}
    if name not in table:
        raise ValueError(f"unknown proxy loss {name!r}")
    return table[name]()


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class EquiConfig:
    """Wrapper configuration: the group, its two actions, and the mode.

    lambda_feature_source, when set, is a frozen snapshot backbone whose
    `features` feed the weight network (its own forward pass per branch).
    Otherwise features come from the wrapped backbone itself, detached when
    lambda_feature_frozen is true.
    """

    group: FiniteGroup
    input_action: GroupAction
    output_action: GroupAction
    mode: str = "equitune"
    proxy_loss: ProxyLoss | None = None
    lambda_net: object | None = None
    ste: bool = False
    lambda_feature_frozen: bool = True
    lambda_feature_source: object | None = None

    def __post_init__(self):
        for a in (self.input_action, self.output_action):
            if a.group.order != self.group.order or not np.array_equal(a.group.cayley, self.group.cayley):
                raise ValueError("input/output actions must share the wrapper's group")
        if self.mode not in ("equitune", "equizero", "lambda"):
            raise ValueError(f"unknown wrapper mode {self.mode!r}")
        if self.mode == "equizero" and self.proxy_loss is None:
            raise ValueError("equizero mode needs a proxy loss")
        if self.mode == "lambda" and self.lambda_net is None:
            raise ValueError("lambda mode needs a weight network")


def apply_action_diff(action: GroupAction, g: int, v: DiffValue) -> DiffValue:
    """Differentiable application of a linear group action to a node.

    For signed-permutation actions the adjoint is the inverse element's
    action, which is how the gradient is routed back.
    """
    if not action.linear:
        raise ValueError(f"action {action.name} is not linear; cannot differentiate")
    if g == action.group.identity:
        return v
    ginv = action.group.inv(g)
    def bwd(grad):
        v.accumulate_grad(np.asarray(action.apply(ginv, grad), dtype=np.float64))
    return ad.from_op(np.asarray(action.apply(g, v.data), dtype=np.float64), (v,), bwd)


def _forward_with_features(m, cfg: EquiConfig, xg, want_lambda: bool):
    """One branch forward; returns (output, lambda_input or None)."""
    if not want_lambda:
        return m.forward(xg), None
    if cfg.lambda_feature_source is not None:
        with ad.no_grad():
            feat = cfg.lambda_feature_source.features(xg)
        return m.forward(xg), feat
    if hasattr(m, "features"):
        feat = m.features(xg)
        out = m.head(feat)
        lam_in = ad.detach(feat) if cfg.lambda_feature_frozen else feat
        return out, lam_in
    # backbones without a feature layer: the weight net sees the raw input,
    # flattened to (batch, features)
    arr = np.asarray(xg.data if isinstance(xg, DiffValue) else xg, dtype=np.float64)
    flat = arr.reshape(arr.shape[0], -1) if arr.ndim >= 2 else arr.reshape(1, -1)
    return m.forward(xg), ad.value(flat)


# ---------------------------------------------------------------------------
# the wrappers
# ---------------------------------------------------------------------------

def equitune_forward(m, cfg: EquiConfig, x) -> DiffValue:
    """Uniform group averaging; differentiable; exactly equivariant."""
    n = cfg.group.order
    if n == 1:
        return m.forward(x)
    acc = None
    for g in cfg.group.elements():
        y = m.forward(cfg.input_action.apply(g, x))
        z = apply_action_diff(cfg.output_action, cfg.group.inv(g), y)
        acc = z if acc is None else ad.add(acc, z)
    return ad.scale(acc, 1.0 / n)


class EquizeroResult(NamedTuple):
    output: DiffValue
    g_star: "int | np.ndarray"
    losses: np.ndarray  # per group element (first axis), per example after


def _select_branches(branches: list[DiffValue], idx: np.ndarray) -> DiffValue:
    """out[i] = branches[idx[i]][i]; gradient scatters to the chosen branch."""
    stacked = np.stack([b.data for b in branches], axis=0)
    rows = np.arange(idx.shape[0])
    data = stacked[idx, rows]
    def bwd(g):
        for k, b in enumerate(branches):
            if not b.requires_grad:
                continue
            mask = idx == k
            if mask.any():
                gb = np.zeros_like(b.data)
                gb[mask] = g[mask]
                b.accumulate_grad(gb)
    return ad.from_op(data, tuple(branches), bwd)


def equizero_forward(m, cfg: EquiConfig, x) -> EquizeroResult:
    """Canonical selection: minimize the proxy loss over branches.

    Ties go to the lowest element index. Per-example selection when the
    backbone output carries a leading batch axis (proxy losses reduce the
    last axis). With cfg.ste set the forward value is unchanged but the
    backward pass follows the uniform-average surrogate.
    """
    if cfg.proxy_loss is None:
        raise ValueError("equizero needs a proxy loss")
    n = cfg.group.order
    if n == 1:
        y = m.forward(x)
        losses = np.asarray(cfg.proxy_loss(y.data))[None]
        return EquizeroResult(y, _scalar_or_array(np.zeros(losses.shape[1:], dtype=np.int64)), losses)
    raw = []
    inv_branches = []
    for g in cfg.group.elements():
        y = m.forward(cfg.input_action.apply(g, x))
        raw.append(y)
        inv_branches.append(apply_action_diff(cfg.output_action, cfg.group.inv(g), y))
    losses = np.stack([_per_example(cfg.proxy_loss(y.data)) for y in raw], axis=0)
    if np.isnan(losses).any():
        raise ValueError("proxy loss produced NaN; selection is undefined")
    g_star = np.argmin(losses, axis=0)
    if losses.ndim == 1:
        out = inv_branches[int(g_star)]
    else:
        out = _select_branches(inv_branches, g_star.reshape(-1))
    if cfg.ste:
        surrogate = ad.scale(_tree_sum(inv_branches), 1.0 / n)
        out = ad.add(surrogate, ad.detach(ad.sub(out, surrogate)))
    return EquizeroResult(out, _scalar_or_array(g_star), losses)


def _tree_sum(values):
    acc = values[0]
    for v in values[1:]:
        acc = ad.add(acc, v)
    return acc


def _per_example(losses: np.ndarray) -> np.ndarray:
    """Collapse proxy-loss output to one score per leading example."""
    losses = np.asarray(losses)
    if losses.ndim <= 1:
        return losses
    return losses.reshape(losses.shape[0], -1).sum(axis=-1)


def _scalar_or_array(idx: np.ndarray):
    return int(idx) if idx.ndim == 0 else idx


def lambda_equitune_forward(m, cfg: EquiConfig, x) -> DiffValue:
    """Weighted group averaging with learned positive importance weights.

    Differentiable through both the backbone and the weight network. Weights
    must be nonnegative with a strictly positive sum (the bundled weight net
    is positive by construction; zero weights only arise from hand-built
    indicator weighters).
    """
    if cfg.lambda_net is None:
        raise ValueError("lambda mode needs a weight network")
    n = cfg.group.order
    if n == 1:
        return m.forward(x)
    num = None
    den = None
    for g in cfg.group.elements():
        y, lam_in = _forward_with_features(m, cfg, cfg.input_action.apply(g, x), True)
        lam = cfg.lambda_net.forward(lam_in)
        if np.any(lam.data < 0):
            raise ValueError("importance weights must be nonnegative")
        lam_b = _broadcast_weight(lam, y)
        term = apply_action_diff(cfg.output_action, cfg.group.inv(g), ad.mul(lam_b, y))
        num = term if num is None else ad.add(num, term)
        den = lam_b if den is None else ad.add(den, lam_b)
    if np.any(den.data <= 0):
        raise ValueError("importance weights sum to zero; output undefined")
    return ad.div(num, den)


def _broadcast_weight(lam: DiffValue, y: DiffValue) -> DiffValue:
    """Reshape a scalar / (B,) / (B,1) weight so it broadcasts onto y."""
    if lam.data.shape == ():
        return lam
    b = y.data.shape[0]
    flat = lam.data.reshape(-1)
    if flat.shape[0] != b:
        raise ValueError(f"weight shape {lam.data.shape} does not match batch {b}")
    return ad.reshape(lam, (b,) + (1,) * (y.data.ndim - 1))


def ste_surrogate_loss(selected_loss: DiffValue, averaged_loss: DiffValue) -> DiffValue:
    """Loss whose value is the selection loss but whose gradient is the
    averaged-wrapper loss gradient (straight-through at the loss level)."""
    return ad.add(averaged_loss, ad.detach(ad.sub(selected_loss, averaged_loss)))


# ---------------------------------------------------------------------------
# weight network
# ---------------------------------------------------------------------------

class LambdaNet(nn.Backbone):
    """Two dense layers (hidden width 100) with a softplus-positive scalar out."""

    HIDDEN = 100

    def __init__(self, feature_dim: int, rng):
        super().__init__()
        self.feature_dim = feature_dim
        self.fc1 = nn.Dense(self, "lam.fc1", rng, feature_dim, self.HIDDEN)
        self.fc2 = nn.Dense(self, "lam.fc2", rng, self.HIDDEN, 1)

    def forward(self, feat) -> DiffValue:
        v = feat if isinstance(feat, DiffValue) else ad.value(np.atleast_2d(feat))
        h = ad.relu(self.fc1(v))
        raw = self.fc2(h)
        return ad.add(ad.softplus(raw), ad.value(np.asarray(1e-6)))

    def describe(self):
        return {"kind": "LambdaNet", "feature_dim": self.feature_dim}


def make_lambda_net(feature_dim: int, seed: int = 0) -> LambdaNet:
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    return LambdaNet(feature_dim, substream(seed, "lambda_net_init"))


# ---------------------------------------------------------------------------
# weighted-objective oracle
# ---------------------------------------------------------------------------

def eq3_objective(m, cfg: EquiConfig, candidate_at_x: np.ndarray, x) -> float:
    """Weighted least-squares objective that the lambda wrapper minimizes.

    J(N) = sum_g w(gx) * ||M(gx) - N(gx)||^2 over equivariant candidates N,
    with N(gx) = g N(x); the candidate is identified with its value at x.
    For norm-1 actions the weighted wrapper output is the exact minimizer.
    """
    total = 0.0
    with ad.no_grad():
        for g in cfg.group.elements():
            xg = cfg.input_action.apply(g, x)
            y, lam_in = _forward_with_features(m, cfg, xg, cfg.lambda_net is not None)
            w = float(np.asarray(cfg.lambda_net.forward(lam_in).data).reshape(-1)[0]) \
                if cfg.lambda_net is not None else 1.0
            cand_g = np.asarray(cfg.output_action.apply(g, candidate_at_x), dtype=np.float64)
            diff = y.data - cand_g
            total += w * float((diff * diff).sum())
    return total


def equivariance_gap(wrap_fn, cfg: EquiConfig, x) -> float:
    """max_g || wrap(g x) - g wrap(x) ||_inf for a wrapper closure."""
    base = np.asarray(wrap_fn(x).data)
    worst = 0.0
    for g in cfg.group.elements():
        lhs = np.asarray(wrap_fn(cfg.input_action.apply(g, x)).data)
        rhs = np.asarray(cfg.output_action.apply(g, base))
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


# ---------------------------------------------------------------------------
# universality fixture: fitting a symmetrized target with the wrapper
# ---------------------------------------------------------------------------

@dataclass
class UniversalityFixture:
    """An exactly equivariant target on a compact box, built by symmetrizing
    a random smooth function over the group orbit."""

    target: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    input_action: GroupAction = field(repr=False)
    output_action: GroupAction = field(repr=False)
    box: tuple = ((-1.0, 1.0), (-1.0, 1.0))
    grid_n: int = 21
    tolerance: float = 0.05

    def grid(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, self.grid_n) for lo, hi in self.box]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def _cubic_features(x: np.ndarray) -> np.ndarray:
    x1, x2 = x[..., 0], x[..., 1]
    feats = [np.ones_like(x1), x1, x2, x1 * x1, x1 * x2, x2 * x2,
             x1 ** 3, x1 * x1 * x2, x1 * x2 * x2, x2 ** 3]
    return np.stack(feats, axis=-1)


def make_cubic_fixture(seed: int, scale: float = 0.4,
                       input_action: GroupAction | None = None,
                       output_action: GroupAction | None = None) -> UniversalityFixture:
    """Symmetrized random cubic R^2 -> R^2 under quarter-turn rotations."""
    from .groups import plane_rotation
    act_in = input_action if input_action is not None else plane_rotation()
    act_out = output_action if output_action is not None else plane_rotation()
    rng = substream(seed, "universality_target")
    coeffs = rng.normal(0.0, scale, size=(10, 2))

    def raw(x):
        return _cubic_features(x) @ coeffs

    group = act_in.group

    def target(x):
        x = np.asarray(x, dtype=np.float64)
        acc = np.zeros(x.shape[:-1] + (2,))
        for g in group.elements():
            acc += np.asarray(act_out.apply(group.inv(g), raw(act_in.apply(g, x))))
        return acc / group.order

    return UniversalityFixture(target=target, input_action=act_in,
                               output_action=act_out)


class _FixedPositiveLambda:
    """Frozen random positive weight function (no trainable state)."""

    def __init__(self, dim: int, seed: int):
        rng = substream(seed, "fixed_lambda")
        self.w = rng.normal(0.0, 1.0, size=(dim, 1))
        self.b = rng.normal(0.0, 0.5)

    def forward(self, feat: DiffValue) -> DiffValue:
        raw = feat.data @ self.w + self.b
        return ad.value(np.logaddexp(0.0, raw) + 0.1)


def universality_fit(fixture: UniversalityFixture, budget: int, seed: int = 0,
                     hidden=(64, 64), lr: float = 1e-2, batch: int = 128,
                     lr_decay: float = 0.01, act: str = "tanh", bias: bool = True,
                     snapshots: tuple = ()) -> dict:
    """Regress the symmetrized target with a lambda-wrapped MLP.

    Returns the sup (max-norm over the evaluation grid) error at `budget`
    steps, plus errors at any intermediate snapshot step counts. The learning
    rate decays exponentially from lr to lr*lr_decay over the budget, which
    is what lets long runs settle near the target instead of bouncing at the
    minibatch noise floor. Batches are drawn per-step from named substreams,
    so deterministic given (seed, budget).
    """
    from .optim import Adam

    dim = len(fixture.box)
    m = nn.MLP((dim, *hidden, dim), substream(seed, "unifit_init"), act=act, bias=bias)
    cfg = EquiConfig(group=fixture.input_action.group,
                     input_action=fixture.input_action,
                     output_action=fixture.output_action,
                     mode="lambda",
                     lambda_net=_FixedPositiveLambda(dim, seed))
    opt = Adam(m.params(), lr=lr)
    # sample from a slightly inflated box so the sup over the evaluation
    # grid is not dominated by under-sampled boundary corners
    lows = 1.15 * np.array([lo for lo, _ in fixture.box])
    highs = 1.15 * np.array([hi for _, hi in fixture.box])
    grid = fixture.grid()
    target_grid = fixture.target(grid)

    def sup_error() -> float:
        with ad.no_grad():
            pred = lambda_equitune_forward(m, cfg, grid).data
        return float(np.linalg.norm(pred - target_grid, axis=-1).max())

    errors = {}
    for step in range(1, budget + 1):
        rng = substream(seed, "unifit_batch", step)
        xb = rng.uniform(lows, highs, size=(batch, dim))
        out = lambda_equitune_forward(m, cfg, xb)
        loss = ad.mse(out, ad.value(fixture.target(xb)))
        opt.zero_grad()
        ad.backward(loss)
        # hold for the first half, then decay exponentially to lr*lr_decay
        frac = max(0.0, (step - 0.5 * budget) / (0.5 * budget))
        opt.lr = lr * (lr_decay ** frac)
        opt.step()
        if step in snapshots:
            errors[step] = sup_error()
    errors[budget] = sup_error()
    return {"sup_error": errors[budget], "errors_by_step": errors,
            "model": m, "config": cfg}
