"""Finite groups and their actions on the toolkit's data spaces.

Group elements are opaque indices 0..n-1 with the identity pinned at index 0;
all semantics live in the `GroupAction` that realizes an element on a concrete
space (image grids, token sequences, logit vectors, action sets). One group
can therefore drive distinct input and output actions, which is exactly what
the equivariant wrappers need.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "FiniteGroup",
    "GroupAction",
    "GroupDiagnostics",
    "cyclic_group",
    "product_group",
    "verify_group",
    "act",
    "rot90_image",
    "hflip_image",
    "token_swap",
    "action_perm",
    "trivial_action",
    "vector_negation",
    "plane_rotation",
    "group_from_config",
    "group_to_config",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FiniteGroup:
    """A finite group given by its Cayley table.

    cayley[g][h] is the index of g*h; index 0 is always the identity.
    """

    order: int
    cayley: np.ndarray
    inverse: np.ndarray
    label: str
    identity: int = 0

    def mul(self, g: int, h: int) -> int:
        return int(self.cayley[g, h])

    def inv(self, g: int) -> int:
        return int(self.inverse[g])

    def elements(self) -> range:
        return range(self.order)

    def __post_init__(self):
        object.__setattr__(self, "cayley", _frozen(self.cayley))
        object.__setattr__(self, "inverse", _frozen(self.inverse))


def cyclic_group(n: int) -> FiniteGroup:
    """Z_n with cayley[i][j] = (i+j) mod n."""
    if n < 1:
        raise ValueError(f"group order must be >= 1, got {n}")
    idx = np.arange(n, dtype=np.int64)
    cayley = (idx[:, None] + idx[None, :]) % n
    inverse = (-idx) % n
    return FiniteGroup(order=n, cayley=cayley, inverse=inverse, label=f"Z{n}")


def product_group(a: FiniteGroup, b: FiniteGroup) -> FiniteGroup:
    """Direct product of a and b; element index = i_a * |b| + i_b."""
    na, nb = a.order, b.order
    n = na * nb
    cayley = np.empty((n, n), dtype=np.int64)
    inverse = np.empty(n, dtype=np.int64)
    for i in range(n):
        ia, ib = divmod(i, nb)
        inverse[i] = a.inv(ia) * nb + b.inv(ib)
        for j in range(n):
            ja, jb = divmod(j, nb)
            cayley[i, j] = a.mul(ia, ja) * nb + b.mul(ib, jb)
    return FiniteGroup(order=n, cayley=cayley, inverse=inverse,
                       label=f"{a.label}x{b.label}")


@dataclass
class GroupDiagnostics:
    """verify_group report: per-axiom pass flags plus the first witness."""

    closure_ok: bool = True
    identity_ok: bool = True
    inverse_ok: bool = True
    associativity_ok: bool = True
    witness: tuple | None = None

    @property
    def ok(self) -> bool:
        return (self.closure_ok and self.identity_ok
                and self.inverse_ok and self.associativity_ok)

    def __str__(self) -> str:
        parts = [f"closure={'ok' if self.closure_ok else 'FAIL'}",
                 f"identity={'ok' if self.identity_ok else 'FAIL'}",
                 f"inverse={'ok' if self.inverse_ok else 'FAIL'}",
                 f"associativity={'ok' if self.associativity_ok else 'FAIL'}"]
        if self.witness is not None:
            parts.append(f"witness={self.witness}")
        return " ".join(parts)


def verify_group(g: FiniteGroup) -> GroupDiagnostics:
    """Brute-force all group axioms; failures are reported, never raised.

    Associativity is an O(n^3) scan, fine for the n <= 16 groups used here.
    """
    d = GroupDiagnostics()
    n = g.order
    cay = g.cayley
    if cay.shape != (n, n) or cay.min() < 0 or cay.max() >= n:
        d.closure_ok = False
        d.witness = ("table shape/range",)
        return d
    target = np.arange(n)
    for i in range(n):
        if not (np.array_equal(np.sort(cay[i]), target)
                and np.array_equal(np.sort(cay[:, i]), target)):
            d.closure_ok = False
            d.witness = d.witness or ("row/col not a permutation", i)
    for i in range(n):
        if cay[0, i] != i or cay[i, 0] != i:
            d.identity_ok = False
            d.witness = d.witness or ("identity", i)
            break
    for i in range(n):
        j = int(g.inverse[i])
        if not (0 <= j < n) or cay[i, j] != 0 or cay[j, i] != 0:
            d.inverse_ok = False
            d.witness = d.witness or ("inverse", i)
            break
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if cay[cay[i, j], k] != cay[i, cay[j, k]]:
                    d.associativity_ok = False
                    d.witness = d.witness or ("associativity", (i, j, k))
                    return d
    return d


@dataclass(frozen=True)
class GroupAction:
    """A realization of a group on a concrete space.

    `apply_fn(g, x)` must satisfy the action axioms exactly (identity at
    g=0, compatibility with the Cayley table) and be a bijection on its
    space. `linear` marks actions that are signed permutations of tensor
    entries, which is what lets the wrappers differentiate through them.
    """

    group: FiniteGroup
    space: str
    name: str
    apply_fn: Callable[[int, object], object] = field(repr=False)
    linear: bool = True

    def apply(self, g: int, x):
        if not 0 <= g < self.group.order:
            raise ValueError(f"element index {g} out of range for {self.group.label}")
        if g == self.group.identity:
            return x
        return self.apply_fn(g, x)


def act(a: GroupAction, g: int, x):
    """Apply group element g to point x under action a."""
    return a.apply(g, x)


# ---------------------------------------------------------------------------
# built-in actions
# ---------------------------------------------------------------------------

def rot90_image(side: int, group: FiniteGroup | None = None) -> GroupAction:
    """Z4 acting on square images by counter-clockwise 90-degree rotations.

    Element g rotates by g*90 degrees CCW over the last two axes, so it works
    on (H,W), (C,H,W) and (B,C,H,W) arrays alike.
    """
    group = group if group is not None else cyclic_group(4)
    if group.order != 4:
        raise ValueError("rot90_image needs a group of order 4")

    def apply_fn(g, x):
        x = np.asarray(x)
        if x.shape[-1] != side or x.shape[-2] != side:
            raise ValueError(f"expected trailing {side}x{side} image, got {x.shape}")
        return np.ascontiguousarray(np.rot90(x, k=g, axes=(-2, -1)))

    return GroupAction(group=group, space=f"image[{side}x{side}]",
                       name="rot90_image", apply_fn=apply_fn)


def hflip_image(side: int, group: FiniteGroup | None = None) -> GroupAction:
    """Z2 flipping images along the width axis."""
    group = group if group is not None else cyclic_group(2)
    if group.order != 2:
        raise ValueError("hflip_image needs a group of order 2")

    def apply_fn(g, x):
        x = np.asarray(x)
        if x.shape[-1] != side:
            raise ValueError(f"expected trailing width {side}, got {x.shape}")
        return np.ascontiguousarray(x[..., ::-1])

    return GroupAction(group=group, space=f"image[{side}x{side}]",
                       name="hflip_image", apply_fn=apply_fn)


def _cycle_perm(vocab_size: int, tuples: Sequence[Sequence[int]], step: int) -> np.ndarray:
    """Permutation advancing each tuple member by `step`, others fixed."""
    perm = np.arange(vocab_size, dtype=np.int64)
    for tup in tuples:
        d = len(tup)
        for i, tok in enumerate(tup):
            perm[tok] = tup[(i + step) % d]
    return perm


def token_swap(vocab_size: int, pairs: Sequence[Sequence[int]],
               on: str = "tokens", group: FiniteGroup | None = None) -> GroupAction:
    """Cyclic group advancing designated vocabulary tuples.

    With pairs of length 2 this is the classic swap action. `on="tokens"`
    permutes ids in a sequence; `on="logits"` permutes the corresponding
    positions of a vector over the vocabulary and leaves others fixed.
    """
    d = len(pairs[0])
    if any(len(p) != d for p in pairs):
        raise ValueError("all tuples must share the same length")
    flat = [t for p in pairs for t in p]
    if len(set(flat)) != len(flat):
        raise ValueError("tuples must not share vocabulary ids")
    group = group if group is not None else cyclic_group(d)
    if group.order != d:
        raise ValueError(f"group order {group.order} != tuple length {d}")
    perms = [_cycle_perm(vocab_size, pairs, s) for s in range(d)]

    if on == "tokens":
        def apply_fn(g, x):
            ids = np.asarray(x, dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
                raise ValueError("token id out of vocabulary range")
            return perms[g][ids]
        space = f"tokens[{vocab_size}]"
    elif on == "logits":
        def apply_fn(g, x):
            v = np.asarray(x)
            if v.shape[-1] != vocab_size:
                raise ValueError(f"expected trailing axis {vocab_size}, got {v.shape}")
            out = np.empty_like(v)
            out[..., perms[g]] = v
            return out
        space = f"logits[{vocab_size}]"
    else:
        raise ValueError(f"unknown target {on!r}")
    return GroupAction(group=group, space=space, name=f"token_swap_{on}",
                       apply_fn=apply_fn)


def action_perm(generator: Sequence[int], group: FiniteGroup | None = None,
                name: str = "action_perm") -> GroupAction:
    """Z_n permuting a finite index set by powers of `generator`.

    generator[a] is the image of index a under the group generator. Applies
    to bare indices (ints) and to value vectors indexed by the set (last
    axis), e.g. Q-value vectors under a rotation of gridworld moves.
    """
    gen = np.asarray(generator, dtype=np.int64)
    k = len(gen)
    if not np.array_equal(np.sort(gen), np.arange(k)):
        raise ValueError("generator must be a permutation")
    # order of the generator
    order = 1
    p = gen.copy()
    while not np.array_equal(p, np.arange(k)):
        p = gen[p]
        order += 1
    group = group if group is not None else cyclic_group(order)
    if group.order != order:
        raise ValueError(f"generator has order {order}, group has {group.order}")
    perms = [np.arange(k, dtype=np.int64)]
    for _ in range(order - 1):
        perms.append(gen[perms[-1]])

    def apply_fn(g, x):
        if isinstance(x, (int, np.integer)):
            return int(perms[g][int(x)])
        v = np.asarray(x)
        if v.shape[-1] != k:
            raise ValueError(f"expected trailing axis {k}, got {v.shape}")
        out = np.empty_like(v)
        out[..., perms[g]] = v
        return out

    return GroupAction(group=group, space=f"indices[{k}]", name=name,
                       apply_fn=apply_fn)


def trivial_action(group: FiniteGroup, space: str = "any") -> GroupAction:
    """Any group acting as the identity (invariance tasks)."""
    return GroupAction(group=group, space=space, name="trivial",
                       apply_fn=lambda g, x: x)


def vector_negation(group: FiniteGroup | None = None) -> GroupAction:
    """Z2 acting on real vectors by negation."""
    group = group if group is not None else cyclic_group(2)
    if group.order != 2:
        raise ValueError("vector_negation needs a group of order 2")
    return GroupAction(group=group, space="vector", name="vector_negation",
                       apply_fn=lambda g, x: -np.asarray(x))


_ROT2D = np.array([[0.0, -1.0], [1.0, 0.0]])


def plane_rotation(group: FiniteGroup | None = None) -> GroupAction:
    """Z4 rotating points of the plane by quarter turns.

    The quarter-turn matrix has entries in {0, +-1}, so compatibility holds
    bit-exactly.
    """
    group = group if group is not None else cyclic_group(4)
    if group.order != 4:
        raise ValueError("plane_rotation needs a group of order 4")
    mats = [np.eye(2)]
    for _ in range(3):
        mats.append(_ROT2D @ mats[-1])

    def apply_fn(g, x):
        v = np.asarray(x, dtype=np.float64)
        if v.shape[-1] != 2:
            raise ValueError(f"expected trailing axis 2, got {v.shape}")
        return v @ mats[g].T

    return GroupAction(group=group, space="plane", name="plane_rotation",
                       apply_fn=apply_fn)


# ---------------------------------------------------------------------------
# JSON descriptors
# ---------------------------------------------------------------------------

def group_from_config(cfg: dict) -> FiniteGroup:
    """Build a group from a JSON descriptor like {"kind": "cyclic", "n": 4}."""
    kind = cfg.get("kind")
    if kind == "cyclic":
        return cyclic_group(int(cfg["n"]))
    if kind == "product":
        return product_group(group_from_config(cfg["a"]), group_from_config(cfg["b"]))
    raise ValueError(f"unknown group kind {kind!r}")


def group_to_config(g: FiniteGroup) -> dict:
    if g.label.startswith("Z") and "x" not in g.label:
        return {"kind": "cyclic", "n": g.order}
    raise ValueError(f"no JSON descriptor for group {g.label}")
