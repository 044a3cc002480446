"""Group axioms, constructors, and the built-in actions."""

import json

import numpy as np
import pytest

from equiwrap import groups
from equiwrap.groups import (
    FiniteGroup, act, action_perm, cyclic_group, group_from_config,
    group_to_config, hflip_image, plane_rotation, product_group, rot90_image,
    token_swap, trivial_action, vector_negation, verify_group,
)
from equiwrap.rng import substream


def test_cyclic_group_small_facts():
    z4 = cyclic_group(4)
    assert z4.inv(1) == 3
    assert z4.mul(2, 3) == 1
    z1 = cyclic_group(1)
    assert z1.order == 1 and z1.identity == 0


def test_cyclic_group_rejects_nonpositive():
    with pytest.raises(ValueError):
        cyclic_group(0)


def test_product_group_klein_four():
    k4 = product_group(cyclic_group(2), cyclic_group(2))
    assert k4.order == 4
    for g in range(1, 4):
        assert k4.inv(g) == g


def test_product_group_identity_factor_isomorphic():
    z4 = cyclic_group(4)
    prod = product_group(z4, cyclic_group(1))
    # index map is the identity when |b| == 1
    assert np.array_equal(prod.cayley, z4.cayley)
    assert np.array_equal(prod.inverse, z4.inverse)


def test_product_group_componentwise_oracle():
    a, b = cyclic_group(2), cyclic_group(4)
    prod = product_group(a, b)
    # (1,1) * (1,3) = (0,0)
    assert prod.mul(1 * 4 + 1, 1 * 4 + 3) == 0
    # every entry against the componentwise oracle
    for i in range(prod.order):
        for j in range(prod.order):
            ia, ib = divmod(i, 4)
            ja, jb = divmod(j, 4)
            expect = a.mul(ia, ja) * 4 + b.mul(ib, jb)
            assert prod.mul(i, j) == expect


def test_verify_group_accepts_constructors():
    for g in (cyclic_group(1), cyclic_group(5),
              product_group(cyclic_group(2), cyclic_group(2)),
              product_group(cyclic_group(3), cyclic_group(4))):
        assert verify_group(g).ok, str(verify_group(g))


def test_verify_group_reports_cancellation_failure():
    # cayley[1][1] = 1 with 1 != 0: row 1 is not a permutation
    bad = FiniteGroup(order=2, cayley=np.array([[0, 1], [1, 1]]),
                      inverse=np.array([0, 1]), label="bad")
    d = verify_group(bad)
    assert not d.ok and not d.closure_ok


def test_verify_group_reports_broken_identity():
    z3 = cyclic_group(3)
    cay = z3.cayley.copy()
    cay[[0, 1]] = cay[[1, 0]]  # row swap keeps closure but moves the identity
    d = verify_group(FiniteGroup(order=3, cayley=cay, inverse=z3.inverse,
                                 label="shifted"))
    assert not d.identity_ok


def test_verify_group_reports_broken_inverse():
    z3 = cyclic_group(3)
    d = verify_group(FiniteGroup(order=3, cayley=z3.cayley,
                                 inverse=np.array([0, 1, 2]), label="badinv"))
    assert not d.inverse_ok


# The smallest table that passes closure/identity/inverse yet fails
# associativity is an order-5 loop (order <= 4 Latin squares with identity are
# groups); frozen here with its witness, re-derived by the brute-force scan.
_LOOP5 = np.array([[0, 1, 2, 3, 4],
                   [1, 0, 3, 4, 2],
                   [2, 4, 0, 1, 3],
                   [3, 2, 4, 0, 1],
                   [4, 3, 1, 2, 0]])


def test_verify_group_associativity_witness():
    loop = FiniteGroup(order=5, cayley=_LOOP5, inverse=np.arange(5),
                       label="loop5")
    d = verify_group(loop)
    assert d.closure_ok and d.identity_ok and d.inverse_ok
    assert not d.associativity_ok
    kind, (i, j, k) = d.witness
    assert kind == "associativity"
    assert _LOOP5[_LOOP5[i, j], k] != _LOOP5[i, _LOOP5[j, k]]


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------

def test_rot90_pinned_convention():
    a = rot90_image(2)
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert act(a, 1, x).tolist() == [[2.0, 4.0], [1.0, 3.0]]


def test_rot90_twice_equals_rot180():
    a = rot90_image(8)
    rng = substream(0, "rot90_test")
    for _ in range(10):
        x = rng.normal(size=(8, 8))
        np.testing.assert_array_equal(act(a, 1, act(a, 1, x)), act(a, 2, x))


def _sample_actions():
    z4 = cyclic_group(4)
    rng = substream(7, "action_points")
    return [
        (rot90_image(6), lambda: rng.normal(size=(2, 6, 6))),
        (hflip_image(6), lambda: rng.normal(size=(1, 6, 6))),
        (token_swap(10, [(2, 5), (3, 7)], on="logits"),
         lambda: rng.normal(size=(10,))),
        (token_swap(10, [(2, 5), (3, 7)], on="tokens"),
         lambda: rng.integers(0, 10, size=8)),
        (action_perm([3, 0, 1, 2]), lambda: rng.normal(size=(4,))),
        (trivial_action(z4), lambda: rng.normal(size=(5,))),
        (vector_negation(), lambda: rng.normal(size=(6,))),
        (plane_rotation(), lambda: rng.normal(size=(2,))),
    ]


def test_action_axioms_bit_exact():
    for action, sample in _sample_actions():
        n = action.group.order
        for _ in range(100):
            x = sample()
            np.testing.assert_array_equal(np.asarray(act(action, 0, x)),
                                          np.asarray(x))
            for g in range(n):
                for h in range(n):
                    lhs = act(action, g, act(action, h, x))
                    rhs = act(action, action.group.mul(g, h), x)
                    np.testing.assert_array_equal(np.asarray(lhs), np.asarray(rhs))


def test_action_inverse_roundtrip_bit_exact():
    for action, sample in _sample_actions():
        for _ in range(20):
            x = sample()
            for g in action.group.elements():
                back = act(action, action.group.inv(g), act(action, g, x))
                np.testing.assert_array_equal(np.asarray(back), np.asarray(x))


def test_action_perm_on_indices():
    a = action_perm([3, 0, 1, 2])
    assert a.group.order == 4
    assert act(a, 1, 0) == 3
    assert act(a, 2, 0) == 2


def test_rot90_shape_mismatch_raises():
    a = rot90_image(4)
    with pytest.raises(ValueError):
        act(a, 1, np.zeros((3, 5)))
    with pytest.raises(ValueError):
        act(a, 4, np.zeros((4, 4)))


def test_token_swap_overlap_rejected():
    with pytest.raises(ValueError):
        token_swap(8, [(1, 2), (2, 3)])


def test_group_json_roundtrip():
    cfg = json.loads('{"group": {"kind": "cyclic", "n": 4}}')
    g = group_from_config(cfg["group"])
    assert g.order == 4
    assert group_to_config(g) == {"kind": "cyclic", "n": 4}
    prod = group_from_config({"kind": "product",
                              "a": {"kind": "cyclic", "n": 2},
                              "b": {"kind": "cyclic", "n": 2}})
    assert prod.order == 4


def test_groups_are_immutable():
    z = cyclic_group(3)
    with pytest.raises(ValueError):
        z.cayley[0, 0] = 1
