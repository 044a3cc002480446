"""equiwrap: provably equivariant wrappers around arbitrary backbones.

Three wrapping strategies over a finite group G:

- uniform averaging over group-transformed inputs,
- canonical selection by a proxy loss (pick the best branch, un-transform it),
- learned weighted averaging with strictly positive importance weights.

Plus a minimal float64 autodiff core, synthetic datasets, desk-scale
experiment harnesses (vision, RL, sequence translation, fair generation) and
a CLI (`equiwrap`).
"""

__version__ = "0.1.0"

from .groups import (  # noqa: F401
    FiniteGroup, GroupAction, cyclic_group, product_group, verify_group, act,
    rot90_image, hflip_image, token_swap, action_perm, trivial_action,
    vector_negation, plane_rotation,
)
from .autodiff import DiffValue, backward, detach, grad_check  # noqa: F401
from .wrappers import (  # noqa: F401
    EquiConfig, ProxyLoss, equitune_forward, equizero_forward,
    lambda_equitune_forward, make_lambda_net,
    neg_max_prob, entropy_loss, neg_max_softmax_q,
)
from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
