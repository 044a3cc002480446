"""Latency/memory micro-benchmark for the wrappers and the conv backends.

Wall-clock medians + IQR over repeated single-batch forwards, plus a
deterministic allocation-counter estimate of working memory (byte counts of
arrays created per forward, not OS RSS). The weight network runs with a
frozen snapshot feature extractor, so its extra cost is visible exactly as
in the two-encoder finetuning setup it mirrors.
"""

from __future__ import annotations

import copy
import time

import numpy as np

from .. import autodiff as ad
from .. import nn
from ..groups import cyclic_group, rot90_image, trivial_action
from ..kernels import available_backends
from ..rng import substream
from ..wrappers import (
    EquiConfig, equitune_forward, equizero_forward, lambda_equitune_forward,
    make_lambda_net, neg_max_prob,
)


def _timed(fn, reps: int, warmup: int):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    times = np.asarray(times)
    q25, q50, q75 = np.percentile(times, (25, 50, 75))
    return {"median_s": float(q50), "iqr_s": float(q75 - q25)}


def _alloc_of(fn) -> int:
    ad.reset_alloc_bytes()
    fn()
    return ad.alloc_bytes()


def bench_wrappers(backbone=None, group=None, batch: int = 32,
                   reps: int = 100, warmup: int = 10, seed: int = 0) -> dict:
    """Median latency and allocation estimate per wrapper on one batch.

    Defaults to the shape CNN under the quarter-turn group. Returns rows for
    the bare backbone and the three wrappers, plus conv-kernel backend rows.
    """
    if backbone is None:
        backbone = nn.ShapeCNN(substream(seed, "bench_cnn"))
    group = group or cyclic_group(4)
    prob = nn.ProbClassifier(backbone)
    x = substream(seed, "bench_batch").random((batch, 1, 16, 16))

    frozen = nn.ShapeCNN(substream(seed, "bench_cnn"))
    frozen.load_state(backbone.state())
    frozen.set_trainable(False)

    if group.order == 1:
        in_act = trivial_action(group, "image")
    else:
        in_act = rot90_image(16, group)
    out_act = trivial_action(group, "probs")
    base = dict(group=group, input_action=in_act, output_action=out_act)
    ez_cfg = EquiConfig(mode="equizero", proxy_loss=neg_max_prob(on_probs=True),
                        **base)
    et_cfg = EquiConfig(**base)
    lam_cfg = EquiConfig(mode="lambda", lambda_net=make_lambda_net(64, seed),
                         lambda_feature_source=frozen, **base)

    def bare():
        with ad.no_grad():
            prob.forward(x)

    def equitune():
        with ad.no_grad():
            equitune_forward(prob, et_cfg, x)

    def equizero():
        with ad.no_grad():
            equizero_forward(prob, ez_cfg, x)

    def lam():
        with ad.no_grad():
            lambda_equitune_forward(prob, lam_cfg, x)

    rows = {}
    for name, fn in (("bare", bare), ("equitune", equitune),
                     ("equizero", equizero), ("lambda", lam)):
        rows[name] = {**_timed(fn, reps, warmup), "alloc_bytes": _alloc_of(fn)}
    return rows


def bench_kernels(batch: int = 32, reps: int = 50, warmup: int = 5,
                  seed: int = 0) -> dict:
    """Compare the compiled and numpy conv kernels at the CNN's shapes."""
    rng = substream(seed, "bench_kernels")
    shapes = {
        "conv_1to8": ((batch, 1, 16, 16), (8, 1, 3, 3)),
        "conv_8to16": ((batch, 8, 16, 16), (16, 8, 3, 3)),
    }
    out = {}
    for backend, (fwd, bwd) in available_backends().items():
        for label, (xs, ws) in shapes.items():
            x = rng.normal(size=xs)
            w = rng.normal(size=ws)
            b = rng.normal(size=ws[0])
            gy = rng.normal(size=(xs[0], ws[0], xs[2], xs[3]))
            out[f"{backend}.{label}.forward"] = _timed(
                lambda: fwd(x, w, b), reps, warmup)
            out[f"{backend}.{label}.backward"] = _timed(
                lambda: bwd(x, w, gy), reps, warmup)
    return out


def bench_run(cfg, seed: int = 0) -> dict:
    wrappers = bench_wrappers(batch=cfg["batch"], reps=cfg["reps"],
                              warmup=cfg["warmup_reps"], seed=seed)
    kernels = bench_kernels(batch=cfg["batch"], seed=seed)
    return {"wrappers": wrappers, "kernels": kernels}
