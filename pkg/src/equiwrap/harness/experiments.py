"""Experiment drivers behind the CLI subcommands.

Each driver handles one seed at a time and returns a flat metrics dict;
`run_seeds` fans seeds across workers when asked and aggregates. Everything
a driver computes flows from named substreams of the seed, so reruns
reproduce results exactly and aggregation is order-independent.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import __version__
from .. import autodiff as ad
from .. import nn
from ..data import gen_scan, gen_shapes
from ..groups import cyclic_group, rot90_image, trivial_action
from ..kernels import BACKEND
from ..lm import (
    ToyLM, equitune_generate, equizero_generate, fairness_eval, greedy_generate,
    logit_swap_action, toy_scorer, toy_training_corpus, toy_vocab,
    toy_word_sets, train_lm, word_swap_action,
)
from ..optim import Adam
from ..rl import (
    BalanceEnv, DQNConfig, QAgent, balance_actions, dqn_train, equitune_act,
    equizero_act, eval_starts, greedy_act, gridworld_actions, make_gridworld,
    policy_eval,
)
from ..rng import substream
from ..seq2seq import (
    Seq2Seq, equitune_translate, equizero_translate, seq_accuracy,
    train_seq2seq, translate,
)
from ..wrappers import (
    EquiConfig, entropy_loss, equitune_forward, equizero_forward,
    lambda_equitune_forward, make_cubic_fixture, make_lambda_net,
    neg_max_prob, universality_fit,
)
from .config import RunConfig, config_hash


# ---------------------------------------------------------------------------
# vision experiment
# ---------------------------------------------------------------------------

def _vision_data(cfg: RunConfig, seed: int):
    train = gen_shapes(seed, cfg["train_n"], "train")
    test_up = gen_shapes(seed + 1000, cfg["test_n"], "test_upright")
    test_rot = gen_shapes(seed + 2000, cfg["test_n"], "test_rot90")
    return train, test_up, test_rot


def _new_cnn(seed: int):
    return nn.ShapeCNN(substream(seed, "cnn_init"))


def _train_cnn(model, train, cfg: RunConfig, seed: int):
    opt = Adam(model.params(), lr=cfg["lr"])
    for step in range(cfg["steps"]):
        rng = substream(seed, "cnn_train", step)
        idx = rng.integers(0, len(train.images), size=cfg["batch"])
        loss = ad.cross_entropy(model.forward(train.images[idx]),
                                train.labels[idx],
                                smoothing=cfg["label_smoothing"])
        opt.zero_grad()
        ad.backward(loss)
        opt.step()


def _accuracy(predict, ds, chunk: int = 128) -> float:
    hits = 0
    for lo in range(0, len(ds.images), chunk):
        out = np.asarray(predict(ds.images[lo:lo + chunk]))
        hits += int((out.argmax(1) == ds.labels[lo:lo + chunk]).sum())
    return hits / len(ds.images)


def _rot90_cfg(mode="equitune", **kw) -> EquiConfig:
    z4 = cyclic_group(4)
    return EquiConfig(group=z4, input_action=rot90_image(16, z4),
                      output_action=trivial_action(z4, "probs"),
                      mode=mode, **kw)


def _vision_predictor(model, cfg: RunConfig, lambda_net=None):
    """Build predict(images) -> class scores for the configured wrapper."""
    wrapper = cfg["wrapper"]
    prob = nn.ProbClassifier(model)
    if wrapper == "none":
        return lambda x: model.forward(x).data
    if wrapper == "equitune":
        wcfg = _rot90_cfg()
        return lambda x: equitune_forward(prob, wcfg, x).data
    if wrapper == "equizero":
        proxy = (entropy_loss(on_probs=True) if cfg["proxy_loss"] == "entropy"
                 else neg_max_prob(on_probs=True))
        wcfg = _rot90_cfg(mode="equizero", proxy_loss=proxy)
        return lambda x: equizero_forward(prob, wcfg, x).output.data
    if wrapper == "lambda":
        if lambda_net is None:
            raise FileNotFoundError("lambda wrapper needs a trained weight "
                                    "network (run finetune first or set "
                                    "lambda_checkpoint)")
        wcfg = _rot90_cfg(mode="lambda", lambda_net=lambda_net,
                          lambda_feature_frozen=True)
        return lambda x: lambda_equitune_forward(prob, wcfg, x).data
    raise ValueError(f"unknown wrapper {wrapper!r}")


def _rotate_batch(images, rots):
    out = images.copy()
    for i, g in enumerate(rots):
        out[i] = np.rot90(out[i], k=int(g), axes=(-2, -1))
    return out


def vision_pretrain(cfg: RunConfig, seed: int, out: Path) -> dict:
    train, test_up, test_rot = _vision_data(cfg, seed)
    model = _new_cnn(seed)
    _train_cnn(model, train, cfg, seed)
    with ad.no_grad():
        acc_up = _accuracy(lambda x: model.forward(x).data, test_up)
        acc_rot = _accuracy(lambda x: model.forward(x).data, test_rot)
    ckpt = out / f"cnn_seed{seed}.json"
    nn.save_checkpoint(ckpt, model.params(),
                       meta={"seed": seed, **model.describe()})
    return {"seed": seed, "accuracy_upright": acc_up,
            "accuracy_rot90": acc_rot, "checkpoint": str(ckpt)}


def _load_cnn(cfg: RunConfig, seed: int, out: Path):
    path = cfg.get("checkpoint") or str(out / f"cnn_seed{seed}.json")
    path = Path(path.replace("{seed}", str(seed)))
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model = _new_cnn(seed)
    model.load_state(nn.load_checkpoint(path))
    return model


def _load_lambda(cfg: RunConfig, seed: int, out: Path):
    path = cfg.get("lambda_checkpoint") or str(out / f"lambda_seed{seed}.json")
    path = Path(path.replace("{seed}", str(seed)))
    if not path.exists():
        return None
    net = make_lambda_net(64, seed=seed)
    net.load_state(nn.load_checkpoint(path))
    return net


def vision_eval(cfg: RunConfig, seed: int, out: Path) -> dict:
    model = _load_cnn(cfg, seed, out)
    lam = _load_lambda(cfg, seed, out)
    predict = _vision_predictor(model, cfg, lambda_net=lam)
    _, test_up, test_rot = _vision_data(cfg, seed)
    with ad.no_grad():
        acc_up = _accuracy(predict, test_up)
        acc_rot = _accuracy(predict, test_rot)
    return {"seed": seed, "wrapper": cfg["wrapper"],
            "accuracy_upright": acc_up, "accuracy_rot90": acc_rot}


def _nll_on_probs(p, targets):
    return ad.mean(ad.neg(ad.log(ad.gather(p, targets))))


def vision_finetune(cfg: RunConfig, seed: int, out: Path) -> dict:
    """Wrapper-appropriate finetuning on randomly rotated training data.

    equitune: plain gradients through the averaging wrapper. equizero:
    straight-through at the loss level (the reported loss is the selection
    branch's, the gradient is the averaging wrapper's). lambda: phase 1
    trains the weight net with the backbone frozen; phase 2 optionally
    finetunes the backbone with the weight net frozen.
    """
    model = _load_cnn(cfg, seed, out)
    prob = nn.ProbClassifier(model)
    train, _, _ = _vision_data(cfg, seed)
    wrapper = cfg["wrapper"]
    curve = []

    def batches(purpose, steps, batch):
        for step in range(steps):
            rng = substream(seed, purpose, step)
            idx = rng.integers(0, len(train.images), size=batch)
            rots = rng.integers(0, 4, size=batch)
            yield step, _rotate_batch(train.images[idx], rots), train.labels[idx]

    if wrapper in ("equitune", "equizero"):
        wcfg = _rot90_cfg()
        ez_cfg = None
        if wrapper == "equizero":
            proxy = (entropy_loss(on_probs=True)
                     if cfg["proxy_loss"] == "entropy"
                     else neg_max_prob(on_probs=True))
            ez_cfg = _rot90_cfg(mode="equizero", proxy_loss=proxy, ste=True)
        opt = Adam(model.params(), lr=cfg["finetune_lr"])
        for step, x, y in batches("finetune", cfg["finetune_steps"], cfg["batch"]):
            avg_loss = _nll_on_probs(equitune_forward(prob, wcfg, x), y)
            if ez_cfg is not None:
                sel = equizero_forward(prob, ez_cfg, x).output
                sel_loss = _nll_on_probs(sel, y)
                from ..wrappers import ste_surrogate_loss
                loss = ste_surrogate_loss(sel_loss, avg_loss)
            else:
                loss = avg_loss
            if np.isnan(float(loss.data)):
                raise RuntimeError(f"finetune loss became NaN at step {step}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            curve.append((step, float(loss.data)))
        ckpt = out / f"cnn_seed{seed}_ft_{wrapper}.json"
        nn.save_checkpoint(ckpt, model.params(), meta={"seed": seed,
                                                       "finetuned": wrapper})
        result = {"seed": seed, "wrapper": wrapper, "checkpoint": str(ckpt)}
    elif wrapper == "lambda":
        lam = make_lambda_net(64, seed=seed)
        wcfg = _rot90_cfg(mode="lambda", lambda_net=lam,
                          lambda_feature_frozen=True)
        backbone_before = model.state()
        model.set_trainable(False)
        opt = Adam(lam.params(), lr=cfg["lambda_phase1_lr"])
        for step, x, y in batches("lambda_phase1", cfg["lambda_phase1_steps"],
                                  cfg["batch"]):
            loss = _nll_on_probs(lambda_equitune_forward(prob, wcfg, x), y)
            if np.isnan(float(loss.data)):
                raise RuntimeError(f"phase-1 loss became NaN at step {step}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            curve.append((step, float(loss.data)))
        model.set_trainable(True)
        for key, val in model.state().items():
            if not np.array_equal(val, backbone_before[key]):
                raise RuntimeError("phase 1 must leave the backbone frozen")
        if cfg["lambda_phase2_steps"]:
            lam.set_trainable(False)
            opt2 = Adam(model.params(), lr=cfg["lambda_phase2_lr"])
            for step, x, y in batches("lambda_phase2",
                                      cfg["lambda_phase2_steps"], cfg["batch"]):
                loss = _nll_on_probs(lambda_equitune_forward(prob, wcfg, x), y)
                opt2.zero_grad()
                ad.backward(loss)
                opt2.step()
                curve.append((cfg["lambda_phase1_steps"] + step,
                              float(loss.data)))
            lam.set_trainable(True)
        lam_ckpt = out / f"lambda_seed{seed}.json"
        nn.save_checkpoint(lam_ckpt, lam.params(), meta={"seed": seed})
        ckpt = out / f"cnn_seed{seed}_ft_lambda.json"
        nn.save_checkpoint(ckpt, model.params(), meta={"seed": seed})
        result = {"seed": seed, "wrapper": wrapper, "checkpoint": str(ckpt),
                  "lambda_checkpoint": str(lam_ckpt)}
    else:
        raise ValueError(f"finetune needs a wrapper mode, got {wrapper!r}")

    curve_path = out / f"curve_seed{seed}_{wrapper}.csv"
    with curve_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows(curve)
    result["curve"] = str(curve_path)
    result["final_loss"] = curve[-1][1] if curve else float("nan")
    return result


# ---------------------------------------------------------------------------
# RL experiment
# ---------------------------------------------------------------------------

def _make_env(cfg: RunConfig):
    if cfg["env"] == "gridworld":
        return make_gridworld(cfg["grid_n"], cfg["obstacle_seed"],
                              cfg["obstacle_density"])
    return BalanceEnv()


def _rl_agent(cfg: RunConfig, seed: int):
    if cfg["env"] == "gridworld":
        return QAgent(cfg["grid_n"] ** 2, 4, substream(seed, "qinit"),
                      input_scale=0.1)
    return QAgent(4, 2, substream(seed, "qinit"), input_scale=1.0,
                  head_zero=False)


def rl_train(cfg: RunConfig, seed: int, out: Path) -> dict:
    env = _make_env(cfg)
    agent = _rl_agent(cfg, seed)
    dqn_cfg = DQNConfig(buffer_size=cfg["buffer_size"], batch=cfg["batch"],
                        gamma=cfg["gamma"], lr=cfg["lr"],
                        target_every=cfg["target_every"], warmup=cfg["warmup"])
    start_cells = None
    if cfg["env"] == "gridworld" and cfg["quadrant_pretrain"]:
        start_cells = env.quadrant_cells()
        env.fence = set(start_cells)
    curve = dqn_train(env, agent, cfg["steps"], seed=seed, cfg=dqn_cfg,
                      start_cells=start_cells)
    env.fence = None
    ckpt = out / f"qnet_seed{seed}.json"
    nn.save_checkpoint(ckpt, agent.net.params(), meta={"seed": seed,
                                                       "env": cfg["env"]})
    curve_path = out / f"curve_seed{seed}.csv"
    with curve_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "eval_return"])
        w.writerows(curve)
    return {"seed": seed, "checkpoint": str(ckpt), "curve": str(curve_path),
            "final_loss": curve[-1][1]}


def rl_eval(cfg: RunConfig, seed: int, out: Path) -> dict:
    env = _make_env(cfg)
    agent = _rl_agent(cfg, seed)
    path = cfg.get("checkpoint") or str(out / f"qnet_seed{seed}.json")
    path = Path(path.replace("{seed}", str(seed)))
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    agent.net.load_state(nn.load_checkpoint(path))
    if cfg["env"] == "gridworld":
        obs_act, act_act = gridworld_actions(cfg["grid_n"])
    else:
        obs_act, act_act = balance_actions()
    group = obs_act.group
    q = agent.q_values
    starts = eval_starts(env, 100 + seed, cfg["eval_episodes"])
    rets = {
        "raw": policy_eval(env, lambda o: greedy_act(q, o), starts),
        "equitune": policy_eval(
            env, lambda o: equitune_act(q, group, obs_act, act_act, o), starts),
        "equizero": policy_eval(
            env, lambda o: equizero_act(q, group, obs_act, act_act, o), starts),
    }
    row = {"seed": seed}
    for name, r in rets.items():
        row[f"return_{name}"] = float(r.mean())
    return row


# ---------------------------------------------------------------------------
# SCAN experiment
# ---------------------------------------------------------------------------

def scan_run(cfg: RunConfig, seed: int, out: Path) -> dict:
    corpus = gen_scan(cfg["split"])
    model = Seq2Seq(substream(seed, "s2s_init"))
    train_seq2seq(model, corpus.train, cfg["iters"], lr=cfg["lr"], seed=seed,
                  tf_ratio=cfg["teacher_forcing"])
    test_pairs = corpus.test[:cfg["test_limit"]]
    val_acc = seq_accuracy(lambda c: translate(model, c)[0], corpus.val)
    raw_acc = seq_accuracy(lambda c: translate(model, c)[0], test_pairs)
    ez_acc = seq_accuracy(lambda c: equizero_translate(model, corpus, c)[0],
                          test_pairs)
    et_acc = seq_accuracy(lambda c: equitune_translate(model, corpus, c),
                          test_pairs)
    ckpt = out / f"seq2seq_seed{seed}.json"
    nn.save_checkpoint(ckpt, model.params(), meta={"seed": seed,
                                                   "split": cfg["split"]})
    return {"seed": seed, "val_accuracy": val_acc, "test_raw": raw_acc,
            "test_equitune": et_acc, "test_equizero": ez_acc,
            "checkpoint": str(ckpt)}


# ---------------------------------------------------------------------------
# fairness generation experiment
# ---------------------------------------------------------------------------

_DEFAULT_CONTESTS = [
    ["the", "man", "was", "known", "for"],
    ["the", "man", "was", "a"],
    ["the", "man", "is", "a"],
    ["he", "was", "very"],
    ["the", "king", "was", "known", "for"],
]


def fairness_generate(cfg: RunConfig, seed: int, out: Path) -> dict:
    vocab = toy_vocab()
    ws = toy_word_sets(relaxed=cfg["relaxed"])
    action = word_swap_action(ws, vocab)
    la = logit_swap_action(ws, vocab)
    scorer = toy_scorer(seed=0, biased=True)
    lm = ToyLM(substream(seed, "lm_init"), vocab)
    if cfg["lm_steps"]:
        train_lm(lm, toy_training_corpus(seed=seed), cfg["lm_steps"],
                 lr=cfg["lm_lr"], seed=seed)
    contexts = cfg.get("contexts") or _DEFAULT_CONTESTS
    logs = []
    outputs = {"plain": [[], []], "equitune": [[], []], "equizero": [[], []]}
    for ci, words in enumerate(contexts):
        base_ctx = lm.ids(words)
        for demo in (0, 1):
            ctx = list(np.asarray(action.apply(demo, base_ctx), dtype=np.int64))
            toks, _ = greedy_generate(lm, ctx, cfg["total_tokens"])
            outputs["plain"][demo].append(ctx + toks)
            toks, _ = equitune_generate(lm, action, la, ctx,
                                        cfg["total_tokens"])
            outputs["equitune"][demo].append(ctx + toks)
            toks, trace = equizero_generate(lm, action, scorer, ctx,
                                            cfg["beam_len"],
                                            cfg["total_tokens"])
            outputs["equizero"][demo].append(ctx + toks)
            for rec in trace:
                logs.append({"context_id": ci, "demo": demo,
                             "round": rec["round"], "g_star": rec["g_star"],
                             "scores": rec["scores"],
                             "tokens": lm.words(rec["chosen_branch_tokens"])})
    log_path = out / f"generations_seed{seed}.jsonl"
    with log_path.open("w") as fh:
        for rec in logs:
            fh.write(json.dumps(rec) + "\n")
    row = {"seed": seed, "log": str(log_path)}
    for name, per_demo in outputs.items():
        normalized = fairness_eval(per_demo, scorer, action=action)
        raw = fairness_eval(per_demo, scorer)
        row[f"disparity_{name}"] = normalized["disparity"]
        row[f"disparity_raw_{name}"] = raw["disparity"]
        row[f"mean_score_{name}"] = float(np.mean(raw["mean_scores"]))
    return row


# ---------------------------------------------------------------------------
# universality experiment
# ---------------------------------------------------------------------------

def universality_run(cfg: RunConfig, seed: int, out: Path) -> dict:
    fixture = make_cubic_fixture(seed=seed, scale=cfg["target_scale"])
    fixture.grid_n = cfg["grid_n"]
    budgets = sorted(cfg["budgets"])
    result = universality_fit(fixture, budget=budgets[-1], seed=seed,
                              hidden=tuple(cfg["hidden"]), lr=cfg["lr"],
                              snapshots=tuple(budgets[:-1]))
    from ..wrappers import equivariance_gap
    m, wcfg = result["model"], result["config"]
    gap = equivariance_gap(lambda p: lambda_equitune_forward(m, wcfg, p),
                           wcfg, fixture.grid())
    row = {"seed": seed, "equivariance_gap": gap}
    for b in budgets:
        row[f"sup_error_{b}"] = result["errors_by_step"][b]
    return row


# ---------------------------------------------------------------------------
# seed orchestration, summaries, CSV
# ---------------------------------------------------------------------------

_DRIVERS = {
    ("vision", "pretrain"): vision_pretrain,
    ("vision", "eval"): vision_eval,
    ("vision", "finetune"): vision_finetune,
    ("rl", "rl-train"): rl_train,
    ("rl", "rl-eval"): rl_eval,
    ("scan", "scan-run"): scan_run,
    ("fairness", "generate"): fairness_generate,
    ("universality", "universality"): universality_run,
}


def _one_seed(kind: str, command: str, values: dict, seed: int, out_dir: str):
    cfg = RunConfig(kind=kind, values=values)
    return _DRIVERS[(kind, command)](cfg, seed, Path(out_dir))


def run_seeds(cfg: RunConfig, command: str, out: Path,
              parallel: int = 1) -> list[dict]:
    if (cfg.kind, command) not in _DRIVERS:
        raise ValueError(f"subcommand {command!r} does not apply to "
                         f"{cfg.kind!r} configs")
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.seeds
    if parallel > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_one_seed, cfg.kind, command, cfg.values,
                                   s, str(out)) for s in seeds]
            rows = [f.result() for f in futures]
    else:
        rows = [_one_seed(cfg.kind, command, cfg.values, s, str(out))
                for s in seeds]
    return sorted(rows, key=lambda r: r["seed"])


def aggregate(rows: list[dict]) -> dict:
    agg = {}
    if not rows:
        return agg
    for key, val in rows[0].items():
        if key == "seed" or not isinstance(val, (int, float)):
            continue
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        agg[f"{key}_mean"] = float(vals.mean())
        agg[f"{key}_std"] = float(vals.std())
    return agg


def write_metrics_csv(rows: list[dict], path: Path):
    """Deterministic per-seed metrics (numeric and string fields only)."""
    cols = [k for k in rows[0] if isinstance(rows[0][k], (int, float, str))]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[k] for k in cols])


def write_summary(cfg: RunConfig, command: str, rows: list[dict],
                  out: Path, wall_s: float, extra: dict | None = None):
    doc = {
        "format": 1,
        "kind": cfg.kind,
        "command": command,
        "config_hash": config_hash(cfg),
        "toolkit_version": __version__,
        "kernel_backend": BACKEND,
        "seeds": cfg.seeds,
        "per_seed": rows,
        "aggregate": aggregate(rows),
        "timing": {"wall_s": wall_s},
    }
    if extra:
        doc.update(extra)
    (out / "summary.json").write_text(json.dumps(doc, indent=2))
    return doc


def run_command(cfg: RunConfig, command: str, out: Path,
                parallel: int = 1) -> dict:
    t0 = time.perf_counter()
    rows = run_seeds(cfg, command, out, parallel=parallel)
    write_metrics_csv(rows, out / "metrics.csv")
    return write_summary(cfg, command, rows, out, time.perf_counter() - t0)
