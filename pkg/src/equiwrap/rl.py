"""Symmetric toy environments, DQN pretraining, and wrapped policies.

GridworldEnv is exactly invariant under quarter-turn rotations (goal at the
center, obstacle mask symmetrized); BalanceEnv is a linearized cart-pole
whose dynamics are exactly odd under mirroring, with the two actions
swapping. Policies built on a pretrained Q-network: plain greedy, the
group-averaged Q policy, and confidence-based branch selection over the
group orbit.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .groups import GroupAction, action_perm, cyclic_group, rot90_image, vector_negation
from .optim import Adam
from .rng import substream

__all__ = [
    "GridworldEnv", "BalanceEnv", "QAgent", "DQNConfig", "TrainingDiverged",
    "make_gridworld", "dqn_train", "equizero_act", "equitune_act",
    "greedy_act", "policy_eval", "policy_eval_seeds", "eval_starts",
    "gridworld_actions", "balance_actions",
]


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------

# moves indexed up, right, down, left
_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


def gridworld_actions(n: int):
    """(observation action, action-index action) realizing the rotation."""
    z4 = cyclic_group(4)
    # under one CCW turn of the grid, "up" becomes "left": a -> (a - 1) mod 4
    return rot90_image(n, z4), action_perm([3, 0, 1, 2], z4, name="move_perm")


def balance_actions():
    z2 = cyclic_group(2)
    return vector_negation(z2), action_perm([1, 0], z2, name="mirror_swap")


class GridworldEnv:
    """Odd-sided grid, goal at the center, quarter-turn symmetric obstacles.

    Every step costs 0.01; entering the goal additionally pays +1 and ends
    the episode. Moves into walls or obstacles leave the agent in place.
    """

    step_penalty = -0.01
    goal_reward = 1.0
    n_actions = 4

    def __init__(self, n: int = 7, obstacles: np.ndarray | None = None):
        if n % 2 == 0 or n < 3:
            raise ValueError("side length must be odd and >= 3")
        self.n = n
        self.goal = (n // 2, n // 2)
        self.max_steps = 4 * n
        self.obstacles = (np.zeros((n, n), dtype=bool)
                          if obstacles is None else obstacles.astype(bool))
        if self.obstacles[self.goal]:
            raise ValueError("goal cell must be free")
        self.pos = (0, 0)
        self.steps = 0
        self.fence = None     # optional set of allowed cells (pretraining)

    def free_cells(self):
        return [(r, c) for r in range(self.n) for c in range(self.n)
                if not self.obstacles[r, c] and (r, c) != self.goal]

    def quadrant_cells(self, include_goal_block: bool = True):
        """Cells of the upper-left block (the symmetry-broken pretraining
        region). The block reaches the central row/column so the goal stays
        reachable when the region is fenced."""
        h = self.n // 2 + (1 if include_goal_block else 0)
        return [(r, c) for (r, c) in self.free_cells() if r < h and c < h]

    def reset(self, pos) -> np.ndarray:
        self.pos = tuple(int(v) for v in pos)
        self.steps = 0
        return self.obs()

    def obs(self) -> np.ndarray:
        # agent-position plane only: goal and obstacles are constant for a
        # given layout, so they carry no information, and constant input
        # features would let Q-values drift in never-visited regions
        plane = np.zeros((1, self.n, self.n))
        plane[0][self.pos] = 1.0
        return plane

    def step(self, action: int):
        self.steps += 1
        dr, dc = _MOVES[int(action)]
        r, c = self.pos[0] + dr, self.pos[1] + dc
        blocked = not (0 <= r < self.n and 0 <= c < self.n) or self.obstacles[r, c]
        if self.fence is not None and (r, c) != self.goal and (r, c) not in self.fence:
            blocked = True
        if not blocked:
            self.pos = (r, c)
        reward = self.step_penalty
        done = False
        if self.pos == self.goal:
            reward += self.goal_reward
            done = True
        if self.steps >= self.max_steps:
            done = True
        return self.obs(), reward, done

    def shortest_path_lengths(self) -> dict:
        """BFS distances to the goal over free cells (analytic oracle)."""
        from collections import deque as dq
        dist = {self.goal: 0}
        q = dq([self.goal])
        while q:
            r, c = q.popleft()
            for dr, dc in _MOVES:
                nxt = (r + dr, c + dc)
                if (0 <= nxt[0] < self.n and 0 <= nxt[1] < self.n
                        and not self.obstacles[nxt] and nxt not in dist):
                    dist[nxt] = dist[(r, c)] + 1
                    q.append(nxt)
        return dist


def make_gridworld(n: int = 7, obstacle_seed: int = 0,
                   density: float = 0.12) -> GridworldEnv:
    """Quarter-turn symmetric obstacle layout with all free cells connected."""
    for attempt in range(64):
        rng = substream(obstacle_seed, "gridworld_obstacles", attempt)
        mask = rng.random((n, n)) < density
        sym = mask | np.rot90(mask, 1) | np.rot90(mask, 2) | np.rot90(mask, 3)
        sym[n // 2, n // 2] = False
        env = GridworldEnv(n, sym)
        if len(env.shortest_path_lengths()) == (n * n - int(sym.sum())):
            return env
    raise RuntimeError("could not build a connected symmetric layout")


class BalanceEnv:
    """Linearized cart-pole; dynamics exactly odd under state negation with
    the push-left/push-right actions swapped."""

    n_actions = 2
    dt = 0.02
    force = 10.0
    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5
    x_limit = 2.4
    theta_limit = 12 * np.pi / 180.0
    max_steps = 200

    def __init__(self):
        self.state = np.zeros(4)
        self.steps = 0

    def reset(self, state) -> np.ndarray:
        self.state = np.asarray(state, dtype=np.float64).copy()
        self.steps = 0
        return self.state.copy()

    def step(self, action: int):
        x, x_dot, th, th_dot = self.state
        f = self.force if action == 1 else -self.force
        total = self.masscart + self.masspole
        ml = self.masspole * self.length
        temp = f / total
        th_acc = (self.gravity * th - temp) / (
            self.length * (4.0 / 3.0 - self.masspole / total))
        x_acc = temp - ml * th_acc / total
        self.state = self.state + self.dt * np.array(
            [x_dot, x_acc, th_dot, th_acc])
        self.steps += 1
        x, _, th, _ = self.state
        failed = abs(x) > self.x_limit or abs(th) > self.theta_limit
        done = failed or self.steps >= self.max_steps
        return self.state.copy(), 0.0 if failed else 1.0, done


# ---------------------------------------------------------------------------
# DQN
# ---------------------------------------------------------------------------

@dataclass
class DQNConfig:
    buffer_size: int = 10_000
    batch: int = 64
    gamma: float = 0.99
    lr: float = 1e-4
    eps_start: float = 1.0
    eps_final: float = 0.05
    eps_fraction: float = 0.5     # decay over this fraction of total steps
    target_every: int = 500
    warmup: int = 500
    hidden: tuple = (64, 64)


class QAgent:
    """Q-network + frozen target copy + uniform replay buffer."""

    def __init__(self, obs_dim: int, n_actions: int, rng,
                 hidden=(64, 64), head_zero: bool = True,
                 input_scale: float = 0.3):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.net = nn.MLP((obs_dim, *hidden, n_actions), rng)
        if head_zero:
            # zero-init head + damped first layer: states never visited
            # during training keep near-flat Q-vectors (their input columns
            # receive no gradient), which is what makes softmax confidence
            # an honest "was this region explored" signal
            self.net.layers[-1].w.data[...] = 0.0
            self.net.layers[0].w.data *= input_scale
        self.target = nn.MLP((obs_dim, *hidden, n_actions),
                             substream(0, "qagent_target_init"))
        self.target.set_trainable(False)
        self.sync_target()
        self.buffer: deque = deque(maxlen=10_000)

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            out = self.net.forward(ad.value(obs.reshape(1, -1)))
        return out.data[0]

    def q_batch(self, obs: np.ndarray):
        return self.net.forward(ad.value(obs.reshape(obs.shape[0], -1)))

    def target_q_batch(self, obs: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            out = self.target.forward(ad.value(obs.reshape(obs.shape[0], -1)))
        return out.data

    def sync_target(self):
        self.target.load_state(self.net.state())


def dqn_train(env, agent: QAgent, steps: int, seed: int,
              cfg: DQNConfig | None = None, start_cells=None,
              eval_every: int = 0, eval_fn=None):
    """Standard DQN loop: replay, target network, linear epsilon decay.

    `start_cells` restricts the reset distribution (gridworld quadrant
    pretraining); BalanceEnv resets sample a small random state instead.
    Deterministic per (seed, cfg). Returns the learning curve rows.
    """
    cfg = cfg or DQNConfig()
    if steps < cfg.batch:
        raise ValueError("steps must cover at least one batch")
    agent.buffer = deque(maxlen=cfg.buffer_size)
    opt = Adam(agent.net.params(), lr=cfg.lr)
    explore = substream(seed, "dqn_explore")
    resets = substream(seed, "dqn_resets")
    sampler = substream(seed, "dqn_replay")

    def reset_env():
        if start_cells is not None:
            return env.reset(start_cells[int(resets.integers(0, len(start_cells)))])
        if isinstance(env, GridworldEnv):
            cells = env.free_cells()
            return env.reset(cells[int(resets.integers(0, len(cells)))])
        return env.reset(resets.uniform(-0.05, 0.05, size=4))

    obs = reset_env()
    eps_span = max(1, int(steps * cfg.eps_fraction))
    curve = []
    for step in range(1, steps + 1):
        eps = cfg.eps_start + (cfg.eps_final - cfg.eps_start) * min(
            1.0, step / eps_span)
        if explore.random() < eps:
            action = int(explore.integers(0, agent.n_actions))
        else:
            action = int(np.argmax(agent.q_values(obs)))
        nxt, reward, done = env.step(action)
        agent.buffer.append((obs.reshape(-1), action, reward,
                             nxt.reshape(-1), float(done)))
        obs = reset_env() if done else nxt

        loss_val = float("nan")
        if len(agent.buffer) >= max(cfg.warmup, cfg.batch):
            idx = sampler.integers(0, len(agent.buffer), size=cfg.batch)
            batch = [agent.buffer[int(i)] for i in idx]
            s = np.stack([b[0] for b in batch])
            a = np.array([b[1] for b in batch])
            r = np.array([b[2] for b in batch])
            s2 = np.stack([b[3] for b in batch])
            d = np.array([b[4] for b in batch])
            target = r + cfg.gamma * (1.0 - d) * agent.target_q_batch(s2).max(axis=1)
            q = ad.gather(agent.q_batch(s), a)
            loss = ad.mse(q, ad.value(target))
            loss_val = float(loss.data)
            if np.isnan(loss_val):
                raise TrainingDiverged(f"loss became NaN at step {step}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        if step % cfg.target_every == 0:
            agent.sync_target()
        if eval_every and step % eval_every == 0:
            ret = eval_fn() if eval_fn is not None else float("nan")
            curve.append((step, loss_val, ret))
        elif step == steps or step % max(1, steps // 50) == 0:
            curve.append((step, loss_val, float("nan")))
    return curve


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

def _softmax(v):
    z = v - v.max()
    e = np.exp(z)
    return e / e.sum()


def greedy_act(q_fn, s) -> int:
    return int(np.argmax(q_fn(s)))


def equizero_act(q_fn, group, obs_action: GroupAction,
                 act_action: GroupAction, s) -> int:
    """Pick the orbit branch with the highest max softmax-normalized Q-value,
    act greedily there, and map the action back through the inverse element.
    Ties break to the lowest element, then the lowest action index."""
    best_g, best_conf = 0, -np.inf
    for g in group.elements():
        q = q_fn(np.asarray(obs_action.apply(g, s)))
        conf = float(_softmax(q).max())
        if conf > best_conf:
            best_g, best_conf = g, conf
    q_star = q_fn(np.asarray(obs_action.apply(best_g, s)))
    a_star = int(np.argmax(q_star))
    return int(act_action.apply(group.inv(best_g), a_star))


def equitune_act(q_fn, group, obs_action: GroupAction,
                 act_action: GroupAction, s) -> int:
    """Average the inverse-permuted Q-vectors over the orbit, then argmax."""
    acc = None
    for g in group.elements():
        q = q_fn(np.asarray(obs_action.apply(g, s)))
        q_back = np.asarray(act_action.apply(group.inv(g), q))
        acc = q_back if acc is None else acc + q_back
    return int(np.argmax(acc / group.order))


def policy_eval(env, policy, starts):
    """Deterministic rollouts from the given start states; returns returns."""
    out = []
    for start in starts:
        obs = env.reset(start)
        total = 0.0
        done = False
        while not done:
            obs, reward, done = env.step(policy(obs))
            total += reward
        out.append(total)
    return np.asarray(out)


def eval_starts(env, seed: int, episodes: int):
    """Deterministic start states for a seed's evaluation sweep."""
    rng = substream(seed, "eval_starts")
    if isinstance(env, GridworldEnv):
        cells = env.free_cells()
        return [cells[int(rng.integers(0, len(cells)))] for _ in range(episodes)]
    return [rng.uniform(-0.05, 0.05, size=4) for _ in range(episodes)]


def policy_eval_seeds(env, policy, episodes: int, seeds):
    """Per-seed deterministic evaluations; returns (mean, std, per-seed means)."""
    per_seed = []
    for seed in seeds:
        rets = policy_eval(env, policy, eval_starts(env, seed, episodes))
        per_seed.append(float(rets.mean()))
    arr = np.asarray(per_seed)
    return float(arr.mean()), float(arr.std()), per_seed
