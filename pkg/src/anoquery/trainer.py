"""Streaming training environment and the policy-gradient training loop.

Episodes stream one instance at a time from a shuffled labeled dataset; the
action is query (1) or skip (0). Querying reveals the ground-truth label,
pays +1 for an anomaly or a small penalty for a normal instance, and feeds
the label back into the per-instance features. Rollouts of fixed length may
span episode boundaries; advantage estimation resets across them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import detector, features, policy
from .data import ANOMALY, RawDataset, StandardizedDataset, standardize
from .features import QS_ANOMALY, QS_NORMAL, apply_feature_mask, feature_row
from .policy import AdamState, PolicyModel, PpoBatch, PpoHyper

EPISODE_LIMIT = 2000
NEGATIVE_REWARD = -0.1


@dataclass
class EnvConfig:
    """Environment knobs outside the PPO hyperparameters."""

    episode_limit: int = EPISODE_LIMIT
    negative_reward: float = NEGATIVE_REWARD
    knn_k: int = features.DEFAULT_K
    n_trees: int = detector.DEFAULT_TREES
    psi: int = detector.DEFAULT_PSI
    feature_mask: tuple[int, ...] = ()


@dataclass
class PreparedDataset:
    """A labeled dataset with everything label-independent precomputed:
    standardized rows, frozen detector scores, neighbor table, and the
    distance sentinel."""

    name: str
    X_std: np.ndarray
    y: np.ndarray
    scores: np.ndarray
    knn_idx: np.ndarray
    d_cap: float

    @property
    def n(self) -> int:
        return self.X_std.shape[0]


def prepare_dataset(
    ds: RawDataset | StandardizedDataset, seed: int, cfg: EnvConfig | None = None
) -> PreparedDataset:
    """Standardize, fit the detector, and freeze per-dataset tables."""
    cfg = cfg or EnvConfig()
    if ds.y is None:
        raise ValueError(f"dataset {ds.name!r} has no labels")
    std = standardize(ds) if isinstance(ds, RawDataset) else ds
    forest = detector.fit(std.X_std, n_trees=cfg.n_trees, psi=cfg.psi, seed=seed)
    scores = detector.score_all(forest, std.X_std)
    return PreparedDataset(
        name=std.name,
        X_std=std.X_std,
        y=np.asarray(std.y, dtype=np.int8),
        scores=scores,
        knn_idx=features.knn_indices(std.X_std, cfg.knn_k),
        d_cap=features.init_cap(std.X_std, seed),
    )


class StreamEnv:
    """One-instance-at-a-time labeling environment over a pool of prepared
    datasets. Each episode samples a dataset, draws a fresh permutation, and
    runs for min(episode_limit, n) steps."""

    def __init__(
        self,
        datasets: list[PreparedDataset],
        seed: int,
        cfg: EnvConfig | None = None,
    ):
        if not datasets:
            raise ValueError("at least one labeled training dataset is required")
        self.datasets = datasets
        self.cfg = cfg or EnvConfig()
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._ds: PreparedDataset | None = None
        self._perm: np.ndarray | None = None
        self._qs: np.ndarray | None = None
        self._anom_idx = np.empty(0, dtype=np.int64)
        self._norm_idx = np.empty(0, dtype=np.int64)
        self._steps = 0
        self._limit = 0
        self._done = True

    def reset(self) -> np.ndarray:
        """Start a new episode; returns the first streamed instance's
        features (all distance columns at d_cap, flag 0)."""
        self._ds = self.datasets[int(self._rng.integers(len(self.datasets)))]
        self._perm = self._rng.permutation(self._ds.n)
        self._qs = np.zeros(self._ds.n, dtype=np.int8)
        self._anom_idx = np.empty(0, dtype=np.int64)
        self._norm_idx = np.empty(0, dtype=np.int64)
        self._steps = 0
        self._limit = min(self.cfg.episode_limit, self._ds.n)
        self._done = False
        return self._state_row(int(self._perm[0]))

    def step(self, action: int) -> tuple[np.ndarray | None, float, bool]:
        """Apply query/skip to the current instance; returns (next state,
        reward, done). The next state is None once the episode is over."""
        if self._done:
            raise RuntimeError("step() after episode end; call reset()")
        ds = self._ds
        i = int(self._perm[self._steps])
        reward = 0.0
        if action == 1:
            if ds.y[i] == ANOMALY:
                reward = 1.0
                self._qs[i] = QS_ANOMALY
                pos = int(np.searchsorted(self._anom_idx, i))
                self._anom_idx = np.insert(self._anom_idx, pos, i)
            else:
                reward = self.cfg.negative_reward
                self._qs[i] = QS_NORMAL
                pos = int(np.searchsorted(self._norm_idx, i))
                self._norm_idx = np.insert(self._norm_idx, pos, i)
        elif action != 0:
            raise ValueError(f"action must be 0 or 1, got {action}")
        self._steps += 1
        if self._steps >= self._limit:
            self._done = True
            return None, reward, True
        return self._state_row(int(self._perm[self._steps])), reward, False

    def _state_row(self, i: int) -> np.ndarray:
        ds = self._ds
        row = feature_row(
            ds.X_std,
            float(ds.scores[i]),
            self._anom_idx,
            self._norm_idx,
            self._qs,
            ds.knn_idx[i],
            i,
            ds.d_cap,
        )
        if self.cfg.feature_mask:
            row = apply_feature_mask(row, self.cfg.feature_mask, ds.d_cap)
        return row

    @property
    def episode_steps(self) -> int:
        return self._steps

    @property
    def query_state(self) -> np.ndarray:
        return self._qs


@dataclass
class Rollout:
    """Fixed-length trajectory slice collected under the pre-update policy.

    dones[t] means the step at t ended an episode (the following state was
    a fresh reset). bootstrap_value is V of the state after the last step
    and is ignored when dones[-1] is set.
    """

    states: np.ndarray
    actions: np.ndarray
    logprobs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap_value: float


def gae(rollout: Rollout, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one rollout.

    A_t accumulates (gamma*lam)-discounted TD errors, truncated at the
    rollout end and reset across episode boundaries. Value targets are
    A_t + V(s_t).
    """
    T = len(rollout.rewards)
    adv = np.zeros(T, dtype=np.float64)
    lastgaelam = 0.0
    for t in reversed(range(T)):
        next_value = rollout.bootstrap_value if t == T - 1 else rollout.values[t + 1]
        nonterminal = 0.0 if rollout.dones[t] else 1.0
        delta = rollout.rewards[t] + gamma * nonterminal * next_value - rollout.values[t]
        lastgaelam = delta + gamma * lam * nonterminal * lastgaelam
        adv[t] = lastgaelam
    return adv, adv + rollout.values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


@dataclass
class TrainResult:
    model: PolicyModel
    diagnostics: list[dict] = field(default_factory=list)
    elapsed_seconds: float = 0.0


def train(
    datasets: list[RawDataset | PreparedDataset],
    hyper: PpoHyper | None = None,
    seed: int = 0,
    env_cfg: EnvConfig | None = None,
    hidden: tuple[int, int] = (64, 64),
) -> TrainResult:
    """Train the query policy on labeled datasets.

    Per iteration: collect rollout_steps transitions with the current
    policy (sampling actions), estimate advantages, normalize them to zero
    mean / unit std, then run epochs x minibatches clipped updates with
    global gradient-norm clipping. Runs ceil(total_timesteps /
    rollout_steps) iterations. Fully deterministic given the seed.
    """
    hyper = hyper or PpoHyper()
    env_cfg = env_cfg or EnvConfig()
    t_start = time.perf_counter()

    ss = np.random.SeedSequence(seed)
    init_ss, env_ss, act_ss, mb_ss, prep_ss = ss.spawn(5)
    prepared: list[PreparedDataset] = []
    prep_children = prep_ss.spawn(len(datasets))
    for ds, child in zip(datasets, prep_children):
        if isinstance(ds, PreparedDataset):
            prepared.append(ds)
        else:
            prepared.append(prepare_dataset(ds, int(child.generate_state(1)[0]), env_cfg))

    model = policy.init_model(int(init_ss.generate_state(1)[0]), hidden=hidden)
    adam = AdamState.for_model(model)
    env = StreamEnv(prepared, int(env_ss.generate_state(1)[0]), env_cfg)
    act_rng = np.random.Generator(np.random.PCG64(act_ss))
    mb_rng = np.random.Generator(np.random.PCG64(mb_ss))

    T = hyper.rollout_steps
    n_rollouts = math.ceil(hyper.total_timesteps / T)
    mb_size = T // hyper.minibatches

    diagnostics: list[dict] = []
    episode_returns: list[float] = []
    ep_ret = 0.0
    obs = env.reset()
    global_step = 0

    for _ in range(n_rollouts):
        states = np.empty((T, model.n_inputs))
        actions = np.empty(T, dtype=np.int64)
        logprobs = np.empty(T)
        rewards = np.empty(T)
        values = np.empty(T)
        dones = np.zeros(T, dtype=bool)
        finished_returns: list[float] = []

        for t in range(T):
            probs, logp, value = policy.forward_logp(model, obs)
            action = 1 if act_rng.random() < probs[1] else 0
            states[t] = obs
            actions[t] = action
            logprobs[t] = logp[action]
            values[t] = value
            next_obs, reward, done = env.step(action)
            rewards[t] = reward
            dones[t] = done
            ep_ret += reward
            if done:
                finished_returns.append(ep_ret)
                episode_returns.append(ep_ret)
                ep_ret = 0.0
                next_obs = env.reset()
            obs = next_obs
        global_step += T

        if dones[-1]:
            bootstrap = 0.0
        else:
            _, _, bootstrap = policy.forward_logp(model, obs)
        rollout = Rollout(states, actions, logprobs, rewards, values, dones, bootstrap)
        adv, vtarget = gae(rollout, hyper.gamma, hyper.lam)
        batch = PpoBatch(states, actions, logprobs, normalize_advantages(adv), vtarget)

        update_diags: list[dict] = []
        for _epoch in range(hyper.epochs):
            perm = mb_rng.permutation(T)
            for mb in range(hyper.minibatches):
                idx = perm[mb * mb_size : (mb + 1) * mb_size]
                grads, _, diag = policy.backward(model, batch.take(idx), hyper)
                policy.clip_grad_norm(grads, hyper.max_grad_norm)
                policy.adam_step(model, grads, adam, hyper.lr)
                update_diags.append(diag)

        diagnostics.append(
            {
                "step": global_step,
                "mean_reward": float(rewards.mean()),
                "mean_episode_return": (
                    float(np.mean(finished_returns)) if finished_returns else None
                ),
                "policy_loss": float(np.mean([d["policy_loss"] for d in update_diags])),
                "value_loss": float(np.mean([d["value_loss"] for d in update_diags])),
                "entropy": float(np.mean([d["entropy"] for d in update_diags])),
            }
        )

    return TrainResult(
        model=model,
        diagnostics=diagnostics,
        elapsed_seconds=time.perf_counter() - t_start,
    )
