"""Actor-critic search over subset embeddings with a clipped surrogate objective.

An action is a single vector ``delta`` in R^d added (scaled by
``action_scale``) to every row of the current subset embedding.  The
perturbed embedding is decoded back to a subset, scored, and the next state
is re-grounded by encoding the decoded subset.  The reward trades score
improvement against subset length::

    R = lam * (v_new - v_old) + (1 - lam) * (1 - |f_new| / D)

The advantage is ``G_t - V(s_t)``, normalized per minibatch.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diff_engine as de
from .datasets import one_hot_rep
from .diff_engine import ContractError, DimensionError, Tensor
from .set_codec import CodecParams, EmptyDecode, SubsetEmbedding, decode_logits, encode, logits_to_subset

log = logging.getLogger(__name__)

SEARCH_LOG_FORMAT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


@dataclass
class SearchConfig:
    lam: float = 0.1
    gamma: float = 0.99
    clip_eps: float = 0.2
    lr_actor: float = 0.0003
    lr_critic: float = 0.001
    steps_per_seed: int = 1000
    ppo_batch: int = 512
    ppo_epochs: int = 10
    horizon: int = 50
    action_scale: float = 0.05
    init_log_std: float = -1.0
    hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ContractError("lam must lie in (0, 1)")
        if not 0 <= self.gamma <= 1:
            raise ContractError("gamma must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ContractError("clip_eps must be positive")
        if self.steps_per_seed and self.horizon > self.steps_per_seed:
            raise ContractError("horizon must not exceed steps_per_seed")


# ---------------------------------------------------------------------------
# reward and returns


def compute_reward(v_new: float, v_old: float, subset_len: int, n_features: int, lam: float) -> float:
    if not (0.0 <= v_new <= 1.0 and 0.0 <= v_old <= 1.0):
        raise ContractError("scores must lie in [0, 1]")
    if not 1 <= subset_len <= n_features:
        raise ContractError(f"subset length {subset_len} outside [1, {n_features}]")
    return lam * (v_new - v_old) + (1.0 - lam) * (1.0 - subset_len / n_features)


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """G_t = R_t + gamma * G_{t+1}, with G_T = R_T."""
    if len(rewards) == 0:
        raise ContractError("no rewards")
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def critic_loss(values: Tensor, returns) -> Tensor:
    """Mean squared gap between value estimates and returns."""
    returns = np.asarray(returns, dtype=np.float64)
    if values.shape != returns.shape:
        raise DimensionError(f"values {values.shape} vs returns {returns.shape}")
    return de.mean_all(de.square(de.sub(values, Tensor(returns))))


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


def surrogate_terms(new_log_probs: Tensor, old_log_probs, advantages, clip_eps: float):
    """Return ``(ratio, unclipped, clipped, surrogate)`` tensors per sample."""
    old = Tensor(np.asarray(old_log_probs, dtype=np.float64))
    adv = Tensor(np.asarray(advantages, dtype=np.float64))
    ratio = de.exp(de.sub(new_log_probs, old))
    unclipped = de.mul(ratio, adv)
    clipped = de.mul(de.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv)
    return ratio, unclipped, clipped, de.minimum(unclipped, clipped)


def actor_loss(new_log_probs: Tensor, old_log_probs, advantages, clip_eps: float, normalize: bool = True) -> Tensor:
    """Negative mean clipped surrogate; advantages normalized first by default."""
    n = new_log_probs.shape[0]
    if len(old_log_probs) != n or len(advantages) != n:
        raise DimensionError("log-prob and advantage lengths differ")
    adv = normalize_advantages(advantages) if normalize else np.asarray(advantages, dtype=np.float64)
    *_, surr = surrogate_terms(new_log_probs, old_log_probs, adv, clip_eps)
    return de.scale(de.mean_all(surr), -1.0)


# ---------------------------------------------------------------------------
# networks


def _mlp_params(rng, prefix, sizes) -> dict[str, Tensor]:
    p = {}
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        p[f"{prefix}.w{i}"] = de.glorot(rng, a, b, name=f"{prefix}.w{i}")
        p[f"{prefix}.b{i}"] = de.zeros(b, name=f"{prefix}.b{i}")
    return p


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = de.add(de.matmul(x, params[f"{prefix}.w{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            x = de.relu(x)
    return x


@dataclass
class PolicyParams:
    state_dim: int
    action_dim: int
    actor: dict[str, Tensor]
    critic: dict[str, Tensor]

    @classmethod
    def init(cls, state_dim: int, action_dim: int, hidden: int = 128, init_log_std: float = -1.0, seed: int = 0):
        rng = de.seeded_rng(seed)
        actor = _mlp_params(rng, "actor", [state_dim, hidden, hidden, action_dim])
        actor["actor.log_std"] = Tensor(np.full(action_dim, init_log_std), requires_grad=True, name="actor.log_std")
        critic = _mlp_params(rng, "critic", [state_dim, hidden, hidden, 1])
        return cls(state_dim, action_dim, actor, critic)

    def mean(self, states: Tensor) -> Tensor:
        return _mlp(states, self.actor, "actor", 3)

    def value(self, states: Tensor) -> Tensor:
        return de.index_last(_mlp(states, self.critic, "critic", 3), 0)

    @property
    def log_std(self) -> Tensor:
        return self.actor["actor.log_std"]

    def clamp_log_std(self) -> None:
        np.clip(self.log_std.data, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std.data)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in {**self.actor, **self.critic}.items()}


def gaussian_log_prob(actions, mean: Tensor, log_std: Tensor) -> Tensor:
    """Exact diagonal-Gaussian log density, one value per row."""
    actions = Tensor(np.atleast_2d(np.asarray(actions, dtype=np.float64)))
    z = de.mul(de.sub(actions, mean), de.exp(de.scale(log_std, -1.0)))
    quad = de.scale(de.sum_last(de.square(z)), -0.5)
    const = -0.5 * mean.shape[-1] * math.log(2.0 * math.pi)
    return de.add(de.sub(quad, de.sum_all(log_std)), const)


def sample_action(state_features, params: PolicyParams, rng: np.random.Generator | None = None,
                  deterministic: bool = False) -> tuple[np.ndarray, float]:
    """Draw ``delta ~ N(mu(s), exp(log_std)^2)``; ``deterministic`` returns ``mu``."""
    s = Tensor(np.atleast_2d(np.asarray(state_features, dtype=np.float64)))
    mu = params.mean(s)
    if deterministic:
        delta = mu.data[0].copy()
    else:
        if rng is None:
            raise ContractError("stochastic sampling needs an rng")
        delta = mu.data[0] + np.exp(params.log_std.data) * rng.standard_normal(params.action_dim)
    lp = gaussian_log_prob(delta[None, :], mu, params.log_std)
    return delta, float(lp.data[0])


# ---------------------------------------------------------------------------
# environment


@dataclass
class SearchState:
    features: np.ndarray
    subset: list[int]
    embedding: SubsetEmbedding
    v: float


def make_state(subset: Sequence[int], codec: CodecParams, evaluate: Callable, v: float | None = None) -> SearchState:
    subset = sorted(int(j) for j in subset)
    emb = encode(subset, codec)
    v = evaluate(subset) if v is None else v
    feats = np.concatenate([one_hot_rep(subset, codec.config.n_features), emb.rows.mean(axis=0)])
    return SearchState(feats, subset, emb, v)


def apply_action(embedding: SubsetEmbedding, delta, action_scale: float = 0.05) -> SubsetEmbedding:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (embedding.rows.shape[1],):
        raise DimensionError(f"action of shape {delta.shape} for embedding width {embedding.rows.shape[1]}")
    return SubsetEmbedding(embedding.rows + action_scale * delta, list(embedding.token_ids))


@dataclass
class StepResult:
    state: SearchState
    reward: float
    empty_decode: bool


def step_environment(state: SearchState, delta, codec: CodecParams, evaluate: Callable,
                     config: SearchConfig) -> StepResult:
    moved = apply_action(state.embedding, delta, config.action_scale)
    try:
        new_subset = logits_to_subset(decode_logits(moved, codec), codec.config.pad_id)
    except EmptyDecode:
        return StepResult(state, -config.lam, True)
    v_new = evaluate(new_subset)
    reward = compute_reward(v_new, state.v, len(new_subset), codec.config.n_features, config.lam)
    return StepResult(make_state(new_subset, codec, evaluate, v_new), reward, False)


# ---------------------------------------------------------------------------
# updates


@dataclass
class Trajectory:
    states: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self):
        return len(self.rewards)

    def finish(self, gamma: float) -> None:
        self.returns = discounted_returns(self.rewards, gamma)
        self.advantages = self.returns - np.asarray(self.values)


@dataclass
class UpdateDiagnostics:
    mean_ratio: float
    clip_fraction: float
    actor_loss: float
    critic_loss: float
    minibatches: int
    surrogate_bound_ok: bool


class PPOLearner:
    """Owns the actor/critic parameters and their Adam states."""

    def __init__(self, params: PolicyParams, config: SearchConfig):
        self.params = params
        self.config = config
        self.actor_opt = de.Adam(list(params.actor.values()), config.lr_actor)
        self.critic_opt = de.Adam(list(params.critic.values()), config.lr_critic)

    def update(self, trajectories: Sequence[Trajectory], rng: np.random.Generator) -> UpdateDiagnostics:
        cfg = self.config
        states = np.array([s for t in trajectories for s in t.states])
        actions = np.array([a for t in trajectories for a in t.actions])
        old_lp = np.array([x for t in trajectories for x in t.log_probs])
        returns = np.concatenate([t.returns for t in trajectories])
        adv = np.concatenate([t.advantages for t in trajectories])
        n = len(returns)
        if n < cfg.ppo_batch:
            raise ContractError(f"ppo_update needs at least {cfg.ppo_batch} steps, got {n}")
        ratios, clipped, a_losses, c_losses = [], [], [], []
        bound_ok = True
        p = self.params
        for _ in range(cfg.ppo_epochs):
            order = rng.permutation(n)
            for start in range(0, n - cfg.ppo_batch + 1, cfg.ppo_batch):
                idx = order[start:start + cfg.ppo_batch]
                s = Tensor(states[idx])
                a_norm = normalize_advantages(adv[idx])
                with de.Tape() as tape:
                    lp = gaussian_log_prob(actions[idx], p.mean(s), p.log_std)
                    ratio, unclipped, clipped_t, surr = surrogate_terms(lp, old_lp[idx], a_norm, cfg.clip_eps)
                    a_loss = de.scale(de.mean_all(surr), -1.0)
                de.backward(tape, a_loss)
                self.actor_opt.step()
                p.clamp_log_std()
                with de.Tape() as tape:
                    c_loss = critic_loss(p.value(s), returns[idx])
                de.backward(tape, c_loss)
                self.critic_opt.step()

                r = ratio.data
                inside = (r >= 1 - cfg.clip_eps) & (r <= 1 + cfg.clip_eps)
                bound_ok &= bool(np.all(surr.data <= unclipped.data + 1e-12))
                bound_ok &= bool(np.allclose(surr.data[inside], unclipped.data[inside], atol=1e-12))
                ratios.append(float(r.mean()))
                clipped.append(float(np.mean(~inside)))
                a_losses.append(a_loss.item())
                c_losses.append(c_loss.item())
        return UpdateDiagnostics(
            float(np.mean(ratios)), float(np.mean(clipped)), float(np.mean(a_losses)),
            float(np.mean(c_losses)), len(ratios), bound_ok,
        )


def ppo_update(trajectories, params: PolicyParams, config: SearchConfig, rng=None,
               learner: PPOLearner | None = None) -> tuple[PolicyParams, UpdateDiagnostics]:
    learner = learner or PPOLearner(params, config)
    rng = rng if rng is not None else de.seeded_rng(config.seed)
    return learner.params, learner.update(trajectories, rng)


# ---------------------------------------------------------------------------
# search driver


@dataclass
class LogEntry:
    seed_index: int
    step: int
    subset: list[int]
    v: float
    reward: float | None
    clip_fraction: float | None
    kind: str = "rollout"

    def to_json(self) -> dict:
        return {
            "seed_index": self.seed_index, "step": self.step, "subset": self.subset,
            "v": self.v, "reward": self.reward, "clip_fraction": self.clip_fraction,
            "kind": self.kind, "format_version": SEARCH_LOG_FORMAT_VERSION,
        }


@dataclass
class SearchResult:
    best_subset: list[int]
    best_v: float
    log: list[LogEntry]
    diagnostics: list[UpdateDiagnostics]


def _rank_key(entry: LogEntry):
    return (-entry.v, len(entry.subset), entry.subset)


def search(seeds: Sequence[Sequence[int]], codec: CodecParams, evaluate: Callable[[Sequence[int]], float],
           config: SearchConfig) -> SearchResult:
    """Policy-guided search from each seed; returns the best subset ever scored.

    Each seed gets a fresh actor/critic seeded from ``config.seed`` and the
    seed index.  Episodes of ``horizon`` steps restart at the seed
    embedding until ``steps_per_seed`` steps are spent; an update runs
    each time ``ppo_batch`` new steps have accumulated.  A final pass takes
    the mean action once from each seed.
    """
    if not seeds:
        raise ContractError("search needs at least one seed")
    D = codec.config.n_features
    state_dim = D + codec.config.d
    log_entries: list[LogEntry] = []
    diagnostics: list[UpdateDiagnostics] = []
    policies: list[PolicyParams] = []
    candidates = 0

    for si, seed_subset in enumerate(seeds):
        seed_state = make_state(seed_subset, codec, evaluate)
        log_entries.append(LogEntry(si, 0, seed_state.subset, seed_state.v, None, None, "seed"))
        pseed = de.derive_seed(config.seed, f"seed{si}")
        params = PolicyParams.init(state_dim, codec.config.d, config.hidden, config.init_log_std, pseed)
        learner = PPOLearner(params, config)
        rng = de.seeded_rng(de.derive_seed(pseed, "rollout"))
        upd_rng = de.seeded_rng(de.derive_seed(pseed, "update"))
        pending: list[Trajectory] = []
        pending_steps = 0
        last_clip: float | None = None
        step = 0
        while step < config.steps_per_seed:
            traj = Trajectory()
            state = seed_state
            for _ in range(min(config.horizon, config.steps_per_seed - step)):
                delta, lp = sample_action(state.features, params, rng)
                value = float(params.value(Tensor(state.features[None, :])).data[0])
                res = step_environment(state, delta, codec, evaluate, config)
                step += 1
                candidates += not res.empty_decode
                traj.states.append(state.features)
                traj.actions.append(delta)
                traj.log_probs.append(lp)
                traj.rewards.append(res.reward)
                traj.values.append(value)
                state = res.state
                if not res.empty_decode:
                    log_entries.append(LogEntry(si, step, state.subset, state.v, res.reward, last_clip))
            traj.finish(config.gamma)
            pending.append(traj)
            pending_steps += len(traj)
            if pending_steps >= config.ppo_batch:
                diag = learner.update(pending, upd_rng)
                diagnostics.append(diag)
                last_clip = diag.clip_fraction
                log.debug("seed %d step %d: clip %.3f ratio %.3f", si, step, diag.clip_fraction, diag.mean_ratio)
                pending, pending_steps = [], 0
        policies.append(params)

    for si, (seed_subset, params) in enumerate(zip(seeds, policies)):
        state = make_state(seed_subset, codec, evaluate)
        delta, _ = sample_action(state.features, params, deterministic=True)
        res = step_environment(state, delta, codec, evaluate, config)
        if not res.empty_decode:
            candidates += 1
            log_entries.append(LogEntry(si, config.steps_per_seed + 1, res.state.subset, res.state.v,
                                        res.reward, None, "final"))
    if not candidates:
        log.warning("every candidate decoded empty; returning the best seed")
    best = min(log_entries, key=_rank_key)
    return SearchResult(list(best.subset), best.v, log_entries, diagnostics)


def save_search_log(path, entries: Sequence[LogEntry]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_json()) + "\n")


def load_search_log(path) -> list[LogEntry]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if obj.get("format_version") != SEARCH_LOG_FORMAT_VERSION:
                    raise ValueError(f"unsupported format_version {obj.get('format_version')!r}")
                out.append(LogEntry(int(obj["seed_index"]), int(obj["step"]), [int(j) for j in obj["subset"]],
                                    float(obj["v"]), obj["reward"], obj["clip_fraction"], obj.get("kind", "rollout")))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out
