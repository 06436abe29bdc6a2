"""Query policy network: tanh MLP trunk, softmax action head, value head.

Forward, loss, and gradients are hand-written in float64 numpy. Matrix
products run through a fixed-size row tile so the BLAS kernel choice never
depends on batch size; a batched forward is therefore bit-identical to the
corresponding single-row calls, which keeps training rollouts, batch
application, and replay exactly reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

N_INPUTS = 6
N_ACTIONS = 2

MODEL_MAGIC = b"AQPM"
MODEL_VERSION = 1

PARAM_FIELDS = ("W1", "b1", "W2", "b2", "Wpi", "bpi", "Wv", "bv")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-5

_TILE = 64


class ModelFormatError(ValueError):
    """Bad magic, wrong version, or truncated model file."""


@dataclass
class PpoHyper:
    """Training hyperparameters; defaults are the standard configuration."""

    gamma: float = 0.6
    lam: float = 0.95
    clip: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    lr: float = 2.5e-4
    rollout_steps: int = 128
    epochs: int = 4
    minibatches: int = 4
    max_grad_norm: float = 0.5
    total_timesteps: int = 200_000

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"lam must be in (0, 1], got {self.lam}")
        if self.clip <= 0.0:
            raise ValueError(f"clip must be > 0, got {self.clip}")


@dataclass
class PolicyModel:
    """Network parameters. Hidden widths are free (tests use small ones);
    the input width is fixed by the feature extractor."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wpi: np.ndarray
    bpi: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray
    version: int = MODEL_VERSION

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> tuple[int, int]:
        return self.W1.shape[1], self.W2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "PolicyModel":
        return PolicyModel(
            **{name: getattr(self, name).copy() for name in PARAM_FIELDS},
            version=self.version,
        )


def init_model(
    seed: int, n_inputs: int = N_INPUTS, hidden: tuple[int, int] = (64, 64)
) -> PolicyModel:
    """Seeded scaled-uniform init: U(-a, a) with a = gain * sqrt(6 / (fan_in
    + fan_out)). Trunk gain sqrt(2); policy head 0.01 so the initial policy
    stays near-uniform; value head 1.0. Biases start at zero."""
    rng = np.random.Generator(np.random.PCG64(seed))

    def uniform(fan_in, fan_out, gain):
        a = gain * np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_in, fan_out))

    h1, h2 = hidden
    return PolicyModel(
        W1=uniform(n_inputs, h1, np.sqrt(2.0)),
        b1=np.zeros(h1),
        W2=uniform(h1, h2, np.sqrt(2.0)),
        b2=np.zeros(h2),
        Wpi=uniform(h2, N_ACTIONS, 0.01),
        bpi=np.zeros(N_ACTIONS),
        Wv=uniform(h2, 1, 1.0),
        bv=np.zeros(1),
    )


def zero_model(n_inputs: int = N_INPUTS, hidden: tuple[int, int] = (64, 64)) -> PolicyModel:
    """All-zero parameters: probs (0.5, 0.5) and value 0 for every input."""
    h1, h2 = hidden
    return PolicyModel(
        W1=np.zeros((n_inputs, h1)),
        b1=np.zeros(h1),
        W2=np.zeros((h1, h2)),
        b2=np.zeros(h2),
        Wpi=np.zeros((h2, N_ACTIONS)),
        bpi=np.zeros(N_ACTIONS),
        Wv=np.zeros((h2, 1)),
        bv=np.zeros(1),
    )


def _mm(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    # constant-shape tiles => constant kernel => per-row results independent
    # of batch size
    B = X.shape[0]
    out = np.empty((B, W.shape[1]), dtype=np.float64)
    tile = np.zeros((_TILE, X.shape[1]), dtype=np.float64)
    for s in range(0, B, _TILE):
        e = min(s + _TILE, B)
        tile[: e - s] = X[s:e]
        if e - s < _TILE:
            tile[e - s :] = 0.0
        out[s:e] = (tile @ W)[: e - s]
    return out


def _trunk(model: PolicyModel, S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h1 = np.tanh(_mm(S, model.W1) + model.b1)
    h2 = np.tanh(_mm(h1, model.W2) + model.b2)
    return h1, h2


def _heads(model: PolicyModel, h2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = _mm(h2, model.Wpi) + model.bpi
    values = (_mm(h2, model.Wv) + model.bv)[:, 0]
    return logits, values


def _softmax_logp(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    return e / se, z - np.log(se)


def forward(model: PolicyModel, s: np.ndarray):
    """Action probabilities and value estimate.

    Accepts a single state vector or a (B, n_inputs) batch; a batch result
    equals the row-wise single-call results bit for bit.
    """
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    S = s[None, :] if single else s
    if S.shape[1] != model.n_inputs:
        raise ValueError(f"expected input width {model.n_inputs}, got {S.shape[1]}")
    if not np.isfinite(S).all():
        raise ValueError("non-finite policy input")
    _, h2 = _trunk(model, S)
    logits, values = _heads(model, h2)
    probs, _ = _softmax_logp(logits)
    if single:
        return probs[0], float(values[0])
    return probs, values


def forward_logp(model: PolicyModel, s: np.ndarray):
    """Like :func:`forward` but also returns per-action log-probabilities,
    computed with the exact formula the training update uses."""
    s = np.asarray(s, dtype=np.float64)
    single = s.ndim == 1
    S = s[None, :] if single else s
    _, h2 = _trunk(model, S)
    logits, values = _heads(model, h2)
    probs, logp = _softmax_logp(logits)
    if single:
        return probs[0], logp[0], float(values[0])
    return probs, logp, values


@dataclass
class PpoBatch:
    """One minibatch of rollout samples for the clipped-surrogate update."""

    states: np.ndarray
    actions: np.ndarray
    old_logprobs: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx: np.ndarray) -> "PpoBatch":
        return PpoBatch(
            states=self.states[idx],
            actions=self.actions[idx],
            old_logprobs=self.old_logprobs[idx],
            advantages=self.advantages[idx],
            value_targets=self.value_targets[idx],
        )


def _loss_terms(model: PolicyModel, batch: PpoBatch, h: PpoHyper):
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    h1, h2 = _trunk(model, batch.states)
    logits, values = _heads(model, h2)
    probs, logp_all = _softmax_logp(logits)
    rows = np.arange(B)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.old_logprobs)
    surr1 = ratio * batch.advantages
    clipped = np.clip(ratio, 1.0 - h.clip, 1.0 + h.clip)
    surr2 = clipped * batch.advantages
    l_clip = np.minimum(surr1, surr2)
    entropy = -(probs * logp_all).sum(axis=1)
    verr = values - batch.value_targets
    per_sample = -l_clip + h.c1 * verr**2 - h.c2 * entropy
    if not np.isfinite(per_sample).all():
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0])
        raise FloatingPointError(f"non-finite loss contribution at sample {bad}")
    policy_loss = float(-l_clip.mean())
    value_loss = float((verr**2).mean())
    entropy_mean = float(entropy.mean())
    loss = policy_loss + h.c1 * value_loss - h.c2 * entropy_mean
    diag = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy_mean,
        "clip_fraction": float((surr2 < surr1).mean()),
    }
    cache = (h1, h2, probs, logp_all, ratio, surr1, surr2, values)
    return loss, diag, cache


def ppo_loss(model: PolicyModel, batch: PpoBatch, h: PpoHyper):
    """Clipped-surrogate loss combined with value and entropy terms.

    loss = -mean(min(r*A, clip(r)*A)) + c1*mean((V - V_target)^2)
           - c2*mean(entropy); minimizing it maximizes the usual combined
    objective.
    """
    loss, diag, _ = _loss_terms(model, batch, h)
    return loss, diag


def backward(model: PolicyModel, batch: PpoBatch, h: PpoHyper):
    """Analytic gradient of :func:`ppo_loss` for every parameter.

    The min/clip kinks use the active-branch subgradient (ties take the
    unclipped branch). Returns (grads, loss, diag).
    """
    loss, diag, cache = _loss_terms(model, batch, h)
    h1, h2, probs, logp_all, ratio, surr1, surr2, values = cache
    B = len(batch)
    rows = np.arange(B)

    use_unclipped = surr1 <= surr2
    inside = (ratio >= 1.0 - h.clip) & (ratio <= 1.0 + h.clip)
    gcoef = np.where(use_unclipped | inside, ratio * batch.advantages, 0.0)
    dlogp = -gcoef / B

    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - probs)
    entropy = -(probs * logp_all).sum(axis=1)
    dlogits += (h.c2 / B) * probs * (logp_all + entropy[:, None])

    dv = (2.0 * h.c1 / B) * (values - batch.value_targets)

    grads: dict[str, np.ndarray] = {}
    grads["Wpi"] = h2.T @ dlogits
    grads["bpi"] = dlogits.sum(axis=0)
    grads["Wv"] = (h2 * dv[:, None]).sum(axis=0)[:, None]
    grads["bv"] = np.array([dv.sum()])

    dh2 = dlogits @ model.Wpi.T + dv[:, None] * model.Wv[:, 0][None, :]
    dz2 = dh2 * (1.0 - h2 * h2)
    grads["W2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)

    dz1 = (dz2 @ model.W2.T) * (1.0 - h1 * h1)
    grads["W1"] = batch.states.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return grads, loss, diag


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    norm = grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class AdamState:
    """First/second-moment accumulators shaped like the model."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_model(cls, model: PolicyModel) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in model.params().items()},
            v={k: np.zeros_like(p) for k, p in model.params().items()},
        )


def adam_step(
    model: PolicyModel, grads: dict[str, np.ndarray], st: AdamState, lr: float
) -> tuple[PolicyModel, AdamState]:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-5, bias-corrected).

    Parameters and optimizer state are updated in place; the same objects
    are returned for call-site convenience.
    """
    st.t += 1
    bc1 = 1.0 - ADAM_BETA1**st.t
    bc2 = 1.0 - ADAM_BETA2**st.t
    for name, g in grads.items():
        p = getattr(model, name)
        m = st.m[name]
        v = st.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return model, st


def save_model(model: PolicyModel, path) -> None:
    """Write the model: magic, version, layer dims, then parameters as
    little-endian float64 in declared field order."""
    h1, h2 = model.hidden
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += struct.pack("<III", model.version, model.n_inputs, h1)
    blob += struct.pack("<I", h2)
    for name in PARAM_FIELDS:
        arr = np.ascontiguousarray(getattr(model, name), dtype="<f8")
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_model(path) -> PolicyModel:
    """Read a model written by :func:`save_model`; checks magic, version,
    and exact payload length."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a policy model file")
    version, n_in, h1, h2 = struct.unpack("<IIII", blob[4:20])
    if version != MODEL_VERSION:
        raise ModelFormatError(
            f"{path}: unsupported model version {version} (expected {MODEL_VERSION})"
        )
    shapes = [
        (n_in, h1), (h1,), (h1, h2), (h2,),
        (h2, N_ACTIONS), (N_ACTIONS,), (h2, 1), (1,),
    ]
    expected = 20 + sum(int(np.prod(s)) for s in shapes) * 8
    if len(blob) != expected:
        raise ModelFormatError(
            f"{path}: truncated or oversized model file ({len(blob)} bytes, expected {expected})"
        )
    offset = 20
    params = {}
    for name, shape in zip(PARAM_FIELDS, shapes):
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float64).copy()
        offset += count * 8
    return PolicyModel(**params, version=version)
