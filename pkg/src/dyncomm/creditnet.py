"""Shared gated recurrent network and credit head.

One set of parameters is shared by all agents. Per round, each agent's
hidden state is updated from its node features and mapped to a scalar
credit in (0, 1):

    z  = sigmoid(W_z [h; x] + b_z)
    r  = sigmoid(W_r [h; x] + b_r)
    h~ = tanh(W_h [r*h; x] + b_h)
    h' = (1 - z) * h + z * h~
    c  = sigmoid(w2 relu(W1 h' + b1) + b2), clamped to [1e-4, 1 - 1e-4]

The sigmoid/clamp keeps credits valid Bernoulli parameters with finite
log-probabilities. Forward passes record a tape; :func:`backward` runs exact
backpropagation through time over it, and :func:`grad_check` provides an
independent central-finite-difference oracle.

Initial hidden states are zero vectors, so with zero-initialized head bias
every agent starts at credit 0.5: maximal participation uncertainty before
any behavior has been observed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ConfigurationError, ProtocolError

CREDIT_CLAMP = 1e-4

TENSOR_ORDER = ("w_z", "w_r", "w_h", "b_z", "b_r", "b_h", "w1", "b1", "w2", "b2")

CHECKPOINT_FORMAT = "dyncomm-creditnet"
CHECKPOINT_VERSION = 1


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class CreditNetDims:
    feature_len: int
    hidden: int = 64
    mlp_hidden: int = 64

    def __post_init__(self) -> None:
        if min(self.feature_len, self.hidden, self.mlp_hidden) < 1:
            raise ConfigurationError("all dimensions must be positive")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h, m, l = self.hidden, self.mlp_hidden, self.feature_len
        return {
            "w_z": (h, h + l),
            "w_r": (h, h + l),
            "w_h": (h, h + l),
            "b_z": (h,),
            "b_r": (h,),
            "b_h": (h,),
            "w1": (m, h),
            "b1": (m,),
            "w2": (1, m),
            "b2": (1,),
        }


@dataclass(eq=False)
class CreditNetParams:
    """All learnable tensors, in the declared serialization order."""

    w_z: np.ndarray
    w_r: np.ndarray
    w_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    dims: CreditNetDims

    def __post_init__(self) -> None:
        for name, shape in self.dims.shapes().items():
            tensor = getattr(self, name)
            if tensor.shape != shape:
                raise ConfigurationError(f"tensor {name} has shape {tensor.shape}, expected {shape}")
            if not np.all(np.isfinite(tensor)):
                raise ConfigurationError(f"tensor {name} contains non-finite values")

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(name, getattr(self, name)) for name in TENSOR_ORDER]

    @property
    def n_params(self) -> int:
        return sum(t.size for _, t in self.tensors())

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.tensors()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, dims: CreditNetDims) -> "CreditNetParams":
        shapes = dims.shapes()
        out = {}
        pos = 0
        for name in TENSOR_ORDER:
            shape = shapes[name]
            size = int(np.prod(shape))
            out[name] = np.asarray(flat[pos : pos + size], dtype=np.float64).reshape(shape).copy()
            pos += size
        if pos != len(flat):
            raise ConfigurationError(f"flat vector has {len(flat)} entries, expected {pos}")
        return cls(dims=dims, **out)

    def zeros_like(self) -> "CreditNetParams":
        return CreditNetParams(
            dims=self.dims, **{name: np.zeros_like(t) for name, t in self.tensors()}
        )

    def copy(self) -> "CreditNetParams":
        return CreditNetParams(dims=self.dims, **{name: t.copy() for name, t in self.tensors()})


def init_params(seed: int, dims: CreditNetDims) -> CreditNetParams:
    """Uniform Glorot matrices, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in dims.shapes().items():
        if name.startswith("b"):
            tensors[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return CreditNetParams(dims=dims, **tensors)


@dataclass(eq=False)
class RoundTape:
    """Cached forward activations for one round (all agents)."""

    h_prev: np.ndarray
    x: np.ndarray
    z: np.ndarray
    r: np.ndarray
    hcand: np.ndarray
    h_new: np.ndarray
    r1: np.ndarray
    relu_mask: np.ndarray
    s: np.ndarray
    clip_mask: np.ndarray
    credits: np.ndarray


def gru_step(h: np.ndarray, x: np.ndarray, params: CreditNetParams):
    """One gated recurrent update; returns (h_new, tape fragment).

    Accepts a single hidden vector (H,) with features (L,) or a batch of
    agents (N, H) with (N, L).
    """
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    x2 = np.atleast_2d(x)
    dims = params.dims
    if h2.shape[1] != dims.hidden or x2.shape[1] != dims.feature_len:
        raise ConfigurationError(
            f"shape mismatch: h {h.shape}, x {x.shape} vs dims "
            f"(hidden={dims.hidden}, feature_len={dims.feature_len})"
        )
    hx = np.concatenate([h2, x2], axis=1)
    z = sigmoid(hx @ params.w_z.T + params.b_z)
    r = sigmoid(hx @ params.w_r.T + params.b_r)
    x_cand = np.concatenate([r * h2, x2], axis=1)
    hcand = np.tanh(x_cand @ params.w_h.T + params.b_h)
    h_new = (1.0 - z) * h2 + z * hcand
    if single:
        return h_new[0], (h2, x2, z, r, hcand, h_new)
    return h_new, (h2, x2, z, r, hcand, h_new)


def credit_head(h: np.ndarray, params: CreditNetParams):
    """Map hidden states to clamped credits; returns (credits, tape fragment)."""
    single = h.ndim == 1
    h2 = np.atleast_2d(h)
    pre1 = h2 @ params.w1.T + params.b1
    relu_mask = pre1 > 0
    r1 = np.where(relu_mask, pre1, 0.0)
    pre2 = (r1 @ params.w2.T + params.b2)[:, 0]
    s = sigmoid(pre2)
    c = np.clip(s, CREDIT_CLAMP, 1.0 - CREDIT_CLAMP)
    clip_mask = (s > CREDIT_CLAMP) & (s < 1.0 - CREDIT_CLAMP)
    if single:
        return float(c[0]), (r1, relu_mask, s, clip_mask)
    return c, (r1, relu_mask, s, clip_mask)


class CreditState:
    """Per-episode hidden states, per-round credits, and the forward tape."""

    def __init__(self, n_agents: int, n_rounds: int, dims: CreditNetDims):
        self.n_agents = n_agents
        self.n_rounds = n_rounds  # number of forward_round calls allowed (T)
        self.dims = dims
        self.h = np.zeros((n_agents, dims.hidden), dtype=np.float64)
        self.t = 1
        self.tape: list[RoundTape] = []

    @property
    def credits_by_round(self) -> list[np.ndarray]:
        return [entry.credits for entry in self.tape]


def forward_round(state: CreditState, features: np.ndarray, params: CreditNetParams) -> np.ndarray:
    """Advance every agent one round and return the new credit vector."""
    if state.t >= state.n_rounds + 1:
        raise ProtocolError(
            f"forward_round called more than {state.n_rounds} rounds past initialization"
        )
    if features.shape != (state.n_agents, params.dims.feature_len):
        raise ConfigurationError(
            f"features shape {features.shape} does not match "
            f"({state.n_agents}, {params.dims.feature_len})"
        )
    h_new, (h_prev, x, z, r, hcand, _) = gru_step(state.h, features, params)
    credits, (r1, relu_mask, s, clip_mask) = credit_head(h_new, params)
    state.tape.append(
        RoundTape(
            h_prev=h_prev, x=x, z=z, r=r, hcand=hcand, h_new=h_new,
            r1=r1, relu_mask=relu_mask, s=s, clip_mask=clip_mask, credits=credits,
        )
    )
    state.h = h_new
    state.t += 1
    return credits


def backward(
    state: CreditState, upstream: list[np.ndarray], params: CreditNetParams
) -> CreditNetParams:
    """Exact gradients of sum_t sum_i upstream[t][i] * c_i^t w.r.t. params.

    Runs backpropagation through time over the recorded tape; gradients are
    accumulated over agents since all agents share one parameter set.
    """
    if len(upstream) != len(state.tape):
        raise ConfigurationError(
            f"got {len(upstream)} upstream gradients for {len(state.tape)} recorded rounds"
        )
    grads = params.zeros_like()
    hidden = params.dims.hidden
    dh_next = np.zeros((state.n_agents, hidden), dtype=np.float64)

    for entry, dc in zip(reversed(state.tape), reversed(upstream)):
        dc = np.asarray(dc, dtype=np.float64)
        # Credit head.
        ds = np.where(entry.clip_mask, dc, 0.0)
        dpre2 = ds * entry.s * (1.0 - entry.s)
        grads.w2 += (dpre2 @ entry.r1)[None, :]
        grads.b2 += dpre2.sum(keepdims=True)
        dr1 = np.outer(dpre2, params.w2[0])
        dpre1 = np.where(entry.relu_mask, dr1, 0.0)
        grads.w1 += dpre1.T @ entry.h_new
        grads.b1 += dpre1.sum(axis=0)
        dh = dh_next + dpre1 @ params.w1

        # Recurrent cell.
        hx = np.concatenate([entry.h_prev, entry.x], axis=1)
        dz = dh * (entry.hcand - entry.h_prev)
        dhcand = dh * entry.z
        dh_prev = dh * (1.0 - entry.z)

        dpre_c = dhcand * (1.0 - entry.hcand**2)
        x_cand = np.concatenate([entry.r * entry.h_prev, entry.x], axis=1)
        grads.w_h += dpre_c.T @ x_cand
        grads.b_h += dpre_c.sum(axis=0)
        drh = (dpre_c @ params.w_h)[:, :hidden]
        dr = drh * entry.h_prev
        dh_prev = dh_prev + drh * entry.r

        dpre_z = dz * entry.z * (1.0 - entry.z)
        grads.w_z += dpre_z.T @ hx
        grads.b_z += dpre_z.sum(axis=0)
        dh_prev = dh_prev + (dpre_z @ params.w_z)[:, :hidden]

        dpre_r = dr * entry.r * (1.0 - entry.r)
        grads.w_r += dpre_r.T @ hx
        grads.b_r += dpre_r.sum(axis=0)
        dh_prev = dh_prev + (dpre_r @ params.w_r)[:, :hidden]

        dh_next = dh_prev
    return grads


def grad_check(
    params: CreditNetParams,
    loss_fn,
    n_probes: int = 100,
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)``; finite differences use
    only the loss value, so the check is independent of the backward pass it
    validates. Relative error for a probed coordinate is
    ``|analytic - fd| / max(|fd|, 1e-6)``.
    """
    rng = rng or np.random.default_rng(0)
    _, analytic = loss_fn(params)
    analytic_flat = analytic.flatten()
    flat = params.flatten()
    n_probes = min(n_probes, len(flat))
    indices = rng.choice(len(flat), size=n_probes, replace=False)
    worst = 0.0
    for idx in indices:
        shift = np.zeros_like(flat)
        shift[idx] = eps
        loss_plus = loss_fn(CreditNetParams.from_flat(flat + shift, params.dims))[0]
        loss_minus = loss_fn(CreditNetParams.from_flat(flat - shift, params.dims))[0]
        fd = (loss_plus - loss_minus) / (2.0 * eps)
        rel = abs(analytic_flat[idx] - fd) / max(abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst


def save_checkpoint(
    params: CreditNetParams, path: str | Path, seed: int, feature_layout_tag: str
) -> None:
    """Versioned header plus a flat little-endian float32 tensor dump."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hidden": params.dims.hidden,
        "mlp_hidden": params.dims.mlp_hidden,
        "feature_len": params.dims.feature_len,
        "feature_layout": feature_layout_tag,
        "seed": seed,
        "dtype": "<f4",
        "tensors": [[name, list(t.shape)] for name, t in params.tensors()],
    }
    blob = b"".join(t.astype("<f4").tobytes() for _, t in params.tensors())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[CreditNetParams, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint format: {header}")
    dims = CreditNetDims(
        feature_len=header["feature_len"],
        hidden=header["hidden"],
        mlp_hidden=header["mlp_hidden"],
    )
    values = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    expected = sum(int(np.prod(shape)) for _, shape in header["tensors"])
    if len(values) != expected:
        raise ConfigurationError(
            f"checkpoint payload has {len(values)} floats, header declares {expected}"
        )
    return CreditNetParams.from_flat(values, dims), header
