"""Neural protocol model: per-UE encoders, a shared base-station network,
and per-UE Q-heads, implemented as plain numpy MLPs with manual backprop.

Signalling pipeline for a joint observation (buffer lengths + channel obs):

* each UE one-hot encodes its own buffer length and runs it through its
  private uplink network ``f_ue`` producing a short uplink control message;
* the base station concatenates every uplink message with a one-hot of its
  own channel observation and runs the shared network ``f_bs``, producing one
  downlink control message per UE;
* each UE feeds its downlink message through its private Q-head ``f_head``
  yielding Q-values over the three actions.

Hidden layers use tanh (configurable), final layers are linear. Weights are
initialised uniformly in ``[-sqrt(1/fan_in), +sqrt(1/fan_in)]``.

Gradients flow through the full composition: Q-value gradients are pushed
back through the heads, the shared network, and the uplink encoders. The
:func:`backward_batch` implementation is verified against central finite
differences in the test suite.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .env import EnvState

__all__ = [
    "NetworkShape",
    "NpmParams",
    "ForwardCache",
    "UeCountMismatch",
    "NUM_ACTIONS",
    "encode_ue_obs",
    "encode_bs_obs",
    "init_params",
    "pipeline_forward",
    "pipeline_backward",
    "forward_batch",
    "backward_batch",
    "select_action",
    "expand_for_ue_count",
    "shrink_for_ue_count",
    "param_count",
    "zero_grads",
    "save_params",
    "load_params",
]

NUM_ACTIONS = 3

# A "stack" is a list of (W, b) layer pairs; W has shape (fan_in, fan_out).
Stack = list


class UeCountMismatch(ValueError):
    """Raised when a state's UE count does not match the parameter set.

    Signals the condition that requires :func:`expand_for_ue_count`.
    """


@dataclass(frozen=True)
class NetworkShape:
    """Architecture hyperparameters shared by every parameter set."""

    ucm_dim: int = 2
    dcm_dim: int = 2
    ue_hidden: tuple = (64, 64)
    bs_hidden: tuple = (64, 64)
    head_hidden: tuple = (64, 64)
    activation: str = "tanh"

    def __post_init__(self):
        if self.ucm_dim < 1 or self.dcm_dim < 1:
            raise ValueError("message dimensions must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass
class NpmParams:
    """Full parameter set for one UE population size."""

    shape: NetworkShape
    num_ues: int
    ue_caps: tuple
    ue_nets: list = field(default_factory=list)     # one stack per UE
    bs_net: Stack = field(default_factory=list)     # shared stack
    head_nets: list = field(default_factory=list)   # one stack per UE

    @property
    def bs_in_dim(self) -> int:
        return self.num_ues * self.shape.ucm_dim + self.num_ues + 2

    @property
    def bs_out_dim(self) -> int:
        return self.num_ues * self.shape.dcm_dim

    def stacks(self) -> list:
        """Canonical stack order: UE nets, base-station net, Q-heads."""
        return [*self.ue_nets, self.bs_net, *self.head_nets]

    def arrays(self):
        for stack in self.stacks():
            for w, b in stack:
                yield w
                yield b

    def copy(self) -> "NpmParams":
        return NpmParams(
            shape=self.shape,
            num_ues=self.num_ues,
            ue_caps=tuple(self.ue_caps),
            ue_nets=[[(w.copy(), b.copy()) for w, b in s] for s in self.ue_nets],
            bs_net=[(w.copy(), b.copy()) for w, b in self.bs_net],
            head_nets=[[(w.copy(), b.copy()) for w, b in s] for s in self.head_nets],
        )


@dataclass
class ForwardCache:
    """Intermediates needed to backpropagate one forward pass."""

    batch: int
    ue: list            # per-UE stack caches
    bs: list
    head: list          # per-UE stack caches


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return (z > 0.0).astype(z.dtype)


def _init_stack(dims: Sequence[int], rng: np.random.Generator) -> Stack:
    stack = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-scale, scale, size=(fan_in, fan_out))
        b = rng.uniform(-scale, scale, size=fan_out)
        stack.append((w, b))
    return stack


def _stack_forward(stack: Stack, x: np.ndarray, activation: str):
    """Hidden layers activated, final layer linear. Returns (out, cache)."""
    cache = []
    h = x
    last = len(stack) - 1
    for i, (w, b) in enumerate(stack):
        z = h @ w + b
        cache.append((h, z))
        h = z if i == last else _activate(z, activation)
    return h, cache


def _stack_backward(stack: Stack, cache: list, dout: np.ndarray, activation: str):
    """Returns (param grads aligned with stack, gradient w.r.t. the input)."""
    grads = [None] * len(stack)
    dh = dout
    last = len(stack) - 1
    for i in range(last, -1, -1):
        h_in, z = cache[i]
        dz = dh if i == last else dh * _activate_grad(z, activation)
        grads[i] = (h_in.T @ dz, dz.sum(axis=0))
        dh = dz @ stack[i][0].T
    return grads, dh


def encode_ue_obs(count: int, cap: int) -> np.ndarray:
    """One-hot of a buffer length over ``cap + 1`` slots."""
    if not 0 <= count <= cap:
        raise ValueError(f"buffer length {count} outside [0, {cap}]")
    v = np.zeros(cap + 1)
    v[count] = 1.0
    return v


def encode_bs_obs(bs_obs: int, num_ues: int) -> np.ndarray:
    """One-hot of a channel observation over ``num_ues + 2`` slots."""
    if not 0 <= bs_obs <= num_ues + 1:
        raise ValueError(f"channel observation {bs_obs} outside [0, {num_ues + 1}]")
    v = np.zeros(num_ues + 2)
    v[bs_obs] = 1.0
    return v


def init_params(shape: NetworkShape, num_ues: int, ue_caps, rng: np.random.Generator) -> NpmParams:
    caps = tuple(int(c) for c in (ue_caps if isinstance(ue_caps, (tuple, list)) else [ue_caps] * num_ues))
    if len(caps) != num_ues:
        raise ValueError("ue_caps must have one entry per UE")
    params = NpmParams(shape=shape, num_ues=num_ues, ue_caps=caps)
    for cap in caps:
        params.ue_nets.append(_init_stack([cap + 1, *shape.ue_hidden, shape.ucm_dim], rng))
    params.bs_net = _init_stack([params.bs_in_dim, *shape.bs_hidden, params.bs_out_dim], rng)
    for _ in range(num_ues):
        params.head_nets.append(_init_stack([shape.dcm_dim, *shape.head_hidden, NUM_ACTIONS], rng))
    return params


def _encode_counts(counts: np.ndarray, cap: int) -> np.ndarray:
    """Batch one-hot with clamping, so a parameter set trained for a smaller
    buffer keeps running after the environment's capacity grows."""
    clipped = np.clip(counts, 0, cap)
    out = np.zeros((counts.shape[0], cap + 1))
    out[np.arange(counts.shape[0]), clipped] = 1.0
    return out


def forward_batch(params: NpmParams, ue_counts: np.ndarray, bs_obs: np.ndarray):
    """Forward a batch of states. ``ue_counts``: (B, L) ints, ``bs_obs``: (B,).

    Returns ``(q, cache)`` with ``q`` of shape (B, L, 3). Channel
    observations are clamped into the encodable range like buffer lengths.
    """
    ue_counts = np.asarray(ue_counts, dtype=int)
    bs_obs = np.asarray(bs_obs, dtype=int)
    if ue_counts.ndim != 2 or ue_counts.shape[1] != params.num_ues:
        raise UeCountMismatch(
            f"state describes {ue_counts.shape[-1]} UEs but parameters expect {params.num_ues}"
        )
    batch = ue_counts.shape[0]
    act = params.shape.activation
    ucm, dcm = params.shape.ucm_dim, params.shape.dcm_dim

    ue_caches = []
    messages = []
    for ue in range(params.num_ues):
        enc = _encode_counts(ue_counts[:, ue], params.ue_caps[ue])
        u, cache = _stack_forward(params.ue_nets[ue], enc, act)
        ue_caches.append(cache)
        messages.append(u)

    bs_enc = np.zeros((batch, params.num_ues + 2))
    bs_enc[np.arange(batch), np.clip(bs_obs, 0, params.num_ues + 1)] = 1.0
    z = np.concatenate([*messages, bs_enc], axis=1)
    d_all, bs_cache = _stack_forward(params.bs_net, z, act)

    head_caches = []
    qs = []
    for ue in range(params.num_ues):
        d = d_all[:, ue * dcm:(ue + 1) * dcm]
        q, cache = _stack_forward(params.head_nets[ue], d, act)
        head_caches.append(cache)
        qs.append(q)
    q = np.stack(qs, axis=1)
    return q, ForwardCache(batch=batch, ue=ue_caches, bs=bs_cache, head=head_caches)


def backward_batch(params: NpmParams, cache: ForwardCache, q_grads: np.ndarray):
    """Backpropagate ``q_grads`` (B, L, 3) through the full composition.

    Returns gradients as a list of stacks aligned with ``params.stacks()``.
    Parameter gradients are summed over the batch; fold any averaging into
    ``q_grads`` before calling.
    """
    act = params.shape.activation
    ucm, dcm = params.shape.ucm_dim, params.shape.dcm_dim
    q_grads = np.asarray(q_grads, dtype=float)
    if q_grads.shape != (cache.batch, params.num_ues, NUM_ACTIONS):
        raise ValueError(f"q_grads shape {q_grads.shape} does not match the forward pass")

    d_grads = np.zeros((cache.batch, params.bs_out_dim))
    head_grads = []
    for ue in range(params.num_ues):
        g, dd = _stack_backward(params.head_nets[ue], cache.head[ue], q_grads[:, ue, :], act)
        head_grads.append(g)
        d_grads[:, ue * dcm:(ue + 1) * dcm] = dd

    bs_grads, dz = _stack_backward(params.bs_net, cache.bs, d_grads, act)

    ue_grads = []
    for ue in range(params.num_ues):
        du = dz[:, ue * ucm:(ue + 1) * ucm]
        g, _ = _stack_backward(params.ue_nets[ue], cache.ue[ue], du, act)
        ue_grads.append(g)

    return [*ue_grads, bs_grads, *head_grads]


def pipeline_forward(params: NpmParams, state: EnvState):
    """Single-state wrapper around :func:`forward_batch`: returns ((L, 3) Q-values, cache)."""
    counts = np.asarray([state.ue_buffers], dtype=int)
    obs = np.asarray([state.bs_obs], dtype=int)
    q, cache = forward_batch(params, counts, obs)
    return q[0], cache


def pipeline_backward(params: NpmParams, cache: ForwardCache, q_grads: np.ndarray):
    """Single-state wrapper around :func:`backward_batch` for (L, 3) gradients."""
    return backward_batch(params, cache, np.asarray(q_grads)[None, :, :])


def select_action(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over one UE's Q-row; ties resolve to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(NUM_ACTIONS))
    return int(np.argmax(q_values))


def greedy_actions(q: np.ndarray) -> list:
    """Greedy joint action from an (L, 3) Q-matrix."""
    return [int(a) for a in np.argmax(q, axis=1)]


def _copy_stack(stack: Stack) -> Stack:
    return [(w.copy(), b.copy()) for w, b in stack]


def expand_for_ue_count(params: NpmParams, new_num_ues: int, rng: np.random.Generator,
                        new_caps=None) -> NpmParams:
    """Grow a parameter set to serve more UEs.

    Per-UE networks keep their dimensions, so existing ones are preserved
    bit-exactly and networks for the added UEs are randomly initialised. The
    shared base-station net cannot carry over: both its input (message blocks
    plus the observation one-hot) and its output (one downlink message per
    UE) change width with the UE count, so it is rebuilt from a fresh random
    initialisation. The expanded set therefore needs retraining before it is
    useful again.
    """
    old = params.num_ues
    if new_num_ues <= old:
        raise ValueError(f"expansion requires more UEs than {old}, got {new_num_ues}")
    shape = params.shape
    if new_caps is None:
        new_caps = [params.ue_caps[-1]] * (new_num_ues - old)
    new_caps = [int(c) for c in new_caps]
    if len(new_caps) != new_num_ues - old:
        raise ValueError("new_caps must cover exactly the added UEs")

    out = NpmParams(shape=shape, num_ues=new_num_ues, ue_caps=tuple([*params.ue_caps, *new_caps]))
    out.ue_nets = [_copy_stack(s) for s in params.ue_nets]
    out.head_nets = [_copy_stack(s) for s in params.head_nets]
    for cap in new_caps:
        out.ue_nets.append(_init_stack([cap + 1, *shape.ue_hidden, shape.ucm_dim], rng))
    for _ in range(new_num_ues - old):
        out.head_nets.append(_init_stack([shape.dcm_dim, *shape.head_hidden, NUM_ACTIONS], rng))
    out.bs_net = _init_stack([out.bs_in_dim, *shape.bs_hidden, out.bs_out_dim], rng)
    return out


def shrink_for_ue_count(params: NpmParams, new_num_ues: int,
                        rng: np.random.Generator) -> NpmParams:
    """Slice a parameter set down to fewer UEs.

    The mirror of :func:`expand_for_ue_count`: per-UE networks beyond the
    new count are dropped, the kept ones are preserved bit-exactly, and the
    shared base-station net is rebuilt from a fresh random initialisation at
    the smaller dimensions. Like expansion, the result needs retraining.
    """
    old = params.num_ues
    if not 1 <= new_num_ues < old:
        raise ValueError(f"shrink requires fewer UEs than {old}, got {new_num_ues}")
    shape = params.shape
    out = NpmParams(shape=shape, num_ues=new_num_ues, ue_caps=tuple(params.ue_caps[:new_num_ues]))
    out.ue_nets = [_copy_stack(s) for s in params.ue_nets[:new_num_ues]]
    out.head_nets = [_copy_stack(s) for s in params.head_nets[:new_num_ues]]
    out.bs_net = _init_stack([out.bs_in_dim, *shape.bs_hidden, out.bs_out_dim], rng)
    return out


def param_count(params: NpmParams) -> int:
    return int(sum(a.size for a in params.arrays()))


def zero_grads(params: NpmParams):
    """Gradient structure of zeros aligned with ``params.stacks()``."""
    return [[(np.zeros_like(w), np.zeros_like(b)) for w, b in stack] for stack in params.stacks()]


_META_KEY = "meta"


def save_params(params: NpmParams, path) -> None:
    """Write a checkpoint: a JSON shape header plus every layer matrix
    (row-major float64) keyed ``{net}{index}_{W|b}{layer}``. Round-trips
    bit-exactly."""
    meta = {
        "layout_version": 1,
        "num_ues": params.num_ues,
        "ue_caps": list(params.ue_caps),
        "shape": asdict(params.shape),
        "layers": {
            "ue": [len(s) for s in params.ue_nets],
            "bs": len(params.bs_net),
            "head": [len(s) for s in params.head_nets],
        },
    }
    arrays = {_META_KEY: np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for ue, stack in enumerate(params.ue_nets):
        for i, (w, b) in enumerate(stack):
            arrays[f"ue{ue}_W{i}"] = w
            arrays[f"ue{ue}_b{i}"] = b
    for i, (w, b) in enumerate(params.bs_net):
        arrays[f"bs_W{i}"] = w
        arrays[f"bs_b{i}"] = b
    for ue, stack in enumerate(params.head_nets):
        for i, (w, b) in enumerate(stack):
            arrays[f"head{ue}_W{i}"] = w
            arrays[f"head{ue}_b{i}"] = b
    np.savez(path, **arrays)


def load_params(path) -> NpmParams:
    with np.load(path) as data:
        meta = json.loads(bytes(data[_META_KEY]).decode("utf-8"))
        if meta.get("layout_version") != 1:
            raise ValueError(f"unsupported checkpoint layout {meta.get('layout_version')!r}")
        shape_fields = dict(meta["shape"])
        for key in ("ue_hidden", "bs_hidden", "head_hidden"):
            shape_fields[key] = tuple(shape_fields[key])
        shape = NetworkShape(**shape_fields)
        params = NpmParams(shape=shape, num_ues=int(meta["num_ues"]), ue_caps=tuple(meta["ue_caps"]))
        for ue, n_layers in enumerate(meta["layers"]["ue"]):
            params.ue_nets.append([(data[f"ue{ue}_W{i}"].copy(), data[f"ue{ue}_b{i}"].copy())
                                   for i in range(n_layers)])
        params.bs_net = [(data[f"bs_W{i}"].copy(), data[f"bs_b{i}"].copy())
                         for i in range(meta["layers"]["bs"])]
        for ue, n_layers in enumerate(meta["layers"]["head"]):
            params.head_nets.append([(data[f"head{ue}_W{i}"].copy(), data[f"head{ue}_b{i}"].copy())
                                     for i in range(n_layers)])
    return params
