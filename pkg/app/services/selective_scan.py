"""
Selective state-space recurrence and the Mamba block built on it.

The recurrence is h_t = A_bar_t * h_{t-1} + (B_bar_t x_t), h_0 = 0, with output
y_t = <C_t, h_t> + D_skip * x_t per channel. Both the sequential loop and the
Blelloch associative scan evaluate it; they agree to floating tolerance.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import numpy as np
from scipy.special import expit

from app.errors import ContractError, ShapeError
from app.services import numerics as nx
from app.services.layers import LayerNorm, Linear, ParameterStore, uniform_init
from app.services.numerics import Tensor

ScanMethod = Literal["sequential", "parallel"]

DT_MIN = 1e-3
DT_MAX = 1e-1


@dataclass(frozen=True)
class ScanElement:
    """One step of the recurrence viewed as the affine map h -> a * h + b."""

    a: np.ndarray
    b: np.ndarray


def combine(first: ScanElement, second: ScanElement) -> ScanElement:
    """Apply `first`, then `second`: (a1, b1) o (a2, b2) = (a2 * a1, a2 * b1 + b2)."""
    return ScanElement(second.a * first.a, second.a * first.b + second.b)


def _blelloch(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inclusive scan of (a, b) pairs along axis 0; returns (cumulative a, h)."""
    t_len = a.shape[0]
    size = 1 << max(0, (t_len - 1).bit_length())
    acc_a = np.ones((size,) + a.shape[1:])
    acc_b = np.zeros((size,) + b.shape[1:])
    acc_a[:t_len] = a
    acc_b[:t_len] = b

    # up-sweep: each right child absorbs its left sibling's subtree total
    step = 1
    while step < size:
        left = slice(step - 1, size, 2 * step)
        right = slice(2 * step - 1, size, 2 * step)
        acc_b[right] = acc_a[right] * acc_b[left] + acc_b[right]
        acc_a[right] = acc_a[right] * acc_a[left]
        step *= 2

    # down-sweep: turn subtree totals into exclusive prefixes
    acc_a[size - 1] = 1.0
    acc_b[size - 1] = 0.0
    step = size // 2
    while step >= 1:
        left = slice(step - 1, size, 2 * step)
        right = slice(2 * step - 1, size, 2 * step)
        total_a = acc_a[left].copy()
        total_b = acc_b[left].copy()
        acc_a[left] = acc_a[right]
        acc_b[left] = acc_b[right]
        acc_b[right] = total_a * acc_b[right] + total_b
        acc_a[right] = total_a * acc_a[right]
        step //= 2

    excl_a = acc_a[:t_len]
    excl_b = acc_b[:t_len]
    return a * excl_a, a * excl_b + b


def _partitioned_scan(a: np.ndarray, b: np.ndarray, partition: int, workers: int) -> np.ndarray:
    t_len = a.shape[0]
    if partition <= 0 or partition >= t_len:
        return _blelloch(a, b)[1]

    starts = list(range(0, t_len, partition))
    chunks = [(a[s:s + partition], b[s:s + partition]) for s in starts]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(lambda ab: _blelloch(*ab), chunks))
    else:
        partials = [_blelloch(*ab) for ab in chunks]

    # carry each chunk's final state into the next, left to right
    out = np.empty_like(b)
    carry = np.zeros(a.shape[1:])
    for s, (cum_a, local_h) in zip(starts, partials):
        stop = s + local_h.shape[0]
        out[s:stop] = local_h + cum_a * carry
        carry = out[stop - 1]
    return out


def linear_scan(a: np.ndarray, b: np.ndarray, h0: Optional[np.ndarray] = None,
                method: ScanMethod = "parallel", partition: int = 0, workers: int = 1) -> np.ndarray:
    """All states of h_t = a_t * h_{t-1} + b_t (axis 0 is time), starting from h0 (default 0)."""
    if a.shape != b.shape:
        raise ShapeError(f"scan coefficients differ in shape: {a.shape} vs {b.shape}")
    if method == "sequential":
        h = np.zeros(a.shape[1:]) if h0 is None else np.array(h0, dtype=np.float64)
        out = np.empty_like(b)
        for t in range(a.shape[0]):
            h = a[t] * h + b[t]
            out[t] = h
        return out
    if method != "parallel":
        raise ContractError(f"unknown scan method {method!r}")
    if h0 is not None:
        b = b.copy()
        b[0] = b[0] + a[0] * h0
    return _partitioned_scan(a, b, partition, workers)


def _scan_backward(a, b, c_proj, dy, checkpoints, seg, method):
    """Adjoint pass, recomputing each segment's states from its checkpoint."""
    t_len = a.shape[0]
    da = np.empty_like(a)
    db = np.empty_like(b)
    dc = np.empty_like(c_proj)
    carry = np.zeros(a.shape[1:])  # a_{e} * g_{e} flowing into the segment from the right
    for k in reversed(range(len(checkpoints))):
        s = k * seg
        e = min(t_len, s + seg)
        h0 = checkpoints[k]
        h = linear_scan(a[s:e], b[s:e], h0, method)
        h_prev = np.concatenate([h0[None], h[:-1]], axis=0)

        # g_t = C_t dy_t + a_{t+1} g_{t+1}, run right to left
        drive = dy[s:e, :, None] * c_proj[s:e, None, :]
        alpha = np.concatenate([np.ones((1,) + a.shape[1:]), a[s + 1:e][::-1]], axis=0)
        g = linear_scan(alpha, drive[::-1], carry, method)[::-1]

        da[s:e] = g * h_prev
        db[s:e] = g
        dc[s:e] = np.einsum("td,tdn->tn", dy[s:e], h)
        carry = a[s] * g[0]
    return da, db, dc


def _check_scan_shapes(a_bar: Tensor, bx: Tensor, c_proj: Tensor, x: Tensor, d_skip: Tensor):
    if a_bar.ndim != 3 or a_bar.shape != bx.shape:
        raise ShapeError(f"A_bar and B_bar_x must share a (T, D, N) shape, got {a_bar.shape}, {bx.shape}")
    t_len, d, n = a_bar.shape
    if c_proj.shape != (t_len, n) or x.shape != (t_len, d) or d_skip.shape != (d,):
        raise ShapeError(f"inconsistent scan operands for (T, D, N)=({t_len}, {d}, {n}): "
                         f"C {c_proj.shape}, x {x.shape}, D_skip {d_skip.shape}")


def selective_scan(a_bar: Tensor, bx: Tensor, c_proj: Tensor, x: Tensor, d_skip: Tensor,
                   method: ScanMethod = "parallel", partition: int = 0, workers: int = 1) -> Tensor:
    """Differentiable y_t = <C_t, h_t> + D_skip * x_t.

    Only the states at every ceil(sqrt(T))-th step are kept for the backward pass;
    the rest are recomputed segment by segment.
    """
    _check_scan_shapes(a_bar, bx, c_proj, x, d_skip)
    t_len = a_bar.shape[0]
    h = linear_scan(a_bar.data, bx.data, None, method, partition, workers)
    y = np.einsum("tdn,tn->td", h, c_proj.data) + d_skip.data * x.data

    seg = math.isqrt(t_len - 1) + 1 if t_len > 1 else 1
    checkpoints = [np.zeros(a_bar.shape[1:])] + [h[k * seg - 1].copy() for k in range(1, math.ceil(t_len / seg))]
    del h

    def backward(g):
        da, db, dc = _scan_backward(a_bar.data, bx.data, c_proj.data, g, checkpoints, seg, method)
        return da, db, dc, g * d_skip.data, (g * x.data).sum(axis=0)

    return nx.emit("selective_scan", (a_bar, bx, c_proj, x, d_skip), y, backward)


def scan_sequential(a_bar: Tensor, bx: Tensor, c_proj: Tensor, x: Tensor, d_skip: Tensor) -> Tensor:
    return selective_scan(a_bar, bx, c_proj, x, d_skip, method="sequential")


def scan_parallel(a_bar: Tensor, bx: Tensor, c_proj: Tensor, x: Tensor, d_skip: Tensor,
                  partition: int = 0, workers: int = 1) -> Tensor:
    return selective_scan(a_bar, bx, c_proj, x, d_skip, method="parallel", partition=partition, workers=workers)


def discretize(delta: Tensor, a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    """Zero-order hold on the diagonal: A_bar = exp(delta * A), simplified drive B_bar = delta * B."""
    if delta.ndim != 2 or a.ndim != 2 or b.ndim != 2 or delta.shape[1] != a.shape[0] \
            or b.shape != (delta.shape[0], a.shape[1]):
        raise ShapeError(f"discretize expects (T, D), (D, N), (T, N); got {delta.shape}, {a.shape}, {b.shape}")
    if np.any(delta.data <= 0):
        raise ContractError("delta must be strictly positive")
    t_len, d = delta.shape
    n = a.shape[1]
    delta3 = nx.reshape(delta, (t_len, d, 1))
    a_bar = nx.exp(delta3 * nx.reshape(a, (1, d, n)))
    b_bar = delta3 * nx.reshape(b, (t_len, 1, n))
    return a_bar, b_bar


def gated_recurrence(x: Tensor, gate: Linear, method: ScanMethod = "parallel") -> Tensor:
    """h_t = (1 - g_t) h_{t-1} + g_t x_t with g_t = sigmoid(gate(x_t)) and h_0 = 0."""
    if x.ndim != 2:
        raise ShapeError(f"gated_recurrence expects (T, D), got {x.shape}")
    t_len, d = x.shape
    g = nx.sigmoid(gate(x))
    decay = nx.reshape(1.0 - g, (t_len, d, 1))
    drive = nx.reshape(g * x, (t_len, d, 1))
    readout = Tensor(np.ones((t_len, 1)))
    return selective_scan(decay, drive, readout, x, Tensor(np.zeros(d)), method=method)


@dataclass
class SSMLayerParams:
    """Names of one layer's selective-SSM parameters inside a ParameterStore."""

    d_model: int
    d_state: int
    a_log: str
    proj_delta: Linear
    delta_bias: str
    proj_b: Linear
    proj_c: Linear
    d_skip: Optional[str]


@dataclass
class BlockCache:
    """Incremental state of one block: trailing conv inputs and the SSM state."""

    conv_buffer: np.ndarray
    h: np.ndarray


class MambaBlock:
    """LayerNorm -> in_proj (u, z) -> causal depthwise conv -> SiLU -> selective SSM
    -> * SiLU(z) -> out_proj -> residual."""

    def __init__(self, store: ParameterStore, name: str, d_model: int, d_inner: int, d_state: int,
                 conv_kernel: int, rng: np.random.Generator, use_skip: bool = True,
                 scan_method: ScanMethod = "parallel", partition: int = 0, workers: int = 1):
        self.store = store
        self.d_model = d_model
        self.d_inner = d_inner
        self.d_state = d_state
        self.conv_kernel = conv_kernel
        self.scan_method = scan_method
        self.partition = partition
        self.workers = workers

        self.norm = LayerNorm(store, f"{name}.norm", d_model)
        self.in_proj = Linear(store, f"{name}.in_proj", d_model, 2 * d_inner, rng, bias=False)
        self.conv_weight = store.add(f"{name}.conv.weight", uniform_init(rng, conv_kernel, (conv_kernel, d_inner)))
        self.conv_bias = store.add(f"{name}.conv.bias", np.zeros(d_inner))

        # S4-style real init for A; delta bias is inverse softplus of dt ~ logU[DT_MIN, DT_MAX]
        a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1)))
        dt = np.exp(rng.uniform(np.log(DT_MIN), np.log(DT_MAX), size=d_inner))
        self.ssm = SSMLayerParams(
            d_model=d_inner,
            d_state=d_state,
            a_log=store.add(f"{name}.ssm.A_log", a_log),
            proj_delta=Linear(store, f"{name}.ssm.proj_delta", d_inner, d_inner, rng, bias=False),
            delta_bias=store.add(f"{name}.ssm.delta_bias", dt + np.log(-np.expm1(-dt))),
            proj_b=Linear(store, f"{name}.ssm.proj_B", d_inner, d_state, rng, bias=False),
            proj_c=Linear(store, f"{name}.ssm.proj_C", d_inner, d_state, rng, bias=False),
            d_skip=store.add(f"{name}.ssm.D_skip", np.ones(d_inner)) if use_skip else None,
        )
        self.out_proj = Linear(store, f"{name}.out_proj", d_inner, d_model, rng, bias=False, zero_init=True)

    @staticmethod
    def parameter_count(d_model: int, d_inner: int, d_state: int, conv_kernel: int, use_skip: bool) -> int:
        return (2 * d_model                      # norm
                + d_model * 2 * d_inner          # in_proj
                + conv_kernel * d_inner + d_inner  # conv
                + d_inner * d_state              # A_log
                + d_inner * d_inner + d_inner    # proj_delta, delta_bias
                + 2 * d_inner * d_state          # proj_B, proj_C
                + (d_inner if use_skip else 0)   # D_skip
                + d_inner * d_model)             # out_proj

    def _d_skip(self) -> Tensor:
        if self.ssm.d_skip is None:
            return Tensor(np.zeros(self.d_inner))
        return self.store[self.ssm.d_skip]

    def _ssm(self, u: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        t_len = u.shape[0]
        delta = nx.softplus(self.ssm.proj_delta(u) + self.store[self.ssm.delta_bias])
        a = -nx.exp(self.store[self.ssm.a_log])
        a_bar, b_bar = discretize(delta, a, self.ssm.proj_b(u))
        bx = b_bar * nx.reshape(u, (t_len, self.d_inner, 1))
        y = selective_scan(a_bar, bx, self.ssm.proj_c(u), u, self._d_skip(),
                           self.scan_method, self.partition, self.workers)
        return y, a_bar, bx

    def __call__(self, x: Tensor, cache: Optional[BlockCache] = None) -> Tensor:
        """Full-sequence forward. When `cache` is given it receives the state after the last step."""
        if x.ndim != 2 or x.shape[1] != self.d_model:
            raise ShapeError(f"block expects (T, {self.d_model}), got {x.shape}")
        uz = self.in_proj(self.norm(x))
        u_pre = nx.take(uz, 0, self.d_inner, axis=1)
        z = nx.take(uz, self.d_inner, 2 * self.d_inner, axis=1)
        u = nx.silu(nx.causal_depthwise_conv1d(u_pre, self.store[self.conv_weight]) + self.store[self.conv_bias])
        y, a_bar, bx = self._ssm(u)
        out = x + self.out_proj(y * nx.silu(z))

        if cache is not None:
            cache.conv_buffer = self._trailing_inputs(u_pre.data)
            cache.h = linear_scan(a_bar.data, bx.data, None, self.scan_method)[-1]
        return out

    def prefill(self, x: np.ndarray) -> Tuple[np.ndarray, BlockCache]:
        """Run a whole prefix tape-free and return its outputs with the cache after it."""
        cache = self.empty_cache()
        out = self(Tensor(x), cache)
        return out.data, cache

    def _trailing_inputs(self, u_pre: np.ndarray) -> np.ndarray:
        width = self.conv_kernel - 1
        buf = np.zeros((width, self.d_inner))
        if width:
            tail = u_pre[-width:]
            buf[width - tail.shape[0]:] = tail
        return buf

    def empty_cache(self) -> BlockCache:
        return BlockCache(conv_buffer=np.zeros((self.conv_kernel - 1, self.d_inner)),
                          h=np.zeros((self.d_inner, self.d_state)))

    def step(self, x_t: np.ndarray, cache: BlockCache) -> np.ndarray:
        """Advance one position (tape-free), updating `cache` in place."""
        uz = self.in_proj.apply(self.norm.apply(x_t))
        u_pre, z = uz[:self.d_inner], uz[self.d_inner:]

        window = np.vstack([cache.conv_buffer, u_pre[None]])
        conv = np.einsum("kc,kc->c", window, self.store[self.conv_weight].data) + self.store[self.conv_bias].data
        cache.conv_buffer = window[1:]
        u = conv * expit(conv)

        delta = np.logaddexp(0.0, self.ssm.proj_delta.apply(u) + self.store[self.ssm.delta_bias].data)
        a_bar = np.exp(delta[:, None] * -np.exp(self.store[self.ssm.a_log].data))
        b_proj = self.ssm.proj_b.apply(u)
        c_proj = self.ssm.proj_c.apply(u)
        cache.h = a_bar * cache.h + (delta[:, None] * b_proj[None, :]) * u[:, None]
        y = cache.h @ c_proj + self._d_skip().data * u
        return x_t + self.out_proj.apply(y * (z * expit(z)))


def mamba_block(x: Tensor, block: MambaBlock) -> Tensor:
    return block(x)
