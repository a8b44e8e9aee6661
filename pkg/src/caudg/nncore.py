"""Small reverse-mode autodiff core on top of numpy.

Covers only what the two-branch network needs: valid 1-D convolution, max
pooling, affine layers, batch norm, ReLU, softmax cross-entropy and a handful
of elementwise / reduction helpers used by the loss terms. Everything runs in
float64.
"""

from __future__ import annotations

import contextlib
import json
import math
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __float__(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, all routed through the functional ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """A named leaf tensor whose gradient accumulates across backward calls."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction helpers
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a) -> Tensor:
    """[B, ...] -> [B, prod(...)], row-major."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def minimum(a, value: float) -> Tensor:
    """Elementwise min(a, value); gradient passes where a < value."""
    a = as_tensor(a)
    mask = a.data < value
    return _make(np.where(mask, a.data, value), (a,), lambda g: (g * mask,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def conv_output_width(width: int, kernel: int, stride: int = 1) -> int:
    return (width - kernel) // stride + 1


def conv1d(x, weight, bias, stride: int = 1) -> Tensor:
    """Valid convolution along the width of a [B, C_in, 1, W] tensor."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or x.shape[2] != 1:
        raise ValueError(f"conv1d expects input [B, C, 1, W], got {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != 1:
        raise ValueError(f"conv1d expects kernel [C_out, C_in, 1, K], got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv1d channel mismatch: input {x.shape} has C_in={x.shape[1]}, "
            f"kernel {weight.shape} expects C_in={weight.shape[1]}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    B, cin, _, W = x.shape
    cout, _, _, K = weight.shape
    if W < K:
        raise ValueError(f"input width {W} is smaller than kernel width {K}")
    wout = conv_output_width(W, K, stride)

    xs = x.data[:, :, 0, :]
    # [B, C_in, W_out, K] -> [B, W_out, C_in*K]
    win = np.lib.stride_tricks.sliding_window_view(xs, K, axis=2)[:, :, ::stride, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B, wout, cin * K)
    wmat = weight.data.reshape(cout, cin * K)
    out = cols @ wmat.T + bias.data  # [B, W_out, C_out]
    out = out.transpose(0, 2, 1)[:, :, None, :]

    def backward(g):
        g2 = g[:, :, 0, :].transpose(0, 2, 1)  # [B, W_out, C_out]
        gw = np.tensordot(g2, cols, axes=([0, 1], [0, 1])).reshape(weight.shape)
        gb = g2.sum(axis=(0, 1))
        gcols = (g2 @ wmat).reshape(B, wout, cin, K)
        gx = np.zeros((B, cin, W), dtype=DTYPE)
        span = stride * (wout - 1) + 1
        for k in range(K):
            gx[:, :, k : k + span : stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        return gx[:, :, None, :], gw, gb

    return _make(np.ascontiguousarray(out), (x, weight, bias), backward)


def maxpool1d(x, width: int) -> Tensor:
    """Non-overlapping max pooling along width; trailing remainder is dropped."""
    x = as_tensor(x)
    if width <= 0:
        raise ValueError(f"pool width must be positive, got {width}")
    B, C, H, W = x.shape
    wout = W // width
    if wout < 1:
        raise ValueError(f"pool width {width} exceeds input width {W}")
    blocks = x.data[..., : wout * width].reshape(B, C, H, wout, width)
    idx = blocks.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=DTYPE)
        gx[..., : wout * width] = gb.reshape(B, C, H, wout * width)
        return (gx,)

    return _make(out, (x,), backward)


def fully_connected(x, weight, bias) -> Tensor:
    """Affine map x @ W.T + b with W of shape [D_out, D_in]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected dimension mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    return _make(
        x.data @ weight.data.T + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)),
    )


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(
    x,
    gamma,
    beta,
    training: bool,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalization over the rows of a [B, D] matrix.

    In training mode the running statistics are updated in place (unbiased
    variance, as is customary); eval mode normalizes with them.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ValueError(f"batch_norm expects [B, D], got {x.shape}")
    B = x.shape[0]
    if training:
        if B < 2:
            raise ValueError("batch_norm in train mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * B / (B - 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gxhat = g * gamma.data
        if training:
            gx = inv / B * (B * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        else:
            gx = gxhat * inv
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"logits must be [B, K], got {logits.shape}")
    B, K = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"label out of range [0, {K}): min={labels.min()}, max={labels.max()}")
    labels = labels.astype(np.int64)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / B,)

    return _make(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# gradient propagation
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every reachable Parameter (+= semantics)."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor produced by a forward pass")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward called on a tensor with no recorded forward graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p in self.params:
            m, v, g = self.m[p.name], self.v[p.name], p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "hyper": {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps},
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        hyper = state["hyper"]
        self.lr, self.beta1, self.beta2, self.eps = hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["eps"]
        for name in self.m:
            self.m[name] = np.array(state["m"][name], dtype=DTYPE)
            self.v[name] = np.array(state["v"][name], dtype=DTYPE)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def numeric_gradient(fn: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(point, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_difference_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` maps a Parameter to a scalar Tensor.
    """
    p = Parameter(np.array(point, dtype=DTYPE), name="x")
    out = fn(p)
    backward(out)
    analytic = p.grad.copy()

    def f(values):
        with no_grad():
            return float(fn(Tensor(values)).data)

    numeric = numeric_gradient(f, p.data, h)
    return float(relative_error(analytic, numeric).max()) if analytic.size else 0.0


def check_parameter_gradients(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                              h: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter for a closure recomputing the loss.

    The closure must be deterministic: any randomness has to be fixed by the
    caller so every evaluation sees the same function.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = {p.name: p.grad.copy() for p in params}
    errors = {}
    for p in params:
        def f(values, p=p):
            saved = p.data
            p.data = values
            with no_grad():
                val = float(loss_fn().data)
            p.data = saved
            return val

        numeric = numeric_gradient(f, p.data.copy(), h)
        errors[p.name] = float(relative_error(analytic[p.name], numeric).max())
    return errors


# ---------------------------------------------------------------------------
# checkpoint format: JSON manifest + flat little-endian float64 blob
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], adam: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write ``<path>.json`` and ``<path>.f64``."""
    path = Path(path)
    entries, chunks, offset = [], [], 0

    def put(name, arr):
        nonlocal offset
        a = np.asarray(arr, dtype="<f8")  # tobytes() is C-ordered; keeps 0-d shapes
        entries_ref = {"id": name, "shape": list(a.shape), "offset": offset}
        chunks.append(a.tobytes())
        offset += a.nbytes
        return entries_ref

    for name, arr in arrays.items():
        entries.append(put(name, arr))
    manifest = {"version": CHECKPOINT_VERSION, "params": entries}
    if adam is not None:
        manifest["adam"] = {
            "step_count": adam["step_count"],
            "hyper": adam["hyper"],
            "m": [put(k, v) for k, v in adam["m"].items()],
            "v": [put(k, v) for k, v in adam["v"].items()],
        }
    if extra:
        manifest["extra"] = extra
    manifest["blob_bytes"] = offset
    path.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{path}.f64").write_bytes(b"".join(chunks))
    Path(f"{path}.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict | None, dict]:
    path = Path(path)
    manifest = json.loads(Path(f"{path}.json").read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    blob = Path(f"{path}.f64").read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ValueError(f"checkpoint blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}")

    def get(entry):
        n = math.prod(entry["shape"])
        a = np.frombuffer(blob, dtype="<f8", count=n, offset=entry["offset"])
        return a.reshape(tuple(entry["shape"])).astype(DTYPE)

    arrays = {e["id"]: get(e) for e in manifest["params"]}
    adam = None
    if "adam" in manifest:
        a = manifest["adam"]
        adam = {
            "step_count": a["step_count"],
            "hyper": a["hyper"],
            "m": {e["id"]: get(e) for e in a["m"]},
            "v": {e["id"]: get(e) for e in a["v"]},
        }
    return arrays, adam, manifest.get("extra", {})
