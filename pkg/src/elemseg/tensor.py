"""Minimal reverse-mode tensor core.

Feature maps are laid out height x width x depth. A Graph owns a tape of
executed operations plus a registry of named trainable tensors; calling
``backward`` replays the tape in exact reverse execution order. Storage and
compute default to float32; a Graph can be built with float64 for numeric
cross-checks. Tensors that no trainable parameter feeds (inputs, constants)
carry ``needs_grad=False`` and backward skips their contributions.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def blas_single_thread():
    """Limit BLAS pools to one thread; the matrices here are too small for
    multithreaded GEMM to pay for its synchronization."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)

PROB_FLOOR = 1e-7

CKPT_MAGIC = b"ESEG"
CKPT_VERSION = 1


class Tensor:
    """Dense n-d array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "needs_grad")

    def __init__(self, data, dtype=np.float32, needs_grad=False):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.data.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def _pad_hw(arr: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if not (top or bottom or left or right):
        return arr
    h, w, c = arr.shape
    out = np.zeros((h + top + bottom, w + left + right, c), dtype=arr.dtype)
    out[top:top + h, left:left + w] = arr
    return out


class Graph:
    """Operation tape plus parameter registry.

    A Graph and its tensors are confined to one thread during a forward or
    backward pass; distinct Graphs may run concurrently. With
    ``recording=False`` ops skip the tape and gradient buffers entirely
    (cheap inference mode).
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.recording = True
        self.relu_probe: Callable[[np.ndarray], None] | None = None
        self._tape: list[Callable[[], None]] = []

    # ------------------------------------------------------------------ #
    # registry and tape

    def parameter(self, name: str, values) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(values, dtype=self.dtype, needs_grad=True)
        self.params[name] = t
        return t

    def constant(self, values) -> Tensor:
        return Tensor(values, dtype=self.dtype)

    def tensor(self, data: np.ndarray, needs_grad: bool = False) -> Tensor:
        """Wrap an op result, allocating its gradient buffer when recording."""
        t = Tensor(data, dtype=self.dtype, needs_grad=needs_grad)
        if self.recording and needs_grad:
            t.ensure_grad()
        return t

    def _track(self, *inputs: Tensor) -> bool:
        """True when the tape must record: any input is gradient-bearing."""
        if not self.recording:
            return False
        needs = False
        for t in inputs:
            if t.needs_grad:
                t.ensure_grad()
                needs = True
        return needs

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._tape.append(backward_fn)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.ensure_grad().fill(0)

    def backward(self, loss: Tensor) -> None:
        """Propagate from a scalar loss through the recorded tape.

        Consumes the tape. Parameters not reached by the recorded ops keep
        zero gradients.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        self.seed_backward(loss, np.ones_like(loss.data))

    def seed_backward(self, out: Tensor, cotangent: np.ndarray) -> None:
        for p in self.params.values():
            p.ensure_grad()
        g = out.ensure_grad()
        g[...] = np.asarray(cotangent, dtype=self.dtype)
        for fn in reversed(self._tape):
            fn()
        self._tape.clear()

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.isfinite(p.data).all():
                raise FloatingPointError(f"non-finite values in parameter {name!r}")
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")

    # ------------------------------------------------------------------ #
    # operations

    def conv2d(self, x: Tensor, kernel: Tensor, bias: Tensor,
               stride: int = 1, padding: str = "same") -> Tensor:
        """2-d convolution of an h x w x c_in map with a k x k x c_in x c_out kernel."""
        if x.data.ndim != 3 or kernel.data.ndim != 4:
            raise ValueError(
                f"conv2d expects rank-3 input and rank-4 kernel, got {x.data.shape} and {kernel.data.shape}")
        h, w, cin = x.data.shape
        k, k2, kcin, cout = kernel.data.shape
        if k != k2 or k % 2 == 0:
            raise ValueError(f"kernel must be square with odd extent, got {kernel.data.shape}")
        if kcin != cin:
            raise ValueError(f"input depth {x.data.shape} does not match kernel {kernel.data.shape}")
        if bias.data.shape != (cout,):
            raise ValueError(f"bias shape {bias.data.shape} does not match kernel {kernel.data.shape}")
        if stride < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if padding == "same":
            pad = (k - 1) // 2
        elif padding == "valid":
            pad = 0
        else:
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        oh = (h + 2 * pad - k) // stride + 1
        ow = (w + 2 * pad - k) // stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(
                f"convolution output would be empty: input {x.data.shape}, kernel {k}, "
                f"stride {stride}, padding {padding!r}")

        xp = _pad_hw(x.data, pad, pad, pad, pad)
        win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(oh * ow, k * k * cin)
        kmat = kernel.data.reshape(k * k * cin, cout)
        track = self._track(x, kernel, bias)
        out = self.tensor((cols @ kmat + bias.data).reshape(oh, ow, cout), track)

        if track:
            def bwd():
                g = out.grad.reshape(oh * ow, cout)
                if bias.needs_grad:
                    bias.grad += g.sum(axis=0)
                if kernel.needs_grad:
                    kernel.grad += (cols.T @ g).reshape(kernel.data.shape)
                if x.needs_grad:
                    # input gradient as a full correlation with the flipped kernel
                    if stride > 1:
                        gd = np.zeros(((oh - 1) * stride + 1, (ow - 1) * stride + 1, cout),
                                      dtype=out.grad.dtype)
                        gd[::stride, ::stride] = out.grad
                    else:
                        gd = out.grad
                    pt = k - 1 - pad
                    eh = h + 2 * pad - k - (oh - 1) * stride
                    ew = w + 2 * pad - k - (ow - 1) * stride
                    gp = _pad_hw(gd, pt, pt + eh, pt, pt + ew)
                    gwin = sliding_window_view(gp, (k, k), axis=(0, 1))
                    gcols = np.ascontiguousarray(gwin.transpose(0, 1, 3, 4, 2)) \
                        .reshape(h * w, k * k * cout)
                    wflip = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
                    x.grad += (gcols @ wflip).reshape(h, w, cin)

            self.record(bwd)
        return out

    def dense(self, x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
        if x.data.ndim != 1 or weights.data.ndim != 2:
            raise ValueError(f"dense expects a vector and a matrix, got {x.data.shape} and {weights.data.shape}")
        n, m = weights.data.shape
        if x.data.shape != (n,):
            raise ValueError(f"dense input {x.data.shape} does not match weights {weights.data.shape}")
        if bias.data.shape != (m,):
            raise ValueError(f"dense bias {bias.data.shape} does not match weights {weights.data.shape}")
        track = self._track(x, weights, bias)
        out = self.tensor(x.data @ weights.data + bias.data, track)
        if track:
            def bwd():
                if x.needs_grad:
                    x.grad += weights.data @ out.grad
                if weights.needs_grad:
                    weights.grad += np.outer(x.data, out.grad)
                if bias.needs_grad:
                    bias.grad += out.grad

            self.record(bwd)
        return out

    def relu(self, x: Tensor) -> Tensor:
        if self.relu_probe is not None:
            self.relu_probe(x.data)
        track = self._track(x)
        out = self.tensor(np.maximum(x.data, 0), track)
        if track:
            mask = x.data > 0  # subgradient at 0 is 0

            def bwd():
                x.grad += out.grad * mask

            self.record(bwd)
        return out

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise sum; one operand may be a depth vector broadcast over space."""
        if a.data.shape != b.data.shape:
            if a.data.ndim == 1 and b.data.ndim == 3:
                a, b = b, a
            if not (a.data.ndim == 3 and b.data.ndim == 1 and a.data.shape[2] == b.data.shape[0]):
                raise ValueError(f"add cannot broadcast {a.data.shape} with {b.data.shape}")
        track = self._track(a, b)
        out = self.tensor(a.data + b.data, track)
        if track:
            broadcast = a.data.shape != b.data.shape

            def bwd():
                if a.needs_grad:
                    a.grad += out.grad
                if b.needs_grad:
                    b.grad += out.grad.sum(axis=(0, 1)) if broadcast else out.grad

            self.record(bwd)
        return out

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product; supports scalar x any and map x depth-vector."""
        if a.data.shape != b.data.shape:
            if b.data.size != 1 and a.data.size == 1:
                a, b = b, a
            elif a.data.ndim == 1 and b.data.ndim == 3:
                a, b = b, a
            scalar = b.data.size == 1
            vector = (a.data.ndim == 3 and b.data.ndim == 1
                      and a.data.shape[2] == b.data.shape[0])
            if not (scalar or vector):
                raise ValueError(f"mul cannot broadcast {a.data.shape} with {b.data.shape}")
        track = self._track(a, b)
        out = self.tensor(a.data * b.data, track)
        if track:
            def bwd():
                if a.needs_grad:
                    ga = out.grad * b.data
                    if a.data.shape != ga.shape:
                        ga = ga.sum(axis=(0, 1)) if a.data.ndim == 1 else ga.sum()
                    a.grad += ga.reshape(a.data.shape)
                if b.needs_grad:
                    gb = out.grad * a.data
                    if b.data.shape != gb.shape:
                        gb = gb.sum(axis=(0, 1)) if b.data.ndim == 1 else gb.sum()
                    b.grad += gb.reshape(b.data.shape)

            self.record(bwd)
        return out

    def scale(self, x: Tensor, s: float) -> Tensor:
        s = self.dtype.type(s)
        track = self._track(x)
        out = self.tensor(x.data * s, track)
        if track:
            def bwd():
                x.grad += out.grad * s

            self.record(bwd)
        return out

    def concat_depth(self, xs: Sequence[Tensor]) -> Tensor:
        if not xs:
            raise ValueError("concat_depth requires at least one input")
        hw = xs[0].data.shape[:2]
        for t in xs:
            if t.data.ndim != 3 or t.data.shape[:2] != hw:
                raise ValueError(
                    f"concat_depth spatial mismatch: {t.data.shape} vs {xs[0].data.shape}")
        track = self._track(*xs)
        out = self.tensor(np.concatenate([t.data for t in xs], axis=2), track)
        if track:
            offsets = np.cumsum([0] + [t.data.shape[2] for t in xs])

            def bwd():
                for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                    if t.needs_grad:
                        t.grad += out.grad[:, :, lo:hi]

            self.record(bwd)
        return out

    def softmax(self, x: Tensor) -> Tensor:
        """Softmax over the trailing axis (depth for maps, the set for vectors)."""
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        track = self._track(x)
        out = self.tensor(e / e.sum(axis=-1, keepdims=True), track)
        if track:
            def bwd():
                s = out.data
                inner = (out.grad * s).sum(axis=-1, keepdims=True)
                x.grad += (out.grad - inner) * s

            self.record(bwd)
        return out

    def tile_spatial(self, vec: Tensor, h: int, w: int) -> Tensor:
        if vec.data.ndim != 1:
            raise ValueError(f"tile_spatial expects a vector, got shape {vec.data.shape}")
        if h < 1 or w < 1:
            raise ValueError(f"tile_spatial extents must be >= 1, got {h}x{w}")
        track = self._track(vec)
        out = self.tensor(np.broadcast_to(vec.data, (h, w, vec.data.shape[0])).copy(), track)
        if track:
            def bwd():
                vec.grad += out.grad.sum(axis=(0, 1))

            self.record(bwd)
        return out

    def upsample_nearest(self, x: Tensor, factor: int) -> Tensor:
        if x.data.ndim != 3:
            raise ValueError(f"upsample_nearest expects a rank-3 map, got {x.data.shape}")
        if factor < 1:
            raise ValueError(f"upsample factor must be >= 1, got {factor}")
        h, w, d = x.data.shape
        track = self._track(x)
        out = self.tensor(x.data.repeat(factor, axis=0).repeat(factor, axis=1), track)
        if track:
            def bwd():
                x.grad += out.grad.reshape(h, factor, w, factor, d).sum(axis=(1, 3))

            self.record(bwd)
        return out

    def dot(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 1 or a.data.shape != b.data.shape:
            raise ValueError(f"dot expects equal-length vectors, got {a.data.shape} and {b.data.shape}")
        track = self._track(a, b)
        out = self.tensor(np.asarray(a.data @ b.data), track)
        if track:
            def bwd():
                if a.needs_grad:
                    a.grad += out.grad * b.data
                if b.needs_grad:
                    b.grad += out.grad * a.data

            self.record(bwd)
        return out

    def stack(self, xs: Sequence[Tensor]) -> Tensor:
        if not xs:
            raise ValueError("stack requires at least one input")
        for t in xs:
            if t.data.size != 1:
                raise ValueError(f"stack expects scalars, got shape {t.data.shape}")
        track = self._track(*xs)
        out = self.tensor(np.stack([t.data.reshape(()) for t in xs]), track)
        if track:
            def bwd():
                for i, t in enumerate(xs):
                    if t.needs_grad:
                        t.grad += out.grad[i]

            self.record(bwd)
        return out

    def pick(self, vec: Tensor, index: int) -> Tensor:
        if vec.data.ndim != 1:
            raise ValueError(f"pick expects a vector, got shape {vec.data.shape}")
        if not 0 <= index < vec.data.shape[0]:
            raise ValueError(f"pick index {index} out of range for shape {vec.data.shape}")
        track = self._track(vec)
        out = self.tensor(np.asarray(vec.data[index]), track)
        if track:
            def bwd():
                vec.grad[index] += out.grad

            self.record(bwd)
        return out

    def cross_entropy(self, logits: Tensor, target: np.ndarray) -> Tensor:
        """Mean per-pixel negative log-probability of the true class.

        ``logits`` is h x w x 2, ``target`` a binary h x w mask. Probabilities
        are floored at PROB_FLOOR, with zero gradient where the floor binds.
        """
        target = np.asarray(target)
        if logits.data.ndim != 3 or logits.data.shape[2] != 2:
            raise ValueError(f"cross_entropy expects h x w x 2 logits, got {logits.data.shape}")
        if target.shape != logits.data.shape[:2]:
            raise ValueError(
                f"target shape {target.shape} does not match logits {logits.data.shape}")
        if not ((target == 0) | (target == 1)).all():
            raise ValueError("cross_entropy target mask must be binary")
        h, w = target.shape
        cls = target.astype(np.int64)
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        logp = np.take_along_axis(z, cls[..., None], axis=-1)[..., 0] - lse
        floor = np.log(self.dtype.type(PROB_FLOOR))
        clipped = logp < floor
        track = self._track(logits)
        out = self.tensor(np.asarray(-np.maximum(logp, floor).mean(), dtype=self.dtype), track)
        if track:
            def bwd():
                e = np.exp(z)
                grad = e / e.sum(axis=-1, keepdims=True)
                grad[..., 0] -= 1 - cls
                grad[..., 1] -= cls
                if clipped.any():
                    grad[clipped] = 0
                logits.grad += grad * (out.grad / (h * w))

            self.record(bwd)
        return out


# ---------------------------------------------------------------------- #
# parameter checkpoints: version tag, then per parameter its name, shape
# and raw little-endian float32 values; byte-exact round trip.

def save_params(path, params: dict[str, Tensor]) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(params)))
        for name, t in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            shape = t.data.shape
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(np.asarray(t.data, dtype="<f4").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint (bad magic {magic!r})")
        version, count = struct.unpack("<II", f.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            params[name] = data.astype(np.float32)
    return params
