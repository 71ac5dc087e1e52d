"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward primitive needed by the feature networks and the dependence
costs lives here: valid-mode convolution, zero padding, relu/sigmoid,
batch normalization, average pooling, channel/axis concatenation, noise
channel injection, position-wise second-moment statistics and a
log-determinant of small symmetric matrices.

All arithmetic is 64-bit. Every op validates that its output is finite and
raises rather than letting NaN/Inf propagate. Gradients are accumulated
into ``Tensor.grad`` buffers by ``backward`` on a scalar loss; calling
``backward`` again without zeroing accumulates, matching the usual
deep-learning convention.
"""

from __future__ import annotations

import numpy as np

from . import linalg

__all__ = [
    "Tensor",
    "no_grad",
    "parameter",
    "constant",
    "add",
    "scale",
    "mul",
    "tensor_sum",
    "mean_all",
    "reshape",
    "transpose2d",
    "take_rows",
    "crop2d",
    "concat",
    "concat_channels",
    "positions_by_channels",
    "pad2d",
    "conv2d",
    "relu",
    "sigmoid",
    "batchnorm2d",
    "avgpool2d",
    "append_noise",
    "window_sum",
    "outer_stats",
    "weighted_sum",
    "logdet_psd",
]


class AutodiffError(ValueError):
    """Raised on precondition violations or non-finite forward values."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (eval-mode forwards)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(data: np.ndarray, op: str) -> None:
    # a single reduction: any NaN/Inf in the array makes the sum non-finite
    if not np.isfinite(data.sum()):
        raise AutodiffError(f"{op}: non-finite value in forward output")


class Tensor:
    """A dense float64 array plus an optional slot in the backward graph.

    ``data`` is treated as immutable once the tensor participates in a
    graph; only ``grad`` is mutated, by ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_rule", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_rule = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self) -> np.ndarray:
        """The raw array, outside the graph."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def _accumulate_fresh(self, g: np.ndarray) -> None:
        """Adopt a gradient array the caller just allocated and will not
        touch again (skips the defensive copy of ``_accumulate``)."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar loss, populating ``grad`` buffers.

        The graph is walked in reverse topological order so each node's rule
        fires exactly once with its fully accumulated output gradient.
        Interior-node gradients are scratch space cleared per sweep; leaf
        gradients accumulate across calls until ``zero_grad``.
        """
        if self.data.size != 1:
            raise AutodiffError("backward requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            if node._backward_rule is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_rule is not None and node.grad is not None:
                node._backward_rule(node.grad)

    # Light operator sugar used by the costs and trainer modules.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, s):
        return scale(self, s) if np.isscalar(s) else mul(self, s)

    def __rmul__(self, s):
        return self.__mul__(s)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def parameter(data, name: str | None = None) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _wrap(data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_rule = rule
    return out


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutodiffError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def rule(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _wrap(a.data + b.data, (a, b), rule, "add")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def rule(g):
        a._accumulate_fresh(s * g)

    return _wrap(a.data * s, (a,), rule, "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; operands must have identical shapes."""
    if a.shape != b.shape:
        raise AutodiffError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def rule(g):
        if a.requires_grad:
            a._accumulate_fresh(g * b.data)
        if b.requires_grad:
            b._accumulate_fresh(g * a.data)

    return _wrap(a.data * b.data, (a, b), rule, "mul")


def tensor_sum(a: Tensor) -> Tensor:
    def rule(g):
        a._accumulate_fresh(np.full_like(a.data, float(g.reshape(()))))

    return _wrap(np.asarray(a.data.sum()), (a,), rule, "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def rule(g):
        a._accumulate_fresh(np.full_like(a.data, float(g.reshape(())) / n))

    return _wrap(np.asarray(a.data.mean()), (a,), rule, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def rule(g):
        a._accumulate_fresh(g.reshape(a.data.shape))

    return _wrap(a.data.reshape(shape), (a,), rule, "reshape")


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise AutodiffError("transpose2d expects a matrix")

    def rule(g):
        a._accumulate_fresh(g.T)

    return _wrap(a.data.T.copy(), (a,), rule, "transpose2d")


def crop2d(a: Tensor, i0: int, i1: int, j0: int, j1: int) -> Tensor:
    """Spatial slice [i0:i1, j0:j1] of an NCHW tensor."""
    if a.data.ndim != 4:
        raise AutodiffError("crop2d expects NCHW input")
    H, W = a.shape[2], a.shape[3]
    if not (0 <= i0 < i1 <= H and 0 <= j0 < j1 <= W):
        raise AutodiffError(f"crop2d: window [{i0}:{i1},{j0}:{j1}] outside {H}x{W}")

    def rule(g):
        full = np.zeros_like(a.data)
        full[:, :, i0:i1, j0:j1] = g
        a._accumulate_fresh(full)

    return _wrap(np.ascontiguousarray(a.data[:, :, i0:i1, j0:j1]), (a,), rule, "crop2d")


def take_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous slice [lo:hi] along the leading axis."""
    if not (0 <= lo < hi <= a.shape[0]):
        raise AutodiffError(f"take_rows: [{lo}:{hi}] outside leading axis {a.shape[0]}")

    def rule(g):
        full = np.zeros_like(a.data)
        full[lo:hi] = g
        a._accumulate_fresh(full)

    return _wrap(a.data[lo:hi].copy(), (a,), rule, "take_rows")


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise AutodiffError("concat of empty list")
    parts = [t.data for t in tensors]
    base = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(base) or any(
            p.shape[d] != base[d] for d in range(len(base)) if d != axis % len(base)
        ):
            raise AutodiffError("concat: non-concat axes must match")
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def rule(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate_fresh(piece)

    return _wrap(np.concatenate(parts, axis=axis), tuple(tensors), rule, "concat")


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Channel-axis concatenation of NCHW tensors sharing N, H, W."""
    return concat(tensors, axis=1)


def positions_by_channels(a: Tensor) -> Tensor:
    """NCHW -> (N*H*W, C): one row per spatial position, channels as columns."""
    if a.data.ndim != 4:
        raise AutodiffError("positions_by_channels expects NCHW input")
    n, c, h, w = a.shape

    def rule(g):
        a._accumulate_fresh(g.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    out = a.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    return _wrap(np.ascontiguousarray(out), (a,), rule, "positions_by_channels")


# ---------------------------------------------------------------------------
# network layers


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the two spatial axes of an NCHW tensor by ``pad`` on each side."""
    if pad < 0:
        raise AutodiffError("pad2d: pad must be >= 0")
    if a.data.ndim != 4:
        raise AutodiffError("pad2d expects NCHW input")
    if pad == 0:
        data = a.data

        def rule0(g):
            a._accumulate_fresh(g)

        return _wrap(data, (a,), rule0, "pad2d")

    def rule(g):
        a._accumulate_fresh(g[:, :, pad:-pad, pad:-pad])

    data = np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return _wrap(data, (a,), rule, "pad2d")


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N,C,H,W) -> (C*kh*kw, N*Ho*Wo) valid-mode patch matrix (contiguous copy)."""
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    sn, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh, sw, sn, sh, sw),
        writeable=False,
    )
    return patches.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Valid-mode stride-1 convolution, NCHW input and OIKhKw kernel.

    Output spatial dims are (H-Kh+1, W-Kw+1); gradients flow to input,
    kernel and bias.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise AutodiffError("conv2d expects NCHW input and OIKhKw kernel")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if i != c:
        raise AutodiffError(f"conv2d: input has {c} channels, kernel expects {i}")
    if kh > h or kw > w:
        raise AutodiffError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.shape != (o,):
        raise AutodiffError("conv2d: bias must have one entry per output channel")
    ho, wo = h - kh + 1, w - kw + 1
    kmat = kernel.data.reshape(o, c * kh * kw)

    if kh == 1 and kw == 1:
        # 1x1 fast path: plain channel mixing, no patch matrix.
        cols = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
        out = (kmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
        out = out + bias.data[None, :, None, None]

        def rule1(g):
            gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
            if kernel.requires_grad:
                kernel._accumulate_fresh((gmat @ cols.T).reshape(kernel.shape))
            if bias.requires_grad:
                bias._accumulate_fresh(gmat.sum(axis=1))
            if x.requires_grad:
                dx = (kmat.T @ gmat).reshape(c, n, h, w).transpose(1, 0, 2, 3)
                x._accumulate_fresh(dx)

        return _wrap(out, (x, kernel, bias), rule1, "conv2d")

    cols = _im2col(x.data, kh, kw)  # (C*kh*kw, N*Ho*Wo)
    out = (kmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = out + bias.data[None, :, None, None]

    def rule(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        if kernel.requires_grad:
            kernel._accumulate_fresh((gmat @ cols.T).reshape(kernel.shape))
        if bias.requires_grad:
            bias._accumulate_fresh(gmat.sum(axis=1))
        if x.requires_grad:
            dcols = (kmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            # accumulate in (C, N, H, W) layout so the window adds stay aligned
            dx_t = np.zeros((c, n, h, w))
            for a in range(kh):
                for b in range(kw):
                    dx_t[:, :, a : a + ho, b : b + wo] += dcols[:, a, b]
            x._accumulate_fresh(dx_t.transpose(1, 0, 2, 3))

    return _wrap(out, (x, kernel, bias), rule, "conv2d")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def rule(g):
        a._accumulate_fresh(g * mask)

    return _wrap(np.where(mask, a.data, 0.0), (a,), rule, "relu")


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))

    def rule(g):
        a._accumulate_fresh(g * y * (1.0 - y))

    return _wrap(y, (a,), rule, "sigmoid")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place (running = momentum*running + (1-momentum)*batch);
    eval mode normalizes with the running buffers. Gradients cover the input
    and the affine scale/shift.
    """
    if x.data.ndim != 4:
        raise AutodiffError("batchnorm2d expects NCHW input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise AutodiffError("batchnorm2d: affine params must be per-channel")
    if train:
        if n < 2:
            raise AutodiffError("batchnorm2d: train mode needs batch size >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        xhat = x.data - mu[None, :, None, None]
        var = np.einsum("nchw,nchw->c", xhat, xhat) / (n * h * w)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat *= inv_std[None, :, None, None]
    else:
        mu = running_mean.copy()
        var = running_var.copy()
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def rule(g):
        gx = np.einsum("nchw,nchw->c", g, xhat)
        if gamma.requires_grad:
            gamma._accumulate_fresh(gx)
        if beta.requires_grad:
            beta._accumulate_fresh(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gs = (gamma.data * inv_std)[None, :, None, None]
            if train:
                m = n * h * w
                dx = g - g.mean(axis=(0, 2, 3))[None, :, None, None]
                dx -= xhat * (gx / m)[None, :, None, None]
                dx *= gs
                x._accumulate_fresh(dx)
            else:
                x._accumulate_fresh(gs * g)

    return _wrap(out, (x, gamma, beta), rule, "batchnorm2d")


def avgpool2d(a: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k window means; spatial dims must divide by k."""
    if a.data.ndim != 4:
        raise AutodiffError("avgpool2d expects NCHW input")
    n, c, h, w = a.shape
    if k < 1:
        raise AutodiffError("avgpool2d: window must be >= 1")
    if h % k or w % k:
        raise AutodiffError(f"avgpool2d: dims {h}x{w} not divisible by {k}")
    if k == 1:
        def rule0(g):
            a._accumulate_fresh(g)

        return _wrap(a.data, (a,), rule0, "avgpool2d")
    out = a.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def rule(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        a._accumulate_fresh(up)

    return _wrap(out, (a,), rule, "avgpool2d")


def append_noise(a: Tensor, n_noise: int, rng: np.random.Generator) -> Tensor:
    """Append uniform [0,1) noise channels with the input's spatial dims.

    The noise is an injected input, not a parameter: it receives no gradient
    and, given a fixed generator state, is bit-reproducible.
    """
    if n_noise < 0:
        raise AutodiffError("append_noise: n_noise must be >= 0")
    if n_noise == 0:
        def rule0(g):
            a._accumulate_fresh(g)

        return _wrap(a.data, (a,), rule0, "append_noise")
    n, c, h, w = a.shape
    noise = rng.random((n, n_noise, h, w))

    def rule(g):
        a._accumulate_fresh(g[:, :c])

    return _wrap(np.concatenate([a.data, noise], axis=1), (a,), rule, "append_noise")


def window_sum(a: Tensor, dm: int, dn: int) -> Tensor:
    """Valid-mode box sum: out(i,j) = sum of the dm x dn window at (i,j)."""
    if a.data.ndim != 4:
        raise AutodiffError("window_sum expects NCHW input")
    n, c, h, w = a.shape
    if dm < 1 or dn < 1 or dm > h or dn > w:
        raise AutodiffError("window_sum: window outside input dims")
    ho, wo = h - dm + 1, w - dn + 1
    out = np.zeros((n, c, ho, wo))
    for di in range(dm):
        for dj in range(dn):
            out += a.data[:, :, di : di + ho, dj : dj + wo]

    def rule(g):
        dx = np.zeros_like(a.data)
        for di in range(dm):
            for dj in range(dn):
                dx[:, :, di : di + ho, dj : dj + wo] += g
        a._accumulate_fresh(dx)

    return _wrap(out, (a,), rule, "window_sum")


def outer_stats(a: Tensor, b: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Mean over positions of the outer products a_p b_p^T.

    ``a`` and ``b`` are (positions x K) with equal position counts. With
    ``weights`` (one non-negative weight per position) the result is
    sum_p w_p a_p b_p^T / sum_p w_p. The reduction is a single row-major
    matrix product, so the accumulation order is fixed.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise AutodiffError("outer_stats expects positions x K inputs")
    p, ka = a.shape
    pb, kb = b.shape
    if p != pb:
        raise AutodiffError(f"outer_stats: position counts differ ({p} vs {pb})")
    if p == 0:
        raise AutodiffError("outer_stats: empty position set")
    if weights is None:
        denom = float(p)
        aw = a.data

        def rule(g):
            if a.requires_grad:
                a._accumulate_fresh(b.data @ g.T / denom)
            if b.requires_grad:
                b._accumulate_fresh(a.data @ g / denom)

    else:
        weights = _f64(weights)
        if weights.shape != (p,):
            raise AutodiffError("outer_stats: one weight per position required")
        denom = float(weights.sum())
        if denom <= 0:
            raise AutodiffError("outer_stats: weights must have positive total")
        aw = a.data * weights[:, None]

        def rule(g):
            if a.requires_grad:
                a._accumulate_fresh((b.data @ g.T) * weights[:, None] / denom)
            if b.requires_grad:
                b._accumulate_fresh((a.data * weights[:, None]) @ g / denom)

    out = aw.T @ b.data / denom
    return _wrap(out, (a, b), rule, "outer_stats")


def weighted_sum(a: Tensor, coeffs: np.ndarray) -> Tensor:
    """Frobenius inner product <coeffs, a> with a constant coefficient array."""
    coeffs = _f64(coeffs)
    if coeffs.shape != a.shape:
        raise AutodiffError("weighted_sum: coefficient shape mismatch")

    def rule(g):
        a._accumulate_fresh(float(g.reshape(())) * coeffs)

    return _wrap(np.asarray(float((a.data * coeffs).sum())), (a,), rule, "weighted_sum")


def logdet_psd(a: Tensor, ridge: float = 0.0) -> Tensor:
    """log det(sym(a) + ridge*I) via Cholesky; backward is the ridge inverse."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AutodiffError("logdet_psd expects a square matrix")
    val = linalg.cholesky_logdet(a.data, ridge)
    inv = linalg.ridge_inverse(a.data, ridge)

    def rule(g):
        a._accumulate_fresh(float(g.reshape(())) * inv)

    return _wrap(np.asarray(val), (a,), rule, "logdet_psd")
