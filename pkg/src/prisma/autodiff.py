"""Reverse-mode differentiation over the primitive set the denoiser needs.

A :class:`Tape` records primitive applications in append order; backward
visits them strictly in reverse. Values are float64 numpy arrays, except
for spectra which are complex128. Gradients of complex nodes follow the
convention grad_z = dL/dRe(z) + i dL/dIm(z) for a real-valued loss, so
every linear primitive back-propagates through its exact adjoint.

Inference reuses the same ops with constant (tape-less) variables; no node
is recorded in that mode, which the sampler asserts via
:func:`node_allocations`.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from . import fields

_EPS_ABS = 1e-12  # |z| gradient guard

_nodes_recorded = 0


def node_allocations() -> int:
    """Process-wide count of recorded tape nodes (sampler instrumentation)."""
    return _nodes_recorded


class Var:
    """A value, optionally bound to a node on a tape."""

    __slots__ = ("value", "tape", "nid")

    def __init__(self, value, tape: "Tape | None" = None, nid: int = -1):
        self.value = np.asarray(value)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, taped={self.tape is not None})"


class Tape:
    """Append-only record of primitive applications; single writer."""

    def __init__(self):
        self.nodes: list[list[tuple[int, object]]] = []

    def leaf(self, value) -> Var:
        return self._record(np.asarray(value, dtype=float), [])

    def _record(self, value, deps) -> Var:
        global _nodes_recorded
        _nodes_recorded += 1
        self.nodes.append(deps)
        return Var(value, self, len(self.nodes) - 1)

    def backward(self, loss: Var) -> list:
        """Gradients for every node reachable from ``loss`` (others stay None)."""
        if loss.tape is not self:
            raise ValueError("loss variable is not on this tape")
        if loss.value.shape != ():
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.nid] = np.asarray(1.0)
        for nid in range(loss.nid, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            for in_id, fn in self.nodes[nid]:
                contrib = fn(g)
                grads[in_id] = contrib if grads[in_id] is None else grads[in_id] + contrib
        return grads


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _tape_of(*vs: Var) -> Tape | None:
    tape = None
    for v in vs:
        if v.tape is not None:
            if tape is not None and tape is not v.tape:
                raise ValueError("operands live on different tapes")
            tape = v.tape
    return tape


def _emit(value, deps) -> Var:
    """Record a node for the taped dependencies; pure value otherwise."""
    tape = _tape_of(*(v for v, _ in deps))
    if tape is None:
        return Var(value)
    return tape._record(value, [(v.nid, fn) for v, fn in deps if v.tape is not None])


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return _emit(a.value + b.value, [(a, lambda g: g), (b, lambda g: g)])


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return _emit(a.value - b.value, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b) -> Var:
    """Pointwise product; a taped operand must already have the output shape."""
    a, b = _as_var(a), _as_var(b)
    out = a.value * b.value
    for v in (a, b):
        if v.tape is not None and v.value.shape != out.shape:
            raise ValueError("taped operand of mul must match the output shape")
    av, bv = a.value, b.value
    return _emit(out, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def smul(a, s: float) -> Var:
    a = _as_var(a)
    s = float(s)
    return _emit(a.value * s, [(a, lambda g: g * s)])


def bscale(x, s) -> Var:
    """Scale a (B, ...)-shaped value by a per-batch scalar of shape (B,)."""
    x, s = _as_var(x), _as_var(s)
    if s.value.shape != (x.value.shape[0],):
        raise ValueError(f"per-batch scale must have shape ({x.value.shape[0]},)")
    sv = s.value.reshape((-1,) + (1,) * (x.value.ndim - 1))
    xv = x.value
    axes = tuple(range(1, x.value.ndim))
    return _emit(xv * sv, [(x, lambda g: g * sv), (s, lambda g: (g * xv).sum(axis=axes))])


def add_channel_bias(x, b) -> Var:
    """(B, C, H, W) + per-sample channel bias of shape (B, C)."""
    x, b = _as_var(x), _as_var(b)
    return _emit(
        x.value + b.value[:, :, None, None],
        [(x, lambda g: g), (b, lambda g: g.sum(axis=(2, 3)))],
    )


# ---------------------------------------------------------------------------
# dense / pointwise

def affine(x, w, b=None) -> Var:
    """y = x @ w.T + b with x (B, n), w (m, n), b (m,)."""
    x, w = _as_var(x), _as_var(w)
    out = x.value @ w.value.T
    xv, wv = x.value, w.value
    deps = [(x, lambda g: g @ wv), (w, lambda g: g.T @ xv)]
    if b is not None:
        b = _as_var(b)
        out = out + b.value
        deps.append((b, lambda g: g.sum(axis=0)))
    return _emit(out, deps)


def relu(x) -> Var:
    x = _as_var(x)
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0.0), [(x, lambda g: g * mask)])


def gelu(x) -> Var:
    x = _as_var(x)
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xv**2) / np.sqrt(2.0 * np.pi)
    return _emit(xv * cdf, [(x, lambda g: g * (cdf + xv * pdf))])


def sigmoid(x) -> Var:
    x = _as_var(x)
    xv = x.value
    out = np.where(xv >= 0, 1.0 / (1.0 + np.exp(-np.maximum(xv, 0))),
                   np.exp(np.minimum(xv, 0)) / (1.0 + np.exp(np.minimum(xv, 0))))
    return _emit(out, [(x, lambda g: g * out * (1.0 - out))])


# ---------------------------------------------------------------------------
# convolutions

def conv1x1(x, w, b=None) -> Var:
    """Channelwise 1x1 convolution: x (B, C, H, W), w (O, C), b (O,)."""
    x, w = _as_var(x), _as_var(w)
    out = np.einsum("oc,bchw->bohw", w.value, x.value, optimize=True)
    xv, wv = x.value, w.value
    deps = [
        (x, lambda g: np.einsum("oc,bohw->bchw", wv, g, optimize=True)),
        (w, lambda g: np.einsum("bohw,bchw->oc", g, xv, optimize=True)),
    ]
    if b is not None:
        b = _as_var(b)
        out = out + b.value[None, :, None, None]
        deps.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _emit(out, deps)


def conv2d(x, w, b=None) -> Var:
    """Small k x k convolution (k odd, zero padded to same size).

    Runs as one im2col GEMM; the column matrix is kept for the backward
    weight gradient and the input gradient is a col2im scatter.
    """
    x, w = _as_var(x), _as_var(w)
    k = w.value.shape[-1]
    if w.value.shape[-2] != k or k % 2 != 1:
        raise ValueError(f"kernel must be odd square, got {w.value.shape}")
    o, c = w.value.shape[0], w.value.shape[1]
    bsz, _, hh, ww = x.value.shape
    pad = k // 2
    xp = np.ascontiguousarray(
        np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad))).transpose(0, 2, 3, 1)
    )
    cols = np.empty((bsz, hh, ww, k * k, c))
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i * k + j, :] = xp[:, i : i + hh, j : j + ww, :]
    cols2 = cols.reshape(bsz * hh * ww, k * k * c)
    wmat = w.value.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    out = (cols2 @ wmat).reshape(bsz, hh, ww, o).transpose(0, 3, 1, 2)

    def bwd_x(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(bsz * hh * ww, o)
        gcols = (g2 @ wmat.T).reshape(bsz, hh, ww, k * k, c)
        gxp = np.zeros((bsz, hh + 2 * pad, ww + 2 * pad, c))
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + hh, j : j + ww, :] += gcols[:, :, :, i * k + j, :]
        return gxp[:, pad : pad + hh, pad : pad + ww, :].transpose(0, 3, 1, 2)

    def bwd_w(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(bsz * hh * ww, o)
        return (cols2.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1)

    deps = [(x, bwd_x), (w, bwd_w)]
    if b is not None:
        b = _as_var(b)
        out = out + b.value[None, :, None, None]
        deps.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _emit(out, deps)


# ---------------------------------------------------------------------------
# spectral

def fft2(x) -> Var:
    """Unnormalized half-spectrum forward transform; exact adjoint backward."""
    x = _as_var(x)
    w = x.value.shape[-1]
    return _emit(fields.fft2(x.value), [(x, lambda g: fields.fft2_adjoint(g, width=w))])


def ifft2(x, width: int | None = None) -> Var:
    x = _as_var(x)
    return _emit(fields.ifft2(x.value, width=width), [(x, lambda g: fields.ifft2_adjoint(g))])


def as_complex(x) -> Var:
    """View a (..., 2) real array as complex (real/imag interleaved)."""
    x = _as_var(x)
    if x.value.shape[-1] != 2:
        raise ValueError("as_complex expects trailing dimension 2")
    out = x.value[..., 0] + 1j * x.value[..., 1]
    return _emit(out, [(x, lambda g: np.stack([g.real, g.imag], axis=-1))])


def cmul(a, b, conj_b: bool = False) -> Var:
    """Complex pointwise product a * b (or a * conj(b))."""
    a, b = _as_var(a), _as_var(b)
    av, bv = a.value, b.value
    if conj_b:
        out = av * np.conj(bv)
        deps = [(a, lambda g: g * bv), (b, lambda g: np.conj(g) * av)]
    else:
        out = av * bv
        deps = [(a, lambda g: g * np.conj(bv)), (b, lambda g: g * np.conj(av))]
    return _emit(out, deps)


def csum_channels(z) -> Var:
    """Sum a complex (B, C, ...) array over channels, keeping the axis."""
    z = _as_var(z)
    c = z.value.shape[1]
    return _emit(
        z.value.sum(axis=1, keepdims=True),
        [(z, lambda g: np.repeat(g, c, axis=1))],
    )


def cabs(z) -> Var:
    """Complex magnitude with an epsilon guard on the gradient at 0."""
    z = _as_var(z)
    mag = np.abs(z.value)
    zv = z.value
    safe = np.maximum(mag, _EPS_ABS)
    return _emit(mag, [(z, lambda g: g * zv / safe)])


def cspec_matmul(w, x) -> Var:
    """Per-mode channel contraction: w (O, I, Km, Kw) complex, x (B, I, Km, Kw).

    Evaluated as a batched matmul over modes so BLAS carries the work.
    """
    w, x = _as_var(w), _as_var(x)
    o, i_, km, kw = w.value.shape
    bsz = x.value.shape[0]
    wk = np.ascontiguousarray(w.value.transpose(2, 3, 0, 1)).reshape(km * kw, o, i_)
    xk = np.ascontiguousarray(x.value.transpose(2, 3, 1, 0)).reshape(km * kw, i_, bsz)
    out = (wk @ xk).reshape(km, kw, o, bsz).transpose(3, 2, 0, 1)

    def bwd_w(g):
        gk = np.ascontiguousarray(g.transpose(2, 3, 1, 0)).reshape(km * kw, o, bsz)
        gw = gk @ np.conj(xk).transpose(0, 2, 1)
        return gw.reshape(km, kw, o, i_).transpose(2, 3, 0, 1)

    def bwd_x(g):
        gk = np.ascontiguousarray(g.transpose(2, 3, 1, 0)).reshape(km * kw, o, bsz)
        gx = np.conj(wk).transpose(0, 2, 1) @ gk
        return gx.reshape(km, kw, i_, bsz).transpose(3, 2, 0, 1)

    return _emit(out, [(w, bwd_w), (x, bwd_x)])


def cscale(z, m) -> Var:
    """Complex z (B, C, ...) scaled by a real multiplier (B, 1, ...)."""
    z, m = _as_var(z), _as_var(m)
    zv, mv = z.value, m.value
    return _emit(
        zv * mv,
        [
            (z, lambda g: g * mv),
            (m, lambda g: (g * np.conj(zv)).real.sum(axis=1, keepdims=True)),
        ],
    )


def take_modes(s, m: int) -> Var:
    """Gather the retained low-frequency block: rows k1 in {-(m-1)..m-1},
    columns k2 in {0..m-1} of the half spectrum, as a (..., 2m-1, m) block.

    The row set is closed under the k -> -k mirror of the DC column, so
    modulating retained modes keeps the spectrum of a real field Hermitian.
    """
    s = _as_var(s)
    h, wh = s.value.shape[-2], s.value.shape[-1]
    if 2 * m > h or m > wh:
        raise ValueError(f"{m} modes exceed the {h}x{wh} half-spectrum")
    out = np.concatenate([s.value[..., :m, :m], s.value[..., h - m + 1 :, :m]], axis=-2)

    def bwd(g):
        full = np.zeros(g.shape[:-2] + (h, wh), dtype=g.dtype)
        full[..., :m, :m] = g[..., :m, :]
        full[..., h - m + 1 :, :m] = g[..., m:, :]
        return full

    return _emit(out, [(s, bwd)])


def put_modes(block, h: int, wh: int) -> Var:
    """Scatter a (..., 2m-1, m) block back into an (..., h, wh) zero spectrum."""
    block = _as_var(block)
    m = block.value.shape[-1]
    full = np.zeros(block.value.shape[:-2] + (h, wh), dtype=block.value.dtype)
    full[..., :m, :m] = block.value[..., :m, :]
    full[..., h - m + 1 :, :m] = block.value[..., m:, :]

    def bwd(g):
        return np.concatenate([g[..., :m, :m], g[..., h - m + 1 :, :m]], axis=-2)

    return _emit(full, [(block, bwd)])


def scale_modes(s, w) -> Var:
    """Per-mode gain: s (B, 1, Km, Kw) scaled by a learnable (Km, Kw) map."""
    s, w = _as_var(s), _as_var(w)
    sv, wv = s.value, w.value
    return _emit(
        sv * wv,
        [(s, lambda g: g * wv), (w, lambda g: (g * sv).sum(axis=(0, 1)))],
    )


def meanpool2(x) -> Var:
    """2x2 mean pooling over the spatial dims of (B, C, H, W)."""
    x = _as_var(x)
    b, c, h, w = x.value.shape
    out = x.value.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return _emit(out, [(x, lambda g: np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0)])


def upsample2(x) -> Var:
    """Bilinear 2x upsampling with the exact scatter adjoint as backward."""
    x = _as_var(x)
    h, w = x.value.shape[-2], x.value.shape[-1]
    lo_r, hi_r, t_r = fields._bilinear_taps(h * 2, 2)
    lo_c, hi_c, t_c = fields._bilinear_taps(w * 2, 2)
    out = fields.upsample(x.value, 2)

    def bwd(g):
        # adjoint of the column pass, then of the row pass
        rows = np.zeros(g.shape[:-1] + (w,))
        np.add.at(rows, (..., lo_c), g * (1 - t_c))
        np.add.at(rows, (..., hi_c), g * t_c)
        gx = np.zeros(rows.shape[:-2] + (h, w))
        rows_t = np.swapaxes(rows, -2, -1)
        acc = np.zeros(rows_t.shape[:-1] + (h,))
        np.add.at(acc, (..., lo_r), rows_t * (1 - t_r))
        np.add.at(acc, (..., hi_r), rows_t * t_r)
        gx = np.swapaxes(acc, -2, -1)
        return gx

    return _emit(out, [(x, bwd)])


def reshape(x, shape) -> Var:
    x = _as_var(x)
    old = x.value.shape
    return _emit(x.value.reshape(shape), [(x, lambda g: g.reshape(old))])


# ---------------------------------------------------------------------------
# reductions / layout

def mean_all(x) -> Var:
    x = _as_var(x)
    n = x.value.size
    shape = x.value.shape
    return _emit(np.asarray(x.value.mean()), [(x, lambda g: np.broadcast_to(g / n, shape).copy())])


def sum_all(x) -> Var:
    x = _as_var(x)
    shape = x.value.shape
    return _emit(np.asarray(x.value.sum()), [(x, lambda g: np.broadcast_to(g, shape).copy())])


def mean_spatial(x) -> Var:
    """(B, C, H, W) -> (B, C) mean over the spatial dims."""
    x = _as_var(x)
    h, w = x.value.shape[-2:]
    return _emit(
        x.value.mean(axis=(2, 3)),
        [(x, lambda g: np.repeat(np.repeat(g[:, :, None, None], h, 2), w, 3) / (h * w))],
    )


def concat_channels(parts) -> Var:
    parts = [_as_var(p) for p in parts]
    sizes = [p.value.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts], axis=1)

    def make_bwd(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[:, lo:hi]

    return _emit(out, [(p, make_bwd(i)) for i, p in enumerate(parts)])


def broadcast_channels(x, c: int) -> Var:
    """(B, 1, H, W) -> (B, C, H, W)."""
    x = _as_var(x)
    if x.value.shape[1] != 1:
        raise ValueError("broadcast_channels expects a single input channel")
    return _emit(
        np.repeat(x.value, c, axis=1),
        [(x, lambda g: g.sum(axis=1, keepdims=True))],
    )


def dropout(x, rate: float, rng: np.random.Generator) -> Var:
    """Train-mode inverted dropout; the mask is recorded for the backward pass."""
    x = _as_var(x)
    if rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.value.shape) < keep) / keep
    return _emit(x.value * mask, [(x, lambda g: g * mask)])


def groupnorm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Var:
    """Group normalization over (C/G, H, W) per sample, channel affine."""
    x, gamma, beta = _as_var(x), _as_var(gamma), _as_var(beta)
    b, c, h, w = x.value.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by {groups} groups")
    xg = x.value.reshape(b, groups, c // groups, h, w)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    std = np.sqrt(var + eps)
    xhat = ((xg - mu) / std).reshape(b, c, h, w)
    out = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]
    gv = gamma.value

    def bwd_x(g):
        ghat = (g * gv[None, :, None, None]).reshape(b, groups, c // groups, h, w)
        xh = xhat.reshape(b, groups, c // groups, h, w)
        m1 = ghat.mean(axis=(2, 3, 4), keepdims=True)
        m2 = (ghat * xh).mean(axis=(2, 3, 4), keepdims=True)
        return ((ghat - m1 - xh * m2) / std).reshape(b, c, h, w)

    return _emit(
        out,
        [
            (x, bwd_x),
            (gamma, lambda g: (g * xhat).sum(axis=(0, 2, 3))),
            (beta, lambda g: g.sum(axis=(0, 2, 3))),
        ],
    )


# ---------------------------------------------------------------------------
# optimization

def adam_step(params: dict, grads: dict, state: dict | None, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """In-place Adam update with bias correction; returns the updated state."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if state is None:
        state = {
            "step": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()},
        }
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state["m"][k]
        v = state["v"][k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def ema_decay(half_life_epochs: float, steps_per_epoch: int) -> float:
    if half_life_epochs <= 0:
        raise ValueError("half-life must be > 0")
    return 0.5 ** (1.0 / (half_life_epochs * steps_per_epoch))


def ema_update(shadow: dict, params: dict, half_life_epochs: float,
               steps_per_epoch: int) -> dict:
    """shadow <- d * shadow + (1 - d) * params with the half-life decay d."""
    d = ema_decay(half_life_epochs, steps_per_epoch)
    for k, p in params.items():
        shadow[k] = d * shadow[k] + (1.0 - d) * p
    return shadow


def numerical_gradient(loss_fn, arr: np.ndarray, step: float = 1e-5,
                       indices=None) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one array.

    ``loss_fn`` is re-evaluated with the mutated array; the array is restored
    afterwards. If ``indices`` is given, only those flat entries are probed
    (others are returned as NaN).
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn()
        flat[i] = orig - step
        lo = loss_fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return out.reshape(arr.shape)
