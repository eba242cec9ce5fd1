"""Dense float64 tensors with taped reverse-mode gradients and Adam.

The tape is a flat list of backward closures recorded in forward order;
``GradTape.backward`` replays it in reverse. Everything is float64 and
row-major so finite-difference checks can run at tight tolerances. Ops
outside an active tape skip all bookkeeping (the eval fast path).
"""

import threading

import numpy as np

from .errors import LabelError, OptimizerError, ShapeError

_local = threading.local()

# Validate op outputs for NaN/Inf. Costs ~3% at desk scale; keeps
# dimension and overflow bugs loud.
CHECK_FINITE = True


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """A dense float64 array plus an accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise ShapeError("tensor initialised with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray, owned: bool = False) -> None:
        """Add `g` to the stored gradient.

        `owned=True` promises the caller holds no other reference to `g`,
        letting a first accumulation adopt the array without copying.
        """
        if self.grad is None:
            self.grad = g if owned else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Parameter(Tensor):
    """A named leaf tensor that optimizers update in place."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class GradTape:
    """Records ops during forward; replays them in reverse on backward."""

    def __init__(self):
        self._ops = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("grad tapes do not nest")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = None
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for op in reversed(self._ops):
            op()
        self._ops.clear()


def _make(data: np.ndarray, inputs, backward) -> Tensor:
    """Wrap an op result; record `backward(out_grad)` if a tape is live."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ShapeError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True

        def _op():
            if out.grad is not None:
                backward(out.grad)

        tape._ops.append(_op)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def constant(data) -> Tensor:
    """A tensor that never receives gradient (detached input)."""
    return Tensor(data, requires_grad=False)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            a.accumulate_grad(ga, owned=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            b.accumulate_grad(gb, owned=gb is not g)

    return _make(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            a.accumulate_grad(ga, owned=ga is not g)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape), owned=True)

    return _make(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape), owned=True)

    return _make(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s, owned=True)

    return _make(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product with gradient to both operands."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul shape mismatch: {tuple(a.data.shape)} x {tuple(b.data.shape)}"
        )
    return _matmul_any(a, b)


def _matmul_any(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics (stacked matrices allowed) with backward."""
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            if b.data.ndim == 2:
                ga = g @ b.data.T
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
            a.accumulate_grad(ga, owned=True)
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # stacked activations against one weight: flatten to one gemm
                k = a.data.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
            b.accumulate_grad(gb, owned=True)

    return _make(out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) where x is (..., k) and w is (k, n). One fused node."""
    k, n = w.data.shape
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, k)
    out2 = x2 @ w.data
    if b is not None:
        out2 += b.data
    out = out2.reshape(*lead, n)

    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, n)
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data.T).reshape(x.data.shape), owned=True)
        if w.requires_grad:
            w.accumulate_grad(x2.T @ g2, owned=True)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0), owned=True)

    return _make(out, inputs, backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _make(out, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inverse))

    return _make(out, (a,), backward)


def take_position(a: Tensor, pos: int) -> Tensor:
    """Select one index of axis 1, e.g. (B, T, d) -> (B, d)."""
    out = np.ascontiguousarray(a.data[:, pos])

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, pos] = g
            a.accumulate_grad(full, owned=True)

    return _make(out, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` (V, d) at integer `ids` (any shape)."""
    ids = np.asarray(ids)
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table.accumulate_grad(full, owned=True)

    return _make(out, (table,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out * out), owned=True)

    return _make(out, (a,), backward)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Smooth tanh-form gelu; derivative is exact for this form."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_K * x * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            da = x2 * (3.0 * _GELU_K)
            da += 1.0
            da *= _GELU_C
            sech2 = t * t
            np.subtract(1.0, sech2, out=sech2)
            da *= sech2
            da *= x
            da += 1.0 + t
            da *= 0.5
            da *= g
            a.accumulate_grad(da, owned=True)

    return _make(out, (a,), backward)


def attention_heads(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray,
                    n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention as one fused node.

    q, k, v are (B, T, d); `key_mask` is (B, 1, 1, T) additive (0 for real
    keys, a large negative number for padding). Returns (B, T, d).
    """
    B, T, d = q.data.shape
    dh = d // n_heads
    s = 1.0 / np.sqrt(dh)

    def split(x):
        return x.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = qh @ kh.transpose(0, 1, 3, 2)
    scores *= s
    scores += key_mask
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    weights = scores  # (B, H, T, T)
    out = (weights @ vh).transpose(0, 2, 1, 3).reshape(B, T, d)

    def backward(g):
        g_ctx = g.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
        if v.requires_grad:
            gvh = weights.transpose(0, 1, 3, 2) @ g_ctx
            v.accumulate_grad(gvh.transpose(0, 2, 1, 3).reshape(B, T, d), owned=True)
        if q.requires_grad or k.requires_grad:
            gw = g_ctx @ vh.transpose(0, 1, 3, 2)
            gs = weights * (gw - (gw * weights).sum(axis=-1, keepdims=True))
            gs *= s
            if q.requires_grad:
                gqh = gs @ kh
                q.accumulate_grad(gqh.transpose(0, 2, 1, 3).reshape(B, T, d), owned=True)
            if k.requires_grad:
                gkh = gs.transpose(0, 1, 3, 2) @ qh
                k.accumulate_grad(gkh.transpose(0, 2, 1, 3).reshape(B, T, d), owned=True)

    return _make(out, (q, k, v), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stabilised softmax over a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got shape {x.data.shape}")
    return softmax_last(x)


def softmax_last(x: Tensor) -> Tensor:
    """Stabilised softmax over the last axis of any-rank input."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out * (g - dot), owned=True)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0), owned=True)
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0), owned=True)
        if x.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=-1, keepdims=True)
            term -= xhat * ((gx * xhat).mean(axis=-1, keepdims=True))
            term *= inv
            x.accumulate_grad(term, owned=True)

    return _make(out, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true classes.

    Gradient w.r.t. logits is (softmax - onehot) / m.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs (m, c) logits, got shape {logits.data.shape}")
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != logits.data.shape[0]:
        raise ShapeError(
            f"cross_entropy label count {y.shape} does not match logits rows "
            f"{logits.data.shape[0]}"
        )
    m, c = logits.data.shape
    for i, lab in enumerate(y):
        if lab < 0 or lab >= c:
            raise LabelError(f"label {int(lab)} at index {i} outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(m), y])
    out = np.asarray(nll.mean())

    def backward(g):
        if logits.requires_grad:
            grad = probs.copy()
            grad[np.arange(m), y] -= 1.0
            grad *= float(g) / m
            logits.accumulate_grad(grad, owned=True)

    return _make(out, (logits,), backward)


def frobenius_norm(a: Tensor) -> Tensor:
    """sqrt(sum of squares) over all entries; zero input gets zero grad."""
    f = float(np.sqrt(np.sum(a.data * a.data)))
    out = np.asarray(f)

    def backward(g):
        if a.requires_grad:
            if f > 0.0:
                a.accumulate_grad(a.data * (float(g) / f), owned=True)
            else:  # subgradient choice at the origin
                a.accumulate_grad(np.zeros_like(a.data), owned=True)

    return _make(out, (a,), backward)


def sum_square(a: Tensor) -> Tensor:
    out = np.asarray(np.sum(a.data * a.data))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(a.data * (2.0 * float(g)), owned=True)

    return _make(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / n), owned=True)

    return _make(out, (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. Callers skip this entirely in eval mode."""
    if p <= 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return mul(a, constant(mask))


class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params, state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update over `params`, in place.

    `lr` overrides the state's base rate for this step (schedulers).
    """
    for p in params:
        if p.grad is None:
            raise OptimizerError(f"parameter {p.name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise OptimizerError(
                f"parameter {p.name!r} gradient shape {p.grad.shape} "
                f"!= value shape {p.data.shape}"
            )
    state.step += 1
    t = state.step
    rate = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * (p.grad * p.grad)
        p.data -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)


def grad_check(loss_fn, params, h: float = 1e-5, samples_per_param: int = 25,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between taped and central-difference gradients.

    `loss_fn` must be a deterministic closure over `params` returning a
    scalar Tensor. Relative error is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-8), maximised over sampled coordinates.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}
    worst = 0.0
    for p in params:
        n = p.data.size
        if n <= samples_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=samples_per_param, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            original = flat[c]
            flat[c] = original + h
            up = loss_fn().item()
            flat[c] = original - h
            down = loss_fn().item()
            flat[c] = original
            numeric = (up - down) / (2.0 * h)
            a = float(analytic[p.name].reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
